//! Corpus ingestion and task-dataset construction.
//!
//! Inputs are a chapter-marked UTF-8 text plus two JSON-lines sidecars for
//! plot units and character profiles. Builders turn these into Alpaca-style
//! instruction records, one dataset per curriculum task.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::TaskId;
use crate::tokenizer::{Tokenizer, TokenSequence, BOS, EOS, SEP};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chapter {
    pub index: usize,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NovelCorpus {
    pub title: String,
    pub chapters: Vec<Chapter>,
}

/// One narrative section with its summary and char-span into the chapter body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotUnit {
    pub chapter: usize,
    pub index: usize,
    pub summary: String,
    /// char offsets into the chapter body, [start, end)
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Annotations {
    pub plots: Vec<PlotUnit>,
    pub profiles: Vec<CharacterProfile>,
}

/// Alpaca-style record extended with the task id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task_id: TaskId,
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// Inclusive chapter-index ranges for the train/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_from: usize,
    pub train_to: usize,
    pub test_from: usize,
    pub test_to: usize,
}

pub const WORLD_INSTRUCTION: &str = "profile:";
pub const PLOT_INSTRUCTION: &str = "next plot:";
pub const WRITE_INSTRUCTION: &str = "write:";

/// Everything that must be covered by the character vocabulary.
pub fn vocab_text(corpus: &NovelCorpus, ann: &Annotations) -> String {
    let mut s = String::new();
    s.push_str(WORLD_INSTRUCTION);
    s.push_str(PLOT_INSTRUCTION);
    s.push_str(WRITE_INSTRUCTION);
    s.push('\n');
    for ch in &corpus.chapters {
        s.push_str(&ch.body);
        s.push('\n');
    }
    for p in &ann.plots {
        s.push_str(&p.summary);
        s.push('\n');
    }
    for c in &ann.profiles {
        s.push_str(&c.name);
        s.push_str(&c.description);
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const CHAPTER_MARKER: &str = "## CHAPTER ";

pub fn parse_corpus_text(text: &str) -> Result<NovelCorpus> {
    let mut title = String::new();
    let mut chapters: Vec<Chapter> = Vec::new();
    let mut current: Option<Chapter> = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix(CHAPTER_MARKER) {
            if let Some(ch) = current.take() {
                chapters.push(ch);
            }
            let mut parts = rest.splitn(2, ' ');
            let idx: usize = parts
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Ingest(format!("bad chapter marker line: {:?}", line)))?;
            current = Some(Chapter {
                index: idx,
                title: parts.next().unwrap_or("").to_string(),
                body: String::new(),
            });
        } else if let Some(ch) = current.as_mut() {
            ch.body.push_str(line);
            ch.body.push('\n');
        } else if let Some(t) = line.strip_prefix("# ") {
            title = t.to_string();
        } else if !line.trim().is_empty() {
            return Err(Error::Ingest(format!("text before first chapter marker: {:?}", line)));
        }
    }
    if let Some(ch) = current.take() {
        chapters.push(ch);
    }
    for (i, ch) in chapters.iter().enumerate() {
        if ch.index != i + 1 {
            return Err(Error::Ingest(format!(
                "gap in chapter indices: expected {}, found {}",
                i + 1,
                ch.index
            )));
        }
        if ch.body.trim().is_empty() {
            return Err(Error::Ingest(format!("chapter {} has an empty body", ch.index)));
        }
    }
    if chapters.is_empty() {
        return Err(Error::Ingest("corpus contains no chapters".into()));
    }
    Ok(NovelCorpus { title, chapters })
}

pub fn render_corpus_text(corpus: &NovelCorpus) -> String {
    let mut out = String::new();
    if !corpus.title.is_empty() {
        let _ = writeln!(out, "# {}", corpus.title);
    }
    for ch in &corpus.chapters {
        let _ = writeln!(out, "{}{} {}", CHAPTER_MARKER, ch.index, ch.title);
        out.push_str(&ch.body);
        if !ch.body.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Ingest(format!("{} line {}: {}", what, i + 1, e)))
        })
        .collect()
}

/// Load and cross-validate a corpus with its sidecar annotations.
pub fn load_corpus(
    corpus_path: &Path,
    plots_path: &Path,
    profiles_path: &Path,
) -> Result<(NovelCorpus, Annotations)> {
    let corpus = parse_corpus_text(&fs::read_to_string(corpus_path)?)?;
    let plots: Vec<PlotUnit> = parse_jsonl(&fs::read_to_string(plots_path)?, "plots.jsonl")?;
    let profiles: Vec<CharacterProfile> =
        parse_jsonl(&fs::read_to_string(profiles_path)?, "profiles.jsonl")?;
    let ann = Annotations { plots, profiles };
    validate(&corpus, &ann)?;
    Ok((corpus, ann))
}

pub fn validate(corpus: &NovelCorpus, ann: &Annotations) -> Result<()> {
    for p in &ann.plots {
        let ch = corpus
            .chapters
            .iter()
            .find(|c| c.index == p.chapter)
            .ok_or_else(|| {
                Error::Ingest(format!("plot {}/{} names unknown chapter", p.chapter, p.index))
            })?;
        let body_chars = ch.body.chars().count();
        if p.start >= p.end || p.end > body_chars {
            return Err(Error::Ingest(format!(
                "plot {}/{} span {}..{} exceeds chapter of {} chars",
                p.chapter, p.index, p.start, p.end, body_chars
            )));
        }
        if p.summary.trim().is_empty() {
            return Err(Error::Ingest(format!("plot {}/{} has empty summary", p.chapter, p.index)));
        }
    }
    // spans within a chapter: ordered by plot index, non-overlapping
    for ch in &corpus.chapters {
        let mut units: Vec<&PlotUnit> = ann.plots.iter().filter(|p| p.chapter == ch.index).collect();
        units.sort_by_key(|p| p.index);
        for pair in units.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::Ingest(format!(
                    "plots {}/{} and {}/{} overlap",
                    pair[0].chapter, pair[0].index, pair[1].chapter, pair[1].index
                )));
            }
        }
    }
    let mut names = std::collections::BTreeSet::new();
    for c in &ann.profiles {
        if !names.insert(&c.name) {
            return Err(Error::Ingest(format!("duplicate character name '{}'", c.name)));
        }
    }
    Ok(())
}

pub fn segment_text<'a>(corpus: &'a NovelCorpus, plot: &PlotUnit) -> Result<String> {
    let ch = corpus
        .chapters
        .iter()
        .find(|c| c.index == plot.chapter)
        .ok_or_else(|| Error::Ingest(format!("plot names unknown chapter {}", plot.chapter)))?;
    let _ = &ch.body;
    Ok(ch.body.chars().skip(plot.start).take(plot.end - plot.start).collect())
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

/// Partition by chapter index. Returns (train, test, warning) where warning
/// is set when the test side came out empty.
pub fn split(
    corpus: &NovelCorpus,
    ann: &Annotations,
    spec: &SplitSpec,
) -> Result<((NovelCorpus, Annotations), (NovelCorpus, Annotations), Option<String>)> {
    let max = corpus.chapters.len();
    let covers = |i: usize| {
        (i >= spec.train_from && i <= spec.train_to) || (i >= spec.test_from && i <= spec.test_to)
    };
    if spec.train_to >= spec.test_from && spec.test_to >= spec.train_from {
        return Err(Error::Config("train and test chapter ranges overlap".into()));
    }
    for i in 1..=max {
        if !covers(i) {
            return Err(Error::Config(format!("chapter {} covered by neither split range", i)));
        }
    }
    let take = |from: usize, to: usize| {
        let chapters: Vec<Chapter> = corpus
            .chapters
            .iter()
            .filter(|c| c.index >= from && c.index <= to)
            .cloned()
            .collect();
        let plots = ann
            .plots
            .iter()
            .filter(|p| p.chapter >= from && p.chapter <= to)
            .cloned()
            .collect();
        (
            NovelCorpus { title: corpus.title.clone(), chapters },
            Annotations { plots, profiles: ann.profiles.clone() },
        )
    };
    let train = take(spec.train_from, spec.train_to);
    let test = take(spec.test_from, spec.test_to);
    let warning = if test.0.chapters.is_empty() {
        Some("test split is empty; evaluation will have no held-out chapters".to_string())
    } else {
        None
    };
    Ok((train, test, warning))
}

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

/// Sliding windows of `window` tokens with the given stride over the
/// concatenated chapter text. Loss applies everywhere after BOS.
pub fn build_foundation_dataset(
    corpus: &NovelCorpus,
    tokenizer: &Tokenizer,
    window: usize,
    stride: usize,
) -> Result<Vec<TaskExample>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be >= 1".into()));
    }
    let mut text = String::new();
    for ch in &corpus.chapters {
        text.push_str(&ch.body);
    }
    let ids = tokenizer.encode(&text)?;
    let mut out = Vec::new();
    if ids.len() < window {
        out.push(TaskExample {
            task_id: TaskId::Foundation,
            instruction: String::new(),
            input: String::new(),
            output: text,
        });
        return Ok(out);
    }
    let count = (ids.len() - window) / stride + 1;
    for w in 0..count {
        let chunk = &ids[w * stride..w * stride + window];
        out.push(TaskExample {
            task_id: TaskId::Foundation,
            instruction: String::new(),
            input: String::new(),
            output: tokenizer.decode(chunk),
        });
    }
    Ok(out)
}

/// One example per profile, ordered by name: input = name, output = profile.
pub fn build_world_dataset(profiles: &[CharacterProfile]) -> Result<Vec<TaskExample>> {
    if profiles.is_empty() {
        return Err(Error::Data("no character profiles to build the world dataset".into()));
    }
    let mut sorted: Vec<&CharacterProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(sorted
        .iter()
        .map(|c| TaskExample {
            task_id: TaskId::World,
            instruction: WORLD_INSTRUCTION.to_string(),
            input: c.name.clone(),
            output: c.description.clone(),
        })
        .collect())
}

/// Full-window next-plot examples: each target needs exactly `n_p`
/// predecessors. Summaries are newline-joined in the input field; the
/// serializer turns those joins into SEP tokens.
pub fn build_plot_dataset(
    plots: &[PlotUnit],
    n_p: usize,
    cross_chapters: bool,
) -> Result<(Vec<TaskExample>, Option<String>)> {
    if n_p == 0 {
        return Err(Error::Config("plot context window n_p must be >= 1".into()));
    }
    let mut ordered: Vec<&PlotUnit> = plots.iter().collect();
    ordered.sort_by_key(|p| (p.chapter, p.index));
    let mut out = Vec::new();
    for t in n_p..ordered.len() {
        let ctx = &ordered[t - n_p..t];
        if !cross_chapters && ctx.iter().any(|p| p.chapter != ordered[t].chapter) {
            continue;
        }
        let input: Vec<&str> = ctx.iter().map(|p| p.summary.as_str()).collect();
        out.push(TaskExample {
            task_id: TaskId::Plot,
            instruction: PLOT_INSTRUCTION.to_string(),
            input: input.join("\n"),
            output: ordered[t].summary.clone(),
        });
    }
    let warning = if out.is_empty() {
        Some(format!("fewer than {} plots: plot dataset is empty", n_p + 1))
    } else {
        None
    };
    Ok((out, warning))
}

/// One example per plot: input = summary, output = the exact segment text.
pub fn build_writing_dataset(
    plots: &[PlotUnit],
    corpus: &NovelCorpus,
) -> Result<Vec<TaskExample>> {
    let mut ordered: Vec<&PlotUnit> = plots.iter().collect();
    ordered.sort_by_key(|p| (p.chapter, p.index));
    ordered
        .iter()
        .map(|p| {
            Ok(TaskExample {
                task_id: TaskId::Writing,
                instruction: WRITE_INSTRUCTION.to_string(),
                input: p.summary.clone(),
                output: segment_text(corpus, p)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization to token sequences
// ---------------------------------------------------------------------------

/// Serialize a record as BOS, task tag, instruction, SEP, input, SEP,
/// output, EOS with loss from the first output token through EOS.
/// Foundation windows serialize as BOS + text with loss everywhere after BOS.
/// Newlines in the input field become SEP tokens (the plot-context join).
/// Returns the sequence and whether truncation to `max_len` occurred.
pub fn serialize_example(
    ex: &TaskExample,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<(TokenSequence, bool)> {
    let mut ids = vec![BOS];
    if ex.task_id == TaskId::Foundation {
        ids.extend(tokenizer.encode(&ex.output)?);
        let mut mask = vec![true; ids.len()];
        mask[0] = false;
        let mut seq = TokenSequence::new(ids, mask)?;
        let cut = seq.truncate(max_len);
        return Ok((seq, cut));
    }
    ids.push(Tokenizer::task_tag(ex.task_id)?);
    ids.extend(tokenizer.encode(&ex.instruction)?);
    ids.push(SEP);
    for (i, part) in ex.input.split('\n').enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(tokenizer.encode(part)?);
    }
    ids.push(SEP);
    let prompt_len = ids.len();
    ids.extend(tokenizer.encode(&ex.output)?);
    ids.push(EOS);
    let mut mask = vec![false; prompt_len];
    mask.extend(std::iter::repeat(true).take(ids.len() - prompt_len));
    let mut seq = TokenSequence::new(ids, mask)?;
    let cut = seq.truncate(max_len);
    if seq.len() <= prompt_len.min(max_len) {
        return Err(Error::Data("example truncated to nothing but prompt".into()));
    }
    Ok((seq, cut))
}

/// The prompt prefix for generation: everything up to and including the SEP
/// that precedes the output.
pub fn serialize_prompt(
    task: TaskId,
    instruction: &str,
    input_parts: &[&str],
    tokenizer: &Tokenizer,
) -> Result<Vec<usize>> {
    let mut ids = vec![BOS, Tokenizer::task_tag(task)?];
    ids.extend(tokenizer.encode(instruction)?);
    ids.push(SEP);
    for (i, part) in input_parts.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(tokenizer.encode(part)?);
    }
    ids.push(SEP);
    Ok(ids)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<TaskExample>> {
    parse_jsonl(&fs::read_to_string(path)?, "dataset")
}
