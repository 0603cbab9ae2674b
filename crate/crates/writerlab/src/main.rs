//! writerlab command-line front end.
//!
//! Subcommands: synth, ingest, build-datasets, train, generate, evaluate.
//! Each run resolves its configuration (file + flags; API keys env-only),
//! writes it with input hashes into a timestamped run directory, and prints
//! `RUN_DIR <path>` so callers can find the artifacts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config, 3 staging/lineage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use writerlab::checkpoint;
use writerlab::chat::HttpChatClient;
use writerlab::corpus::{self, SplitSpec};
use writerlab::error::{Error, Result};
use writerlab::generate::{plan_story, write_story, GenerationConfig, StoryOutput};
use writerlab::judge::JudgeConfig;
use writerlab::lora::{attach, AdapterMode, AdapterSpec, TaskId};
use writerlab::model::{Model, ModelConfig};
use writerlab::optim::TrainConfig;
use writerlab::report::{evaluate_run, EvalMode};
use writerlab::rouge::TokenMode;
use writerlab::synth::{self, SynthSize};
use writerlab::tokenizer::Tokenizer;
use writerlab::trainer::{
    run_curriculum, Ablation, StagePlan, StagePlanEntry, TrainItem,
};

// ---------------------------------------------------------------------------
// Configuration file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DataConfig {
    /// foundation window length (tokens) and stride
    window: usize,
    stride: usize,
    /// plot context size N_p
    n_p: usize,
    cross_chapters: bool,
    /// serialized-sequence cap
    max_len: usize,
    /// inclusive chapter ranges; 0 = derive a 2:1 split from the corpus
    train_from: usize,
    train_to: usize,
    test_from: usize,
    test_to: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window: 64,
            stride: 32,
            n_p: 3,
            cross_chapters: true,
            max_len: 256,
            train_from: 0,
            train_to: 0,
            test_from: 0,
            test_to: 0,
        }
    }
}

impl DataConfig {
    fn split_spec(&self, n_chapters: usize) -> Result<SplitSpec> {
        if self.train_to == 0 && self.test_to == 0 {
            if n_chapters < 3 {
                return Err(Error::Config("corpus too small to split".into()));
            }
            let cut = n_chapters * 2 / 3;
            return Ok(SplitSpec {
                train_from: 1,
                train_to: cut,
                test_from: cut + 1,
                test_to: n_chapters,
            });
        }
        Ok(SplitSpec {
            train_from: self.train_from.max(1),
            train_to: self.train_to,
            test_from: self.test_from,
            test_to: self.test_to,
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    adapter: AdapterSpec,
    train: TrainConfig,
    data: DataConfig,
    generation: GenerationConfig,
    judge: JudgeConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "writerlab", version, about = "Curriculum-trained adapter laboratory: ingest a corpus, train task-gated low-rank adapters, generate stories, evaluate them.")]
struct Cli {
    /// TOML configuration file; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic toy corpus
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// corpus size: tiny | small
        #[arg(long, default_value = "small")]
        size: String,
        /// output directory (run directory is created inside)
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a corpus + sidecars and copy them normalized
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plots: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split the corpus and build the four task datasets
    BuildDatasets {
        /// directory holding corpus.txt, plots.jsonl, profiles.jsonl
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the curriculum (or one stage, resuming from a checkpoint)
    Train {
        /// dataset directory produced by build-datasets
        #[arg(long)]
        data: PathBuf,
        /// foundation | world | plot | writing | all
        #[arg(long, default_value = "all")]
        stage: String,
        /// none | no-curriculum | single-lora | unfreeze-a
        #[arg(long, default_value = "none")]
        ablation: String,
        /// checkpoint directory to resume from (required for a single
        /// non-foundation stage)
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage story generation from a trained checkpoint
    Generate {
        /// stage checkpoint directory (model + adapters)
        #[arg(long)]
        checkpoint: PathBuf,
        /// optional file with gold seed summaries, one per line
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidates against references (ROUGE + optional LLM judge)
    Evaluate {
        /// JSON-lines of {"id": ..., "text": ...}
        #[arg(long)]
        candidates: PathBuf,
        /// JSON-lines of {"id": ..., "text": ...}
        #[arg(long)]
        references: PathBuf,
        /// writing | plot-planning
        #[arg(long, default_value = "writing")]
        mode: String,
        /// word | char | auto
        #[arg(long, default_value = "auto")]
        token_mode: String,
        /// enable the LLM judge (requires JUDGE_API_URL / JUDGE_API_KEY)
        #[arg(long, default_value_t = false)]
        judge: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Run-directory bookkeeping
// ---------------------------------------------------------------------------

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn make_run_dir(out: &Path, label: &str) -> Result<PathBuf> {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_err(|e| Error::Data(e.to_string()))?
        .as_millis();
    let mut dir = out.join(format!("{}-{}", millis, label));
    let mut n = 0;
    while dir.exists() {
        n += 1;
        dir = out.join(format!("{}-{}-{}", millis, label, n));
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Resolved config, tool version, and input hashes, stored with the run.
fn write_provenance(
    run_dir: &Path,
    config: &RunConfig,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let toml_text = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("serializing config: {}", e)))?;
    fs::write(run_dir.join("resolved_config.toml"), toml_text)?;
    let mut hashes = BTreeMap::new();
    for (name, path) in inputs {
        hashes.insert(name.to_string(), sha256_file(path)?);
    }
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "input_hashes": hashes,
    });
    fs::write(run_dir.join("run.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn cmd_synth(config: &RunConfig, seed: u64, size: &str, out: &Path) -> Result<PathBuf> {
    let size = SynthSize::parse(size)
        .ok_or_else(|| Error::Config(format!("unknown synth size '{}'", size)))?;
    let run_dir = make_run_dir(out, "synth")?;
    let (corpus, ann) = synth::generate(seed, size);
    synth::write_to_dir(&run_dir, &corpus, &ann)?;
    write_provenance(&run_dir, config, &[])?;
    Ok(run_dir)
}

fn cmd_ingest(
    config: &RunConfig,
    corpus_path: &Path,
    plots_path: &Path,
    profiles_path: &Path,
    out: &Path,
) -> Result<PathBuf> {
    let (corpus, ann) = corpus::load_corpus(corpus_path, plots_path, profiles_path)?;
    let run_dir = make_run_dir(out, "ingest")?;
    fs::write(run_dir.join("corpus.txt"), corpus::render_corpus_text(&corpus))?;
    corpus::write_jsonl(&run_dir.join("plots.jsonl"), &ann.plots)?;
    corpus::write_jsonl(&run_dir.join("profiles.jsonl"), &ann.profiles)?;
    write_provenance(
        &run_dir,
        config,
        &[("corpus", corpus_path), ("plots", plots_path), ("profiles", profiles_path)],
    )?;
    Ok(run_dir)
}

fn dataset_paths(dir: &Path) -> [(TaskId, PathBuf); 4] {
    [
        (TaskId::Foundation, dir.join("foundation.jsonl")),
        (TaskId::World, dir.join("world.jsonl")),
        (TaskId::Plot, dir.join("plot.jsonl")),
        (TaskId::Writing, dir.join("writing.jsonl")),
    ]
}

fn cmd_build_datasets(config: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf> {
    let corpus_path = data.join("corpus.txt");
    let plots_path = data.join("plots.jsonl");
    let profiles_path = data.join("profiles.jsonl");
    let (full, ann) = corpus::load_corpus(&corpus_path, &plots_path, &profiles_path)?;
    let spec = config.data.split_spec(full.chapters.len())?;
    let ((train, train_ann), (test, test_ann), warning) = corpus::split(&full, &ann, &spec)?;
    if let Some(w) = warning {
        eprintln!("warning: {}", w);
    }

    // vocabulary covers the whole corpus so held-out prompts stay encodable
    let tokenizer = Tokenizer::build_vocab(&corpus::vocab_text(&full, &ann))?;

    let run_dir = make_run_dir(out, "datasets")?;
    let d = &config.data;
    let foundation =
        corpus::build_foundation_dataset(&train, &tokenizer, d.window, d.stride)?;
    let world = corpus::build_world_dataset(&train_ann.profiles)?;
    let (plot, plot_warning) =
        corpus::build_plot_dataset(&train_ann.plots, d.n_p, d.cross_chapters)?;
    if let Some(w) = plot_warning {
        eprintln!("warning: {}", w);
    }
    let writing = corpus::build_writing_dataset(&train_ann.plots, &train)?;
    for (examples, path) in [
        (&foundation, run_dir.join("foundation.jsonl")),
        (&world, run_dir.join("world.jsonl")),
        (&plot, run_dir.join("plot.jsonl")),
        (&writing, run_dir.join("writing.jsonl")),
    ] {
        corpus::write_jsonl(&path, examples)?;
    }

    // held-out side, for evaluation and ablation measurements
    let (test_plot, _) = corpus::build_plot_dataset(&test_ann.plots, d.n_p, d.cross_chapters)?;
    let test_writing = corpus::build_writing_dataset(&test_ann.plots, &test)?;
    corpus::write_jsonl(&run_dir.join("test_plot.jsonl"), &test_plot)?;
    corpus::write_jsonl(&run_dir.join("test_writing.jsonl"), &test_writing)?;

    fs::write(run_dir.join("tokenizer.json"), serde_json::to_vec_pretty(&tokenizer)?)?;
    let stats = serde_json::json!({
        "chapters": full.chapters.len(),
        "train_chapters": train.chapters.len(),
        "test_chapters": test.chapters.len(),
        "split": spec,
        "vocab_size": tokenizer.vocab_size(),
        "examples": {
            "foundation": foundation.len(),
            "world": world.len(),
            "plot": plot.len(),
            "writing": writing.len(),
            "test_plot": test_plot.len(),
            "test_writing": test_writing.len(),
        },
    });
    fs::write(run_dir.join("stats.json"), serde_json::to_vec_pretty(&stats)?)?;
    write_provenance(
        &run_dir,
        config,
        &[("corpus", &corpus_path), ("plots", &plots_path), ("profiles", &profiles_path)],
    )?;
    Ok(run_dir)
}

fn load_items(
    path: &Path,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<Vec<TrainItem>> {
    let examples = corpus::read_examples(path)?;
    examples
        .iter()
        .map(|ex| {
            let (seq, _) = corpus::serialize_example(ex, tokenizer, max_len)?;
            Ok(TrainItem { task: ex.task_id, seq })
        })
        .collect()
}

fn cmd_train(
    config: &RunConfig,
    data: &Path,
    stage: &str,
    ablation: &str,
    resume: Option<&Path>,
    out: &Path,
) -> Result<PathBuf> {
    let ablation = Ablation::parse(ablation)?;
    let tokenizer: Tokenizer = {
        let mut t: Tokenizer =
            serde_json::from_str(&fs::read_to_string(data.join("tokenizer.json"))?)?;
        t.reindex();
        t
    };

    let stages: Vec<TaskId> = match stage {
        "all" => TaskId::CURRICULUM.to_vec(),
        s => vec![TaskId::parse(s)?],
    };
    if stages.len() == 1 && stages[0] != TaskId::Foundation && resume.is_none() {
        return Err(Error::Staging(format!(
            "stage {} needs --resume with the previous stage's checkpoint",
            stages[0]
        )));
    }

    // model + adapters: fresh, or restored from the resume checkpoint
    let (model, mut adapters) = match resume {
        Some(dir) => {
            let (model, _tok) = checkpoint::load_model(dir)?;
            let adapters = checkpoint::load_adapters(dir)?;
            (model, adapters)
        }
        None => {
            let mut model_cfg = config.model.clone();
            if model_cfg.vocab_size == 0 {
                model_cfg.vocab_size = tokenizer.vocab_size();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            let model = Model::new(model_cfg, &mut rng)?;
            let mut spec = config.adapter.clone();
            if ablation == Ablation::SingleLora {
                spec.mode = AdapterMode::PlainLora;
            }
            if spec.target_matrices.is_empty() {
                spec.target_matrices = model.default_adapter_targets();
            }
            let adapters = attach(&model.adapter_targets(), &spec, &mut rng)?;
            (model, adapters)
        }
    };

    let mut entries = Vec::new();
    for (task, path) in dataset_paths(data) {
        if !stages.contains(&task) {
            continue;
        }
        entries.push(StagePlanEntry {
            task,
            items: load_items(&path, &tokenizer, config.data.max_len)?,
            config: None,
        });
    }
    let plan = StagePlan {
        stages: entries,
        ablation,
    };

    let run_dir = make_run_dir(out, "train")?;
    let report =
        run_curriculum(&model, &tokenizer, &mut adapters, &plan, &config.train, Some(&run_dir))?;
    fs::write(run_dir.join("train_report.json"), serde_json::to_vec_pretty(&report)?)?;
    write_provenance(&run_dir, config, &[("tokenizer", &data.join("tokenizer.json"))])?;
    Ok(run_dir)
}

fn cmd_generate(
    config: &RunConfig,
    checkpoint_dir: &Path,
    context: Option<&Path>,
    out: &Path,
) -> Result<PathBuf> {
    let (model, tokenizer) = checkpoint::load_model(checkpoint_dir)?;
    let adapters = checkpoint::load_adapters(checkpoint_dir)?;
    let seed_context: Vec<String> = match context {
        None => Vec::new(),
        Some(path) => fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect(),
    };
    let gen = &config.generation;
    let plan = plan_story(&model, &tokenizer, &adapters, &seed_context, gen)?;
    let chapter = write_story(&model, &tokenizer, &adapters, &plan, gen)?;
    let run_dir = make_run_dir(out, "generate")?;
    let output = StoryOutput {
        plan: plan.summaries.clone(),
        segments: chapter.segments.clone(),
        config: gen.clone(),
        checkpoint_hash: Some(checkpoint::checkpoint_hash(checkpoint_dir)?),
    };
    fs::write(run_dir.join("story.json"), serde_json::to_vec_pretty(&output)?)?;
    fs::write(run_dir.join("story.txt"), &chapter.chapter)?;
    // id-keyed copies for evaluate
    let plots: Vec<serde_json::Value> = plan
        .summaries
        .iter()
        .enumerate()
        .map(|(i, s)| serde_json::json!({"id": format!("plot-{:04}", i), "text": s}))
        .collect();
    let segments: Vec<serde_json::Value> = chapter
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| serde_json::json!({"id": format!("segment-{:04}", i), "text": s}))
        .collect();
    corpus::write_jsonl(&run_dir.join("plan.jsonl"), &plots)?;
    corpus::write_jsonl(&run_dir.join("segments.jsonl"), &segments)?;
    write_provenance(&run_dir, config, &[])?;
    Ok(run_dir)
}

#[derive(Deserialize)]
struct EvalItem {
    id: String,
    text: String,
}

fn read_eval_items(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let item: EvalItem = serde_json::from_str(line)
                .map_err(|e| Error::Ingest(format!("{} line {}: {}", path.display(), i + 1, e)))?;
            Ok((item.id, item.text))
        })
        .collect()
}

fn cmd_evaluate(
    config: &RunConfig,
    candidates_path: &Path,
    references_path: &Path,
    mode: &str,
    token_mode: &str,
    use_judge: bool,
    out: &Path,
) -> Result<PathBuf> {
    let mode = EvalMode::parse(mode)?;
    let token_mode = TokenMode::parse(token_mode)?;
    let candidates = read_eval_items(candidates_path)?;
    let references = read_eval_items(references_path)?;
    let run_dir = make_run_dir(out, "evaluate")?;

    let mut client = if use_judge {
        let mut c = HttpChatClient::from_env("JUDGE_API_URL", "JUDGE_API_KEY")?
            .ok_or_else(|| {
                Error::Config("judge requested but JUDGE_API_URL is not set".into())
            })?;
        c.audit_log = Some(run_dir.join("judge_audit.log"));
        Some(c)
    } else {
        None
    };
    let judge = client
        .as_mut()
        .map(|c| (&config.judge, c as &mut dyn writerlab::chat::ChatClient));

    let report = evaluate_run(&candidates, &references, mode, token_mode, judge)?;
    fs::write(run_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(run_dir.join("report.txt"), report.render_table())?;
    write_provenance(
        &run_dir,
        config,
        &[("candidates", candidates_path), ("references", references_path)],
    )?;
    Ok(run_dir)
}

// ---------------------------------------------------------------------------

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse(_) => 2,
        Error::Staging(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    let config = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth { seed, size, out } => cmd_synth(&config, *seed, size, out),
        Command::Ingest { corpus, plots, profiles, out } => {
            cmd_ingest(&config, corpus, plots, profiles, out)
        }
        Command::BuildDatasets { data, out } => cmd_build_datasets(&config, data, out),
        Command::Train { data, stage, ablation, resume, out } => {
            cmd_train(&config, data, stage, ablation, resume.as_deref(), out)
        }
        Command::Generate { checkpoint, context, out } => {
            cmd_generate(&config, checkpoint, context.as_deref(), out)
        }
        Command::Evaluate { candidates, references, mode, token_mode, judge, out } => {
            cmd_evaluate(&config, candidates, references, mode, token_mode, *judge, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(run_dir) => {
            println!("RUN_DIR {}", run_dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
