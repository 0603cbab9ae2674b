//! ROUGE-N (clipped n-gram overlap) and ROUGE-L (longest common subsequence)
//! with word- and character-level tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenMode {
    Word,
    Char,
    Auto,
}

impl TokenMode {
    pub fn parse(s: &str) -> Result<TokenMode> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            "auto" => Ok(TokenMode::Auto),
            other => Err(Error::Config(format!("unknown token mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougePair {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// set when either side was too short to score
    pub degenerate: bool,
}

impl RougePair {
    fn from_counts(overlap: f64, cand: f64, refr: f64) -> RougePair {
        if cand == 0.0 || refr == 0.0 {
            return RougePair { degenerate: true, ..RougePair::default() };
        }
        let p = overlap / cand;
        let r = overlap / refr;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        RougePair { precision: p, recall: r, f1, degenerate: false }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: RougePair,
    pub r2: RougePair,
    pub rl: RougePair,
}

fn cjk_ratio(text: &str) -> f64 {
    let total = text.chars().filter(|c| !c.is_whitespace()).count();
    if total == 0 {
        return 0.0;
    }
    let cjk = text
        .chars()
        .filter(|&c| {
            ('\u{4E00}'..='\u{9FFF}').contains(&c)
                || ('\u{3400}'..='\u{4DBF}').contains(&c)
                || ('\u{F900}'..='\u{FAFF}').contains(&c)
        })
        .count();
    cjk as f64 / total as f64
}

/// Word mode lowercases and strips punctuation; char mode keeps every
/// non-whitespace character; auto picks char mode for CJK-heavy text.
pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    let mode = match mode {
        TokenMode::Auto => {
            if cjk_ratio(text) > 0.3 {
                TokenMode::Char
            } else {
                TokenMode::Word
            }
        }
        m => m,
    };
    match mode {
        TokenMode::Word => text
            .split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphanumeric())
                    .flat_map(|c| c.to_lowercase())
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .collect(),
        TokenMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        TokenMode::Auto => unreachable!(),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize, mode: TokenMode) -> Result<RougePair> {
    if n == 0 {
        return Err(Error::Config("rouge-n needs n >= 1".into()));
    }
    let cand = tokenize(candidate, mode);
    let refr = tokenize(reference, mode);
    if cand.len() < n || refr.len() < n {
        return Ok(RougePair { degenerate: true, ..RougePair::default() });
    }
    let cc = ngram_counts(&cand, n);
    let rc = ngram_counts(&refr, n);
    let overlap: usize = cc
        .iter()
        .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(RougePair::from_counts(
        overlap as f64,
        (cand.len() - n + 1) as f64,
        (refr.len() - n + 1) as f64,
    ))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure.
pub fn rouge_l(candidate: &str, reference: &str, mode: TokenMode) -> Result<RougePair> {
    let cand = tokenize(candidate, mode);
    let refr = tokenize(reference, mode);
    if cand.is_empty() || refr.is_empty() {
        return Ok(RougePair { degenerate: true, ..RougePair::default() });
    }
    let l = lcs_len(&cand, &refr) as f64;
    Ok(RougePair::from_counts(l, cand.len() as f64, refr.len() as f64))
}

pub fn rouge_all(candidate: &str, reference: &str, mode: TokenMode) -> Result<RougeScores> {
    Ok(RougeScores {
        r1: rouge_n(candidate, reference, 1, mode)?,
        r2: rouge_n(candidate, reference, 2, mode)?,
        rl: rouge_l(candidate, reference, mode)?,
    })
}
