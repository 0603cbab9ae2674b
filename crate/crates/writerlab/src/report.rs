//! Evaluation report assembly: per-item ROUGE plus optional judge aspects,
//! reduced to corpus means. Items are aligned to gold references by id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chat::ChatClient;
use crate::error::{Error, Result};
use crate::judge::{judge_aspects, AspectScores, JudgeConfig};
use crate::rouge::{rouge_all, RougeScores, TokenMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// prose outputs, all metrics
    Writing,
    /// predicted-vs-gold plot summaries; judge reports only SM/CBM/EM
    PlotPlanning,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<EvalMode> {
        match s {
            "writing" => Ok(EvalMode::Writing),
            "plot" | "plot-planning" => Ok(EvalMode::PlotPlanning),
            other => Err(Error::Config(format!("unknown eval mode '{}'", other))),
        }
    }
}

/// Judge aspects restricted to what the mode reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportedAspects {
    pub ls: Option<u8>,
    pub ex: Option<u8>,
    pub slc: Option<u8>,
    pub sm: u8,
    pub cbm: u8,
    pub em: u8,
}

impl ReportedAspects {
    fn from_scores(s: AspectScores, mode: EvalMode) -> ReportedAspects {
        match mode {
            EvalMode::Writing => ReportedAspects {
                ls: Some(s.ls),
                ex: Some(s.ex),
                slc: Some(s.slc),
                sm: s.sm,
                cbm: s.cbm,
                em: s.em,
            },
            EvalMode::PlotPlanning => {
                ReportedAspects { ls: None, ex: None, slc: None, sm: s.sm, cbm: s.cbm, em: s.em }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemEval {
    pub id: String,
    pub rouge: RougeScores,
    pub aspects: Option<ReportedAspects>,
    pub judge_failed: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportMeans {
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rougel_f1: f64,
    /// aspect means over judge-scored items only, keyed LS/EX/SLC/SM/CBM/EM
    pub aspects: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub token_mode: TokenMode,
    pub items: Vec<ItemEval>,
    pub means: ReportMeans,
    pub judge_failed_count: usize,
    /// checkpoint hash or other provenance supplied by the caller
    pub provenance: BTreeMap<String, String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn compute_means(items: &[ItemEval], mode: EvalMode) -> ReportMeans {
    let mut means = ReportMeans {
        rouge1_f1: mean(items.iter().map(|i| i.rouge.r1.f1)),
        rouge2_f1: mean(items.iter().map(|i| i.rouge.r2.f1)),
        rougel_f1: mean(items.iter().map(|i| i.rouge.rl.f1)),
        aspects: BTreeMap::new(),
    };
    let scored: Vec<&ReportedAspects> = items.iter().filter_map(|i| i.aspects.as_ref()).collect();
    if scored.is_empty() {
        return means;
    }
    if mode == EvalMode::Writing {
        means.aspects.insert(
            "LS".into(),
            mean(scored.iter().filter_map(|a| a.ls.map(|v| v as f64))),
        );
        means.aspects.insert(
            "EX".into(),
            mean(scored.iter().filter_map(|a| a.ex.map(|v| v as f64))),
        );
        means.aspects.insert(
            "SLC".into(),
            mean(scored.iter().filter_map(|a| a.slc.map(|v| v as f64))),
        );
    }
    means.aspects.insert("SM".into(), mean(scored.iter().map(|a| a.sm as f64)));
    means.aspects.insert("CBM".into(), mean(scored.iter().map(|a| a.cbm as f64)));
    means.aspects.insert("EM".into(), mean(scored.iter().map(|a| a.em as f64)));
    means
}

/// Check that candidates and references carry exactly the same id set.
fn align<'a>(
    candidates: &'a [(String, String)],
    references: &'a [(String, String)],
) -> Result<Vec<(&'a str, &'a str, &'a str)>> {
    let refs: BTreeMap<&str, &str> =
        references.iter().map(|(id, text)| (id.as_str(), text.as_str())).collect();
    let cand_ids: BTreeMap<&str, ()> =
        candidates.iter().map(|(id, _)| (id.as_str(), ())).collect();
    let orphan_cands: Vec<&str> = candidates
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !refs.contains_key(id))
        .collect();
    let orphan_refs: Vec<&str> = refs
        .keys()
        .filter(|id| !cand_ids.contains_key(*id))
        .copied()
        .collect();
    if !orphan_cands.is_empty() || !orphan_refs.is_empty() {
        return Err(Error::Alignment(format!(
            "unmatched ids; candidates without reference: {:?}; references without candidate: {:?}",
            orphan_cands, orphan_refs
        )));
    }
    Ok(candidates
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str(), refs[id.as_str()]))
        .collect())
}

/// Score every (candidate, reference) pair. `judge` is optional; when absent
/// the report carries ROUGE only. Judge-failed items stay in the item list
/// (flagged) but never contribute to aspect means.
pub fn evaluate_run(
    candidates: &[(String, String)],
    references: &[(String, String)],
    mode: EvalMode,
    token_mode: TokenMode,
    judge: Option<(&JudgeConfig, &mut dyn ChatClient)>,
) -> Result<EvalReport> {
    let pairs = align(candidates, references)?;
    let mut items = Vec::with_capacity(pairs.len());
    let mut judge_failed_count = 0;
    let mut judge = judge;
    for (id, cand, refr) in pairs {
        let rouge = rouge_all(cand, refr, token_mode)?;
        let (aspects, judge_failed) = match judge.as_mut() {
            None => (None, false),
            Some((cfg, client)) => match judge_aspects(cand, refr, cfg, *client) {
                Ok(scores) => (Some(ReportedAspects::from_scores(scores, mode)), false),
                Err(_) => {
                    judge_failed_count += 1;
                    (None, true)
                }
            },
        };
        items.push(ItemEval { id: id.to_string(), rouge, aspects, judge_failed });
    }
    let means = compute_means(&items, mode);
    Ok(EvalReport {
        mode,
        token_mode,
        items,
        means,
        judge_failed_count,
        provenance: BTreeMap::new(),
    })
}

impl EvalReport {
    /// Human-readable table alongside report.json.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8} {:>6}\n",
            "item", "R1-F1", "R2-F1", "RL-F1", "judge"
        ));
        for item in &self.items {
            let judge = if item.judge_failed {
                "fail".to_string()
            } else if let Some(a) = &item.aspects {
                format!("{}/{}/{}", a.sm, a.cbm, a.em)
            } else {
                "-".to_string()
            };
            out.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>6}\n",
                item.id, item.rouge.r1.f1, item.rouge.r2.f1, item.rouge.rl.f1, judge
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean", self.means.rouge1_f1, self.means.rouge2_f1, self.means.rougel_f1
        ));
        for (k, v) in &self.means.aspects {
            out.push_str(&format!("mean {:<19} {:>8.4}\n", k, v));
        }
        out
    }
}
