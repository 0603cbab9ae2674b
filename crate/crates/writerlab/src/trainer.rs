//! Stage-ordered training: per-stage trainable sets, gradient accumulation,
//! warmup+cosine schedule, loss logging, and stage checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lora::{AdapterContext, AdapterMode, AdapterState, TaskId, TrainableMode};
use crate::model::Model;
use crate::optim::{clip_grad_norm, lr_at, OptimizerState, TrainConfig};
use crate::tape::Tape;
use crate::tokenizer::TokenSequence;

/// One training sequence with the task that gates its forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainItem {
    pub task: TaskId,
    pub seq: TokenSequence,
}

/// One loss-log line, appended per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: TaskId,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    None,
    NoCurriculum,
    SingleLora,
    UnfreezeA,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "no-curriculum" => Ok(Ablation::NoCurriculum),
            "single-lora" => Ok(Ablation::SingleLora),
            "unfreeze-a" => Ok(Ablation::UnfreezeA),
            other => Err(Error::Config(format!("unknown ablation '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StagePlanEntry {
    pub task: TaskId,
    pub items: Vec<TrainItem>,
    /// per-stage override of the base train config
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stages: Vec<StagePlanEntry>,
    pub ablation: Ablation,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.ablation != Ablation::NoCurriculum {
            for pair in self.stages.windows(2) {
                if pair[1].task <= pair[0].task {
                    return Err(Error::Staging(format!(
                        "stage order violated: {} before {}",
                        pair[0].task, pair[1].task
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub stages: Vec<StageReport>,
    pub checkpoints: Vec<PathBuf>,
    #[serde(skip)]
    pub records: Vec<LossRecord>,
}

fn stage_seed(base: u64, stage: TaskId, epoch: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage as u64 + 1)
        .wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(epoch as u64)
}

/// Train one curriculum stage. Attaches the stage's task matrices when new,
/// restricts updates to the stage's trainable set, and accumulates gradients
/// over `grad_accum_steps` micro-batches per optimizer step.
pub fn run_stage(
    model: &Model,
    adapters: &mut AdapterState,
    stage: TaskId,
    items: &[TrainItem],
    cfg: &TrainConfig,
    mode: TrainableMode,
    records: &mut Vec<LossRecord>,
) -> Result<StageReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data(format!("no training data for stage {}", stage)));
    }
    if stage != TaskId::Foundation
        && adapters.spec.mode == AdapterMode::WriterLora
        && !adapters.enabled_tasks().contains(&stage)
    {
        adapters.enable_task(stage)?;
    }
    let trainable = crate::lora::trainable_set(adapters, stage, mode)?;
    adapters.set_requires_grad(&trainable);

    let items: Vec<&TrainItem> = items.iter().take(cfg.sample_cap).collect();
    let micro_per_epoch = items.len().div_ceil(cfg.micro_batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum_steps).max(1);
    let total_steps = steps_per_epoch * cfg.epochs_per_stage;

    let mut optimizer = OptimizerState::new();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage, usize::MAX));
    let mut step = 0usize;
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs_per_stage {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage, epoch));
        order.shuffle(&mut shuffle_rng);
        let micro_batches: Vec<&[usize]> = order.chunks(cfg.micro_batch_size).collect();

        for group in micro_batches.chunks(cfg.grad_accum_steps) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut step_loss = 0.0;
            for micro in group {
                let mut tape = Tape::new();
                let mut leaves = BTreeMap::new();
                let mut loss_vars = Vec::with_capacity(micro.len());
                for &idx in micro.iter() {
                    let item = items[idx];
                    let ctx = AdapterContext::new(adapters, item.task);
                    let loss = model.sequence_loss(
                        &mut tape,
                        &mut leaves,
                        &item.seq,
                        Some(&ctx),
                        Some(&mut dropout_rng),
                    )?;
                    loss_vars.push(loss);
                }
                // mean over the micro-batch, then 1/accum for accumulation
                let mut total = loss_vars[0];
                for &l in &loss_vars[1..] {
                    total = tape.add(total, l)?;
                }
                let batch_loss = tape.scale(total, 1.0 / loss_vars.len() as f64);
                step_loss += tape.value(batch_loss)[0] / group.len() as f64;
                tape.backward(batch_loss)?;
                let inv_accum = 1.0 / cfg.grad_accum_steps as f64;
                for (name, var) in &leaves {
                    if !trainable.contains(name) {
                        continue;
                    }
                    let g = tape.grad(*var);
                    let buf = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (b, v) in buf.iter_mut().zip(g) {
                        *b += v * inv_accum;
                    }
                }
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max_norm);
            }
            let lr = lr_at((step + 1).min(total_steps), total_steps, cfg)?;
            {
                let mut named = adapters.named_tensors_mut();
                let updates = named.iter_mut().filter_map(|(name, tensor)| {
                    grads
                        .get(name.as_str())
                        .map(|g| (name.as_str(), tensor.data.as_mut_slice(), g.as_slice()))
                });
                optimizer.adamw_step(updates, lr, cfg)?;
            }
            if first_loss.is_nan() {
                first_loss = step_loss;
            }
            final_loss = step_loss;
            records.push(LossRecord { stage: stage.name().into(), step, lr, loss: step_loss });
            step += 1;
        }
    }
    Ok(StageReport { stage, steps: step, first_loss, final_loss })
}

/// Execute a full plan. With `run_dir` set, each stage leaves a checkpoint
/// under `stage-<name>/` with a lineage record and the loss log is appended
/// to `loss_log.jsonl`.
pub fn run_curriculum(
    model: &Model,
    tokenizer: &crate::tokenizer::Tokenizer,
    adapters: &mut AdapterState,
    plan: &StagePlan,
    base_cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<CurriculumReport> {
    plan.validate()?;
    let mut report = CurriculumReport::default();
    let mut parent_hash: Option<String> = None;

    let run_one = |stage: TaskId,
                       items: &[TrainItem],
                       cfg: &TrainConfig,
                       mode: TrainableMode,
                       label: &str,
                       adapters: &mut AdapterState,
                       report: &mut CurriculumReport,
                       parent_hash: &mut Option<String>|
     -> Result<()> {
        let stage_report =
            run_stage(model, adapters, stage, items, cfg, mode, &mut report.records)?;
        report.stages.push(stage_report);
        if let Some(dir) = run_dir {
            let stage_dir = dir.join(format!("stage-{}", label));
            checkpoint::save_model(&stage_dir, model, tokenizer)?;
            checkpoint::save_adapters(&stage_dir, adapters)?;
            let hash = checkpoint::checkpoint_hash(&stage_dir)?;
            let lineage = serde_json::json!({
                "stage": label,
                "parent": parent_hash,
                "hash": hash,
            });
            fs::write(stage_dir.join("lineage.json"), serde_json::to_vec_pretty(&lineage)?)?;
            *parent_hash = Some(hash);
            report.checkpoints.push(stage_dir);
        }
        Ok(())
    };

    match plan.ablation {
        Ablation::NoCurriculum => {
            // one mixed-task dataset, every adapter matrix trainable at once
            for t in TaskId::DOWNSTREAM {
                if adapters.spec.mode == AdapterMode::WriterLora
                    && !adapters.enabled_tasks().contains(&t)
                {
                    adapters.enable_task(t)?;
                }
            }
            let mixed: Vec<TrainItem> =
                plan.stages.iter().flat_map(|s| s.items.iter().cloned()).collect();
            let cfg = plan.stages.first().and_then(|s| s.config.clone()).unwrap_or_else(|| base_cfg.clone());
            run_one(
                TaskId::Foundation,
                &mixed,
                &cfg,
                TrainableMode::Joint,
                "mixed",
                adapters,
                &mut report,
                &mut parent_hash,
            )?;
        }
        ablation => {
            let mode = match ablation {
                Ablation::UnfreezeA => TrainableMode::UnfreezeA,
                _ => TrainableMode::Staged,
            };
            for entry in &plan.stages {
                let cfg = entry.config.clone().unwrap_or_else(|| base_cfg.clone());
                run_one(
                    entry.task,
                    &entry.items,
                    &cfg,
                    mode,
                    entry.task.name(),
                    adapters,
                    &mut report,
                    &mut parent_hash,
                )?;
            }
        }
    }

    if let Some(dir) = run_dir {
        let mut log = String::new();
        for r in &report.records {
            log.push_str(&serde_json::to_string(r)?);
            log.push('\n');
        }
        fs::write(dir.join("loss_log.jsonl"), log)?;
    }
    Ok(report)
}

/// Held-out mean loss over a set of items, eval mode (no dropout, no grad).
pub fn held_out_loss(
    model: &Model,
    adapters: Option<&AdapterState>,
    items: &[TrainItem],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("no held-out items".into()));
    }
    let mut total = 0.0;
    for item in items {
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let ctx = adapters.map(|a| AdapterContext::new(a, item.task));
        let loss =
            model.sequence_loss(&mut tape, &mut leaves, &item.seq, ctx.as_ref(), None)?;
        total += tape.value(loss)[0];
    }
    Ok(total / items.len() as f64)
}
