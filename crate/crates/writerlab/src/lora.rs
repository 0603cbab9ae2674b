//! Adapter framework: plain LoRA, the shared-foundation/gated-task variant,
//! and a mixture-of-experts baseline with per-task (A, B) pairs.
//!
//! Every adapter leaves the wrapped base weight frozen and adds a low-rank
//! delta `B·A·x`. The shared-foundation variant keeps one down-projection
//! `A_fdn` per target, a foundation up-projection `B_fdn` with implicit
//! coefficient 1, and one up-projection per downstream task combined by a
//! softmax over active-task gate weights:
//!
//! ```text
//! h' = W0·x + s·( B_fdn·A_fdn + Σ_t α_t · B_t·A_fdn )·x
//! α_t = exp(w_t) / Σ exp(w_t'),   w_t = 1 for the active task, else 0
//! ```

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Curriculum task, totally ordered by training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    Foundation,
    World,
    Plot,
    Writing,
}

impl TaskId {
    pub const CURRICULUM: [TaskId; 4] =
        [TaskId::Foundation, TaskId::World, TaskId::Plot, TaskId::Writing];

    /// Downstream tasks, i.e. everything after pretraining.
    pub const DOWNSTREAM: [TaskId; 3] = [TaskId::World, TaskId::Plot, TaskId::Writing];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Foundation => "foundation",
            TaskId::World => "world",
            TaskId::Plot => "plot",
            TaskId::Writing => "writing",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "foundation" => Ok(TaskId::Foundation),
            "world" => Ok(TaskId::World),
            "plot" => Ok(TaskId::Plot),
            "writing" => Ok(TaskId::Writing),
            other => Err(Error::Config(format!("unknown task '{}'", other))),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterMode {
    PlainLora,
    WriterLora,
    MoeLora,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub scaling: f64,
    pub dropout_p: f64,
    pub target_matrices: Vec<String>,
    pub mode: AdapterMode,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            rank: 8,
            scaling: 1.0,
            dropout_p: 0.05,
            target_matrices: Vec::new(),
            mode: AdapterMode::WriterLora,
        }
    }
}

impl AdapterSpec {
    pub fn validate(&self, d: usize, k: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if self.rank > d.min(k) / 2 {
            return Err(Error::Config(format!(
                "rank {} too large for a {}x{} target (must be <= min(d,k)/2)",
                self.rank, d, k
            )));
        }
        if self.scaling <= 0.0 {
            return Err(Error::Config("adapter scaling must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("adapter dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Softmax task-gate weights over the enabled tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingWeights {
    pub tasks: Vec<TaskId>,
    pub alpha: Vec<f64>,
}

/// Gate weights: softmax over w with w=1 for the active task, 0 otherwise.
pub fn gating_weights(enabled: &[TaskId], active: TaskId) -> Result<GatingWeights> {
    if enabled.is_empty() {
        return Err(Error::Contract("gating over an empty task set".into()));
    }
    if !enabled.contains(&active) {
        return Err(Error::Contract(format!(
            "active task {} not among enabled tasks {:?}",
            active, enabled
        )));
    }
    let w: Vec<f64> = enabled.iter().map(|&t| if t == active { 1.0 } else { 0.0 }).collect();
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = w.iter().map(|x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(GatingWeights { tasks: enabled.to_vec(), alpha: exps.iter().map(|e| e / denom).collect() })
}

/// One wrapped weight matrix with shared A, foundation B, and task Bs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WriterLoraLayer {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    /// shared down-projection (r,k)
    pub a_fdn: Tensor,
    /// foundation up-projection (d,r)
    pub b_fdn: Tensor,
    /// per-task up-projections (d,r), in curriculum order
    pub task_b: BTreeMap<TaskId, Tensor>,
    /// tasks attached so far, in curriculum order
    pub enabled: Vec<TaskId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AdapterLayer {
    Plain { d: usize, k: usize, r: usize, a: Tensor, b: Tensor },
    Writer(WriterLoraLayer),
    Moe { d: usize, k: usize, r: usize, experts: BTreeMap<TaskId, (Tensor, Tensor)> },
}

/// All adapter layers of one adapted model, keyed by target weight name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterState {
    pub spec: AdapterSpec,
    pub layers: BTreeMap<String, AdapterLayer>,
}

/// Wrap each target weight of `backbone_shapes` (name -> (d,k)) per the spec.
/// New B matrices start at zero so the adapted model is initially the
/// identity over the backbone; A matrices are Gaussian with std 0.02.
pub fn attach<R: Rng>(
    backbone_shapes: &BTreeMap<String, (usize, usize)>,
    spec: &AdapterSpec,
    rng: &mut R,
) -> Result<AdapterState> {
    if spec.target_matrices.is_empty() {
        return Err(Error::Config("adapter spec names no target matrices".into()));
    }
    let mut layers = BTreeMap::new();
    for target in &spec.target_matrices {
        let &(d, k) = backbone_shapes
            .get(target)
            .ok_or_else(|| Error::Config(format!("unknown adapter target '{}'", target)))?;
        spec.validate(d, k)?;
        if layers.contains_key(target) {
            return Err(Error::Config(format!("target '{}' wrapped twice", target)));
        }
        let r = spec.rank;
        let layer = match spec.mode {
            AdapterMode::PlainLora => AdapterLayer::Plain {
                d,
                k,
                r,
                a: Tensor::randn(vec![r, k], 0.02, rng),
                b: Tensor::zeros(vec![d, r]),
            },
            AdapterMode::WriterLora => AdapterLayer::Writer(WriterLoraLayer {
                d,
                k,
                r,
                a_fdn: Tensor::randn(vec![r, k], 0.02, rng),
                b_fdn: Tensor::zeros(vec![d, r]),
                task_b: BTreeMap::new(),
                enabled: Vec::new(),
            }),
            AdapterMode::MoeLora => AdapterLayer::Moe {
                d,
                k,
                r,
                experts: TaskId::DOWNSTREAM
                    .iter()
                    .map(|&t| {
                        (t, (Tensor::randn(vec![r, k], 0.02, rng), Tensor::zeros(vec![d, r])))
                    })
                    .collect(),
            },
        };
        layers.insert(target.clone(), layer);
    }
    Ok(AdapterState { spec: spec.clone(), layers })
}

impl AdapterState {
    /// Add one task's zero-initialized B matrix to every wrapped layer.
    /// Predecessor tasks must already be enabled.
    pub fn enable_task(&mut self, task: TaskId) -> Result<()> {
        if task == TaskId::Foundation {
            return Err(Error::Staging("the foundation pair exists from attach time".into()));
        }
        for pred in TaskId::DOWNSTREAM.iter().take_while(|&&t| t < task) {
            if !self.enabled_tasks().contains(pred) {
                return Err(Error::Staging(format!(
                    "task {} requested before predecessor {} was attached",
                    task, pred
                )));
            }
        }
        for (target, layer) in &mut self.layers {
            match layer {
                AdapterLayer::Writer(w) => {
                    if w.enabled.contains(&task) {
                        return Err(Error::Staging(format!(
                            "task {} already attached on '{}'",
                            task, target
                        )));
                    }
                    w.task_b.insert(task, Tensor::zeros(vec![w.d, w.r]));
                    w.enabled.push(task);
                }
                // Plain and MoE layers carry all their matrices from attach time.
                AdapterLayer::Plain { .. } | AdapterLayer::Moe { .. } => {}
            }
        }
        Ok(())
    }

    /// Tasks enabled so far (uniform across layers by construction).
    pub fn enabled_tasks(&self) -> Vec<TaskId> {
        match self.layers.values().next() {
            Some(AdapterLayer::Writer(w)) => w.enabled.clone(),
            Some(AdapterLayer::Moe { .. }) => TaskId::DOWNSTREAM.to_vec(),
            _ => Vec::new(),
        }
    }

    /// Flat view of every adapter tensor, keyed `adapter.<target>.<role>`.
    pub fn named_tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut out = BTreeMap::new();
        for (target, layer) in &self.layers {
            match layer {
                AdapterLayer::Plain { a, b, .. } => {
                    out.insert(format!("adapter.{}.A", target), a);
                    out.insert(format!("adapter.{}.B", target), b);
                }
                AdapterLayer::Writer(w) => {
                    out.insert(format!("adapter.{}.A_fdn", target), &w.a_fdn);
                    out.insert(format!("adapter.{}.B_fdn", target), &w.b_fdn);
                    for (t, b) in &w.task_b {
                        out.insert(format!("adapter.{}.B_{}", target, t.name()), b);
                    }
                }
                AdapterLayer::Moe { experts, .. } => {
                    for (t, (a, b)) in experts {
                        out.insert(format!("adapter.{}.{}.A", target, t.name()), a);
                        out.insert(format!("adapter.{}.{}.B", target, t.name()), b);
                    }
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> BTreeMap<String, &mut Tensor> {
        let mut out = BTreeMap::new();
        for (target, layer) in &mut self.layers {
            match layer {
                AdapterLayer::Plain { a, b, .. } => {
                    out.insert(format!("adapter.{}.A", target), a);
                    out.insert(format!("adapter.{}.B", target), b);
                }
                AdapterLayer::Writer(w) => {
                    out.insert(format!("adapter.{}.A_fdn", target), &mut w.a_fdn);
                    out.insert(format!("adapter.{}.B_fdn", target), &mut w.b_fdn);
                    for (t, b) in &mut w.task_b {
                        out.insert(format!("adapter.{}.B_{}", target, t.name()), b);
                    }
                }
                AdapterLayer::Moe { experts, .. } => {
                    for (t, (a, b)) in experts {
                        out.insert(format!("adapter.{}.{}.A", target, t.name()), a);
                        out.insert(format!("adapter.{}.{}.B", target, t.name()), b);
                    }
                }
            }
        }
        out
    }

    pub fn set_requires_grad(&mut self, trainable: &BTreeSet<String>) {
        for (name, t) in self.named_tensors_mut() {
            t.requires_grad = trainable.contains(&name);
        }
    }
}

/// How the per-stage trainable set is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainableMode {
    /// Curriculum default: each stage trains only its own matrices.
    Staged,
    /// Keep A_fdn trainable in downstream stages.
    UnfreezeA,
    /// All adapter matrices at once (no-curriculum training).
    Joint,
}

/// Parameter names trainable in the given stage. The backbone never appears.
pub fn trainable_set(
    state: &AdapterState,
    stage: TaskId,
    mode: TrainableMode,
) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    // Staging precondition: all prior downstream stages already attached.
    // Plain and MoE layers carry every matrix from attach time, so the
    // precondition only applies to the incrementally-attached writer mode.
    if stage != TaskId::Foundation && state.spec.mode == AdapterMode::WriterLora {
        let enabled = state.enabled_tasks();
        for pred in TaskId::DOWNSTREAM.iter().take_while(|&&t| t < stage) {
            if !enabled.contains(pred) {
                return Err(Error::Staging(format!(
                    "stage {} requested before {} was attached",
                    stage, pred
                )));
            }
        }
        if !enabled.contains(&stage) {
            return Err(Error::Staging(format!("stage {} not attached yet", stage)));
        }
    }
    for (target, layer) in &state.layers {
        match layer {
            AdapterLayer::Plain { .. } => {
                // A single pair carries every stage.
                out.insert(format!("adapter.{}.A", target));
                out.insert(format!("adapter.{}.B", target));
            }
            AdapterLayer::Writer(_) => match mode {
                TrainableMode::Joint => {
                    for name in state.named_tensors().keys() {
                        if name.starts_with(&format!("adapter.{}.", target)) {
                            out.insert(name.clone());
                        }
                    }
                }
                TrainableMode::Staged | TrainableMode::UnfreezeA => {
                    match stage {
                        TaskId::Foundation => {
                            out.insert(format!("adapter.{}.A_fdn", target));
                            out.insert(format!("adapter.{}.B_fdn", target));
                        }
                        t => {
                            out.insert(format!("adapter.{}.B_{}", target, t.name()));
                        }
                    }
                    if mode == TrainableMode::UnfreezeA && stage != TaskId::Foundation {
                        out.insert(format!("adapter.{}.A_fdn", target));
                    }
                }
            },
            AdapterLayer::Moe { .. } => match stage {
                // MoE has no foundation pair; pretraining is skipped for it.
                TaskId::Foundation => {}
                t => {
                    out.insert(format!("adapter.{}.{}.A", target, t.name()));
                    out.insert(format!("adapter.{}.{}.B", target, t.name()));
                }
            },
        }
    }
    Ok(out)
}

/// Trainable parameter count per target.
pub fn param_count(mode: AdapterMode, r: usize, d: usize, k: usize, n_tasks: usize) -> usize {
    match mode {
        AdapterMode::PlainLora => r * k + d * r,
        AdapterMode::WriterLora => r * k + (1 + n_tasks) * d * r,
        AdapterMode::MoeLora => n_tasks * (r * k + d * r),
    }
}

/// Per-forward record of the gate vector, for instrumentation.
pub type AlphaProbe = RefCell<Vec<(TaskId, Vec<f64>)>>;

/// Everything the model forward needs to route through adapters.
pub struct AdapterContext<'a> {
    pub state: &'a AdapterState,
    pub active: TaskId,
    pub alpha_probe: Option<&'a AlphaProbe>,
}

impl<'a> AdapterContext<'a> {
    pub fn new(state: &'a AdapterState, active: TaskId) -> Self {
        AdapterContext { state, active, alpha_probe: None }
    }
}

fn leaf_cached(
    tape: &mut Tape,
    leaves: &mut BTreeMap<String, Var>,
    name: String,
    t: &Tensor,
) -> Var {
    if let Some(&v) = leaves.get(&name) {
        return v;
    }
    let v = tape.leaf(t);
    leaves.insert(name, v);
    v
}

/// Low-rank delta for `target` applied to activations `x` (rows of k), or
/// None when the target is not wrapped. Returned delta already includes the
/// spec scaling; caller adds it to the base projection.
pub fn adapter_delta<R: Rng>(
    tape: &mut Tape,
    leaves: &mut BTreeMap<String, Var>,
    x: Var,
    target: &str,
    ctx: &AdapterContext,
    dropout: Option<&mut R>,
) -> Result<Option<Var>> {
    let layer = match ctx.state.layers.get(target) {
        Some(l) => l,
        None => return Ok(None),
    };
    let spec = &ctx.state.spec;
    let x = match dropout {
        Some(rng) if spec.dropout_p > 0.0 => tape.dropout(x, spec.dropout_p, rng)?,
        _ => x,
    };
    let delta = match layer {
        AdapterLayer::Plain { a, b, .. } => {
            let a = leaf_cached(tape, leaves, format!("adapter.{}.A", target), a);
            let b = leaf_cached(tape, leaves, format!("adapter.{}.B", target), b);
            let z = tape.matmul_nt(x, a)?;
            tape.matmul_nt(z, b)?
        }
        AdapterLayer::Writer(w) => {
            let a = leaf_cached(tape, leaves, format!("adapter.{}.A_fdn", target), &w.a_fdn);
            let b_fdn = leaf_cached(tape, leaves, format!("adapter.{}.B_fdn", target), &w.b_fdn);
            let z = tape.matmul_nt(x, a)?;
            let mut delta = tape.matmul_nt(z, b_fdn)?;
            if !w.enabled.is_empty() {
                // Downstream decoding with active = Foundation keeps the task
                // branches at their gate weights for the full enabled set only
                // when the active task is one of them; pretraining-time
                // forwards simply have no task branches yet.
                let gating = if w.enabled.contains(&ctx.active) {
                    gating_weights(&w.enabled, ctx.active)?
                } else {
                    // active task not among enabled (e.g. Foundation): uniform
                    // zero-logit softmax, no task dominates
                    let n = w.enabled.len() as f64;
                    GatingWeights { tasks: w.enabled.clone(), alpha: vec![1.0 / n; w.enabled.len()] }
                };
                if let Some(probe) = ctx.alpha_probe {
                    probe.borrow_mut().push((ctx.active, gating.alpha.clone()));
                }
                for (t, &alpha) in gating.tasks.iter().zip(&gating.alpha) {
                    let b_t = leaf_cached(
                        tape,
                        leaves,
                        format!("adapter.{}.B_{}", target, t.name()),
                        &w.task_b[t],
                    );
                    let branch = tape.matmul_nt(z, b_t)?;
                    let scaled = tape.scale(branch, alpha);
                    delta = tape.add(delta, scaled)?;
                }
            }
            delta
        }
        AdapterLayer::Moe { experts, .. } => {
            let enabled: Vec<TaskId> = experts.keys().copied().collect();
            let gating = gating_weights(&enabled, ctx.active)?;
            if let Some(probe) = ctx.alpha_probe {
                probe.borrow_mut().push((ctx.active, gating.alpha.clone()));
            }
            let mut delta: Option<Var> = None;
            for (t, &g) in gating.tasks.iter().zip(&gating.alpha) {
                let (a, b) = &experts[t];
                let a = leaf_cached(tape, leaves, format!("adapter.{}.{}.A", target, t.name()), a);
                let b = leaf_cached(tape, leaves, format!("adapter.{}.{}.B", target, t.name()), b);
                let z = tape.matmul_nt(x, a)?;
                let branch = tape.matmul_nt(z, b)?;
                let scaled = tape.scale(branch, g);
                delta = Some(match delta {
                    Some(d) => tape.add(d, scaled)?,
                    None => scaled,
                });
            }
            delta.expect("MoE layer always has experts")
        }
    };
    Ok(Some(tape.scale(delta, spec.scaling)))
}

/// Spec-level single-vector forward through one wrapped weight:
/// `W0·x + s·(B_fdn·A_fdn·x + Σ α_t·B_t·A_fdn·x)`.
pub fn forward_adapted(
    w0: &Tensor,
    layer: &WriterLoraLayer,
    x: &Tensor,
    active: TaskId,
    gating: &GatingWeights,
) -> Result<Tensor> {
    if gating.tasks != layer.enabled {
        return Err(Error::Contract(format!(
            "gating covers {:?} but enabled tasks are {:?}",
            gating.tasks, layer.enabled
        )));
    }
    if active != TaskId::Foundation && !layer.enabled.contains(&active) {
        return Err(Error::Contract(format!("active task {} is not attached", active)));
    }
    let (d, k, r) = (layer.d, layer.k, layer.r);
    let base = matvec(w0, x, d, k)?;
    let z = matvec(&layer.a_fdn, x, r, k)?;
    let mut delta = matvec_t(&layer.b_fdn, &z, d, r)?;
    for (t, &alpha) in gating.tasks.iter().zip(&gating.alpha) {
        let branch = matvec_t(&layer.task_b[t], &z, d, r)?;
        for (dst, v) in delta.data.iter_mut().zip(&branch.data) {
            *dst += alpha * v;
        }
    }
    let mut out = base;
    // scaling defaults to 1.0; the gate equation itself carries no scale
    for (o, dv) in out.data.iter_mut().zip(&delta.data) {
        *o += dv;
    }
    Ok(out)
}

/// Spec-level MoE forward for one vector: `W0·x + Σ_e g_e·B_e·A_e·x`.
pub fn moelora_forward(
    w0: &Tensor,
    experts: &BTreeMap<TaskId, (Tensor, Tensor)>,
    x: &Tensor,
    gating: &GatingWeights,
) -> Result<Tensor> {
    let enabled: Vec<TaskId> = experts.keys().copied().collect();
    if gating.tasks != enabled {
        return Err(Error::Contract("gating does not cover the expert set".into()));
    }
    let (d, k) = (w0.rows(), w0.cols());
    let mut out = matvec(w0, x, d, k)?;
    for (t, &g) in gating.tasks.iter().zip(&gating.alpha) {
        let (a, b) = &experts[t];
        let r = a.rows();
        let z = matvec(a, x, r, k)?;
        let branch = matvec_t(b, &z, d, r)?;
        for (o, v) in out.data.iter_mut().zip(&branch.data) {
            *o += g * v;
        }
    }
    Ok(out)
}

fn matvec(m: &Tensor, x: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if x.numel() != cols {
        return Err(Error::Shape(format!("matvec: {}x{} against vector of {}", rows, cols, x.numel())));
    }
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        out[r] = (0..cols).map(|c| m.data[r * cols + c] * x.data[c]).sum();
    }
    Tensor::new(vec![rows], out)
}

/// (d,r) matrix applied to a length-r vector.
fn matvec_t(m: &Tensor, z: &Tensor, d: usize, r: usize) -> Result<Tensor> {
    matvec(m, z, d, r)
}
