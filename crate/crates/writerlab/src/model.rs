//! Small decoder-only transformer used as the frozen backbone that adapters
//! wrap. Pre-norm residual blocks, learned positional embeddings, GELU MLP.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{adapter_delta, AdapterContext};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0, // set from the tokenizer
            max_seq_len: 256,
            dropout_p: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0,1)".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size not set".into()));
        }
        Ok(())
    }
}

/// Backbone parameters, keyed by name. All tensors stay frozen
/// (`requires_grad = false`): learning happens through adapters only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let ff = config.d_ff;
        let mut params = BTreeMap::new();
        let std = 0.02;
        params.insert("tok_emb".into(), Tensor::randn(vec![v, d], std, rng));
        params.insert("pos_emb".into(), Tensor::randn(vec![config.max_seq_len, d], std, rng));
        for i in 0..config.n_layers {
            let p = |s: &str| format!("block{}.{}", i, s);
            params.insert(p("ln1.g"), Tensor::new(vec![d], vec![1.0; d])?);
            params.insert(p("ln1.b"), Tensor::zeros(vec![d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                params.insert(p(w), Tensor::randn(vec![d, d], std, rng));
            }
            params.insert(p("ln2.g"), Tensor::new(vec![d], vec![1.0; d])?);
            params.insert(p("ln2.b"), Tensor::zeros(vec![d]));
            params.insert(p("ffn.w1"), Tensor::randn(vec![ff, d], std, rng));
            params.insert(p("ffn.b1"), Tensor::zeros(vec![ff]));
            params.insert(p("ffn.w2"), Tensor::randn(vec![d, ff], std, rng));
            params.insert(p("ffn.b2"), Tensor::zeros(vec![d]));
        }
        params.insert("ln_f.g".into(), Tensor::new(vec![d], vec![1.0; d])?);
        params.insert("ln_f.b".into(), Tensor::zeros(vec![d]));
        params.insert("lm_head".into(), Tensor::randn(vec![v, d], std, rng));
        Ok(Model { config, params })
    }

    /// Shapes of the weight matrices an adapter may wrap.
    pub fn adapter_targets(&self) -> BTreeMap<String, (usize, usize)> {
        self.params
            .iter()
            .filter(|(name, t)| t.shape.len() == 2 && !name.ends_with("_emb"))
            .map(|(name, t)| (name.clone(), (t.shape[0], t.shape[1])))
            .collect()
    }

    /// Attention query/value projections of every block: the default targets.
    pub fn default_adapter_targets(&self) -> Vec<String> {
        (0..self.config.n_layers)
            .flat_map(|i| [format!("block{}.attn.wq", i), format!("block{}.attn.wv", i)])
            .collect()
    }

    fn leaf(
        &self,
        tape: &mut Tape,
        leaves: &mut BTreeMap<String, Var>,
        name: &str,
    ) -> Var {
        if let Some(&v) = leaves.get(name) {
            return v;
        }
        let v = tape.leaf(&self.params[name]);
        leaves.insert(name.to_string(), v);
        v
    }

    /// Base projection plus adapter delta for wrapped targets. Weights are
    /// stored (out,in) so the projection is `x · Wᵀ`.
    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        tape: &mut Tape,
        leaves: &mut BTreeMap<String, Var>,
        x: Var,
        name: &str,
        adapter: Option<&AdapterContext>,
        train: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let w = self.leaf(tape, leaves, name);
        let mut y = tape.matmul_nt(x, w)?;
        if let Some(ctx) = adapter {
            if let Some(delta) = adapter_delta(tape, leaves, x, name, ctx, train.as_deref_mut())? {
                y = tape.add(y, delta)?;
            }
        }
        Ok(y)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        train: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        match train.as_deref_mut() {
            Some(rng) if self.config.dropout_p > 0.0 => {
                tape.dropout(x, self.config.dropout_p, rng)
            }
            _ => Ok(x),
        }
    }

    /// Causal logits over the whole sequence: (len, vocab_size).
    ///
    /// `train` carries the dropout RNG; pass None for eval (bit-exact
    /// deterministic). Registered parameter leaves are recorded in `leaves`
    /// so the caller can read gradients back after `tape.backward`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        leaves: &mut BTreeMap<String, Var>,
        ids: &[usize],
        adapter: Option<&AdapterContext>,
        mut train: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let len = ids.len();
        if len == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if len > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                len, self.config.max_seq_len
            )));
        }
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = d / nh;

        let tok_emb = self.leaf(tape, leaves, "tok_emb");
        let pos_emb = self.leaf(tape, leaves, "pos_emb");
        let te = tape.embed(tok_emb, ids)?;
        let positions: Vec<usize> = (0..len).collect();
        let pe = tape.embed(pos_emb, &positions)?;
        let mut x = tape.add(te, pe)?;
        x = self.maybe_dropout(tape, x, &mut train)?;

        for i in 0..self.config.n_layers {
            let p = |s: &str| format!("block{}.{}", i, s);
            let g1 = self.leaf(tape, leaves, &p("ln1.g"));
            let b1 = self.leaf(tape, leaves, &p("ln1.b"));
            let h = tape.layer_norm(x, g1, b1)?;
            let q = self.project(tape, leaves, h, &p("attn.wq"), adapter, &mut train)?;
            let k = self.project(tape, leaves, h, &p("attn.wk"), adapter, &mut train)?;
            let v = self.project(tape, leaves, h, &p("attn.wv"), adapter, &mut train)?;
            let mut heads = Vec::with_capacity(nh);
            for head in 0..nh {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax_rows(scaled, true)?;
                let out = tape.matmul(attn, vh)?;
                heads.push(out);
            }
            let cat = tape.concat_cols(&heads)?;
            let mut proj = self.project(tape, leaves, cat, &p("attn.wo"), adapter, &mut train)?;
            proj = self.maybe_dropout(tape, proj, &mut train)?;
            x = tape.add(x, proj)?;

            let g2 = self.leaf(tape, leaves, &p("ln2.g"));
            let b2 = self.leaf(tape, leaves, &p("ln2.b"));
            let h2 = tape.layer_norm(x, g2, b2)?;
            let mut f = self.project(tape, leaves, h2, &p("ffn.w1"), adapter, &mut train)?;
            let b1f = self.leaf(tape, leaves, &p("ffn.b1"));
            f = tape.add_row(f, b1f)?;
            f = tape.gelu(f);
            let mut f2 = self.project(tape, leaves, f, &p("ffn.w2"), adapter, &mut train)?;
            let b2f = self.leaf(tape, leaves, &p("ffn.b2"));
            f2 = tape.add_row(f2, b2f)?;
            f2 = self.maybe_dropout(tape, f2, &mut train)?;
            x = tape.add(x, f2)?;
        }

        let gf = self.leaf(tape, leaves, "ln_f.g");
        let bf = self.leaf(tape, leaves, "ln_f.b");
        let xf = tape.layer_norm(x, gf, bf)?;
        self.project(tape, leaves, xf, "lm_head", adapter, &mut train)
    }

    /// Mean masked next-token cross entropy over one sequence.
    /// logits at position i predict ids[i+1]; the loss mask of the target
    /// position gates each term.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        leaves: &mut BTreeMap<String, Var>,
        seq: &TokenSequence,
        adapter: Option<&AdapterContext>,
        train: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if seq.len() < 2 {
            return Err(Error::Data("sequence too short for next-token loss".into()));
        }
        let inputs = &seq.ids[..seq.len() - 1];
        let targets = &seq.ids[1..];
        let mask = &seq.loss_mask[1..];
        let logits = self.forward_logits(tape, leaves, inputs, adapter, train)?;
        tape.cross_entropy_masked(logits, targets, mask)
    }
}

/// Decoding controls for one next-token draw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { temperature: 0.0, top_k: 1 }
    }
}

/// Greedy argmax at temperature 0 (lowest id wins ties), otherwise
/// temperature-scaled top-k sampling.
pub fn sample_next(logits: &[f64], cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    use rand::Rng;
    if cfg.top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty logits row".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    if cfg.temperature == 0.0 || cfg.top_k == 1 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    // top-k candidates, ties resolved toward lower ids by the stable sort
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(cfg.top_k);
    let scaled: Vec<f64> = idx.iter().map(|&i| logits[i] / cfg.temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (i, w) in idx.iter().zip(&weights) {
        draw -= w;
        if draw <= 0.0 {
            return Ok(*i);
        }
    }
    Ok(*idx.last().unwrap())
}
