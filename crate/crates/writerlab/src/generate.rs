//! Two-stage inference: rolling next-plot prediction under the plot task,
//! then prose realization of each planned plot under the writing task.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_prompt, PLOT_INSTRUCTION, WRITE_INSTRUCTION};
use crate::error::{Error, Result};
use crate::lora::{AdapterContext, AdapterState, AlphaProbe, TaskId};
use crate::model::{sample_next, Model, SampleConfig};
use crate::tape::Tape;
use crate::tokenizer::{Tokenizer, EOS};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    /// number of plots to plan
    pub n_plots: usize,
    /// rolling context window size
    pub n_ctx: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 64,
            temperature: 0.0,
            top_k: 1,
            seed: 0,
            n_plots: 4,
            n_ctx: 3,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.n_plots == 0 {
            return Err(Error::Config("n_plots must be >= 1".into()));
        }
        if self.n_ctx == 0 {
            return Err(Error::Config("n_ctx must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoryPlan {
    pub teacher_seeded: bool,
    pub summaries: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedChapter {
    pub segments: Vec<String>,
    pub chapter: String,
}

/// Full generation artifact written as story.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoryOutput {
    pub plan: Vec<String>,
    pub segments: Vec<String>,
    pub config: GenerationConfig,
    pub checkpoint_hash: Option<String>,
}

/// Autoregressive decode from a prompt; stops at EOS or `max_new_tokens`.
/// When the context outgrows max_seq_len the prompt window slides.
pub fn decode(
    model: &Model,
    adapters: Option<&AdapterState>,
    active: TaskId,
    prompt: &[usize],
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
    probe: Option<&AlphaProbe>,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    let sample = SampleConfig { temperature: cfg.temperature, top_k: cfg.top_k };
    let mut ids = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let window_start = ids.len().saturating_sub(model.config.max_seq_len);
        let window = &ids[window_start..];
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let ctx = adapters.map(|state| AdapterContext { state, active, alpha_probe: probe });
        let logits = model.forward_logits(&mut tape, &mut leaves, window, ctx.as_ref(), None)?;
        let v = model.config.vocab_size;
        let last_row = &tape.value(logits)[(window.len() - 1) * v..window.len() * v];
        let next = sample_next(last_row, &sample, rng)?;
        if next == EOS {
            break;
        }
        ids.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Predict the next plot summary from the most recent context summaries.
pub fn predict_next_plot(
    model: &Model,
    tokenizer: &Tokenizer,
    adapters: &AdapterState,
    context: &[String],
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
    probe: Option<&AlphaProbe>,
) -> Result<String> {
    if context.is_empty() {
        return Err(Error::Contract("plot prediction needs a non-empty context".into()));
    }
    let parts: Vec<&str> = context.iter().map(|s| s.as_str()).collect();
    let prompt = serialize_prompt(TaskId::Plot, PLOT_INSTRUCTION, &parts, tokenizer)?;
    let out = decode(model, Some(adapters), TaskId::Plot, &prompt, cfg, rng, probe)?;
    Ok(tokenizer.decode(&out))
}

/// Plan `n_plots` summaries with a rolling window of size `n_ctx`, seeded
/// from gold context (teacher-seeded) or empty (free-running).
pub fn plan_story(
    model: &Model,
    tokenizer: &Tokenizer,
    adapters: &AdapterState,
    seed_context: &[String],
    cfg: &GenerationConfig,
) -> Result<StoryPlan> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teacher_seeded = !seed_context.is_empty();
    let mut window: Vec<String> = seed_context
        .iter()
        .rev()
        .take(cfg.n_ctx)
        .rev()
        .cloned()
        .collect();
    let mut summaries = Vec::with_capacity(cfg.n_plots);
    for _ in 0..cfg.n_plots {
        let context: Vec<String> = if window.is_empty() {
            // free-running bootstrap: a single empty context slot
            vec![String::new()]
        } else {
            window.clone()
        };
        let next = predict_next_plot(model, tokenizer, adapters, &context, cfg, &mut rng, None)?;
        if next.trim().is_empty() {
            return Err(Error::Data("planned an empty plot summary".into()));
        }
        window.push(next.clone());
        if window.len() > cfg.n_ctx {
            window.remove(0);
        }
        summaries.push(next);
    }
    Ok(StoryPlan { teacher_seeded, summaries })
}

/// Realize each planned summary as prose under the writing task.
pub fn write_story(
    model: &Model,
    tokenizer: &Tokenizer,
    adapters: &AdapterState,
    plan: &StoryPlan,
    cfg: &GenerationConfig,
) -> Result<GeneratedChapter> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut segments = Vec::with_capacity(plan.summaries.len());
    for summary in &plan.summaries {
        let prompt =
            serialize_prompt(TaskId::Writing, WRITE_INSTRUCTION, &[summary.as_str()], tokenizer)?;
        let out = decode(model, Some(adapters), TaskId::Writing, &prompt, cfg, &mut rng, None)?;
        segments.push(tokenizer.decode(&out));
    }
    let chapter = segments.concat();
    Ok(GeneratedChapter { segments, chapter })
}
