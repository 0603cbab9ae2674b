//! writerlab: a desk-scale laboratory for training a small decoder-only
//! transformer with hierarchical task-gated low-rank adapters under a
//! four-stage curriculum, generating stories in two stages (plot planning,
//! prose writing), and evaluating outputs with ROUGE and an LLM judge.

pub mod chat;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod judge;
pub mod lora;
pub mod model;
pub mod optim;
pub mod report;
pub mod rouge;
pub mod segmenter;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
