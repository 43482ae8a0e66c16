//! Two-stage distillation of conventional sequential-recommendation (SR)
//! models into a small language model.
//!
//! Stage 1 trains a bank of soft prompts against two auxiliary tasks
//! (temporal analysis and teacher-pattern simulation) while the LM stays
//! frozen; stage 2 freezes the bank and fine-tunes low-rank adapters on the
//! ground-truth next-item task. Ranking quality is measured with HR@k and
//! NDCG@k over sampled candidate sets.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`catalog`] — ingestion, filtering, chronological splits, windowed
//!   examples and candidate sampling
//! * [`synth`] — built-in synthetic dataset generators (cyclic / Markov)
//! * [`teachers`] — miniature SASRec / GRU4Rec / Caser models and top-h export
//! * [`lm`] — the small causal LM with base / soft-prompt / adapter partitions
//! * [`prompting`] — the three prompt templates
//! * [`distill`] — stage 1 (soft prompts only, dynamic multi-task weighting)
//! * [`adapt`] — stage 2 (adapters only, budgeted rank reallocation, ablations)
//! * [`rank`] — verbalizer, HR/NDCG metrics, paired t-test
//! * [`pipeline`] — configuration, orchestration, artifacts and reports

pub mod adapt;
pub mod catalog;
pub mod config;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod num;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod prompting;
pub mod rank;
pub mod rng;
pub mod synth;
pub mod teachers;

pub use error::{Error, Result};
