//! Two-turn locate-and-focus agent harness for video text question answering:
//! dataset handling, the reasoning/action grammar, model backends, the episode
//! engine, metrics, data curation, a GRPO toy lab and oracle analysis.

pub mod backend;
pub mod cli;
pub mod config;
pub mod curation;
pub mod data;
pub mod engine;
pub mod grammar;
pub mod grpo;
pub mod metrics;
pub mod oracle;
pub mod report;
