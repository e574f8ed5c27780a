//! Difficult-word aware translation with LLM backends and quality estimation.

pub mod bench;
pub mod demos;
pub mod detection;
pub mod iqc;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod qe;
pub mod transport;
