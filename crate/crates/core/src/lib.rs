pub mod backend;
pub mod config;
pub mod dataset;
pub mod evaluator;
pub mod inferencer;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod retriever;
pub mod template;
