//! Evolutionary search over YOLO-style detector architecture files.

pub mod arch;
pub mod genome;
pub mod detection;
pub mod evaluator;
pub mod llm;
pub mod operators;
pub mod moo;
pub mod evolution;
pub mod cli;
