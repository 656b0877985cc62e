//! Orchestration harness for LLM-driven text-to-SQL: schema loading, prompt
//! serialization, content linking, column selection, execution-based
//! candidate selection, evaluation and synthetic rewrite filtering.

pub mod content;
pub mod exec;
pub mod prompt;
pub mod schema;
pub mod selection;
pub mod sqllex;
pub mod consistency;
pub mod eval;
pub mod llm;
pub mod pipeline;
pub mod synth;
