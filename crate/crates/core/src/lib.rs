//! Sequential-parallel retrieval-augmented question answering: corpus
//! indexing, LLM agents, the round-based orchestrator, evaluation and
//! preference-data generation.

pub mod agents;
pub mod corpus;
pub mod dense;
pub mod evalkit;
pub mod llm;
pub mod model;
pub mod transport;
pub mod orchestrator;
pub mod prefdata;
