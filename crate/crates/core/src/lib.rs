//! Governed evolving memory: a topic-structured memory state whose every
//! change goes through a journaled, policy-checked transaction.

pub mod audit;
pub mod baseline;
pub mod config;
pub mod embed;
pub mod engine;
pub mod operators;
pub mod par;
pub mod policy;
pub mod salience;
pub mod state;
pub mod workload;

pub use baseline::{CrudStore, CrudSystem};
pub use config::{Beta, EngineConfig, EngineParams, Settings};
pub use engine::{Engine, EngineEvent, Journal, Outcome, Runtime, TransitionRecord};
pub use operators::{Fact, FactBundle, Query, QueryMode, RetrievalOutput};
pub use state::{MemoryState, TopicId, UnitKey};
