//! The four state-level operators. Each is a pure function from a committed
//! snapshot to a proposed snapshot; sequencing and commit belong to the
//! transition engine.

mod forget;
mod ingest;
mod retrieve;
mod revise;
pub mod rules;

use serde::{Deserialize, Serialize};

use crate::config::EngineParams;
use crate::embed::RouteError;
use crate::policy::{Bindings, EventKind};
use crate::state::{MemoryState, Provenance, Timestamp, TopicId, UnitKey};

pub use forget::{compress_field, forget, tick};
pub use ingest::ingest;
pub use retrieve::{field_matches, read, retrieve};
pub use revise::{detect_duplicates, detect_evidence, revise};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub field: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_tag: Option<String>,
    /// Origin of the fact (session or document id).
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "workload".to_string()
}

impl Fact {
    pub fn new(field: impl Into<String>, value: impl Into<String>) -> Self {
        Self { field: field.into(), value: value.into(), entity_tag: None, source: default_source() }
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.entity_tag = Some(tag.into());
        self
    }

    pub fn from_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FactBundle {
    pub facts: Vec<Fact>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_hint: Option<TopicId>,
    /// Topics the host extends: adds `x -> host` Extension edges.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extends: Vec<TopicId>,
    /// Topics the host is associated with.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub associates: Vec<TopicId>,
}

impl FactBundle {
    pub fn new(text: impl Into<String>, facts: Vec<Fact>) -> Self {
        Self { facts, text: text.into(), ..Default::default() }
    }

    pub fn hinted(mut self, topic: impl Into<String>) -> Self {
        self.topic_hint = Some(TopicId(topic.into()));
        self
    }

    pub fn extending(mut self, topic: impl Into<String>) -> Self {
        self.extends.push(TopicId(topic.into()));
        self
    }

    pub fn associated_with(mut self, topic: impl Into<String>) -> Self {
        self.associates.push(TopicId(topic.into()));
        self
    }

    pub fn validate(&self) -> Result<(), OpError> {
        if self.facts.is_empty() {
            return Err(OpError::InvalidBundle("bundle has no facts".into()));
        }
        if self.facts.iter().any(|f| f.field.trim().is_empty()) {
            return Err(OpError::InvalidBundle("fact with empty field name".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Default,
    Historical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        as_of: Option<u64>,
    },
    Structural { root: TopicId, depth: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Query {
    pub text: String,
    #[serde(default)]
    pub mode: QueryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<UnitKey>,
}

impl Query {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Default::default() }
    }

    pub fn historical(text: impl Into<String>, as_of: Option<u64>) -> Self {
        Self { text: text.into(), mode: QueryMode::Historical { as_of }, explicit: None }
    }

    pub fn explicit(topic: impl Into<String>, field: impl Into<String>) -> Self {
        let unit = UnitKey::new(topic, field);
        Self { text: unit.to_string(), mode: QueryMode::Default, explicit: Some(unit) }
    }

    pub fn validate(&self, now: u64) -> Result<(), OpError> {
        match &self.mode {
            QueryMode::Structural { depth, .. } if *depth == 0 => {
                Err(OpError::InvalidQuery("structural depth must be at least 1".into()))
            }
            QueryMode::Historical { as_of: Some(t) } if *t > now => {
                Err(OpError::InvalidQuery(format!("as_of {t} is in the future (now {now})")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub unit: UnitKey,
    pub value: String,
    pub at: Timestamp,
    pub prov: Provenance,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub superseded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextItem {
    pub topic: TopicId,
    pub title: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RetrievalOutput {
    pub answers: Vec<Answer>,
    pub accessed_units: Vec<UnitKey>,
    pub context: Vec<ContextItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvidenceItem {
    DuplicateTopics { a: TopicId, b: TopicId, similarity: f64 },
    ConflictingValues { topic: TopicId, field: String },
    SchemaDrift { topic: TopicId, field: String },
    DependencyFlag { topic: TopicId, cause: UnitKey },
    PromotionCandidate { topic: TopicId, entity_tag: String },
}

impl EvidenceItem {
    pub fn is_dependency(&self) -> bool {
        matches!(self, EvidenceItem::DependencyFlag { .. })
    }
}

/// Semantic annotations an operator attaches to its transition. They carry
/// no state; replay ignores them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Note {
    Routed { host: TopicId, created: bool },
    Deduplicated { unit: UnitKey },
    RevisionEvaluated { topic: TopicId, cause: UnitKey, fired: Vec<String> },
    UnitMerged { from: UnitKey, into: UnitKey },
    UnitMoved { from: UnitKey, into: UnitKey },
    TopicMerged { loser: TopicId, winner: TopicId },
    Promoted { source: TopicId, topic: TopicId, entity_tag: String },
    EvidenceSkipped { reason: String },
    Hidden { unit: UnitKey, by_cap: bool },
    Archived { topic: TopicId },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OpError {
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("unknown-unit: {0}")]
    UnknownUnit(String),
    #[error("routing: {0}")]
    Routing(#[from] RouteError),
    #[error("evidence: {0}")]
    Evidence(String),
}

/// A proposed next state plus what the engine needs to journal and govern it.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub state: MemoryState,
    pub notes: Vec<Note>,
    /// Policy events raised by the transition, in order.
    pub events: Vec<(EventKind, Bindings)>,
    pub output: Option<RetrievalOutput>,
}

impl Proposal {
    pub(crate) fn new(state: MemoryState) -> Self {
        Self { state, notes: Vec::new(), events: Vec::new(), output: None }
    }
}

/// Context shared by all operators.
#[derive(Clone, Copy)]
pub struct OpEnv<'a> {
    pub params: &'a EngineParams,
    pub rules: &'a rules::RuleTable,
    pub router: &'a dyn crate::embed::Router,
}

impl<'a> OpEnv<'a> {
    /// Tick the next committed transition will carry.
    pub fn next_tick(state: &MemoryState) -> u64 {
        state.clock.tick + 1
    }
}
