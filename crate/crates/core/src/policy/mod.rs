//! Declarative event/condition/action policies: data types, canonical
//! rendering and condition evaluation. Parsing lives in [`parser`].

mod parser;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::state::{MemoryState, TopicId};

pub use parser::{parse_policies, parse_policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    FieldUpdated,
    TopicCreated,
    TopicMerged,
    RetrievalPerformed,
    Tick,
    PreCommit,
}

impl EventKind {
    pub const ALL: [EventKind; 6] = [
        EventKind::FieldUpdated,
        EventKind::TopicCreated,
        EventKind::TopicMerged,
        EventKind::RetrievalPerformed,
        EventKind::Tick,
        EventKind::PreCommit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::FieldUpdated => "field_updated",
            EventKind::TopicCreated => "topic_created",
            EventKind::TopicMerged => "topic_merged",
            EventKind::RetrievalPerformed => "retrieval_performed",
            EventKind::Tick => "tick",
            EventKind::PreCommit => "pre_commit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

/// Names a condition or action may refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    UpdatedField,
    UpdatedTopic,
    DependentTopic,
    AccessedTopic,
    /// True when some live field has no unique current entry.
    AmbiguousCurrent,
}

impl Var {
    pub const ALL: [Var; 5] =
        [Var::UpdatedField, Var::UpdatedTopic, Var::DependentTopic, Var::AccessedTopic, Var::AmbiguousCurrent];

    pub fn as_str(self) -> &'static str {
        match self {
            Var::UpdatedField => "updated_field",
            Var::UpdatedTopic => "updated_topic",
            Var::DependentTopic => "dependent_topic",
            Var::AccessedTopic => "accessed_topic",
            Var::AmbiguousCurrent => "ambiguous_current",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Var(Var),
    Topic(TopicId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Literal(u64),
    /// The configured active-state bound at the current interaction count.
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Exists(Var),
    SalienceBelow { target: Target, threshold: f64 },
    FootprintAbove(Bound),
    FieldIs(String),
    TopicArchived(Target),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
    Not(Box<Condition>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    FlagForRevision(Target),
    RejectTransition(String),
    Attenuate(Target),
    Archive(Target),
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub name: String,
    pub on_event: EventKind,
    pub condition: Condition,
    pub action: Action,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("{line}:{col}: expected {expected}, found `{found}`")]
    Syntax { line: usize, col: usize, expected: String, found: String },
    #[error("{line}:{col}: unknown event `{name}`")]
    UnknownEvent { line: usize, col: usize, name: String },
    #[error("{line}:{col}: unknown action `{name}`")]
    UnknownAction { line: usize, col: usize, name: String },
    #[error("duplicate policy name `{0}`")]
    DuplicateName(String),
}

impl PolicyError {
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            PolicyError::Syntax { line, col, .. }
            | PolicyError::UnknownEvent { line, col, .. }
            | PolicyError::UnknownAction { line, col, .. } => Some((*line, *col)),
            PolicyError::DuplicateName(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(&'static str),
    #[error("`{0}` cannot be used as a target here")]
    NotATarget(&'static str),
}

/// Event bindings for one policy evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    pub updated_field: Option<String>,
    pub updated_topic: Option<TopicId>,
    pub accessed_topic: Option<TopicId>,
}

impl Bindings {
    pub fn field_update(topic: TopicId, field: impl Into<String>) -> Self {
        Self { updated_field: Some(field.into()), updated_topic: Some(topic), accessed_topic: None }
    }

    pub fn access(topic: TopicId) -> Self {
        Self { accessed_topic: Some(topic), ..Default::default() }
    }
}

fn require<'a, T>(v: &'a Option<T>, name: &'static str) -> Result<&'a T, EvalError> {
    v.as_ref().ok_or(EvalError::Unbound(name))
}

/// Resolves a target to the topics it denotes.
pub fn resolve_topics(target: &Target, state: &MemoryState, ctx: &Bindings) -> Result<Vec<TopicId>, EvalError> {
    Ok(match target {
        Target::Topic(id) => vec![id.clone()],
        Target::Var(Var::UpdatedTopic) => vec![require(&ctx.updated_topic, "updated_topic")?.clone()],
        Target::Var(Var::AccessedTopic) => vec![require(&ctx.accessed_topic, "accessed_topic")?.clone()],
        Target::Var(Var::DependentTopic) => {
            state.extension_successors(require(&ctx.updated_topic, "updated_topic")?)
        }
        Target::Var(Var::UpdatedField) => vec![require(&ctx.updated_topic, "updated_topic")?.clone()],
        Target::Var(Var::AmbiguousCurrent) => return Err(EvalError::NotATarget("ambiguous_current")),
    })
}

fn topic_salience(state: &MemoryState, id: &TopicId) -> Option<f64> {
    let t = state.topics.get(id)?;
    Some(t.fields.values().map(|f| f.salience).fold(0.0, f64::max))
}

/// Pure evaluation of `cond` against `state` under `ctx`. `beta` is the
/// value `Bound::Beta` resolves to.
pub fn evaluate_condition(cond: &Condition, state: &MemoryState, ctx: &Bindings, beta: usize) -> Result<bool, EvalError> {
    Ok(match cond {
        Condition::Exists(var) => match var {
            Var::UpdatedField => ctx.updated_field.is_some(),
            Var::UpdatedTopic => ctx.updated_topic.is_some(),
            Var::AccessedTopic => ctx.accessed_topic.is_some(),
            Var::DependentTopic => !state.extension_successors(require(&ctx.updated_topic, "updated_topic")?).is_empty(),
            Var::AmbiguousCurrent => has_ambiguous_current(state),
        },
        Condition::SalienceBelow { target, threshold } => {
            if let Target::Var(Var::UpdatedField) = target {
                let topic = require(&ctx.updated_topic, "updated_topic")?;
                let field = require(&ctx.updated_field, "updated_field")?;
                state.topics.get(topic).and_then(|t| t.fields.get(field)).is_some_and(|f| f.salience < *threshold)
            } else {
                resolve_topics(target, state, ctx)?
                    .iter()
                    .filter_map(|id| topic_salience(state, id))
                    .any(|s| s < *threshold)
            }
        }
        Condition::FootprintAbove(bound) => {
            let limit = match bound {
                Bound::Literal(n) => *n as usize,
                Bound::Beta => beta,
            };
            state.active_footprint() > limit
        }
        Condition::FieldIs(name) => require(&ctx.updated_field, "updated_field")? == name,
        Condition::TopicArchived(target) => resolve_topics(target, state, ctx)?
            .iter()
            .any(|id| state.topics.get(id).is_some_and(|t| t.archived)),
        Condition::And(a, b) => {
            evaluate_condition(a, state, ctx, beta)? && evaluate_condition(b, state, ctx, beta)?
        }
        Condition::Or(a, b) => evaluate_condition(a, state, ctx, beta)? || evaluate_condition(b, state, ctx, beta)?,
        Condition::Not(a) => !evaluate_condition(a, state, ctx, beta)?,
    })
}

/// Some non-archived field has a non-empty history without exactly one
/// current entry, so a default read could surface a superseded value.
pub fn has_ambiguous_current(state: &MemoryState) -> bool {
    state
        .topics
        .values()
        .filter(|t| !t.archived)
        .flat_map(|t| t.fields.values())
        .any(|f| !f.history.is_empty() && f.live_entries() != 1)
}

pub const LISTING_PROPAGATE: &str = "POLICY propagate-on-change
  ON   field_updated
  WHEN EXISTS dependent_topic
  DO   flag_for_revision(dependent_topic)
  WITH evidence = {updated_field, timestamp}
";

const DEFAULT_POLICIES: &str = r#"# Dependency propagation: a changed field flags extension-linked topics.
POLICY propagate-on-change
  ON   field_updated
  WHEN EXISTS dependent_topic
  DO   flag_for_revision(dependent_topic)
  WITH evidence = {updated_field, timestamp}

# No committed state may leave a field without a unique current value.
POLICY no-superseded-current
  ON   pre_commit
  WHEN EXISTS ambiguous_current
  DO   reject_transition("superseded-value-as-current")
  WITH evidence = {ambiguous_current}

# Active state stays within the configured bound.
POLICY bounded-active-state
  ON   pre_commit
  WHEN active_footprint > beta
  DO   reject_transition("bounded-active-state")
  WITH evidence = {active_footprint}

# Every tick requests a forgetting pass.
POLICY attenuate-on-tick
  ON   tick
  WHEN active_footprint > 0
  DO   attenuate(all)
  WITH evidence = {timestamp}
"#;

/// Text of the shipped default policy set.
pub fn default_policy_text() -> &'static str {
    DEFAULT_POLICIES
}

pub fn default_policy_set() -> Vec<Policy> {
    parse_policies(DEFAULT_POLICIES).expect("default policies parse")
}

pub fn validate_names(policies: &[Policy]) -> Result<(), PolicyError> {
    let mut seen = BTreeSet::new();
    for p in policies {
        if !seen.insert(p.name.as_str()) {
            return Err(PolicyError::DuplicateName(p.name.clone()));
        }
    }
    Ok(())
}

// ---- rendering ----

const RESERVED: &[&str] = &[
    "POLICY", "ON", "WHEN", "DO", "WITH", "EXISTS", "AND", "OR", "NOT", "field", "salience", "active_footprint",
    "topic_archived", "evidence", "beta", "noop",
];

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    !s.ends_with('-') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn write_name(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    if is_ident(s) && !RESERVED.contains(&s) && Var::parse(s).is_none() {
        f.write_str(s)
    } else {
        write_string(f, s)
    }
}

fn write_string(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Var(v) => f.write_str(v.as_str()),
            Target::Topic(id) => write_name(f, id.as_str()),
        }
    }
}

impl Condition {
    fn precedence(&self) -> u8 {
        match self {
            Condition::Or(..) => 1,
            Condition::And(..) => 2,
            _ => 3,
        }
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, c: &Condition, min_prec: u8) -> fmt::Result {
    if c.precedence() < min_prec {
        write!(f, "({c})")
    } else {
        write!(f, "{c}")
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Exists(v) => write!(f, "EXISTS {}", v.as_str()),
            Condition::SalienceBelow { target, threshold } => write!(f, "salience({target}) < {threshold:?}"),
            Condition::FootprintAbove(Bound::Literal(n)) => write!(f, "active_footprint > {n}"),
            Condition::FootprintAbove(Bound::Beta) => f.write_str("active_footprint > beta"),
            Condition::FieldIs(name) => {
                f.write_str("field == ")?;
                write_name(f, name)
            }
            Condition::TopicArchived(t) => write!(f, "topic_archived({t})"),
            // left-associative chains need parens only on the right
            Condition::And(a, b) => {
                write_operand(f, a, 2)?;
                f.write_str(" AND ")?;
                write_operand(f, b, 3)
            }
            Condition::Or(a, b) => {
                write_operand(f, a, 1)?;
                f.write_str(" OR ")?;
                write_operand(f, b, 2)
            }
            Condition::Not(a) => {
                f.write_str("NOT ")?;
                write_operand(f, a, 3)
            }
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::FlagForRevision(t) => write!(f, "flag_for_revision({t})"),
            Action::RejectTransition(msg) => {
                f.write_str("reject_transition(")?;
                write_string(f, msg)?;
                f.write_str(")")
            }
            Action::Attenuate(t) => write!(f, "attenuate({t})"),
            Action::Archive(t) => write!(f, "archive({t})"),
            Action::Noop => f.write_str("noop"),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "POLICY {}", self.name)?;
        writeln!(f, "  ON   {}", self.on_event.as_str())?;
        writeln!(f, "  WHEN {}", self.condition)?;
        writeln!(f, "  DO   {}", self.action)?;
        f.write_str("  WITH evidence = {")?;
        for (i, e) in self.evidence.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            f.write_str(e)?;
        }
        f.write_str("}\n")
    }
}

pub fn render_policy(p: &Policy) -> String {
    p.to_string()
}

pub fn render_policies(ps: &[Policy]) -> String {
    ps.iter().map(render_policy).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{EdgeKind, Field, Timestamp, Topic, ValueEntry};

    fn listing() -> Policy {
        parse_policy(LISTING_PROPAGATE).unwrap()
    }

    #[test]
    fn listing_structure() {
        let p = listing();
        assert_eq!(p.name, "propagate-on-change");
        assert_eq!(p.on_event, EventKind::FieldUpdated);
        assert_eq!(p.condition, Condition::Exists(Var::DependentTopic));
        assert_eq!(p.action, Action::FlagForRevision(Target::Var(Var::DependentTopic)));
        assert_eq!(p.evidence, vec!["updated_field".to_string(), "timestamp".to_string()]);
    }

    #[test]
    fn render_round_trips_and_is_deterministic() {
        let p = listing();
        let text = render_policy(&p);
        assert_eq!(text, render_policy(&p));
        assert_eq!(parse_policy(&text).unwrap(), p);
        for d in default_policy_set() {
            assert_eq!(parse_policy(&render_policy(&d)).unwrap(), d);
        }
    }

    #[test]
    fn defaults_contents() {
        let ps = default_policy_set();
        assert_eq!(ps.len(), 4);
        assert!(ps.iter().any(|p| p.name == "propagate-on-change"));
        assert_eq!(ps.iter().filter(|p| p.on_event == EventKind::PreCommit).count(), 2);
        assert!(ps.iter().any(|p| p.on_event == EventKind::Tick && matches!(p.action, Action::Attenuate(_))));
        validate_names(&ps).unwrap();
    }

    fn two_topics(kind: EdgeKind) -> MemoryState {
        let mut s = MemoryState::default();
        for id in ["Website-Redesign", "Milestones"] {
            let mut t = Topic::new(id.into(), id, "");
            let prov = crate::state::Provenance { source_id: "s".into(), event_id: 0, excerpt: String::new() };
            t.fields.insert("f".into(), Field::new("f", None, ValueEntry::new("v", Timestamp::at(0), prov), 0.4));
            s.topics.insert(id.into(), t);
        }
        s.add_edge("Website-Redesign".into(), "Milestones".into(), kind, Timestamp::at(0));
        s
    }

    #[test]
    fn dependent_topic_follows_extension_edges_only() {
        let ctx = Bindings::field_update("Website-Redesign".into(), "Deadline");
        let cond = listing().condition;
        assert!(evaluate_condition(&cond, &two_topics(EdgeKind::Extension), &ctx, 10).unwrap());
        assert!(!evaluate_condition(&cond, &two_topics(EdgeKind::Association), &ctx, 10).unwrap());
    }

    #[test]
    fn unbound_variable_is_an_error() {
        let cond = listing().condition;
        let err = evaluate_condition(&cond, &MemoryState::default(), &Bindings::default(), 10).unwrap_err();
        assert_eq!(err, EvalError::Unbound("updated_topic"));
        let err = evaluate_condition(&Condition::FieldIs("x".into()), &MemoryState::default(), &Bindings::default(), 1)
            .unwrap_err();
        assert!(err.to_string().contains("updated_field"));
    }

    #[test]
    fn atoms() {
        let s = two_topics(EdgeKind::Extension);
        let ctx = Bindings::field_update("Website-Redesign".into(), "f");
        let below = Condition::SalienceBelow { target: Target::Var(Var::UpdatedField), threshold: 0.5 };
        assert!(evaluate_condition(&below, &s, &ctx, 0).unwrap());
        let dep = Condition::SalienceBelow { target: Target::Var(Var::DependentTopic), threshold: 0.3 };
        assert!(!evaluate_condition(&dep, &s, &ctx, 0).unwrap());
        assert!(evaluate_condition(&Condition::FootprintAbove(Bound::Literal(1)), &s, &ctx, 0).unwrap());
        assert!(!evaluate_condition(&Condition::FootprintAbove(Bound::Beta), &s, &ctx, 2).unwrap());
        assert!(evaluate_condition(&Condition::FieldIs("f".into()), &s, &ctx, 0).unwrap());
        assert!(!evaluate_condition(&Condition::TopicArchived(Target::Topic("Milestones".into())), &s, &ctx, 0)
            .unwrap());
        assert!(!evaluate_condition(&Condition::Exists(Var::AmbiguousCurrent), &s, &ctx, 0).unwrap());
    }
}
