//! The transaction template: dispatch one event to an operator, govern the
//! proposed snapshot with the policy set, then commit or abort. Every
//! attempt is journaled.

pub mod delta;
pub mod journal;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::embed::{EmbeddingRouter, Router};
use crate::operators::rules::RuleTable;
use crate::operators::{self, EvidenceItem, FactBundle, Note, OpEnv, OpError, Proposal, Query, RetrievalOutput};
use crate::policy::{self, Action, Bindings, EventKind, Policy, Target};
use crate::state::{ForgetMark, MarkKind, MemoryState, RevisionFlag, Timestamp, TopicId, UnitKey};

pub use delta::Delta;
pub use journal::{Journal, JournalEntry, JournalError, JournalHeader, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviseSpec {
    /// Scan the state for evidence.
    Auto,
    Explicit(Vec<EvidenceItem>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineEvent {
    Ingest(FactBundle),
    Retrieve(Query),
    Revise(ReviseSpec),
    Forget {
        /// Slots to leave free below the bound for an imminent write.
        #[serde(default)]
        headroom: usize,
        /// Units exempt from this pass.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        protect: Vec<UnitKey>,
    },
    Tick,
}

impl EngineEvent {
    pub fn forget() -> Self {
        EngineEvent::Forget { headroom: 0, protect: Vec::new() }
    }

    pub fn operator(&self) -> Operator {
        match self {
            EngineEvent::Ingest(_) => Operator::Ingest,
            EngineEvent::Retrieve(_) => Operator::Retrieve,
            EngineEvent::Revise(_) => Operator::Revise,
            EngineEvent::Forget { .. } => Operator::Forget,
            EngineEvent::Tick => Operator::Tick,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Ingest,
    Retrieve,
    Revise,
    Forget,
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Committed,
    Aborted { reason: String },
}

impl Outcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, Outcome::Committed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyFiring {
    pub policy: String,
    pub event: EventKind,
    pub fired: bool,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    /// Tick the transition commits at. Aborted records carry the tick they
    /// attempted; the next committed record reuses it.
    pub tick: Timestamp,
    pub operator: Operator,
    pub input: EngineEvent,
    pub deltas: Vec<Delta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<Note>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<RetrievalOutput>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub policy_log: Vec<PolicyFiring>,
    pub outcome: Outcome,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// Loaded, validated settings plus the pluggable router.
#[derive(Clone)]
pub struct Runtime {
    pub settings: Settings,
    pub policies: Vec<Policy>,
    pub rules: RuleTable,
    router: Arc<dyn Router>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("settings", &self.settings).finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn new(settings: Settings) -> Result<Self, EngineError> {
        settings.params.validate().map_err(|e| EngineError::Settings(e.to_string()))?;
        let policies = settings.policies().map_err(|e| EngineError::Settings(format!("policies: {e}")))?;
        let rules = settings.rules().map_err(|e| EngineError::Settings(format!("rules: {e}")))?;
        Ok(Self { settings, policies, rules, router: Arc::new(EmbeddingRouter) })
    }

    pub fn with_router(mut self, router: Arc<dyn Router>) -> Self {
        self.router = router;
        self
    }

    pub fn genesis(&self) -> MemoryState {
        MemoryState::genesis(self.policies.clone())
    }

    pub fn env(&self) -> OpEnv<'_> {
        OpEnv { params: &self.settings.params, rules: &self.rules, router: self.router.as_ref() }
    }

    pub fn beta(&self, tick: u64) -> usize {
        self.settings.params.beta.at(tick)
    }
}

/// Result of one transaction.
#[derive(Debug, Clone)]
pub struct Transition {
    pub next: MemoryState,
    pub output: Option<RetrievalOutput>,
    pub record: TransitionRecord,
}

fn run_operator(state: &MemoryState, event: &EngineEvent, env: &OpEnv<'_>) -> Result<Proposal, OpError> {
    match event {
        EngineEvent::Ingest(b) => operators::ingest(state, b, env),
        EngineEvent::Retrieve(q) => operators::retrieve(state, q, env),
        EngineEvent::Revise(ReviseSpec::Explicit(items)) => operators::revise(state, items, env),
        EngineEvent::Revise(ReviseSpec::Auto) => operators::revise(state, &operators::detect_evidence(state, env.params), env),
        EngineEvent::Forget { headroom, protect } => {
            Ok(operators::forget(state, env, *headroom, &protect.iter().cloned().collect()))
        }
        EngineEvent::Tick => Ok(operators::tick(state, env)),
    }
}

fn action_label(a: &Action) -> String {
    match a {
        Action::FlagForRevision(t) => format!("flag_for_revision({t})"),
        Action::RejectTransition(m) => format!("reject_transition({m:?})"),
        Action::Attenuate(t) => format!("attenuate({t})"),
        Action::Archive(t) => format!("archive({t})"),
        Action::Noop => "noop".into(),
    }
}

/// Queues the effects of a fired event policy onto `state`. Returns a
/// rejection message if the action rejects the transition.
fn enact(action: &Action, state: &mut MemoryState, ctx: &Bindings) -> Result<Option<String>, policy::EvalError> {
    match action {
        Action::FlagForRevision(target) => {
            let cause = UnitKey {
                topic: ctx.updated_topic.clone().or_else(|| ctx.accessed_topic.clone()).unwrap_or(TopicId::new("*")),
                field: ctx.updated_field.clone().unwrap_or_else(|| "*".into()),
            };
            for topic in policy::resolve_topics(target, state, ctx)? {
                if state.topics.contains_key(&topic) {
                    state.revision_queue.insert(RevisionFlag { topic, cause: cause.clone() });
                }
            }
        }
        Action::Attenuate(target) | Action::Archive(target) => {
            let kind = if matches!(action, Action::Archive(_)) { MarkKind::Archive } else { MarkKind::Attenuate };
            let targets = match target {
                Target::Topic(id) => vec![id.clone()],
                _ => policy::resolve_topics(target, state, ctx)?,
            };
            for t in targets {
                state.forget_marks.insert(ForgetMark { kind, target: t.0 });
            }
        }
        Action::RejectTransition(msg) => return Ok(Some(msg.clone())),
        Action::Noop => {}
    }
    Ok(None)
}

/// One governed transaction over `state`. Never fails: operator errors and
/// policy rejections come back as an aborted record with `next == state`.
pub fn apply_event(state: &MemoryState, event: &EngineEvent, rt: &Runtime) -> Transition {
    let tick = state.clock.tick + 1;
    let beta = rt.beta(tick);
    let mut log = Vec::new();
    let abort = |reason: String, notes: Vec<Note>, log: Vec<PolicyFiring>| Transition {
        next: state.clone(),
        output: None,
        record: TransitionRecord {
            tick: Timestamp::at(tick),
            operator: event.operator(),
            input: event.clone(),
            deltas: Vec::new(),
            notes,
            output: None,
            policy_log: log,
            outcome: Outcome::Aborted { reason },
        },
    };

    let proposal = match run_operator(state, event, &rt.env()) {
        Ok(p) => p,
        Err(e) => return abort(e.to_string(), Vec::new(), log),
    };
    let Proposal { state: mut next, notes, events, output } = proposal;

    // Event policies see the proposed state and only enqueue work.
    let mut rejection = None;
    for (kind, ctx) in &events {
        for p in state.policies.iter().filter(|p| p.on_event == *kind) {
            let fired = match policy::evaluate_condition(&p.condition, &next, ctx, beta) {
                Ok(f) => f,
                Err(e) => return abort(format!("policy-error: {}: {e}", p.name), notes, log),
            };
            log.push(PolicyFiring { policy: p.name.clone(), event: *kind, fired, action: action_label(&p.action) });
            if fired {
                match enact(&p.action, &mut next, ctx) {
                    Ok(Some(msg)) => {
                        rejection.get_or_insert(msg);
                    }
                    Ok(None) => {}
                    Err(e) => return abort(format!("policy-error: {}: {e}", p.name), notes, log),
                }
            }
        }
    }

    // Postconditions: reject if any pre_commit policy rejects.
    for p in state.policies.iter().filter(|p| p.on_event == EventKind::PreCommit) {
        let fired = match policy::evaluate_condition(&p.condition, &next, &Bindings::default(), beta) {
            Ok(f) => f,
            Err(e) => return abort(format!("policy-error: {}: {e}", p.name), notes, log),
        };
        log.push(PolicyFiring {
            policy: p.name.clone(),
            event: EventKind::PreCommit,
            fired,
            action: action_label(&p.action),
        });
        if fired {
            if let Action::RejectTransition(msg) = &p.action {
                rejection.get_or_insert(msg.clone());
            }
        }
    }
    if let Some(reason) = rejection {
        return abort(reason, notes, log);
    }

    next.clock = Timestamp::at(tick);
    let deltas = if matches!(event, EngineEvent::Tick) {
        let factor = rt.settings.params.salience.decay;
        let mut decayed = state.clone();
        delta::decay_all(&mut decayed, factor);
        let mut d = vec![Delta::Decayed { factor }];
        d.extend(delta::diff(&decayed, &next));
        d
    } else {
        delta::diff(state, &next)
    };
    Transition {
        next,
        output: output.clone(),
        record: TransitionRecord {
            tick: Timestamp::at(tick),
            operator: event.operator(),
            input: event.clone(),
            deltas,
            notes,
            output,
            policy_log: log,
            outcome: Outcome::Committed,
        },
    }
}

/// What a submitted event produced once all scheduled maintenance ran.
#[derive(Debug, Clone)]
pub struct Submitted {
    pub output: Option<RetrievalOutput>,
    pub outcome: Outcome,
    /// Records appended to the journal, maintenance included.
    pub records: usize,
}

/// Topics a read would touch: those answering and those returned as context.
pub fn touched_topics(out: &RetrievalOutput) -> BTreeSet<TopicId> {
    out.accessed_units.iter().map(|u| u.topic.clone()).chain(out.context.iter().map(|c| c.topic.clone())).collect()
}

/// Single-writer engine owning the committed snapshot and its journal.
#[derive(Debug, Clone)]
pub struct Engine {
    rt: Runtime,
    state: MemoryState,
    journal: Journal,
}

impl Engine {
    pub fn new(settings: Settings) -> Result<Self, EngineError> {
        Ok(Self::with_runtime(Runtime::new(settings)?))
    }

    pub fn with_runtime(rt: Runtime) -> Self {
        let state = rt.genesis();
        let journal = Journal::new(System::Gem, rt.settings.clone(), state.digest());
        Self { rt, state, journal }
    }

    pub fn state(&self) -> &MemoryState {
        &self.state
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn into_journal(self) -> Journal {
        self.journal
    }

    /// Exactly one transaction, no scheduling.
    pub fn apply(&mut self, event: EngineEvent) -> (Option<RetrievalOutput>, Outcome) {
        let t = apply_event(&self.state, &event, &self.rt);
        let outcome = t.record.outcome.clone();
        self.journal.push(t.record, t.next.digest());
        self.state = t.next;
        (t.output, outcome)
    }

    /// Read-only query against the committed snapshot; no salience change.
    pub fn probe(&self, q: &Query) -> Result<RetrievalOutput, OpError> {
        operators::read(&self.state, q, &self.rt.env())
    }

    fn drain_flags(&mut self, topics: Option<&BTreeSet<TopicId>>) -> usize {
        let mut by_topic: BTreeMap<TopicId, Vec<EvidenceItem>> = BTreeMap::new();
        for f in &self.state.revision_queue {
            if topics.is_none_or(|ts| ts.contains(&f.topic)) {
                by_topic
                    .entry(f.topic.clone())
                    .or_default()
                    .push(EvidenceItem::DependencyFlag { topic: f.topic.clone(), cause: f.cause.clone() });
            }
        }
        let mut n = 0;
        for (_, items) in by_topic {
            // an earlier walk may already have drained these
            let live: Vec<EvidenceItem> = items
                .into_iter()
                .filter(|i| match i {
                    EvidenceItem::DependencyFlag { topic, cause } => self
                        .state
                        .revision_queue
                        .contains(&RevisionFlag { topic: topic.clone(), cause: cause.clone() }),
                    _ => true,
                })
                .collect();
            if !live.is_empty() {
                self.apply(EngineEvent::Revise(ReviseSpec::Explicit(live)));
                n += 1;
            }
        }
        n
    }

    /// Runs `event` with the scheduling the engine owes its readers:
    /// pending revisions before a read that touches them, room under the
    /// bound before a write, and forgetting plus maintenance after a tick.
    pub fn submit(&mut self, event: EngineEvent) -> Submitted {
        let start = self.journal.entries.len();
        let result = match &event {
            EngineEvent::Ingest(bundle) => {
                self.make_room(bundle);
                self.apply(event)
            }
            EngineEvent::Retrieve(q) => {
                while let Ok(dry) = self.probe(q) {
                    let touched = touched_topics(&dry);
                    if !self.state.revision_queue.iter().any(|f| touched.contains(&f.topic)) {
                        break;
                    }
                    if self.drain_flags(Some(&touched)) == 0 {
                        break;
                    }
                }
                self.apply(event)
            }
            EngineEvent::Tick => {
                let r = self.apply(event);
                if r.1.is_committed() {
                    self.maintain();
                }
                r
            }
            _ => self.apply(event),
        };
        Submitted { output: result.0, outcome: result.1, records: self.journal.entries.len() - start }
    }

    fn make_room(&mut self, bundle: &FactBundle) {
        let env = self.rt.env();
        let Ok(sim) = operators::ingest(&self.state, bundle, &env) else { return };
        let next_beta = self.rt.beta(self.state.clock.tick + 1);
        if sim.state.active_footprint() <= next_beta {
            return;
        }
        let host = sim.notes.iter().find_map(|n| match n {
            Note::Routed { host, .. } => Some(host.clone()),
            _ => None,
        });
        let Some(host) = host else { return };
        let fields: BTreeSet<&str> = bundle.facts.iter().map(|f| f.field.as_str()).collect();
        let protect = fields.iter().map(|f| UnitKey { topic: host.clone(), field: f.to_string() }).collect();
        self.apply(EngineEvent::Forget { headroom: fields.len(), protect });
    }

    fn maintain(&mut self) {
        if !self.state.forget_marks.is_empty() {
            self.apply(EngineEvent::forget());
        }
        let structural: Vec<EvidenceItem> = operators::detect_evidence(&self.state, &self.rt.settings.params)
            .into_iter()
            .filter(|e| !e.is_dependency())
            .collect();
        if !structural.is_empty() {
            self.apply(EngineEvent::Revise(ReviseSpec::Explicit(structural)));
        }
        self.drain_flags(None);
    }
}
