//! One read-only view over either audited system, so every check is
//! written once.

use std::collections::{BTreeMap, BTreeSet};

use crate::baseline::CrudStore;
use crate::config::Settings;
use crate::embed::EmbeddingRouter;
use crate::engine::JournalEntry;
use crate::engine::{journal, JournalError};
use crate::operators::rules::RuleTable;
use crate::operators::{self, OpEnv, OpError, Query, RetrievalOutput};
use crate::policy::{self, Action, Bindings, EventKind};
use crate::state::{hide_order_key, MemoryState, Provenance, Tier, TopicId, UnitKey};

pub enum Subject {
    Gem(MemoryState),
    Crud(CrudStore),
}

impl Subject {
    pub fn step(&mut self, entry: &JournalEntry) -> Result<(), JournalError> {
        match self {
            Subject::Gem(s) => journal::replay_step(s, entry),
            Subject::Crud(s) => crate::baseline::replay_step(s, entry),
        }
    }

    pub fn read(&self, q: &Query, settings: &Settings, rules: &RuleTable) -> Result<RetrievalOutput, OpError> {
        match self {
            Subject::Gem(s) => {
                let env = OpEnv { params: &settings.params, rules, router: &EmbeddingRouter };
                operators::read(s, q, &env)
            }
            Subject::Crud(s) => s.query(q, settings.params.top_topics),
        }
    }

    pub fn footprint(&self) -> usize {
        match self {
            Subject::Gem(s) => s.active_footprint(),
            Subject::Crud(s) => s.footprint(),
        }
    }

    /// Hidden fields and archived topics; the store attenuates nothing.
    pub fn attenuated(&self, unit: &UnitKey) -> bool {
        match self {
            Subject::Gem(s) => match s.topics.get(&unit.topic) {
                Some(t) => t.archived || t.fields.get(&unit.field).is_some_and(|f| f.tier == Tier::Hidden),
                None => false,
            },
            Subject::Crud(_) => false,
        }
    }

    /// Every (value, provenance records) an explicit lookup can reach.
    pub fn lookup(&self, unit: &UnitKey) -> Vec<(String, Vec<Provenance>)> {
        match self {
            Subject::Gem(s) => s
                .field(unit)
                .map(|f| f.history.iter().map(|e| (e.value.clone(), e.provenance().cloned().collect())).collect())
                .unwrap_or_default(),
            Subject::Crud(s) => s.lookup(unit).into_iter().map(|(r, f)| (f.value.clone(), vec![r.provenance(f)])).collect(),
        }
    }

    pub fn provenance(&self, unit: &UnitKey) -> Option<BTreeSet<Provenance>> {
        match self {
            Subject::Gem(s) => s.field(unit).map(|f| f.provenance()),
            Subject::Crud(s) => {
                let hits = s.lookup(unit);
                (!hits.is_empty()).then(|| hits.into_iter().map(|(r, f)| r.provenance(f)).collect())
            }
        }
    }

    pub fn all_provenance(&self) -> BTreeMap<UnitKey, BTreeSet<Provenance>> {
        match self {
            Subject::Gem(s) => s.provenance_by_unit(),
            Subject::Crud(s) => s.provenance_by_unit(),
        }
    }

    /// Current (value, tick) of a unit regardless of tier.
    pub fn current(&self, unit: &UnitKey) -> Option<(String, u64)> {
        match self {
            Subject::Gem(s) => s.field(unit).and_then(|f| f.current()).map(|e| (e.value.clone(), e.at.tick)),
            Subject::Crud(s) => s.lookup(unit).last().map(|(r, f)| (f.value.clone(), r.created_at.tick)),
        }
    }

    pub fn units_of(&self, topic: &TopicId) -> Vec<UnitKey> {
        match self {
            Subject::Gem(s) => s
                .topics
                .get(topic)
                .map(|t| t.fields.keys().map(|f| UnitKey { topic: topic.clone(), field: f.clone() }).collect())
                .unwrap_or_default(),
            Subject::Crud(s) => {
                s.records.iter().filter(|r| &r.subject == topic).flat_map(|r| r.units()).collect::<BTreeSet<_>>().into_iter().collect()
            }
        }
    }

    pub fn extension_successors(&self, topic: &TopicId) -> Vec<TopicId> {
        match self {
            Subject::Gem(s) => s.extension_successors(topic),
            Subject::Crud(_) => Vec::new(),
        }
    }

    /// None when the system keeps no salience at all.
    pub fn salience(&self, unit: &UnitKey) -> Option<f64> {
        match self {
            Subject::Gem(s) => s.field(unit).map(|f| f.salience),
            Subject::Crud(_) => None,
        }
    }

    /// How many active units outside `exclude` would be hidden before
    /// `unit`. None unless `unit` is itself active.
    pub fn hide_rank(&self, unit: &UnitKey, exclude: &BTreeSet<UnitKey>) -> Option<usize> {
        let Subject::Gem(s) = self else { return None };
        let t = s.topics.get(&unit.topic).filter(|t| !t.archived)?;
        let f = t.fields.get(&unit.field).filter(|f| f.tier == Tier::Active)?;
        let key = hide_order_key(&t.id, f);
        let before = |k: (f64, u64, &str, &TopicId)| {
            k.0.total_cmp(&key.0).then(k.1.cmp(&key.1)).then(k.2.cmp(key.2)).then(k.3.cmp(key.3)).is_lt()
        };
        Some(
            s.topics
                .values()
                .filter(|o| !o.archived)
                .flat_map(|o| o.fields.values().filter(|g| g.tier == Tier::Active).map(move |g| (o, g)))
                .filter(|(o, g)| !exclude.contains(&UnitKey { topic: o.id.clone(), field: g.name.clone() }))
                .filter(|(o, g)| before(hide_order_key(&o.id, g)))
                .count(),
        )
    }

    /// Names of pre_commit policies that would reject this snapshot.
    pub fn rejecting_policies(&self, beta: usize) -> Vec<String> {
        let Subject::Gem(s) = self else { return Vec::new() };
        s.policies
            .iter()
            .filter(|p| p.on_event == EventKind::PreCommit)
            .filter_map(|p| match policy::evaluate_condition(&p.condition, s, &Bindings::default(), beta) {
                Ok(true) if matches!(p.action, Action::RejectTransition(_)) => Some(p.name.clone()),
                Ok(_) => None,
                Err(e) => Some(format!("{} (evaluation failed: {e})", p.name)),
            })
            .collect()
    }
}
