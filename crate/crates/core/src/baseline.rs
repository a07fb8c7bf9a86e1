//! The CRUD comparison system: an append-only record store with FIFO
//! eviction and read-only similarity retrieval. It never deduplicates,
//! consolidates or reinforces anything.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::config::Settings;
use crate::embed::{self, cosine, Embedding};
use crate::engine::{Delta, EngineEvent, Journal, JournalEntry, JournalError, Outcome, System, TransitionRecord};
use crate::operators::{field_matches, Answer, Fact, FactBundle, Note, OpError, Query, QueryMode, RetrievalOutput};
use crate::state::{Digest, Provenance, Timestamp, TopicId, UnitKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub text: String,
    #[serde(skip)]
    pub embedding: Embedding,
    pub created_at: Timestamp,
    /// Structured facts carried alongside the raw text, used to score answers.
    pub facts: Vec<Fact>,
    /// Topic-like key derived from the text, so answers name comparable units.
    pub subject: TopicId,
}

impl Record {
    pub fn provenance(&self, fact: &Fact) -> Provenance {
        Provenance { source_id: fact.source.clone(), event_id: self.created_at.tick, excerpt: self.text.clone() }
    }

    pub fn units(&self) -> impl Iterator<Item = UnitKey> + '_ {
        self.facts.iter().map(|f| UnitKey { topic: self.subject.clone(), field: f.field.clone() })
    }

    fn answer(&self, fact: &Fact) -> Answer {
        Answer {
            unit: UnitKey { topic: self.subject.clone(), field: fact.field.clone() },
            value: fact.value.clone(),
            at: self.created_at.clone(),
            prov: self.provenance(fact),
            superseded: false,
        }
    }
}

/// Record subject: the slug of the title derived from the text.
pub fn subject_of(text: &str) -> TopicId {
    TopicId(embed::slug(&embed::derive_title(text)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrudStore {
    pub capacity: usize,
    pub records: VecDeque<Record>,
    pub next_id: u64,
    pub clock: Timestamp,
}

impl CrudStore {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, records: VecDeque::new(), next_id: 1, clock: Timestamp::default() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends unconditionally and evicts the oldest records beyond capacity.
    /// Returns the new id and the evicted ids.
    pub fn put(&mut self, text: &str, facts: Vec<Fact>, at: Timestamp) -> (u64, Vec<u64>) {
        let id = self.next_id;
        self.next_id += 1;
        self.records.push_back(Record {
            id,
            text: text.to_string(),
            embedding: embed::embed(text),
            created_at: at,
            facts,
            subject: subject_of(text),
        });
        let mut evicted = Vec::new();
        while self.records.len() > self.capacity {
            evicted.push(self.records.pop_front().expect("nonempty").id);
        }
        (id, evicted)
    }

    /// Top-`k` records by cosine; ties go to the smaller id.
    pub fn top_k(&self, text: &str, k: usize) -> Vec<&Record> {
        let q = embed::embed(text);
        let mut scored: Vec<(f64, &Record)> = self.records.iter().map(|r| (cosine(&q, &r.embedding), r)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        scored.into_iter().take(k).map(|(_, r)| r).collect()
    }

    /// Pure read.
    pub fn query(&self, q: &Query, k: usize) -> Result<RetrievalOutput, OpError> {
        q.validate(self.clock.tick)?;
        let mut out = RetrievalOutput::default();
        let mut accessed = BTreeSet::new();
        if let Some(unit) = &q.explicit {
            let hits: Vec<(&Record, &Fact)> = self
                .records
                .iter()
                .filter(|r| r.subject == unit.topic)
                .flat_map(|r| r.facts.iter().filter(|f| f.field == unit.field).map(move |f| (r, f)))
                .collect();
            if hits.is_empty() {
                return Err(OpError::UnknownUnit(unit.to_string()));
            }
            match q.mode {
                QueryMode::Historical { as_of } => {
                    for (r, f) in hits.into_iter().filter(|(r, _)| as_of.is_none_or(|t| r.created_at.tick <= t)) {
                        out.answers.push(r.answer(f));
                    }
                }
                _ => {
                    let (r, f) = hits[hits.len() - 1];
                    out.answers.push(r.answer(f));
                }
            }
        } else if let QueryMode::Structural { root, .. } = &q.mode {
            if !self.records.iter().any(|r| &r.subject == root) {
                return Err(OpError::UnknownUnit(root.to_string()));
            }
        } else {
            let qt: BTreeSet<String> = embed::tokens(&q.text).into_iter().collect();
            let as_of = match q.mode {
                QueryMode::Historical { as_of } => as_of,
                _ => None,
            };
            for r in self.top_k(&q.text, k) {
                if as_of.is_some_and(|t| r.created_at.tick > t) {
                    continue;
                }
                for f in &r.facts {
                    if field_matches(&qt, &f.field) {
                        out.answers.push(r.answer(f));
                    }
                }
                // every record read counts as accessed, matched or not
                for u in r.units() {
                    if accessed.insert(u.clone()) {
                        out.accessed_units.push(u);
                    }
                }
            }
        }
        for a in &out.answers {
            if accessed.insert(a.unit.clone()) {
                out.accessed_units.push(a.unit.clone());
            }
        }
        Ok(out)
    }

    /// Values currently held for `unit`, oldest first.
    pub fn lookup(&self, unit: &UnitKey) -> Vec<(&Record, &Fact)> {
        self.records
            .iter()
            .filter(|r| r.subject == unit.topic)
            .flat_map(|r| r.facts.iter().filter(|f| f.field == unit.field).map(move |f| (r, f)))
            .collect()
    }

    /// Number of distinct units held.
    pub fn footprint(&self) -> usize {
        self.records.iter().flat_map(|r| r.units()).collect::<BTreeSet<_>>().len()
    }

    pub fn provenance_by_unit(&self) -> std::collections::BTreeMap<UnitKey, BTreeSet<Provenance>> {
        let mut out: std::collections::BTreeMap<UnitKey, BTreeSet<Provenance>> = Default::default();
        for r in &self.records {
            for f in &r.facts {
                out.entry(UnitKey { topic: r.subject.clone(), field: f.field.clone() })
                    .or_default()
                    .insert(r.provenance(f));
            }
        }
        out
    }

    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        h.update(b"gem-crud\0");
        serde_json::to_writer(&mut h, self).expect("store serializes");
        Digest(h.finalize().into())
    }

    /// Recomputes embeddings after deserialization.
    pub fn refresh_embeddings(&mut self) {
        for r in self.records.iter_mut() {
            r.embedding = embed::embed(&r.text);
        }
    }

    pub fn note_for(&self, bundle: &FactBundle) -> Note {
        Note::Routed { host: subject_of(&bundle.text), created: true }
    }
}

/// Applies one baseline journal entry and checks its digest.
pub fn replay_step(store: &mut CrudStore, entry: &JournalEntry) -> Result<(), JournalError> {
    let tick = entry.record.tick.tick;
    if entry.record.outcome.is_committed() {
        for d in &entry.record.deltas {
            match d {
                Delta::RecordAppended { record } => {
                    let mut r = record.clone();
                    r.embedding = embed::embed(&r.text);
                    store.next_id = store.next_id.max(r.id + 1);
                    store.records.push_back(r);
                }
                Delta::RecordEvicted { id } => {
                    let pos = store.records.iter().position(|r| r.id == *id).ok_or_else(|| JournalError::Corrupt {
                        tick,
                        detail: format!("evicting unknown record {id}"),
                    })?;
                    store.records.remove(pos);
                }
                other => {
                    return Err(JournalError::Corrupt { tick, detail: format!("engine delta in a baseline journal: {other:?}") })
                }
            }
        }
        store.clock = Timestamp::at(tick);
    }
    if store.digest() != entry.digest_after {
        return Err(JournalError::Corrupt { tick, detail: "store digest differs from the recorded digest".into() });
    }
    Ok(())
}

/// Genesis store of a baseline journal.
pub fn genesis(journal: &Journal) -> Result<CrudStore, JournalError> {
    if journal.header.system != System::CrudBaseline {
        return Err(JournalError::Format("not a baseline journal".into()));
    }
    let store = CrudStore::new(journal.header.settings.params.baseline_capacity);
    if store.digest() != journal.header.genesis {
        return Err(JournalError::Corrupt { tick: 0, detail: "genesis digest mismatch".into() });
    }
    Ok(store)
}

pub fn replay(journal: &Journal) -> Result<CrudStore, JournalError> {
    let mut store = genesis(journal)?;
    for e in &journal.entries {
        replay_step(&mut store, e)?;
    }
    Ok(store)
}

/// The baseline behind the same event interface as the engine, journaled
/// so the auditor can score it. Every event is one committed record.
#[derive(Debug, Clone)]
pub struct CrudSystem {
    store: CrudStore,
    top_k: usize,
    journal: Journal,
}

impl CrudSystem {
    pub fn new(settings: Settings) -> Self {
        let store = CrudStore::new(settings.params.baseline_capacity);
        let top_k = settings.params.top_topics;
        let journal = Journal::new(System::CrudBaseline, settings, store.digest());
        Self { store, top_k, journal }
    }

    pub fn store(&self) -> &CrudStore {
        &self.store
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn into_journal(self) -> Journal {
        self.journal
    }

    pub fn probe(&self, q: &Query) -> Result<RetrievalOutput, OpError> {
        self.store.query(q, self.top_k)
    }

    pub fn submit(&mut self, event: EngineEvent) -> (Option<RetrievalOutput>, Outcome) {
        let tick = Timestamp::at(self.store.clock.tick + 1);
        let mut deltas = Vec::new();
        let mut notes = Vec::new();
        let mut output = None;
        let result = match &event {
            EngineEvent::Ingest(bundle) => bundle.validate().map(|_| {
                let (id, evicted) = self.store.put(&bundle.text, bundle.facts.clone(), tick.clone());
                let record = self.store.records.iter().find(|r| r.id == id).expect("just stored").clone();
                notes.push(self.store.note_for(bundle));
                deltas.push(Delta::RecordAppended { record });
                deltas.extend(evicted.into_iter().map(|id| Delta::RecordEvicted { id }));
            }),
            EngineEvent::Retrieve(q) => self.store.query(q, self.top_k).map(|o| output = Some(o)),
            // nothing to revise or decay here; the clock still advances
            EngineEvent::Revise(_) | EngineEvent::Forget { .. } | EngineEvent::Tick => Ok(()),
        };
        let outcome = match result {
            Ok(()) => {
                self.store.clock = tick.clone();
                Outcome::Committed
            }
            Err(e) => Outcome::Aborted { reason: e.to_string() },
        };
        let record = TransitionRecord {
            tick,
            operator: event.operator(),
            input: event,
            deltas,
            notes,
            output: output.clone(),
            policy_log: Vec::new(),
            outcome: outcome.clone(),
        };
        self.journal.push(record, self.store.digest());
        (output, outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> CrudStore {
        let mut s = CrudStore::new(5);
        s.put("Website Redesign | Deadline: March 15", vec![Fact::new("Deadline", "March 15")], Timestamp::at(1));
        s.put("Website Redesign | Deadline UPDATED: April 20", vec![Fact::new("Deadline", "April 20")], Timestamp::at(2));
        s
    }

    #[test]
    fn duplicates_are_stored_twice() {
        let mut s = CrudStore::new(5);
        s.put("x", vec![], Timestamp::at(1));
        s.put("x", vec![], Timestamp::at(2));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn fifo_eviction_ignores_access() {
        let mut s = CrudStore::new(2);
        s.put("a", vec![Fact::new("f", "1")], Timestamp::at(1));
        s.put("b", vec![], Timestamp::at(2));
        for _ in 0..5 {
            s.query(&Query::text("a f"), 3).unwrap();
        }
        let (_, evicted) = s.put("c", vec![], Timestamp::at(3));
        assert_eq!(evicted, vec![1]);
        assert_eq!(s.records.iter().map(|r| r.id).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn query_returns_stale_and_fresh_without_writing() {
        let s = store();
        let before = s.digest();
        let out = s.query(&Query::text("What is the deadline for the Website Redesign?"), 2).unwrap();
        let values: BTreeSet<&str> = out.answers.iter().map(|a| a.value.as_str()).collect();
        assert_eq!(values, BTreeSet::from(["March 15", "April 20"]));
        assert_eq!(s.digest(), before);
        assert!(CrudStore::new(3).query(&Query::text("anything"), 3).unwrap().answers.is_empty());
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let mut s = CrudStore::new(5);
        s.put("same words", vec![], Timestamp::at(1));
        s.put("same words", vec![], Timestamp::at(2));
        assert_eq!(s.top_k("same words", 1)[0].id, 1);
    }
}
