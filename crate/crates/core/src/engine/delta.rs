//! Primitive state changes. A committed record's deltas, applied in order
//! to the prior snapshot, reproduce the next snapshot exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::state::{Edge, Field, ForgetMark, MemoryState, RevisionFlag, Tier, Topic, TopicId, UnitKey, ValueEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    TopicCreated { topic: Topic },
    TopicArchived { topic: TopicId, archived: bool, merged_into: Option<TopicId> },
    TopicRelabeled { topic: TopicId, title: String, summary: String, entity: Option<String> },
    FieldCreated { unit: UnitKey, field: Field },
    FieldRemoved { unit: UnitKey },
    EntryAppended { unit: UnitKey, entry: ValueEntry },
    EntryFlagged { unit: UnitKey, index: usize, superseded: bool, compressed: bool },
    HistoryRewritten { unit: UnitKey, history: Vec<ValueEntry> },
    SalienceChanged { unit: UnitKey, from: f64, to: f64 },
    TierChanged { unit: UnitKey, from: Tier, to: Tier },
    LastAccessChanged { unit: UnitKey, to: u64 },
    EntityTagChanged { unit: UnitKey, to: Option<String> },
    EdgeAdded { edge: Edge },
    EdgeRemoved { edge: Edge },
    Flagged { flag: RevisionFlag },
    Unflagged { flag: RevisionFlag },
    MarkAdded { mark: ForgetMark },
    MarkCleared { mark: ForgetMark },
    /// Every field's salience multiplied by `factor`.
    Decayed { factor: f64 },
    /// Baseline store: a record was stored.
    RecordAppended { record: crate::baseline::Record },
    /// Baseline store: a record was evicted.
    RecordEvicted { id: u64 },
}

impl Delta {
    /// Topic whose derived data (embedding) may need a refresh.
    pub fn topic(&self) -> Option<&TopicId> {
        match self {
            Delta::TopicCreated { topic } => Some(&topic.id),
            Delta::TopicArchived { topic, .. } | Delta::TopicRelabeled { topic, .. } => Some(topic),
            Delta::FieldCreated { unit, .. }
            | Delta::FieldRemoved { unit }
            | Delta::EntryAppended { unit, .. }
            | Delta::EntryFlagged { unit, .. }
            | Delta::HistoryRewritten { unit, .. }
            | Delta::SalienceChanged { unit, .. }
            | Delta::TierChanged { unit, .. }
            | Delta::LastAccessChanged { unit, .. }
            | Delta::EntityTagChanged { unit, .. } => Some(&unit.topic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("cannot apply delta: {0}")]
pub struct ApplyError(pub String);

fn history_extends(old: &[ValueEntry], new: &[ValueEntry]) -> bool {
    new.len() >= old.len() && old.iter().zip(new).all(|(a, b)| a.same_content(b))
}

fn diff_field(unit: &UnitKey, old: &Field, new: &Field, out: &mut Vec<Delta>) {
    if old.history != new.history {
        if history_extends(&old.history, &new.history) {
            for (i, (a, b)) in old.history.iter().zip(&new.history).enumerate() {
                if a.superseded != b.superseded || a.compressed != b.compressed {
                    out.push(Delta::EntryFlagged {
                        unit: unit.clone(),
                        index: i,
                        superseded: b.superseded,
                        compressed: b.compressed,
                    });
                }
            }
            for e in &new.history[old.history.len()..] {
                out.push(Delta::EntryAppended { unit: unit.clone(), entry: e.clone() });
            }
        } else {
            out.push(Delta::HistoryRewritten { unit: unit.clone(), history: new.history.clone() });
        }
    }
    if old.salience.to_bits() != new.salience.to_bits() {
        out.push(Delta::SalienceChanged { unit: unit.clone(), from: old.salience, to: new.salience });
    }
    if old.tier != new.tier {
        out.push(Delta::TierChanged { unit: unit.clone(), from: old.tier, to: new.tier });
    }
    if old.last_access != new.last_access {
        out.push(Delta::LastAccessChanged { unit: unit.clone(), to: new.last_access });
    }
    if old.entity_tag != new.entity_tag {
        out.push(Delta::EntityTagChanged { unit: unit.clone(), to: new.entity_tag.clone() });
    }
}

fn set_diff<T: Ord + Clone>(old: &BTreeSet<T>, new: &BTreeSet<T>, removed: fn(T) -> Delta, added: fn(T) -> Delta, out: &mut Vec<Delta>) {
    out.extend(old.difference(new).cloned().map(removed));
    out.extend(new.difference(old).cloned().map(added));
}

/// Deltas taking `old` to `new`. Clock and policies are not diffed: the
/// clock comes from the record's tick and policies are fixed at genesis.
pub fn diff(old: &MemoryState, new: &MemoryState) -> Vec<Delta> {
    let mut out = Vec::new();
    for (id, nt) in &new.topics {
        let Some(ot) = old.topics.get(id) else {
            out.push(Delta::TopicCreated { topic: nt.clone() });
            continue;
        };
        if ot.title != nt.title || ot.summary != nt.summary || ot.entity != nt.entity {
            out.push(Delta::TopicRelabeled {
                topic: id.clone(),
                title: nt.title.clone(),
                summary: nt.summary.clone(),
                entity: nt.entity.clone(),
            });
        }
        for name in ot.fields.keys().filter(|n| !nt.fields.contains_key(*n)) {
            out.push(Delta::FieldRemoved { unit: UnitKey { topic: id.clone(), field: name.clone() } });
        }
        for (name, nf) in &nt.fields {
            let unit = UnitKey { topic: id.clone(), field: name.clone() };
            match ot.fields.get(name) {
                Some(of) => diff_field(&unit, of, nf, &mut out),
                None => out.push(Delta::FieldCreated { unit, field: nf.clone() }),
            }
        }
        if ot.archived != nt.archived || ot.merged_into != nt.merged_into {
            out.push(Delta::TopicArchived { topic: id.clone(), archived: nt.archived, merged_into: nt.merged_into.clone() });
        }
    }
    debug_assert!(old.topics.keys().all(|k| new.topics.contains_key(k)), "topics are never deleted");
    set_diff(&old.edges, &new.edges, |edge| Delta::EdgeRemoved { edge }, |edge| Delta::EdgeAdded { edge }, &mut out);
    set_diff(
        &old.revision_queue,
        &new.revision_queue,
        |flag| Delta::Unflagged { flag },
        |flag| Delta::Flagged { flag },
        &mut out,
    );
    set_diff(
        &old.forget_marks,
        &new.forget_marks,
        |mark| Delta::MarkCleared { mark },
        |mark| Delta::MarkAdded { mark },
        &mut out,
    );
    out
}

/// Multiplies every salience by `factor`, exactly as the tick operator does.
pub fn decay_all(state: &mut MemoryState, factor: f64) {
    for t in state.topics.values_mut() {
        for f in t.fields.values_mut() {
            f.salience = crate::salience::decay(f.salience, 1, factor);
        }
    }
}

fn field_mut<'a>(state: &'a mut MemoryState, unit: &UnitKey) -> Result<&'a mut Field, ApplyError> {
    state
        .topics
        .get_mut(&unit.topic)
        .and_then(|t| t.fields.get_mut(&unit.field))
        .ok_or_else(|| ApplyError(format!("no unit {unit}")))
}

/// Applies one delta. Embeddings are not refreshed here; callers refresh the
/// topics named by [`Delta::topic`] once the whole record is applied.
pub fn apply(state: &mut MemoryState, delta: &Delta) -> Result<(), ApplyError> {
    match delta {
        Delta::TopicCreated { topic } => {
            if state.topics.insert(topic.id.clone(), topic.clone()).is_some() {
                return Err(ApplyError(format!("topic {} already exists", topic.id)));
            }
        }
        Delta::TopicArchived { topic, archived, merged_into } => {
            let t = state.topics.get_mut(topic).ok_or_else(|| ApplyError(format!("no topic {topic}")))?;
            t.archived = *archived;
            t.merged_into = merged_into.clone();
        }
        Delta::TopicRelabeled { topic, title, summary, entity } => {
            let t = state.topics.get_mut(topic).ok_or_else(|| ApplyError(format!("no topic {topic}")))?;
            t.title = title.clone();
            t.summary = summary.clone();
            t.entity = entity.clone();
        }
        Delta::FieldCreated { unit, field } => {
            let t = state.topics.get_mut(&unit.topic).ok_or_else(|| ApplyError(format!("no topic {}", unit.topic)))?;
            if t.fields.insert(unit.field.clone(), field.clone()).is_some() {
                return Err(ApplyError(format!("unit {unit} already exists")));
            }
        }
        Delta::FieldRemoved { unit } => {
            let t = state.topics.get_mut(&unit.topic).ok_or_else(|| ApplyError(format!("no topic {}", unit.topic)))?;
            t.fields.remove(&unit.field).ok_or_else(|| ApplyError(format!("no unit {unit}")))?;
        }
        Delta::EntryAppended { unit, entry } => field_mut(state, unit)?.history.push(entry.clone()),
        Delta::EntryFlagged { unit, index, superseded, compressed } => {
            let f = field_mut(state, unit)?;
            let e = f.history.get_mut(*index).ok_or_else(|| ApplyError(format!("{unit} has no entry {index}")))?;
            e.superseded = *superseded;
            e.compressed = *compressed;
        }
        Delta::HistoryRewritten { unit, history } => field_mut(state, unit)?.history = history.clone(),
        Delta::SalienceChanged { unit, to, .. } => field_mut(state, unit)?.salience = *to,
        Delta::TierChanged { unit, to, .. } => field_mut(state, unit)?.tier = *to,
        Delta::LastAccessChanged { unit, to } => field_mut(state, unit)?.last_access = *to,
        Delta::EntityTagChanged { unit, to } => field_mut(state, unit)?.entity_tag = to.clone(),
        Delta::EdgeAdded { edge } => {
            state.edges.insert(edge.clone());
        }
        Delta::EdgeRemoved { edge } => {
            state.edges.remove(edge);
        }
        Delta::Flagged { flag } => {
            state.revision_queue.insert(flag.clone());
        }
        Delta::Unflagged { flag } => {
            state.revision_queue.remove(flag);
        }
        Delta::MarkAdded { mark } => {
            state.forget_marks.insert(mark.clone());
        }
        Delta::MarkCleared { mark } => {
            state.forget_marks.remove(mark);
        }
        Delta::Decayed { factor } => decay_all(state, *factor),
        Delta::RecordAppended { .. } | Delta::RecordEvicted { .. } => {
            return Err(ApplyError("baseline delta in an engine journal".into()))
        }
    }
    Ok(())
}

/// Applies `deltas` and refreshes embeddings of every topic they touch.
pub fn apply_all(state: &mut MemoryState, deltas: &[Delta]) -> Result<(), ApplyError> {
    let mut touched = BTreeSet::new();
    for d in deltas {
        apply(state, d)?;
        if let Some(t) = d.topic() {
            touched.insert(t.clone());
        }
    }
    for id in touched {
        if let Some(t) = state.topics.get_mut(&id) {
            t.refresh_embedding();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{EdgeKind, MarkKind, Provenance, Timestamp};

    fn entry(v: &str, t: u64) -> ValueEntry {
        ValueEntry::new(v, Timestamp::at(t), Provenance { source_id: "s".into(), event_id: t, excerpt: v.into() })
    }

    fn base() -> MemoryState {
        let mut s = MemoryState::default();
        let mut t = Topic::new("A".into(), "A", "a");
        t.fields.insert("f".into(), Field::new("f", None, entry("1", 1), 1.0));
        s.topics.insert("A".into(), t);
        s.topics.insert("B".into(), Topic::new("B".into(), "B", "b"));
        s
    }

    #[test]
    fn diff_then_apply_reproduces_digest() {
        let old = base();
        let mut new = old.clone();
        {
            let f = new.topics.get_mut(&TopicId::from("A")).unwrap().fields.get_mut("f").unwrap();
            f.history[0].superseded = true;
            f.history.push(entry("2", 2));
            f.salience = 1.7;
            f.tier = Tier::Compressed;
        }
        new.topics.get_mut(&TopicId::from("B")).unwrap().archived = true;
        new.topics.insert("C".into(), Topic::new("C".into(), "C", "c"));
        new.add_edge("A".into(), "C".into(), EdgeKind::Extension, Timestamp::at(2));
        new.revision_queue.insert(RevisionFlag { topic: "C".into(), cause: UnitKey::new("A", "f") });
        new.forget_marks.insert(ForgetMark { kind: MarkKind::Attenuate, target: "all".into() });

        let deltas = diff(&old, &new);
        let mut replayed = old.clone();
        apply_all(&mut replayed, &deltas).unwrap();
        assert_eq!(replayed.digest(), new.digest());
        assert!(deltas.iter().any(|d| matches!(d, Delta::EntryAppended { .. })));
        assert!(!deltas.iter().any(|d| matches!(d, Delta::HistoryRewritten { .. })));

        // a compression is a rewrite
        let mut squashed = new.clone();
        squashed.topics.get_mut(&TopicId::from("A")).unwrap().fields.get_mut("f").unwrap().history.remove(0);
        let deltas = diff(&new, &squashed);
        assert!(matches!(deltas[..], [Delta::HistoryRewritten { .. }]));
    }

    #[test]
    fn identical_states_have_no_deltas() {
        assert!(diff(&base(), &base()).is_empty());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let d = Delta::SalienceChanged { unit: UnitKey::new("A", "f"), from: 0.1 + 0.2, to: 0.9f64.powi(17) };
        let back: Delta = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
