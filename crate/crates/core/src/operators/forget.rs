use std::collections::BTreeSet;

use super::{Note, OpEnv, Proposal};
use crate::policy::{Bindings, EventKind};
use crate::salience::{self, Eligibility};
use crate::state::{
    hide_order, Field, MarkKind, MemoryState, Provenance, Replaced, Tier, TopicId, UnitKey, ValueEntry,
};

/// Decays every field's salience by one step.
pub fn tick(state: &MemoryState, env: &OpEnv<'_>) -> Proposal {
    let mut p = Proposal::new(state.clone());
    let lambda = env.params.salience.decay;
    for t in p.state.topics.values_mut() {
        for f in t.fields.values_mut() {
            f.salience = salience::decay(f.salience, 1, lambda);
        }
    }
    p.events.push((EventKind::Tick, Bindings::default()));
    p
}

/// Replaces the prefix of `field`'s history that precedes the current entry
/// and the `keep_recent` most recent entries with one summary entry.
/// Returns false when there is nothing to compress.
pub fn compress_field(field: &mut Field, unit: &UnitKey, keep_recent: usize, tick: u64) -> bool {
    let n = field.history.len();
    let mut first_kept = n.saturating_sub(keep_recent);
    if let Some(cur) = field.current_index() {
        first_kept = first_kept.min(cur);
    }
    let run = &field.history[..first_kept];
    if run.is_empty() || (run.len() == 1 && run[0].replaced.is_some()) {
        return false;
    }

    let mut provenance: BTreeSet<Provenance> = BTreeSet::new();
    let mut count = 0;
    for e in run {
        provenance.extend(e.provenance().cloned());
        count += e.replaced.as_ref().map_or(1, |r| r.count);
    }
    let first_value = match &run[0].replaced {
        Some(r) => r.first_value.clone(),
        None => run[0].value.clone(),
    };
    let last = &run[run.len() - 1];
    let last_value = match &last.replaced {
        Some(r) => r.last_value.clone(),
        None => last.value.clone(),
    };
    let summary = ValueEntry {
        value: format!("{count} earlier values ({first_value} \u{2026} {last_value})"),
        at: last.at.clone(),
        prov: Provenance { source_id: "compression".into(), event_id: tick, excerpt: unit.to_string() },
        superseded: true,
        compressed: true,
        replaced: Some(Replaced { count, first_value, last_value, provenance: provenance.into_iter().collect() }),
    };
    field.history.splice(..first_kept, [summary]);
    true
}

/// Runs the attenuation ladder, then hides fields in hide order until the
/// active footprint is at most `beta - headroom`. Units in `protect` are
/// exempt from both steps.
pub fn forget(state: &MemoryState, env: &OpEnv<'_>, headroom: usize, protect: &BTreeSet<UnitKey>) -> Proposal {
    let tick = OpEnv::next_tick(state);
    let sp = &env.params.salience;
    let mut p = Proposal::new(state.clone());

    for mark in std::mem::take(&mut p.state.forget_marks) {
        if mark.kind == MarkKind::Archive {
            if let Some(t) = p.state.topics.get_mut(&TopicId(mark.target.clone())) {
                if !t.archived {
                    t.archived = true;
                    p.notes.push(Note::Archived { topic: t.id.clone() });
                }
            }
        }
    }

    for t in p.state.topics.values_mut().filter(|t| !t.archived) {
        // the topic being written to is never archived under the writer
        let mut all_archivable = !t.fields.is_empty() && !protect.iter().any(|u| u.topic == t.id);
        for f in t.fields.values_mut() {
            let unit = UnitKey { topic: t.id.clone(), field: f.name.clone() };
            if protect.contains(&unit) {
                all_archivable = false;
                continue;
            }
            let elig = salience::tier_of(f.salience, sp);
            if elig >= Eligibility::CompressEligible {
                compress_field(f, &unit, sp.keep_recent, tick);
                if f.tier == Tier::Active {
                    f.tier = Tier::Compressed;
                }
            }
            if elig >= Eligibility::HideEligible && f.tier != Tier::Hidden {
                f.tier = Tier::Hidden;
                p.notes.push(Note::Hidden { unit, by_cap: false });
            }
            if elig < Eligibility::ArchiveEligible {
                all_archivable = false;
            }
        }
        if all_archivable {
            t.archived = true;
            p.notes.push(Note::Archived { topic: t.id.clone() });
        }
    }

    let bound = env.params.beta.at(tick).saturating_sub(headroom);
    let mut footprint = p.state.active_footprint();
    if footprint > bound {
        for unit in hide_order(&p.state) {
            if footprint <= bound {
                break;
            }
            if protect.contains(&unit) {
                continue;
            }
            let f = p.state.topics.get_mut(&unit.topic).and_then(|t| t.fields.get_mut(&unit.field)).expect("unit");
            f.tier = Tier::Hidden;
            footprint -= 1;
            p.notes.push(Note::Hidden { unit, by_cap: true });
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Beta, EngineParams};
    use crate::embed::EmbeddingRouter;
    use crate::operators::rules::RuleTable;
    use crate::state::{Timestamp, Topic};

    fn prov(i: u64) -> Provenance {
        Provenance { source_id: format!("s{i}"), event_id: i, excerpt: format!("e{i}") }
    }

    fn field_with(n: u64, salience: f64) -> Field {
        let mut f = Field::new("F", None, ValueEntry::new("v0", Timestamp::at(0), prov(0)), salience);
        for i in 1..n {
            let c = f.current_index().unwrap();
            f.history[c].superseded = true;
            f.history.push(ValueEntry::new(format!("v{i}"), Timestamp::at(i), prov(i)));
        }
        f
    }

    fn state_with(fields: Vec<(&str, &str, Field)>) -> MemoryState {
        let mut s = MemoryState::default();
        for (topic, name, mut f) in fields {
            f.name = name.into();
            let id = TopicId::from(topic);
            s.topics.entry(id.clone()).or_insert_with(|| Topic::new(id, topic, "")).fields.insert(name.into(), f);
        }
        s
    }

    #[test]
    fn compression_keeps_recent_and_unions_provenance() {
        let mut f = field_with(13, 0.3);
        let before = f.provenance();
        let unit = UnitKey::new("T", "F");
        assert!(compress_field(&mut f, &unit, 3, 20));
        assert_eq!(f.history.len(), 4);
        let summary = &f.history[0];
        assert_eq!(summary.replaced.as_ref().unwrap().count, 10);
        assert_eq!(summary.replaced.as_ref().unwrap().provenance.len(), 10);
        assert_eq!(summary.value, "10 earlier values (v0 \u{2026} v9)");
        assert_eq!(f.current().unwrap().value, "v12");
        assert!(f.provenance().is_superset(&before));
        // idempotent
        assert!(!compress_field(&mut f, &unit, 3, 21));
        // a later run folds the previous summary in
        let c = f.current_index().unwrap();
        f.history[c].superseded = true;
        f.history.push(ValueEntry::new("v13", Timestamp::at(13), prov(13)));
        assert!(compress_field(&mut f, &unit, 3, 22));
        let r = f.history[0].replaced.as_ref().unwrap();
        assert_eq!((r.count, r.first_value.as_str(), r.last_value.as_str()), (11, "v0", "v10"));
        assert_eq!(f.live_entries(), 1);
    }

    #[test]
    fn ladder_thresholds() {
        let params = EngineParams::default();
        let rules = RuleTable::default();
        let env = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let s = state_with(vec![
            ("A", "hot", field_with(6, 0.9)),
            ("A", "warm", field_with(6, 0.4)),
            ("A", "cold", field_with(6, 0.1)),
            ("B", "gone", field_with(2, 0.01)),
        ]);
        let p = forget(&s, &env, 0, &BTreeSet::new());
        let a = &p.state.topics[&TopicId::from("A")];
        assert_eq!(a.fields["hot"].tier, Tier::Active);
        assert_eq!(a.fields["hot"].history.len(), 6);
        assert_eq!(a.fields["warm"].tier, Tier::Compressed);
        assert_eq!(a.fields["warm"].history.len(), 4);
        assert_eq!(a.fields["cold"].tier, Tier::Hidden);
        assert!(!a.archived);
        assert!(p.state.topics[&TopicId::from("B")].archived);
        p.state.check_invariants().unwrap();
    }

    #[test]
    fn all_salient_is_identity() {
        let params = EngineParams::default();
        let rules = RuleTable::default();
        let env = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let s = state_with(vec![("A", "x", field_with(8, 0.6)), ("B", "y", field_with(1, 3.0))]);
        assert_eq!(forget(&s, &env, 0, &BTreeSet::new()).state.digest(), s.digest());
    }

    #[test]
    fn twenty_ticks_hide_thirty_archive() {
        let params = EngineParams::default();
        let rules = RuleTable::default();
        let env = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let mut s = state_with(vec![("A", "x", field_with(1, 1.0))]);
        for _ in 0..20 {
            s = tick(&s, &env).state;
        }
        let sal = s.topics[&TopicId::from("A")].fields["x"].salience;
        assert!((sal - 0.9f64.powi(20)).abs() < 1e-12);
        let hidden = forget(&s, &env, 0, &BTreeSet::new()).state;
        assert_eq!(hidden.topics[&TopicId::from("A")].fields["x"].tier, Tier::Hidden);
        assert!(!hidden.topics[&TopicId::from("A")].archived);
        // 0.9^30 is about 0.042, under the archive threshold
        for _ in 0..10 {
            s = tick(&s, &env).state;
        }
        let archived = forget(&s, &env, 0, &BTreeSet::new()).state;
        assert!(archived.topics[&TopicId::from("A")].archived);
        assert_eq!(archived.topics[&TopicId::from("A")].fields["x"].history.len(), 1);
    }

    #[test]
    fn cap_hides_by_relevance_not_age() {
        let params = EngineParams { beta: Beta::Constant(2), ..Default::default() };
        let rules = RuleTable::default();
        let env = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let mut old_hot = field_with(1, 3.0);
        old_hot.last_access = 0;
        let mut new_cold = field_with(1, 0.6);
        new_cold.last_access = 9;
        let mut tie_a = field_with(1, 0.8);
        tie_a.last_access = 4;
        let mut tie_b = field_with(1, 0.8);
        tie_b.last_access = 4;
        let s = state_with(vec![("A", "old", old_hot), ("B", "new", new_cold), ("C", "b", tie_b), ("C", "a", tie_a)]);
        let p = forget(&s, &env, 0, &BTreeSet::new());
        let tier = |t: &str, f: &str| p.state.topics[&TopicId::from(t)].fields[f].tier;
        assert_eq!(tier("A", "old"), Tier::Active);
        assert_eq!(tier("B", "new"), Tier::Hidden);
        assert_eq!(tier("C", "a"), Tier::Hidden);
        assert_eq!(tier("C", "b"), Tier::Active);
        assert_eq!(p.state.active_footprint(), 2);

        let protect = BTreeSet::from([UnitKey::new("B", "new")]);
        let p = forget(&s, &env, 1, &protect);
        assert_eq!(p.state.active_footprint(), 1);
        assert_eq!(p.state.topics[&TopicId::from("B")].fields["new"].tier, Tier::Active);
    }
}
