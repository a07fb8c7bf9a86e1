//! Trajectory auditor. Replays a journal snapshot by snapshot and checks
//! the six correctness conditions, for the engine and for the baseline.
//!
//! C1 stale answers, C2 policy and superseded-as-current breaches, C3
//! dependents read before re-evaluation, C4 lost provenance, C5 bound and
//! recoverability, C6 reads that earn no reinforcement.

mod ledger;
mod subject;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ledger::{Ledger, LedgerEntry};
pub use subject::Subject;

use crate::engine::{journal, Delta, EngineEvent, Journal, JournalError, Operator, ReviseSpec, System};
use crate::operators::{EvidenceItem, Note, Query, QueryMode, RetrievalOutput};
use crate::par::{self, Parallelism};
use crate::state::{Provenance, TopicId, UnitKey};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub tick: u64,
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub c1: Vec<Violation>,
    pub c2: Vec<Violation>,
    pub c3: Vec<Violation>,
    pub c4: Vec<Violation>,
    pub c5: Vec<Violation>,
    pub c6: Vec<Violation>,
    /// Revision walks that reached a topic other than through an extension
    /// edge. Informational; not one of the six conditions.
    #[serde(skip)]
    pub association_traversals: Vec<Violation>,
}

impl ViolationReport {
    pub fn lists(&self) -> [&Vec<Violation>; 6] {
        [&self.c1, &self.c2, &self.c3, &self.c4, &self.c5, &self.c6]
    }

    pub fn totals(&self) -> [usize; 6] {
        self.lists().map(Vec::len)
    }

    pub fn total(&self) -> usize {
        self.totals().iter().sum()
    }

    pub fn pass(&self) -> bool {
        self.total() == 0
    }

    fn push(&mut self, condition: usize, tick: u64, subject: impl ToString, detail: impl Into<String>) {
        let v = Violation { tick, subject: subject.to_string(), detail: detail.into() };
        match condition {
            1 => self.c1.push(v),
            2 => self.c2.push(v),
            3 => self.c3.push(v),
            4 => self.c4.push(v),
            5 => self.c5.push(v),
            6 => self.c6.push(v),
            _ => unreachable!("conditions are numbered 1 to 6"),
        }
    }

    fn sort(&mut self) {
        for l in [&mut self.c1, &mut self.c2, &mut self.c3, &mut self.c4, &mut self.c5, &mut self.c6] {
            l.sort();
        }
        self.association_traversals.sort();
    }

    /// Stable text form, ordered by condition then tick.
    pub fn render(&self) -> String {
        if self.pass() {
            return "PASS C1\u{2013}C6: 0 violations\n".into();
        }
        let t = self.totals();
        let mut out = format!(
            "FAIL C1\u{2013}C6: {} violations (C1 {}, C2 {}, C3 {}, C4 {}, C5 {}, C6 {})\n",
            self.total(),
            t[0],
            t[1],
            t[2],
            t[3],
            t[4],
            t[5]
        );
        for (i, list) in self.lists().iter().enumerate() {
            for v in list.iter() {
                out.push_str(&format!("C{} tick {} {}: {}\n", i + 1, v.tick, v.subject, v.detail));
            }
        }
        out
    }

    /// Canonical JSON with keys c1..c6.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn render_report(r: &ViolationReport) -> String {
    r.render()
}

/// Checks answers a default-mode read returned against the ledger (C1) and
/// for superseded or contradictory values presented as current (C2).
fn check_answers(
    report: &mut ViolationReport,
    tick: u64,
    q: &Query,
    out: &RetrievalOutput,
    subject: &Subject,
    ledger: &Ledger,
) {
    if q.mode != QueryMode::Default {
        return;
    }
    let mut values: BTreeMap<&UnitKey, BTreeSet<&str>> = BTreeMap::new();
    let mut stale: BTreeSet<&UnitKey> = BTreeSet::new();
    for a in &out.answers {
        values.entry(&a.unit).or_default().insert(&a.value);
        if a.superseded {
            report.push(2, tick, &a.unit, format!("superseded value `{}` returned as current", a.value));
        }
        if subject.attenuated(&a.unit) || stale.contains(&a.unit) {
            continue;
        }
        match ledger.get(&a.unit) {
            None => {
                stale.insert(&a.unit);
                report.push(1, tick, &a.unit, format!("answered `{}` for a unit no input ever wrote", a.value));
            }
            Some(e) if e.value != a.value => {
                stale.insert(&a.unit);
                report.push(
                    1,
                    tick,
                    &a.unit,
                    format!("answered `{}` but the most recent value is `{}` (tick {})", a.value, e.value, e.tick),
                );
            }
            Some(_) => {}
        }
    }
    for (unit, vs) in values {
        if vs.len() > 1 {
            let listed: Vec<&str> = vs.into_iter().collect();
            report.push(2, tick, unit, format!("{} values returned as current: {}", listed.len(), listed.join(", ")));
        }
    }
}

/// Units whose content (rather than bookkeeping) a delta changes.
fn content_units(deltas: &[Delta]) -> BTreeSet<UnitKey> {
    let mut out = BTreeSet::new();
    for d in deltas {
        match d {
            Delta::TopicCreated { topic } => {
                out.extend(topic.fields.keys().map(|f| UnitKey { topic: topic.id.clone(), field: f.clone() }));
            }
            Delta::FieldCreated { unit, .. }
            | Delta::FieldRemoved { unit }
            | Delta::EntryAppended { unit, .. }
            | Delta::EntryFlagged { unit, .. }
            | Delta::HistoryRewritten { unit, .. } => {
                out.insert(unit.clone());
            }
            _ => {}
        }
    }
    out
}

/// Where a unit's content went: itself if it survives, plus every merge or
/// move destination, followed transitively.
fn destinations(unit: &UnitKey, moves: &BTreeMap<UnitKey, Vec<UnitKey>>) -> BTreeSet<UnitKey> {
    let mut seen = BTreeSet::from([unit.clone()]);
    let mut stack = vec![unit.clone()];
    while let Some(u) = stack.pop() {
        for d in moves.get(&u).into_iter().flatten() {
            if seen.insert(d.clone()) {
                stack.push(d.clone());
            }
        }
    }
    seen
}

fn corrupt(detail: String) -> JournalError {
    JournalError::Corrupt { tick: 0, detail }
}

/// Audits a journal. `probes` are run in default mode against the snapshot
/// after every committed record.
pub fn audit(journal: &Journal, probes: &[Query]) -> Result<ViolationReport, JournalError> {
    let header = &journal.header;
    let settings = &header.settings;
    let rules = settings.rules().map_err(|e| corrupt(format!("rules in header: {e}")))?;
    let mut subject = match header.system {
        System::Gem => Subject::Gem(journal::gem_genesis(header)?),
        System::CrudBaseline => Subject::Crud(crate::baseline::genesis(journal)?),
    };
    let mut ledger = Ledger::default();
    // dependents owed an evaluation: topic -> (cause, tick of the update)
    let mut pending: BTreeMap<TopicId, (UnitKey, u64)> = BTreeMap::new();
    let mut unrecoverable: BTreeSet<UnitKey> = BTreeSet::new();
    let mut report = ViolationReport::default();

    for entry in &journal.entries {
        let rec = &entry.record;
        if !rec.outcome.is_committed() {
            subject.step(entry)?;
            continue;
        }
        let tick = rec.tick.tick;

        // What the record read was read from the pre-state.
        let mut accessed: BTreeSet<UnitKey> = BTreeSet::new();
        if let (EngineEvent::Retrieve(q), Some(out)) = (&rec.input, &rec.output) {
            check_answers(&mut report, tick, q, out, &subject, &ledger);
            accessed = out.accessed_units.iter().cloned().collect();
            let touched: BTreeSet<TopicId> =
                accessed.iter().map(|u| u.topic.clone()).chain(out.context.iter().map(|c| c.topic.clone())).collect();
            for t in touched {
                if let Some((cause, at)) = pending.remove(&t) {
                    report.push(3, tick, &t, format!("read before re-evaluation after {cause} changed at tick {at}"));
                }
            }
        }

        let changed_units = content_units(&rec.deltas);
        let pre_current: BTreeMap<UnitKey, Option<(String, u64)>> =
            changed_units.iter().map(|u| (u.clone(), subject.current(u))).collect();

        let evicts = rec.deltas.iter().any(|d| matches!(d, Delta::RecordEvicted { .. }));
        let check_c4 = matches!(rec.operator, Operator::Forget | Operator::Revise) || evicts;
        let pre_prov: BTreeMap<UnitKey, BTreeSet<Provenance>> = if !check_c4 {
            BTreeMap::new()
        } else if matches!(subject, Subject::Crud(_)) {
            subject.all_provenance()
        } else {
            let topics: BTreeSet<&TopicId> = rec.deltas.iter().filter_map(Delta::topic).collect();
            topics
                .into_iter()
                .flat_map(|t| subject.units_of(t))
                .filter_map(|u| subject.provenance(&u).map(|p| (u, p)))
                .collect()
        };

        let pre_reinforce: Vec<(UnitKey, Option<f64>, Option<usize>)> =
            accessed.iter().map(|u| (u.clone(), subject.salience(u), subject.hide_rank(u, &accessed))).collect();

        let evaluated: Vec<&TopicId> = rec
            .notes
            .iter()
            .filter_map(|n| match n {
                Note::RevisionEvaluated { topic, .. } => Some(topic),
                _ => None,
            })
            .collect();
        let pre_successors: BTreeMap<&TopicId, Vec<TopicId>> =
            evaluated.iter().map(|t| (*t, subject.extension_successors(t))).collect();
        let roots: BTreeSet<TopicId> = match &rec.input {
            EngineEvent::Revise(ReviseSpec::Explicit(items)) => items
                .iter()
                .filter_map(|i| match i {
                    EvidenceItem::DependencyFlag { topic, .. } => Some(topic.clone()),
                    _ => None,
                })
                .collect(),
            EngineEvent::Revise(ReviseSpec::Auto) => match &subject {
                Subject::Gem(s) => s.revision_queue.iter().map(|f| f.topic.clone()).collect(),
                Subject::Crud(_) => BTreeSet::new(),
            },
            _ => BTreeSet::new(),
        };

        subject.step(entry)?;

        let (ledger_changed, complaints) = ledger.absorb(rec, &rules);
        for (unit, why) in complaints {
            report.push(1, tick, unit, why);
        }

        // C2: every postcondition holds on the committed snapshot.
        let beta = settings.params.beta.at(tick);
        for name in subject.rejecting_policies(beta) {
            report.push(2, tick, format!("policy {name}"), "pre_commit policy rejects the committed state");
        }

        // C3: a changed unit owes its extension successors an evaluation.
        // A unit that left (moved or folded elsewhere) changed nothing itself.
        for u in &changed_units {
            let now = subject.current(u);
            if now.is_some() && pre_current.get(u).cloned().flatten() != now {
                for succ in subject.extension_successors(&u.topic) {
                    pending.entry(succ).or_insert_with(|| (u.clone(), tick));
                }
            }
        }
        for t in &evaluated {
            pending.remove(*t);
        }

        // Revision walks follow extension edges only.
        let mut seen: Vec<&TopicId> = Vec::new();
        for t in &evaluated {
            let reached = roots.contains(*t)
                || seen.iter().any(|e| {
                    pre_successors.get(e).is_some_and(|s| s.contains(t)) || subject.extension_successors(e).contains(t)
                });
            if !reached {
                report.association_traversals.push(Violation {
                    tick,
                    subject: t.to_string(),
                    detail: "evaluated without an extension path from the repaired topic".into(),
                });
            }
            seen.push(t);
        }

        // C4: provenance reachable from surviving units never shrinks.
        if check_c4 {
            let mut moves: BTreeMap<UnitKey, Vec<UnitKey>> = BTreeMap::new();
            for n in &rec.notes {
                if let Note::UnitMerged { from, into } | Note::UnitMoved { from, into } = n {
                    moves.entry(from.clone()).or_default().push(into.clone());
                }
            }
            for (unit, before) in &pre_prov {
                let mut after: BTreeSet<Provenance> = BTreeSet::new();
                let mut survives = false;
                for d in destinations(unit, &moves) {
                    if let Some(p) = subject.provenance(&d) {
                        survives = true;
                        after.extend(p);
                    }
                }
                let lost = before.difference(&after).count();
                if survives && lost > 0 {
                    report.push(4, tick, unit, format!("{lost} provenance record(s) no longer reachable"));
                }
            }
        }

        // C5: the bound holds and everything written stays recoverable.
        let footprint = subject.footprint();
        if footprint > beta {
            report.push(5, tick, "active state", format!("footprint {footprint} exceeds bound {beta}"));
        }
        let sweep: Vec<UnitKey> = if evicts || matches!(subject, Subject::Crud(_)) {
            ledger.iter().map(|(u, _)| u.clone()).collect()
        } else {
            let topics: BTreeSet<&TopicId> = rec.deltas.iter().filter_map(Delta::topic).collect();
            ledger
                .iter()
                .filter(|(u, _)| topics.contains(&u.topic))
                .map(|(u, _)| u.clone())
                .chain(ledger_changed.into_iter().filter(|u| ledger.get(u).is_some()))
                .collect()
        };
        for unit in sweep {
            if unrecoverable.contains(&unit) {
                continue;
            }
            let want = ledger.get(&unit).expect("swept units are in the ledger");
            let found = subject.lookup(&unit).iter().any(|(v, provs)| *v == want.value || provs.contains(&want.prov));
            if !found {
                report.push(
                    5,
                    tick,
                    &unit,
                    format!("value `{}` written at tick {} is no longer recoverable", want.value, want.tick),
                );
                unrecoverable.insert(unit);
            }
        }

        // C6: a read strictly reduces each accessed unit's eligibility.
        if !pre_reinforce.is_empty() {
            let mut complaint = None;
            for (unit, before, rank_before) in &pre_reinforce {
                let (Some(before), Some(after)) = (before, subject.salience(unit)) else {
                    complaint = Some((unit.clone(), "no salience is kept, so the read earns nothing".to_string()));
                    break;
                };
                if after <= *before {
                    complaint = Some((unit.clone(), format!("salience {before} -> {after} did not increase")));
                    break;
                }
                if let (Some(rb), Some(ra)) = (rank_before, subject.hide_rank(unit, &accessed)) {
                    if ra < *rb {
                        complaint = Some((unit.clone(), format!("hide rank fell from {rb} to {ra}")));
                        break;
                    }
                }
            }
            if let Some((unit, why)) = complaint {
                report.push(6, tick, unit, why);
            }
        }

        for q in probes {
            if q.mode != QueryMode::Default {
                continue;
            }
            if let Ok(out) = subject.read(q, settings, &rules) {
                check_answers(&mut report, tick, q, &out, &subject, &ledger);
            }
        }
    }
    report.sort();
    Ok(report)
}

/// Audits many journals, in parallel when enabled.
pub fn audit_batch(mode: Parallelism, jobs: &[(Journal, Vec<Query>)]) -> Vec<Result<ViolationReport, JournalError>> {
    par::map_batch(mode, jobs, |(j, probes)| audit(j, probes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_renders_pass() {
        let r = ViolationReport::default();
        assert!(r.pass());
        assert_eq!(r.render(), "PASS C1\u{2013}C6: 0 violations\n");
        assert_eq!(r.to_json(), r#"{"c1":[],"c2":[],"c3":[],"c4":[],"c5":[],"c6":[]}"#);
    }

    #[test]
    fn one_c3_line_names_cause_dependent_and_tick() {
        let mut r = ViolationReport::default();
        r.push(3, 12, "Milestones", "read before re-evaluation after Website-Redesign.Deadline changed at tick 10");
        assert!(!r.pass());
        let text = r.render();
        assert!(text.contains("C3 tick 12 Milestones: read before re-evaluation after Website-Redesign.Deadline"));
        assert_eq!(text, r.clone().render());
    }

    #[test]
    fn render_orders_by_condition_tick_subject() {
        let mut r = ViolationReport::default();
        r.push(5, 9, "b", "x");
        r.push(1, 9, "z", "x");
        r.push(5, 3, "c", "x");
        r.push(5, 9, "a", "x");
        r.sort();
        let text = r.render();
        let lines: Vec<&str> = text.lines().skip(1).map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(lines, ["C1 tick 9 z", "C5 tick 3 c", "C5 tick 9 a", "C5 tick 9 b"]);
    }
}
