//! Last-writer-wins shadow of what every unit should currently hold.
//!
//! Built from record inputs and semantic notes only. It never reads the
//! replayed state, so agreement with the engine is evidence rather than
//! tautology. Derived writes from dependency repair are recomputed here
//! from the rule table and the ledger's own values.

use std::collections::BTreeMap;

use crate::engine::{EngineEvent, TransitionRecord};
use crate::operators::rules::RuleTable;
use crate::operators::Note;
use crate::state::{Provenance, UnitKey};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub value: String,
    pub tick: u64,
    pub prov: Provenance,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    units: BTreeMap<UnitKey, LedgerEntry>,
}

impl Ledger {
    pub fn get(&self, unit: &UnitKey) -> Option<&LedgerEntry> {
        self.units.get(unit)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UnitKey, &LedgerEntry)> {
        self.units.iter()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Folds one committed record in. Returns the units whose entry
    /// changed, plus complaints about writes the ledger cannot explain.
    pub fn absorb(&mut self, record: &TransitionRecord, rules: &RuleTable) -> (Vec<UnitKey>, Vec<(UnitKey, String)>) {
        let tick = record.tick.tick;
        let mut changed = Vec::new();
        let mut complaints = Vec::new();

        if let EngineEvent::Ingest(bundle) = &record.input {
            let host = record.notes.iter().find_map(|n| match n {
                Note::Routed { host, .. } => Some(host.clone()),
                _ => None,
            });
            match host {
                Some(host) => {
                    for fact in &bundle.facts {
                        let unit = UnitKey { topic: host.clone(), field: fact.field.clone() };
                        if self.units.get(&unit).is_some_and(|e| e.value == fact.value) {
                            continue;
                        }
                        let prov = Provenance { source_id: fact.source.clone(), event_id: tick, excerpt: bundle.text.clone() };
                        self.units.insert(unit.clone(), LedgerEntry { value: fact.value.clone(), tick, prov });
                        changed.push(unit);
                    }
                }
                None => complaints.push((UnitKey::new("?", "?"), "ingest committed without naming a host".into())),
            }
        }

        for note in &record.notes {
            match note {
                Note::UnitMerged { from, into } => {
                    if let Some(src) = self.units.remove(from) {
                        let keep_into = self.units.get(into).is_some_and(|dst| dst.tick > src.tick);
                        if !keep_into {
                            self.units.insert(into.clone(), src);
                        }
                        changed.push(from.clone());
                        changed.push(into.clone());
                    }
                }
                Note::UnitMoved { from, into } => {
                    if let Some(src) = self.units.remove(from) {
                        self.units.insert(into.clone(), src);
                        changed.push(from.clone());
                        changed.push(into.clone());
                    }
                }
                Note::RevisionEvaluated { topic, cause, fired } => {
                    for field in fired {
                        let unit = UnitKey { topic: topic.clone(), field: field.clone() };
                        match self.derive(&unit, cause, rules, tick) {
                            Ok(entry) => {
                                self.units.insert(unit.clone(), entry);
                                changed.push(unit);
                            }
                            Err(why) => complaints.push((unit, why)),
                        }
                    }
                }
                _ => {}
            }
        }
        (changed, complaints)
    }

    fn derive(&self, unit: &UnitKey, cause: &UnitKey, rules: &RuleTable, tick: u64) -> Result<LedgerEntry, String> {
        let cause_entry = self.units.get(cause).ok_or_else(|| format!("repair caused by {cause}, which was never written"))?;
        let current = self.units.get(unit).ok_or_else(|| format!("repair rewrote {unit}, which was never written"))?;
        let rule = rules
            .matching(cause, &unit.topic)
            .find(|r| r.dependent_field == unit.field)
            .ok_or_else(|| format!("no rule links {cause} to {unit}"))?;
        Ok(LedgerEntry {
            value: rule.transform.apply(&current.value, cause, &cause_entry.value),
            tick,
            prov: Provenance {
                source_id: format!("revision:{cause}"),
                event_id: tick,
                excerpt: format!("{cause} = {} (event {})", cause_entry.value, cause_entry.prov.event_id),
            },
        })
    }
}
