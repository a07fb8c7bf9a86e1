use super::{FactBundle, Note, OpEnv, OpError, Proposal};
use crate::embed::{self, Route};
use crate::policy::{Bindings, EventKind};
use crate::state::{EdgeKind, Field, MemoryState, Provenance, Tier, Timestamp, Topic, UnitKey, ValueEntry};

const SUMMARY_LIMIT: usize = 200;

/// Integrates a fact bundle into its host topic.
///
/// Existing fields get a new current entry and keep the old one as
/// superseded history; an identical restatement of the current value
/// appends nothing and bumps salience instead. Any field touched by the
/// bundle returns to the `Active` tier.
pub fn ingest(state: &MemoryState, bundle: &FactBundle, env: &OpEnv<'_>) -> Result<Proposal, OpError> {
    bundle.validate()?;
    let tick = OpEnv::next_tick(state);
    let at = Timestamp::at(tick);
    let params = env.params;
    let route = env.router.select_host(state, bundle, params.topic_threshold)?;

    for t in bundle.extends.iter().chain(&bundle.associates) {
        if !state.topics.contains_key(t) {
            return Err(OpError::UnknownUnit(format!("linked topic `{t}`")));
        }
    }

    let mut p = Proposal::new(state.clone());
    let host = match route {
        Route::ExistingTopic { id, .. } => {
            p.notes.push(Note::Routed { host: id.clone(), created: false });
            id
        }
        Route::NewTopic { id } => {
            let title = embed::derive_title(&bundle.text);
            let id = id.unwrap_or_else(|| embed::fresh_topic_id(state, &title));
            let summary: String = bundle.text.chars().take(SUMMARY_LIMIT).collect();
            p.state.topics.insert(id.clone(), Topic::new(id.clone(), title, summary));
            p.notes.push(Note::Routed { host: id.clone(), created: true });
            p.events.push((EventKind::TopicCreated, Bindings { updated_topic: Some(id.clone()), ..Default::default() }));
            id
        }
    };

    let topic = p.state.topics.get_mut(&host).expect("host exists");
    for fact in &bundle.facts {
        let prov = Provenance { source_id: fact.source.clone(), event_id: tick, excerpt: bundle.text.clone() };
        match topic.fields.get_mut(&fact.field) {
            Some(field) => {
                field.tier = Tier::Active;
                field.last_access = tick;
                if fact.entity_tag.is_some() {
                    field.entity_tag = fact.entity_tag.clone();
                }
                let idx = field.current_index();
                if idx.is_some_and(|i| field.history[i].value == fact.value) {
                    field.salience += params.salience.access_boost;
                    p.notes.push(Note::Deduplicated { unit: UnitKey { topic: host.clone(), field: fact.field.clone() } });
                    continue;
                }
                if let Some(i) = idx {
                    field.history[i].superseded = true;
                }
                field.history.push(ValueEntry::new(fact.value.clone(), at.clone(), prov));
                field.salience = field.salience.max(params.salience.initial);
            }
            None => {
                let entry = ValueEntry::new(fact.value.clone(), at.clone(), prov);
                topic.fields.insert(
                    fact.field.clone(),
                    Field::new(fact.field.clone(), fact.entity_tag.clone(), entry, params.salience.initial),
                );
            }
        }
        p.events.push((EventKind::FieldUpdated, Bindings::field_update(host.clone(), fact.field.clone())));
    }
    topic.refresh_embedding();

    for src in &bundle.extends {
        p.state.add_edge(src.clone(), host.clone(), EdgeKind::Extension, at.clone());
    }
    for other in &bundle.associates {
        p.state.add_edge(host.clone(), other.clone(), EdgeKind::Association, at.clone());
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineParams;
    use crate::embed::EmbeddingRouter;
    use crate::operators::rules::RuleTable;
    use crate::operators::Fact;
    use crate::state::TopicId;

    fn env<'a>(params: &'a EngineParams, rules: &'a RuleTable) -> OpEnv<'a> {
        OpEnv { params, rules, router: &EmbeddingRouter }
    }

    fn commit(mut p: Proposal) -> MemoryState {
        p.state.clock = Timestamp::at(p.state.clock.tick + 1);
        p.state
    }

    #[test]
    fn into_empty_state() {
        let (params, rules) = (EngineParams::default(), RuleTable::default());
        let b = FactBundle::new("Website Redesign | Deadline: March 15", vec![Fact::new("Deadline", "March 15")]);
        let p = ingest(&MemoryState::default(), &b, &env(&params, &rules)).unwrap();
        assert_eq!(p.state.topics.len(), 1);
        let t = &p.state.topics[&TopicId::from("Website-Redesign")];
        assert_eq!(t.title, "Website Redesign");
        assert_eq!(t.fields["Deadline"].history.len(), 1);
        assert!(p.state.revision_queue.is_empty());
        assert_eq!(p.events.iter().filter(|(e, _)| *e == EventKind::FieldUpdated).count(), 1);
    }

    #[test]
    fn update_supersedes_and_duplicate_bumps() {
        let (params, rules) = (EngineParams::default(), RuleTable::default());
        let e = env(&params, &rules);
        let b = FactBundle::new("Website Redesign | Deadline: March 15", vec![Fact::new("Deadline", "March 15")]);
        let s1 = commit(ingest(&MemoryState::default(), &b, &e).unwrap());
        let s2 = commit(ingest(&s1, &b, &e).unwrap());
        let id = TopicId::from("Website-Redesign");
        let f1 = &s1.topics[&id].fields["Deadline"];
        let f2 = &s2.topics[&id].fields["Deadline"];
        assert_eq!(f2.history.len(), 1);
        assert!(f2.salience > f1.salience);

        let upd = FactBundle::new("Website Redesign | Deadline UPDATED: April 20", vec![Fact::new("Deadline", "April 20")]);
        let s3 = commit(ingest(&s2, &upd, &e).unwrap());
        let h = s3.history(&id, "Deadline").unwrap();
        assert_eq!(h.len(), 2);
        assert!(h[0].superseded && !h[1].superseded);
        assert_eq!(s3.current_value(&id, "Deadline").unwrap().0, "April 20");
        s3.check_invariants().unwrap();
    }

    #[test]
    fn empty_bundle_rejected() {
        let (params, rules) = (EngineParams::default(), RuleTable::default());
        let err = ingest(&MemoryState::default(), &FactBundle::new("x", vec![]), &env(&params, &rules)).unwrap_err();
        assert!(matches!(err, OpError::InvalidBundle(_)));
    }

    #[test]
    fn links_require_existing_topics() {
        let (params, rules) = (EngineParams::default(), RuleTable::default());
        let b = FactBundle::new("Milestones | Launch: March 22", vec![Fact::new("Launch", "March 22")])
            .hinted("Milestones")
            .extending("Website-Redesign");
        assert!(matches!(
            ingest(&MemoryState::default(), &b, &env(&params, &rules)),
            Err(OpError::UnknownUnit(_))
        ));
    }
}
