use std::collections::{BTreeSet, VecDeque};

use super::{Answer, ContextItem, OpEnv, OpError, Proposal, Query, QueryMode, RetrievalOutput};
use crate::embed::{self, cosine};
use crate::par;
use crate::policy::{Bindings, EventKind};
use crate::state::{Field, MemoryState, Tier, Topic, TopicId, UnitKey, ValueEntry};

/// A query token names the field when it appears among the field name's tokens.
pub fn field_matches(query_tokens: &BTreeSet<String>, field_name: &str) -> bool {
    embed::tokens(field_name).iter().any(|t| query_tokens.contains(t))
}

/// Non-archived topics ranked by similarity to `text`, best first, ties by id.
fn rank_topics<'a>(state: &'a MemoryState, text: &str, k: usize) -> Vec<&'a Topic> {
    let q = embed::embed(text);
    let live: Vec<&Topic> = state.topics.values().filter(|t| !t.archived).collect();
    let mut scored: Vec<(f64, &Topic)> =
        par::map(&live, |t| (cosine(&q, &t.embedding), *t)).into_iter().filter(|(s, _)| *s > 0.0).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.into_iter().take(k).map(|(_, t)| t).collect()
}

fn answer(topic: &TopicId, field: &Field, entry: &ValueEntry) -> Answer {
    Answer {
        unit: UnitKey { topic: topic.clone(), field: field.name.clone() },
        value: entry.value.clone(),
        at: entry.at.clone(),
        prov: entry.prov.clone(),
        superseded: entry.superseded,
    }
}

fn historical(out: &mut Vec<Answer>, topic: &TopicId, field: &Field, as_of: Option<u64>) {
    for e in &field.history {
        if as_of.is_none_or(|t| e.at.tick <= t) {
            out.push(answer(topic, field, e));
        }
    }
}

fn context_item(t: &Topic) -> ContextItem {
    ContextItem { topic: t.id.clone(), title: t.title.clone(), summary: t.summary.clone() }
}

/// Reads only; no salience change. Used for probes and scheduling.
pub fn read(state: &MemoryState, q: &Query, env: &OpEnv<'_>) -> Result<RetrievalOutput, OpError> {
    q.validate(state.clock.tick)?;
    let mut out = RetrievalOutput::default();

    if let (Some(unit), QueryMode::Default | QueryMode::Historical { .. }) = (&q.explicit, &q.mode) {
        let field = state.field(unit).ok_or_else(|| OpError::UnknownUnit(unit.to_string()))?;
        match &q.mode {
            QueryMode::Historical { as_of } => historical(&mut out.answers, &unit.topic, field, *as_of),
            _ => {
                if let Some(e) = field.current() {
                    out.answers.push(answer(&unit.topic, field, e));
                }
            }
        }
    } else {
        match &q.mode {
            QueryMode::Default => {
                let qt: BTreeSet<String> = embed::tokens(&q.text).into_iter().collect();
                let ranked = rank_topics(state, &q.text, env.params.top_topics);
                let mut answered = BTreeSet::new();
                for t in &ranked {
                    for f in t.fields.values() {
                        if f.tier == Tier::Hidden || !field_matches(&qt, &f.name) {
                            continue;
                        }
                        if let Some(e) = f.current() {
                            out.answers.push(answer(&t.id, f, e));
                            answered.insert(t.id.clone());
                        }
                    }
                }
                let mut seen = answered.clone();
                for id in &answered {
                    for other in state.associates(id) {
                        if let Some(t) = state.topics.get(&other).filter(|t| !t.archived) {
                            if seen.insert(other.clone()) {
                                out.context.push(context_item(t));
                            }
                        }
                    }
                }
            }
            QueryMode::Historical { as_of } => {
                let qt: BTreeSet<String> = embed::tokens(&q.text).into_iter().collect();
                for t in rank_topics(state, &q.text, env.params.top_topics) {
                    for f in t.fields.values().filter(|f| field_matches(&qt, &f.name)) {
                        historical(&mut out.answers, &t.id, f, *as_of);
                    }
                }
            }
            QueryMode::Structural { root, depth } => {
                if !state.topics.contains_key(root) {
                    return Err(OpError::UnknownUnit(root.to_string()));
                }
                let mut seen = BTreeSet::from([root.clone()]);
                let mut queue = VecDeque::from([(root.clone(), 0usize)]);
                while let Some((id, d)) = queue.pop_front() {
                    out.context.push(context_item(&state.topics[&id]));
                    if d == *depth {
                        continue;
                    }
                    for e in state.edges.iter().filter(|e| e.src == id) {
                        if seen.insert(e.dst.clone()) {
                            queue.push_back((e.dst.clone(), d + 1));
                        }
                    }
                }
            }
        }
    }

    let mut accessed = BTreeSet::new();
    for a in &out.answers {
        if accessed.insert(a.unit.clone()) {
            out.accessed_units.push(a.unit.clone());
        }
    }
    Ok(out)
}

/// Answers `q` and, in the same proposal, raises the salience of every
/// unit read into the answers.
pub fn retrieve(state: &MemoryState, q: &Query, env: &OpEnv<'_>) -> Result<Proposal, OpError> {
    let out = read(state, q, env)?;
    let tick = OpEnv::next_tick(state);
    let mut p = Proposal::new(state.clone());
    let mut topics = BTreeSet::new();
    for unit in &out.accessed_units {
        let f = p
            .state
            .topics
            .get_mut(&unit.topic)
            .and_then(|t| t.fields.get_mut(&unit.field))
            .expect("accessed unit exists");
        f.salience = crate::salience::bump(f.salience, env.params.salience.access_boost);
        f.last_access = tick;
        topics.insert(unit.topic.clone());
    }
    for t in topics {
        p.events.push((EventKind::RetrievalPerformed, Bindings::access(t)));
    }
    p.output = Some(out);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineParams;
    use crate::embed::EmbeddingRouter;
    use crate::operators::rules::RuleTable;
    use crate::operators::{ingest, Fact, FactBundle};
    use crate::state::Timestamp;

    fn setup() -> (EngineParams, RuleTable) {
        (EngineParams::default(), RuleTable::default())
    }

    fn commit(mut p: Proposal) -> MemoryState {
        p.state.clock = Timestamp::at(p.state.clock.tick + 1);
        p.state
    }

    fn deadline_state(e: &OpEnv<'_>) -> MemoryState {
        let b0 = FactBundle::new("Website Redesign | Deadline: March 15", vec![Fact::new("Deadline", "March 15")]);
        let b1 = FactBundle::new("Website Redesign | Deadline UPDATED: April 20", vec![Fact::new("Deadline", "April 20")]);
        let s = commit(ingest(&MemoryState::default(), &b0, e).unwrap());
        commit(ingest(&s, &b1, e).unwrap())
    }

    #[test]
    fn default_returns_current_and_bumps() {
        let (params, rules) = setup();
        let e = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let s = deadline_state(&e);
        let p = retrieve(&s, &Query::text("What is the deadline for the Website Redesign?"), &e).unwrap();
        let out = p.output.as_ref().unwrap();
        assert_eq!(out.answers.len(), 1);
        assert_eq!(out.answers[0].value, "April 20");
        assert_eq!(out.answers[0].unit, UnitKey::new("Website-Redesign", "Deadline"));
        let before = s.field(&out.answers[0].unit).unwrap().salience;
        let after = p.state.field(&out.answers[0].unit).unwrap().salience;
        assert_eq!(after, before + params.salience.access_boost);
    }

    #[test]
    fn historical_reads_superseded_entries() {
        let (params, rules) = setup();
        let e = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let s = deadline_state(&e);
        let out = read(&s, &Query::historical("What is the deadline for the Website Redesign?", Some(1)), &e).unwrap();
        assert_eq!(out.answers.len(), 1);
        assert_eq!(out.answers[0].value, "March 15");
        assert_eq!(out.answers[0].at.tick, 1);
        assert!(out.answers[0].superseded);
        assert!(read(&s, &Query::historical("deadline", Some(99)), &e).is_err());
    }

    #[test]
    fn empty_state_reads_nothing() {
        let (params, rules) = setup();
        let e = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let s = MemoryState::default();
        let p = retrieve(&s, &Query::text("anything at all"), &e).unwrap();
        assert!(p.output.unwrap().answers.is_empty());
        assert_eq!(p.state.digest(), s.digest());
    }

    #[test]
    fn explicit_lookup_bypasses_hiding_and_errors_on_unknown() {
        let (params, rules) = setup();
        let e = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let mut s = deadline_state(&e);
        s.topics.get_mut(&TopicId::from("Website-Redesign")).unwrap().fields.get_mut("Deadline").unwrap().tier =
            Tier::Hidden;
        assert!(read(&s, &Query::text("deadline website redesign"), &e).unwrap().answers.is_empty());
        let out = read(&s, &Query::explicit("Website-Redesign", "Deadline"), &e).unwrap();
        assert_eq!(out.answers[0].value, "April 20");
        assert!(matches!(read(&s, &Query::explicit("Nope", "Deadline"), &e), Err(OpError::UnknownUnit(_))));
    }

    #[test]
    fn structural_walks_edges() {
        let (params, rules) = setup();
        let e = OpEnv { params: &params, rules: &rules, router: &EmbeddingRouter };
        let mut s = deadline_state(&e);
        let m = FactBundle::new("Milestones | Launch: March 22", vec![Fact::new("Launch", "March 22")])
            .hinted("Milestones")
            .extending("Website-Redesign");
        s = commit(ingest(&s, &m, &e).unwrap());
        let q = Query {
            text: String::new(),
            mode: QueryMode::Structural { root: "Website-Redesign".into(), depth: 1 },
            explicit: None,
        };
        let out = read(&s, &q, &e).unwrap();
        let ids: Vec<_> = out.context.iter().map(|c| c.topic.as_str()).collect();
        assert_eq!(ids, vec!["Website-Redesign", "Milestones"]);
        assert!(out.accessed_units.is_empty());
        let bad = Query { mode: QueryMode::Structural { root: "Website-Redesign".into(), depth: 0 }, ..q };
        assert!(read(&s, &bad, &e).is_err());
    }
}
