use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{EvidenceItem, Note, OpEnv, OpError, Proposal};
use crate::config::EngineParams;
use crate::embed::{self, cosine};
use crate::par::{self, Parallelism};
use crate::policy::{Bindings, EventKind};
use crate::state::{
    EdgeKind, Field, MemoryState, Provenance, RevisionFlag, Timestamp, Topic, TopicId, UnitKey, ValueEntry,
};

fn title_tokens(t: &Topic) -> BTreeSet<String> {
    embed::tokens(&t.title).into_iter().collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Pairs of live topics whose titles overlap (Jaccard >= 0.5) and whose
/// embeddings are at least `duplicate_threshold` similar. Candidate pairs
/// come from an inverted index on title tokens; scoring runs under `mode`.
pub fn detect_duplicates(mode: Parallelism, state: &MemoryState, params: &EngineParams) -> Vec<EvidenceItem> {
    let live: Vec<&Topic> = state.topics.values().filter(|t| !t.archived).collect();
    let tokens: Vec<BTreeSet<String>> = live.iter().map(|t| title_tokens(t)).collect();
    let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, toks) in tokens.iter().enumerate() {
        for tok in toks {
            index.entry(tok.as_str()).or_default().push(i);
        }
    }
    let mut pairs = BTreeSet::new();
    for ids in index.values() {
        for (k, &i) in ids.iter().enumerate() {
            for &j in &ids[k + 1..] {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
    }
    let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
    let scored = par::map_with(mode, &pairs, |&(i, j)| {
        if jaccard(&tokens[i], &tokens[j]) < 0.5 {
            return None;
        }
        let sim = cosine(&live[i].embedding, &live[j].embedding);
        (sim >= params.duplicate_threshold).then_some((i, j, sim))
    });
    scored
        .into_iter()
        .flatten()
        .map(|(i, j, similarity)| EvidenceItem::DuplicateTopics {
            a: live[i].id.clone(),
            b: live[j].id.clone(),
            similarity,
        })
        .collect()
}

fn normalize_name(name: &str) -> String {
    name.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Deterministic evidence scan. Dependency flags come first, in queue order.
pub fn detect_evidence(state: &MemoryState, params: &EngineParams) -> Vec<EvidenceItem> {
    let mut out: Vec<EvidenceItem> = state
        .revision_queue
        .iter()
        .map(|f| EvidenceItem::DependencyFlag { topic: f.topic.clone(), cause: f.cause.clone() })
        .collect();

    for t in state.topics.values().filter(|t| !t.archived) {
        for f in t.fields.values() {
            if f.live_entries() > 1 {
                out.push(EvidenceItem::ConflictingValues { topic: t.id.clone(), field: f.name.clone() });
            }
        }
        let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for name in t.fields.keys() {
            groups.entry(normalize_name(name)).or_default().push(name);
        }
        for names in groups.values().filter(|n| n.len() > 1) {
            // names are sorted; the first is canonical
            for drifted in &names[1..] {
                out.push(EvidenceItem::SchemaDrift { topic: t.id.clone(), field: drifted.to_string() });
            }
        }
    }

    out.extend(detect_duplicates(Parallelism::default(), state, params));

    for t in state.topics.values().filter(|t| !t.archived) {
        if t.history_len() < params.promote_entries {
            continue;
        }
        let mut per_tag: BTreeMap<&str, usize> = BTreeMap::new();
        for f in t.fields.values() {
            if let Some(tag) = &f.entity_tag {
                *per_tag.entry(tag).or_default() += 1;
            }
        }
        for (tag, n) in per_tag {
            if n >= params.promote_fields && t.entity.as_deref() != Some(tag) {
                out.push(EvidenceItem::PromotionCandidate { topic: t.id.clone(), entity_tag: tag.to_string() });
            }
        }
    }
    out
}

/// Concatenates `from` into `into`: histories ordered by tick (stable, so
/// `from` wins ties), the latest live entry stays current.
fn merge_field(into: &mut Field, from: Field) {
    let mut history = std::mem::take(&mut into.history);
    history.extend(from.history);
    history.sort_by_key(|e| e.at.tick);
    let latest = history.iter().rposition(|e| !e.compressed);
    for (i, e) in history.iter_mut().enumerate() {
        if !e.compressed {
            e.superseded = Some(i) != latest;
        }
    }
    into.history = history;
    into.salience = into.salience.max(from.salience);
    into.tier = into.tier.min(from.tier);
    into.last_access = into.last_access.max(from.last_access);
    if into.entity_tag.is_none() {
        into.entity_tag = from.entity_tag;
    }
}

fn capitalize(tag: &str) -> String {
    let mut c = tag.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn require_topic<'a>(state: &'a MemoryState, id: &TopicId) -> Result<&'a Topic, OpError> {
    state.topics.get(id).ok_or_else(|| OpError::Evidence(format!("unknown topic `{id}`")))
}

fn validate(state: &MemoryState, evidence: &[EvidenceItem]) -> Result<(), OpError> {
    for item in evidence {
        match item {
            EvidenceItem::DuplicateTopics { a, b, .. } => {
                for id in [a, b] {
                    if require_topic(state, id)?.archived {
                        return Err(OpError::Evidence(format!("merge of archived topic `{id}`")));
                    }
                }
                if a == b {
                    return Err(OpError::Evidence(format!("topic `{a}` cannot merge with itself")));
                }
            }
            EvidenceItem::ConflictingValues { topic, field } | EvidenceItem::SchemaDrift { topic, field } => {
                if !require_topic(state, topic)?.fields.contains_key(field) {
                    return Err(OpError::Evidence(format!("unknown field `{topic}.{field}`")));
                }
            }
            EvidenceItem::DependencyFlag { topic, .. } => {
                require_topic(state, topic)?;
            }
            EvidenceItem::PromotionCandidate { topic, .. } => {
                if require_topic(state, topic)?.archived {
                    return Err(OpError::Evidence(format!("promotion from archived topic `{topic}`")));
                }
            }
        }
    }
    Ok(())
}

struct Reviser<'e, 'a> {
    env: &'e OpEnv<'a>,
    tick: u64,
    p: Proposal,
    /// Units written by the dependency walk; their successors were already
    /// evaluated, so they raise no field_updated event.
    walked: BTreeSet<UnitKey>,
}

impl Reviser<'_, '_> {
    fn skip(&mut self, reason: String) {
        self.p.notes.push(Note::EvidenceSkipped { reason });
    }

    fn merge_topics(&mut self, a: &TopicId, b: &TopicId) {
        let (winner, loser) = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        let s = &mut self.p.state;
        if s.topics[&winner].archived || s.topics[&loser].archived {
            return self.skip(format!("{winner} / {loser} already merged"));
        }
        let loser_fields = s.topics[&loser].fields.clone();
        let w = s.topics.get_mut(&winner).expect("winner");
        for (name, f) in loser_fields {
            match w.fields.get_mut(&name) {
                Some(into) => merge_field(into, f),
                None => {
                    w.fields.insert(name.clone(), f);
                }
            }
            self.p.notes.push(Note::UnitMerged {
                from: UnitKey { topic: loser.clone(), field: name.clone() },
                into: UnitKey { topic: winner.clone(), field: name },
            });
        }
        w.refresh_embedding();
        let l = s.topics.get_mut(&loser).expect("loser");
        l.archived = true;
        l.merged_into = Some(winner.clone());

        let repoint = |id: &TopicId| if id == &loser { winner.clone() } else { id.clone() };
        let edges = std::mem::take(&mut s.edges);
        for e in edges {
            let (src, dst) = (repoint(&e.src), repoint(&e.dst));
            s.add_edge(src, dst, e.kind, e.created_at);
        }
        let flags = std::mem::take(&mut s.revision_queue);
        s.revision_queue = flags
            .into_iter()
            .map(|mut f| {
                f.topic = repoint(&f.topic);
                f.cause.topic = repoint(&f.cause.topic);
                f
            })
            .collect();
        self.p.notes.push(Note::TopicMerged { loser, winner: winner.clone() });
        self.p.events.push((EventKind::TopicMerged, Bindings { updated_topic: Some(winner), ..Default::default() }));
    }

    fn resolve_conflict(&mut self, topic: &TopicId, field: &str) {
        let Some(f) = self.p.state.topics.get_mut(topic).and_then(|t| t.fields.get_mut(field)) else {
            return self.skip(format!("{topic}.{field} no longer exists"));
        };
        let latest = f
            .history
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.compressed && !e.superseded)
            .max_by_key(|(i, e)| (e.at.tick, *i))
            .map(|(i, _)| i);
        for (i, e) in f.history.iter_mut().enumerate() {
            if !e.compressed && Some(i) != latest {
                e.superseded = true;
            }
        }
    }

    fn fix_drift(&mut self, topic: &TopicId, field: &str) {
        let Some(t) = self.p.state.topics.get_mut(topic) else { return };
        let key = normalize_name(field);
        let canonical = t.fields.keys().find(|n| normalize_name(n) == key).cloned();
        match canonical {
            Some(c) if c != field && t.fields.contains_key(field) => {
                let from = t.fields.remove(field).expect("drifted field");
                merge_field(t.fields.get_mut(&c).expect("canonical"), from);
                t.refresh_embedding();
                self.p.notes.push(Note::UnitMerged {
                    from: UnitKey { topic: topic.clone(), field: field.to_string() },
                    into: UnitKey { topic: topic.clone(), field: c },
                });
            }
            _ => self.skip(format!("{topic}.{field} has no drift left")),
        }
    }

    fn promote(&mut self, source: &TopicId, tag: &str) {
        let s = &mut self.p.state;
        let src = &s.topics[source];
        let names: Vec<String> =
            src.fields.values().filter(|f| f.entity_tag.as_deref() == Some(tag)).map(|f| f.name.clone()).collect();
        if src.archived || names.is_empty() {
            return self.skip(format!("nothing tagged `{tag}` left in {source}"));
        }
        let title = capitalize(tag);
        let id = embed::fresh_topic_id(s, &title);
        let mut topic = Topic::new(id.clone(), title, format!("{tag}, split from {source}"));
        topic.entity = Some(tag.to_string());
        let src = s.topics.get_mut(source).expect("source");
        for name in names {
            let f = src.fields.remove(&name).expect("tagged field");
            topic.fields.insert(name.clone(), f);
            self.p.notes.push(Note::UnitMoved {
                from: UnitKey { topic: source.clone(), field: name.clone() },
                into: UnitKey { topic: id.clone(), field: name },
            });
        }
        src.refresh_embedding();
        topic.refresh_embedding();
        s.topics.insert(id.clone(), topic);
        s.add_edge(source.clone(), id.clone(), EdgeKind::Extension, Timestamp::at(self.tick));
        self.p.notes.push(Note::Promoted { source: source.clone(), topic: id.clone(), entity_tag: tag.to_string() });
        self.p.events.push((EventKind::TopicCreated, Bindings { updated_topic: Some(id), ..Default::default() }));
    }

    /// Breadth-first dependency repair from `root`. A topic's successors
    /// are visited only when one of its rules fired.
    fn walk(&mut self, root: &TopicId, cause: &UnitKey) {
        let mut visited = BTreeSet::new();
        let mut queue = VecDeque::from([(root.clone(), cause.clone())]);
        while let Some((topic, cause)) = queue.pop_front() {
            if !visited.insert(topic.clone()) {
                continue;
            }
            let fired = self.apply_rules(&topic, &cause);
            self.p.state.revision_queue.retain(|f| !(f.topic == topic && f.cause == cause));
            for field in &fired {
                for succ in self.p.state.extension_successors(&topic) {
                    queue.push_back((succ, UnitKey { topic: topic.clone(), field: field.clone() }));
                }
            }
            self.p.notes.push(Note::RevisionEvaluated { topic, cause, fired });
        }
    }

    fn apply_rules(&mut self, topic: &TopicId, cause: &UnitKey) -> Vec<String> {
        let s = &self.p.state;
        let Some(t) = s.topics.get(topic).filter(|t| !t.archived) else { return Vec::new() };
        let Some(cause_entry) = s.field(cause).and_then(Field::current).cloned() else { return Vec::new() };
        let mut writes = Vec::new();
        for rule in self.env.rules.matching(cause, topic) {
            let Some(cur) = t.fields.get(&rule.dependent_field).and_then(Field::current) else { continue };
            let derived = rule.transform.apply(&cur.value, cause, &cause_entry.value);
            if derived != cur.value && !writes.iter().any(|(f, _)| f == &rule.dependent_field) {
                writes.push((rule.dependent_field.clone(), derived));
            }
        }
        let t = self.p.state.topics.get_mut(topic).expect("topic");
        let mut fired = Vec::new();
        for (name, value) in writes {
            let f = t.fields.get_mut(&name).expect("dependent field");
            let i = f.current_index().expect("current entry");
            f.history[i].superseded = true;
            let prov = Provenance {
                source_id: format!("revision:{cause}"),
                event_id: self.tick,
                excerpt: format!("{cause} = {} (event {})", cause_entry.value, cause_entry.prov.event_id),
            };
            f.history.push(ValueEntry::new(value, Timestamp::at(self.tick), prov));
            self.walked.insert(UnitKey { topic: topic.clone(), field: name.clone() });
            fired.push(name);
        }
        if !fired.is_empty() {
            t.refresh_embedding();
        }
        fired
    }
}

fn current_marker(f: &Field) -> Option<(String, u64)> {
    f.current().map(|e| (e.value.clone(), e.at.tick))
}

/// Applies evidence items in order. Items made moot by an earlier item in
/// the same batch are skipped with a note rather than failing the batch.
pub fn revise(state: &MemoryState, evidence: &[EvidenceItem], env: &OpEnv<'_>) -> Result<Proposal, OpError> {
    validate(state, evidence)?;
    let mut r = Reviser { env, tick: OpEnv::next_tick(state), p: Proposal::new(state.clone()), walked: BTreeSet::new() };
    for item in evidence {
        match item {
            EvidenceItem::DuplicateTopics { a, b, .. } => r.merge_topics(a, b),
            EvidenceItem::ConflictingValues { topic, field } => r.resolve_conflict(topic, field),
            EvidenceItem::SchemaDrift { topic, field } => r.fix_drift(topic, field),
            EvidenceItem::DependencyFlag { topic, cause } => {
                let flag = RevisionFlag { topic: topic.clone(), cause: cause.clone() };
                // explicit flags that were never queued are walked as given
                if r.p.state.revision_queue.contains(&flag) || !state.revision_queue.contains(&flag) {
                    r.walk(topic, cause)
                } else {
                    r.skip(format!("flag {topic} <- {cause} already drained"))
                }
            }
            EvidenceItem::PromotionCandidate { topic, entity_tag } => r.promote(topic, entity_tag),
        }
    }

    // Structural repairs that changed a current value count as field updates.
    let mut events = Vec::new();
    for t in r.p.state.topics.values().filter(|t| !t.archived) {
        for f in t.fields.values() {
            let unit = UnitKey { topic: t.id.clone(), field: f.name.clone() };
            if r.walked.contains(&unit) {
                continue;
            }
            let before = state.field(&unit).and_then(current_marker);
            if before != current_marker(f) {
                events.push((EventKind::FieldUpdated, Bindings::field_update(t.id.clone(), f.name.clone())));
            }
        }
    }
    r.p.events.extend(events);
    Ok(r.p)
}
