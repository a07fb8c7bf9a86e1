//! In-memory representation of the governed state. Topics carry field
//! histories; edges, policies and the clock sit beside them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::embed::{self, Embedding};
use crate::policy::Policy;

/// Logical time. Only `tick` carries semantics.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct Timestamp {
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall: Option<String>,
}

impl Timestamp {
    pub fn at(tick: u64) -> Self {
        Self { tick, wall: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub event_id: u64,
    pub excerpt: String,
}

/// Bookkeeping carried by a compression summary entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replaced {
    pub count: usize,
    pub first_value: String,
    pub last_value: String,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub value: String,
    pub at: Timestamp,
    pub prov: Provenance,
    pub superseded: bool,
    pub compressed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced: Option<Replaced>,
}

impl ValueEntry {
    pub fn new(value: impl Into<String>, at: Timestamp, prov: Provenance) -> Self {
        Self { value: value.into(), at, prov, superseded: false, compressed: false, replaced: None }
    }

    /// Identity of the entry ignoring its status flags.
    pub fn same_content(&self, other: &ValueEntry) -> bool {
        self.value == other.value
            && self.at == other.at
            && self.prov == other.prov
            && self.replaced == other.replaced
    }

    /// Every provenance record this entry grounds: its own plus, for a
    /// summary, the records of everything it replaced.
    pub fn provenance(&self) -> impl Iterator<Item = &Provenance> {
        std::iter::once(&self.prov).chain(self.replaced.iter().flat_map(|r| r.provenance.iter()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Active,
    Compressed,
    Hidden,
}

impl Tier {
    /// Higher is more attenuated.
    pub fn rank(self) -> u8 {
        match self {
            Tier::Active => 0,
            Tier::Compressed => 1,
            Tier::Hidden => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_tag: Option<String>,
    pub history: Vec<ValueEntry>,
    pub salience: f64,
    pub tier: Tier,
    /// Tick of the last write or read of this field.
    pub last_access: u64,
}

impl Field {
    pub fn new(name: impl Into<String>, entity_tag: Option<String>, first: ValueEntry, salience: f64) -> Self {
        let last_access = first.at.tick;
        Self { name: name.into(), entity_tag, history: vec![first], salience, tier: Tier::Active, last_access }
    }

    /// Index of the current entry: the last entry that is neither
    /// superseded nor compressed.
    pub fn current_index(&self) -> Option<usize> {
        self.history.iter().rposition(|e| !e.superseded && !e.compressed)
    }

    pub fn current(&self) -> Option<&ValueEntry> {
        self.current_index().map(|i| &self.history[i])
    }

    /// Number of entries eligible to be read as current.
    pub fn live_entries(&self) -> usize {
        self.history.iter().filter(|e| !e.superseded && !e.compressed).count()
    }

    pub fn provenance(&self) -> BTreeSet<Provenance> {
        self.history.iter().flat_map(|e| e.provenance().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicId(pub String);

impl TopicId {
    pub fn new(s: impl Into<String>) -> Self {
        TopicId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TopicId {
    fn from(s: &str) -> Self {
        TopicId(s.to_string())
    }
}

/// A (topic, field) pair: the finest addressable unit of content.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitKey {
    pub topic: TopicId,
    pub field: String,
}

impl UnitKey {
    pub fn new(topic: impl Into<String>, field: impl Into<String>) -> Self {
        Self { topic: TopicId(topic.into()), field: field.into() }
    }
}

impl fmt::Display for UnitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.topic, self.field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub id: TopicId,
    pub title: String,
    pub summary: String,
    /// Derived from the topic's text; never serialized.
    #[serde(skip)]
    pub embedding: Embedding,
    pub fields: BTreeMap<String, Field>,
    pub archived: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_into: Option<TopicId>,
    /// Entity tag this topic was promoted for, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
}

impl Topic {
    pub fn new(id: TopicId, title: impl Into<String>, summary: impl Into<String>) -> Self {
        let mut t = Self {
            id,
            title: title.into(),
            summary: summary.into(),
            embedding: Embedding::zero(),
            fields: BTreeMap::new(),
            archived: false,
            merged_into: None,
            entity: None,
        };
        t.refresh_embedding();
        t
    }

    /// Embeds the distinct tokens of the title, summary and current values.
    /// Words repeated across them count once.
    pub fn refresh_embedding(&mut self) {
        let mut text = format!("{} {}", self.title, self.summary);
        for field in self.fields.values() {
            if let Some(cur) = field.current() {
                text.push(' ');
                text.push_str(&cur.value);
            }
        }
        let distinct: std::collections::BTreeSet<String> = embed::tokens(&text).into_iter().collect();
        self.embedding = embed::embed(&distinct.into_iter().collect::<Vec<_>>().join(" "));
    }

    pub fn history_len(&self) -> usize {
        self.fields.values().map(|f| f.history.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Extension,
    Association,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: TopicId,
    pub dst: TopicId,
    pub kind: EdgeKind,
    pub created_at: Timestamp,
}

/// A topic awaiting dependency revision because `cause` changed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RevisionFlag {
    pub topic: TopicId,
    pub cause: UnitKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MarkKind {
    Attenuate,
    Archive,
}

/// A deferred request for the forgetting operator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ForgetMark {
    pub kind: MarkKind,
    pub target: String,
}

/// SHA-256 content digest; serialized as lowercase hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Digest(pub [u8; 32]);

impl From<Digest> for String {
    fn from(d: Digest) -> String {
        d.to_hex()
    }
}

impl TryFrom<String> for Digest {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Digest::from_hex(&s).ok_or_else(|| format!("invalid digest `{s}`"))
    }
}

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MemoryState {
    pub topics: BTreeMap<TopicId, Topic>,
    pub edges: BTreeSet<Edge>,
    pub policies: Vec<Policy>,
    pub clock: Timestamp,
    pub revision_queue: BTreeSet<RevisionFlag>,
    pub forget_marks: BTreeSet<ForgetMark>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LookupError {
    #[error("unknown topic `{0}`")]
    UnknownTopic(TopicId),
    #[error("unknown field `{field}` in topic `{topic}`")]
    UnknownField { topic: TopicId, field: String },
}

impl MemoryState {
    pub fn genesis(policies: Vec<Policy>) -> Self {
        Self { policies, ..Default::default() }
    }

    pub fn topic(&self, id: &TopicId) -> Option<&Topic> {
        self.topics.get(id)
    }

    pub fn field(&self, unit: &UnitKey) -> Option<&Field> {
        self.topics.get(&unit.topic)?.fields.get(&unit.field)
    }

    /// The value a default read returns for `(topic, field)`, if any.
    pub fn current_value(&self, topic: &TopicId, field: &str) -> Option<(String, Timestamp, Provenance)> {
        let t = self.topics.get(topic)?;
        if t.archived {
            return None;
        }
        let f = t.fields.get(field)?;
        if f.tier == Tier::Hidden {
            return None;
        }
        f.current().map(|e| (e.value.clone(), e.at.clone(), e.prov.clone()))
    }

    /// Full history of a field. Explicit lookups ignore archival and hiding.
    pub fn history(&self, topic: &TopicId, field: &str) -> Result<&[ValueEntry], LookupError> {
        let t = self.topics.get(topic).ok_or_else(|| LookupError::UnknownTopic(topic.clone()))?;
        let f = t
            .fields
            .get(field)
            .ok_or_else(|| LookupError::UnknownField { topic: topic.clone(), field: field.to_string() })?;
        Ok(&f.history)
    }

    /// Number of `Active` fields in non-archived topics.
    pub fn active_footprint(&self) -> usize {
        self.topics
            .values()
            .filter(|t| !t.archived)
            .map(|t| t.fields.values().filter(|f| f.tier == Tier::Active).count())
            .sum()
    }

    pub fn has_edge(&self, src: &TopicId, dst: &TopicId, kind: EdgeKind) -> bool {
        self.edges.iter().any(|e| &e.src == src && &e.dst == dst && e.kind == kind)
    }

    /// Targets of Extension edges leaving `topic`, in id order.
    pub fn extension_successors(&self, topic: &TopicId) -> Vec<TopicId> {
        let mut out: Vec<TopicId> = self
            .edges
            .iter()
            .filter(|e| &e.src == topic && e.kind == EdgeKind::Extension)
            .map(|e| e.dst.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Topics linked to `topic` by an Association edge in either direction.
    pub fn associates(&self, topic: &TopicId) -> Vec<TopicId> {
        let mut out: Vec<TopicId> = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Association)
            .filter_map(|e| {
                if &e.src == topic {
                    Some(e.dst.clone())
                } else if &e.dst == topic {
                    Some(e.src.clone())
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Adds an edge unless it is a self loop or a duplicate `(src, dst, kind)`.
    pub fn add_edge(&mut self, src: TopicId, dst: TopicId, kind: EdgeKind, at: Timestamp) -> bool {
        if src == dst || self.has_edge(&src, &dst, kind) {
            return false;
        }
        self.edges.insert(Edge { src, dst, kind, created_at: at })
    }

    /// Every provenance record reachable from each unit.
    pub fn provenance_by_unit(&self) -> BTreeMap<UnitKey, BTreeSet<Provenance>> {
        let mut out = BTreeMap::new();
        for t in self.topics.values() {
            for f in t.fields.values() {
                out.insert(UnitKey { topic: t.id.clone(), field: f.name.clone() }, f.provenance());
            }
        }
        out
    }

    pub fn refresh_embeddings(&mut self) {
        for t in self.topics.values_mut() {
            t.refresh_embedding();
        }
    }

    /// Content digest of every serialized part of the state.
    /// Embeddings are derived data and are not hashed.
    pub fn digest(&self) -> Digest {
        // BTreeMap/BTreeSet iteration is already canonical.
        let mut h = Sha256::new();
        h.update(b"gem-state\0");
        serde_json::to_writer(&mut h, self).expect("state serializes");
        Digest(h.finalize().into())
    }

    /// Checks referential integrity and the one-current-entry rule.
    pub fn check_invariants(&self) -> Result<(), String> {
        for e in &self.edges {
            if !self.topics.contains_key(&e.src) || !self.topics.contains_key(&e.dst) {
                return Err(format!("dangling edge {} -> {}", e.src, e.dst));
            }
            if e.src == e.dst {
                return Err(format!("self edge on {}", e.src));
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if !seen.insert((&e.src, &e.dst, e.kind)) {
                return Err(format!("duplicate edge {} -> {} {:?}", e.src, e.dst, e.kind));
            }
        }
        for flag in &self.revision_queue {
            if !self.topics.contains_key(&flag.topic) {
                return Err(format!("revision flag for unknown topic {}", flag.topic));
            }
        }
        for t in self.topics.values() {
            for f in t.fields.values() {
                if !f.history.is_empty() && f.live_entries() != 1 {
                    return Err(format!("{}.{} has {} current entries", t.id, f.name, f.live_entries()));
                }
                if !(f.salience >= 0.0) {
                    return Err(format!("{}.{} has negative salience", t.id, f.name));
                }
            }
        }
        Ok(())
    }
}

/// Sort key of the hide ordering: lowest salience first, then older last
/// access, then field name, then topic id.
pub fn hide_order_key<'a>(topic: &'a TopicId, field: &'a Field) -> (f64, u64, &'a str, &'a TopicId) {
    (field.salience, field.last_access, field.name.as_str(), topic)
}

/// Active fields of non-archived topics in hide order (first = first to hide).
pub fn hide_order(state: &MemoryState) -> Vec<UnitKey> {
    let mut units: Vec<(&TopicId, &Field)> = state
        .topics
        .values()
        .filter(|t| !t.archived)
        .flat_map(|t| t.fields.values().filter(|f| f.tier == Tier::Active).map(move |f| (&t.id, f)))
        .collect();
    units.sort_by(|a, b| {
        let ka = hide_order_key(a.0, a.1);
        let kb = hide_order_key(b.0, b.1);
        ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.cmp(kb.2)).then(ka.3.cmp(kb.3))
    });
    units.into_iter().map(|(t, f)| UnitKey { topic: t.clone(), field: f.name.clone() }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov(tick: u64) -> Provenance {
        Provenance { source_id: "s".into(), event_id: tick, excerpt: "x".into() }
    }

    fn deadline_state() -> MemoryState {
        let mut s = MemoryState::default();
        let mut t = Topic::new(TopicId::from("Website-Redesign"), "Website Redesign", "project");
        let mut f = Field::new("Deadline", None, ValueEntry::new("March 15", Timestamp::at(0), prov(0)), 1.0);
        f.history[0].superseded = true;
        f.history.push(ValueEntry::new("April 20", Timestamp::at(1), prov(1)));
        t.fields.insert("Deadline".into(), f);
        s.topics.insert(t.id.clone(), t);
        s
    }

    #[test]
    fn current_value_is_latest_live_entry() {
        let s = deadline_state();
        let (v, at, p) = s.current_value(&"Website-Redesign".into(), "Deadline").unwrap();
        assert_eq!(v, "April 20");
        assert_eq!(at.tick, 1);
        assert_eq!(p, prov(1));
        let h = s.history(&"Website-Redesign".into(), "Deadline").unwrap();
        assert_eq!(h.len(), 2);
        assert!(h[0].superseded);
        assert!(!h[1].superseded);
    }

    #[test]
    fn absent_values() {
        let s = MemoryState::default();
        assert!(s.current_value(&"x".into(), "y").is_none());
        assert_eq!(s.active_footprint(), 0);

        let mut s = deadline_state();
        s.topics.get_mut(&TopicId::from("Website-Redesign")).unwrap().fields.get_mut("Deadline").unwrap().tier =
            Tier::Hidden;
        assert!(s.current_value(&"Website-Redesign".into(), "Deadline").is_none());
        // explicit lookup still works
        assert_eq!(s.history(&"Website-Redesign".into(), "Deadline").unwrap().len(), 2);
    }

    #[test]
    fn history_lookup_errors_name_the_key() {
        let s = deadline_state();
        let err = s.history(&"Nope".into(), "Deadline").unwrap_err();
        assert!(err.to_string().contains("Nope"));
        let err = s.history(&"Website-Redesign".into(), "Budget").unwrap_err();
        assert!(err.to_string().contains("Budget"));
    }

    #[test]
    fn footprint_counts_active_fields_only() {
        let mut s = MemoryState::default();
        for (id, names) in [("A", vec!["a1", "a2"]), ("B", vec!["b1", "b2"])] {
            let mut t = Topic::new(TopicId::from(id), id, "");
            for n in names {
                t.fields.insert(n.into(), Field::new(n, None, ValueEntry::new("v", Timestamp::at(0), prov(0)), 1.0));
            }
            s.topics.insert(t.id.clone(), t);
        }
        s.topics.get_mut(&TopicId::from("B")).unwrap().fields.get_mut("b2").unwrap().tier = Tier::Hidden;
        assert_eq!(s.active_footprint(), 3);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let s = deadline_state();
        assert_eq!(s.digest(), s.digest());
        let mut s2 = s.clone();
        s2.topics.get_mut(&TopicId::from("Website-Redesign")).unwrap().fields.get_mut("Deadline").unwrap().salience =
            1.5;
        assert_ne!(s.digest(), s2.digest());
    }

    #[test]
    fn edges_reject_self_loops_and_duplicates() {
        let mut s = deadline_state();
        let a = TopicId::from("Website-Redesign");
        s.topics.insert("M".into(), Topic::new("M".into(), "M", ""));
        assert!(!s.add_edge(a.clone(), a.clone(), EdgeKind::Extension, Timestamp::at(1)));
        assert!(s.add_edge(a.clone(), "M".into(), EdgeKind::Extension, Timestamp::at(1)));
        assert!(!s.add_edge(a.clone(), "M".into(), EdgeKind::Extension, Timestamp::at(2)));
        assert!(s.add_edge(a.clone(), "M".into(), EdgeKind::Association, Timestamp::at(2)));
        assert_eq!(s.extension_successors(&a), vec![TopicId::from("M")]);
        assert_eq!(s.associates(&"M".into()), vec![a]);
        s.check_invariants().unwrap();
    }
}
