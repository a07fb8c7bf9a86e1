//! Deterministic, model-free text embedding (signed feature hashing) and
//! topic routing.

use serde::{Deserialize, Serialize};

use crate::operators::FactBundle;
use crate::par::{self, Parallelism};
use crate::state::{MemoryState, TopicId};

pub const DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    components: Vec<f64>,
    norm: f64,
}

impl Default for Embedding {
    fn default() -> Self {
        Self::zero()
    }
}

impl Embedding {
    pub fn zero() -> Self {
        Self { components: vec![0.0; DIM], norm: 0.0 }
    }

    pub fn from_components(components: Vec<f64>) -> Self {
        assert_eq!(components.len(), DIM, "embedding dimension");
        let norm = components.iter().map(|c| c * c).sum::<f64>().sqrt();
        Self { components, norm }
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn embed(text: &str) -> Embedding {
    let mut components = vec![0.0; DIM];
    for tok in tokens(text) {
        let h = fnv1a64(tok.as_bytes());
        let bucket = (h % DIM as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        components[bucket] += sign;
    }
    Embedding::from_components(components)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    if a.norm == 0.0 || b.norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.components.iter().zip(&b.components).map(|(x, y)| x * y).sum();
    (dot / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

/// Title of a topic created from free text: the segment before `|`, or the
/// first few words.
pub fn derive_title(text: &str) -> String {
    let head = match text.split_once('|') {
        Some((head, _)) => head,
        None => text.split_once(':').map(|(h, _)| h).unwrap_or(text),
    };
    let words: Vec<&str> = head.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).take(4).collect();
    if words.is_empty() {
        "Topic".to_string()
    } else {
        words.join(" ")
    }
}

/// Identifier slug for a title: alphanumeric words joined by `-`.
pub fn slug(title: &str) -> String {
    let words: Vec<&str> = title.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    if words.is_empty() {
        "Topic".to_string()
    } else {
        words.join("-")
    }
}

/// A slug not yet used by any topic in `state`.
pub fn fresh_topic_id(state: &MemoryState, title: &str) -> TopicId {
    let base = slug(title);
    let first = TopicId(base.clone());
    if !state.topics.contains_key(&first) {
        return first;
    }
    (2..)
        .map(|n| TopicId(format!("{base}-{n}")))
        .find(|id| !state.topics.contains_key(id))
        .expect("unbounded suffix search")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Route {
    ExistingTopic { id: TopicId, score: f64 },
    /// Create a topic; `id` is set when the caller named a topic that does not exist yet.
    NewTopic { id: Option<TopicId> },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RouteError {
    #[error("topic hint `{0}` refers to an archived topic")]
    ArchivedHint(TopicId),
}

/// Host-topic selection. Engines depend only on this trait.
pub trait Router: Send + Sync {
    fn select_host(&self, state: &MemoryState, bundle: &FactBundle, threshold: f64) -> Result<Route, RouteError>;
}

/// Best cosine match between the bundle text and live topic embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddingRouter;

impl Router for EmbeddingRouter {
    fn select_host(&self, state: &MemoryState, bundle: &FactBundle, threshold: f64) -> Result<Route, RouteError> {
        select_host(state, bundle, threshold)
    }
}

/// Cosine of `text` against every live topic, in topic id order.
pub fn topic_scores<'a>(mode: Parallelism, state: &'a MemoryState, text: &str) -> Vec<(f64, &'a TopicId)> {
    let q = embed(text);
    let live: Vec<_> = state.topics.values().filter(|t| !t.archived).collect();
    par::map_with(mode, &live, |t| (cosine(&q, &t.embedding), &t.id))
}

pub fn select_host(state: &MemoryState, bundle: &FactBundle, threshold: f64) -> Result<Route, RouteError> {
    if let Some(hint) = &bundle.topic_hint {
        return match state.topics.get(hint) {
            Some(t) if t.archived => Err(RouteError::ArchivedHint(hint.clone())),
            Some(_) => Ok(Route::ExistingTopic { id: hint.clone(), score: 1.0 }),
            None => Ok(Route::NewTopic { id: Some(hint.clone()) }),
        };
    }
    let scored = topic_scores(Parallelism::Parallel, state, &bundle.text);
    // topics iterate in id order, so keeping the first maximum breaks ties by smallest id
    let best = scored.into_iter().fold(None::<(f64, &TopicId)>, |best, (s, id)| match best {
        Some((bs, _)) if bs >= s => best,
        _ => Some((s, id)),
    });
    Ok(match best {
        Some((score, id)) if score >= threshold => Route::ExistingTopic { id: id.clone(), score },
        _ => Route::NewTopic { id: None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Topic;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let e = embed("");
        assert_eq!(e.norm(), 0.0);
        assert!(e.components().iter().all(|c| *c == 0.0));
        assert_eq!(e.components().len(), DIM);
    }

    #[test]
    fn embedding_is_deterministic() {
        assert_eq!(embed("Website Redesign deadline"), embed("Website Redesign deadline"));
        assert_eq!(embed("Website Redesign deadline"), embed("website, REDESIGN; deadline"));
    }

    #[test]
    fn paraphrase_similarity() {
        let c = cosine(&embed("website redesign deadline"), &embed("deadline of the website redesign"));
        // three shared tokens over norms sqrt(3) and sqrt(5), absent bucket collisions
        assert!((c - 3.0 / 15f64.sqrt()).abs() < 1e-12, "{c}");
        assert!(c > 0.7);
    }

    #[test]
    fn cosine_conventions() {
        let v = embed("alpha beta");
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v, &Embedding::zero()), 0.0);
    }

    #[test]
    fn titles_and_slugs() {
        assert_eq!(derive_title("Website Redesign | Deadline: March 15"), "Website Redesign");
        assert_eq!(derive_title("Discussed lunch preferences"), "Discussed lunch preferences");
        assert_eq!(derive_title("Budget: 12k"), "Budget");
        assert_eq!(slug("Website Redesign"), "Website-Redesign");
        let mut s = MemoryState::default();
        s.topics.insert("Website-Redesign".into(), Topic::new("Website-Redesign".into(), "Website Redesign", ""));
        assert_eq!(fresh_topic_id(&s, "Website Redesign"), TopicId::from("Website-Redesign-2"));
    }

    fn bundle(text: &str, hint: Option<&str>) -> FactBundle {
        FactBundle {
            facts: vec![crate::operators::Fact::new("Deadline", "April 20")],
            text: text.to_string(),
            topic_hint: hint.map(TopicId::from),
            ..Default::default()
        }
    }

    #[test]
    fn routing() {
        let mut s = MemoryState::default();
        assert_eq!(select_host(&s, &bundle("anything", None), 0.35).unwrap(), Route::NewTopic { id: None });
        s.topics.insert(
            "Website-Redesign".into(),
            Topic::new("Website-Redesign".into(), "Website Redesign", "Website Redesign | Deadline: March 15"),
        );
        match select_host(&s, &bundle("Website Redesign | Deadline UPDATED: April 20", None), 0.35).unwrap() {
            Route::ExistingTopic { id, score } => {
                assert_eq!(id.as_str(), "Website-Redesign");
                assert!(score >= 0.35);
            }
            other => panic!("{other:?}"),
        }
        s.topics.get_mut(&TopicId::from("Website-Redesign")).unwrap().archived = true;
        assert!(select_host(&s, &bundle("x", Some("Website-Redesign")), 0.35).is_err());
        assert_eq!(
            select_host(&s, &bundle("x", Some("Milestones")), 0.35).unwrap(),
            Route::NewTopic { id: Some("Milestones".into()) }
        );
    }

    #[test]
    fn tie_breaks_to_smallest_id() {
        let mut s = MemoryState::default();
        for id in ["b-topic", "a-topic"] {
            s.topics.insert(id.into(), Topic::new(id.into(), "Same Title", "same summary"));
        }
        match select_host(&s, &bundle("same title summary", None), 0.1).unwrap() {
            Route::ExistingTopic { id, .. } => assert_eq!(id.as_str(), "a-topic"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            let (ea, eb) = (embed(&a), embed(&b));
            let (x, y) = (cosine(&ea, &eb), cosine(&eb, &ea));
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
            let recomputed = ea.components().iter().map(|c| c * c).sum::<f64>().sqrt();
            prop_assert!((recomputed - ea.norm()).abs() < 1e-9);
        }
    }
}
