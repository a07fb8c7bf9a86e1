//! Scripted workloads: a JSON-lines step format, a runner that drives
//! either system through it, and a seeded generator of random workloads.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::CrudSystem;
use crate::config::{Beta, EngineParams, Settings};
use crate::engine::{Engine, EngineEvent, Journal, Outcome};
use crate::operators::rules::RuleTable;
use crate::operators::{Fact, FactBundle, Query, QueryMode, RetrievalOutput};
use crate::policy;
use crate::state::{Tier, TopicId, UnitKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Ingest(FactBundle),
    Query {
        #[serde(flatten)]
        query: Query,
        /// Value the answer is expected to carry.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect: Option<String>,
    },
    Tick {
        #[serde(default = "one")]
        count: u32,
    },
    Assert(Assertion),
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Assertion {
    CurrentValue { topic: TopicId, field: String, value: String },
    Tier { topic: TopicId, field: String, tier: Tier },
    Archived { topic: TopicId },
    FootprintLe { bound: usize },
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct WorkloadError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Workload {
    pub steps: Vec<Step>,
}

impl Workload {
    /// One JSON object per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let step = serde_json::from_str(line).map_err(|e| WorkloadError { line: i + 1, message: e.to_string() })?;
            steps.push(step);
        }
        Ok(Self { steps })
    }

    /// 1-based file line of each step `parse` would produce from `text`.
    pub fn step_lines(text: &str) -> Vec<usize> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| {
                let l = l.trim();
                !l.is_empty() && !l.starts_with('#')
            })
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn render(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).expect("step serializes") + "\n").collect()
    }

    /// Default-mode queries, for use as audit probes.
    pub fn probes(&self) -> Vec<Query> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for s in &self.steps {
            if let Step::Query { query, .. } = s {
                if query.mode == QueryMode::Default && seen.insert(serde_json::to_string(query).expect("query")) {
                    out.push(query.clone());
                }
            }
        }
        out
    }

    pub fn event_count(&self) -> usize {
        self.steps
            .iter()
            .map(|s| match s {
                Step::Tick { count } => *count as usize,
                Step::Assert(_) => 0,
                _ => 1,
            })
            .sum()
    }
}

/// What the runner needs from a memory system.
pub trait MemorySystem {
    fn submit(&mut self, event: EngineEvent) -> (Option<RetrievalOutput>, Outcome);
    fn journal(&self) -> &Journal;
    fn footprint(&self) -> usize;
    fn clock(&self) -> u64;
    fn check(&self, a: &Assertion) -> Result<(), String>;
}

impl MemorySystem for Engine {
    fn submit(&mut self, event: EngineEvent) -> (Option<RetrievalOutput>, Outcome) {
        let s = Engine::submit(self, event);
        (s.output, s.outcome)
    }

    fn journal(&self) -> &Journal {
        Engine::journal(self)
    }

    fn footprint(&self) -> usize {
        self.state().active_footprint()
    }

    fn clock(&self) -> u64 {
        self.state().clock.tick
    }

    fn check(&self, a: &Assertion) -> Result<(), String> {
        let s = self.state();
        match a {
            Assertion::CurrentValue { topic, field, value } => match s.current_value(topic, field) {
                Some((v, ..)) if &v == value => Ok(()),
                other => Err(format!("{topic}.{field} is {:?}, expected `{value}`", other.map(|o| o.0))),
            },
            Assertion::Tier { topic, field, tier } => {
                let f = s.field(&UnitKey { topic: topic.clone(), field: field.clone() });
                match f {
                    Some(f) if f.tier == *tier => Ok(()),
                    Some(f) => Err(format!("{topic}.{field} is {:?}, expected {tier:?}", f.tier)),
                    None => Err(format!("{topic}.{field} does not exist")),
                }
            }
            Assertion::Archived { topic } => match s.topics.get(topic) {
                Some(t) if t.archived => Ok(()),
                Some(_) => Err(format!("{topic} is not archived")),
                None => Err(format!("{topic} does not exist")),
            },
            Assertion::FootprintLe { bound } => {
                let fp = s.active_footprint();
                if fp <= *bound {
                    Ok(())
                } else {
                    Err(format!("footprint {fp} exceeds {bound}"))
                }
            }
        }
    }
}

impl MemorySystem for CrudSystem {
    fn submit(&mut self, event: EngineEvent) -> (Option<RetrievalOutput>, Outcome) {
        CrudSystem::submit(self, event)
    }

    fn journal(&self) -> &Journal {
        CrudSystem::journal(self)
    }

    fn footprint(&self) -> usize {
        self.store().footprint()
    }

    fn clock(&self) -> u64 {
        self.store().clock.tick
    }

    fn check(&self, a: &Assertion) -> Result<(), String> {
        match a {
            Assertion::CurrentValue { topic, field, value } => {
                let hits = self.store().lookup(&UnitKey { topic: topic.clone(), field: field.clone() });
                match hits.last() {
                    Some((_, f)) if &f.value == value => Ok(()),
                    other => Err(format!("{topic}.{field} is {:?}, expected `{value}`", other.map(|o| &o.1.value))),
                }
            }
            Assertion::FootprintLe { bound } => {
                let fp = self.store().footprint();
                if fp <= *bound {
                    Ok(())
                } else {
                    Err(format!("footprint {fp} exceeds {bound}"))
                }
            }
            // tiers and archival do not exist in the baseline
            Assertion::Tier { .. } | Assertion::Archived { .. } => Ok(()),
        }
    }
}

/// One query step as the runner saw it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub step: usize,
    pub tick: u64,
    pub query: Query,
    pub expect: Option<String>,
    pub answers: Vec<String>,
    pub outcome: Outcome,
    pub footprint: usize,
    /// Answers to the asked field that differ from the expected value.
    pub stale_answers: usize,
    /// 1 when an expected value was not among the answers.
    pub lost_answers: usize,
    pub salience_delta_sum: f64,
}

impl QueryResult {
    pub fn met(&self) -> bool {
        self.expect.is_none() || self.lost_answers == 0 && self.stale_answers == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub queries: Vec<QueryResult>,
    /// (step, message) for every failed assertion.
    pub failed_assertions: Vec<(usize, String)>,
    pub aborted: usize,
}

impl RunReport {
    pub fn all_met(&self) -> bool {
        self.failed_assertions.is_empty() && self.queries.iter().all(QueryResult::met)
    }
}

pub fn run<S: MemorySystem>(system: &mut S, workload: &Workload) -> RunReport {
    let mut report = RunReport::default();
    for (i, step) in workload.steps.iter().enumerate() {
        match step {
            Step::Ingest(b) => {
                if !system.submit(EngineEvent::Ingest(b.clone())).1.is_committed() {
                    report.aborted += 1;
                }
            }
            Step::Tick { count } => {
                for _ in 0..*count {
                    system.submit(EngineEvent::Tick);
                }
            }
            Step::Query { query, expect } => {
                let (out, outcome) = system.submit(EngineEvent::Retrieve(query.clone()));
                if !outcome.is_committed() {
                    report.aborted += 1;
                }
                let out = out.unwrap_or_default();
                let delta = if outcome.is_committed() { salience_gain(system, &out) } else { 0.0 };
                let (stale, lost) = match expect {
                    Some(v) => {
                        let stale = out.answers.iter().filter(|a| &a.value != v).count();
                        let lost = usize::from(!out.answers.iter().any(|a| &a.value == v));
                        (stale, lost)
                    }
                    None => (0, 0),
                };
                report.queries.push(QueryResult {
                    step: i,
                    tick: system.clock(),
                    query: query.clone(),
                    expect: expect.clone(),
                    answers: out.answers.iter().map(|a| a.value.clone()).collect(),
                    outcome,
                    footprint: system.footprint(),
                    stale_answers: stale,
                    lost_answers: lost,
                    salience_delta_sum: delta,
                });
            }
            Step::Assert(a) => {
                if let Err(msg) = system.check(a) {
                    report.failed_assertions.push((i, msg));
                }
            }
        }
    }
    report
}

/// Salience the read added, taken from the journaled deltas of the last
/// retrieve record.
fn salience_gain<S: MemorySystem>(system: &S, out: &RetrievalOutput) -> f64 {
    let accessed: BTreeSet<&UnitKey> = out.accessed_units.iter().collect();
    system
        .journal()
        .entries
        .iter()
        .rev()
        .find(|e| e.record.output.is_some())
        .map(|e| {
            e.record
                .deltas
                .iter()
                .filter_map(|d| match d {
                    crate::engine::Delta::SalienceChanged { unit, from, to } if accessed.contains(unit) => Some(to - from),
                    _ => None,
                })
                // an empty f64 sum is -0.0, which would print as "-0"
                .fold(0.0, |acc, d| acc + d)
        })
        .unwrap_or(0.0)
}

/// Runs the engine through `workload`.
pub fn run_gem(settings: Settings, workload: &Workload) -> Result<(Engine, RunReport), crate::engine::EngineError> {
    let mut engine = Engine::new(settings)?;
    let report = run(&mut engine, workload);
    Ok((engine, report))
}

pub fn run_crud(settings: Settings, workload: &Workload) -> (CrudSystem, RunReport) {
    let mut crud = CrudSystem::new(settings);
    let report = run(&mut crud, workload);
    (crud, report)
}

pub fn header_rules() -> RuleTable {
    RuleTable::parse(GENERATED_RULES).expect("built-in rules parse")
}

const GENERATED_RULES: &str = "*.Deadline -> *.Launch : shift-annotation\n*.Budget -> *.Risk : shift-annotation\n";

const TITLES: &[&str] = &[
    "Website Redesign",
    "Mobile App",
    "Data Pipeline",
    "Hiring Plan",
    "Office Move",
    "Security Audit",
    "Customer Portal",
    "Vendor Contract",
    "Marketing Campaign",
    "Cloud Migration",
    "Design System",
    "Quarterly Review",
    "Support Rotation",
    "Billing Service",
    "Partner Summit",
    "Search Ranking",
];

const FIELDS: &[&str] = &["Deadline", "Owner", "Budget", "Status", "Launch", "Risk", "Priority", "Location"];

const VALUES: &[&str] = &[
    "March 15", "April 20", "May 2", "June 30", "Alice", "Bo", "Chen", "Dana", "50k", "80k", "120k", "green",
    "amber", "red", "high", "low", "Berlin", "Austin", "blocked", "done",
];

const TAGS: &[&str] = &["alice", "vendor", "legal"];

/// Shape of a generated workload.
#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub events: usize,
    /// Number of distinct topics drawn from.
    pub topics: usize,
    pub beta: Beta,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { events: 120, topics: 10, beta: Beta::Constant(40) }
    }
}

/// Settings generated workloads run under: default policies, the built-in
/// dependency rules and the configured bound.
pub fn generated_settings(cfg: &GenConfig) -> Settings {
    // a looser duplicate threshold so generated near-copies actually merge
    let params = EngineParams { beta: cfg.beta, duplicate_threshold: 0.6, ..Default::default() };
    Settings::new(params, &policy::default_policy_set(), &header_rules())
}

/// A deterministic random workload. Ingests are routed or hinted and may
/// link topics; queries use every mode; ticks come in short runs.
pub fn generate(seed: u64, cfg: &GenConfig) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let titles: Vec<&str> = TITLES.iter().copied().cycle().take(cfg.topics.max(1)).collect();
    let title_of = |i: usize| -> String {
        if i < TITLES.len() {
            titles[i].to_string()
        } else {
            format!("{} {}", titles[i], i / TITLES.len() + 1)
        }
    };
    let id_of = |title: &str| crate::embed::slug(title);
    // topics created under their own id, safe to link to
    let mut known: Vec<usize> = Vec::new();
    let mut written: Vec<(usize, &str)> = Vec::new();
    let mut steps = Vec::new();
    let mut events = 0;
    while events < cfg.events {
        let roll: f64 = rng.gen();
        let t = rng.gen_range(0..titles.len());
        let title = title_of(t);
        if roll < 0.45 {
            let n = rng.gen_range(1..=2);
            let fields: Vec<&str> = FIELDS.choose_multiple(&mut rng, n).copied().collect();
            let facts: Vec<Fact> = fields
                .iter()
                .map(|f| Fact::new(*f, *VALUES.choose(&mut rng).expect("values")).from_source(format!("session-{seed}")))
                .collect();
            let text = format!(
                "{title} | {}",
                facts.iter().map(|f| format!("{}: {}", f.field, f.value)).collect::<Vec<_>>().join("; ")
            );
            let mut b = FactBundle::new(text, facts);
            if rng.gen_bool(0.6) {
                b.topic_hint = Some(TopicId(id_of(&title)));
                if !known.contains(&t) {
                    known.push(t);
                }
                if rng.gen_bool(0.2) {
                    if let Some(&o) = known.iter().filter(|&&o| o != t).collect::<Vec<_>>().choose(&mut rng).copied() {
                        if rng.gen_bool(0.7) {
                            b.extends.push(TopicId(id_of(&title_of(o))));
                        } else {
                            b.associates.push(TopicId(id_of(&title_of(o))));
                        }
                    }
                }
            }
            for f in &fields {
                written.push((t, f));
            }
            steps.push(Step::Ingest(b));
        } else if roll < 0.47 {
            // a second topic about the same thing, or a field under a variant name
            let Some(&(wt, wf)) = written.choose(&mut rng) else { continue };
            let wtitle = title_of(wt);
            let value = *VALUES.choose(&mut rng).expect("values");
            let b = if rng.gen_bool(0.5) {
                FactBundle::new(format!("{wtitle} | {wf}: {value}"), vec![Fact::new(wf, value)])
                    .hinted(format!("{}-Notes", id_of(&wtitle)))
            } else {
                let variant = wf.to_lowercase();
                let b = FactBundle::new(format!("{wtitle} | {variant}: {value}"), vec![Fact::new(&variant, value)]);
                if !known.contains(&wt) {
                    known.push(wt);
                }
                b.hinted(id_of(&wtitle))
            };
            steps.push(Step::Ingest(b));
        } else if roll < 0.54 {
            // restate something already said, or tag facts about one entity
            if let Some(&(wt, wf)) = written.choose(&mut rng) {
                let wtitle = title_of(wt);
                let tag = *TAGS.choose(&mut rng).expect("tags");
                let facts = vec![
                    Fact::new(wf, *VALUES.choose(&mut rng).expect("values")),
                    Fact::new(format!("{} Role", capitalize(tag)), "reviewer").tagged(tag),
                    Fact::new(format!("{} Email", capitalize(tag)), format!("{tag}@example.com")).tagged(tag),
                    Fact::new(format!("{} Team", capitalize(tag)), *VALUES.choose(&mut rng).expect("values")).tagged(tag),
                ];
                let text = format!("{wtitle} | {wf} and {tag} contact details");
                let b = FactBundle { topic_hint: Some(TopicId(id_of(&wtitle))), ..FactBundle::new(text, facts) };
                if !known.contains(&wt) {
                    known.push(wt);
                }
                steps.push(Step::Ingest(b));
            } else {
                continue;
            }
        } else if roll < 0.82 {
            let field = *FIELDS.choose(&mut rng).expect("fields");
            let q = match rng.gen_range(0..10) {
                0 => match written.choose(&mut rng) {
                    Some(&(wt, wf)) if known.contains(&wt) => Query::explicit(id_of(&title_of(wt)), wf),
                    _ => Query::text(format!("{} {title}", field.to_lowercase())),
                },
                1 => Query::historical(format!("{field} {title}"), None),
                2 if !known.is_empty() => Query {
                    text: title.clone(),
                    mode: QueryMode::Structural {
                        root: TopicId(id_of(&title_of(*known.choose(&mut rng).expect("known")))),
                        depth: rng.gen_range(1..=3),
                    },
                    explicit: None,
                },
                _ => Query::text(format!("what is the {} of {title}", field.to_lowercase())),
            };
            steps.push(Step::Query { query: q, expect: None });
        } else {
            let count = rng.gen_range(1..=3);
            steps.push(Step::Tick { count });
            events += count as usize;
            continue;
        }
        events += 1;
    }
    Workload { steps }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A long ingest-only stream over many distinct topics, used to push the
/// engine against a small bound. Every 10th event is a tick.
pub fn ingest_stream(seed: u64, ingests: usize) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    for i in 0..ingests {
        let topic = format!("Item {i} {}", TITLES[i % TITLES.len()]);
        let field = *FIELDS.choose(&mut rng).expect("fields");
        let value = *VALUES.choose(&mut rng).expect("values");
        let b = FactBundle::new(format!("{topic} | {field}: {value}"), vec![Fact::new(field, value)])
            .hinted(crate::embed::slug(&topic));
        steps.push(Step::Ingest(b));
        if i % 10 == 9 {
            steps.push(Step::Tick { count: 1 });
        }
    }
    Workload { steps }
}
