//! Dependency rule table: how a change to one field shows up in a
//! dependent field of an extension-linked topic.
//!
//! One rule per line: `cause_topic.field -> dependent_topic.field : transform`.
//! Either topic may be `*`. `#` starts a comment.

use serde::{Deserialize, Serialize};

use crate::state::{TopicId, UnitKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// Append the dependent's value annotated with the cause's new value.
    ShiftAnnotation,
}

impl Transform {
    pub fn as_str(self) -> &'static str {
        match self {
            Transform::ShiftAnnotation => "shift-annotation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "shift-annotation" => Some(Transform::ShiftAnnotation),
            _ => None,
        }
    }

    pub fn apply(self, current: &str, cause: &UnitKey, cause_value: &str) -> String {
        match self {
            Transform::ShiftAnnotation => {
                let base = current.split(ANNOTATION).next().unwrap_or(current);
                format!("{base}{ANNOTATION}{cause} changed to {cause_value})")
            }
        }
    }
}

const ANNOTATION: &str = " (needs review: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyRule {
    /// `None` matches any topic.
    pub cause_topic: Option<TopicId>,
    pub cause_field: String,
    pub dependent_topic: Option<TopicId>,
    pub dependent_field: String,
    pub transform: Transform,
}

impl DependencyRule {
    pub fn matches_cause(&self, cause: &UnitKey) -> bool {
        self.cause_field == cause.field && self.cause_topic.as_ref().is_none_or(|t| t == &cause.topic)
    }

    pub fn matches_dependent(&self, topic: &TopicId) -> bool {
        self.dependent_topic.as_ref().is_none_or(|t| t == topic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RuleTable {
    pub rules: Vec<DependencyRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct RuleError {
    pub line: usize,
    pub message: String,
}

fn split_unit(s: &str, line: usize) -> Result<(Option<TopicId>, String), RuleError> {
    let (topic, field) = s
        .trim()
        .split_once('.')
        .ok_or_else(|| RuleError { line, message: format!("expected topic.field, found `{}`", s.trim()) })?;
    let (topic, field) = (topic.trim(), field.trim());
    if topic.is_empty() || field.is_empty() {
        return Err(RuleError { line, message: format!("empty topic or field in `{}`", s.trim()) });
    }
    Ok((if topic == "*" { None } else { Some(TopicId(topic.to_string())) }, field.to_string()))
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (lhs, rest) = content
                .split_once("->")
                .ok_or_else(|| RuleError { line, message: "missing `->`".into() })?;
            let (rhs, transform) = rest
                .rsplit_once(':')
                .ok_or_else(|| RuleError { line, message: "missing `: transform`".into() })?;
            let transform = Transform::parse(transform.trim())
                .ok_or_else(|| RuleError { line, message: format!("unknown transform `{}`", transform.trim()) })?;
            let (cause_topic, cause_field) = split_unit(lhs, line)?;
            let (dependent_topic, dependent_field) = split_unit(rhs, line)?;
            rules.push(DependencyRule { cause_topic, cause_field, dependent_topic, dependent_field, transform });
        }
        Ok(Self { rules })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            let ct = r.cause_topic.as_ref().map(|t| t.as_str()).unwrap_or("*");
            let dt = r.dependent_topic.as_ref().map(|t| t.as_str()).unwrap_or("*");
            out.push_str(&format!(
                "{ct}.{} -> {dt}.{} : {}\n",
                r.cause_field,
                r.dependent_field,
                r.transform.as_str()
            ));
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules triggered by `cause` that target fields of `dependent`.
    pub fn matching<'a>(&'a self, cause: &'a UnitKey, dependent: &'a TopicId) -> impl Iterator<Item = &'a DependencyRule> {
        self.rules.iter().filter(move |r| r.matches_cause(cause) && r.matches_dependent(dependent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "# fig 1\nWebsite-Redesign.Deadline -> Milestones.Launch : shift-annotation\n*.Budget -> *.Forecast : shift-annotation # any\n";
        let t = RuleTable::parse(text).unwrap();
        assert_eq!(t.rules.len(), 2);
        assert_eq!(t.rules[1].cause_topic, None);
        assert_eq!(RuleTable::parse(&t.render()).unwrap(), t);
        let cause = UnitKey::new("Website-Redesign", "Deadline");
        assert_eq!(t.matching(&cause, &"Milestones".into()).count(), 1);
        assert_eq!(t.matching(&cause, &"Other".into()).count(), 0);
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(RuleTable::parse("a.b -> c.d").unwrap_err().line, 1);
        assert!(RuleTable::parse("\na.b -> c.d : warp").unwrap_err().message.contains("warp"));
        assert!(RuleTable::parse("ab -> c.d : shift-annotation").is_err());
    }

    #[test]
    fn annotation_replaces_previous_annotation() {
        let cause = UnitKey::new("Website-Redesign", "Deadline");
        let once = Transform::ShiftAnnotation.apply("March 22", &cause, "April 20");
        assert_eq!(once, "March 22 (needs review: Website-Redesign.Deadline changed to April 20)");
        let twice = Transform::ShiftAnnotation.apply(&once, &cause, "May 1");
        assert_eq!(twice, "March 22 (needs review: Website-Redesign.Deadline changed to May 1)");
    }
}
