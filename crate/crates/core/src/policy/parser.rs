//! Hand-written lexer and recursive-descent parser for `.gem` policy files.
//!
//! ```text
//! file      := policy*
//! policy    := POLICY name ON event WHEN cond DO action [WITH evidence = { [ident {, ident}] }]
//! cond      := and {OR and}
//! and       := unary {AND unary}
//! unary     := NOT unary | ( cond ) | atom
//! atom      := EXISTS var
//!            | salience ( target ) < number
//!            | active_footprint > (integer | beta)
//!            | field == name
//!            | topic_archived ( target )
//! action    := flag_for_revision ( target ) | reject_transition ( string )
//!            | attenuate ( target ) | archive ( target ) | noop
//! ```
//! `#` starts a line comment. Keywords are case-sensitive.

use super::{validate_names, Action, Bound, Condition, EventKind, Policy, PolicyError, Target, Var};
use crate::state::TopicId;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Assign,
    EqEq,
    Lt,
    Gt,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) | Tok::Number(s) => s.clone(),
            Tok::Str(s) => format!("\"{s}\""),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
            Tok::LBrace => "{".into(),
            Tok::RBrace => "}".into(),
            Tok::Comma => ",".into(),
            Tok::Assign => "=".into(),
            Tok::EqEq => "==".into(),
            Tok::Lt => "<".into(),
            Tok::Gt => ">".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, PolicyError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    macro_rules! advance {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            advance!();
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                advance!();
            }
            continue;
        }
        let (sl, sc) = (line, col);
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '-') {
                advance!();
            }
            // a trailing '-' is never part of a name
            while i > start + 1 && chars[i - 1] == '-' {
                i -= 1;
                col -= 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            advance!();
            while i < chars.len() && chars[i].is_ascii_digit() {
                advance!();
            }
            if i < chars.len() && chars[i] == '.' {
                advance!();
                while i < chars.len() && chars[i].is_ascii_digit() {
                    advance!();
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                advance!();
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    advance!();
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    advance!();
                }
            }
            Tok::Number(chars[start..i].iter().collect())
        } else if c == '"' {
            advance!();
            let mut s = String::new();
            loop {
                if i >= chars.len() {
                    return Err(PolicyError::Syntax {
                        line: sl,
                        col: sc,
                        expected: "closing quote".into(),
                        found: "end of input".into(),
                    });
                }
                match chars[i] {
                    '"' => {
                        advance!();
                        break;
                    }
                    '\\' => {
                        advance!();
                        let esc = chars.get(i).copied();
                        match esc {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            other => {
                                return Err(PolicyError::Syntax {
                                    line,
                                    col,
                                    expected: "escape sequence".into(),
                                    found: other.map(String::from).unwrap_or_else(|| "end of input".into()),
                                })
                            }
                        }
                        advance!();
                    }
                    ch => {
                        s.push(ch);
                        advance!();
                    }
                }
            }
            Tok::Str(s)
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            if two == "==" {
                advance!();
                advance!();
                Tok::EqEq
            } else {
                let t = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    ',' => Tok::Comma,
                    '=' => Tok::Assign,
                    '<' => Tok::Lt,
                    '>' => Tok::Gt,
                    other => {
                        return Err(PolicyError::Syntax {
                            line,
                            col,
                            expected: "a token".into(),
                            found: other.to_string(),
                        })
                    }
                };
                advance!();
                t
            }
        };
        out.push(Spanned { tok, line: sl, col: sc });
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> PolicyError {
        let t = self.peek();
        PolicyError::Syntax { line: t.line, col: t.col, expected: expected.to_string(), found: t.tok.describe() }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), PolicyError> {
        if self.at_keyword(kw) {
            self.next();
            Ok(())
        } else {
            Err(self.error(kw))
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), PolicyError> {
        if self.peek().tok == tok {
            self.next();
            Ok(())
        } else {
            Err(self.error(&format!("`{}`", tok.describe())))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, PolicyError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            _ => Err(self.error(what)),
        }
    }

    /// An identifier or a quoted string.
    fn name(&mut self, what: &str) -> Result<String, PolicyError> {
        match &self.peek().tok {
            Tok::Ident(s) | Tok::Str(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            _ => Err(self.error(what)),
        }
    }

    fn policy(&mut self) -> Result<Policy, PolicyError> {
        self.keyword("POLICY")?;
        let name = self.ident("policy name")?;
        self.keyword("ON")?;
        let ev = self.peek().clone();
        let ev_name = self.ident("event name")?;
        let on_event = EventKind::parse(&ev_name).ok_or(PolicyError::UnknownEvent {
            line: ev.line,
            col: ev.col,
            name: ev_name.clone(),
        })?;
        self.keyword("WHEN")?;
        let condition = self.condition()?;
        self.keyword("DO")?;
        let action = self.action()?;
        let mut evidence = Vec::new();
        if self.at_keyword("WITH") {
            self.next();
            self.keyword("evidence")?;
            self.expect(Tok::Assign)?;
            self.expect(Tok::LBrace)?;
            if self.peek().tok != Tok::RBrace {
                loop {
                    evidence.push(self.ident("evidence identifier")?);
                    if self.peek().tok == Tok::Comma {
                        self.next();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RBrace)?;
        }
        Ok(Policy { name, on_event, condition, action, evidence })
    }

    fn condition(&mut self) -> Result<Condition, PolicyError> {
        let mut lhs = self.and()?;
        while self.at_keyword("OR") {
            self.next();
            let rhs = self.and()?;
            lhs = Condition::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Condition, PolicyError> {
        let mut lhs = self.unary()?;
        while self.at_keyword("AND") {
            self.next();
            let rhs = self.unary()?;
            lhs = Condition::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Condition, PolicyError> {
        if self.at_keyword("NOT") {
            self.next();
            return Ok(Condition::Not(Box::new(self.unary()?)));
        }
        if self.peek().tok == Tok::LParen {
            self.next();
            let c = self.condition()?;
            self.expect(Tok::RParen)?;
            return Ok(c);
        }
        self.atom()
    }

    fn target(&mut self) -> Result<Target, PolicyError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.next();
                Ok(Var::parse(&s).map(Target::Var).unwrap_or(Target::Topic(TopicId(s))))
            }
            Tok::Str(s) => {
                let s = s.clone();
                self.next();
                Ok(Target::Topic(TopicId(s)))
            }
            _ => Err(self.error("target")),
        }
    }

    fn paren_target(&mut self) -> Result<Target, PolicyError> {
        self.expect(Tok::LParen)?;
        let t = self.target()?;
        self.expect(Tok::RParen)?;
        Ok(t)
    }

    fn atom(&mut self) -> Result<Condition, PolicyError> {
        let head = match &self.peek().tok {
            Tok::Ident(s) => s.clone(),
            _ => return Err(self.error("condition")),
        };
        match head.as_str() {
            "EXISTS" => {
                self.next();
                let t = self.peek().clone();
                let name = self.ident("variable")?;
                let var = Var::parse(&name).ok_or(PolicyError::Syntax {
                    line: t.line,
                    col: t.col,
                    expected: "declared variable".into(),
                    found: name,
                })?;
                Ok(Condition::Exists(var))
            }
            "salience" => {
                self.next();
                let target = self.paren_target()?;
                self.expect(Tok::Lt)?;
                let t = self.peek().clone();
                let threshold = match &t.tok {
                    Tok::Number(n) => n.parse::<f64>().ok().filter(|x| x.is_finite()),
                    _ => None,
                }
                .ok_or_else(|| self.error("number"))?;
                self.next();
                Ok(Condition::SalienceBelow { target, threshold })
            }
            "active_footprint" => {
                self.next();
                self.expect(Tok::Gt)?;
                let bound = match &self.peek().tok {
                    Tok::Number(n) => Bound::Literal(n.parse::<u64>().map_err(|_| self.error("non-negative integer"))?),
                    Tok::Ident(s) if s == "beta" => Bound::Beta,
                    _ => return Err(self.error("integer or `beta`")),
                };
                self.next();
                Ok(Condition::FootprintAbove(bound))
            }
            "field" => {
                self.next();
                self.expect(Tok::EqEq)?;
                Ok(Condition::FieldIs(self.name("field name")?))
            }
            "topic_archived" => {
                self.next();
                Ok(Condition::TopicArchived(self.paren_target()?))
            }
            _ => Err(self.error("condition")),
        }
    }

    fn action(&mut self) -> Result<Action, PolicyError> {
        let t = self.peek().clone();
        let name = self.ident("action")?;
        match name.as_str() {
            "noop" => Ok(Action::Noop),
            "flag_for_revision" => Ok(Action::FlagForRevision(self.paren_target()?)),
            "attenuate" => Ok(Action::Attenuate(self.paren_target()?)),
            "archive" => Ok(Action::Archive(self.paren_target()?)),
            "reject_transition" => {
                self.expect(Tok::LParen)?;
                let msg = match &self.peek().tok {
                    Tok::Str(s) => s.clone(),
                    _ => return Err(self.error("message string")),
                };
                self.next();
                self.expect(Tok::RParen)?;
                Ok(Action::RejectTransition(msg))
            }
            _ => Err(PolicyError::UnknownAction { line: t.line, col: t.col, name }),
        }
    }
}

/// Parses text holding exactly one policy.
pub fn parse_policy(text: &str) -> Result<Policy, PolicyError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let policy = p.policy()?;
    if p.peek().tok != Tok::Eof {
        return Err(p.error("end of input"));
    }
    Ok(policy)
}

/// Parses a policy file: zero or more policies with unique names.
pub fn parse_policies(text: &str) -> Result<Vec<Policy>, PolicyError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let mut out = Vec::new();
    while p.peek().tok != Tok::Eof {
        out.push(p.policy()?);
    }
    validate_names(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_rule_with_empty_evidence() {
        let p = parse_policy("POLICY p ON tick WHEN NOT EXISTS dependent_topic DO noop WITH evidence = {}").unwrap();
        assert_eq!(p.on_event, EventKind::Tick);
        assert_eq!(p.condition, Condition::Not(Box::new(Condition::Exists(Var::DependentTopic))));
        assert_eq!(p.action, Action::Noop);
        assert!(p.evidence.is_empty());
    }

    #[test]
    fn unknown_event_is_named() {
        let err = parse_policy("POLICY p ON bogus_event WHEN EXISTS dependent_topic DO noop").unwrap_err();
        assert_eq!(err, PolicyError::UnknownEvent { line: 1, col: 13, name: "bogus_event".into() });
        assert!(err.to_string().contains("bogus_event"));
    }

    #[test]
    fn unknown_action_is_named() {
        let err = parse_policy("POLICY p ON tick WHEN EXISTS updated_topic DO explode(x)").unwrap_err();
        assert!(matches!(err, PolicyError::UnknownAction { ref name, .. } if name == "explode"));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_policy("POLICY p\n  ON tick\n  WHEN salience(x) < \n  DO noop").unwrap_err();
        match err {
            PolicyError::Syntax { line, col, found, .. } => {
                assert_eq!((line, col), (4, 3));
                assert_eq!(found, "DO");
            }
            other => panic!("{other:?}"),
        }
        let err = parse_policy("policy p ON tick WHEN EXISTS x DO noop").unwrap_err();
        assert_eq!(err.position(), Some((1, 1)));
        let err = parse_policy("POLICY p ON tick WHEN EXISTS nothing DO noop").unwrap_err();
        assert_eq!(err.position(), Some((1, 30)));
        assert!(parse_policy("POLICY p ON tick WHEN EXISTS updated_topic DO reject_transition(\"oops)").is_err());
    }

    #[test]
    fn precedence_and_grouping() {
        let p = parse_policy(
            "POLICY p ON field_updated WHEN field == Deadline OR NOT topic_archived(dependent_topic) AND \
             salience(updated_field) < 0.5 DO flag_for_revision(dependent_topic)",
        )
        .unwrap();
        match p.condition {
            Condition::Or(_, rhs) => assert!(matches!(*rhs, Condition::And(..))),
            other => panic!("{other:?}"),
        }
        let p = parse_policy("POLICY p ON tick WHEN (EXISTS updated_topic OR EXISTS accessed_topic) AND active_footprint > 3 DO noop")
            .unwrap();
        assert!(matches!(p.condition, Condition::And(..)));
    }

    #[test]
    fn comments_and_multiple_policies() {
        let text = "# header\nPOLICY a ON tick WHEN active_footprint > 0 DO attenuate(all) # trailing\n\
                    POLICY b ON pre_commit WHEN active_footprint > beta DO reject_transition(\"cap\")\n";
        let ps = parse_policies(text).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].action, Action::Attenuate(Target::Topic("all".into())));
        assert_eq!(ps[1].condition, Condition::FootprintAbove(Bound::Beta));
        let dup = "POLICY a ON tick WHEN EXISTS updated_topic DO noop\nPOLICY a ON tick WHEN EXISTS updated_topic DO noop";
        assert_eq!(parse_policies(dup).unwrap_err(), PolicyError::DuplicateName("a".into()));
    }

    #[test]
    fn quoted_names() {
        let p = parse_policy(r#"POLICY p ON field_updated WHEN field == "due date" DO archive("Old Topic")"#).unwrap();
        assert_eq!(p.condition, Condition::FieldIs("due date".into()));
        assert_eq!(p.action, Action::Archive(Target::Topic("Old Topic".into())));
        assert_eq!(parse_policy(&p.to_string()).unwrap(), p);
    }
}
