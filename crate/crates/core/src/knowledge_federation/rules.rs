//! Rule files: one rule per line.
//!
//! ```text
//! rule        = [ name ":" ] condition { "&" condition } "->" consequent ;
//! condition   = predicate comparator number ;
//! comparator  = ">=" | "<=" | "!=" | ">" | "<" | "=" ;
//! consequent  = predicate "=" number ;
//! name        = identifier ;
//! predicate   = identifier ;
//! identifier  = letter { letter | digit | "_" | "." } ;
//! number      = a finite decimal, optional sign and exponent ;
//! ```
//!
//! Whitespace between tokens is ignored. Blank lines and lines starting with
//! `#` are skipped. Unnamed rules are called `rule<line>`. Negated
//! antecedents do not exist in the grammar: absence of a fact would need a
//! private set difference.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::KnowledgeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl Comparison {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::Gt => value > threshold,
            Comparison::Ge => value >= threshold,
            Comparison::Lt => value < threshold,
            Comparison::Le => value <= threshold,
            Comparison::Eq => value == threshold,
            Comparison::Ne => value != threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Eq => "=",
            Comparison::Ne => "!=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub predicate: String,
    pub comparison: Comparison,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consequent {
    pub predicate: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub antecedents: Vec<Condition>,
    pub consequent: Consequent,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.name)?;
        for (i, c) in self.antecedents.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{}{}{}", c.predicate, c.comparison.symbol(), c.threshold)?;
        }
        write!(f, " -> {}={}", self.consequent.predicate, self.consequent.value)
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_number(s: &str, line: usize) -> Result<f64, KnowledgeError> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(KnowledgeError::Parse { line, message: format!("expected a finite number, found {:?}", s.trim()) }),
    }
}

fn parse_condition(s: &str, line: usize) -> Result<Condition, KnowledgeError> {
    // two-character operators first so ">=" is not read as ">"
    const OPS: [(&str, Comparison); 6] = [
        (">=", Comparison::Ge),
        ("<=", Comparison::Le),
        ("!=", Comparison::Ne),
        (">", Comparison::Gt),
        ("<", Comparison::Lt),
        ("=", Comparison::Eq),
    ];
    for (op, cmp) in OPS {
        if let Some(pos) = s.find(op) {
            let predicate = s[..pos].trim();
            if !is_ident(predicate) {
                return Err(KnowledgeError::Parse { line, message: format!("bad predicate name {predicate:?}") });
            }
            return Ok(Condition {
                predicate: predicate.to_string(),
                comparison: cmp,
                threshold: parse_number(&s[pos + op.len()..], line)?,
            });
        }
    }
    Err(KnowledgeError::Parse { line, message: format!("condition {:?} has no comparator", s.trim()) })
}

/// Parses one rule line (without comments).
pub fn parse_rule(text: &str, line: usize) -> Result<Rule, KnowledgeError> {
    let (name, body) = match text.split_once(':') {
        Some((n, b)) => {
            let n = n.trim();
            if !is_ident(n) {
                return Err(KnowledgeError::Parse { line, message: format!("bad rule name {n:?}") });
            }
            (n.to_string(), b)
        }
        None => (format!("rule{line}"), text),
    };
    let (lhs, rhs) = body
        .split_once("->")
        .ok_or_else(|| KnowledgeError::Parse { line, message: "missing \"->\"".into() })?;
    if lhs.trim().is_empty() {
        return Err(KnowledgeError::Parse { line, message: "a rule needs at least one condition".into() });
    }
    let antecedents = lhs.split('&').map(|c| parse_condition(c, line)).collect::<Result<Vec<_>, _>>()?;
    let head = parse_condition(rhs, line)?;
    if head.comparison != Comparison::Eq {
        return Err(KnowledgeError::Parse { line, message: "the consequent must assign with \"=\"".into() });
    }
    Ok(Rule { name, antecedents, consequent: Consequent { predicate: head.predicate, value: head.threshold } })
}

/// Parses a whole rule file. Rule names must be unique.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, KnowledgeError> {
    let mut rules: Vec<Rule> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rule = parse_rule(line, i + 1)?;
        if rules.iter().any(|r| r.name == rule.name) {
            return Err(KnowledgeError::Parse { line: i + 1, message: format!("duplicate rule name {}", rule.name) });
        }
        rules.push(rule);
    }
    Ok(rules)
}
