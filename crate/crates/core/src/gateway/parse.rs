//! Recovering option labels from free-form model replies.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::types::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Exact,
    Recovered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedChoice {
    /// Picked labels in the order they were found.
    pub picks: Vec<Label>,
    pub raw: String,
    pub confidence: Confidence,
}

impl ParsedChoice {
    pub fn failed(raw: &str) -> Self {
        ParsedChoice {
            picks: Vec::new(),
            raw: raw.to_string(),
            confidence: Confidence::Failed,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.confidence == Confidence::Failed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRanking {
    /// Labels from most to least preferred; empty when parsing failed.
    pub order: Vec<Label>,
    pub raw: String,
    pub confidence: Confidence,
}

impl ParsedRanking {
    pub fn failed(raw: &str) -> Self {
        ParsedRanking {
            order: Vec::new(),
            raw: raw.to_string(),
            confidence: Confidence::Failed,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.confidence == Confidence::Failed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Strength {
    /// Followed by '.' or ')'.
    Strong,
    /// Followed by whitespace, other punctuation, or end of text.
    Weak,
}

fn standalone_labels(reply: &str, labels: &[Label]) -> Vec<(Label, Strength)> {
    let chars: Vec<char> = reply.chars().collect();
    let mut out = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        let Some(label) = Label::from_char(c).filter(|l| labels.contains(l)) else {
            continue;
        };
        if i > 0 && chars[i - 1].is_alphanumeric() {
            continue;
        }
        match chars.get(i + 1) {
            Some('.') | Some(')') => out.push((label, Strength::Strong)),
            None => out.push((label, Strength::Weak)),
            Some(next) if !next.is_alphanumeric() && *next != '\'' => out.push((label, Strength::Weak)),
            Some(_) => {}
        }
    }
    out
}

fn push_distinct(into: &mut Vec<Label>, label: Label, limit: usize) {
    if into.len() < limit && !into.contains(&label) {
        into.push(label);
    }
}

/// Extracts `n` picks from a selection reply.
///
/// A reply that opens with `<Label>.` (and, for two picks, names a second
/// label the same way) is exact. Otherwise labels followed by `.`/`)` are
/// collected first, then bare standalone labels, up to `n`.
pub fn parse_choice(reply: &str, labels: &[Label], n: usize) -> ParsedChoice {
    let n = n.max(1);
    if labels.is_empty() {
        return ParsedChoice::failed(reply);
    }
    let found = standalone_labels(reply, labels);
    let trimmed = reply.trim_start();
    let mut lead = trimmed.chars();
    let opener = match (lead.next().and_then(Label::from_char), lead.next()) {
        (Some(l), Some('.')) if labels.contains(&l) => Some(l),
        _ => None,
    };

    if let Some(first) = opener {
        let mut picks = vec![first];
        for &(l, s) in &found {
            if s == Strength::Strong {
                push_distinct(&mut picks, l, n);
            }
        }
        if picks.len() == n {
            return ParsedChoice {
                picks,
                raw: reply.to_string(),
                confidence: Confidence::Exact,
            };
        }
    }

    let mut picks = Vec::new();
    for &(l, s) in &found {
        if s == Strength::Strong {
            push_distinct(&mut picks, l, n);
        }
    }
    for &(l, s) in &found {
        if s == Strength::Weak {
            push_distinct(&mut picks, l, n);
        }
    }
    if picks.is_empty() {
        return ParsedChoice::failed(reply);
    }
    ParsedChoice {
        picks,
        raw: reply.to_string(),
        confidence: Confidence::Recovered,
    }
}

/// Located positions needed before gaps may be filled.
pub const MIN_RANK_POSITIONS: usize = 2;

fn rank_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(\d{1,2})\s*[.)]\s*([A-Z])\b").expect("static pattern"))
}

/// Extracts a full ordering from a ranking reply of the form
/// `1. C. ... 2. A. ...`.
///
/// Positions found in order yield an exact parse. Gaps are filled with the
/// unused labels in label order (recovered). Fewer than two located
/// positions is a failure.
pub fn parse_ranking(reply: &str, labels: &[Label]) -> ParsedRanking {
    let k = labels.len();
    if k == 0 {
        return ParsedRanking::failed(reply);
    }
    let mut slots: Vec<Option<Label>> = vec![None; k];
    let mut in_order = true;
    let mut last_pos = 0usize;
    for cap in rank_pattern().captures_iter(reply) {
        let Ok(pos) = cap[1].parse::<usize>() else { continue };
        let Some(label) = cap[2].chars().next().and_then(Label::from_char) else {
            continue;
        };
        if pos == 0 || pos > k || !labels.contains(&label) {
            continue;
        }
        if slots[pos - 1].is_some() || slots.contains(&Some(label)) {
            continue;
        }
        if pos != last_pos + 1 {
            in_order = false;
        }
        last_pos = pos;
        slots[pos - 1] = Some(label);
    }
    let located = slots.iter().filter(|s| s.is_some()).count();
    if located < k.min(MIN_RANK_POSITIONS) {
        return ParsedRanking::failed(reply);
    }
    let mut unused = labels.iter().copied().filter(|l| !slots.contains(&Some(*l)));
    let order: Vec<Label> = slots
        .iter()
        .map(|s| s.unwrap_or_else(|| unused.next().expect("one unused label per empty slot")))
        .collect();
    let confidence = if located == k && in_order {
        Confidence::Exact
    } else {
        Confidence::Recovered
    };
    ParsedRanking {
        order,
        raw: reply.to_string(),
        confidence,
    }
}
