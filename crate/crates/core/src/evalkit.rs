//! Choice accuracy, ranking NDCG/top-1, and the per-task/per-language report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{parse_choice, parse_ranking, Confidence, DecodeSettings, Gateway, LlmRequest, ParsedChoice, ParsedRanking};
use crate::types::{is_permutation, ChoiceQuestion, Label, RankingQuestion, Variant};

pub const RANK_COLUMN: &str = "Rank";
pub const NDCG_LABEL: &str = "NDCG (dense-rank grades)";
pub const TOP_GRADE: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{what}: {questions} questions but {answers} answers")]
    Length {
        what: &'static str,
        questions: usize,
        answers: usize,
    },
    #[error("invalid permutation {0:?} for {1} candidates")]
    Permutation(Vec<usize>, usize),
}

/// Dense-rank grades: the most-liked distinct count gets 4, the next 3, and
/// so on (floored at 0). Ties share a grade.
pub fn grade_relevance(likes: &[u64]) -> Vec<u32> {
    let distinct: BTreeSet<u64> = likes.iter().copied().collect();
    let desc: Vec<u64> = distinct.into_iter().rev().collect();
    likes
        .iter()
        .map(|l| {
            let rank = desc.iter().position(|d| d == l).expect("value present") as u32;
            TOP_GRADE.saturating_sub(rank)
        })
        .collect()
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG of `order` (candidate indices, best first) against per-candidate
/// grades. All-zero grades score 1.
pub fn ndcg(order: &[usize], grades: &[u32]) -> Result<f64, EvalError> {
    if !is_permutation(order, grades.len()) {
        return Err(EvalError::Permutation(order.to_vec(), grades.len()));
    }
    let mut ideal = grades.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter());
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(order.iter().map(|&i| grades[i])) / idcg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChoiceTally {
    pub total: usize,
    pub answered: usize,
    pub failed: usize,
    /// Sum of per-question credit (0/1 under exact-set grading).
    pub credit: f64,
}

impl ChoiceTally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.credit / self.total as f64)
    }
}

/// Credit for one answer: 1 iff the picked set equals the gold set. With
/// `partial`, |picked ∩ gold| / max(|picked|, |gold|).
pub fn choice_credit(q: &ChoiceQuestion, a: &ParsedChoice, partial: bool) -> f64 {
    if a.is_failed() {
        return 0.0;
    }
    let picked: BTreeSet<Label> = a.picks.iter().copied().collect();
    let gold: BTreeSet<Label> = q.gold.iter().copied().collect();
    if picked == gold {
        1.0
    } else if partial {
        picked.intersection(&gold).count() as f64 / picked.len().max(gold.len()) as f64
    } else {
        0.0
    }
}

/// Tallies keyed by variant name (`3T1`, ...).
pub fn score_choice(
    questions: &[ChoiceQuestion],
    answers: &[ParsedChoice],
    partial: bool,
) -> Result<BTreeMap<String, ChoiceTally>, EvalError> {
    if questions.len() != answers.len() {
        return Err(EvalError::Length {
            what: "choice",
            questions: questions.len(),
            answers: answers.len(),
        });
    }
    let mut out: BTreeMap<String, ChoiceTally> = BTreeMap::new();
    for (q, a) in questions.iter().zip(answers) {
        let t = out.entry(q.variant_name()).or_default();
        t.total += 1;
        if a.is_failed() {
            t.failed += 1;
        } else {
            t.answered += 1;
        }
        t.credit += choice_credit(q, a, partial);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RankTally {
    pub total: usize,
    pub answered: usize,
    pub failed: usize,
    pub ndcg_sum: f64,
    pub top1_hits: usize,
}

impl RankTally {
    pub fn ndcg(&self) -> Option<f64> {
        (self.total > 0).then(|| self.ndcg_sum / self.total as f64)
    }

    pub fn top1(&self) -> Option<f64> {
        (self.total > 0).then(|| self.top1_hits as f64 / self.total as f64)
    }
}

/// NDCG and top-1 hit for one answer; `None` when the answer is unusable.
pub fn rank_score(q: &RankingQuestion, a: &ParsedRanking) -> Option<(f64, bool)> {
    if a.is_failed() {
        return None;
    }
    let order: Vec<usize> = a.order.iter().map(|l| l.index()).collect();
    let grades = grade_relevance(&q.likes());
    let value = ndcg(&order, &grades).ok()?;
    let max = grades.iter().copied().max().unwrap_or(0);
    Some((value, grades[order[0]] == max))
}

pub fn score_ranking(questions: &[RankingQuestion], answers: &[ParsedRanking]) -> Result<RankTally, EvalError> {
    if questions.len() != answers.len() {
        return Err(EvalError::Length {
            what: "ranking",
            questions: questions.len(),
            answers: answers.len(),
        });
    }
    let mut t = RankTally::default();
    for (q, a) in questions.iter().zip(answers) {
        t.total += 1;
        match rank_score(q, a) {
            Some((v, hit)) => {
                t.answered += 1;
                t.ndcg_sum += v;
                t.top1_hits += hit as usize;
            }
            None => t.failed += 1,
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceCell {
    pub total: usize,
    pub answered: usize,
    pub failed: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub total: usize,
    pub answered: usize,
    pub failed: usize,
    pub ndcg: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub lang: String,
    pub choice: BTreeMap<String, ChoiceCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankCell>,
    /// Mean of the row's populated columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backend: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub rank_metric: String,
    pub partial_credit: bool,
    /// Table columns in display order.
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn variant_order(name: &str) -> (usize, String) {
    let idx = Variant::ALL.iter().position(|v| v.as_str() == name).unwrap_or(usize::MAX);
    (idx, name.to_string())
}

/// One scored answer, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    /// Variant name or `Rank`.
    pub kind: String,
    pub reply: String,
    pub parsed: Vec<Label>,
    pub confidence: Confidence,
    pub attempts: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub partial_credit: bool,
    /// Extra attempts for replies that fail to parse.
    pub reask: usize,
}

pub struct EvalRun {
    pub report: EvalReport,
    pub answers: Vec<AnswerRecord>,
}

enum Asked<'a> {
    Choice(&'a ChoiceQuestion),
    Rank(&'a RankingQuestion),
}

struct Reply {
    text: String,
    attempts: usize,
    error: Option<String>,
}

fn ask(gateway: &Gateway, prompt: &str, image: Option<&String>, reask: usize, ok: impl Fn(&str) -> bool) -> Reply {
    let image = image.filter(|_| gateway.supports_images()).cloned();
    let mut last = Reply { text: String::new(), attempts: 0, error: None };
    for attempt in 0..=reask {
        let mut decode = DecodeSettings::discrimination();
        if attempt > 0 {
            decode = decode.with_seed(attempt as u64);
        }
        last.attempts = attempt + 1;
        match gateway.complete(&LlmRequest::new(prompt, image.clone(), decode)) {
            Ok(text) => {
                let good = ok(&text);
                last.text = text;
                last.error = None;
                if good {
                    break;
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "question dispatch failed");
                last.error = Some(e.to_string());
            }
        }
    }
    last
}

/// Asks every question, scores the replies and aggregates per
/// (task, language). Transport failures are scored as failed parses.
pub fn run_eval(
    choice: &[ChoiceQuestion],
    ranking: &[RankingQuestion],
    gateway: &Gateway,
    opts: &EvalOptions,
) -> EvalRun {
    let asked: Vec<Asked> = choice.iter().map(Asked::Choice).chain(ranking.iter().map(Asked::Rank)).collect();
    let replies = crate::gateway::map_bounded(&asked, gateway.max_inflight(), |_, a| match a {
        Asked::Choice(q) => {
            let labels = q.labels();
            ask(gateway, &q.stem, q.image_ref.as_ref(), opts.reask, |r| !parse_choice(r, &labels, q.n).is_failed())
        }
        Asked::Rank(q) => {
            let labels = Label::first(q.candidates.len());
            ask(gateway, &q.stem, q.image_ref.as_ref(), opts.reask, |r| !parse_ranking(r, &labels).is_failed())
        }
    });

    type Key = (String, String);
    let mut choice_tallies: BTreeMap<Key, BTreeMap<String, ChoiceTally>> = BTreeMap::new();
    let mut rank_tallies: BTreeMap<Key, RankTally> = BTreeMap::new();
    let mut answers = Vec::with_capacity(asked.len());
    for (a, reply) in asked.iter().zip(replies) {
        match a {
            Asked::Choice(q) => {
                let parsed = if reply.error.is_some() && reply.text.is_empty() {
                    ParsedChoice::failed("")
                } else {
                    parse_choice(&reply.text, &q.labels(), q.n)
                };
                let key = (q.task.as_str().to_string(), q.lang.as_str().to_string());
                let t = score_choice(std::slice::from_ref(q), std::slice::from_ref(&parsed), opts.partial_credit)
                    .expect("aligned");
                let entry = choice_tallies.entry(key).or_default();
                for (variant, tally) in t {
                    let e = entry.entry(variant).or_default();
                    e.total += tally.total;
                    e.answered += tally.answered;
                    e.failed += tally.failed;
                    e.credit += tally.credit;
                }
                answers.push(AnswerRecord {
                    question_id: q.id.clone(),
                    kind: q.variant_name(),
                    score: choice_credit(q, &parsed, opts.partial_credit),
                    parsed: parsed.picks,
                    confidence: parsed.confidence,
                    reply: reply.text,
                    attempts: reply.attempts,
                    error: reply.error,
                });
            }
            Asked::Rank(q) => {
                let parsed = if reply.error.is_some() && reply.text.is_empty() {
                    ParsedRanking::failed("")
                } else {
                    parse_ranking(&reply.text, &Label::first(q.candidates.len()))
                };
                let key = (q.task.as_str().to_string(), q.lang.as_str().to_string());
                let t = rank_tallies.entry(key).or_default();
                t.total += 1;
                let score = match rank_score(q, &parsed) {
                    Some((v, hit)) => {
                        t.answered += 1;
                        t.ndcg_sum += v;
                        t.top1_hits += hit as usize;
                        v
                    }
                    None => {
                        t.failed += 1;
                        0.0
                    }
                };
                answers.push(AnswerRecord {
                    question_id: q.id.clone(),
                    kind: RANK_COLUMN.to_string(),
                    score,
                    parsed: parsed.order,
                    confidence: parsed.confidence,
                    reply: reply.text,
                    attempts: reply.attempts,
                    error: reply.error,
                });
            }
        }
    }

    let mut variants: Vec<String> = choice_tallies.values().flat_map(|m| m.keys().cloned()).collect();
    variants.sort_by_key(|v| variant_order(v));
    variants.dedup();
    let mut columns = variants.clone();
    if !ranking.is_empty() {
        columns.push(RANK_COLUMN.to_string());
    }

    let keys: BTreeSet<Key> = choice_tallies.keys().chain(rank_tallies.keys()).cloned().collect();
    let rows = keys
        .into_iter()
        .map(|key| {
            let choice: BTreeMap<String, ChoiceCell> = choice_tallies
                .get(&key)
                .map(|m| {
                    m.iter()
                        .map(|(v, t)| {
                            (v.clone(), ChoiceCell {
                                total: t.total,
                                answered: t.answered,
                                failed: t.failed,
                                accuracy: t.accuracy().unwrap_or(0.0),
                            })
                        })
                        .collect()
                })
                .unwrap_or_default();
            let rank = rank_tallies.get(&key).map(|t| RankCell {
                total: t.total,
                answered: t.answered,
                failed: t.failed,
                ndcg: t.ndcg().unwrap_or(0.0),
                top1: t.top1().unwrap_or(0.0),
            });
            let mut parts: Vec<f64> = variants.iter().filter_map(|v| choice.get(v).map(|c| c.accuracy)).collect();
            parts.extend(rank.as_ref().map(|r| r.ndcg));
            let avg = (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64);
            ReportRow { task: key.0, lang: key.1, choice, rank, avg }
        })
        .collect();

    EvalRun {
        report: EvalReport {
            backend: gateway.identity().to_string(),
            seed: opts.seed,
            timestamp: None,
            rank_metric: NDCG_LABEL.to_string(),
            partial_credit: opts.partial_credit,
            columns,
            rows,
        },
        answers,
    }
}

/// Fixed-width table with percentages, one row per (task, language).
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<6}{:<6}", "Task", "Lang");
    for c in &report.columns {
        let _ = write!(out, "{c:>8}");
    }
    let _ = writeln!(out, "{:>8}", "Avg.");
    for r in &report.rows {
        let _ = write!(out, "{:<6}{:<6}", r.task, r.lang);
        for c in &report.columns {
            let v = if c == RANK_COLUMN {
                r.rank.as_ref().map(|x| x.ndcg)
            } else {
                r.choice.get(c).map(|x| x.accuracy)
            };
            match v {
                Some(v) => {
                    let _ = write!(out, "{:>8.2}", v * 100.0);
                }
                None => {
                    let _ = write!(out, "{:>8}", "-");
                }
            }
        }
        match r.avg {
            Some(v) => {
                let _ = writeln!(out, "{:>8.2}", v * 100.0);
            }
            None => {
                let _ = writeln!(out, "{:>8}", "-");
            }
        }
    }
    if report.columns.iter().any(|c| c == RANK_COLUMN) {
        let _ = writeln!(out, "{RANK_COLUMN}: {}", report.rank_metric);
    }
    out
}
