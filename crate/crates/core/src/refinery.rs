//! Explorative self-refinement and the candidate/rank/select inference loop.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{render, Family, RenderError, Slots, TemplateId};
use crate::gateway::{map_bounded, parse_choice, parse_ranking, Confidence, DecodeSettings, Gateway, LlmRequest};
use crate::nouns::{sample_condition, NounsError};
use crate::rng::{hash64, substream};
use crate::types::{
    InstructionRecord, Label, Language, NounSet, OogiriSample, ParamsError, Query, RecordKind, RefinementParams,
    Variant,
};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Nouns(#[from] NounsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("no candidate could be generated: {0}")]
    NoCandidates(String),
}

/// Where refinement conditions come from.
#[derive(Debug, Clone, Copy)]
pub enum ConditionPool<'a> {
    /// The corpus-wide noun set.
    Weak(&'a NounSet),
    /// Nouns of each sample's own caption, keyed by sample id.
    Strong(&'a HashMap<String, Vec<String>>),
}

impl ConditionPool<'_> {
    fn for_query(&self, q: &Query) -> Cow<'_, NounSet> {
        match self {
            ConditionPool::Weak(ns) => Cow::Borrowed(*ns),
            ConditionPool::Strong(map) => Cow::Owned(NounSet::from_words(
                q.lang.clone(),
                map.get(&q.id).cloned().unwrap_or_default(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Emitted,
    DiscardedGtr,
    DiscardedDegenerate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: String,
    pub prompt: String,
    pub reply: String,
    pub parse: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidates {
    pub conditions: Vec<Option<String>>,
    /// Distinct non-empty replies in generation order.
    pub candidates: Vec<String>,
    pub failed_slots: Vec<usize>,
    pub trace: Vec<TraceStep>,
}

fn slot_seed(seed: u64, id: &str, slot: usize) -> u64 {
    hash64(&[&seed.to_le_bytes(), id.as_bytes(), &(slot as u64).to_le_bytes()])
}

/// Issues exactly `n` generation calls, the i-th conditioned on `C_i`
/// (GEN template when absent). Replies are deduplicated by trimmed text.
pub fn generate_candidates(
    q: &Query,
    ns: &NounSet,
    params: &RefinementParams,
    gateway: &Gateway,
) -> Result<Candidates, RefineError> {
    params.validate()?;
    let mut rng = substream(params.seed, "refine/conditions", &q.id);
    let conditions: Vec<Option<String>> = (0..params.n)
        .map(|_| sample_condition(ns, &q.lang, params.rho, &mut rng))
        .collect::<Result<_, _>>()?;
    let mut requests = Vec::with_capacity(params.n);
    for (i, c) in conditions.iter().enumerate() {
        let tid = TemplateId::gen(q.task, c.is_some());
        let slots = c.as_deref().map(Slots::condition).unwrap_or_default();
        let prompt = render(tid, q, &slots)?;
        let decode = DecodeSettings::generation().with_seed(slot_seed(params.seed, &q.id, i));
        requests.push(LlmRequest::new(prompt, image_for(q, gateway), decode));
    }
    let replies = gateway.complete_batch(&requests);
    let mut out = Candidates {
        conditions,
        candidates: Vec::new(),
        failed_slots: Vec::new(),
        trace: Vec::new(),
    };
    for (i, (req, reply)) in requests.iter().zip(replies).enumerate() {
        let (reply, parse) = match reply {
            Ok(text) => {
                let t = text.trim().to_string();
                if t.is_empty() {
                    out.failed_slots.push(i);
                    (text, "empty".to_string())
                } else if out.candidates.contains(&t) {
                    (text, "duplicate".to_string())
                } else {
                    out.candidates.push(t);
                    (text, "ok".to_string())
                }
            }
            Err(e) => {
                out.failed_slots.push(i);
                (String::new(), format!("error: {e}"))
            }
        };
        out.trace.push(TraceStep {
            stage: format!("generate[{i}]"),
            prompt: req.prompt.clone(),
            reply,
            parse,
        });
    }
    Ok(out)
}

fn image_for(q: &Query, gateway: &Gateway) -> Option<String> {
    q.image_ref.clone().filter(|_| gateway.supports_images() || !q.task.needs_image())
}

struct Ranked {
    order: Vec<usize>,
    step: TraceStep,
}

fn rank(q: &Query, candidates: &[String], gateway: &Gateway) -> Result<Result<Ranked, (String, TraceStep)>, RefineError> {
    let tid = TemplateId::new(q.task, Family::Rank)?;
    let prompt = render(tid, q, &Slots::options(candidates))?;
    let req = LlmRequest::new(prompt.clone(), image_for(q, gateway), DecodeSettings::discrimination());
    let labels = Label::first(candidates.len());
    let (reply, parsed) = match gateway.complete(&req) {
        Ok(r) => {
            let p = parse_ranking(&r, &labels);
            (r, Ok(p))
        }
        Err(e) => (String::new(), Err(format!("rank call failed: {e}"))),
    };
    let describe = |c: Confidence| format!("{c:?}").to_lowercase();
    match parsed {
        Ok(p) if !p.is_failed() => Ok(Ok(Ranked {
            order: p.order.iter().map(|l| l.index()).collect(),
            step: TraceStep {
                stage: "rank".into(),
                prompt,
                reply,
                parse: format!(
                    "{} {}",
                    describe(p.confidence),
                    p.order.iter().map(Label::to_string).collect::<String>()
                ),
            },
        })),
        Ok(_) => Ok(Err((
            "rank parse failed".into(),
            TraceStep { stage: "rank".into(), prompt, reply, parse: "failed".into() },
        ))),
        Err(reason) => Ok(Err((
            reason.clone(),
            TraceStep { stage: "rank".into(), prompt, reply, parse: reason },
        ))),
    }
}

fn select(
    q: &Query,
    options: &[String],
    variant: Variant,
    gateway: &Gateway,
) -> Result<(Option<usize>, TraceStep, Option<String>), RefineError> {
    let tid = TemplateId::new(q.task, Family::Select(variant))?;
    let prompt = render(tid, q, &Slots::options(options))?;
    let req = LlmRequest::new(prompt.clone(), image_for(q, gateway), DecodeSettings::discrimination());
    match gateway.complete(&req) {
        Ok(reply) => {
            let p = parse_choice(&reply, &Label::first(options.len()), 1);
            let pick = p.picks.first().map(|l| l.index());
            let parse = match pick {
                Some(i) => format!("{} {}", format!("{:?}", p.confidence).to_lowercase(), Label::new(i).expect("label")),
                None => "failed".into(),
            };
            let reason = pick.is_none().then(|| "select parse failed".to_string());
            Ok((pick, TraceStep { stage: "select".into(), prompt, reply, parse }, reason))
        }
        Err(e) => {
            let reason = format!("select call failed: {e}");
            Ok((None, TraceStep { stage: "select".into(), prompt, reply: String::new(), parse: reason.clone() }, Some(reason)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub sample_ref: String,
    pub conditions: Vec<Option<String>>,
    pub candidates: Vec<String>,
    /// Positions in `candidates`, best first.
    pub ranked_top2: Vec<Label>,
    /// Selection options as shown; `permutation[pos]` is 0/1 for the ranked
    /// candidates and 2 for the ground truth.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection_options: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub permutation: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_choice: Option<String>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emitted_record: Option<InstructionRecord>,
    pub calls: usize,
    pub trace: Vec<TraceStep>,
}

impl RefinementOutcome {
    fn degenerate(sample_ref: &str, gen: Candidates, reason: impl Into<String>) -> Self {
        RefinementOutcome {
            sample_ref: sample_ref.to_string(),
            conditions: gen.conditions,
            candidates: gen.candidates,
            ranked_top2: Vec::new(),
            selection_options: Vec::new(),
            permutation: Vec::new(),
            final_choice: None,
            verdict: Verdict::DiscardedDegenerate,
            reason: Some(reason.into()),
            emitted_record: None,
            calls: 0,
            trace: gen.trace,
        }
    }
}

/// Refines one sample: generate, rank, mix the top two with the most-liked
/// ground truth, select. A ground-truth pick discards the sample.
pub fn refine_sample(
    s: &OogiriSample,
    pool: ConditionPool<'_>,
    params: &RefinementParams,
    gateway: &Gateway,
    round: u32,
) -> Result<RefinementOutcome, RefineError> {
    let q = s.query();
    let Some(gtr) = s.top_response().map(|r| r.text.trim().to_string()) else {
        return Ok(RefinementOutcome::degenerate(&s.id, Candidates {
            conditions: Vec::new(),
            candidates: Vec::new(),
            failed_slots: Vec::new(),
            trace: Vec::new(),
        }, "sample has no ground-truth response"));
    };
    let mut gen = generate_candidates(&q, &pool.for_query(&q), params, gateway)?;
    gen.candidates.retain(|c| !s.has_response_text(c));
    let finish = |mut o: RefinementOutcome| {
        o.calls = o.trace.len();
        o
    };
    if gen.candidates.len() < 2 {
        let n = gen.candidates.len();
        return Ok(finish(RefinementOutcome::degenerate(
            &s.id,
            gen,
            format!("{n} distinct candidate(s) survived"),
        )));
    }

    let ranked = match rank(&q, &gen.candidates, gateway)? {
        Ok(r) => r,
        Err((reason, step)) => {
            gen.trace.push(step);
            return Ok(finish(RefinementOutcome::degenerate(&s.id, gen, reason)));
        }
    };
    gen.trace.push(ranked.step);
    let top2 = [ranked.order[0], ranked.order[1]];

    let mut permutation = vec![0usize, 1, 2];
    permutation.shuffle(&mut substream(params.seed, "refine/select", &s.id));
    let mixed = [gen.candidates[top2[0]].clone(), gen.candidates[top2[1]].clone(), gtr];
    let options: Vec<String> = permutation.iter().map(|&p| mixed[p].clone()).collect();
    let (pick, step, reason) = select(&q, &options, Variant::ThreeT1, gateway)?;
    gen.trace.push(step);
    let ranked_top2 = top2.iter().map(|&i| Label::new(i).expect("label")).collect();
    let Some(pick) = pick else {
        let mut o = RefinementOutcome::degenerate(&s.id, gen, reason.unwrap_or_default());
        o.ranked_top2 = ranked_top2;
        o.selection_options = options;
        o.permutation = permutation;
        return Ok(finish(o));
    };
    let final_choice = options[pick].clone();
    let is_gtr = s.has_response_text(&final_choice);
    let emitted_record = if is_gtr {
        None
    } else {
        let tid = TemplateId::gen(s.task, false);
        Some(InstructionRecord {
            id: format!("{}/refine/r{round}", s.id),
            kind: RecordKind::Gen,
            prompt: render(tid, &q, &Slots::default())?,
            condition: None,
            image_ref: s.image_ref.clone(),
            target: final_choice.clone(),
            meta: [
                ("sample", s.id.clone()),
                ("template", tid.name()),
                ("origin", "refine".to_string()),
                ("round", round.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        })
    };
    Ok(finish(RefinementOutcome {
        sample_ref: s.id.clone(),
        conditions: gen.conditions,
        candidates: gen.candidates,
        ranked_top2,
        selection_options: options,
        permutation,
        final_choice: Some(final_choice),
        verdict: if is_gtr { Verdict::DiscardedGtr } else { Verdict::Emitted },
        reason: None,
        emitted_record,
        calls: 0,
        trace: gen.trace,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub round: u32,
    pub samples: usize,
    pub base: usize,
    pub emitted: usize,
    pub discarded_gtr: usize,
    pub discarded_degenerate: usize,
    pub degenerate_reasons: BTreeMap<String, usize>,
    pub errors: Vec<String>,
    pub emission_rate: f64,
    pub condition_empty_rate: f64,
    pub merged: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Refined {
    pub merged: Vec<InstructionRecord>,
    pub outcomes: Vec<RefinementOutcome>,
    pub stats: RefineStats,
}

/// Highest `round` recorded in the records' metadata (0 when none).
pub fn last_round(records: &[InstructionRecord]) -> u32 {
    records
        .iter()
        .filter_map(|r| r.meta.get("round").and_then(|v| v.parse().ok()))
        .max()
        .unwrap_or(0)
}

/// Refines every sample and appends emitted records to `base`. Samples run
/// concurrently under the gateway cap; outcomes keep input order.
pub fn refine_corpus(
    samples: &[OogiriSample],
    pool: ConditionPool<'_>,
    params: &RefinementParams,
    gateway: &Gateway,
    base: Vec<InstructionRecord>,
) -> Result<Refined, RefineError> {
    params.validate()?;
    let round = last_round(&base) + 1;
    let results = map_bounded(samples, gateway.max_inflight(), |_, s| refine_sample(s, pool, params, gateway, round));
    let mut stats = RefineStats {
        round,
        samples: samples.len(),
        base: base.len(),
        ..Default::default()
    };
    let mut merged = base;
    let mut outcomes = Vec::with_capacity(samples.len());
    let (mut empty, mut total) = (0usize, 0usize);
    for (s, r) in samples.iter().zip(results) {
        let o = match r {
            Ok(o) => o,
            Err(e) => {
                stats.errors.push(format!("{}: {e}", s.id));
                RefinementOutcome::degenerate(&s.id, Candidates {
                    conditions: Vec::new(),
                    candidates: Vec::new(),
                    failed_slots: Vec::new(),
                    trace: Vec::new(),
                }, e.to_string())
            }
        };
        total += o.conditions.len();
        empty += o.conditions.iter().filter(|c| c.is_none()).count();
        match o.verdict {
            Verdict::Emitted => stats.emitted += 1,
            Verdict::DiscardedGtr => stats.discarded_gtr += 1,
            Verdict::DiscardedDegenerate => {
                stats.discarded_degenerate += 1;
                let reason = o.reason.clone().unwrap_or_default();
                let key = reason.split(':').next().unwrap_or_default().to_string();
                *stats.degenerate_reasons.entry(key).or_default() += 1;
            }
        }
        if let Some(rec) = &o.emitted_record {
            merged.push(rec.clone());
        }
        outcomes.push(o);
    }
    stats.emission_rate = if samples.is_empty() { 0.0 } else { stats.emitted as f64 / samples.len() as f64 };
    stats.condition_empty_rate = if total == 0 { 0.0 } else { empty as f64 / total as f64 };
    stats.merged = merged.len();
    Ok(Refined { merged, outcomes, stats })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferResult {
    pub response: String,
    pub candidates: Vec<String>,
    pub conditions: Vec<Option<String>>,
    /// Set when a shortcut was taken: a single surviving candidate, or a
    /// ranking/selection reply that could not be parsed.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_reason: Option<String>,
    pub trace: Vec<TraceStep>,
}

/// Inference: generate `n` conditioned candidates, rank them, then select
/// the better of the top two.
pub fn clot_infer(
    q: &Query,
    ns: &NounSet,
    params: &RefinementParams,
    gateway: &Gateway,
) -> Result<InferResult, RefineError> {
    let mut gen = generate_candidates(q, ns, params, gateway)?;
    let mut result = InferResult {
        response: String::new(),
        candidates: gen.candidates.clone(),
        conditions: gen.conditions.clone(),
        degraded: false,
        degraded_reason: None,
        trace: Vec::new(),
    };
    match gen.candidates.len() {
        0 => {
            let why = gen.trace.iter().map(|t| t.parse.as_str()).collect::<Vec<_>>().join("; ");
            return Err(RefineError::NoCandidates(why));
        }
        1 => {
            result.response = gen.candidates[0].clone();
            result.degraded = true;
            result.degraded_reason = Some("single surviving candidate".into());
            result.trace = gen.trace;
            return Ok(result);
        }
        _ => {}
    }
    let top2 = match rank(q, &gen.candidates, gateway)? {
        Ok(r) => {
            gen.trace.push(r.step);
            [r.order[0], r.order[1]]
        }
        Err((reason, step)) => {
            gen.trace.push(step);
            result.degraded = true;
            result.degraded_reason = Some(reason);
            [0, 1]
        }
    };
    let options = vec![gen.candidates[top2[0]].clone(), gen.candidates[top2[1]].clone()];
    let (pick, step, reason) = select(q, &options, Variant::TwoT1, gateway)?;
    gen.trace.push(step);
    result.response = match pick {
        Some(i) => options[i].clone(),
        None => {
            result.degraded = true;
            result.degraded_reason = reason;
            options[0].clone()
        }
    };
    result.trace = gen.trace;
    Ok(result)
}

/// Convenience for building a bare query (no responses) for inference.
pub fn query(id: &str, task: crate::types::TaskType, lang: Language, image_ref: Option<String>, text: Option<String>) -> Query {
    Query {
        id: id.to_string(),
        task,
        lang,
        image_ref,
        question_text: text,
    }
}
