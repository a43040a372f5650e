//! Whole-corpus formulation.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::build::{
    build_choice, build_mask, build_ranking, choice_materials, formulate_generation, ranked_gtrs, ranking_record,
    selection_record,
};
use super::providers::DistractorProviders;
use crate::gateway::map_bounded;
use crate::nouns::NounExtractor;
use crate::rng::substream;
use crate::types::{ChoiceQuestion, InstructionRecord, Language, NounSet, OogiriSample, RankingQuestion, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulateParams {
    pub rho_c: f64,
    pub mask_prob: f64,
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl Default for FormulateParams {
    fn default() -> Self {
        FormulateParams {
            rho_c: 0.5,
            mask_prob: 0.5,
            variants: Variant::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FormulateStats {
    pub samples: usize,
    pub records: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub by_task: BTreeMap<String, usize>,
    pub by_lang: BTreeMap<String, usize>,
    pub choice_by_variant: BTreeMap<String, usize>,
    pub ranking_questions: usize,
    /// Records per input sample.
    pub amplification: f64,
    pub condition_fallbacks: usize,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Formulated {
    pub records: Vec<InstructionRecord>,
    pub choice: Vec<ChoiceQuestion>,
    pub ranking: Vec<RankingQuestion>,
    pub stats: FormulateStats,
}

struct PoolEntry {
    owner: usize,
    text: String,
}

/// Draws an unrelated answer for sample `idx` from the same-language pool,
/// skipping entries owned by the sample or equal to any of its texts.
fn draw_unrelated<R: Rng + ?Sized>(
    pool: &[PoolEntry],
    idx: usize,
    own: &[&str],
    rng: &mut R,
) -> Option<String> {
    if pool.is_empty() {
        return None;
    }
    let ok = |e: &PoolEntry| e.owner != idx && !own.contains(&e.text.trim());
    let start = rng.gen_range(0..pool.len());
    (0..pool.len())
        .map(|k| &pool[(start + k) % pool.len()])
        .find(|e| ok(e))
        .map(|e| e.text.clone())
}

/// Emits generation, mask, ranking and (with providers) selection records,
/// plus the choice and ranking question sets. Per-sample failures are
/// reported in the stats and never abort the run.
pub fn formulate_corpus(
    samples: &[OogiriSample],
    extractor: &dyn NounExtractor,
    ns: &NounSet,
    providers: Option<&dyn DistractorProviders>,
    params: &FormulateParams,
) -> Formulated {
    let mut out = Formulated::default();
    let stats = &mut out.stats;
    stats.samples = samples.len();
    if providers.is_none() && !samples.is_empty() && !params.variants.is_empty() {
        stats.warnings.push("no distractor providers: SELECT records and choice questions skipped".into());
    }

    let captions: Vec<Option<String>> = match providers {
        Some(p) => map_bounded(samples, 8, |_, s| match p.caption(s) {
            Ok(c) => Some(c.trim().to_string()),
            Err(e) => {
                tracing::warn!(sample = %s.id, error = %e, "caption unavailable");
                None
            }
        }),
        None => vec![None; samples.len()],
    };
    let mut pools: HashMap<&Language, Vec<PoolEntry>> = HashMap::new();
    if providers.is_some() {
        for (i, s) in samples.iter().enumerate() {
            let pool = pools.entry(&s.lang).or_default();
            if let Some(c) = &captions[i] {
                pool.push(PoolEntry { owner: i, text: c.clone() });
            }
            if let Some(g) = ranked_gtrs(s).into_iter().next() {
                pool.push(PoolEntry { owner: i, text: g });
            }
        }
    }

    for (i, s) in samples.iter().enumerate() {
        macro_rules! fail {
            ($stage:expr, $e:expr) => {
                stats.errors.push(format!("{} [{}]: {}", s.id, $stage, $e))
            };
        }

        let mut rng = substream(params.seed, "formulate/gen", &s.id);
        match formulate_generation(s, extractor, ns, params.rho_c, &mut rng) {
            Ok(g) => {
                stats.condition_fallbacks += g.fallbacks;
                out.records.extend(g.records);
            }
            Err(e) => fail!("gen", e),
        }

        if s.task != crate::types::TaskType::ImageTextToText {
            let mut rng = substream(params.seed, "formulate/mask", &s.id);
            match build_mask(s, extractor, params.mask_prob, &mut rng) {
                Ok(Some(r)) => out.records.push(r),
                Ok(None) => {}
                Err(e) => fail!("mask", e),
            }
        }

        let mut rng = substream(params.seed, "formulate/rank", &s.id);
        match build_ranking(s, &mut rng) {
            Ok(Some(q)) => {
                out.records.push(ranking_record(&q));
                out.ranking.push(q);
            }
            Ok(None) => {}
            Err(e) => fail!("rank", e),
        }

        let (Some(p), Some(caption)) = (providers, &captions[i]) else {
            if providers.is_some() {
                fail!("select", "caption unavailable");
            }
            continue;
        };
        if params.variants.is_empty() {
            continue;
        }
        let own: Vec<&str> = s.responses.iter().map(|r| r.text.trim()).chain([caption.as_str()]).collect();
        let mut rng = substream(params.seed, "formulate/unrelated", &s.id);
        let unrelated = draw_unrelated(pools.get(&s.lang).map(Vec::as_slice).unwrap_or(&[]), i, &own, &mut rng);
        let mat = match choice_materials(s, caption.clone(), p, unrelated) {
            Ok(m) => m,
            Err(e) => {
                fail!("select", e);
                continue;
            }
        };
        for &v in &params.variants {
            let mut rng = substream(params.seed, &format!("formulate/choice/{v}"), &s.id);
            match build_choice(s, v, &mat, &mut rng) {
                Ok(q) => {
                    out.records.push(selection_record(&q));
                    *stats.choice_by_variant.entry(v.to_string()).or_default() += 1;
                    out.choice.push(q);
                }
                Err(e) => fail!(v.as_str(), e),
            }
        }
    }

    stats.records = out.records.len();
    stats.ranking_questions = out.ranking.len();
    let by_id: HashMap<&str, &OogiriSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for r in &out.records {
        *stats.by_kind.entry(r.kind.as_str().to_string()).or_default() += 1;
        if let Some(s) = r.meta.get("sample").and_then(|id| by_id.get(id.as_str())) {
            *stats.by_task.entry(s.task.as_str().to_string()).or_default() += 1;
            *stats.by_lang.entry(s.lang.as_str().to_string()).or_default() += 1;
        }
    }
    stats.amplification = if samples.is_empty() {
        0.0
    } else {
        out.records.len() as f64 / samples.len() as f64
    };
    out
}
