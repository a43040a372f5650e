//! Turning samples into instruction records and evaluation questions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use super::providers::{DistractorProviders, ProviderError};
use super::templates::{render, Family, RenderError, Slots, TemplateId};
use crate::nouns::{find_noun, response_nouns, NounExtractor, NounsError};
use crate::types::{
    ChoiceQuestion, InstructionRecord, Label, NounSet, OogiriSample, RankCandidate, RankingQuestion, RecordKind,
    TaskType, Variant, MASK_TOKEN, RANK_CANDIDATES,
};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Nouns(#[from] NounsError),
    #[error("sample {sample}: {source}")]
    Provider {
        sample: String,
        #[source]
        source: ProviderError,
    },
    #[error("sample {0}: insufficient GTRs")]
    InsufficientGtrs(String),
    #[error("sample {0}: no unrelated answer available")]
    NoUnrelated(String),
    #[error("sample {sample}: option text `{text}` appears twice")]
    DuplicateOption { sample: String, text: String },
    #[error("{0}")]
    Argument(String),
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Output of [`formulate_generation`].
#[derive(Debug, Clone, Default)]
pub struct Generation {
    pub records: Vec<InstructionRecord>,
    /// Conditioned draws that fell back to GEN for lack of nouns.
    pub fallbacks: usize,
}

/// One generation record per response: GEN with probability `rho_c`, else
/// GEN_COND conditioned on a noun of that response.
pub fn formulate_generation<R: Rng + ?Sized>(
    s: &OogiriSample,
    extractor: &dyn NounExtractor,
    ns: &NounSet,
    rho_c: f64,
    rng: &mut R,
) -> Result<Generation, ForgeError> {
    if !(0.0..=1.0).contains(&rho_c) {
        return Err(ForgeError::Argument(format!("rho_c must lie in [0, 1] (got {rho_c})")));
    }
    let q = s.query();
    let mut out = Generation::default();
    for (i, r) in s.responses.iter().enumerate() {
        let unconditioned = rng.gen::<f64>() < rho_c;
        let condition = if unconditioned {
            None
        } else {
            let nouns = response_nouns(extractor, ns, &r.text, &s.lang)?;
            if nouns.is_empty() {
                out.fallbacks += 1;
                None
            } else {
                Some(nouns[rng.gen_range(0..nouns.len())].clone())
            }
        };
        let tid = TemplateId::gen(s.task, condition.is_some());
        let slots = match &condition {
            Some(c) => Slots::condition(c),
            None => Slots::default(),
        };
        let prompt = render(tid, &q, &slots)?;
        out.records.push(InstructionRecord {
            id: format!("{}/gen/{i}", s.id),
            kind: if condition.is_some() { RecordKind::GenCond } else { RecordKind::Gen },
            prompt,
            condition,
            image_ref: s.image_ref.clone(),
            target: r.text.trim().to_string(),
            meta: meta(&[("sample", s.id.clone()), ("template", tid.name()), ("response", i.to_string())]),
        });
    }
    Ok(out)
}

/// Distractor texts gathered once per sample and shared across variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChoiceMaterials {
    pub gtr: String,
    pub gtr2: Option<String>,
    pub caption: String,
    pub unrelated: Option<String>,
    pub rewrite: String,
}

/// Distinct ground-truth texts ordered by likes.
pub fn ranked_gtrs(s: &OogiriSample) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for i in s.by_likes() {
        let t = s.responses[i].text.trim();
        if !t.is_empty() && !out.iter().any(|o| o == t) {
            out.push(t.to_string());
        }
    }
    out
}

/// Construction slot order: GTR, caption, unrelated, rewrite, second GTR.
pub const SLOT_GTR: usize = 0;
pub const SLOT_CAPTION: usize = 1;
pub const SLOT_UNRELATED: usize = 2;
pub const SLOT_REWRITE: usize = 3;
pub const SLOT_GTR2: usize = 4;

/// Slots holding ground-truth responses for a variant.
pub fn gold_slots(v: Variant) -> &'static [usize] {
    if v.picks() == 2 {
        &[SLOT_GTR, SLOT_GTR2]
    } else {
        &[SLOT_GTR]
    }
}

pub fn choice_materials(
    s: &OogiriSample,
    caption: String,
    providers: &dyn DistractorProviders,
    unrelated: Option<String>,
) -> Result<ChoiceMaterials, ForgeError> {
    let gtrs = ranked_gtrs(s);
    let Some(gtr) = gtrs.first().cloned() else {
        return Err(ForgeError::InsufficientGtrs(s.id.clone()));
    };
    let rewrite = providers.rewrite(&gtr).map_err(|source| ForgeError::Provider {
        sample: s.id.clone(),
        source,
    })?;
    Ok(ChoiceMaterials {
        gtr,
        gtr2: gtrs.get(1).cloned(),
        caption,
        unrelated,
        rewrite,
    })
}

/// Builds an mTn question from the recipe's first m slots, shuffled.
pub fn build_choice<R: Rng + ?Sized>(
    s: &OogiriSample,
    variant: Variant,
    mat: &ChoiceMaterials,
    rng: &mut R,
) -> Result<ChoiceQuestion, ForgeError> {
    let m = variant.options();
    let mut slots: Vec<String> = vec![mat.gtr.clone(), mat.caption.clone()];
    if m >= 3 {
        slots.push(mat.unrelated.clone().ok_or_else(|| ForgeError::NoUnrelated(s.id.clone()))?);
    }
    if m >= 4 {
        slots.push(mat.rewrite.clone());
    }
    if m >= 5 {
        slots.push(mat.gtr2.clone().ok_or_else(|| ForgeError::InsufficientGtrs(s.id.clone()))?);
    }
    for (i, a) in slots.iter().enumerate() {
        if a.trim().is_empty() {
            return Err(ForgeError::Argument(format!("sample {}: empty option in slot {i}", s.id)));
        }
        if slots[..i].iter().any(|b| b.trim() == a.trim()) {
            return Err(ForgeError::DuplicateOption {
                sample: s.id.clone(),
                text: a.clone(),
            });
        }
    }
    let mut permutation: Vec<usize> = (0..m).collect();
    permutation.shuffle(rng);
    let options: Vec<String> = permutation.iter().map(|&slot| slots[slot].clone()).collect();
    let gold: Vec<Label> = permutation
        .iter()
        .enumerate()
        .filter(|(_, slot)| gold_slots(variant).contains(slot))
        .map(|(pos, _)| Label::new(pos).expect("at most five options"))
        .collect();
    let tid = TemplateId::new(s.task, Family::Select(variant))?;
    let stem = render(tid, &s.query(), &Slots::options(&options))?;
    Ok(ChoiceQuestion {
        id: format!("{}/{variant}", s.id),
        task: s.task,
        lang: s.lang.clone(),
        m,
        n: variant.picks(),
        stem,
        options,
        gold,
        permutation,
        image_ref: s.image_ref.clone(),
        sample_ref: s.id.clone(),
        meta: meta(&[("variant", variant.to_string())]),
    })
}

/// Training target for a selection question: one `L. text` line per gold label.
pub fn selection_target(q: &ChoiceQuestion) -> String {
    let mut gold = q.gold.clone();
    gold.sort();
    gold.iter()
        .map(|l| format!("{l}. {}", q.option_text(*l).unwrap_or_default()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn selection_record(q: &ChoiceQuestion) -> InstructionRecord {
    InstructionRecord {
        id: format!("{}/select", q.id),
        kind: RecordKind::Select,
        prompt: q.stem.clone(),
        condition: None,
        image_ref: q.image_ref.clone(),
        target: selection_target(q),
        meta: meta(&[
            ("sample", q.sample_ref.clone()),
            ("template", TemplateId { task: q.task, family: Family::Select(Variant::from_shape(q.m, q.n).unwrap_or(Variant::ThreeT1)) }.name()),
            ("permutation", format!("{:?}", q.permutation)),
        ]),
    }
}

/// Ranking question over the five most-liked distinct responses. Candidates
/// are presented in a shuffled order; `gold_order` sorts them by likes with
/// ties kept in the sample's original order. Absent with fewer than five
/// liked responses.
pub fn build_ranking<R: Rng + ?Sized>(s: &OogiriSample, rng: &mut R) -> Result<Option<RankingQuestion>, ForgeError> {
    let mut chosen: Vec<usize> = Vec::new();
    for i in s.by_likes() {
        let r = &s.responses[i];
        let (Some(likes), text) = (r.likes, r.text.trim()) else { continue };
        if likes < 0 || text.is_empty() || chosen.iter().any(|&j| s.responses[j].text.trim() == text) {
            continue;
        }
        chosen.push(i);
        if chosen.len() == RANK_CANDIDATES {
            break;
        }
    }
    if chosen.len() < RANK_CANDIDATES {
        return Ok(None);
    }
    let mut shown = chosen.clone();
    shown.shuffle(rng);
    let candidates: Vec<RankCandidate> = shown
        .iter()
        .map(|&i| RankCandidate {
            text: s.responses[i].text.trim().to_string(),
            likes: s.responses[i].likes.unwrap_or(0) as u64,
        })
        .collect();
    let mut gold_order: Vec<usize> = (0..RANK_CANDIDATES).collect();
    gold_order.sort_by_key(|&p| (std::cmp::Reverse(candidates[p].likes), shown[p]));
    let options: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let tid = TemplateId::new(s.task, Family::Rank)?;
    let stem = render(tid, &s.query(), &Slots::options(&options))?;
    Ok(Some(RankingQuestion {
        id: format!("{}/rank", s.id),
        task: s.task,
        lang: s.lang.clone(),
        stem,
        candidates,
        gold_order,
        image_ref: s.image_ref.clone(),
        sample_ref: s.id.clone(),
    }))
}

/// `1. C. text. 2. A. text. ...` for the given order over `options`.
pub fn ranking_answer(order: &[usize], options: &[String]) -> String {
    order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let label = Label::new(i).expect("option index within label range");
            format!("{}. {label}. {}.", rank + 1, options[i].trim().trim_end_matches('.'))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn ranking_record(q: &RankingQuestion) -> InstructionRecord {
    let options: Vec<String> = q.candidates.iter().map(|c| c.text.clone()).collect();
    InstructionRecord {
        id: q.id.clone(),
        kind: RecordKind::Rank,
        prompt: q.stem.clone(),
        condition: None,
        image_ref: q.image_ref.clone(),
        target: ranking_answer(&q.gold_order, &options),
        meta: meta(&[
            ("sample", q.sample_ref.clone()),
            ("template", TemplateId { task: q.task, family: Family::Rank }.name()),
        ]),
    }
}

/// With probability `mask_prob`, masks one noun of the most-liked response.
pub fn build_mask<R: Rng + ?Sized>(
    s: &OogiriSample,
    extractor: &dyn NounExtractor,
    mask_prob: f64,
    rng: &mut R,
) -> Result<Option<InstructionRecord>, ForgeError> {
    if s.task == TaskType::ImageTextToText {
        return Err(ForgeError::Argument(format!("sample {}: mask records need an I2T or T2T sample", s.id)));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(ForgeError::Argument(format!("mask probability must lie in [0, 1] (got {mask_prob})")));
    }
    if rng.gen::<f64>() >= mask_prob {
        return Ok(None);
    }
    let Some(top) = s.top_response() else { return Ok(None) };
    let text = top.text.trim();
    let mut nouns: Vec<String> = Vec::new();
    for n in extractor.extract(text, &s.lang)? {
        if !nouns.contains(&n) {
            nouns.push(n);
        }
    }
    if nouns.is_empty() {
        return Ok(None);
    }
    let noun = &nouns[rng.gen_range(0..nouns.len())];
    let Some((start, end)) = find_noun(text, noun, &s.lang) else { return Ok(None) };
    let masked = format!("{}{MASK_TOKEN}{}", &text[..start], &text[end..]);
    let tid = TemplateId::new(s.task, Family::Mask)?;
    let prompt = render(tid, &s.query(), &Slots::masked(&masked))?;
    Ok(Some(InstructionRecord {
        id: format!("{}/mask", s.id),
        kind: RecordKind::Mask,
        prompt,
        condition: None,
        image_ref: s.image_ref.clone(),
        target: text[start..end].to_string(),
        meta: meta(&[("sample", s.id.clone()), ("template", tid.name()), ("masked_answer", masked)]),
    }))
}
