//! Acceptance checks. One PASS/FAIL line per criterion; exits nonzero on
//! any failure.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clot_core::evalkit::{self, EvalOptions, EvalReport};
use clot_core::forge::{
    self, build_choice, choice_materials, formulate_generation, render, DistractorProviders, Family,
    FormulateParams, Slots, SyntheticProviders, TemplateId,
};
use clot_core::gateway::{
    parse_choice, parse_ranking, Confidence, FnBackend, Gateway, GatewayError, LlmRequest, TranscriptEntry,
};
use clot_core::jsonl::{self, schema, Header};
use clot_core::nouns::LexiconExtractor;
use clot_core::refinery::{self, ConditionPool, Verdict};
use clot_core::rng::{hash64, substream};
use clot_core::sidequests::{self, EmbeddingTable};
use clot_core::{
    ChoiceQuestion, Label, Language, NounSet, OogiriSample, Query, RankingQuestion, RecordKind, RefinementParams,
    Response, TaskType, Variant,
};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, Check); 8] = [
        ("template goldens", Duration::from_secs(1), template_goldens),
        ("sampling statistics", Duration::from_secs(5), sampling_statistics),
        ("choice-question construction", Duration::from_secs(5), choice_construction),
        ("NDCG oracle", Duration::from_secs(5), ndcg_oracle),
        ("refinement contract", Duration::from_secs(10), refinement_contract),
        ("parser robustness", Duration::from_secs(30), parser_robustness),
        ("end-to-end determinism", Duration::from_secs(120), end_to_end),
        ("DAT/CGG", Duration::from_secs(5), dat_cgg),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, bound, check) in criteria {
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let took = started.elapsed();
        let result = match result {
            Ok(detail) if took > bound => Err(format!("{detail}; took {took:.2?}, bound {bound:?}")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({took:.2?})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- goldens

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/goldens")
}

fn golden(name: &str) -> String {
    let text = std::fs::read_to_string(golden_dir().join(format!("{name}.txt"))).expect("golden file");
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

fn golden_query(task: TaskType) -> Query {
    Query {
        id: "golden".into(),
        task,
        lang: Language::En,
        image_ref: Some("img/golden.jpg".into()),
        question_text: Some(match task {
            TaskType::ImageTextToText => "Good morning, [MASK]!".into(),
            _ => "What did the alarm clock say?".into(),
        }),
    }
}

fn ordinal_options(k: usize) -> Vec<String> {
    ["first", "second", "third", "fourth", "fifth"][..k].iter().map(|w| format!("{w} option")).collect()
}

fn template_goldens() -> Result<String, String> {
    let families = TemplateId::families();
    ensure!(families.len() == 14, "{} template families", families.len());
    let (five, three) = (ordinal_options(5), ordinal_options(3));
    let mut all = String::new();
    for tid in families {
        let slots = match tid.family {
            Family::Gen => Slots::default(),
            Family::Cond => Slots::condition("banana"),
            Family::Rank => Slots::options(&five),
            Family::Select(_) => Slots::options(&three),
            Family::Mask => Slots::masked("The [MASK] ate my homework"),
        };
        let got = render(tid, &golden_query(tid.task), &slots).map_err(|e| format!("{tid}: {e}"))?;
        let want = golden(&tid.name());
        ensure!(got == want, "{} differs from its golden", tid.name());
        all.push_str(&want);
    }
    for phrase in [
        "think of a sentence that is unexpected and humorous",
        "ranking the humorousness of the options from high to low",
        "Option id. Option content",
        "denoted by [MASK]",
    ] {
        ensure!(all.contains(phrase), "missing phrase `{phrase}`");
    }
    Ok("14/14 families byte-identical, 4 key phrases present".into())
}

// ---------------------------------------------------------------- sampling

fn echo_gateway() -> Gateway {
    Gateway::new(Arc::new(FnBackend::new("echo", |r: &LlmRequest| Ok(format!("reply {:?}", r.decode.seed)))))
}

fn sampling_statistics() -> Result<String, String> {
    let nouns: Vec<&str> = NOUNS[..10].to_vec();
    let ns = NounSet::from_words(Language::En, nouns.iter().copied());
    let params = RefinementParams { n: 5, rho: 0.5, rho_c: 0.5, seed: 20240 };
    let gateway = echo_gateway();
    let mut conditions = Vec::with_capacity(10_000);
    for i in 0..2_000 {
        let q = refinery::query(&format!("q{i}"), TaskType::TextToText, Language::En, None, Some("Why?".into()));
        let c = refinery::generate_candidates(&q, &ns, &params, &gateway).map_err(|e| e.to_string())?;
        conditions.extend(c.conditions);
    }
    ensure!(conditions.len() == 10_000, "{} draws", conditions.len());
    let empty = conditions.iter().filter(|c| c.is_none()).count() as f64 / 10_000.0;
    ensure!((0.48..=0.52).contains(&empty), "condition-empty rate {empty}");

    let mut counts: BTreeMap<&str, usize> = nouns.iter().map(|n| (*n, 0)).collect();
    for c in conditions.iter().flatten() {
        *counts.get_mut(c.as_str()).ok_or(format!("drew `{c}` outside the set"))? += 1;
    }
    let drawn: usize = counts.values().sum();
    let p = 1.0 / nouns.len() as f64;
    let (mean, sigma) = (drawn as f64 * p, (drawn as f64 * p * (1.0 - p)).sqrt());
    let worst = counts.values().map(|&c| ((c as f64 - mean) / sigma).abs()).fold(0.0, f64::max);
    ensure!(worst <= 4.0, "noun frequency {worst:.2} sigma from uniform");

    // rho_c coin over 10,000 responses that all contain a noun
    let extractor = LexiconExtractor::with_defaults();
    let ns = NounSet::from_words(Language::En, NOUNS);
    let samples = fixture_samples(2_000, 5, 77);
    let mut rng = substream(20240, "acceptance", "rho_c");
    let (mut gen, mut fallbacks, mut total) = (0usize, 0usize, 0usize);
    for s in &samples {
        let g = formulate_generation(s, &extractor, &ns, 0.5, &mut rng).map_err(|e| e.to_string())?;
        fallbacks += g.fallbacks;
        total += g.records.len();
        gen += g.records.iter().filter(|r| r.kind == RecordKind::Gen).count();
    }
    ensure!(total == 10_000 && fallbacks == 0, "{total} records, {fallbacks} fallbacks");
    let gen_rate = gen as f64 / total as f64;
    ensure!((0.48..=0.52).contains(&gen_rate), "GEN rate {gen_rate}");
    Ok(format!("empty rate {empty:.4}, GEN rate {gen_rate:.4}, max noun deviation {worst:.2} sigma"))
}

// ---------------------------------------------------------------- choice construction

fn by_likes_desc(s: &OogiriSample) -> Vec<String> {
    let mut r: Vec<&Response> = s.responses.iter().collect();
    r.sort_by_key(|x| std::cmp::Reverse(x.likes.unwrap_or(0)));
    r.iter().map(|r| r.text.trim().to_string()).collect()
}

fn choice_construction() -> Result<String, String> {
    let samples = fixture_samples(50, 5, 3);
    let extractor = LexiconExtractor::with_defaults();
    let ns = NounSet::from_words(Language::En, NOUNS);
    let providers = SyntheticProviders;
    let params = FormulateParams { seed: 9, ..Default::default() };
    let f = forge::formulate_corpus(&samples, &extractor, &ns, Some(&providers), &params);
    ensure!(f.stats.errors.is_empty(), "errors: {:?}", f.stats.errors);
    ensure!(f.choice.len() == 200, "{} questions for 50 samples", f.choice.len());
    let by_id: HashMap<&str, &OogiriSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    // unrelated answers come from other samples' top responses and captions
    let pool: Vec<(String, String)> = samples
        .iter()
        .flat_map(|s| [(s.id.clone(), by_likes_desc(s)[0].clone()), (s.id.clone(), providers.caption(s).unwrap())])
        .collect();
    let mut per_variant: BTreeMap<String, usize> = BTreeMap::new();
    for q in &f.choice {
        let s = by_id[q.sample_ref.as_str()];
        let ranked = by_likes_desc(s);
        let own: BTreeSet<&str> = s.responses.iter().map(|r| r.text.trim()).collect();
        // undo the shuffle: slot[permutation[pos]] = options[pos]
        let mut slots = vec![String::new(); q.m];
        for (pos, &slot) in q.permutation.iter().enumerate() {
            slots[slot] = q.options[pos].clone();
        }
        let caption = providers.caption(s).unwrap();
        let expect_len = match q.variant_name().as_str() {
            "2T1" => 2,
            "3T1" => 3,
            "4T1" => 4,
            "5T2" => 5,
            v => return Err(format!("unexpected variant {v}")),
        };
        ensure!(slots.len() == expect_len, "{}: {} options", q.id, slots.len());
        ensure!(slots[0] == ranked[0], "{}: slot 0 is not the most-liked response", q.id);
        ensure!(slots[1] == caption, "{}: slot 1 is not the caption", q.id);
        if q.m >= 3 {
            let foreign = pool.iter().any(|(owner, text)| owner != &s.id && text == &slots[2]);
            ensure!(foreign && !own.contains(slots[2].as_str()) && slots[2] != caption, "{}: slot 2 is not an unrelated answer", q.id);
        }
        if q.m >= 4 {
            ensure!(slots[3] == format!("In other words, {}", ranked[0]), "{}: slot 3 is not the rewrite", q.id);
        }
        if q.m == 5 {
            ensure!(slots[4] == ranked[1], "{}: slot 4 is not the second response", q.id);
        }
        let gold_texts: BTreeSet<&str> = q.gold.iter().map(|l| q.options[l.index()].as_str()).collect();
        let want: BTreeSet<&str> = ranked[..q.n].iter().map(String::as_str).collect();
        ensure!(gold_texts == want, "{}: gold options {gold_texts:?}", q.id);
        *per_variant.entry(q.variant_name()).or_default() += 1;
    }
    ensure!(per_variant.values().all(|&c| c == 50), "per variant {per_variant:?}");

    let mut single = fixture_samples(2, 1, 4);
    single.truncate(1);
    let mat = choice_materials(&single[0], "a photo".into(), &providers, Some("elsewhere".into())).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    ensure!(build_choice(&single[0], Variant::FiveT2, &mat, &mut rng).is_err(), "5T2 built from one response");
    let mut pair = fixture_samples(2, 1, 4);
    pair[1].id = "other".into();
    let g = forge::formulate_corpus(&pair, &extractor, &ns, Some(&providers), &FormulateParams { variants: vec![Variant::FiveT2], ..params });
    ensure!(g.choice.is_empty() && g.stats.errors.len() == 2, "single-response 5T2: {:?}", g.stats.errors);
    Ok(format!("{} questions recovered through inverse permutations; 5T2 rejects single-response samples", f.choice.len()))
}

// ---------------------------------------------------------------- NDCG

fn brute_ndcg(order: &[usize], grades: &[u32]) -> f64 {
    let dcg = |seq: &[u32]| -> f64 {
        let mut total = 0.0;
        for (i, &g) in seq.iter().enumerate() {
            let rank = (i + 1) as f64;
            total += (2f64.powf(g as f64) - 1.0) / ((rank + 1.0).ln() / 2f64.ln());
        }
        total
    };
    // IDCG as the best DCG over every ordering
    let mut best = 0.0f64;
    let mut perm: Vec<usize> = (0..grades.len()).collect();
    permute(&mut perm, 0, &mut |p| {
        let seq: Vec<u32> = p.iter().map(|&i| grades[i]).collect();
        best = best.max(dcg(&seq));
    });
    if best == 0.0 {
        return 1.0;
    }
    let seq: Vec<u32> = order.iter().map(|&i| grades[i]).collect();
    dcg(&seq) / best
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

fn ndcg_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst = 0.0f64;
    for _ in 0..1_000 {
        let k = rng.gen_range(2..=5);
        let grades: Vec<u32> = (0..k).map(|_| rng.gen_range(0..=4)).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let got = evalkit::ndcg(&order, &grades).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_ndcg(&order, &grades)).abs());
        let mut ideal: Vec<usize> = (0..k).collect();
        ideal.sort_by(|&a, &b| grades[b].cmp(&grades[a]));
        let perfect = evalkit::ndcg(&ideal, &grades).map_err(|e| e.to_string())?;
        ensure!(perfect == 1.0, "perfect order scored {perfect} for {grades:?}");
    }
    ensure!(worst <= 1e-12, "max deviation from brute force {worst:e}");

    let swap = evalkit::ndcg(&[1, 0, 2, 3, 4], &[4, 3, 2, 1, 0]).map_err(|e| e.to_string())?;
    ensure!((swap - brute_ndcg(&[1, 0, 2, 3, 4], &[4, 3, 2, 1, 0])).abs() <= 1e-12, "swap case disagrees");
    ensure!((swap - 0.8617).abs() < 5e-5, "swap case {swap}");
    let zeros = evalkit::ndcg(&[2, 0, 1], &[0, 0, 0]).map_err(|e| e.to_string())?;
    ensure!(zeros == 1.0, "all-zero grades scored {zeros}");
    ensure!(evalkit::grade_relevance(&[10, 8, 8, 3, 1]) == vec![4, 3, 3, 2, 1], "dense grades");
    ensure!(evalkit::grade_relevance(&[5, 5, 5]) == vec![4, 4, 4], "tied grades");
    Ok(format!("1000 pairs within {worst:.1e}; swap case {swap:.4}"))
}

// ---------------------------------------------------------------- refinement

/// `L. text` lines of a rendered option block.
fn listed_options(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| {
            let mut c = l.chars();
            match (c.next(), c.next(), c.next()) {
                (Some(x), Some('.'), Some(' ')) if ('A'..='E').contains(&x) => Some(l[3..].to_string()),
                _ => None,
            }
        })
        .collect()
}

fn is_rank(p: &str) -> bool {
    p.contains("ranking the humorousness")
}

fn is_select(p: &str) -> bool {
    p.contains("Option id. Option content")
}

fn exact_ranking(order: &[usize], options: &[String]) -> String {
    order
        .iter()
        .enumerate()
        .map(|(i, &o)| format!("{}. {}. {}.", i + 1, Label::new(o).unwrap(), options[o]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn refinement_contract() -> Result<String, String> {
    let samples = fixture_samples(30, 5, 8);
    let gtr_texts: BTreeSet<String> = samples.iter().flat_map(|s| s.responses.iter().map(|r| r.text.clone())).collect();
    let gtr_texts = Arc::new(gtr_texts);
    // Generation: distinct text per decode seed. Rank: reverse order. Select:
    // the ground truth for samples whose prompt mentions an even index,
    // otherwise the first machine candidate.
    let script = {
        let gtr = gtr_texts.clone();
        move |r: &LlmRequest| -> Result<String, GatewayError> {
            if is_rank(&r.prompt) {
                let opts = listed_options(&r.prompt);
                let order: Vec<usize> = (0..opts.len()).rev().collect();
                return Ok(exact_ranking(&order, &opts));
            }
            if is_select(&r.prompt) {
                let opts = listed_options(&r.prompt);
                let want_gtr = hash64(&[r.prompt.as_bytes()]).is_multiple_of(2);
                let pick = opts.iter().position(|o| gtr.contains(o) == want_gtr).unwrap_or(0);
                return Ok(format!("{}. {}", Label::new(pick).unwrap(), opts[pick]));
            }
            Ok(format!("machine candidate {}", r.decode.seed.unwrap_or(0)))
        }
    };
    let ns = NounSet::from_words(Language::En, NOUNS);
    let params = RefinementParams { n: 5, rho: 0.5, rho_c: 0.5, seed: 31 };

    // (a) backend calls per sample on a fresh gateway
    for s in &samples {
        let g = Gateway::new(Arc::new(FnBackend::new("script", script.clone())));
        let o = refinery::refine_sample(s, ConditionPool::Weak(&ns), &params, &g, 1).map_err(|e| e.to_string())?;
        ensure!(o.verdict != Verdict::DiscardedDegenerate, "{}: degenerate ({:?})", s.id, o.reason);
        ensure!(g.calls() == params.n + 2 && o.calls == g.calls(), "{}: {} calls", s.id, g.calls());
    }

    // (b) and (c) over the corpus
    let g = Gateway::new(Arc::new(FnBackend::new("script", script.clone()))).with_max_inflight(4);
    let base: Vec<clot_core::InstructionRecord> = {
        let extractor = LexiconExtractor::with_defaults();
        forge::formulate_corpus(&samples, &extractor, &ns, None, &FormulateParams { variants: vec![], ..Default::default() }).records
    };
    let r = refinery::refine_corpus(&samples, ConditionPool::Weak(&ns), &params, &g, base.clone()).map_err(|e| e.to_string())?;
    let (mut emitted, mut discarded) = (0, 0);
    for (s, o) in samples.iter().zip(&r.outcomes) {
        let own: BTreeSet<&str> = s.responses.iter().map(|r| r.text.trim()).collect();
        let pick_is_gtr = o.final_choice.as_deref().is_some_and(|c| own.contains(c));
        ensure!((o.verdict == Verdict::DiscardedGtr) == pick_is_gtr, "{}: verdict {:?} vs pick {:?}", s.id, o.verdict, o.final_choice);
        ensure!((o.verdict == Verdict::Emitted) == o.emitted_record.is_some(), "{}: emission mismatch", s.id);
        match o.verdict {
            Verdict::Emitted => emitted += 1,
            Verdict::DiscardedGtr => discarded += 1,
            Verdict::DiscardedDegenerate => return Err(format!("{}: degenerate", s.id)),
        }
    }
    ensure!(emitted > 0 && discarded > 0, "fixture should exercise both verdicts ({emitted}/{discarded})");
    ensure!(r.merged.len() == base.len() + emitted, "merged {} != {} + {emitted}", r.merged.len(), base.len());
    ensure!(r.merged[..base.len()] == base[..], "base records changed");
    let added: Vec<_> = r.outcomes.iter().filter_map(|o| o.emitted_record.clone()).collect();
    ensure!(r.merged[base.len()..] == added[..], "appended records differ from emissions");

    // (d) inference transcripts walked by hand
    infer_transcripts()?;
    Ok(format!("{} samples at n+2 calls; {emitted} emitted, {discarded} discarded; 3 inference transcripts match", samples.len()))
}

/// Replaces the golden's ordinal option lines with `options`.
fn with_options(golden_text: &str, options: &[String]) -> String {
    let mut out = Vec::new();
    let mut placed = false;
    for line in golden_text.split('\n') {
        if listed_options(line).len() == 1 {
            if !placed {
                for (i, o) in options.iter().enumerate() {
                    out.push(format!("{}. {o}", Label::new(i).unwrap()));
                }
                placed = true;
            }
            continue;
        }
        out.push(line.to_string());
    }
    out.join("\n")
}

fn sequential(replies: Vec<&'static str>) -> Gateway {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let backend = FnBackend::new("walk", move |_: &LlmRequest| {
        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        replies.get(i).map(|s| s.to_string()).ok_or(GatewayError::Unscripted(format!("call {i}")))
    });
    Gateway::new(Arc::new(backend)).with_max_inflight(1)
}

fn infer_transcripts() -> Result<(), String> {
    let q = refinery::query("walk", TaskType::TextToText, Language::En, None, Some("What did the alarm clock say?".into()));
    let banana = NounSet::from_words(Language::En, ["banana"]);
    let cond = golden("T2T_COND");
    let gen = golden("T2T_GEN");
    let s = |x: &str| x.to_string();
    // 2T1 differs from the 3T1 golden only by its option list
    let select2 = |a: &str, b: &str| with_options(&golden("T2T_SELECT_3T1"), &[s(a), s(b)]);
    let five: Vec<String> = ["c0", "c1", "c2", "c3", "c4"].iter().map(|x| s(x)).collect();
    let ranked = "1. C. c2. 2. A. c0. 3. E. c4. 4. B. c1. 5. D. c3.";

    // 1: clean path, every condition is the only noun
    let g = sequential(vec!["c0", "c1", "c2", "c3", "c4", ranked, "B. c0"]);
    let p = RefinementParams { n: 5, rho: 0.0, rho_c: 0.5, seed: 1 };
    let r = refinery::clot_infer(&q, &banana, &p, &g).map_err(|e| e.to_string())?;
    let mut want: Vec<(String, String, String, String)> = (0..5)
        .map(|i| (format!("generate[{i}]"), cond.clone(), format!("c{i}"), s("ok")))
        .collect();
    want.push((s("rank"), with_options(&golden("T2T_RANK"), &five), s(ranked), s("exact CAEBD")));
    want.push((s("select"), select2("c2", "c0"), s("B. c0"), s("exact B")));
    compare_trace("fixture 1", &r.trace, &want)?;
    ensure!(r.response == "c0" && !r.degraded, "fixture 1 response {:?}", r.response);

    // 2: all generations collide, one candidate survives
    let g = sequential(vec!["same", " same ", "same"]);
    let p = RefinementParams { n: 3, rho: 1.0, rho_c: 0.5, seed: 1 };
    let r = refinery::clot_infer(&q, &NounSet::default(), &p, &g).map_err(|e| e.to_string())?;
    let want = vec![
        (s("generate[0]"), gen.clone(), s("same"), s("ok")),
        (s("generate[1]"), gen.clone(), s(" same "), s("duplicate")),
        (s("generate[2]"), gen.clone(), s("same"), s("duplicate")),
    ];
    compare_trace("fixture 2", &r.trace, &want)?;
    ensure!(r.response == "same" && r.degraded && g.calls() == 3, "fixture 2 result {r:?}");

    // 3: unreadable ranking, selection falls back to the first two
    let g = sequential(vec!["c0", "c1", "c2", "c3", "c4", "no idea", "A"]);
    let p = RefinementParams { n: 5, rho: 0.0, rho_c: 0.5, seed: 1 };
    let r = refinery::clot_infer(&q, &banana, &p, &g).map_err(|e| e.to_string())?;
    let mut want: Vec<(String, String, String, String)> = (0..5)
        .map(|i| (format!("generate[{i}]"), cond.clone(), format!("c{i}"), s("ok")))
        .collect();
    want.push((s("rank"), with_options(&golden("T2T_RANK"), &five), s("no idea"), s("failed")));
    want.push((s("select"), select2("c0", "c1"), s("A"), s("recovered A")));
    compare_trace("fixture 3", &r.trace, &want)?;
    ensure!(r.response == "c0" && r.degraded && r.degraded_reason.as_deref() == Some("rank parse failed"), "fixture 3 result {r:?}");
    Ok(())
}

fn compare_trace(
    name: &str,
    got: &[refinery::TraceStep],
    want: &[(String, String, String, String)],
) -> Result<(), String> {
    ensure!(got.len() == want.len(), "{name}: {} steps, expected {}", got.len(), want.len());
    for (i, (g, (stage, prompt, reply, parse))) in got.iter().zip(want).enumerate() {
        ensure!(&g.stage == stage, "{name} step {i}: stage {}", g.stage);
        ensure!(&g.prompt == prompt, "{name} step {i}: prompt\n{}\n-- expected --\n{prompt}", g.prompt);
        ensure!(&g.reply == reply, "{name} step {i}: reply {:?}", g.reply);
        ensure!(&g.parse == parse, "{name} step {i}: parse {:?}", g.parse);
    }
    Ok(())
}

// ---------------------------------------------------------------- parsers

fn fuzz_reply(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &[
        'A', 'B', 'C', 'D', 'E', 'F', 'Z', 'a', 'b', 'x', '.', ')', '(', ',', ';', ':', '-', ' ', ' ', '\n', '\t', '0',
        '1', '2', '3', '4', '5', '9', '\'', '"', '和', 'の', 'é', '🙂', '\u{0}', '#', '>',
    ];
    const SEEDS: &[&str] = &[
        "A. xxx",
        "A. xxx. B. xxx",
        "1. A. xxx. 2. B. xxx. 3. C. xxx. 4. D. xxx. 5. E. xxx.",
        "The answer is (C)",
        "Option B",
        "1) C 2) A 3) B",
        "99. A. 0. B. 12. C.",
    ];
    match rng.gen_range(0..3) {
        0 => {
            let len = rng.gen_range(0..60);
            (0..len).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
        }
        1 => {
            let mut chars: Vec<char> = SEEDS.choose(rng).unwrap().chars().collect();
            for _ in 0..rng.gen_range(0..6) {
                let at = rng.gen_range(0..=chars.len());
                match rng.gen_range(0..3) {
                    0 if at < chars.len() => {
                        chars.remove(at);
                    }
                    1 => chars.insert(at, *ALPHABET.choose(rng).unwrap()),
                    _ if at < chars.len() => chars[at] = *ALPHABET.choose(rng).unwrap(),
                    _ => {}
                }
            }
            chars.into_iter().collect()
        }
        _ => {
            let len = rng.gen_range(0..40);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
    }
}

fn parser_robustness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(100_000);
    let mut recovered = 0usize;
    for i in 0..100_000 {
        let reply = fuzz_reply(&mut rng);
        let m = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=2);
        let labels = Label::first(m);
        let c = parse_choice(&reply, &labels, n);
        let distinct: BTreeSet<_> = c.picks.iter().collect();
        ensure!(
            c.picks.len() <= n && distinct.len() == c.picks.len() && c.picks.iter().all(|l| labels.contains(l)),
            "reply {i} {reply:?}: picks {:?}",
            c.picks
        );
        ensure!(c.is_failed() == c.picks.is_empty(), "reply {i}: failed flag inconsistent");
        let r = parse_ranking(&reply, &labels);
        if !r.is_failed() {
            let set: BTreeSet<_> = r.order.iter().collect();
            ensure!(r.order.len() == m && set.len() == m, "reply {i} {reply:?}: order {:?}", r.order);
            recovered += 1;
        }
    }
    let exact = [
        (parse_choice("A. xxx", &Label::first(3), 1).confidence, "A. xxx"),
        (parse_choice("A. xxx. B. xxx", &Label::first(5), 2).confidence, "A. xxx. B. xxx"),
        (
            parse_ranking("1. A. xxx. 2. B. xxx. 3. C. xxx. 4. D. xxx. 5. E. xxx.", &Label::first(5)).confidence,
            "1. A. xxx. 2. B. xxx. ...",
        ),
    ];
    for (c, text) in exact {
        ensure!(c == Confidence::Exact, "`{text}` parsed as {c:?}");
    }
    let r = parse_ranking("1. C. x. 2. A. y. 3. E. z. 4. B. w. 5. D. v.", &Label::first(5));
    let order: String = r.order.iter().map(Label::to_string).collect();
    ensure!(r.confidence == Confidence::Exact && order == "CAEBD", "ranking parsed as {order} ({:?})", r.confidence);
    Ok(format!("100000 replies, no panic ({recovered} rankings read); exact examples exact"))
}

// ---------------------------------------------------------------- end to end

fn oracle_transcript(dir: &Path) -> Result<PathBuf, String> {
    let (_, choice) = jsonl::read_file::<ChoiceQuestion>(&dir.join("test/choice.jsonl"), Some(schema::CHOICE)).map_err(|e| e.to_string())?;
    let (_, ranking) = jsonl::read_file::<RankingQuestion>(&dir.join("test/ranking.jsonl"), Some(schema::RANKING)).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for q in &choice {
        let reply = q.gold.iter().map(|l| format!("{l}. {}", q.options[l.index()])).collect::<Vec<_>>().join(". ");
        entries.push(TranscriptEntry::for_prompt(&q.stem, reply));
    }
    for q in &ranking {
        let texts: Vec<String> = q.candidates.iter().map(|c| c.text.clone()).collect();
        entries.push(TranscriptEntry::for_prompt(&q.stem, exact_ranking(&q.gold_order, &texts)));
    }
    let path = dir.join("oracle.jsonl");
    jsonl::write_file(&path, None::<&Header>, &entries).map_err(|e| e.to_string())?;
    Ok(path)
}

fn end_to_end() -> Result<String, String> {
    let fixture = fixture_samples(200, 5, 2024);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_samples(&d.path().join("samples.jsonl"), &fixture);
        run_pipeline(d.path(), 2024);
    }
    let (a, b) = (read_tree(dirs[0].path()), read_tree(dirs[1].path()));
    ensure!(a.keys().eq(b.keys()), "artifact sets differ");
    for (k, v) in &a {
        ensure!(v == &b[k], "{k} differs between runs");
    }
    let artifacts = a.len();

    // oracle answers through the CLI
    let d = dirs[0].path();
    oracle_transcript(d)?;
    ok_in(d, &["--backend", "transcript", "--transcript", "oracle.jsonl", "eval", "--questions", "test", "--out", "oracle"]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("oracle/report.json")).unwrap()).map_err(|e| e.to_string())?;
    let mut variants = BTreeSet::new();
    let mut ranked = 0;
    for row in &report.rows {
        for (v, cell) in &row.choice {
            ensure!(cell.accuracy == 1.0 && cell.failed == 0, "oracle {} {} {v}: {}", row.task, row.lang, cell.accuracy);
            variants.insert(v.clone());
        }
        if let Some(r) = &row.rank {
            ensure!(r.ndcg == 1.0, "oracle {} rank NDCG {}", row.task, r.ndcg);
            ranked += r.total;
        }
    }
    ensure!(variants.len() == 4 && ranked > 0, "oracle covered {variants:?} and {ranked} rankings");

    // uniform guesses on 10,000 3T1 questions
    let many = fixture_samples(10_000, 2, 99);
    let extractor = LexiconExtractor::with_defaults();
    let ns = NounSet::from_words(Language::En, NOUNS);
    let params = FormulateParams { variants: vec![Variant::ThreeT1], seed: 5, ..Default::default() };
    let f = forge::formulate_corpus(&many, &extractor, &ns, Some(&SyntheticProviders), &params);
    ensure!(f.choice.len() == 10_000, "{} 3T1 questions", f.choice.len());
    let guess = FnBackend::new("uniform", |r: &LlmRequest| {
        let pick = (hash64(&[b"uniform", r.prompt.as_bytes()]) % 3) as usize;
        Ok(format!("{}.", Label::new(pick).unwrap()))
    });
    let g = Gateway::new(Arc::new(guess)).with_max_inflight(8);
    let run = evalkit::run_eval(&f.choice, &[], &g, &EvalOptions::default());
    let cells: Vec<_> = run.report.rows.iter().filter_map(|r| r.choice.get("3T1")).collect();
    let total: usize = cells.iter().map(|c| c.total).sum();
    let accuracy = cells.iter().map(|c| c.accuracy * c.total as f64).sum::<f64>() / total as f64;
    let mean_score = run.answers.iter().map(|a| a.score).sum::<f64>() / run.answers.len() as f64;
    ensure!((accuracy - mean_score).abs() < 1e-9, "report {accuracy} disagrees with answers {mean_score}");
    ensure!(total == 10_000 && (0.30..=0.37).contains(&accuracy), "uniform 3T1 accuracy {accuracy} over {total}");
    Ok(format!(
        "{artifacts} artifacts byte-identical; oracle 1.0 on {} variants and NDCG 1.0; uniform 3T1 {:.4}",
        variants.len(),
        accuracy
    ))
}

// ---------------------------------------------------------------- DAT / CGG

fn brute_asd(vectors: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, u) in vectors.iter().enumerate() {
        for v in &vectors[i + 1..] {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let norm = |w: &Vec<f64>| w.iter().map(|a| a * a).sum::<f64>().sqrt();
            total += 1.0 - dot / (norm(u) * norm(v));
            pairs += 1.0;
        }
    }
    total / pairs
}

fn dat_cgg() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let vectors: Vec<Vec<f64>> = (0..12).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let text: String = words
        .iter()
        .zip(&vectors)
        .map(|(w, v)| format!("{w} {}\n", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")))
        .collect();
    let table = EmbeddingTable::parse(&text, "toy", Some(6)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.gen_range(2..=9);
        let pick: Vec<usize> = rand::seq::index::sample(&mut rng, 12, k).into_vec();
        let ws: Vec<&str> = pick.iter().map(|&i| words[i].as_str()).collect();
        let vs: Vec<Vec<f64>> = pick.iter().map(|&i| vectors[i].clone()).collect();
        let got = sidequests::asd(&ws, &table).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_asd(&vs)).abs());
    }
    ensure!(worst <= 1e-12, "asd deviates from brute force by {worst:e}");
    let same = sidequests::asd(&["w3", "w3", "w3"], &table).map_err(|e| e.to_string())?;
    ensure!(same.abs() <= 1e-12, "identical words give {same}");
    let axes = EmbeddingTable::parse("x 1 0 0\ny 0 2 0\n", "axes", None).map_err(|e| e.to_string())?;
    let ortho = sidequests::asd(&["x", "y"], &axes).map_err(|e| e.to_string())?;
    ensure!((ortho - 1.0).abs() <= 1e-12, "orthogonal pair gives {ortho}");

    let images: Vec<(String, String)> =
        ["cat", "chair", "cloud", "rabbit", "teapot"].iter().enumerate().map(|(i, c)| (format!("img/{i}.jpg"), c.to_string())).collect();
    let qs = sidequests::build_cgg(&images, &sidequests::default_cgg_distractors(), &mut rng).map_err(|e| e.to_string())?;
    ensure!(qs.len() == images.len() * 3, "{} CGG questions for {} images", qs.len(), images.len());
    for (img, category) in &images {
        let mine: Vec<&ChoiceQuestion> = qs.iter().filter(|q| q.image_ref.as_deref() == Some(img)).collect();
        ensure!(mine.len() == 3, "{img}: {} questions", mine.len());
        for q in mine {
            let truths = q.options.iter().filter(|o| o.eq_ignore_ascii_case(category)).count();
            ensure!(truths == 1 && q.gold.len() == 1, "{}: {truths} true options", q.id);
            ensure!(&q.options[q.gold[0].index()] == category, "{}: gold is not the category", q.id);
        }
    }
    Ok(format!("asd within {worst:.1e} of brute force; {} CGG questions, 3 per image", qs.len()))
}
