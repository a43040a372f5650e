use std::collections::BTreeSet;

use clot_core::evalkit::{grade_relevance, ndcg, score_choice};
use clot_core::forge::{build_choice, gold_slots, ChoiceMaterials};
use clot_core::gateway::{parse_choice, parse_ranking, Confidence, ParsedChoice};
use clot_core::ingest::split;
use clot_core::nouns::sample_condition;
use clot_core::rng::substream;
use clot_core::sidequests::{asd, EmbeddingTable};
use clot_core::{ChoiceQuestion, Label, Language, NounSet, OogiriSample, Response, TaskType, Variant};
use proptest::prelude::*;
use proptest::sample::SizeRange;

fn sample(id: &str, n: usize) -> OogiriSample {
    OogiriSample {
        id: id.into(),
        task: TaskType::ImageToText,
        lang: Language::En,
        image_ref: Some(format!("img/{id}.jpg")),
        question_text: None,
        responses: (0..n).map(|i| Response::new(format!("answer {i}"), Some(i as i64))).collect(),
        created_at: None,
    }
}

fn permutation(len: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..len).collect::<Vec<_>>()).prop_shuffle()
}

fn grades_and_order() -> impl Strategy<Value = (Vec<u32>, Vec<usize>)> {
    (1usize..8).prop_flat_map(|n| (prop::collection::vec(0u32..5, n), permutation(n)))
}

fn is_non_increasing(order: &[usize], grades: &[u32]) -> bool {
    order.windows(2).all(|w| grades[w[0]] >= grades[w[1]])
}

proptest! {
    #[test]
    fn ndcg_is_a_fraction((grades, order) in grades_and_order()) {
        let v = ndcg(&order, &grades).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert_eq!(v >= 1.0 - 1e-12, is_non_increasing(&order, &grades));
    }

    #[test]
    fn ndcg_ignores_swaps_within_a_grade((grades, order) in grades_and_order(), i in 0usize..8, j in 0usize..8) {
        let n = order.len();
        let (i, j) = (i % n, j % n);
        prop_assume!(grades[order[i]] == grades[order[j]]);
        let mut swapped = order.clone();
        swapped.swap(i, j);
        prop_assert!((ndcg(&order, &grades).unwrap() - ndcg(&swapped, &grades).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn grades_respect_like_order(likes in prop::collection::vec(0u64..50, 5)) {
        let g = grade_relevance(&likes);
        for a in 0..5 {
            for b in 0..5 {
                prop_assert_eq!(likes[a] == likes[b], g[a] == g[b]);
                if likes[a] > likes[b] {
                    prop_assert!(g[a] > g[b]);
                }
            }
        }
        prop_assert_eq!(*g.iter().max().unwrap(), 4);
    }

    #[test]
    fn choice_score_ignores_question_order(picks in prop::collection::vec((0usize..3, 0usize..3), 1..30), seed in any::<u64>()) {
        let qs: Vec<ChoiceQuestion> = picks.iter().enumerate().map(|(i, (g, _))| ChoiceQuestion {
            id: format!("q{i}"),
            task: TaskType::ImageToText,
            lang: Language::En,
            m: 3,
            n: 1,
            stem: String::new(),
            options: vec!["a".into(), "b".into(), "c".into()],
            gold: vec![Label::new(*g).unwrap()],
            permutation: vec![0, 1, 2],
            image_ref: None,
            sample_ref: format!("s{i}"),
            meta: Default::default(),
        }).collect();
        let ans: Vec<ParsedChoice> = picks.iter().map(|(_, p)| ParsedChoice {
            picks: vec![Label::new(*p).unwrap()],
            raw: String::new(),
            confidence: Confidence::Exact,
        }).collect();
        let mut idx: Vec<usize> = (0..qs.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut substream(seed, "prop", "order"));
        let qs2: Vec<_> = idx.iter().map(|&i| qs[i].clone()).collect();
        let ans2: Vec<_> = idx.iter().map(|&i| ans[i].clone()).collect();
        let a = score_choice(&qs, &ans, false).unwrap()["3T1"].accuracy().unwrap();
        let b = score_choice(&qs2, &ans2, false).unwrap()["3T1"].accuracy().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn parsers_stay_in_range(reply in ".{0,200}", k in 2usize..8, n in 1usize..3) {
        let labels = Label::first(k);
        let c = parse_choice(&reply, &labels, n);
        prop_assert!(c.picks.len() <= n);
        prop_assert!(c.picks.iter().all(|l| l.index() < k));
        prop_assert_eq!(c.picks.is_empty(), c.confidence == Confidence::Failed);
        let r = parse_ranking(&reply, &labels);
        if r.confidence != Confidence::Failed {
            let set: BTreeSet<Label> = r.order.iter().copied().collect();
            prop_assert_eq!(set.len(), k);
            prop_assert_eq!(r.order.len(), k);
        }
    }

    #[test]
    fn rendered_answers_parse_exactly(order in permutation(5), pick in 0usize..5) {
        let labels = Label::first(5);
        let text: Vec<String> = order.iter().enumerate().map(|(i, &o)| format!("{}. {}. option {o}.", i + 1, labels[o])).collect();
        let r = parse_ranking(&text.join(" "), &labels);
        prop_assert_eq!(r.confidence, Confidence::Exact);
        prop_assert_eq!(r.order.iter().map(|l| l.index()).collect::<Vec<_>>(), order);
        let c = parse_choice(&format!("{}. option {pick}", labels[pick]), &labels, 1);
        prop_assert_eq!(c.confidence, Confidence::Exact);
        prop_assert_eq!(c.picks, vec![labels[pick]]);
    }

    #[test]
    fn choice_gold_recovers_through_the_permutation(seed in any::<u64>(), v in 0usize..4) {
        let variant = Variant::ALL[v];
        let s = sample("p", 3);
        let mat = ChoiceMaterials {
            gtr: "gtr one".into(),
            gtr2: Some("gtr two".into()),
            caption: "a caption".into(),
            unrelated: Some("something else".into()),
            rewrite: "gtr one, rephrased".into(),
        };
        let q = build_choice(&s, variant, &mat, &mut substream(seed, "prop", "choice")).unwrap();
        q.validate().unwrap();
        let gold_pos: BTreeSet<usize> = q.gold.iter().map(|l| l.index()).collect();
        let expected: BTreeSet<usize> = (0..q.m).filter(|&p| gold_slots(variant).contains(&q.permutation[p])).collect();
        prop_assert_eq!(gold_pos, expected);
        prop_assert_eq!(q.gold.len(), variant.picks());
    }

    #[test]
    fn condition_draws_come_from_the_set(seed in any::<u64>(), rho in 0.0f64..1.0, words in prop::collection::btree_set("[a-z]{3,8}", 1..10)) {
        let ns = NounSet::from_words(Language::En, words.iter().cloned());
        let mut rng = substream(seed, "prop", "cond");
        for _ in 0..20 {
            if let Some(c) = sample_condition(&ns, &Language::En, rho, &mut rng).unwrap() {
                prop_assert!(words.contains(&c));
            }
        }
        prop_assert_eq!(sample_condition(&ns, &Language::En, 1.0, &mut rng).unwrap(), None);
    }

    #[test]
    fn split_partitions_and_reproduces(n in 0usize..60, seed in any::<u64>()) {
        let samples: Vec<_> = (0..n).map(|i| sample(&format!("s{i}"), 1)).collect();
        let a = split(&samples, 0.95, seed).unwrap().manifest;
        let b = split(&samples, 0.95, seed).unwrap().manifest;
        prop_assert_eq!(&a, &b);
        let train: BTreeSet<_> = a.train_ids.iter().collect();
        let test: BTreeSet<_> = a.test_ids.iter().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n);
    }

    #[test]
    fn asd_is_order_and_scale_invariant(
        vecs in prop::collection::vec(prop::collection::vec(0.1f64..3.0, 3), SizeRange::from(2..7)),
        scale in 0.5f64..20.0,
        seed in any::<u64>(),
    ) {
        let text: String = vecs.iter().enumerate().map(|(i, v)| format!("w{i} {} {} {}\n", v[0], v[1], v[2])).collect();
        let scaled: String = vecs.iter().enumerate().map(|(i, v)| format!("w{i} {} {} {}\n", v[0] * scale, v[1] * scale, v[2] * scale)).collect();
        let t = EmbeddingTable::parse(&text, "t", None).unwrap();
        let ts = EmbeddingTable::parse(&scaled, "s", None).unwrap();
        let mut words: Vec<String> = (0..vecs.len()).map(|i| format!("w{i}")).collect();
        let base = asd(&words, &t).unwrap();
        use rand::seq::SliceRandom;
        words.shuffle(&mut substream(seed, "prop", "asd"));
        prop_assert!((asd(&words, &t).unwrap() - base).abs() < 1e-12);
        prop_assert!((asd(&words, &ts).unwrap() - base).abs() < 1e-9);
    }
}
