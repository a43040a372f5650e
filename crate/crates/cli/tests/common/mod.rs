#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clot_core::jsonl::{self, schema, Header};
use clot_core::{Language, OogiriSample, Response, TaskType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NOUNS: [&str; 12] = [
    "banana", "teacher", "robot", "coffee", "umbrella", "penguin", "pizza", "mirror", "boss", "cake", "phone", "rain",
];

const VERBS: [&str; 8] = ["ate", "borrowed", "ignored", "hugged", "sued", "painted", "married", "forgot"];

pub fn clot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clot"))
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = clot().current_dir(dir).args(args).output().expect("spawn clot");
    if !out.status.success() {
        eprintln!(
            "clot {}\nstdout: {}\nstderr: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

pub fn ok_in(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(out.status.success(), "clot {} failed", args.join(" "));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// `responses` answers per sample; tasks rotate I2T, T2T, IT2T.
pub fn fixture_samples(count: usize, responses: usize, seed: u64) -> Vec<OogiriSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let task = [TaskType::ImageToText, TaskType::TextToText, TaskType::ImageTextToText][i % 3];
            let subject = NOUNS[i % NOUNS.len()];
            let (image_ref, question_text) = match task {
                TaskType::ImageToText => (Some(format!("img/s{i:04}.jpg")), None),
                TaskType::TextToText => (None, Some(format!("What did the {subject} say at meeting {i}?"))),
                TaskType::ImageTextToText => (Some(format!("img/s{i:04}.jpg")), Some(format!("The {subject} said [MASK]!"))),
            };
            let mut likes: Vec<i64> = (0..responses as i64).map(|k| 10 * (k + 1) + rng.gen_range(0..5)).collect();
            likes.shuffle(&mut rng);
            let responses = (0..responses)
                .map(|k| {
                    let a = NOUNS.choose(&mut rng).unwrap();
                    let v = VERBS.choose(&mut rng).unwrap();
                    let b = NOUNS.choose(&mut rng).unwrap();
                    Response::new(format!("the {a} {v} my {b} again ({i}-{k})"), Some(likes[k]))
                })
                .collect();
            OogiriSample {
                id: format!("s{i:04}"),
                task,
                lang: Language::En,
                image_ref,
                question_text,
                responses,
                created_at: None,
            }
        })
        .collect()
}

pub fn write_samples(path: &Path, samples: &[OogiriSample]) {
    jsonl::write_file(path, Some(&Header::new(schema::SAMPLES, None)), samples).expect("write samples");
}

/// ingest -> nouns -> formulate (train and test) -> refine -> eval, with
/// relative paths inside `dir`.
pub fn run_pipeline(dir: &Path, seed: u64) {
    let s = seed.to_string();
    let g = ["--seed", s.as_str()];
    let steps: [&[&str]; 6] = [
        &["ingest", "--format", "samples", "--input", "samples.jsonl", "--out", "ingest"],
        &["nouns", "build", "--samples", "ingest/train.jsonl", "--out", "nouns"],
        &["formulate", "--samples", "ingest/train.jsonl", "--nouns", "nouns", "--out", "train"],
        &["formulate", "--samples", "ingest/test.jsonl", "--nouns", "nouns", "--out", "test"],
        &["refine", "--samples", "ingest/train.jsonl", "--nouns", "nouns", "--base", "train/instructions.jsonl", "--out", "refine"],
        &["eval", "--questions", "test", "--out", "eval"],
    ];
    for step in steps {
        let args: Vec<&str> = g.iter().copied().chain(step.iter().copied()).collect();
        ok_in(dir, &args);
    }
}

/// Every file under `dir`, keyed by relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
