//! Divergent-association (DAT) and cloud-guessing (CGG) choice questions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ParsedChoice;
use crate::types::{ChoiceQuestion, Label, Language, TaskType};

pub const DEFAULT_CGG_DISTRACTORS: &str = include_str!("../data/cgg_distractors.txt");
pub const DAT_WORDS: usize = 9;
pub const DAT_OPTIONS: usize = 4;
pub const CGG_PER_IMAGE: usize = 3;
pub const CGG_OPTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum SideError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Format { origin: String, line: usize, message: String },
    #[error("{0}: embedding file is empty")]
    Empty(String),
    #[error("word `{0}` is not in the embedding table")]
    Unknown(String),
    #[error("{0}")]
    Argument(String),
}

/// Word vectors read from a whitespace-separated text file. Lookups are
/// case-folded; zero vectors are rejected at load time.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl EmbeddingTable {
    pub fn parse(text: &str, origin: &str, expected_dim: Option<usize>) -> Result<Self, SideError> {
        let mut t = EmbeddingTable {
            dim: expected_dim.unwrap_or(0),
            ..Default::default()
        };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let err = |message: String| SideError::Format {
                origin: origin.to_string(),
                line: lineno,
                message,
            };
            let v: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| err(format!("`{p}` is not a number"))))
                .collect::<Result<_, _>>()?;
            if t.dim == 0 {
                t.dim = v.len();
            }
            if v.len() != t.dim || v.is_empty() {
                return Err(err(format!("expected {} components, found {}", t.dim, v.len())));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(err(format!("`{word}` has a zero vector")));
            }
            let key = word.to_lowercase();
            if t.index.contains_key(&key) {
                t.warnings.push(format!("{origin}:{lineno}: duplicate `{word}` ignored"));
                continue;
            }
            t.index.insert(key.clone(), t.words.len());
            t.words.push(key);
            t.vectors.push(v);
        }
        if t.words.is_empty() {
            return Err(SideError::Empty(origin.to_string()));
        }
        Ok(t)
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, SideError> {
        let text = std::fs::read_to_string(path).map_err(|source| SideError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string(), expected_dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(&word.to_lowercase()).map(|&i| self.vectors[i].as_slice())
    }

    fn lookup(&self, word: &str) -> Result<&[f64], SideError> {
        self.get(word).ok_or_else(|| SideError::Unknown(word.to_string()))
    }
}

/// `1 - cos(u, v)`, in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, SideError> {
    if u.len() != v.len() {
        return Err(SideError::Argument(format!("dimensions differ: {} vs {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SideError::Argument("zero-norm vector".into()));
    }
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

/// Average pairwise cosine distance over all unordered pairs.
pub fn asd<S: AsRef<str>>(words: &[S], table: &EmbeddingTable) -> Result<f64, SideError> {
    if words.len() < 2 {
        return Err(SideError::Argument("asd needs at least two words".into()));
    }
    let vecs: Vec<&[f64]> = words.iter().map(|w| table.lookup(w.as_ref())).collect::<Result<_, _>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            sum += cosine_distance(vecs[i], vecs[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatQuestion {
    pub id: String,
    pub words: Vec<String>,
    pub options: Vec<String>,
    pub gold: Label,
}

fn mean_distance(word: &str, words: &[String], table: &EmbeddingTable) -> Result<f64, SideError> {
    let v = table.lookup(word)?;
    let mut sum = 0.0;
    for w in words {
        sum += cosine_distance(v, table.lookup(w)?)?;
    }
    Ok(sum / words.len() as f64)
}

/// The option farthest on average from the stem words; ties go to the
/// earliest option.
pub fn dat_gold(words: &[String], options: &[String], table: &EmbeddingTable) -> Result<Label, SideError> {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, o) in options.iter().enumerate() {
        let d = mean_distance(o, words, table)?;
        if d > best.1 {
            best = (i, d);
        }
    }
    Ok(Label::new(best.0).expect("option count within label range"))
}

pub fn dat_prompt(words: &[String], options: &[String]) -> String {
    let opts: Vec<String> = options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}.{o}", Label::new(i).expect("label")))
        .collect();
    format!(
        "Please carefully understand the provided question and select the option that satisfies the problem. Only one option meets the requirements.\nQuestion: Please select the option least relevant to the current set of words.\n\nWords: {}\n\nOptions: {}\n\nAnswer Format: Please respond in the format of 'Option id. Option content,' for example, 'A. xxx.' Response: Satisfactory option is",
        words.join(" "),
        opts.join("  ")
    )
}

impl DatQuestion {
    pub fn to_choice(&self) -> ChoiceQuestion {
        let m = self.options.len();
        ChoiceQuestion {
            id: self.id.clone(),
            task: TaskType::TextToText,
            lang: Language::En,
            m,
            n: 1,
            stem: dat_prompt(&self.words, &self.options),
            options: self.options.clone(),
            gold: vec![self.gold],
            permutation: (0..m).collect(),
            image_ref: None,
            sample_ref: self.id.clone(),
            meta: BTreeMap::from([
                ("kind".to_string(), "DAT".to_string()),
                ("words".to_string(), self.words.join(" ")),
            ]),
        }
    }

    pub fn from_choice(q: &ChoiceQuestion) -> Result<Self, SideError> {
        let words = q
            .meta
            .get("words")
            .ok_or_else(|| SideError::Argument(format!("question {} has no DAT words", q.id)))?;
        let gold = *q
            .gold
            .first()
            .ok_or_else(|| SideError::Argument(format!("question {} has no gold label", q.id)))?;
        Ok(DatQuestion {
            id: q.id.clone(),
            words: words.split_whitespace().map(str::to_string).collect(),
            options: q.options.clone(),
            gold,
        })
    }
}

/// One question per stem: `option_count` distinct options drawn from `pool`
/// (words not in the stem). Every word must be embeddable.
pub fn build_dat<R: Rng + ?Sized>(
    stems: &[Vec<String>],
    pool: &[String],
    option_count: usize,
    table: &EmbeddingTable,
    rng: &mut R,
) -> Result<Vec<DatQuestion>, SideError> {
    if !(2..=Label::MAX).contains(&option_count) {
        return Err(SideError::Argument(format!("option count {option_count} out of range")));
    }
    let mut out = Vec::with_capacity(stems.len());
    for (i, words) in stems.iter().enumerate() {
        if words.len() < 2 {
            return Err(SideError::Argument(format!("stem {i} has fewer than two words")));
        }
        for w in words {
            table.lookup(w)?;
        }
        let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let candidates: Vec<&String> = pool
            .iter()
            .filter(|p| !lower.contains(&p.to_lowercase()) && table.get(p).is_some())
            .collect();
        let mut uniq: Vec<&String> = Vec::new();
        for c in candidates {
            if !uniq.iter().any(|u| u.eq_ignore_ascii_case(c)) {
                uniq.push(c);
            }
        }
        if uniq.len() < option_count {
            return Err(SideError::Argument(format!(
                "stem {i}: only {} usable pool words for {option_count} options",
                uniq.len()
            )));
        }
        let options: Vec<String> = uniq.choose_multiple(rng, option_count).map(|s| s.to_string()).collect();
        let gold = dat_gold(words, &options, table)?;
        out.push(DatQuestion {
            id: format!("dat/{i}"),
            words: words.clone(),
            options,
            gold,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatScore {
    pub total: usize,
    pub correct: usize,
    pub failed: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_asd: Option<f64>,
    pub scale: f64,
    pub warnings: Vec<String>,
}

/// Accuracy and mean ASD of the completed word sets. A failed parse counts
/// as wrong and contributes the lowest-ASD completion. Questions with words
/// missing from the table are skipped with a warning.
pub fn score_dat(
    questions: &[DatQuestion],
    answers: &[ParsedChoice],
    table: &EmbeddingTable,
    scale: f64,
) -> Result<DatScore, SideError> {
    if questions.len() != answers.len() {
        return Err(SideError::Argument(format!(
            "{} questions but {} answers",
            questions.len(),
            answers.len()
        )));
    }
    let mut s = DatScore {
        total: questions.len(),
        correct: 0,
        failed: 0,
        skipped: 0,
        accuracy: None,
        mean_asd: None,
        scale,
        warnings: Vec::new(),
    };
    let mut asd_sum = 0.0;
    let mut scored = 0usize;
    for (q, a) in questions.iter().zip(answers) {
        let completion = |o: &String| {
            let mut set = q.words.clone();
            set.push(o.clone());
            asd(&set, table)
        };
        let value = match a.picks.first().filter(|_| !a.is_failed()).and_then(|l| q.options.get(l.index())) {
            Some(o) => {
                if a.picks[0] == q.gold {
                    s.correct += 1;
                }
                completion(o)
            }
            None => {
                s.failed += 1;
                q.options
                    .iter()
                    .map(completion)
                    .try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v)))
            }
        };
        match value {
            Ok(v) => {
                asd_sum += v;
                scored += 1;
            }
            Err(e) => {
                s.skipped += 1;
                s.warnings.push(format!("{}: {e}", q.id));
            }
        }
    }
    if s.total > 0 {
        s.accuracy = Some(s.correct as f64 / s.total as f64);
    }
    if scored > 0 {
        s.mean_asd = Some(scale * asd_sum / scored as f64);
    }
    Ok(s)
}

/// Parses `image<ws>category` lines (blank lines and `#` comments skipped).
pub fn parse_cgg_labels(text: &str, origin: &str) -> Result<Vec<(String, String)>, SideError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.rsplitn(2, char::is_whitespace);
        match (parts.next(), parts.next()) {
            (Some(cat), Some(img)) if !img.trim().is_empty() => out.push((img.trim().to_string(), cat.to_string())),
            _ => {
                return Err(SideError::Format {
                    origin: origin.to_string(),
                    line: i + 1,
                    message: "expected `<image> <category>`".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn default_cgg_distractors() -> Vec<String> {
    DEFAULT_CGG_DISTRACTORS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn cgg_prompt(options: &[String], image_ref: &str) -> String {
    let mut s = String::from(
        "Please select the option containing the word that best resembles the shape of the white cloud in the image. Only one option meets the requirements.\n\nOptions:\n",
    );
    for (i, o) in options.iter().enumerate() {
        s.push_str(&format!("{}. {o}\n", Label::new(i).expect("label")));
    }
    s.push_str("Response Format: Please respond in the format of \"Option id. Option content\", for example, \"A. xxx\".\n\nThe satisfactory option is\n");
    s.push_str(&format!("Image: {image_ref}"));
    s
}

/// Three 4T1 questions per image: the true category plus three distractors
/// drawn without replacement, shuffled.
pub fn build_cgg<R: Rng + ?Sized>(
    images: &[(String, String)],
    distractors: &[String],
    rng: &mut R,
) -> Result<Vec<ChoiceQuestion>, SideError> {
    let mut out = Vec::with_capacity(images.len() * CGG_PER_IMAGE);
    for (img, category) in images {
        let pool: Vec<&String> = distractors.iter().filter(|d| !d.eq_ignore_ascii_case(category)).collect();
        if pool.len() < CGG_OPTIONS - 1 {
            return Err(SideError::Argument(format!(
                "need at least {} distractors besides `{category}`, have {}",
                CGG_OPTIONS - 1,
                pool.len()
            )));
        }
        for k in 0..CGG_PER_IMAGE {
            let mut slots: Vec<String> = vec![category.clone()];
            slots.extend(pool.choose_multiple(rng, CGG_OPTIONS - 1).map(|s| s.to_string()));
            let mut permutation: Vec<usize> = (0..CGG_OPTIONS).collect();
            permutation.shuffle(rng);
            let options: Vec<String> = permutation.iter().map(|&p| slots[p].clone()).collect();
            let gold_pos = permutation.iter().position(|&p| p == 0).expect("category present");
            out.push(ChoiceQuestion {
                id: format!("cgg/{img}/{k}"),
                task: TaskType::ImageToText,
                lang: Language::En,
                m: CGG_OPTIONS,
                n: 1,
                stem: cgg_prompt(&options, img),
                options,
                gold: vec![Label::new(gold_pos).expect("label")],
                permutation,
                image_ref: Some(img.clone()),
                sample_ref: img.clone(),
                meta: BTreeMap::from([
                    ("kind".to_string(), "CGG".to_string()),
                    ("category".to_string(), category.clone()),
                ]),
            });
        }
    }
    Ok(out)
}
