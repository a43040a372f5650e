//! Domain types shared by every pipeline stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Oogiri game type, keyed by input modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "I2T")]
    ImageToText,
    #[serde(rename = "T2T")]
    TextToText,
    #[serde(rename = "IT2T")]
    ImageTextToText,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [
        TaskType::ImageTextToText,
        TaskType::ImageToText,
        TaskType::TextToText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::ImageToText => "I2T",
            TaskType::TextToText => "T2T",
            TaskType::ImageTextToText => "IT2T",
        }
    }

    pub fn needs_image(self) -> bool {
        matches!(self, TaskType::ImageToText | TaskType::ImageTextToText)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = ParseTagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I2T" => Ok(TaskType::ImageToText),
            "T2T" => Ok(TaskType::TextToText),
            "IT2T" => Ok(TaskType::ImageTextToText),
            _ => Err(ParseTagError(format!("unknown task type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct ParseTagError(String);

/// Sample language. `Other` carries a free-form tag for corpora outside EN/CN/JP.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Language {
    En,
    Cn,
    Jp,
    Other(String),
}

impl Language {
    pub fn as_str(&self) -> &str {
        match self {
            Language::En => "EN",
            Language::Cn => "CN",
            Language::Jp => "JP",
            Language::Other(tag) => tag,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = ParseTagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tag = s.trim();
        if tag.is_empty() {
            return Err(ParseTagError("empty language tag".into()));
        }
        Ok(match tag.to_ascii_uppercase().as_str() {
            "EN" => Language::En,
            "CN" | "ZH" => Language::Cn,
            "JP" | "JA" => Language::Jp,
            _ => Language::Other(tag.to_string()),
        })
    }
}

impl Serialize for Language {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Language {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Option label `A`, `B`, ... stored as a zero-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(u8);

impl Label {
    pub const MAX: usize = 26;

    pub fn new(index: usize) -> Option<Label> {
        (index < Self::MAX).then_some(Label(index as u8))
    }

    pub fn from_char(c: char) -> Option<Label> {
        c.is_ascii_uppercase().then(|| Label(c as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    /// The first `k` labels; `k` is clamped to 26.
    pub fn first(k: usize) -> Vec<Label> {
        (0..k.min(Self::MAX)).map(|i| Label(i as u8)).collect()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        let mut chars = raw.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Label::from_char(c).ok_or_else(|| serde::de::Error::custom("label must be A-Z"))
            }
            _ => Err(serde::de::Error::custom("label must be a single letter")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likes: Option<i64>,
}

impl Response {
    pub fn new(text: impl Into<String>, likes: Option<i64>) -> Self {
        Response {
            text: text.into(),
            likes,
        }
    }
}

/// One normalized Oogiri question with its human responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OogiriSample {
    pub id: String,
    pub task: TaskType,
    pub lang: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
    pub responses: Vec<Response>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl OogiriSample {
    pub fn query(&self) -> Query {
        Query {
            id: self.id.clone(),
            task: self.task,
            lang: self.lang.clone(),
            image_ref: self.image_ref.clone(),
            question_text: self.question_text.clone(),
        }
    }

    /// Response indices ordered by likes descending; unliked responses sort last,
    /// ties keep input order.
    pub fn by_likes(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.responses.len()).collect();
        idx.sort_by_key(|&i| std::cmp::Reverse(self.responses[i].likes.unwrap_or(-1)));
        idx
    }

    /// The most-liked response (first on ties).
    pub fn top_response(&self) -> Option<&Response> {
        self.by_likes().first().map(|&i| &self.responses[i])
    }

    pub fn has_response_text(&self, text: &str) -> bool {
        let text = text.trim();
        self.responses.iter().any(|r| r.text.trim() == text)
    }
}

/// The input half of an Oogiri item: what a model sees before answering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub task: TaskType,
    pub lang: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    NoResponses,
    MissingImage(TaskType),
    MissingQuestion,
    MaskMissing,
    EmptyResponse { index: usize },
    NegativeLikes { index: usize, likes: i64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => f.write_str("id must be non-empty"),
            Violation::NoResponses => f.write_str("responses must be non-empty"),
            Violation::MissingImage(task) => write!(f, "{task} requires image"),
            Violation::MissingQuestion => f.write_str("T2T requires question text"),
            Violation::MaskMissing => f.write_str("IT2T question text must contain [MASK]"),
            Violation::EmptyResponse { index } => {
                write!(f, "response {index}: text must be non-empty")
            }
            Violation::NegativeLikes { index, likes } => {
                write!(f, "response {index}: likes must be ≥ 0 (got {likes})")
            }
        }
    }
}

pub const MASK_TOKEN: &str = "[MASK]";

/// Every invariant the sample breaks, in a fixed order.
pub fn validate_sample(s: &OogiriSample) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.id.trim().is_empty() {
        out.push(Violation::EmptyId);
    }
    if s.task.needs_image() && s.image_ref.as_deref().is_none_or(|r| r.trim().is_empty()) {
        out.push(Violation::MissingImage(s.task));
    }
    let question = s.question_text.as_deref().map(str::trim).unwrap_or("");
    if s.task == TaskType::TextToText && question.is_empty() {
        out.push(Violation::MissingQuestion);
    }
    if s.task == TaskType::ImageTextToText && !question.is_empty() && !question.contains(MASK_TOKEN) {
        out.push(Violation::MaskMissing);
    }
    if s.responses.is_empty() {
        out.push(Violation::NoResponses);
    }
    for (index, r) in s.responses.iter().enumerate() {
        if r.text.trim().is_empty() {
            out.push(Violation::EmptyResponse { index });
        }
        if let Some(likes) = r.likes.filter(|&l| l < 0) {
            out.push(Violation::NegativeLikes { index, likes });
        }
    }
    out
}

/// Ids appearing more than once, in first-duplicate order.
pub fn duplicate_ids(samples: &[OogiriSample]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) && !dups.contains(&s.id) {
            dups.push(s.id.clone());
        }
    }
    dups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "GEN_COND")]
    GenCond,
    #[serde(rename = "RANK")]
    Rank,
    #[serde(rename = "SELECT")]
    Select,
    #[serde(rename = "MASK")]
    Mask,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Gen => "GEN",
            RecordKind::GenCond => "GEN_COND",
            RecordKind::Rank => "RANK",
            RecordKind::Select => "SELECT",
            RecordKind::Mask => "MASK",
        }
    }
}

/// One rendered instruction-tuning item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub kind: RecordKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub target: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record {0}: GEN_COND requires a non-empty condition")]
    MissingCondition(String),
    #[error("record {0}: {1} records must not carry a condition")]
    UnexpectedCondition(String, &'static str),
    #[error("record {0}: target must be non-empty")]
    EmptyTarget(String),
}

impl InstructionRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        match (self.kind, self.condition.as_deref()) {
            (RecordKind::GenCond, None) => {
                return Err(RecordError::MissingCondition(self.id.clone()))
            }
            (RecordKind::GenCond, Some(c)) if c.trim().is_empty() => {
                return Err(RecordError::MissingCondition(self.id.clone()))
            }
            (RecordKind::GenCond, Some(_)) => {}
            (kind, Some(_)) => {
                return Err(RecordError::UnexpectedCondition(self.id.clone(), kind.as_str()))
            }
            (_, None) => {}
        }
        if self.target.trim().is_empty() {
            return Err(RecordError::EmptyTarget(self.id.clone()));
        }
        Ok(())
    }
}

/// mTn selection variants used for evaluation and selection training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "2T1")]
    TwoT1,
    #[serde(rename = "3T1")]
    ThreeT1,
    #[serde(rename = "4T1")]
    FourT1,
    #[serde(rename = "5T2")]
    FiveT2,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::TwoT1,
        Variant::ThreeT1,
        Variant::FourT1,
        Variant::FiveT2,
    ];

    pub fn options(self) -> usize {
        match self {
            Variant::TwoT1 => 2,
            Variant::ThreeT1 => 3,
            Variant::FourT1 => 4,
            Variant::FiveT2 => 5,
        }
    }

    pub fn picks(self) -> usize {
        match self {
            Variant::FiveT2 => 2,
            _ => 1,
        }
    }

    pub fn from_shape(m: usize, n: usize) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.options() == m && v.picks() == n)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TwoT1 => "2T1",
            Variant::ThreeT1 => "3T1",
            Variant::FourT1 => "4T1",
            Variant::FiveT2 => "5T2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ParseTagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ParseTagError(format!("unknown variant `{s}` (expected 2T1, 3T1, 4T1 or 5T2)")))
    }
}

/// A multiple-choice item: pick `n` of `m` labeled options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceQuestion {
    pub id: String,
    pub task: TaskType,
    pub lang: Language,
    pub m: usize,
    pub n: usize,
    pub stem: String,
    pub options: Vec<String>,
    pub gold: Vec<Label>,
    /// `permutation[display position] = construction slot`.
    pub permutation: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub sample_ref: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuestionError {
    #[error("question {id}: {reason}")]
    Invalid { id: String, reason: String },
}

impl ChoiceQuestion {
    pub fn labels(&self) -> Vec<Label> {
        Label::first(self.m)
    }

    pub fn variant_name(&self) -> String {
        format!("{}T{}", self.m, self.n)
    }

    pub fn option_text(&self, label: Label) -> Option<&str> {
        self.options.get(label.index()).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), QuestionError> {
        let bad = |reason: String| QuestionError::Invalid {
            id: self.id.clone(),
            reason,
        };
        if !(2..=5).contains(&self.m) {
            return Err(bad(format!("option count {} outside 2..=5", self.m)));
        }
        if !(1..=2).contains(&self.n) {
            return Err(bad(format!("pick count {} outside 1..=2", self.n)));
        }
        if self.options.len() != self.m {
            return Err(bad(format!("{} options for m = {}", self.options.len(), self.m)));
        }
        let gold: BTreeSet<Label> = self.gold.iter().copied().collect();
        if gold.len() != self.n || self.gold.len() != self.n {
            return Err(bad(format!("gold has {} labels, expected {}", self.gold.len(), self.n)));
        }
        if gold.iter().any(|l| l.index() >= self.m) {
            return Err(bad("gold label outside the option range".into()));
        }
        if !is_permutation(&self.permutation, self.m) {
            return Err(bad("permutation is not a permutation of the options".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCandidate {
    pub text: String,
    pub likes: u64,
}

/// Rank five candidates by human preference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingQuestion {
    pub id: String,
    pub task: TaskType,
    pub lang: Language,
    pub stem: String,
    pub candidates: Vec<RankCandidate>,
    pub gold_order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub sample_ref: String,
}

pub const RANK_CANDIDATES: usize = 5;

impl RankingQuestion {
    pub fn likes(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.likes).collect()
    }

    pub fn validate(&self) -> Result<(), QuestionError> {
        let bad = |reason: &str| QuestionError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.candidates.len() != RANK_CANDIDATES {
            return Err(bad("ranking questions need exactly 5 candidates"));
        }
        if !is_permutation(&self.gold_order, RANK_CANDIDATES) {
            return Err(bad("gold_order is not a permutation"));
        }
        let likes: Vec<u64> = self.gold_order.iter().map(|&i| self.candidates[i].likes).collect();
        if likes.windows(2).any(|w| w[0] < w[1]) {
            return Err(bad("gold_order likes are not non-increasing"));
        }
        Ok(())
    }
}

pub fn is_permutation(p: &[usize], len: usize) -> bool {
    if p.len() != len {
        return false;
    }
    let mut seen = vec![false; len];
    for &i in p {
        if i >= len || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementParams {
    /// Candidates generated per input.
    pub n: usize,
    /// Probability that a refinement condition is empty.
    pub rho: f64,
    /// Probability that a tuning-time generation record has no condition.
    pub rho_c: f64,
    pub seed: u64,
}

impl Default for RefinementParams {
    fn default() -> Self {
        RefinementParams {
            n: 5,
            rho: 0.5,
            rho_c: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("n must be at least 2 (got {0})")]
    TooFewCandidates(usize),
    #[error("n must be at most 26 (got {0})")]
    TooManyCandidates(usize),
    #[error("rho must lie in [0, 1] (got {0})")]
    Rho(f64),
    #[error("rho_c must lie in [0, 1] (got {0})")]
    RhoC(f64),
}

impl RefinementParams {
    /// Checks ranges. `rho` is accepted on the closed interval so that the
    /// boundary settings (all-empty, never-empty) remain runnable.
    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.n < 2 {
            return Err(ParamsError::TooFewCandidates(self.n));
        }
        if self.n > Label::MAX {
            return Err(ParamsError::TooManyCandidates(self.n));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ParamsError::Rho(self.rho));
        }
        if !(0.0..=1.0).contains(&self.rho_c) {
            return Err(ParamsError::RhoC(self.rho_c));
        }
        Ok(())
    }
}

/// Per-language condition nouns after deny/allow screening.
///
/// The stored sets are already effective: nouns on the deny list (minus any
/// allow override) never appear, and every entry is trimmed and unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NounSet {
    nouns: BTreeMap<Language, Vec<String>>,
    deny: BTreeSet<String>,
    allow_overrides: BTreeSet<String>,
}

impl NounSet {
    pub fn new(
        raw: BTreeMap<Language, Vec<String>>,
        deny: BTreeSet<String>,
        allow_overrides: BTreeSet<String>,
    ) -> Self {
        let mut set = NounSet {
            nouns: BTreeMap::new(),
            deny: deny.into_iter().map(|d| normalize_noun(&d)).filter(|d| !d.is_empty()).collect(),
            allow_overrides: allow_overrides
                .into_iter()
                .map(|a| normalize_noun(&a))
                .filter(|a| !a.is_empty())
                .collect(),
        };
        for (lang, words) in raw {
            set.extend(lang, words);
        }
        set
    }

    pub fn from_words(lang: Language, words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut raw = BTreeMap::new();
        raw.insert(lang, words.into_iter().map(Into::into).collect());
        NounSet::new(raw, BTreeSet::new(), BTreeSet::new())
    }

    fn is_denied(&self, noun: &str) -> bool {
        self.deny.contains(noun) && !self.allow_overrides.contains(noun)
    }

    /// Adds nouns for a language, applying normalization and the deny list.
    pub fn extend(&mut self, lang: Language, words: impl IntoIterator<Item = String>) {
        let fold = lang == Language::En;
        let mut merged: BTreeSet<String> = self.nouns.remove(&lang).unwrap_or_default().into_iter().collect();
        for w in words {
            let mut w = normalize_noun(&w);
            if fold {
                w = w.to_lowercase();
            }
            if !w.is_empty() && !self.is_denied(&w) {
                merged.insert(w);
            }
        }
        self.nouns.insert(lang, merged.into_iter().collect());
    }

    pub fn get(&self, lang: &Language) -> &[String] {
        self.nouns.get(lang).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, lang: &Language, noun: &str) -> bool {
        self.get(lang).binary_search_by(|w| w.as_str().cmp(noun)).is_ok()
    }

    pub fn languages(&self) -> impl Iterator<Item = &Language> {
        self.nouns.keys()
    }

    pub fn counts(&self) -> BTreeMap<Language, usize> {
        self.nouns.iter().map(|(l, w)| (l.clone(), w.len())).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.values().all(Vec::is_empty)
    }

    pub fn deny(&self) -> &BTreeSet<String> {
        &self.deny
    }

    pub fn allow_overrides(&self) -> &BTreeSet<String> {
        &self.allow_overrides
    }
}

pub(crate) fn normalize_noun(s: &str) -> String {
    s.trim().to_string()
}
