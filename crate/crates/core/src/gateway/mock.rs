//! In-process backends: a seeded procedural mock and a transcript replayer.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{prompt_hash, BackendIdentity, GatewayError, LlmBackend, LlmRequest};
use crate::jsonl;
use crate::rng::hash64;
use crate::types::Label;

/// Deterministic stand-in for a chat model.
///
/// Replies are a pure function of (seed, prompt, image, decode seed). The mock
/// recognizes the prompt families this crate renders and answers in their
/// requested formats: rankings as `1. X. ...`, selections as `X. ...`,
/// screening questions with `No.`, and anything else with a short sentence
/// that mentions the `Condition:` noun when one is given. Labels are drawn
/// uniformly, so on choice questions the mock scores at chance.
#[derive(Debug, Clone)]
pub struct ProceduralMock {
    seed: u64,
    images: bool,
}

impl ProceduralMock {
    pub fn new(seed: u64) -> Self {
        ProceduralMock { seed, images: true }
    }

    pub fn text_only(mut self) -> Self {
        self.images = false;
        self
    }

    fn rng(&self, req: &LlmRequest) -> ChaCha8Rng {
        let decode_seed = req.decode.seed.unwrap_or(0).to_le_bytes();
        let h = hash64(&[
            &self.seed.to_le_bytes(),
            req.prompt.as_bytes(),
            req.image_ref.as_deref().unwrap_or("").as_bytes(),
            &decode_seed,
        ]);
        ChaCha8Rng::seed_from_u64(h)
    }
}

const SUBJECTS: &[&str] = &[
    "my landlord", "the moon", "grandma", "the office printer", "a tired pigeon", "my cat",
    "the alarm clock", "a retired superhero", "the fridge", "my horoscope", "the weather app",
    "a philosophical goldfish", "the group chat", "my left sock", "the vending machine",
];
const PREDICATES: &[&str] = &[
    "owes me rent", "filed a complaint about", "is secretly training for", "just unfriended",
    "refuses to negotiate with", "wrote a strongly worded letter to", "is allergic to",
    "started a podcast about", "demands a raise from", "has been impersonating",
    "is in witness protection from", "quit its job because of",
];
const OBJECTS: &[&str] = &[
    "Mondays", "gravity", "the neighbors", "my diet", "the Wi-Fi password", "tax season",
    "a suspicious banana", "the concept of time", "my ex", "the laundry", "spaghetti",
    "its own reflection", "the stairs", "a motivational poster",
];

fn option_lines() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^([A-Z])\. ?(.*)$").expect("static pattern"))
}

fn inline_options() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\.(\S+)").expect("static pattern"))
}

/// Option labels and texts listed in a rendered prompt.
fn listed_options(prompt: &str) -> Vec<(Label, String)> {
    let scan = |re: &Regex| -> Vec<(Label, String)> {
        let mut out: Vec<(Label, String)> = Vec::new();
        for cap in re.captures_iter(prompt) {
            let Some(label) = cap[1].chars().next().and_then(Label::from_char) else {
                continue;
            };
            if label.index() == out.len() {
                out.push((label, cap[2].trim().to_string()));
            }
        }
        out
    };
    let lines = scan(option_lines());
    if lines.len() >= 2 {
        return lines;
    }
    scan(inline_options())
}

fn condition_of(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("Condition: "))
        .map(str::trim)
        .filter(|c| !c.is_empty())
}

impl LlmBackend for ProceduralMock {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "mock".into(),
            model: format!("procedural-{}", self.seed),
        }
    }

    fn supports_images(&self) -> bool {
        self.images
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        let mut rng = self.rng(req);
        let prompt = req.prompt.as_str();
        if prompt.contains("kindly respond with") {
            return Ok("No.".into());
        }
        if prompt.contains("ranking the humorousness") {
            let mut options = listed_options(prompt);
            options.shuffle(&mut rng);
            let parts: Vec<String> = options
                .iter()
                .enumerate()
                .map(|(i, (l, text))| format!("{}. {}. {}.", i + 1, l, text.trim_end_matches('.')))
                .collect();
            return Ok(parts.join(" "));
        }
        if prompt.contains("Option id. Option content") {
            let options = listed_options(prompt);
            let picks = if prompt.contains("Only two options") { 2 } else { 1 };
            let chosen: Vec<&(Label, String)> = options.choose_multiple(&mut rng, picks).collect();
            let lines: Vec<String> = chosen.iter().map(|(l, t)| format!("{l}. {t}")).collect();
            return Ok(lines.join("\n"));
        }
        if prompt.contains("The content of [MASK] is") {
            return Ok(OBJECTS.choose(&mut rng).expect("non-empty").to_string());
        }
        let subject = SUBJECTS.choose(&mut rng).expect("non-empty");
        let predicate = PREDICATES.choose(&mut rng).expect("non-empty");
        let object = match condition_of(prompt) {
            Some(c) => format!("the {c}"),
            None => OBJECTS.choose(&mut rng).expect("non-empty").to_string(),
        };
        Ok(format!("{subject} {predicate} {object}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_hash: String,
    pub reply: String,
}

impl TranscriptEntry {
    pub fn for_prompt(prompt: &str, reply: impl Into<String>) -> Self {
        TranscriptEntry {
            prompt_hash: prompt_hash(prompt),
            reply: reply.into(),
        }
    }
}

/// Replays replies keyed by prompt hash. Unknown prompts go to the fallback
/// backend when one is set, otherwise they fail with `Unscripted`.
pub struct TranscriptBackend {
    replies: HashMap<String, String>,
    fallback: Option<Box<dyn LlmBackend>>,
    images: bool,
}

impl TranscriptBackend {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut replies = HashMap::new();
        for e in entries {
            replies.entry(e.prompt_hash).or_insert(e.reply);
        }
        TranscriptBackend {
            replies,
            fallback: None,
            images: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self, jsonl::JsonlError> {
        let (_, entries) = jsonl::read_file::<TranscriptEntry>(path, None)?;
        Ok(Self::new(entries))
    }

    pub fn with_fallback(mut self, fallback: Box<dyn LlmBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn text_only(mut self) -> Self {
        self.images = false;
        self
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl LlmBackend for TranscriptBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "transcript".into(),
            model: format!("{}-entries", self.replies.len()),
        }
    }

    fn supports_images(&self) -> bool {
        self.images
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        let hash = req.prompt_hash();
        if let Some(reply) = self.replies.get(&hash) {
            return Ok(reply.clone());
        }
        match &self.fallback {
            Some(f) => f.complete(req),
            None => Err(GatewayError::Unscripted(hash)),
        }
    }
}
