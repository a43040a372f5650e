//! Sources of caption and rewrite distractors for choice questions.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{DecodeSettings, Gateway, LlmRequest};
use crate::jsonl;
use crate::rng::hash64;
use crate::types::{OogiriSample, TaskType};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("no {kind} for `{key}`")]
    Missing { kind: &'static str, key: String },
    #[error("{0}")]
    Backend(String),
}

/// Caption and rewrite roles of the distractor recipe. Implementations must be
/// deterministic for fixed inputs.
pub trait DistractorProviders: Send + Sync {
    /// A literal description of the sample's input (image caption for image
    /// tasks, a plain restatement for text tasks).
    fn caption(&self, s: &OogiriSample) -> Result<String, ProviderError>;

    /// A rewrite of a ground-truth response.
    fn rewrite(&self, text: &str) -> Result<String, ProviderError>;
}

/// Offline providers built from fixed phrase lists, keyed by a hash of the
/// input. Useful for tests and for dry runs without a captioning model.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticProviders;

const SCENES: &[&str] = &[
    "a dog sitting on the grass", "a man holding an umbrella", "a cat on a sofa", "two people at a table",
    "a bowl of noodles", "a car parked on a street", "a child with a balloon", "a bird on a wire",
    "an empty office", "a cup of coffee on a desk", "a crowded train platform", "a cake with candles",
];

impl DistractorProviders for SyntheticProviders {
    fn caption(&self, s: &OogiriSample) -> Result<String, ProviderError> {
        let key = s.image_ref.as_deref().or(s.question_text.as_deref()).unwrap_or(&s.id);
        let scene = SCENES[(hash64(&[key.as_bytes()]) % SCENES.len() as u64) as usize];
        Ok(match s.task {
            TaskType::TextToText => format!("a plain answer about {scene}"),
            _ => format!("a photo of {scene}"),
        })
    }

    fn rewrite(&self, text: &str) -> Result<String, ProviderError> {
        Ok(format!("In other words, {}", text.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub sample_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteEntry {
    pub text: String,
    pub rewrite: String,
}

/// Precomputed captions (by sample id) and rewrites (by exact trimmed text).
#[derive(Debug, Clone, Default)]
pub struct TableProviders {
    captions: HashMap<String, String>,
    rewrites: HashMap<String, String>,
}

impl TableProviders {
    pub fn new(captions: Vec<CaptionEntry>, rewrites: Vec<RewriteEntry>) -> Self {
        TableProviders {
            captions: captions.into_iter().map(|c| (c.sample_id, c.caption)).collect(),
            rewrites: rewrites.into_iter().map(|r| (r.text.trim().to_string(), r.rewrite)).collect(),
        }
    }

    pub fn load(captions: &Path, rewrites: &Path) -> Result<Self, jsonl::JsonlError> {
        let (_, c) = jsonl::read_file(captions, None)?;
        let (_, r) = jsonl::read_file(rewrites, None)?;
        Ok(Self::new(c, r))
    }
}

impl DistractorProviders for TableProviders {
    fn caption(&self, s: &OogiriSample) -> Result<String, ProviderError> {
        self.captions.get(&s.id).cloned().ok_or_else(|| ProviderError::Missing {
            kind: "caption",
            key: s.id.clone(),
        })
    }

    fn rewrite(&self, text: &str) -> Result<String, ProviderError> {
        self.rewrites.get(text.trim()).cloned().ok_or_else(|| ProviderError::Missing {
            kind: "rewrite",
            key: text.trim().to_string(),
        })
    }
}

/// Asks a model for captions and rewrites with greedy decoding.
pub struct BackendProviders {
    gateway: Arc<Gateway>,
    rewrite_prompt: String,
}

pub const DEFAULT_REWRITE_PROMPT: &str =
    "Rewrite the following sentence so that it keeps its meaning but uses different words.\nSentence: {text}\nRewritten sentence:";

impl BackendProviders {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        BackendProviders {
            gateway,
            rewrite_prompt: DEFAULT_REWRITE_PROMPT.to_string(),
        }
    }

    /// Overrides the rewrite instruction; `{text}` marks the response.
    pub fn with_rewrite_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.rewrite_prompt = prompt.into();
        self
    }

    fn ask(&self, prompt: String, image: Option<String>) -> Result<String, ProviderError> {
        let req = LlmRequest::new(prompt, image, DecodeSettings::discrimination());
        let reply = self
            .gateway
            .complete(&req)
            .map_err(|e| ProviderError::Backend(e.to_string()))?;
        let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        if line.is_empty() {
            return Err(ProviderError::Backend("empty reply".into()));
        }
        Ok(line.to_string())
    }
}

impl DistractorProviders for BackendProviders {
    fn caption(&self, s: &OogiriSample) -> Result<String, ProviderError> {
        match (s.task, &s.image_ref) {
            (TaskType::TextToText, _) | (_, None) => self.ask(
                format!(
                    "Give a plain, literal answer to the question in one short sentence.\nQuestion: {}",
                    s.question_text.as_deref().unwrap_or_default()
                ),
                None,
            ),
            (_, Some(img)) => self.ask(
                format!("Describe the image in one short, literal sentence.\nImage: {img}"),
                self.gateway.supports_images().then(|| img.clone()),
            ),
        }
    }

    fn rewrite(&self, text: &str) -> Result<String, ProviderError> {
        self.ask(self.rewrite_prompt.replace("{text}", text.trim()), None)
    }
}
