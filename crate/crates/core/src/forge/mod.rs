//! Instruction templates and the builders that turn samples into training
//! records and evaluation questions.

mod build;
mod corpus;
mod providers;
mod templates;

pub use build::*;
pub use corpus::{formulate_corpus, FormulateParams, FormulateStats, Formulated};
pub use providers::{
    BackendProviders, CaptionEntry, DistractorProviders, ProviderError, RewriteEntry, SyntheticProviders,
    TableProviders, DEFAULT_REWRITE_PROMPT,
};
pub use templates::{render, Family, RenderError, Slots, TemplateId};
