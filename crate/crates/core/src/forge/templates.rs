//! Instruction template families and their rendering.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Label, Query, TaskType, Variant, MASK_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Gen,
    Cond,
    Rank,
    Select(Variant),
    Mask,
}

/// One template family for one task type, e.g. `I2T_COND` or `T2T_SELECT_3T1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateId {
    pub task: TaskType,
    pub family: Family,
}

impl TemplateId {
    pub fn new(task: TaskType, family: Family) -> Result<Self, RenderError> {
        if family == Family::Mask && task == TaskType::ImageTextToText {
            return Err(RenderError::Unsupported("MASK_IT2T".into()));
        }
        Ok(TemplateId { task, family })
    }

    pub fn gen(task: TaskType, conditioned: bool) -> Self {
        let family = if conditioned { Family::Cond } else { Family::Gen };
        TemplateId { task, family }
    }

    /// The fourteen families; selection is represented by its 3T1 form.
    pub fn families() -> Vec<TemplateId> {
        let mut out = Vec::new();
        for task in TaskType::ALL {
            for family in [Family::Gen, Family::Cond, Family::Rank, Family::Select(Variant::ThreeT1)] {
                out.push(TemplateId { task, family });
            }
        }
        out.push(TemplateId { task: TaskType::ImageToText, family: Family::Mask });
        out.push(TemplateId { task: TaskType::TextToText, family: Family::Mask });
        out
    }

    pub fn name(&self) -> String {
        let task = self.task.as_str();
        match self.family {
            Family::Gen => format!("{task}_GEN"),
            Family::Cond => format!("{task}_COND"),
            Family::Rank => format!("{task}_RANK"),
            Family::Select(v) => format!("{task}_SELECT_{v}"),
            Family::Mask => format!("MASK_{task}"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("{template}: slot `{slot}` {problem}")]
    Slot {
        template: String,
        slot: &'static str,
        problem: &'static str,
    },
    #[error("{template}: expected {expected} options, got {got}")]
    OptionCount {
        template: String,
        expected: String,
        got: usize,
    },
    #[error("template {0} does not exist")]
    Unsupported(String),
}

/// Values for the variable parts of a template.
#[derive(Debug, Clone, Copy, Default)]
pub struct Slots<'a> {
    pub condition: Option<&'a str>,
    pub options: Option<&'a [String]>,
    /// Answer text with one span replaced by `[MASK]` (mask family only).
    pub masked_answer: Option<&'a str>,
}

impl<'a> Slots<'a> {
    pub fn condition(c: &'a str) -> Self {
        Slots { condition: Some(c), ..Default::default() }
    }

    pub fn options(o: &'a [String]) -> Self {
        Slots { options: Some(o), ..Default::default() }
    }

    pub fn masked(a: &'a str) -> Self {
        Slots { masked_answer: Some(a), ..Default::default() }
    }
}

const NUMBER_WORDS: [&str; 11] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

fn number_word(k: usize) -> String {
    NUMBER_WORDS.get(k).map(|w| w.to_string()).unwrap_or_else(|| k.to_string())
}

fn option_block(options: &[String]) -> String {
    let mut out = String::from("Options:\n");
    for (i, text) in options.iter().enumerate() {
        let label = Label::new(i).expect("option count checked against label range");
        out.push_str(&format!("{label}. {}\n", text.replace(['\r', '\n'], " ")));
    }
    out
}

fn rank_format(k: usize) -> String {
    let example: Vec<String> = Label::first(k)
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {l}. xxx.", i + 1))
        .collect();
    format!(
        "Response Format: Please respond in the format of ranking the humorousness of the options from high to low, for example, \"{}\". Be sure to rank all {} options.\n\nLet's think outside the box. The result of ranking the options from most surprising and funny to least is",
        example.join(" "),
        number_word(k)
    )
}

fn select_format(picks: usize) -> &'static str {
    if picks == 2 {
        "Response Format: Please respond in the format of \"Option id. Option content\", for example, \"A. xxx. B. xxx\".\n\nLet's think outside the box. The satisfactory options are"
    } else {
        "Response Format: Please respond in the format of \"Option id. Option content\", for example, \"A. xxx\".\n\nLet's think outside the box. The satisfactory option is"
    }
}

fn select_head(task: TaskType, picks: usize) -> &'static str {
    match (task, picks == 2) {
        (TaskType::ImageToText, false) => "Please select the option that, when combined with the image, creates an unexpected and humorous effect. Only one option meets the requirements.",
        (TaskType::ImageToText, true) => "Please select the two options that, when combined with the image, create an unexpected and humorous effect. Only two options meet the requirements.",
        (TaskType::TextToText, false) => "Please select the option that, when combined with the question, creates an unexpected and humorous effect. Only one option meets the requirements.",
        (TaskType::TextToText, true) => "Please select the two options that, when combined with the question, create an unexpected and humorous effect. Only two options meet the requirements.",
        (TaskType::ImageTextToText, false) => "In this image, there are sections of text that need to be completed, and the content to fill in is denoted by [MASK]. Please select the option that, creates an unexpected and humorous effect when being the content of the [MASK]. Only one option meets the requirements.",
        (TaskType::ImageTextToText, true) => "In this image, there are sections of text that need to be completed, and the content to fill in is denoted by [MASK]. Please select the two options that, create an unexpected and humorous effect when being the content of the [MASK]. Only two options meet the requirements.",
    }
}

fn rank_head(task: TaskType) -> &'static str {
    match task {
        TaskType::ImageToText => "Please evaluate the degree of unexpected and humorous effect when each of the option contents is combined with the image.",
        TaskType::TextToText => "Please evaluate the degree of unexpected and humorous effect when each of the option contents is combined with the question.",
        TaskType::ImageTextToText => "In this image, there are sections of text that need to be completed, and the content to fill in is denoted by [MASK]. Please evaluate the degree of unexpected and humorous effect when the options are the content of the [MASK].",
    }
}

/// Renders a template for `q`. Every slot the family needs must be given and
/// every slot it does not use must be absent.
pub fn render(tid: TemplateId, q: &Query, slots: &Slots) -> Result<String, RenderError> {
    let name = tid.name();
    let slot_err = |slot: &'static str, problem: &'static str| RenderError::Slot {
        template: name.clone(),
        slot,
        problem,
    };

    let wants_condition = tid.family == Family::Cond;
    let wants_options = matches!(tid.family, Family::Rank | Family::Select(_));
    let wants_mask = tid.family == Family::Mask;
    match (wants_condition, slots.condition.map(str::trim)) {
        (true, None) => return Err(slot_err("condition", "is required")),
        (true, Some("")) => return Err(slot_err("condition", "must be non-empty")),
        (false, Some(_)) => return Err(slot_err("condition", "is not used by this template")),
        _ => {}
    }
    match (wants_options, slots.options) {
        (true, None) => return Err(slot_err("options", "is required")),
        (false, Some(_)) => return Err(slot_err("options", "is not used by this template")),
        _ => {}
    }
    match (wants_mask, slots.masked_answer) {
        (true, None) => return Err(slot_err("masked_answer", "is required")),
        (true, Some(a)) if !a.contains(MASK_TOKEN) => {
            return Err(slot_err("masked_answer", "must contain [MASK]"))
        }
        (false, Some(_)) => return Err(slot_err("masked_answer", "is not used by this template")),
        _ => {}
    }

    let image = || -> Result<String, RenderError> {
        match q.image_ref.as_deref().map(str::trim) {
            Some(i) if !i.is_empty() => Ok(format!("Image: {i}")),
            _ => Err(slot_err("image", "is required")),
        }
    };
    let question = || -> Result<&str, RenderError> {
        match q.question_text.as_deref().map(str::trim) {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(slot_err("question", "is required")),
        }
    };
    if tid.task == TaskType::ImageTextToText {
        let ctx = question().map_err(|_| slot_err("question", "must hold the [MASK] context"))?;
        if !ctx.contains(MASK_TOKEN) {
            return Err(slot_err("question", "must hold the [MASK] context"));
        }
    }
    let condition = slots.condition.map(str::trim).unwrap_or_default();
    let options = slots.options.unwrap_or_default();
    if options.iter().any(|o| o.trim().is_empty()) {
        return Err(slot_err("options", "entries must be non-empty"));
    }
    match tid.family {
        Family::Rank if options.len() < 2 || options.len() > Label::MAX => {
            return Err(RenderError::OptionCount {
                template: name.clone(),
                expected: format!("2..={}", Label::MAX),
                got: options.len(),
            })
        }
        Family::Select(v) if options.len() != v.options() => {
            return Err(RenderError::OptionCount {
                template: name.clone(),
                expected: v.options().to_string(),
                got: options.len(),
            })
        }
        _ => {}
    }

    use Family::*;
    use TaskType::*;
    let text = match (tid.task, tid.family) {
        (ImageToText, Gen) => format!(
            "Based on the image, think of a sentence that is unexpected and humorous. Let's think outside the box. A satisfactory response is\n{}",
            image()?
        ),
        (ImageToText, Cond) => format!(
            "Please carefully understand the image and give an answer that contains conditional words and is surprising and funny. Let's think outside the box. A surprising and funny answer containing conditional word is\nCondition: {condition}\n{}",
            image()?
        ),
        (TextToText, Gen) => format!(
            "Please carefully understand the provided question and come up with a surprising and humorous response.\nQuestion: {}\nLet's think outside the box. A satisfactory response is",
            question()?
        ),
        (TextToText, Cond) => format!(
            "Please carefully understand the question and give an answer that contains conditional words and is surprising and funny.\nQuestion: {}\nLet's think outside the box. A surprising and funny answer containing conditional word is\nCondition: {condition}",
            question()?
        ),
        (ImageTextToText, Gen) => format!(
            "In this image, there are sections of text that need to be completed, and the content to fill in is denoted by [MASK]. Let's think outside the box and complete the [MASK] to make the response unexpectedly funny. A satisfactory response is\n{}",
            image()?
        ),
        (ImageTextToText, Cond) => format!(
            "In this image, there are sections of text that need to be completed, and the content to fill in is denoted by [MASK]. Let's think outside the box and complete the [MASK] with a response that contains conditional words and is surprising and funny. A surprising and funny response containing conditional word is\nCondition: {condition}\n{}",
            image()?
        ),
        (task, Rank) => {
            let mut s = format!("{}\n\n", rank_head(task));
            if task == TextToText {
                s.push_str(&format!("Question: {}\n", question()?));
            }
            s.push_str(&option_block(options));
            s.push_str(&rank_format(options.len()));
            if task != TextToText {
                s.push('\n');
                s.push_str(&image()?);
            }
            s
        }
        (task, Select(v)) => {
            let mut s = format!("{}\n\n", select_head(task, v.picks()));
            if task == TextToText {
                s.push_str(&format!("Question: {}\n", question()?));
            }
            s.push_str(&option_block(options));
            s.push_str(select_format(v.picks()));
            if task != TextToText {
                s.push('\n');
                s.push_str(&image()?);
            }
            s
        }
        (ImageToText, Mask) => format!(
            "Please carefully understand the provided image and complete the answer by replacing the [MASK] part to make the answer unexpectedly funny.\n\nAnswer: {}\nLet's think outside the box. The content of [MASK] is\n{}",
            slots.masked_answer.unwrap_or_default(),
            image()?
        ),
        (TextToText, Mask) => format!(
            "Please carefully understand the provided question and complete the answer by replacing the [MASK] part to make the answer unexpectedly funny.\n\nQuestion: {}\nAnswer: {}\nLet's think outside the box. The content of [MASK] is",
            question()?,
            slots.masked_answer.unwrap_or_default()
        ),
        (ImageTextToText, Mask) => return Err(RenderError::Unsupported(name)),
    };
    Ok(text)
}
