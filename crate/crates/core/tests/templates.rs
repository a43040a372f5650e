use std::path::PathBuf;

use clot_core::forge::{render, Family, RenderError, Slots, TemplateId};
use clot_core::{Language, Query, TaskType};

fn query(task: TaskType) -> Query {
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

fn options(k: usize) -> Vec<String> {
    ["first", "second", "third", "fourth", "fifth"][..k]
        .iter()
        .map(|w| format!("{w} option"))
        .collect()
}

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/goldens").join(format!("{name}.txt"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

fn render_family(tid: TemplateId) -> Result<String, RenderError> {
    let q = query(tid.task);
    let five = options(5);
    let three = options(3);
    let slots = match tid.family {
        Family::Gen => Slots::default(),
        Family::Cond => Slots::condition("banana"),
        Family::Rank => Slots::options(&five),
        Family::Select(_) => Slots::options(&three),
        Family::Mask => Slots::masked("The [MASK] ate my homework"),
    };
    render(tid, &q, &slots)
}

#[test]
fn every_family_matches_its_golden() {
    let families = TemplateId::families();
    assert_eq!(families.len(), 14);
    for tid in families {
        assert_eq!(render_family(tid).unwrap(), golden(&tid.name()), "{tid}");
    }
}

#[test]
fn key_phrases_are_verbatim() {
    let all: String = TemplateId::families().into_iter().map(|t| golden(&t.name())).collect();
    for phrase in [
        "think of a sentence that is unexpected and humorous",
        "ranking the humorousness of the options from high to low",
        "Option id. Option content",
        "denoted by [MASK]",
    ] {
        assert!(all.contains(phrase), "{phrase}");
    }
}

#[test]
fn rendering_is_stable_across_calls() {
    for tid in TemplateId::families() {
        assert_eq!(render_family(tid).unwrap(), render_family(tid).unwrap());
    }
}
