//! Crawl ingestion: parse raw answer records, group them into samples,
//! screen them with an LLM, and split train/test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::gateway::{DecodeSettings, Gateway, GatewayError, LlmRequest};
use crate::rng;
use crate::types::{Language, OogiriSample, Response, TaskType};

/// Image information attached to every crawled answer; `pid` is the question id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pics {
    pub pid: String,
    pub url: String,
}

/// One answer line as written by the crawler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCrawlRecord {
    pub id: String,
    pub text: String,
    pub attitudes_count: String,
    pub created_at: String,
    pub pics: Pics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

/// Parses line-delimited crawl records. Malformed lines become positioned
/// errors; blank lines are ignored.
pub fn parse_raw(input: &str) -> (Vec<RawCrawlRecord>, Vec<LineError>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawCrawlRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(LineError {
                line: i + 1,
                reason: strip_position(&e.to_string()),
            }),
        }
    }
    (records, errors)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(pos) => msg[..pos].replace('`', ""),
        None => msg.replace('`', ""),
    }
}

/// Serializes a record in the crawler's own layout (`json.dumps` default
/// separators, non-ASCII kept verbatim).
pub fn serialize_raw(r: &RawCrawlRecord) -> String {
    let s = |v: &str| serde_json::to_string(v).expect("strings serialize");
    format!(
        "{{\"id\": {}, \"text\": {}, \"attitudes_count\": {}, \"created_at\": {}, \"pics\": {{\"pid\": {}, \"url\": {}}}}}",
        s(&r.id),
        s(&r.text),
        s(&r.attitudes_count),
        s(&r.created_at),
        s(&r.pics.pid),
        s(&r.pics.url)
    )
}

/// Parses a like count such as `"1,234"` or `" 42 "`. Negative or
/// non-numeric values yield `None`.
pub fn parse_likes(raw: &str) -> Option<i64> {
    let cleaned: String = raw
        .trim()
        .chars()
        .filter(|c| !matches!(c, ',' | '，' | '_' | ' ' | '\u{a0}' | '\''))
        .collect();
    if cleaned.is_empty() || !cleaned.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    cleaned.parse().ok()
}

fn is_kana(c: char) -> bool {
    matches!(c, '\u{3040}'..='\u{309F}' | '\u{30A0}'..='\u{30FF}' | '\u{31F0}'..='\u{31FF}' | '\u{FF66}'..='\u{FF9F}')
}

fn is_han(c: char) -> bool {
    matches!(c, '\u{4E00}'..='\u{9FFF}' | '\u{3400}'..='\u{4DBF}' | '\u{F900}'..='\u{FAFF}' | '\u{20000}'..='\u{2A6DF}')
}

fn is_latin(c: char) -> bool {
    c.is_ascii_alphabetic() || matches!(c, '\u{00C0}'..='\u{024F}')
}

/// Script heuristic: CJK-dominant text is JP when any kana occurs, CN
/// otherwise; Latin-dominant text is EN. Anything else is tagged `und`.
pub fn detect_language(text: &str) -> Language {
    let (mut kana, mut han, mut latin) = (0usize, 0usize, 0usize);
    for c in text.chars() {
        if is_kana(c) {
            kana += 1;
        } else if is_han(c) {
            han += 1;
        } else if is_latin(c) {
            latin += 1;
        }
    }
    let cjk = kana + han;
    if cjk > 0 && cjk >= latin {
        if kana > 0 {
            Language::Jp
        } else {
            Language::Cn
        }
    } else if latin > 0 {
        Language::En
    } else {
        Language::Other("und".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Normalized {
    pub samples: Vec<OogiriSample>,
    pub warnings: Vec<IngestWarning>,
}

/// Groups crawl records by question id into samples.
///
/// Crawled questions are image posts, so every sample is I2T with the
/// question image as `image_ref`. Samples appear in first-seen order and
/// responses keep input order.
pub fn normalize(records: &[RawCrawlRecord], lang_hint: Option<&Language>) -> Normalized {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&RawCrawlRecord>> = HashMap::new();
    for r in records {
        let entry = groups.entry(r.pics.pid.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.pics.pid.clone());
        }
        entry.push(r);
    }

    let mut out = Normalized::default();
    for pid in order {
        let group = &groups[pid.as_str()];
        let mut responses = Vec::with_capacity(group.len());
        for r in group {
            let likes = parse_likes(&r.attitudes_count);
            if likes.is_none() {
                warn!(record = %r.id, raw = %r.attitudes_count, "unparseable like count");
                out.warnings.push(IngestWarning {
                    record_id: r.id.clone(),
                    message: format!("unparseable likes `{}`", r.attitudes_count),
                });
            }
            responses.push(Response::new(r.text.trim(), likes));
        }
        let lang = match lang_hint {
            Some(l) => l.clone(),
            None => {
                let joined: String = group.iter().map(|r| r.text.as_str()).collect::<Vec<_>>().join(" ");
                detect_language(&joined)
            }
        };
        let first = group[0];
        out.samples.push(OogiriSample {
            id: pid.clone(),
            task: TaskType::ImageToText,
            lang,
            image_ref: Some(first.pics.url.clone()).filter(|u| !u.is_empty()),
            question_text: None,
            responses,
            created_at: Some(first.created_at.clone()).filter(|t| !t.is_empty()),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    pub merged_samples: usize,
    pub dropped_responses: usize,
}

/// Merges samples sharing an id and collapses responses with identical
/// trimmed text (keeping the first position and the larger like count).
pub fn dedup(samples: Vec<OogiriSample>) -> (Vec<OogiriSample>, DedupStats) {
    let mut stats = DedupStats::default();
    let mut out: Vec<OogiriSample> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for s in samples {
        match index.get(&s.id) {
            Some(&i) => {
                stats.merged_samples += 1;
                out[i].responses.extend(s.responses);
            }
            None => {
                index.insert(s.id.clone(), out.len());
                out.push(s);
            }
        }
    }
    for s in &mut out {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut kept: Vec<Response> = Vec::with_capacity(s.responses.len());
        for r in s.responses.drain(..) {
            let key = r.text.trim().to_string();
            match seen.get(&key) {
                Some(&i) => {
                    stats.dropped_responses += 1;
                    kept[i].likes = match (kept[i].likes, r.likes) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        (a, b) => a.or(b),
                    };
                }
                None => {
                    seen.insert(key, kept.len());
                    kept.push(r);
                }
            }
        }
        s.responses = kept;
    }
    (out, stats)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("safety prompt needs a non-empty {0}")]
    EmptyArgument(&'static str),
    #[error("split ratio must lie in (0, 1] (got {0})")]
    Ratio(f64),
}

/// Fills the machine-screening template. The label is trimmed first.
pub fn render_safety_prompt(label: &str, text: &str) -> Result<String, IngestError> {
    let label = label.trim();
    if label.is_empty() {
        return Err(IngestError::EmptyArgument("label"));
    }
    if text.trim().is_empty() {
        return Err(IngestError::EmptyArgument("text"));
    }
    Ok(format!(
        "Does the image or text contain content related to {label}? Or the combination of image and text shows the metaphor related to {label}? If so, kindly respond with \"Yes\"; otherwise, respond with \"No.\"\n\nHere is the text: {text}"
    ))
}

/// Default screening labels shipped with the crate.
pub const DEFAULT_LABELS: &str = include_str!("../data/safety_labels.txt");

pub fn read_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// True when the reply's first token, stripped of punctuation and
/// case-folded, is "yes".
pub fn is_yes(reply: &str) -> bool {
    reply
        .split_whitespace()
        .next()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase() == "yes")
        .unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: String,
    pub label: String,
    pub reply: String,
    pub verdict: VerdictKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictKind {
    Flag,
    Pass,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScreenOptions {
    /// Extra attempts per (sample, label) call after a backend failure.
    pub retries: u32,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        ScreenOptions { retries: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedSample {
    pub sample: OogiriSample,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ScreenOutcome {
    pub kept: Vec<OogiriSample>,
    pub flagged: Vec<FlaggedSample>,
    /// Samples whose screening could not complete within the retry budget.
    pub retry: Vec<OogiriSample>,
    pub log: Vec<Verdict>,
}

/// Screens every sample against every label. Calls run in parallel under
/// the gateway's in-flight cap; outputs keep input order.
pub fn screen(
    samples: &[OogiriSample],
    labels: &[String],
    gateway: &Gateway,
    opts: ScreenOptions,
) -> ScreenOutcome {
    let labels: Vec<&str> = labels.iter().map(|l| l.trim()).filter(|l| !l.is_empty()).collect();
    let images = gateway.supports_images();
    let per_sample = crate::gateway::map_bounded(samples, gateway.max_inflight(), |_, s| {
        let text = s
            .responses
            .iter()
            .map(|r| r.text.trim())
            .collect::<Vec<_>>()
            .join("\n");
        labels
            .iter()
            .map(|label| {
                let prompt = render_safety_prompt(label, &text).expect("label and text checked non-empty");
                let req = LlmRequest {
                    prompt,
                    image_ref: if images { s.image_ref.clone() } else { None },
                    decode: DecodeSettings::discrimination(),
                };
                let mut last: Result<String, GatewayError> = Err(GatewayError::Backend("not attempted".into()));
                for _ in 0..=opts.retries {
                    last = gateway.complete(&req);
                    if last.is_ok() {
                        break;
                    }
                }
                (label.to_string(), last)
            })
            .collect::<Vec<_>>()
    });

    let mut out = ScreenOutcome::default();
    for (s, results) in samples.iter().zip(per_sample) {
        let mut hit = Vec::new();
        let mut failed = false;
        for (label, result) in results {
            let (reply, verdict) = match result {
                Ok(reply) if is_yes(&reply) => (reply, VerdictKind::Flag),
                Ok(reply) => (reply, VerdictKind::Pass),
                Err(e) => (e.to_string(), VerdictKind::Error),
            };
            match verdict {
                VerdictKind::Flag => hit.push(label.clone()),
                VerdictKind::Error => failed = true,
                VerdictKind::Pass => {}
            }
            out.log.push(Verdict {
                sample_id: s.id.clone(),
                label,
                reply,
                verdict,
            });
        }
        if !hit.is_empty() {
            out.flagged.push(FlaggedSample {
                sample: s.clone(),
                labels: hit,
            });
        } else if failed {
            out.retry.push(s.clone());
        } else {
            out.kept.push(s.clone());
        }
    }
    out
}

/// Applies human review lists after machine screening: denied ids leave the
/// kept set, allowed ids are rescued from the flagged set.
pub fn apply_manual_lists(outcome: &mut ScreenOutcome, allow: &BTreeSet<String>, deny: &BTreeSet<String>) {
    let (rescued, still): (Vec<_>, Vec<_>) = std::mem::take(&mut outcome.flagged)
        .into_iter()
        .partition(|f| allow.contains(&f.sample.id) && !deny.contains(&f.sample.id));
    outcome.flagged = still;
    outcome.kept.extend(rescued.into_iter().map(|f| f.sample));
    let (denied, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut outcome.kept)
        .into_iter()
        .partition(|s| deny.contains(&s.id));
    outcome.kept = kept;
    outcome.flagged.extend(denied.into_iter().map(|sample| FlaggedSample {
        sample,
        labels: vec!["manual".into()],
    }));
}

/// Drops samples whose id is on the deny list.
pub fn drop_denied(samples: Vec<OogiriSample>, deny: &BTreeSet<String>) -> Vec<OogiriSample> {
    samples.into_iter().filter(|s| !deny.contains(&s.id)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SplitOutcome {
    pub manifest: SplitManifest,
    pub warnings: Vec<String>,
}

impl Default for SplitManifest {
    fn default() -> Self {
        SplitManifest {
            seed: 0,
            ratio: DEFAULT_TRAIN_RATIO,
            train_ids: Vec::new(),
            test_ids: Vec::new(),
        }
    }
}

pub const DEFAULT_TRAIN_RATIO: f64 = 0.95;

/// Number of test items drawn from a stratum of `size`.
fn test_count(size: usize, ratio: f64) -> usize {
    if size < 2 || ratio >= 1.0 {
        return 0;
    }
    let train = (size as f64 * ratio).round() as usize;
    (size - train.min(size)).max(1)
}

/// Stratified random split by (task, language). Id lists follow input order.
pub fn split(samples: &[OogiriSample], ratio: f64, seed: u64) -> Result<SplitOutcome, IngestError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(IngestError::Ratio(ratio));
    }
    let mut strata: BTreeMap<(TaskType, Language), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry((s.task, s.lang.clone())).or_default().push(i);
    }
    let mut is_test = vec![false; samples.len()];
    let mut warnings = Vec::new();
    for ((task, lang), members) in &strata {
        if members.len() == 1 {
            warnings.push(format!(
                "stratum {task}/{lang} has a single sample ({}); assigned to train",
                samples[members[0]].id
            ));
            continue;
        }
        let k = test_count(members.len(), ratio);
        let mut rng = rng::substream(seed, "split", &format!("{task}/{lang}"));
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..k] {
            is_test[i] = true;
        }
    }
    let mut manifest = SplitManifest {
        seed,
        ratio,
        train_ids: Vec::new(),
        test_ids: Vec::new(),
    };
    for (s, test) in samples.iter().zip(is_test) {
        if test {
            manifest.test_ids.push(s.id.clone());
        } else {
            manifest.train_ids.push(s.id.clone());
        }
    }
    Ok(SplitOutcome { manifest, warnings })
}

/// Partitions samples according to a manifest (samples not listed are dropped).
pub fn apply_split(samples: &[OogiriSample], manifest: &SplitManifest) -> (Vec<OogiriSample>, Vec<OogiriSample>) {
    let train: BTreeSet<&str> = manifest.train_ids.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = manifest.test_ids.iter().map(String::as_str).collect();
    let pick = |set: &BTreeSet<&str>| samples.iter().filter(|s| set.contains(s.id.as_str())).cloned().collect();
    (pick(&train), pick(&test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnBackend, Gateway};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    const EXAMPLE: &str = r#"{"id":"1","text":"a","attitudes_count":"42","created_at":"t","pics":{"pid":"6902364","url":"u"}}"#;

    fn raw(id: &str, pid: &str, text: &str, likes: &str) -> RawCrawlRecord {
        RawCrawlRecord {
            id: id.into(),
            text: text.into(),
            attitudes_count: likes.into(),
            created_at: "2023-01-01".into(),
            pics: Pics {
                pid: pid.into(),
                url: format!("https://img/{pid}.jpg"),
            },
        }
    }

    #[test]
    fn parses_the_crawler_example() {
        let (records, errors) = parse_raw(EXAMPLE);
        assert!(errors.is_empty());
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].pics.pid, "6902364");
        assert_eq!(records[0].attitudes_count, "42");
    }

    #[test]
    fn empty_input_is_vacuous() {
        let (records, errors) = parse_raw("");
        assert!(records.is_empty() && errors.is_empty());
    }

    #[test]
    fn missing_pics_is_a_positioned_error() {
        let input = format!("{EXAMPLE}\n{}\n{EXAMPLE}", r#"{"id":"2","text":"b","attitudes_count":"1","created_at":"t"}"#);
        let (records, errors) = parse_raw(&input);
        assert_eq!(records.len(), 2);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line, 2);
        assert_eq!(errors[0].reason, "missing field pics");
    }

    #[test]
    fn crawler_layout_round_trips() {
        let r = raw("9", "6902364", "猫が\"走る\"", "1,204");
        let line = serialize_raw(&r);
        assert!(line.starts_with("{\"id\": \"9\", \"text\": "));
        let (back, errors) = parse_raw(&line);
        assert!(errors.is_empty());
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn likes_parsing() {
        assert_eq!(parse_likes("42"), Some(42));
        assert_eq!(parse_likes(" 1,234 "), Some(1234));
        assert_eq!(parse_likes("n/a"), None);
        assert_eq!(parse_likes("-3"), None);
        assert_eq!(parse_likes(""), None);
    }

    #[test]
    fn grouping_by_question_id() {
        // Hand-applied grouping: both records share pid 6902364, so one sample
        // with two responses in input order and likes 3 then 7.
        let records = vec![raw("a", "6902364", "first", "3"), raw("b", "6902364", "second", "7")];
        let n = normalize(&records, Some(&Language::En));
        assert_eq!(n.samples.len(), 1);
        let s = &n.samples[0];
        assert_eq!(s.id, "6902364");
        assert_eq!(s.task, TaskType::ImageToText);
        assert_eq!(
            s.responses,
            vec![Response::new("first", Some(3)), Response::new("second", Some(7))]
        );
        assert!(n.warnings.is_empty());
    }

    #[test]
    fn language_heuristic() {
        assert_eq!(detect_language("こんにちは"), Language::Jp);
        assert_eq!(detect_language("我的猫会飞"), Language::Cn);
        assert_eq!(detect_language("猫がいる"), Language::Jp);
        assert_eq!(detect_language("the cat flies"), Language::En);
        assert_eq!(detect_language("1234 !!"), Language::Other("und".into()));
        let n = normalize(&[raw("a", "p", "こんにちは", "1")], None);
        assert_eq!(n.samples[0].lang, Language::Jp);
    }

    #[test]
    fn unparseable_likes_warn() {
        let n = normalize(&[raw("a", "p", "x", "n/a")], None);
        assert_eq!(n.samples[0].responses[0].likes, None);
        assert_eq!(n.warnings.len(), 1);
        assert_eq!(n.warnings[0].record_id, "a");
    }

    #[test]
    fn dedup_merges_and_collapses() {
        let n = normalize(
            &[raw("a", "p", "same", "3"), raw("b", "p", " same ", "9"), raw("c", "q", "other", "1")],
            Some(&Language::En),
        );
        let mut samples = n.samples.clone();
        samples.push(n.samples[1].clone());
        let (out, stats) = dedup(samples);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].responses, vec![Response::new("same", Some(9))]);
        assert_eq!(out[1].responses.len(), 1);
        assert_eq!(stats, DedupStats { merged_samples: 1, dropped_responses: 2 });
    }

    #[test]
    fn safety_prompt_template() {
        let p = render_safety_prompt("violence", "a joke").unwrap();
        assert!(p.contains("related to violence"));
        assert!(p.contains("Here is the text: a joke"));
        assert!(p.contains("If so, kindly respond with"));
        assert_eq!(render_safety_prompt("", "x"), Err(IngestError::EmptyArgument("label")));
        assert_eq!(render_safety_prompt("violence ", "x").unwrap(), render_safety_prompt("violence", "x").unwrap());
    }

    #[test]
    fn yes_detection() {
        assert!(is_yes("Yes"));
        assert!(is_yes("  yes."));
        assert!(is_yes("YES! it does"));
        assert!(!is_yes("No."));
        assert!(!is_yes("Yesterday"));
        assert!(!is_yes(""));
    }

    fn samples(n: usize, task: TaskType, lang: Language) -> Vec<OogiriSample> {
        (0..n)
            .map(|i| OogiriSample {
                id: format!("{task}-{lang}-{i}"),
                task,
                lang: lang.clone(),
                image_ref: Some("img".into()),
                question_text: Some("q".into()),
                responses: vec![Response::new(format!("r{i}"), Some(1))],
                created_at: None,
            })
            .collect()
    }

    fn gateway(f: impl Fn(&LlmRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Gateway {
        Gateway::new(Arc::new(FnBackend::new("scripted", f)))
    }

    #[test]
    fn screen_all_no_keeps_everything() {
        let s = samples(3, TaskType::ImageToText, Language::En);
        let g = gateway(|_| Ok("No.".into()));
        let out = screen(&s, &["violence".into(), "explicit content".into()], &g, ScreenOptions::default());
        assert_eq!(out.kept, s);
        assert!(out.flagged.is_empty() && out.retry.is_empty());
        assert_eq!(out.log.len(), 6);
    }

    #[test]
    fn screen_flags_on_matching_label() {
        let s = samples(2, TaskType::ImageToText, Language::En);
        let g = gateway(|req| {
            Ok(if req.prompt.contains("related to violence") { "Yes" } else { "No" }.into())
        });
        let out = screen(&s, &["violence".into(), "bias".into()], &g, ScreenOptions::default());
        assert!(out.kept.is_empty());
        assert_eq!(out.flagged.len(), 2);
        assert_eq!(out.flagged[0].labels, vec!["violence".to_string()]);
        assert_eq!(out.log.iter().filter(|v| v.verdict == VerdictKind::Flag).count(), 2);
    }

    #[test]
    fn persistent_failures_go_to_retry_bucket() {
        let s = samples(1, TaskType::ImageToText, Language::En);
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let g = gateway(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(GatewayError::Timeout)
        });
        let out = screen(&s, &["violence".into()], &g, ScreenOptions { retries: 2 });
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(out.retry, s);
        assert!(out.kept.is_empty());
        assert_eq!(out.log[0].verdict, VerdictKind::Error);
    }

    #[test]
    fn manual_lists() {
        let s = samples(3, TaskType::ImageToText, Language::En);
        let mut out = ScreenOutcome {
            kept: vec![s[0].clone(), s[1].clone()],
            flagged: vec![FlaggedSample { sample: s[2].clone(), labels: vec!["x".into()] }],
            ..Default::default()
        };
        let allow: BTreeSet<String> = [s[2].id.clone()].into();
        let deny: BTreeSet<String> = [s[0].id.clone()].into();
        apply_manual_lists(&mut out, &allow, &deny);
        let kept: Vec<&str> = out.kept.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(kept, vec![s[1].id.as_str(), s[2].id.as_str()]);
        assert_eq!(out.flagged[0].sample.id, s[0].id);
    }

    #[test]
    fn split_counts_per_stratum() {
        let s = samples(100, TaskType::ImageToText, Language::En);
        let m = split(&s, 0.95, 7).unwrap().manifest;
        assert_eq!((m.train_ids.len(), m.test_ids.len()), (95, 5));
        assert_eq!(split(&s, 0.95, 7).unwrap().manifest, m);

        let mut mixed = samples(40, TaskType::ImageToText, Language::En);
        mixed.extend(samples(60, TaskType::TextToText, Language::En));
        let m = split(&mixed, 0.95, 7).unwrap().manifest;
        let count = |ids: &[String], prefix: &str| ids.iter().filter(|i| i.starts_with(prefix)).count();
        assert_eq!(count(&m.train_ids, "I2T"), 38);
        assert_eq!(count(&m.test_ids, "I2T"), 2);
        assert_eq!(count(&m.train_ids, "T2T"), 57);
        assert_eq!(count(&m.test_ids, "T2T"), 3);
    }

    #[test]
    fn singleton_stratum_goes_to_train() {
        let s = samples(1, TaskType::TextToText, Language::Jp);
        let out = split(&s, 0.95, 1).unwrap();
        assert_eq!(out.manifest.train_ids.len(), 1);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn bad_ratio() {
        assert!(split(&[], 0.0, 1).is_err());
        assert!(split(&[], 1.5, 1).is_err());
    }
}
