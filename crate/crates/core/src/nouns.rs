//! Condition-noun extraction and sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::Rng;
use thiserror::Error;

use crate::ingest::read_word_list;
use crate::types::{Language, NounSet, OogiriSample};

pub const DEFAULT_LEXICON_EN: &str = include_str!("../data/lexicon/EN.txt");
pub const DEFAULT_LEXICON_CN: &str = include_str!("../data/lexicon/CN.txt");
pub const DEFAULT_LEXICON_JP: &str = include_str!("../data/lexicon/JP.txt");
pub const DEFAULT_STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Error)]
pub enum NounsError {
    #[error("no noun extractor registered for language {0}")]
    NoExtractor(Language),
    #[error("noun set for language {0} is empty")]
    EmptySet(Language),
    #[error("probability must lie in [0, 1] (got {0})")]
    Probability(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("extractor command `{command}` failed: {message}")]
    Command { command: String, message: String },
}

/// Turns a text into the nouns it mentions, in order of appearance.
pub trait NounExtractor: Send + Sync {
    fn supports(&self, lang: &Language) -> bool;

    fn extract(&self, text: &str, lang: &Language) -> Result<Vec<String>, NounsError>;
}

/// Dictionary lookup: word tokens for EN, longest match for CN/JP.
#[derive(Debug, Clone, Default)]
pub struct LexiconExtractor {
    lexicons: BTreeMap<Language, BTreeSet<String>>,
    longest: BTreeMap<Language, usize>,
    stopwords: BTreeSet<String>,
}

fn en_tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let word = c.is_alphabetic() || ((c == '\'' || c == '-') && start.is_some());
        match (word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out.into_iter().map(|(s, w)| (s, w.trim_end_matches(['\'', '-'])))
}

/// Byte span of the first occurrence of `noun` in `text`: a whole-word,
/// case-insensitive match for EN, a plain substring match otherwise.
pub fn find_noun(text: &str, noun: &str, lang: &Language) -> Option<(usize, usize)> {
    if noun.is_empty() {
        return None;
    }
    if *lang == Language::En {
        let target = noun.to_lowercase();
        en_tokens(text)
            .find(|(_, tok)| tok.to_lowercase() == target)
            .map(|(start, tok)| (start, start + tok.len()))
    } else {
        text.find(noun).map(|start| (start, start + noun.len()))
    }
}

impl LexiconExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lexicons shipped with the crate for EN, CN and JP.
    pub fn with_defaults() -> Self {
        let mut x = Self::new();
        x.add_lexicon(Language::En, read_word_list(DEFAULT_LEXICON_EN));
        x.add_lexicon(Language::Cn, read_word_list(DEFAULT_LEXICON_CN));
        x.add_lexicon(Language::Jp, read_word_list(DEFAULT_LEXICON_JP));
        x.stopwords = read_word_list(DEFAULT_STOPWORDS_EN).into_iter().collect();
        x
    }

    /// Reads `<LANG>.txt` files (one word per line) from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, NounsError> {
        let mut x = Self::new();
        x.stopwords = read_word_list(DEFAULT_STOPWORDS_EN).into_iter().collect();
        for (lang, words) in read_lang_dir(dir)? {
            x.add_lexicon(lang, words);
        }
        Ok(x)
    }

    pub fn add_lexicon(&mut self, lang: Language, words: impl IntoIterator<Item = String>) {
        let fold = lang == Language::En;
        let entry = self.lexicons.entry(lang.clone()).or_default();
        for w in words {
            let w = w.trim();
            if w.is_empty() {
                continue;
            }
            entry.insert(if fold { w.to_lowercase() } else { w.to_string() });
        }
        let longest = entry.iter().map(|w| w.chars().count()).max().unwrap_or(0);
        self.longest.insert(lang, longest);
    }

    pub fn set_stopwords(&mut self, words: impl IntoIterator<Item = String>) {
        self.stopwords = words.into_iter().map(|w| w.trim().to_lowercase()).collect();
    }

    /// Frequency heuristic for EN: non-stopword tokens of at least three
    /// letters that occur `min_count` or more times across `texts` join the
    /// lexicon.
    pub fn learn_frequent<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> usize {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for (_, tok) in en_tokens(t) {
                let tok = tok.to_lowercase();
                if tok.chars().count() >= 3 && !self.stopwords.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let known = self.lexicons.get(&Language::En).cloned().unwrap_or_default();
        let mut fresh: Vec<String> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !known.contains(w))
            .map(|(w, _)| w)
            .collect();
        fresh.sort();
        let added = fresh.len();
        self.add_lexicon(Language::En, fresh);
        added
    }

    fn longest_match(&self, text: &str, lang: &Language) -> Vec<String> {
        let Some(lex) = self.lexicons.get(lang) else { return Vec::new() };
        let max = self.longest.get(lang).copied().unwrap_or(0);
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let mut hit = 0;
            for len in (1..=max.min(chars.len() - i)).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if lex.contains(&cand) {
                    out.push(cand);
                    hit = len;
                    break;
                }
            }
            i += hit.max(1);
        }
        out
    }
}

impl NounExtractor for LexiconExtractor {
    fn supports(&self, lang: &Language) -> bool {
        self.lexicons.contains_key(lang)
    }

    fn extract(&self, text: &str, lang: &Language) -> Result<Vec<String>, NounsError> {
        let Some(lex) = self.lexicons.get(lang) else {
            return Err(NounsError::NoExtractor(lang.clone()));
        };
        if *lang == Language::En {
            Ok(en_tokens(text)
                .map(|(_, t)| t.to_lowercase())
                .filter(|t| lex.contains(t))
                .collect())
        } else {
            Ok(self.longest_match(text, lang))
        }
    }
}

/// Runs an external tagger per text. The program receives the text on stdin
/// and the language tag as its last argument, and prints one noun per line.
/// Lines that are not substrings of the input are dropped.
#[derive(Debug, Clone)]
pub struct CommandExtractor {
    program: String,
    args: Vec<String>,
    languages: Option<BTreeSet<Language>>,
}

impl CommandExtractor {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        CommandExtractor {
            program: program.into(),
            args,
            languages: None,
        }
    }

    pub fn only(mut self, languages: impl IntoIterator<Item = Language>) -> Self {
        self.languages = Some(languages.into_iter().collect());
        self
    }
}

impl NounExtractor for CommandExtractor {
    fn supports(&self, lang: &Language) -> bool {
        self.languages.as_ref().is_none_or(|ls| ls.contains(lang))
    }

    fn extract(&self, text: &str, lang: &Language) -> Result<Vec<String>, NounsError> {
        let fail = |message: String| NounsError::Command {
            command: self.program.clone(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(lang.as_str())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(text.as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let folded = text.to_lowercase();
        Ok(String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty() && (text.contains(w) || folded.contains(&w.to_lowercase())))
            .map(str::to_string)
            .collect())
    }
}

/// Builds the per-language noun set from training responses.
pub fn extract_nouns(
    samples: &[OogiriSample],
    extractor: &dyn NounExtractor,
    deny: BTreeSet<String>,
    allow: BTreeSet<String>,
) -> Result<NounSet, NounsError> {
    let mut raw: BTreeMap<Language, Vec<String>> = BTreeMap::new();
    for s in samples {
        if !extractor.supports(&s.lang) {
            return Err(NounsError::NoExtractor(s.lang.clone()));
        }
        let bucket = raw.entry(s.lang.clone()).or_default();
        for r in &s.responses {
            bucket.extend(extractor.extract(&r.text, &s.lang)?);
        }
    }
    Ok(NounSet::new(raw, deny, allow))
}

/// Nouns of `text` that belong to the set, first occurrence order, no repeats.
pub fn response_nouns(
    extractor: &dyn NounExtractor,
    ns: &NounSet,
    text: &str,
    lang: &Language,
) -> Result<Vec<String>, NounsError> {
    let mut out: Vec<String> = Vec::new();
    for w in extractor.extract(text, lang)? {
        let w = if *lang == Language::En { w.trim().to_lowercase() } else { w.trim().to_string() };
        if ns.contains(lang, &w) && !out.contains(&w) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Draws a condition: absent with probability `rho`, otherwise a uniform
/// noun of the language's set.
pub fn sample_condition<R: Rng + ?Sized>(
    ns: &NounSet,
    lang: &Language,
    rho: f64,
    rng: &mut R,
) -> Result<Option<String>, NounsError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(NounsError::Probability(rho));
    }
    let words = ns.get(lang);
    if words.is_empty() && rho < 1.0 {
        return Err(NounsError::EmptySet(lang.clone()));
    }
    if rng.gen::<f64>() < rho {
        return Ok(None);
    }
    Ok(Some(words[rng.gen_range(0..words.len())].clone()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NounsError + '_ {
    move |source| NounsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_lang_dir(dir: &Path) -> Result<Vec<(Language, Vec<String>)>, NounsError> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    entries.sort();
    for path in entries {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Ok(lang) = stem.parse::<Language>() else { continue };
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        out.push((lang, read_word_list(&text)));
    }
    Ok(out)
}

/// Writes one `<LANG>.txt` file per language, one noun per line.
pub fn write_noun_dir(ns: &NounSet, dir: &Path) -> Result<Vec<PathBuf>, NounsError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for lang in ns.languages() {
        let path = dir.join(format!("{}.txt", lang.as_str()));
        let mut body = ns.get(lang).join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        std::fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_noun_dir(dir: &Path, deny: BTreeSet<String>, allow: BTreeSet<String>) -> Result<NounSet, NounsError> {
    let raw = read_lang_dir(dir)?.into_iter().collect();
    Ok(NounSet::new(raw, deny, allow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::types::{Response, TaskType};

    fn sample(id: &str, lang: Language, texts: &[&str]) -> OogiriSample {
        OogiriSample {
            id: id.into(),
            task: TaskType::TextToText,
            lang,
            image_ref: None,
            question_text: Some("q".into()),
            responses: texts.iter().map(|t| Response::new(*t, Some(1))).collect(),
            created_at: None,
        }
    }

    fn cat_dog() -> LexiconExtractor {
        let mut x = LexiconExtractor::new();
        x.add_lexicon(Language::En, ["cat".to_string(), "dog".to_string()]);
        x
    }

    #[test]
    fn dictionary_extraction() {
        let s = sample("a", Language::En, &["the cat chased a dog and a ball"]);
        let ns = extract_nouns(&[s], &cat_dog(), BTreeSet::new(), BTreeSet::new()).unwrap();
        assert_eq!(ns.get(&Language::En), ["cat", "dog"]);
    }

    #[test]
    fn repeated_nouns_collapse() {
        let s = sample("a", Language::En, &["cat cat cat"]);
        let ns = extract_nouns(&[s], &cat_dog(), BTreeSet::new(), BTreeSet::new()).unwrap();
        assert_eq!(ns.get(&Language::En), ["cat"]);
    }

    #[test]
    fn empty_training_set() {
        let ns = extract_nouns(&[], &cat_dog(), BTreeSet::new(), BTreeSet::new()).unwrap();
        assert!(ns.is_empty());
    }

    #[test]
    fn missing_extractor_names_language() {
        let s = sample("a", Language::Cn, &["猫"]);
        let err = extract_nouns(&[s], &cat_dog(), BTreeSet::new(), BTreeSet::new()).unwrap_err();
        assert_eq!(err.to_string(), "no noun extractor registered for language CN");
    }

    #[test]
    fn deny_list_applies() {
        let s = sample("a", Language::En, &["The Cat and the dog"]);
        let deny = ["dog".to_string()].into_iter().collect();
        let ns = extract_nouns(&[s], &cat_dog(), deny, BTreeSet::new()).unwrap();
        assert_eq!(ns.get(&Language::En), ["cat"]);
    }

    #[test]
    fn longest_match_segmentation() {
        let mut x = LexiconExtractor::new();
        x.add_lexicon(Language::Cn, ["自行".to_string(), "自行车".to_string(), "车".to_string(), "老板".to_string()]);
        let got = x.extract("老板骑自行车", &Language::Cn).unwrap();
        assert_eq!(got, ["老板", "自行车"]);
    }

    #[test]
    fn frequency_heuristic_skips_stopwords() {
        let mut x = LexiconExtractor::with_defaults();
        let added = x.learn_frequent(["the zorblax ate the zorblax", "zorblax again"], 3);
        assert_eq!(added, 1);
        assert_eq!(x.extract("a zorblax", &Language::En).unwrap(), ["zorblax"]);
    }

    #[test]
    fn sample_condition_boundaries() {
        let ns = NounSet::from_words(Language::En, ["x"]);
        let mut rng = substream(1, "t", "");
        for _ in 0..100 {
            assert_eq!(sample_condition(&ns, &Language::En, 1.0, &mut rng).unwrap(), None);
            assert_eq!(sample_condition(&ns, &Language::En, 0.0, &mut rng).unwrap().as_deref(), Some("x"));
        }
        let empty = NounSet::default();
        assert!(matches!(
            sample_condition(&empty, &Language::En, 0.5, &mut rng),
            Err(NounsError::EmptySet(_))
        ));
        assert_eq!(sample_condition(&empty, &Language::En, 1.0, &mut rng).unwrap(), None);
    }

    #[test]
    fn find_noun_matches_whole_words() {
        assert_eq!(find_noun("Catalog of the Cat", "cat", &Language::En), Some((15, 18)));
        assert_eq!(find_noun("老板骑车", "骑车", &Language::Cn), Some((6, 12)));
        assert_eq!(find_noun("dog", "cat", &Language::En), None);
    }

    #[test]
    fn noun_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ns = NounSet::from_words(Language::En, ["moon", "cat"]);
        ns.extend(Language::Jp, vec!["猫".to_string()]);
        write_noun_dir(&ns, dir.path()).unwrap();
        let back = read_noun_dir(dir.path(), BTreeSet::new(), BTreeSet::new()).unwrap();
        assert_eq!(back, ns);
    }

    #[test]
    fn response_nouns_keep_first_occurrence_order() {
        let ns = NounSet::from_words(Language::En, ["moon", "cheese"]);
        let mut x = LexiconExtractor::new();
        x.add_lexicon(Language::En, ["cheese".to_string(), "moon".to_string(), "sky".to_string()]);
        let got = response_nouns(&x, &ns, "The moon is cheese, the MOON in the sky", &Language::En).unwrap();
        assert_eq!(got, ["moon", "cheese"]);
    }

    #[cfg(unix)]
    #[test]
    fn command_extractor_filters_to_substrings() {
        let x = CommandExtractor::new("sh", vec!["-c".into(), "cat >/dev/null; printf 'moon\\nbanana\\n'".into(), "sh".into()]);
        assert_eq!(x.extract("the moon", &Language::En).unwrap(), ["moon"]);
    }
}
