use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use clot_core::evalkit::{self, EvalOptions, EvalReport};
use clot_core::forge::{self, BackendProviders, DistractorProviders, FormulateParams, SyntheticProviders, TableProviders};
use clot_core::gateway::{parse_choice, Confidence, ParsedChoice};
use clot_core::ingest::{self, ScreenOptions};
use clot_core::jsonl::{self, schema};
use clot_core::nouns::{self, CommandExtractor, LexiconExtractor, NounExtractor, NounsError};
use clot_core::refinery::{self, ConditionPool};
use clot_core::rng::substream;
use clot_core::sidequests::{self, DatQuestion, EmbeddingTable};
use clot_core::{
    validate_sample, ChoiceQuestion, InstructionRecord, Language, NounSet, OogiriSample, Query, RankingQuestion,
    TaskType, Variant, MASK_TOKEN,
};
use serde::Serialize;
use serde_json::json;

use crate::run::{self, Run};
use crate::Ctx;

fn parse_lang(s: &str) -> Result<Language, String> {
    s.parse::<Language>().map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn read_samples(path: &Path) -> Result<Vec<OogiriSample>> {
    run::require(path)?;
    let (_, samples) = jsonl::read_file(path, Some(schema::SAMPLES))?;
    Ok(samples)
}

fn read_list(path: Option<&Path>) -> Result<BTreeSet<String>> {
    match path {
        Some(p) => {
            run::require(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(ingest::read_word_list(&text).into_iter().collect())
        }
        None => Ok(BTreeSet::new()),
    }
}

fn with_optional<'a>(inputs: &mut Vec<(&'a str, &'a Path)>, name: &'a str, path: Option<&'a PathBuf>) {
    if let Some(p) = path {
        inputs.push((name, p.as_path()));
    }
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// Crawl records, one answer per line.
    Crawl,
    /// Already normalized samples.
    Samples,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "crawl")]
    format: InputFormat,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training fraction per (task, language) stratum.
    #[arg(long, default_value_t = ingest::DEFAULT_TRAIN_RATIO)]
    ratio: f64,
    /// Language for every sample instead of script detection.
    #[arg(long, value_parser = parse_lang)]
    lang: Option<Language>,
    /// Sample ids removed after screening.
    #[arg(long)]
    deny_file: Option<PathBuf>,
    /// Sample ids kept even when screening flags them.
    #[arg(long)]
    allow_file: Option<PathBuf>,
    /// Run safety screening before splitting.
    #[arg(long)]
    screen: bool,
    #[arg(long)]
    labels_file: Option<PathBuf>,
}

#[derive(Serialize)]
struct IngestReport {
    records: usize,
    line_errors: Vec<String>,
    warnings: Vec<String>,
    invalid: Vec<String>,
    dedup: ingest::DedupStats,
    screened: Option<BTreeMap<String, usize>>,
    denied: usize,
    samples: usize,
    train: usize,
    test: usize,
    split_warnings: Vec<String>,
}

fn labels(path: Option<&Path>) -> Result<Vec<String>> {
    Ok(match path {
        Some(p) => read_list(Some(p))?.into_iter().collect(),
        None => ingest::read_word_list(ingest::DEFAULT_LABELS),
    })
}

pub fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    run::require(&a.input)?;
    let out = ctx.out_dir(a.out.as_deref());
    let labels = labels(a.labels_file.as_deref())?;
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!(
            "ingest: {} ({:?}) -> {}; screening {}; split ratio {}",
            a.input.display(),
            a.format,
            out.display(),
            if a.screen { format!("on ({} labels)", labels.len()) } else { "off".into() },
            a.ratio
        );
        return Ok(());
    }
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let mut report = IngestReport {
        records: 0,
        line_errors: Vec::new(),
        warnings: Vec::new(),
        invalid: Vec::new(),
        dedup: Default::default(),
        screened: None,
        denied: 0,
        samples: 0,
        train: 0,
        test: 0,
        split_warnings: Vec::new(),
    };
    let samples = match a.format {
        InputFormat::Crawl => {
            let (records, errors) = ingest::parse_raw(&text);
            report.records = records.len();
            report.line_errors = errors.iter().map(ToString::to_string).collect();
            let n = ingest::normalize(&records, a.lang.as_ref());
            report.warnings = n.warnings.iter().map(|w| format!("{}: {}", w.record_id, w.message)).collect();
            n.samples
        }
        InputFormat::Samples => {
            let (_, samples) = jsonl::read_str::<OogiriSample>(&text, &a.input.display().to_string(), Some(schema::SAMPLES))?;
            report.records = samples.len();
            samples
        }
    };
    for e in &report.line_errors {
        tracing::warn!("{}: {e}", a.input.display());
    }
    let (samples, dedup) = ingest::dedup(samples);
    report.dedup = dedup;
    let mut valid = Vec::with_capacity(samples.len());
    for s in samples {
        let v = validate_sample(&s);
        if v.is_empty() {
            valid.push(s);
        } else {
            let reasons: Vec<String> = v.iter().map(ToString::to_string).collect();
            report.invalid.push(format!("{}: {}", s.id, reasons.join("; ")));
        }
    }

    let mut inputs = vec![("input", a.input.as_path())];
    with_optional(&mut inputs, "deny", a.deny_file.as_ref());
    with_optional(&mut inputs, "allow", a.allow_file.as_ref());
    with_optional(&mut inputs, "labels", a.labels_file.as_ref());
    let backend = a.screen.then(|| ctx.backend_name());
    let params = json!({"format": format!("{:?}", a.format), "ratio": a.ratio, "lang": a.lang, "screen": a.screen});
    let mut run = Run::start("ingest", &out, ctx.seed, &ctx.config_hash, backend, params, &inputs)?;

    let deny = read_list(a.deny_file.as_deref())?;
    let allow = read_list(a.allow_file.as_deref())?;
    let mut kept = if a.screen {
        let gateway = ctx.gateway()?;
        let mut outcome = ingest::screen(&valid, &labels, &gateway, ScreenOptions { retries: ctx.retries() });
        ingest::apply_manual_lists(&mut outcome, &allow, &deny);
        report.screened = Some(BTreeMap::from([
            ("kept".to_string(), outcome.kept.len()),
            ("flagged".to_string(), outcome.flagged.len()),
            ("retry".to_string(), outcome.retry.len()),
        ]));
        run.write_jsonl(&run.path("verdicts.jsonl"), schema::VERDICTS, &outcome.log)?;
        run.write_jsonl(&run.path("flagged.jsonl"), schema::SAMPLES, &outcome.flagged)?;
        run.write_jsonl(&run.path("retry.jsonl"), schema::SAMPLES, &outcome.retry)?;
        outcome.kept
    } else {
        valid
    };
    let before = kept.len();
    kept = ingest::drop_denied(kept, &deny);
    report.denied = before - kept.len();

    let split = ingest::split(&kept, a.ratio, ctx.seed)?;
    let (train, test) = ingest::apply_split(&kept, &split.manifest);
    report.samples = kept.len();
    report.train = train.len();
    report.test = test.len();
    report.split_warnings = split.warnings;

    run.write_jsonl(&run.path("samples.jsonl"), schema::SAMPLES, &kept)?;
    run.write_jsonl(&run.path("train.jsonl"), schema::SAMPLES, &train)?;
    run.write_jsonl(&run.path("test.jsonl"), schema::SAMPLES, &test)?;
    run.write_json(&run.path("split.json"), &split.manifest)?;
    run.write_json(&run.path("ingest-report.json"), &report)?;
    let id = run.finish()?;
    println!(
        "ingest: {} samples ({} train / {} test), {} line errors [run {id}]",
        report.samples,
        report.train,
        report.test,
        report.line_errors.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- screen

#[derive(Args, Debug)]
pub struct ScreenArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    labels_file: Option<PathBuf>,
    #[arg(long)]
    deny_file: Option<PathBuf>,
    #[arg(long)]
    allow_file: Option<PathBuf>,
}

pub fn screen(ctx: &Ctx, a: ScreenArgs) -> Result<()> {
    let samples = read_samples(&a.samples)?;
    let labels = labels(a.labels_file.as_deref())?;
    let out = ctx.out_dir(a.out.as_deref());
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!(
            "screen: {} samples x {} labels = {} backend calls (before retries) -> {}",
            samples.len(),
            labels.len(),
            samples.len() * labels.len(),
            out.display()
        );
        return Ok(());
    }
    let mut inputs = vec![("samples", a.samples.as_path())];
    with_optional(&mut inputs, "labels", a.labels_file.as_ref());
    with_optional(&mut inputs, "deny", a.deny_file.as_ref());
    with_optional(&mut inputs, "allow", a.allow_file.as_ref());
    let mut run = Run::start("screen", &out, ctx.seed, &ctx.config_hash, Some(ctx.backend_name()), json!({"labels": labels}), &inputs)?;
    let gateway = ctx.gateway()?;
    let mut outcome = ingest::screen(&samples, &labels, &gateway, ScreenOptions { retries: ctx.retries() });
    ingest::apply_manual_lists(&mut outcome, &read_list(a.allow_file.as_deref())?, &read_list(a.deny_file.as_deref())?);
    run.write_jsonl(&run.path("kept.jsonl"), schema::SAMPLES, &outcome.kept)?;
    run.write_jsonl(&run.path("flagged.jsonl"), schema::SAMPLES, &outcome.flagged)?;
    run.write_jsonl(&run.path("retry.jsonl"), schema::SAMPLES, &outcome.retry)?;
    run.write_jsonl(&run.path("verdicts.jsonl"), schema::VERDICTS, &outcome.log)?;
    let id = run.finish()?;
    println!(
        "screen: {} kept, {} flagged, {} retry [run {id}]",
        outcome.kept.len(),
        outcome.flagged.len(),
        outcome.retry.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- nouns

/// Tries each extractor in turn; the first that supports a language wins.
struct Chain(Vec<Box<dyn NounExtractor>>);

impl NounExtractor for Chain {
    fn supports(&self, lang: &Language) -> bool {
        self.0.iter().any(|x| x.supports(lang))
    }

    fn extract(&self, text: &str, lang: &Language) -> Result<Vec<String>, NounsError> {
        match self.0.iter().find(|x| x.supports(lang)) {
            Some(x) => x.extract(text, lang),
            None => Err(NounsError::NoExtractor(lang.clone())),
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ExtractorArgs {
    /// Directory of `<LANG>.txt` noun lexicons (built-in lists otherwise).
    #[arg(long)]
    lexicon_dir: Option<PathBuf>,
    /// External extractor: reads text on stdin, language tag as last argument,
    /// prints one noun per line.
    #[arg(long)]
    extractor_cmd: Option<String>,
    /// Languages handled by `--extractor-cmd` (all when omitted).
    #[arg(long, value_parser = parse_lang, value_delimiter = ',')]
    extractor_langs: Vec<Language>,
}

impl ExtractorArgs {
    fn lexicon_dir<'a>(&'a self, ctx: &'a Ctx) -> Option<&'a PathBuf> {
        self.lexicon_dir.as_ref().or(ctx.cfg.paths.lexicons.as_ref())
    }

    fn build(&self, ctx: &Ctx, learn: Option<(&[OogiriSample], usize)>) -> Result<Box<dyn NounExtractor>> {
        let mut lex = match self.lexicon_dir(ctx) {
            Some(dir) => {
                run::require(dir)?;
                LexiconExtractor::from_dir(dir)?
            }
            None => LexiconExtractor::with_defaults(),
        };
        if let Some((samples, min)) = learn {
            let texts = samples
                .iter()
                .filter(|s| s.lang == Language::En)
                .flat_map(|s| s.responses.iter().map(|r| r.text.as_str()));
            let added = lex.learn_frequent(texts, min);
            tracing::info!(added, "learned frequent words");
        }
        let mut chain: Vec<Box<dyn NounExtractor>> = Vec::new();
        if let Some(cmd) = &self.extractor_cmd {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().context("--extractor-cmd is empty")?;
            let mut x = CommandExtractor::new(program, parts.collect());
            if !self.extractor_langs.is_empty() {
                x = x.only(self.extractor_langs.clone());
            }
            chain.push(Box::new(x));
        }
        chain.push(Box::new(lex));
        Ok(Box::new(Chain(chain)))
    }

    fn inputs<'a>(&'a self, ctx: &'a Ctx, inputs: &mut Vec<(&'a str, &'a Path)>) {
        with_optional(inputs, "lexicons", self.lexicon_dir(ctx));
    }
}

#[derive(Args, Debug)]
pub struct NounsArgs {
    /// Training samples.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    extractor: ExtractorArgs,
    /// Also treat EN words seen at least this often as nouns.
    #[arg(long)]
    learn_min_count: Option<usize>,
    #[arg(long)]
    deny_file: Option<PathBuf>,
    #[arg(long)]
    allow_file: Option<PathBuf>,
}

pub fn nouns_build(ctx: &Ctx, a: NounsArgs) -> Result<()> {
    let samples = read_samples(&a.samples)?;
    let out = ctx.out_dir(a.out.as_deref());
    if ctx.dry_run {
        println!("nouns build: {} samples -> {}", samples.len(), out.display());
        return Ok(());
    }
    let mut inputs = vec![("samples", a.samples.as_path())];
    a.extractor.inputs(ctx, &mut inputs);
    with_optional(&mut inputs, "deny", a.deny_file.as_ref());
    with_optional(&mut inputs, "allow", a.allow_file.as_ref());
    let params = json!({"learn_min_count": a.learn_min_count, "extractor_cmd": a.extractor.extractor_cmd});
    let mut run = Run::start("nouns", &out, ctx.seed, &ctx.config_hash, None, params, &inputs)?;
    let x = a.extractor.build(ctx, a.learn_min_count.map(|m| (samples.as_slice(), m)))?;
    let ns = nouns::extract_nouns(
        &samples,
        x.as_ref(),
        read_list(a.deny_file.as_deref())?,
        read_list(a.allow_file.as_deref())?,
    )?;
    for lang in ns.languages() {
        let mut body = ns.get(lang).join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        run.write_text(&run.path(&format!("{}.txt", lang.as_str())), &body, Some("#"))?;
    }
    let counts: BTreeMap<String, usize> = ns.counts().into_iter().map(|(l, c)| (l.as_str().to_string(), c)).collect();
    run.write_json(&run.path("nouns-report.json"), &json!({ "counts": counts }))?;
    let id = run.finish()?;
    println!("nouns: {counts:?} [run {id}]");
    Ok(())
}

fn load_nouns(ctx: &Ctx, flag: Option<&Path>) -> Result<Option<(PathBuf, NounSet)>> {
    let Some(dir) = flag.map(Path::to_path_buf).or_else(|| ctx.cfg.paths.nouns.clone()) else {
        return Ok(None);
    };
    run::require(&dir)?;
    let ns = nouns::read_noun_dir(&dir, BTreeSet::new(), BTreeSet::new())?;
    Ok(Some((dir, ns)))
}

// ---------------------------------------------------------------- formulate

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProvidersKind {
    /// Offline phrase lists.
    Synthetic,
    /// Precomputed caption/rewrite files.
    Table,
    /// Ask the configured backend.
    Backend,
    /// No distractors: selection questions are skipped.
    None,
}

#[derive(Args, Debug, Clone)]
pub struct ProviderArgs {
    #[arg(long, value_enum)]
    providers: Option<ProvidersKind>,
    /// Caption table (`{sample_id, caption}` lines) for `--providers table`.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Rewrite table (`{text, rewrite}` lines) for `--providers table`.
    #[arg(long)]
    rewrites: Option<PathBuf>,
}

impl ProviderArgs {
    fn kind(&self, ctx: &Ctx) -> Result<ProvidersKind> {
        match (self.providers, ctx.cfg.formulate.providers.as_deref()) {
            (Some(k), _) => Ok(k),
            (None, Some(s)) => ProvidersKind::from_str(s, true).map_err(|e| anyhow::anyhow!("config formulate.providers: {e}")),
            (None, None) => Ok(ProvidersKind::Synthetic),
        }
    }

    fn paths(&self, ctx: &Ctx) -> (Option<PathBuf>, Option<PathBuf>) {
        (
            self.captions.clone().or_else(|| ctx.cfg.formulate.captions.clone()),
            self.rewrites.clone().or_else(|| ctx.cfg.formulate.rewrites.clone()),
        )
    }

    fn build(&self, ctx: &Ctx) -> Result<Option<Box<dyn DistractorProviders>>> {
        Ok(match self.kind(ctx)? {
            ProvidersKind::Synthetic => Some(Box::new(SyntheticProviders)),
            ProvidersKind::None => None,
            ProvidersKind::Backend => Some(Box::new(BackendProviders::new(Arc::new(ctx.gateway()?)))),
            ProvidersKind::Table => {
                let (c, r) = self.paths(ctx);
                let c = c.context("--providers table needs --captions")?;
                let r = r.context("--providers table needs --rewrites")?;
                run::require(&c)?;
                run::require(&r)?;
                Some(Box::new(TableProviders::load(&c, &r)?))
            }
        })
    }
}

#[derive(Args, Debug)]
pub struct FormulateArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Noun set directory from `nouns build`.
    #[arg(long)]
    nouns: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    providers: ProviderArgs,
    #[command(flatten)]
    extractor: ExtractorArgs,
    #[arg(long)]
    rho_c: Option<f64>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long, value_parser = parse_variant, value_delimiter = ',')]
    variants: Vec<Variant>,
}

pub fn formulate(ctx: &Ctx, a: FormulateArgs) -> Result<()> {
    let samples = read_samples(&a.samples)?;
    let Some((nouns_dir, ns)) = load_nouns(ctx, a.nouns.as_deref())? else {
        bail!("formulate needs a noun set (--nouns <dir>)");
    };
    let out = ctx.out_dir(a.out.as_deref());
    let params = FormulateParams {
        rho_c: a.rho_c.or(ctx.cfg.refine.rho_c).unwrap_or(0.5),
        mask_prob: a.mask_prob.or(ctx.cfg.formulate.mask_prob).unwrap_or(0.5),
        variants: ctx.variants(&a.variants)?,
        seed: ctx.seed,
    };
    if !(0.0..=1.0).contains(&params.rho_c) || !(0.0..=1.0).contains(&params.mask_prob) {
        bail!("rho_c and mask_prob must lie in [0, 1]");
    }
    let kind = a.providers.kind(ctx)?;
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!(
            "formulate: {} samples, providers {:?}, variants {:?}, rho_c {}, mask_prob {} -> {}",
            samples.len(),
            kind,
            params.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
            params.rho_c,
            params.mask_prob,
            out.display()
        );
        return Ok(());
    }
    let (captions, rewrites) = a.providers.paths(ctx);
    let mut inputs = vec![("samples", a.samples.as_path()), ("nouns", nouns_dir.as_path())];
    a.extractor.inputs(ctx, &mut inputs);
    if kind == ProvidersKind::Table {
        with_optional(&mut inputs, "captions", captions.as_ref());
        with_optional(&mut inputs, "rewrites", rewrites.as_ref());
    }
    let backend = (kind == ProvidersKind::Backend).then(|| ctx.backend_name());
    let mut run = Run::start("formulate", &out, ctx.seed, &ctx.config_hash, backend, json!({"params": params, "providers": format!("{kind:?}")}), &inputs)?;
    let providers = a.providers.build(ctx)?;
    let x = a.extractor.build(ctx, None)?;
    let f = forge::formulate_corpus(&samples, x.as_ref(), &ns, providers.as_deref(), &params);
    for w in &f.stats.warnings {
        tracing::warn!("{w}");
    }
    run.write_jsonl(&run.path("instructions.jsonl"), schema::INSTRUCTIONS, &f.records)?;
    run.write_jsonl(&run.path("choice.jsonl"), schema::CHOICE, &f.choice)?;
    run.write_jsonl(&run.path("ranking.jsonl"), schema::RANKING, &f.ranking)?;
    run.write_json(&run.path("formulate-report.json"), &f.stats)?;
    let id = run.finish()?;
    println!(
        "formulate: {} records, {} choice, {} ranking, {} errors [run {id}]",
        f.records.len(),
        f.choice.len(),
        f.ranking.len(),
        f.stats.errors.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- refine

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Assoc {
    /// Conditions from the corpus-wide noun set.
    Weak,
    /// Conditions from nouns of each sample's own caption.
    Strong,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    nouns: Option<PathBuf>,
    /// Instruction records to extend.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum)]
    assoc: Option<Assoc>,
    #[command(flatten)]
    providers: ProviderArgs,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

pub fn refine(ctx: &Ctx, a: RefineArgs) -> Result<()> {
    let samples = read_samples(&a.samples)?;
    run::require(&a.base)?;
    let params = ctx.refinement(a.n, a.rho, None)?;
    let assoc = match (a.assoc, ctx.cfg.refine.assoc.as_deref()) {
        (Some(x), _) => x,
        (None, Some(s)) => Assoc::from_str(s, true).map_err(|e| anyhow::anyhow!("config refine.assoc: {e}"))?,
        (None, None) => Assoc::Weak,
    };
    let out = ctx.out_dir(a.out.as_deref());
    let nouns = load_nouns(ctx, a.nouns.as_deref())?;
    if assoc == Assoc::Weak && nouns.is_none() && params.rho < 1.0 {
        bail!("weak association needs a noun set (--nouns <dir>)");
    }
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!(
            "refine: {} samples, n = {}, rho = {}, assoc {:?}; at most {} backend calls -> {}",
            samples.len(),
            params.n,
            params.rho,
            assoc,
            samples.len() * (params.n + 2),
            out.display()
        );
        return Ok(());
    }
    let (_, base) = jsonl::read_file::<InstructionRecord>(&a.base, Some(schema::INSTRUCTIONS))?;
    let mut inputs = vec![("samples", a.samples.as_path()), ("base", a.base.as_path())];
    if let Some((dir, _)) = &nouns {
        inputs.push(("nouns", dir.as_path()));
    }
    a.extractor.inputs(ctx, &mut inputs);
    let run_params = json!({"n": params.n, "rho": params.rho, "assoc": format!("{assoc:?}")});
    let mut run = Run::start("refine", &out, ctx.seed, &ctx.config_hash, Some(ctx.backend_name()), run_params, &inputs)?;
    let gateway = ctx.gateway()?;
    let empty = NounSet::default();
    let strong: HashMap<String, Vec<String>>;
    let pool = match assoc {
        Assoc::Weak => ConditionPool::Weak(nouns.as_ref().map(|(_, ns)| ns).unwrap_or(&empty)),
        Assoc::Strong => {
            let providers = a.providers.build(ctx)?.context("strong association needs caption providers")?;
            let x = a.extractor.build(ctx, None)?;
            let mut map = HashMap::new();
            for s in &samples {
                let caption = providers.caption(s).map_err(|e| anyhow::anyhow!("{}: {e}", s.id))?;
                map.insert(s.id.clone(), x.extract(&caption, &s.lang)?);
            }
            strong = map;
            ConditionPool::Strong(&strong)
        }
    };
    let r = refinery::refine_corpus(&samples, pool, &params, &gateway, base)?;
    run.write_jsonl(&run.path("merged.jsonl"), schema::INSTRUCTIONS, &r.merged)?;
    run.write_jsonl(&run.path("outcomes.jsonl"), schema::OUTCOMES, &r.outcomes)?;
    run.write_json(&run.path("refine-report.json"), &r.stats)?;
    let id = run.finish()?;
    println!(
        "refine round {}: {} emitted, {} discarded (GTR), {} degenerate; corpus {} -> {} [run {id}]",
        r.stats.round, r.stats.emitted, r.stats.discarded_gtr, r.stats.discarded_degenerate, r.stats.base, r.stats.merged
    );
    Ok(())
}

// ---------------------------------------------------------------- infer

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long, value_parser = parse_lang)]
    lang: Option<Language>,
    /// Noun set directory (built-in lexicon otherwise).
    #[arg(long)]
    nouns: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Trace file (default `<out>/infer-trace.json`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Picks the task from the inputs given.
pub fn infer_query(image: Option<String>, text: Option<String>, lang: Option<Language>) -> Result<Query> {
    let text = text.map(|t| t.trim().to_string()).filter(|t| !t.is_empty());
    let task = match (&image, &text) {
        (Some(_), None) => TaskType::ImageToText,
        (None, Some(_)) => TaskType::TextToText,
        (Some(_), Some(t)) if t.contains(MASK_TOKEN) => TaskType::ImageTextToText,
        (Some(_), Some(_)) => bail!("with both --image and --text the text must contain {MASK_TOKEN}"),
        (None, None) => bail!("give --image, --text or both"),
    };
    let lang = lang.unwrap_or_else(|| text.as_deref().map(ingest::detect_language).unwrap_or(Language::En));
    Ok(refinery::query("infer", task, lang, image, text))
}

fn default_nouns(lang: &Language) -> NounSet {
    let words = match lang {
        Language::Cn => nouns::DEFAULT_LEXICON_CN,
        Language::Jp => nouns::DEFAULT_LEXICON_JP,
        _ => nouns::DEFAULT_LEXICON_EN,
    };
    NounSet::from_words(lang.clone(), ingest::read_word_list(words))
}

pub fn infer(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let q = infer_query(a.image, a.text, a.lang)?;
    let params = ctx.refinement(a.n, a.rho, None)?;
    let out = ctx.out_dir(a.out.as_deref());
    let trace_path = a.trace.clone().unwrap_or_else(|| out.join("infer-trace.json"));
    let nouns = load_nouns(ctx, a.nouns.as_deref())?;
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!(
            "infer: {} query, n = {}, rho = {}; {} backend calls on the clean path",
            q.task,
            params.n,
            params.rho,
            params.n + 2
        );
        return Ok(());
    }
    let ns = match &nouns {
        Some((_, ns)) if !ns.get(&q.lang).is_empty() => ns.clone(),
        _ => default_nouns(&q.lang),
    };
    let mut inputs = Vec::new();
    if let Some((dir, _)) = &nouns {
        inputs.push(("nouns", dir.as_path()));
    }
    let run_params = json!({"query": q, "n": params.n, "rho": params.rho});
    let mut run = Run::start("infer", &out, ctx.seed, &ctx.config_hash, Some(ctx.backend_name()), run_params, &inputs)?;
    let gateway = ctx.gateway()?;
    let result = refinery::clot_infer(&q, &ns, &params, &gateway)?;
    run.write_json(&trace_path, &result)?;
    run.finish()?;
    if result.degraded {
        tracing::warn!(reason = ?result.degraded_reason, "degraded inference path");
    }
    println!("{}", result.response);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory holding choice.jsonl / ranking.jsonl, or a single choice file.
    #[arg(long)]
    questions: PathBuf,
    #[arg(long, value_parser = parse_variant, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Report path (default `<out>/report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Give fractional credit on two-pick questions.
    #[arg(long)]
    partial_credit: bool,
    /// Re-ask a question this many times when its reply does not parse.
    #[arg(long, default_value_t = 0)]
    reask: usize,
    /// Record the wall-clock time in the report.
    #[arg(long)]
    timestamp: bool,
    /// Skip ranking questions.
    #[arg(long)]
    no_ranking: bool,
}

fn load_questions(path: &Path, no_ranking: bool) -> Result<(Vec<ChoiceQuestion>, Vec<RankingQuestion>, Vec<PathBuf>)> {
    run::require(path)?;
    if path.is_file() {
        let (_, c) = jsonl::read_file(path, Some(schema::CHOICE))?;
        return Ok((c, Vec::new(), vec![path.to_path_buf()]));
    }
    let cp = path.join("choice.jsonl");
    let rp = path.join("ranking.jsonl");
    let mut used = Vec::new();
    let choice = if cp.exists() {
        used.push(cp.clone());
        jsonl::read_file(&cp, Some(schema::CHOICE))?.1
    } else {
        Vec::new()
    };
    let ranking = if rp.exists() && !no_ranking {
        used.push(rp.clone());
        jsonl::read_file(&rp, Some(schema::RANKING))?.1
    } else {
        Vec::new()
    };
    if used.is_empty() {
        bail!("no question files (choice.jsonl, ranking.jsonl) in {}", path.display());
    }
    Ok((choice, ranking, used))
}

fn now_stamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let (choice, ranking, files) = load_questions(&a.questions, a.no_ranking)?;
    let variants: Vec<String> = ctx.variants(&a.variants)?.iter().map(|v| v.to_string()).collect();
    let mut invalid = Vec::new();
    let choice: Vec<ChoiceQuestion> = choice
        .into_iter()
        .filter(|q| variants.contains(&q.variant_name()))
        .filter(|q| match q.validate() {
            Ok(()) => true,
            Err(e) => {
                invalid.push(e.to_string());
                false
            }
        })
        .collect();
    let out = ctx.out_dir(a.out.as_deref());
    let report_path = a.report.clone().unwrap_or_else(|| out.join("report.json"));
    let report_dir = report_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!(
            "eval: {} choice + {} ranking questions ({} backend calls before re-asks) -> {}",
            choice.len(),
            ranking.len(),
            choice.len() + ranking.len(),
            report_path.display()
        );
        return Ok(());
    }
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().to_string()).collect();
    let inputs: Vec<(&str, &Path)> = names.iter().map(String::as_str).zip(files.iter().map(PathBuf::as_path)).collect();
    let params = json!({"variants": variants, "partial_credit": a.partial_credit, "reask": a.reask, "ranking": !a.no_ranking});
    let mut run = Run::start("eval", &report_dir, ctx.seed, &ctx.config_hash, Some(ctx.backend_name()), params, &inputs)?;
    let gateway = ctx.gateway()?;
    let opts = EvalOptions {
        seed: ctx.seed,
        partial_credit: a.partial_credit,
        reask: a.reask,
    };
    let mut result = evalkit::run_eval(&choice, &ranking, &gateway, &opts);
    if a.timestamp {
        result.report.timestamp = Some(now_stamp());
    }
    let table = evalkit::render_table(&result.report);
    let stem = report_path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    run.write_json(&report_path, &result.report)?;
    run.write_text(&report_dir.join(format!("{stem}.txt")), &table, Some("#"))?;
    run.write_jsonl(&report_dir.join("answers.jsonl"), schema::ANSWERS, &result.answers)?;
    run.finish()?;
    print!("{table}");
    if !invalid.is_empty() {
        bail!("{} invalid questions skipped: {}", invalid.len(), invalid.join("; "));
    }
    Ok(())
}

// ---------------------------------------------------------------- dat / cgg

fn embeddings_path(ctx: &Ctx, flag: Option<&PathBuf>) -> Result<PathBuf> {
    let p = flag
        .cloned()
        .or_else(|| ctx.cfg.paths.embeddings.clone())
        .context("an embedding file is required (--embeddings)")?;
    run::require(&p)?;
    Ok(p)
}

#[derive(Args, Debug)]
pub struct DatBuildArgs {
    /// One stem per line: whitespace-separated words.
    #[arg(long)]
    words: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Option words, one per line (the embedding vocabulary otherwise).
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = sidequests::DAT_OPTIONS)]
    options: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn dat_build(ctx: &Ctx, a: DatBuildArgs) -> Result<()> {
    run::require(&a.words)?;
    let emb = embeddings_path(ctx, a.embeddings.as_ref())?;
    let out = ctx.out_dir(a.out.as_deref());
    let stems: Vec<Vec<String>> = std::fs::read_to_string(&a.words)?
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|w| !w.is_empty())
        .collect();
    if ctx.dry_run {
        println!("dat build: {} stems x {} options -> {}", stems.len(), a.options, out.display());
        return Ok(());
    }
    let mut inputs = vec![("words", a.words.as_path()), ("embeddings", emb.as_path())];
    with_optional(&mut inputs, "pool", a.pool.as_ref());
    let mut run = Run::start("dat-build", &out, ctx.seed, &ctx.config_hash, None, json!({"options": a.options}), &inputs)?;
    let table = EmbeddingTable::load(&emb, None)?;
    for w in &table.warnings {
        tracing::warn!("{w}");
    }
    let pool = match &a.pool {
        Some(p) => ingest::read_word_list(&std::fs::read_to_string(p)?),
        None => table.words().to_vec(),
    };
    let mut rng = substream(ctx.seed, "dat/build", "options");
    let qs = sidequests::build_dat(&stems, &pool, a.options, &table, &mut rng)?;
    let choice: Vec<ChoiceQuestion> = qs.iter().map(DatQuestion::to_choice).collect();
    run.write_jsonl(&run.path("dat.jsonl"), schema::CHOICE, &choice)?;
    let id = run.finish()?;
    println!("dat build: {} questions [run {id}]", choice.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct DatScoreArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Multiplier applied to the reported ASD.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn dat_score(ctx: &Ctx, a: DatScoreArgs) -> Result<()> {
    run::require(&a.questions)?;
    let emb = embeddings_path(ctx, a.embeddings.as_ref())?;
    let out = ctx.out_dir(a.out.as_deref());
    let (_, choice) = jsonl::read_file::<ChoiceQuestion>(&a.questions, Some(schema::CHOICE))?;
    if ctx.dry_run {
        ctx.touch_request_log()?;
        println!("dat score: {} questions, {} backend calls -> {}", choice.len(), choice.len(), out.display());
        return Ok(());
    }
    let dat: Vec<DatQuestion> = choice.iter().map(DatQuestion::from_choice).collect::<Result<_, _>>()?;
    let inputs = [("questions", a.questions.as_path()), ("embeddings", emb.as_path())];
    let mut run = Run::start("dat-score", &out, ctx.seed, &ctx.config_hash, Some(ctx.backend_name()), json!({"scale": a.scale}), &inputs)?;
    let table = EmbeddingTable::load(&emb, None)?;
    let gateway = ctx.gateway()?;
    let result = evalkit::run_eval(&choice, &[], &gateway, &EvalOptions { seed: ctx.seed, ..Default::default() });
    let parsed: Vec<ParsedChoice> = choice
        .iter()
        .zip(&result.answers)
        .map(|(q, ans)| {
            if ans.confidence == Confidence::Failed {
                ParsedChoice::failed(&ans.reply)
            } else {
                parse_choice(&ans.reply, &q.labels(), 1)
            }
        })
        .collect();
    let score = sidequests::score_dat(&dat, &parsed, &table, a.scale)?;
    run.write_jsonl(&run.path("dat-answers.jsonl"), schema::ANSWERS, &result.answers)?;
    run.write_json(&run.path("dat-report.json"), &score)?;
    let id = run.finish()?;
    println!(
        "dat: accuracy {} mean ASD {} over {} questions [run {id}]",
        score.accuracy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        score.mean_asd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        score.total
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CggBuildArgs {
    /// Lines of `<image> <category>`.
    #[arg(long)]
    labels: PathBuf,
    /// Distractor words, one per line (built-in list otherwise).
    #[arg(long)]
    distractors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn cgg_build(ctx: &Ctx, a: CggBuildArgs) -> Result<()> {
    run::require(&a.labels)?;
    let out = ctx.out_dir(a.out.as_deref());
    let images = sidequests::parse_cgg_labels(&std::fs::read_to_string(&a.labels)?, &a.labels.display().to_string())?;
    if ctx.dry_run {
        println!("cgg build: {} images -> {} questions in {}", images.len(), images.len() * sidequests::CGG_PER_IMAGE, out.display());
        return Ok(());
    }
    let mut inputs = vec![("labels", a.labels.as_path())];
    with_optional(&mut inputs, "distractors", a.distractors.as_ref());
    let mut run = Run::start("cgg-build", &out, ctx.seed, &ctx.config_hash, None, json!({}), &inputs)?;
    let distractors = match &a.distractors {
        Some(p) => ingest::read_word_list(&std::fs::read_to_string(p)?),
        None => sidequests::default_cgg_distractors(),
    };
    let mut rng = substream(ctx.seed, "cgg/build", "options");
    let qs = sidequests::build_cgg(&images, &distractors, &mut rng)?;
    run.write_jsonl(&run.path("cgg.jsonl"), schema::CHOICE, &qs)?;
    let id = run.finish()?;
    println!("cgg build: {} questions [run {id}]", qs.len());
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation report files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

pub fn report(a: ReportArgs) -> Result<()> {
    for path in &a.reports {
        run::require(path)?;
        let text = std::fs::read_to_string(path)?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("{} is not an eval report", path.display()))?;
        println!("== {} (backend {}, seed {})", path.display(), r.backend, r.seed);
        print!("{}", evalkit::render_table(&r));
    }
    Ok(())
}
