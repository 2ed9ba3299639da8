//! Command-line surface. `run` parses arguments, executes one subcommand
//! and returns the process exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::TemplateSet;
use crate::analysis::{analyze_rule, corrections_template, load_corrections, load_score_table, privacy_risk, render_report, DEFAULT_MIN_CONFIDENCE};
use crate::evaluation::{
    accuracy_csv, anonymity_set, evaluate_dataset, run_noise_experiment, FtiSchema, Harness, Method, TypeValueMatch, ValueMatch,
};
use crate::gateway::{Gateway, GatewayConfig};
use crate::ingestion::{load_synthpai, mask_activities, mask_entities, open_archive, ArchiveRecord, BuiltinDetector, Span};
use crate::model::{AuxRecord, Confidence, Profile, ScoreTable};
use crate::orchestrator::{derive_run_id, resume, run_profile, AblationConfig, PipelineConfig, RunStore};
use crate::protocol::to_canonical_json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_FALLBACK: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Name of the configuration file used when `--config` is not given.
pub const DEFAULT_CONFIG: &str = "pseudoscope.json";

#[derive(Debug, Parser)]
#[command(name = "pseudoscope", version, about = "Audit what an LLM adversary can infer from a pseudonymous activity archive")]
pub struct Cli {
    /// Base directory for every relative path
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Infer a profile from one archive
    Profile(ProfileArgs),
    /// Score inferred attributes against a labeled dataset
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
    /// Anonymity set of a profile within an auxiliary dataset
    Deanon(DeanonArgs),
    /// Sensitivity and identifiability of a profile
    Risk(RiskArgs),
    /// Accuracy before and after replacing activities with other users' ones
    NoiseTest(NoiseArgs),
    /// Replace detected entities in an archive with ***
    Mask(MaskArgs),
    /// Markdown exposure report for a finished run
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Activity archive (JSON Lines)
    #[arg(long)]
    pub archive: PathBuf,
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Components to enable: e, es, esr, esu or all
    #[arg(long, default_value = "all")]
    pub ablation: String,
    /// Continue a checkpointed run
    #[arg(long, value_name = "RUN_ID")]
    pub resume: Option<String>,
    /// Confirm you own the archive; required unless it is marked as a fixture
    #[arg(long)]
    pub i_own_this_data: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvaluateCommand {
    /// Labeled synthetic comments (comments.jsonl + labels.jsonl)
    Synthpai(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    #[value(name = "autoprofiler")]
    Pipeline,
    Fti,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pipeline => Method::Pipeline,
            MethodArg::Fti => Method::Fti,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MatchArg {
    Exact,
    Synonyms,
}

impl From<MatchArg> for ValueMatch {
    fn from(m: MatchArg) -> Self {
        match m {
            MatchArg::Exact => ValueMatch::Exact,
            MatchArg::Synonyms => ValueMatch::Synonyms,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Agent pipeline or single-call baseline
    #[arg(long, value_enum, default_value = "autoprofiler")]
    pub method: MethodArg,
    /// Run configuration (JSON)
    #[arg(long, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    /// Users profiled in parallel
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Value comparison
    #[arg(long = "match", value_enum, default_value = "exact")]
    pub matcher: MatchArg,
    /// Per-user predictions as JSON
    #[arg(long)]
    pub detail: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeanonArgs {
    /// Profile JSON
    #[arg(long)]
    pub profile: PathBuf,
    /// Auxiliary records: CSV with a header row, or JSON Lines of objects
    #[arg(long)]
    pub aux: PathBuf,
    /// Attributes that must match
    #[arg(long)]
    pub n: usize,
    /// Largest anonymity set still counted as de-anonymized
    #[arg(long)]
    pub k: usize,
    /// Value comparison
    #[arg(long = "match", value_enum, default_value = "exact")]
    pub matcher: MatchArg,
}

#[derive(Debug, Args)]
pub struct RiskArgs {
    /// Profile JSON
    #[arg(long)]
    pub profile: PathBuf,
    /// Per-category score table (JSON)
    #[arg(long)]
    pub scores: PathBuf,
    /// Drop attributes below this confidence
    #[arg(long, default_value_t = i64::from(DEFAULT_MIN_CONFIDENCE))]
    pub min_confidence: i64,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Share of each user's activities to replace
    #[arg(long, default_value_t = 0.10)]
    pub fraction: f64,
    /// Seed for choosing replaced and inserted activities
    #[arg(long)]
    pub seed: u64,
    /// Agent pipeline or single-call baseline
    #[arg(long, value_enum, default_value = "autoprofiler")]
    pub method: MethodArg,
    /// Run configuration (JSON)
    #[arg(long, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    /// Users profiled in parallel
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Value comparison
    #[arg(long = "match", value_enum, default_value = "exact")]
    pub matcher: MatchArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorArg {
    Builtin,
    Spans,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Activity archive (JSON Lines)
    #[arg(long)]
    pub archive: PathBuf,
    /// Built-in patterns, or explicit spans from SPANS_FILE
    #[arg(long, value_enum, default_value = "builtin")]
    pub detector: DetectorArg,
    /// With `spans`: JSON Lines of {"id", "spans": [{"start", "end"}]}
    #[arg(value_name = "SPANS_FILE")]
    pub spans_file: Option<PathBuf>,
    /// Output file; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run to report on
    #[arg(long, value_name = "RUN_ID")]
    pub run: String,
    /// Run configuration (JSON), for the runs directory
    #[arg(long, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    /// Per-category score table (JSON); built-in table when absent
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Drop attributes below this confidence
    #[arg(long, default_value_t = i64::from(DEFAULT_MIN_CONFIDENCE))]
    pub min_confidence: i64,
    /// Write an editable corrections file next to the report
    #[arg(long)]
    pub review: bool,
    /// Category corrections (JSON Lines of {"attr_index", "category"})
    #[arg(long)]
    pub corrections: Option<PathBuf>,
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gateway: GatewayConfig,
    pub pipeline: PipelineConfig,
    /// Directory with prompt template overrides
    pub templates_dir: Option<PathBuf>,
    /// Defaults to `runs`
    pub runs_dir: Option<PathBuf>,
    /// Extra closed vocabularies for the single-call baseline
    pub fti_schema: Option<FtiSchema>,
}

#[derive(Debug)]
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

struct Ctx<'a> {
    workdir: PathBuf,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn config(&self, p: &Path) -> Result<FileConfig, Failure> {
        let path = self.path(p);
        if !path.exists() && p == Path::new(DEFAULT_CONFIG) {
            return Ok(FileConfig::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
    }

    fn templates(&self, cfg: &FileConfig) -> Result<TemplateSet, Failure> {
        Ok(match &cfg.templates_dir {
            Some(d) => TemplateSet::load_dir(&self.path(d))?,
            None => TemplateSet::builtin(),
        })
    }

    fn gateway(&self, cfg: &FileConfig) -> Result<Gateway, Failure> {
        Ok(cfg.gateway.build(&self.workdir)?)
    }

    fn runs_dir(&self, cfg: &FileConfig) -> PathBuf {
        self.path(cfg.runs_dir.as_deref().unwrap_or(Path::new("runs")))
    }
}

/// Parses `args` (program name first), runs the subcommand and returns
/// the exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            let code = match e.kind() {
                DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let mut ctx = Ctx {
        workdir: cli.workdir,
        out,
    };
    let result = match cli.command {
        Command::Profile(a) => profile(&mut ctx, a),
        Command::Evaluate(EvaluateCommand::Synthpai(a)) => evaluate(&mut ctx, a),
        Command::Deanon(a) => deanon(&mut ctx, a),
        Command::Risk(a) => risk(&mut ctx, a),
        Command::NoiseTest(a) => noise(&mut ctx, a),
        Command::Mask(a) => mask(&mut ctx, a),
        Command::Report(a) => report(&mut ctx, a),
    };
    match result {
        Ok(code) => code,
        Err(Failure(msg)) if msg.starts_with("usage: ") => {
            let _ = writeln!(err, "error: {}", &msg[7..]);
            EXIT_USAGE
        }
        Err(Failure(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_FATAL
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure(format!("usage: {msg}"))
}

fn confidence_flag(n: i64) -> Result<Confidence, Failure> {
    Confidence::new(n).map_err(|_| usage(format!("--min-confidence must be between 1 and 5, got {n}")))
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn profile(ctx: &mut Ctx<'_>, a: ProfileArgs) -> Result<i32, Failure> {
    let ablation = AblationConfig::from_code(&a.ablation)
        .ok_or_else(|| usage(format!("--ablation expects e, es, esr, esu or all, got {:?}", a.ablation)))?;
    let cfg = ctx.config(&a.config)?;
    let archive_path = ctx.path(&a.archive);
    let mut source = open_archive(&archive_path)?;
    let meta = source.meta().clone();
    if !meta.fixture {
        if !meta.consent {
            return Err(Failure(format!(
                "{} has no consent marker; add {{\"meta\":{{\"consent\":true}}}} as its first line",
                archive_path.display()
            )));
        }
        if !a.i_own_this_data {
            return Err(usage("--i-own-this-data is required for archives that are not fixtures"));
        }
    }
    let gateway = ctx.gateway(&cfg)?;
    let templates = ctx.templates(&cfg)?;
    let runs = ctx.runs_dir(&cfg);
    let outcome = match &a.resume {
        Some(id) => resume(&RunStore::new(&runs, id.clone()), &mut source, &gateway, &templates)?,
        None => {
            let config = PipelineConfig {
                ablation,
                ..cfg.pipeline.clone()
            };
            let id = derive_run_id(&file_digest(&archive_path)?, &config, templates.hash());
            run_profile(&mut source, &gateway, &templates, &config, Some(&RunStore::new(&runs, id)))?
        }
    };
    let run_id = outcome.run_id.clone().unwrap_or_default();
    let store = RunStore::new(&runs, run_id.clone());
    writeln!(ctx.out, "run_id {run_id}")?;
    writeln!(ctx.out, "run_dir {}", store.dir().display())?;
    writeln!(ctx.out, "attributes {}", outcome.profile.len())?;
    writeln!(ctx.out, "calls {}", outcome.usage.total.calls)?;
    writeln!(ctx.out, "cost_usd {:.4}", outcome.usage.total.cost_estimate)?;
    Ok(if outcome.fallback_used { EXIT_FALLBACK } else { EXIT_OK })
}

fn harness<'a>(cfg: &FileConfig, gateway: &'a Gateway, templates: &'a TemplateSet, jobs: usize, m: MatchArg) -> Result<Harness<'a>, Failure> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    Ok(Harness {
        gateway,
        templates,
        config: cfg.pipeline.clone(),
        schema: cfg.fti_schema.clone().unwrap_or_default(),
        values: m.into(),
        jobs,
    })
}

fn evaluate(ctx: &mut Ctx<'_>, a: EvaluateArgs) -> Result<i32, Failure> {
    let cfg = ctx.config(&a.config)?;
    let dataset = load_synthpai(&ctx.path(&a.data))?;
    let gateway = ctx.gateway(&cfg)?;
    let templates = ctx.templates(&cfg)?;
    let h = harness(&cfg, &gateway, &templates, a.jobs, a.matcher)?;
    let report = evaluate_dataset(&dataset, a.method.into(), &h)?;
    if let Some(p) = &a.detail {
        fs::write(ctx.path(p), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    write!(ctx.out, "{}", accuracy_csv(&[&report]))?;
    Ok(EXIT_OK)
}

/// Reads auxiliary records from CSV (by extension) or JSON Lines.
pub fn load_aux(path: &Path) -> Result<Vec<AuxRecord>, String> {
    let fail = |m: String| format!("{}: {m}", path.display());
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut reader = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
        let headers = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
        let mut out = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| fail(e.to_string()))?;
            let pairs = headers.iter().zip(row.iter()).filter(|(_, v)| !v.trim().is_empty());
            out.push(AuxRecord::new(pairs.map(|(k, v)| (k, v.to_string()))).map_err(|e| fail(format!("row {}: {e}", i + 2)))?);
        }
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let map: BTreeMap<String, String> = serde_json::from_str(l).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
            AuxRecord::new(map).map_err(|e| fail(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn deanon(ctx: &mut Ctx<'_>, a: DeanonArgs) -> Result<i32, Failure> {
    let profile: Profile = read_json(&ctx.path(&a.profile))?;
    let aux = load_aux(&ctx.path(&a.aux)).map_err(Failure)?;
    let f = TypeValueMatch { values: a.matcher.into() };
    let size = anonymity_set(&profile, &aux, &f, a.n);
    writeln!(ctx.out, "anonymity_set {size}")?;
    writeln!(ctx.out, "deanonymized {}", size <= a.k)?;
    Ok(EXIT_OK)
}

fn load_scores(ctx: &Ctx<'_>, p: Option<&Path>) -> Result<ScoreTable, Failure> {
    Ok(match p {
        Some(p) => load_score_table(&ctx.path(p))?,
        None => ScoreTable::default(),
    })
}

fn risk(ctx: &mut Ctx<'_>, a: RiskArgs) -> Result<i32, Failure> {
    let min = confidence_flag(a.min_confidence)?;
    let profile: Profile = read_json(&ctx.path(&a.profile))?;
    let table = load_scores(ctx, Some(&a.scores))?;
    let analysis = analyze_rule(&profile, min, &table, &[])?;
    let summary = privacy_risk(&analysis.categories, &table);
    writeln!(ctx.out, "attributes {}", summary.attributes)?;
    let avg = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    writeln!(ctx.out, "avg_sensitivity {}", avg(summary.avg_sensitivity))?;
    writeln!(ctx.out, "avg_identifiability {}", avg(summary.avg_identifiability))?;
    for (cat, n) in &summary.counts {
        writeln!(ctx.out, "category {cat} {n}")?;
    }
    Ok(EXIT_OK)
}

fn noise(ctx: &mut Ctx<'_>, a: NoiseArgs) -> Result<i32, Failure> {
    if !(0.0..=1.0).contains(&a.fraction) {
        return Err(usage(format!("--fraction must be within [0, 1], got {}", a.fraction)));
    }
    let cfg = ctx.config(&a.config)?;
    let dataset = load_synthpai(&ctx.path(&a.data))?;
    let gateway = ctx.gateway(&cfg)?;
    let templates = ctx.templates(&cfg)?;
    let h = harness(&cfg, &gateway, &templates, a.jobs, a.matcher)?;
    let report = run_noise_experiment(&dataset, a.fraction, a.seed, a.method.into(), &h)?;
    write!(ctx.out, "{}", report.to_csv())?;
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanLine {
    id: String,
    spans: Vec<Span>,
}

fn mask(ctx: &mut Ctx<'_>, a: MaskArgs) -> Result<i32, Failure> {
    let mut source = open_archive(&ctx.path(&a.archive))?;
    let meta = source.meta().clone();
    let activities = source.read_all()?;
    let masked = match (a.detector, &a.spans_file) {
        (DetectorArg::Builtin, None) => mask_activities(&activities, &BuiltinDetector::default()),
        (DetectorArg::Builtin, Some(_)) => return Err(usage("SPANS_FILE is only used with --detector spans")),
        (DetectorArg::Spans, None) => return Err(usage("--detector spans needs a SPANS_FILE")),
        (DetectorArg::Spans, Some(p)) => {
            let path = ctx.path(p);
            let text = fs::read_to_string(&path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
            let mut spans: BTreeMap<String, Vec<Span>> = BTreeMap::new();
            for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let line: SpanLine = serde_json::from_str(l).map_err(|e| Failure(format!("{}:{}: {e}", path.display(), i + 1)))?;
                spans.entry(line.id).or_default().extend(line.spans);
            }
            let mut out = Vec::with_capacity(activities.len());
            for act in &activities {
                let mut m = act.clone();
                if let Some(s) = spans.remove(&act.id) {
                    m.text = mask_entities(&act.text, &s).map_err(|e| Failure(format!("activity {}: {e}", act.id)))?;
                }
                out.push(m);
            }
            if let Some(id) = spans.keys().next() {
                return Err(Failure(format!("{}: no activity with id {id}", path.display())));
            }
            out
        }
    };
    let mut text = String::new();
    if meta != Default::default() {
        text.push_str(&to_canonical_json(&serde_json::json!({ "meta": meta })));
        text.push('\n');
    }
    for act in &masked {
        text.push_str(&to_canonical_json(&ArchiveRecord::from_activity(act)));
        text.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(ctx.path(p), text)?,
        None => ctx.out.write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn report(ctx: &mut Ctx<'_>, a: ReportArgs) -> Result<i32, Failure> {
    let min = confidence_flag(a.min_confidence)?;
    let cfg = ctx.config(&a.config)?;
    let store = RunStore::new(&ctx.runs_dir(&cfg), a.run.clone());
    let profile = store.load_profile()?;
    let table = load_scores(ctx, a.scores.as_deref())?;
    let corrections = match &a.corrections {
        Some(p) => load_corrections(&ctx.path(p))?,
        None => Vec::new(),
    };
    let analysis = analyze_rule(&profile, min, &table, &corrections)?;
    let md = render_report(&analysis);
    fs::write(store.dir().join("report.md"), &md)?;
    if a.review {
        let path = store.dir().join("corrections.jsonl");
        fs::write(&path, corrections_template(&analysis.categories))?;
        writeln!(ctx.out, "<!-- corrections template: {} -->", path.display())?;
    }
    write!(ctx.out, "{md}")?;
    Ok(EXIT_OK)
}
