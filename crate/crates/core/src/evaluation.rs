//! Re-identification metrics, prediction and calibration accuracy, the
//! single-call baseline and the experiment harnesses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{render_batch, AgentEnv, TemplateRole, TemplateSet};
use crate::gateway::{ChatMessage, Gateway, GatewayError, UsageLedger, UsageRecord};
use crate::ingestion::{inject_noise, IngestError, LabeledDataset, MemorySource};
use crate::model::{
    normalize_lossy, Activity, AuxRecord, Confidence, GroundTruthLabel, InferredAttribute, LabeledAttr, Profile,
};
use crate::orchestrator::{run_profile, PipelineConfig, RunError};
use crate::protocol::{extract_json_object, Attempt};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no activities to analyze")]
    EmptyInput,
    #[error("candidate {index} has keys {found:?}, expected {expected:?}")]
    KeyMismatch {
        index: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("target index {0} is not a candidate")]
    UnknownTarget(usize),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("invalid schema: {0}")]
    Schema(String),
}

/// How a predicted value is compared with a labeled one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueMatch {
    /// Normalized string equality.
    #[default]
    Exact,
    /// Equality after mapping known synonyms of the eight labeled types onto
    /// one spelling; an age range also matches an age inside it.
    Synonyms,
}

const SYNONYMS: &[(LabeledAttr, &str, &[&str])] = &[
    (LabeledAttr::Sex, "male", &["m", "man", "guy", "boy"]),
    (LabeledAttr::Sex, "female", &["f", "woman", "girl", "lady"]),
    (LabeledAttr::RelationshipStatus, "in relationship", &["in a relationship", "relationship", "partnered", "dating", "has a partner"]),
    (LabeledAttr::RelationshipStatus, "married", &["has a wife", "has a husband", "spouse"]),
    (LabeledAttr::RelationshipStatus, "single", &["unmarried", "not in a relationship"]),
    (LabeledAttr::RelationshipStatus, "engaged", &["fiance", "fiancee"]),
    (LabeledAttr::Education, "college degree", &["bachelors", "bachelor's", "bachelor's degree", "ba", "bs", "bsc", "masters", "master's", "master's degree", "university degree"]),
    (LabeledAttr::Education, "phd", &["doctorate", "ph.d", "phd degree"]),
    (LabeledAttr::Education, "hs diploma", &["high school diploma", "high school", "high school graduate"]),
    (LabeledAttr::Education, "in college", &["college student", "university student", "undergraduate"]),
    (LabeledAttr::IncomeLevel, "middle", &["medium", "average", "middle class"]),
    (LabeledAttr::IncomeLevel, "low", &["low income", "poor"]),
    (LabeledAttr::IncomeLevel, "very high", &["wealthy", "rich"]),
];

fn canonical(attr: Option<LabeledAttr>, value: &str) -> String {
    let v = normalize_lossy(value);
    let Some(attr) = attr else { return v };
    SYNONYMS
        .iter()
        .find(|(a, canon, alts)| *a == attr && (*canon == v || alts.contains(&v.as_str())))
        .map(|(_, canon, _)| canon.to_string())
        .unwrap_or(v)
}

fn age_range(v: &str) -> Option<(u32, u32)> {
    let v = normalize_lossy(v);
    if let Ok(n) = v.parse::<u32>() {
        return Some((n, n));
    }
    let (a, b) = v.split_once('-')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl ValueMatch {
    pub fn equal(self, attr: Option<LabeledAttr>, predicted: &str, truth: &str) -> bool {
        match self {
            ValueMatch::Exact => normalize_lossy(predicted) == normalize_lossy(truth),
            ValueMatch::Synonyms => {
                if attr == Some(LabeledAttr::Age) {
                    if let (Some((lo, hi)), Some((t, t2))) = (age_range(predicted), age_range(truth)) {
                        return t == t2 && lo <= t && t <= hi;
                    }
                }
                canonical(attr, predicted) == canonical(attr, truth)
            }
        }
    }
}

/// Counts matching attributes between a profile and one auxiliary record.
pub trait MatchFunction: Sync {
    fn count(&self, profile: &Profile, record: &AuxRecord) -> usize;
}

/// Number of attribute types whose highest-confidence primary value equals
/// the record's value for that type.
#[derive(Debug, Clone, Copy, Default)]
pub struct TypeValueMatch {
    pub values: ValueMatch,
}

impl TypeValueMatch {
    pub fn exact() -> Self {
        Self { values: ValueMatch::Exact }
    }

    pub fn synonyms() -> Self {
        Self {
            values: ValueMatch::Synonyms,
        }
    }
}

impl MatchFunction for TypeValueMatch {
    fn count(&self, profile: &Profile, record: &AuxRecord) -> usize {
        let mine = AuxRecord::from_profile(profile);
        mine.iter()
            .filter(|(k, v)| {
                record.get(k).is_some_and(|theirs| {
                    let attr = match self.values {
                        ValueMatch::Exact => None,
                        ValueMatch::Synonyms => LabeledAttr::from_open_type(k),
                    };
                    self.values.equal(attr, v, theirs)
                })
            })
            .count()
    }
}

/// Number of auxiliary records sharing at least `n` attributes with the
/// profile.
pub fn anonymity_set(profile: &Profile, aux: &[AuxRecord], f: &dyn MatchFunction, n: usize) -> usize {
    aux.iter().filter(|r| f.count(profile, r) >= n).count()
}

/// True when at most `k` auxiliary records share `n` or more attributes
/// with the profile.
pub fn is_nk_deanonymized(profile: &Profile, aux: &[AuxRecord], f: &dyn MatchFunction, n: usize, k: usize) -> bool {
    anonymity_set(profile, aux, f, n) <= k
}

/// Keys on which two records differ, over the union of their keys. A key
/// missing from either side counts as a difference.
pub fn hamming_distance(a: &AuxRecord, b: &AuxRecord) -> usize {
    let keys: BTreeSet<&str> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| match (a.get(k), b.get(k)) {
            (Some(x), Some(y)) => normalize_lossy(x) != normalize_lossy(y),
            _ => true,
        })
        .count()
}

/// Candidates at one distance. `rank` is 1 plus the number of candidates
/// in closer groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankGroup {
    pub rank: usize,
    pub distance: usize,
    pub members: Vec<usize>,
}

/// Ranks candidates by Hamming distance over the candidates' shared key
/// set. Keys absent from `inferred` count as mismatches; keys only in
/// `inferred` are ignored.
pub fn hamming_rank(inferred: &AuxRecord, candidates: &[AuxRecord]) -> Result<Vec<RankGroup>, EvalError> {
    let Some(first) = candidates.first() else {
        return Ok(Vec::new());
    };
    let expected: Vec<String> = first.keys().map(str::to_string).collect();
    for (index, c) in candidates.iter().enumerate() {
        let found: Vec<String> = c.keys().map(str::to_string).collect();
        if found != expected {
            return Err(EvalError::KeyMismatch { index, expected, found });
        }
    }
    let mut by_distance: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        let d = expected
            .iter()
            .filter(|k| inferred.get(k).is_none_or(|v| normalize_lossy(v) != normalize_lossy(c.get(k).unwrap_or_default())))
            .count();
        by_distance.entry(d).or_default().push(i);
    }
    let mut rank = 1;
    Ok(by_distance
        .into_iter()
        .map(|(distance, members)| {
            let g = RankGroup { rank, distance, members };
            rank += g.members.len();
            g
        })
        .collect())
}

/// Exact `correct / total` counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn add(&mut self, other: Accuracy) {
        self.correct += other.correct;
        self.total += other.total;
    }

    /// Percentage with one decimal, or `n/a` when nothing was counted.
    pub fn percent(&self) -> String {
        self.fraction().map_or_else(|| "n/a".to_string(), |f| format!("{:.1}", f * 100.0))
    }
}

/// Share of targets whose true record lands in a group starting at rank
/// `k` or better. Targets are `(inferred record, index of true candidate)`.
pub fn top_k_accuracy(targets: &[(AuxRecord, usize)], candidates: &[AuxRecord], k: usize) -> Result<Accuracy, EvalError> {
    let mut acc = Accuracy::default();
    for (inferred, truth) in targets {
        if *truth >= candidates.len() {
            return Err(EvalError::UnknownTarget(*truth));
        }
        let groups = hamming_rank(inferred, candidates)?;
        let rank = groups
            .iter()
            .find(|g| g.members.contains(truth))
            .map(|g| g.rank)
            .expect("every candidate is ranked");
        acc.total += 1;
        if rank <= k {
            acc.correct += 1;
        }
    }
    Ok(acc)
}

/// The profile's answer for one labeled type: the highest-confidence
/// attribute whose type maps onto it (earliest wins ties).
pub fn predicted_attribute(profile: &Profile, attr: LabeledAttr) -> Option<&InferredAttribute> {
    let mut best: Option<&InferredAttribute> = None;
    for a in &profile.attributes {
        if LabeledAttr::from_open_type(a.attr_type()) == Some(attr) && best.is_none_or(|b| a.confidence() > b.confidence()) {
            best = Some(a);
        }
    }
    best
}

/// One labeled attribute with the prediction made for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredLabel<'a> {
    pub label: &'a GroundTruthLabel,
    pub predicted: Option<(String, Confidence)>,
    pub correct: bool,
}

pub fn score_labels<'a>(
    predictions: &BTreeMap<String, Profile>,
    truth: &'a [GroundTruthLabel],
    values: ValueMatch,
) -> Vec<ScoredLabel<'a>> {
    truth
        .iter()
        .map(|label| {
            let predicted = predictions
                .get(&label.user_id)
                .and_then(|p| predicted_attribute(p, label.attr_type))
                .map(|a| (a.primary_value().to_string(), a.confidence()));
            let correct = predicted
                .as_ref()
                .is_some_and(|(v, _)| values.equal(Some(label.attr_type), v, &label.true_value));
            ScoredLabel {
                label,
                predicted,
                correct,
            }
        })
        .collect()
}

/// Correct over total per labeled type. A missing prediction is wrong.
pub fn prediction_accuracy(
    predictions: &BTreeMap<String, Profile>,
    truth: &[GroundTruthLabel],
    values: ValueMatch,
) -> BTreeMap<LabeledAttr, Accuracy> {
    let mut out: BTreeMap<LabeledAttr, Accuracy> = BTreeMap::new();
    for s in score_labels(predictions, truth, values) {
        let acc = out.entry(s.label.attr_type).or_default();
        acc.total += 1;
        acc.correct += usize::from(s.correct);
    }
    out
}

/// Which labeled attributes a calibration level covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "level", rename_all = "snake_case")]
pub enum LevelSelector {
    All,
    Hardness(u8),
    Certainty(u8),
    /// Confidence of the model's own prediction; unpredicted labels are
    /// never selected.
    ModelConfidence(u8),
}

impl LevelSelector {
    pub fn selects(&self, s: &ScoredLabel<'_>) -> bool {
        match *self {
            LevelSelector::All => true,
            LevelSelector::Hardness(h) => s.label.hardness.get() == h,
            LevelSelector::Certainty(c) => s.label.certainty.get() == c,
            LevelSelector::ModelConfidence(c) => s.predicted.as_ref().is_some_and(|(_, conf)| conf.get() == c),
        }
    }
}

/// Accuracy over the labels a selector picks. `None` when it picks none.
pub fn calibration_accuracy(
    predictions: &BTreeMap<String, Profile>,
    truth: &[GroundTruthLabel],
    selector: impl Fn(&ScoredLabel<'_>) -> bool,
    values: ValueMatch,
) -> Option<Accuracy> {
    let mut acc = Accuracy::default();
    for s in score_labels(predictions, truth, values) {
        if selector(&s) {
            acc.total += 1;
            acc.correct += usize::from(s.correct);
        }
    }
    (acc.total > 0).then_some(acc)
}

/// Closed vocabularies for the single-call baseline. An empty list accepts
/// any non-empty answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtiSchema {
    pub types: BTreeMap<LabeledAttr, Vec<String>>,
}

impl Default for FtiSchema {
    fn default() -> Self {
        let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut types = BTreeMap::new();
        types.insert(LabeledAttr::Age, Vec::new());
        types.insert(
            LabeledAttr::Education,
            list(&["no highschool", "in highschool", "hs diploma", "in college", "college degree", "phd"]),
        );
        types.insert(LabeledAttr::IncomeLevel, list(&["low", "middle", "high", "very high"]));
        types.insert(LabeledAttr::Location, Vec::new());
        types.insert(LabeledAttr::Occupation, Vec::new());
        types.insert(LabeledAttr::PlaceOfBirth, Vec::new());
        types.insert(
            LabeledAttr::RelationshipStatus,
            list(&["single", "in relationship", "engaged", "married", "divorced", "widowed"]),
        );
        types.insert(LabeledAttr::Sex, list(&["male", "female"]));
        Self { types }
    }
}

impl FtiSchema {
    pub fn render(&self) -> String {
        self.types
            .iter()
            .map(|(t, vocab)| {
                if vocab.is_empty() {
                    format!("- {}: free text", t.name())
                } else {
                    format!("- {}: {}", t.name(), vocab.join(" | "))
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn accept(&self, attr: LabeledAttr, value: &str) -> Option<String> {
        let vocab = self.types.get(&attr)?;
        if value.trim().is_empty() {
            return None;
        }
        if vocab.is_empty() {
            return Some(value.trim().to_string());
        }
        let v = normalize_lossy(value);
        vocab.iter().find(|w| normalize_lossy(w) == v).cloned()
    }
}

#[derive(Debug, Clone)]
pub struct FtiOutcome {
    pub profile: Profile,
    /// Schema types still without a valid answer after all retries.
    pub missing: Vec<LabeledAttr>,
    pub attempts: Vec<Attempt>,
}

/// Single-call baseline: all text in one request, one answer per schema
/// type. Missing or out-of-vocabulary answers are asked for again, up to
/// `env.max_repair_retries` times.
pub fn fti_baseline(env: &AgentEnv<'_>, activities: &[Activity], schema: &FtiSchema) -> Result<FtiOutcome, EvalError> {
    if activities.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let system = env.templates.get(TemplateRole::Fti).render(&[
        ("batch_text", &render_batch(activities)),
        ("instructions", &schema.render()),
    ]);
    let mut request = env.request("fti", 1, system, "Predict every listed attribute.");
    let mut answers: BTreeMap<LabeledAttr, String> = BTreeMap::new();
    let mut attempts = Vec::new();
    for attempt in 0..=env.max_repair_retries {
        request.tag.attempt = attempt;
        let (text, _) = env.gateway.complete(&request, env.ledger)?;
        if let Ok(obj) = extract_json_object(&text) {
            for (key, value) in &obj {
                let Ok(attr) = key.parse::<LabeledAttr>() else { continue };
                let Value::String(v) = value else { continue };
                if answers.contains_key(&attr) {
                    continue;
                }
                if let Some(ok) = schema.accept(attr, v) {
                    answers.insert(attr, ok);
                }
            }
        }
        let missing: Vec<LabeledAttr> = schema.types.keys().filter(|t| !answers.contains_key(t)).copied().collect();
        attempts.push(Attempt {
            raw: text.clone(),
            error: (!missing.is_empty()).then(|| format!("missing or out of vocabulary: {missing:?}")),
        });
        if missing.is_empty() {
            break;
        }
        let names: Vec<&str> = missing.iter().map(|t| t.name()).collect();
        request.messages.push(ChatMessage::assistant(text));
        request.messages.push(ChatMessage::user(format!(
            "These attributes were missing or not among the allowed values: {}. Reply again with one allowed value for each attribute.",
            names.join(", ")
        )));
    }
    let five = Confidence::new(5).expect("5 is a valid confidence");
    let attributes = answers
        .iter()
        .map(|(t, v)| InferredAttribute::single(t.name(), v.clone(), five, Vec::new()).expect("accepted answers are non-empty"))
        .collect();
    let missing = schema.types.keys().filter(|t| !answers.contains_key(t)).copied().collect();
    Ok(FtiOutcome {
        profile: Profile {
            user_id: env.user_id.to_string(),
            attributes,
        },
        missing,
        attempts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The four-agent loop.
    #[default]
    #[serde(rename = "autoprofiler")]
    Pipeline,
    /// One call with all text and a closed answer set per attribute.
    Fti,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pipeline => "autoprofiler",
            Method::Fti => "fti",
        }
    }
}

/// Shared settings for the dataset harnesses.
pub struct Harness<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub config: PipelineConfig,
    pub schema: FtiSchema,
    pub values: ValueMatch,
    /// Users processed at once.
    pub jobs: usize,
}

impl Harness<'_> {
    fn predict_one(&self, user: &str, activities: &[Activity], method: Method) -> Result<(Profile, UsageRecord), EvalError> {
        match method {
            Method::Pipeline => {
                let mut src = MemorySource::new(user, activities.to_vec());
                let out = run_profile(&mut src, self.gateway, self.templates, &self.config, None)?;
                Ok((out.profile, out.usage.total))
            }
            Method::Fti => {
                let ledger = UsageLedger::new();
                let env = AgentEnv {
                    gateway: self.gateway,
                    ledger: &ledger,
                    templates: self.templates,
                    user_id: user,
                    max_repair_retries: self.config.max_repair_retries,
                    format: self.config.format,
                };
                let out = fti_baseline(&env, activities, &self.schema)?;
                Ok((out.profile, ledger.total()))
            }
        }
    }

    /// Runs `method` for every user, in parallel up to `jobs`.
    pub fn predict(
        &self,
        users: &BTreeMap<String, Vec<Activity>>,
        method: Method,
    ) -> Result<(BTreeMap<String, Profile>, UsageRecord), EvalError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| EvalError::Schema(e.to_string()))?;
        let results: Vec<Result<(String, Profile, UsageRecord), EvalError>> = pool.install(|| {
            users
                .par_iter()
                .map(|(u, acts)| self.predict_one(u, acts, method).map(|(p, usage)| (u.clone(), p, usage)))
                .collect()
        });
        let mut predictions = BTreeMap::new();
        let mut usage = UsageRecord::default();
        for r in results {
            let (u, p, rec) = r?;
            usage.add(&rec);
            predictions.insert(u, p);
        }
        Ok((predictions, usage))
    }
}

/// Per-type accuracy of one method on a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub per_type: BTreeMap<LabeledAttr, Accuracy>,
    pub overall: Accuracy,
    pub predictions: BTreeMap<String, Profile>,
    pub usage: UsageRecord,
}

fn overall(per_type: &BTreeMap<LabeledAttr, Accuracy>) -> Accuracy {
    let mut acc = Accuracy::default();
    for a in per_type.values() {
        acc.add(*a);
    }
    acc
}

pub fn evaluate_dataset(dataset: &LabeledDataset, method: Method, harness: &Harness<'_>) -> Result<EvaluationReport, EvalError> {
    let (predictions, usage) = harness.predict(&dataset.users, method)?;
    let per_type = prediction_accuracy(&predictions, &dataset.labels, harness.values);
    Ok(EvaluationReport {
        method,
        overall: overall(&per_type),
        per_type,
        predictions,
        usage,
    })
}

fn table_header(first: &str) -> String {
    let cols: Vec<&str> = LabeledAttr::ALL.iter().map(|a| a.abbrev()).collect();
    format!("{first},{},ALL", cols.join(","))
}

fn table_row(name: &str, per_type: &BTreeMap<LabeledAttr, Accuracy>) -> String {
    let mut line = name.to_string();
    for a in LabeledAttr::ALL {
        let _ = write!(line, ",{}", per_type.get(&a).copied().unwrap_or_default().percent());
    }
    let _ = write!(line, ",{}", overall(per_type).percent());
    line
}

/// One row per method, accuracy in percent per labeled type.
pub fn accuracy_csv(reports: &[&EvaluationReport]) -> String {
    let mut out = table_header("method") + "\n";
    for r in reports {
        out.push_str(&table_row(r.method.as_str(), &r.per_type));
        out.push('\n');
    }
    out
}

/// Accuracy on original and noise-injected copies of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub original: BTreeMap<LabeledAttr, Accuracy>,
    pub noisy: BTreeMap<LabeledAttr, Accuracy>,
    /// Per user: `(seq, id of the inserted activity)`.
    pub replaced: BTreeMap<String, Vec<(u32, String)>>,
}

impl NoiseReport {
    /// Rows `original`, `noisy` and `delta` (percentage points).
    pub fn to_csv(&self) -> String {
        let mut out = table_header("run") + "\n";
        out.push_str(&table_row("original", &self.original));
        out.push('\n');
        out.push_str(&table_row("noisy", &self.noisy));
        out.push('\n');
        let mut delta = String::from("delta");
        let mut cols: Vec<(Accuracy, Accuracy)> = LabeledAttr::ALL
            .iter()
            .map(|a| {
                (
                    self.original.get(a).copied().unwrap_or_default(),
                    self.noisy.get(a).copied().unwrap_or_default(),
                )
            })
            .collect();
        cols.push((overall(&self.original), overall(&self.noisy)));
        for (o, n) in cols {
            match (o.fraction(), n.fraction()) {
                (Some(o), Some(n)) => {
                    let _ = write!(delta, ",{:.1}", (n - o) * 100.0);
                }
                _ => delta.push_str(",n/a"),
            }
        }
        out.push_str(&delta);
        out.push('\n');
        out
    }
}

/// Replaces `fraction` of every user's activities with other users'
/// activities, then evaluates both versions the same way. User `i` (in
/// sorted order) is seeded with `seed + i`.
pub fn run_noise_experiment(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
    method: Method,
    harness: &Harness<'_>,
) -> Result<NoiseReport, EvalError> {
    let mut noisy_users = BTreeMap::new();
    let mut replaced = BTreeMap::new();
    for (i, (user, acts)) in dataset.users.iter().enumerate() {
        let pool = dataset.pool_excluding(user);
        let noisy = inject_noise(acts, &pool, fraction, seed.wrapping_add(i as u64))?;
        replaced.insert(user.clone(), noisy.replaced);
        noisy_users.insert(user.clone(), noisy.activities);
    }
    let (orig_pred, _) = harness.predict(&dataset.users, method)?;
    let (noisy_pred, _) = harness.predict(&noisy_users, method)?;
    Ok(NoiseReport {
        method,
        fraction,
        seed,
        original: prediction_accuracy(&orig_pred, &dataset.labels, harness.values),
        noisy: prediction_accuracy(&noisy_pred, &dataset.labels, harness.values),
        replaced,
    })
}
