//! The four agent roles: prompt assembly, one gateway call (with repair),
//! typed result. Agents hold no state between calls.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{ChatRequest, Gateway, GatewayError, RequestTag, UsageLedger};
use crate::ingestion::{ActivitySource, Cursor, IngestError, Page};
use crate::model::{normalize_lossy, Activity, Evidence, InferredAttribute, Profile, StrategistDecision, MAX_CANDIDATE_VALUES};
use crate::protocol::{
    self, parse_attributes_plain, parse_strategist_plain, render_attributes_plain, repair_loop, Attempt,
    ParsedAttributes, ProtocolError, RepairError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateRole {
    Strategist,
    Extractor,
    Summarizer,
    Categorizer,
    Fti,
}

impl TemplateRole {
    pub const ALL: [TemplateRole; 5] = [
        TemplateRole::Strategist,
        TemplateRole::Extractor,
        TemplateRole::Summarizer,
        TemplateRole::Categorizer,
        TemplateRole::Fti,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateRole::Strategist => "strategist",
            TemplateRole::Extractor => "extractor",
            TemplateRole::Summarizer => "summarizer",
            TemplateRole::Categorizer => "categorizer",
            TemplateRole::Fti => "fti",
        }
    }

    /// Placeholders a template for this role must use, and the only ones
    /// it may use.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateRole::Strategist => &["progress_summary"],
            TemplateRole::Extractor => &["batch_text", "inferred_attributes", "instructions"],
            TemplateRole::Summarizer => &["inferred_attributes"],
            TemplateRole::Categorizer => &["inferred_attributes"],
            TemplateRole::Fti => &["batch_text", "instructions"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateRole::Strategist => include_str!("../templates/strategist.txt"),
            TemplateRole::Extractor => include_str!("../templates/extractor.txt"),
            TemplateRole::Summarizer => include_str!("../templates/summarizer.txt"),
            TemplateRole::Categorizer => include_str!("../templates/categorizer.txt"),
            TemplateRole::Fti => include_str!("../templates/fti.txt"),
        }
    }
}

impl fmt::Display for TemplateRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Templates describe roles and output schemas only, never worked examples.
pub const FORBIDDEN_MARKER: &str = "Example:";

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{role} template placeholders: missing {missing:?}, unexpected {unexpected:?}")]
    PlaceholderMismatch {
        role: TemplateRole,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("{role} template contains a worked example ({FORBIDDEN_MARKER:?})")]
    ContainsExample { role: TemplateRole },
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    role: TemplateRole,
    text: String,
}

impl PromptTemplate {
    pub fn new(role: TemplateRole, text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        if text.contains(FORBIDDEN_MARKER) {
            return Err(TemplateError::ContainsExample { role });
        }
        let used: BTreeSet<String> = placeholder_regex()
            .captures_iter(&text)
            .map(|c| c[1].to_string())
            .collect();
        let wanted: BTreeSet<String> = role.placeholders().iter().map(|s| s.to_string()).collect();
        if used != wanted {
            return Err(TemplateError::PlaceholderMismatch {
                role,
                missing: wanted.difference(&used).cloned().collect(),
                unexpected: used.difference(&wanted).cloned().collect(),
            });
        }
        Ok(Self { role, text })
    }

    pub fn role(&self) -> TemplateRole {
        self.role
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Fills placeholders in one pass, so substituted text is never
    /// re-expanded. Missing values render as empty.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        placeholder_regex()
            .replace_all(&self.text, |caps: &regex::Captures| {
                values
                    .iter()
                    .find(|(k, _)| *k == &caps[1])
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_default()
            })
            .into_owned()
    }
}

/// One template per role, plus the hash identifying the set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
    hash: String,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateRole::ALL
            .iter()
            .map(|r| PromptTemplate::new(*r, r.builtin()).expect("bundled templates are valid"))
            .collect();
        Self::from_templates(templates)
    }

    /// Loads `<role>.txt` for every role from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = Vec::new();
        for role in TemplateRole::ALL {
            let path = dir.join(format!("{role}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io { path, source })?;
            templates.push(PromptTemplate::new(role, text)?);
        }
        Ok(Self::from_templates(templates))
    }

    fn from_templates(templates: Vec<PromptTemplate>) -> Self {
        let mut hasher = Sha256::new();
        for t in &templates {
            hasher.update(t.role.as_str().as_bytes());
            hasher.update([0]);
            hasher.update(t.text.as_bytes());
            hasher.update([0]);
        }
        Self {
            templates,
            hash: hex::encode(hasher.finalize()),
        }
    }

    pub fn get(&self, role: TemplateRole) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.role == role)
            .expect("a template set holds every role")
    }

    /// SHA-256 over all templates; recorded in every transcript.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// How agents exchange results: validated JSON or free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageFormat {
    #[default]
    Structured,
    Plain,
}

const PLAIN_STRATEGIST: &str =
    "Ignore the JSON reply format. Answer in plain text, starting with one of: retrieve, infer, refine, finish.";
const PLAIN_ATTRIBUTES: &str = "Ignore the JSON reply format. Answer in plain text with one attribute per line, written as `- Type: value | alternative (confidence N)`.";

/// Everything an agent call needs besides its inputs.
#[derive(Clone, Copy)]
pub struct AgentEnv<'a> {
    pub gateway: &'a Gateway,
    pub ledger: &'a UsageLedger,
    pub templates: &'a TemplateSet,
    pub user_id: &'a str,
    pub max_repair_retries: u32,
    pub format: MessageFormat,
}

impl AgentEnv<'_> {
    pub(crate) fn request(&self, agent: &str, step: u32, system: String, user: &str) -> ChatRequest {
        ChatRequest::new(
            system,
            user,
            RequestTag {
                agent: agent.to_string(),
                user: self.user_id.to_string(),
                step,
                attempt: 0,
            },
        )
    }
}

/// A typed agent result plus the raw model traffic behind it.
#[derive(Debug, Clone)]
pub struct AgentOutput<T> {
    pub value: T,
    pub attempts: Vec<Attempt>,
    pub warnings: Vec<String>,
    /// The model never produced a usable reply and a fallback was used.
    pub fallback: bool,
}

impl<T> AgentOutput<T> {
    fn direct(value: T) -> Self {
        Self {
            value,
            attempts: Vec::new(),
            warnings: Vec::new(),
            fallback: false,
        }
    }
}

type Parser<T> = fn(&str) -> Result<T, ProtocolError>;

/// Asks the Strategist for the next action. Exhausted repairs are returned
/// to the caller, which owns the fallback policy.
pub fn strategist_decide(
    env: &AgentEnv<'_>,
    step: u32,
    progress_summary: &str,
) -> Result<AgentOutput<StrategistDecision>, RepairError> {
    let system = env
        .templates
        .get(TemplateRole::Strategist)
        .render(&[("progress_summary", progress_summary)]);
    let (user, parse): (&str, Parser<StrategistDecision>) = match env.format {
        MessageFormat::Structured => ("Decide the next action.", protocol::parse_strategist),
        MessageFormat::Plain => (PLAIN_STRATEGIST, parse_strategist_plain),
    };
    let request = env.request("strategist", step, system, user);
    let repaired = repair_loop(env.gateway, env.ledger, request, env.max_repair_retries, parse)?;
    Ok(AgentOutput {
        value: repaired.value,
        attempts: repaired.attempts,
        warnings: Vec::new(),
        fallback: false,
    })
}

/// The Retriever reads the next page from the source. It needs no model.
pub fn retrieve_batch(
    source: &mut dyn ActivitySource,
    cursor: &Cursor,
    batch_size: usize,
) -> Result<Page, IngestError> {
    source.next_page(cursor, batch_size)
}

/// What the Extractor sees besides the batch.
#[derive(Debug, Clone, Copy)]
pub enum ExtractContext<'a> {
    None,
    /// Long-term memory: attributes inferred so far.
    Profile(&'a Profile),
    /// Earlier raw activities, for runs without structured memory.
    History(&'a [Activity]),
}

impl ExtractContext<'_> {
    fn seqs(&self) -> BTreeSet<u32> {
        match self {
            ExtractContext::None => BTreeSet::new(),
            ExtractContext::Profile(p) => p.evidence_seqs(),
            ExtractContext::History(h) => h.iter().map(|a| a.seq).collect(),
        }
    }

    fn render(&self, format: MessageFormat) -> String {
        match self {
            ExtractContext::None => "(none)".into(),
            ExtractContext::Profile(p) => render_attribute_list(&p.attributes, format),
            ExtractContext::History(h) => render_batch(h),
        }
    }
}

pub fn render_batch(batch: &[Activity]) -> String {
    batch.iter().map(Activity::render).collect::<Vec<_>>().join("\n")
}

/// `{"attributes": [...]}` in canonical JSON, or plain lines.
pub fn render_attribute_list(attributes: &[InferredAttribute], format: MessageFormat) -> String {
    match format {
        MessageFormat::Structured => protocol::to_canonical_json(&serde_json::json!({ "attributes": attributes })),
        MessageFormat::Plain if attributes.is_empty() => "(none)".into(),
        MessageFormat::Plain => render_attributes_plain(attributes),
    }
}

fn attribute_parser(format: MessageFormat) -> Parser<ParsedAttributes> {
    match format {
        MessageFormat::Structured => protocol::parse_extractor,
        MessageFormat::Plain => |raw| Ok(parse_attributes_plain(raw)),
    }
}

/// Drops evidence entries citing activities the agent was never shown.
/// The attribute itself is kept.
pub fn filter_evidence(
    attributes: Vec<InferredAttribute>,
    allowed: &BTreeSet<u32>,
    warnings: &mut Vec<String>,
) -> Vec<InferredAttribute> {
    attributes
        .into_iter()
        .map(|mut a| {
            let before = a.evidence().len();
            let attr_type = a.attr_type().to_string();
            a.retain_evidence(|e| allowed.contains(&e.seq));
            if a.evidence().len() < before {
                warnings.push(format!(
                    "dropped {} evidence reference(s) of {attr_type:?} citing unseen activities",
                    before - a.evidence().len()
                ));
            }
            a
        })
        .collect()
}

/// Infers attributes from one batch. An exhausted repair loop yields an
/// empty list with a warning; backend failures propagate.
pub fn extract_attributes(
    env: &AgentEnv<'_>,
    step: u32,
    batch: &[Activity],
    instructions: &str,
    context: ExtractContext<'_>,
) -> Result<AgentOutput<Vec<InferredAttribute>>, GatewayError> {
    if batch.is_empty() {
        return Ok(AgentOutput::direct(Vec::new()));
    }
    let batch_text = render_batch(batch);
    let context_text = context.render(env.format);
    let system = env.templates.get(TemplateRole::Extractor).render(&[
        ("batch_text", &batch_text),
        ("inferred_attributes", &context_text),
        ("instructions", if instructions.is_empty() { "(none)" } else { instructions }),
    ]);
    let user = match env.format {
        MessageFormat::Structured => "Infer the author's attributes from the activities above.",
        MessageFormat::Plain => PLAIN_ATTRIBUTES,
    };
    let request = env.request("extractor", step, system, user);
    match repair_loop(env.gateway, env.ledger, request, env.max_repair_retries, attribute_parser(env.format)) {
        Ok(repaired) => {
            let mut warnings = repaired.value.warnings;
            let mut allowed = context.seqs();
            allowed.extend(batch.iter().map(|a| a.seq));
            let attributes = filter_evidence(repaired.value.attributes, &allowed, &mut warnings);
            Ok(AgentOutput {
                value: attributes,
                attempts: repaired.attempts,
                warnings,
                fallback: false,
            })
        }
        Err(RepairError::Exhausted { attempts }) => Ok(AgentOutput {
            value: Vec::new(),
            warnings: vec![format!("extractor gave no usable reply after {} attempts", attempts.len())],
            attempts,
            fallback: true,
        }),
        Err(RepairError::Backend { error, .. }) => Err(error),
    }
}

/// Merges new attributes into the profile. With `use_model` the Summarizer
/// proposes the merge and [`dedup`] cleans it up; without it, or when the
/// model never answers usably, [`mechanical_merge`] is used.
pub fn summarize_refine(
    env: &AgentEnv<'_>,
    step: u32,
    current: &Profile,
    incoming: Vec<InferredAttribute>,
    use_model: bool,
) -> Result<AgentOutput<Profile>, GatewayError> {
    if incoming.is_empty() {
        return Ok(AgentOutput::direct(current.clone()));
    }
    let mut all = current.attributes.clone();
    all.extend(incoming);
    if !use_model {
        return Ok(AgentOutput::direct(mechanical_merge(&current.user_id, all)));
    }
    let listing = render_attribute_list(&all, env.format);
    let system = env
        .templates
        .get(TemplateRole::Summarizer)
        .render(&[("inferred_attributes", &listing)]);
    let user = match env.format {
        MessageFormat::Structured => "Consolidate the attributes above.",
        MessageFormat::Plain => PLAIN_ATTRIBUTES,
    };
    let request = env.request("summarizer", step, system, user);
    match repair_loop(env.gateway, env.ledger, request, env.max_repair_retries, attribute_parser(env.format)) {
        Ok(repaired) => {
            let mut warnings = repaired.value.warnings;
            let allowed: BTreeSet<u32> = all.iter().flat_map(|a| a.evidence().iter().map(|e| e.seq)).collect();
            let cleaned = filter_evidence(repaired.value.attributes, &allowed, &mut warnings);
            Ok(AgentOutput {
                value: Profile {
                    user_id: current.user_id.clone(),
                    attributes: dedup(cleaned),
                },
                attempts: repaired.attempts,
                warnings,
                fallback: false,
            })
        }
        Err(RepairError::Exhausted { attempts }) => Ok(AgentOutput {
            value: mechanical_merge(&current.user_id, all),
            warnings: vec![format!(
                "summarizer gave no usable reply after {} attempts; merged mechanically",
                attempts.len()
            )],
            attempts,
            fallback: true,
        }),
        Err(RepairError::Backend { error, .. }) => Err(error),
    }
}

fn union_evidence<'a>(items: impl IntoIterator<Item = &'a Evidence>) -> Vec<Evidence> {
    let set: BTreeSet<&Evidence> = items.into_iter().collect();
    set.into_iter().cloned().collect()
}

fn push_value(values: &mut Vec<String>, seen: &mut BTreeSet<String>, v: &str) {
    if values.len() < MAX_CANDIDATE_VALUES && seen.insert(normalize_lossy(v)) {
        values.push(v.to_string());
    }
}

/// Collapses attributes sharing a normalized `(type, primary value)`: the
/// first spelling wins, confidence is the maximum, evidence the union, and
/// alternatives are kept in first-seen order up to three values.
pub fn dedup(attributes: Vec<InferredAttribute>) -> Vec<InferredAttribute> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<InferredAttribute>> = HashMap::new();
    for a in attributes {
        let key = a.dedup_key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(a);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let mut values = Vec::new();
            let mut seen = BTreeSet::new();
            for a in group {
                for v in a.values() {
                    push_value(&mut values, &mut seen, v);
                }
            }
            let confidence = group.iter().map(|a| a.confidence()).max().expect("non-empty group");
            let evidence = union_evidence(group.iter().flat_map(|a| a.evidence()));
            InferredAttribute::new(group[0].attr_type(), values, confidence, evidence).expect("merged attribute is valid")
        })
        .collect()
}

struct Candidate<'a> {
    value: &'a str,
    confidence: u8,
    evidence: BTreeSet<&'a Evidence>,
    first_seen: usize,
}

impl Candidate<'_> {
    fn recency(&self) -> u32 {
        self.evidence.iter().map(|e| e.seq).max().unwrap_or(0)
    }
}

/// The model-free merge: one attribute per normalized type. Values that
/// appear as a primary are ranked by confidence, then evidence count, then
/// most recent evidence; values only ever seen as alternatives follow.
pub fn mechanical_merge(user_id: &str, attributes: Vec<InferredAttribute>) -> Profile {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&InferredAttribute>> = HashMap::new();
    for a in &attributes {
        let key = normalize_lossy(a.attr_type());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(a);
    }
    let merged = order
        .iter()
        .map(|key| {
            let group = &groups[key];
            let mut primaries: Vec<Candidate<'_>> = Vec::new();
            for a in group {
                let norm = normalize_lossy(a.primary_value());
                match primaries.iter_mut().find(|c| normalize_lossy(c.value) == norm) {
                    Some(c) => {
                        c.confidence = c.confidence.max(a.confidence().get());
                        c.evidence.extend(a.evidence());
                    }
                    None => primaries.push(Candidate {
                        value: a.primary_value(),
                        confidence: a.confidence().get(),
                        evidence: a.evidence().iter().collect(),
                        first_seen: primaries.len(),
                    }),
                }
            }
            primaries.sort_by(|x, y| {
                y.confidence
                    .cmp(&x.confidence)
                    .then(y.evidence.len().cmp(&x.evidence.len()))
                    .then(y.recency().cmp(&x.recency()))
                    .then(x.first_seen.cmp(&y.first_seen))
            });
            let mut values = Vec::new();
            let mut seen = BTreeSet::new();
            for c in &primaries {
                push_value(&mut values, &mut seen, c.value);
            }
            for a in group {
                for v in &a.values()[1..] {
                    push_value(&mut values, &mut seen, v);
                }
            }
            let confidence = group.iter().map(|a| a.confidence()).max().expect("non-empty group");
            let evidence = union_evidence(group.iter().flat_map(|a| a.evidence()));
            InferredAttribute::new(group[0].attr_type(), values, confidence, evidence).expect("merged attribute is valid")
        })
        .collect();
    Profile {
        user_id: user_id.to_string(),
        attributes: merged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptEntry, ScriptMatch, ScriptedBackend};
    use crate::model::{Action, ActivityKind, Confidence};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn conf(n: i64) -> Confidence {
        Confidence::new(n).unwrap()
    }

    fn attr(t: &str, values: &[&str], c: i64, seqs: &[u32]) -> InferredAttribute {
        InferredAttribute::new(
            t,
            values.iter().map(|v| v.to_string()).collect(),
            conf(c),
            seqs.iter().map(|s| Evidence::new(*s, format!("quote {s}"))).collect(),
        )
        .unwrap()
    }

    fn activity(seq: u32, text: &str) -> Activity {
        Activity::new(format!("a{seq}"), seq, Utc.timestamp_opt(1_700_000_000 + seq as i64, 0).unwrap(), ActivityKind::Comment, text)
            .unwrap()
    }

    fn gateway(entries: Vec<ScriptEntry>) -> Gateway {
        Gateway::new(Arc::new(ScriptedBackend::new(entries).unwrap()))
    }

    fn on(agent: &str) -> ScriptMatch {
        ScriptMatch {
            agent: agent.into(),
            ..ScriptMatch::default()
        }
    }

    fn containing(agent: &str, needles: &[&str]) -> ScriptMatch {
        ScriptMatch {
            agent: agent.into(),
            contains: needles.iter().map(|s| s.to_string()).collect(),
            ..ScriptMatch::default()
        }
    }

    fn env<'a>(gateway: &'a Gateway, ledger: &'a UsageLedger, templates: &'a TemplateSet) -> AgentEnv<'a> {
        AgentEnv {
            gateway,
            ledger,
            templates,
            user_id: "u1",
            max_repair_retries: 2,
            format: MessageFormat::Structured,
        }
    }

    #[test]
    fn bundled_templates_pass_lint() {
        let set = TemplateSet::builtin();
        for role in TemplateRole::ALL {
            assert!(!set.get(role).text().contains(FORBIDDEN_MARKER), "{role}");
        }
        assert_eq!(set.hash().len(), 64);
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        assert_eq!(TemplateSet::load_dir(&dir).unwrap(), set);
    }

    #[test]
    fn template_checks() {
        let err = PromptTemplate::new(TemplateRole::Strategist, "State: {progress}").unwrap_err();
        assert!(matches!(err, TemplateError::PlaceholderMismatch { .. }));
        let err = PromptTemplate::new(TemplateRole::Summarizer, "Example: {inferred_attributes}").unwrap_err();
        assert!(matches!(err, TemplateError::ContainsExample { .. }));
        let t = PromptTemplate::new(TemplateRole::Fti, "{instructions} / {batch_text} {\"a\": 1}").unwrap();
        assert_eq!(t.render(&[("instructions", "{batch_text}"), ("batch_text", "x")]), "{batch_text} / x {\"a\": 1}");
    }

    #[test]
    fn edited_template_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        for role in TemplateRole::ALL {
            std::fs::write(dir.path().join(format!("{role}.txt")), role.builtin()).unwrap();
        }
        let same = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(same.hash(), TemplateSet::builtin().hash());
        let edited = format!("{}\nBe brief.", TemplateRole::Summarizer.builtin());
        std::fs::write(dir.path().join("summarizer.txt"), edited).unwrap();
        assert_ne!(TemplateSet::load_dir(dir.path()).unwrap().hash(), same.hash());
    }

    #[test]
    fn strategist_follows_progress() {
        let gw = gateway(vec![
            ScriptEntry::respond(containing("strategist", &["pending_batch: present"]), r#"{"action":"infer","rationale":"batch waiting","instructions":"look for location"}"#),
            ScriptEntry::respond(containing("strategist", &["source: open"]), r#"{"action":"retrieve","rationale":"no data yet","instructions":""}"#),
            ScriptEntry::respond(on("strategist"), r#"{"action":"finish","rationale":"done","instructions":""}"#),
        ]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let e = env(&gw, &ledger, &templates);
        let decide = |summary: &str| strategist_decide(&e, 1, summary).unwrap().value.action;
        assert_eq!(decide("pending_batch: none\nsource: open"), Action::Retrieve);
        assert_eq!(decide("pending_batch: present\nsource: open"), Action::Infer);
        assert_eq!(decide("pending_batch: none\nsource: exhausted"), Action::Finish);
    }

    #[test]
    fn strategist_exhaustion_is_reported() {
        let gw = gateway(vec![ScriptEntry::respond(on("strategist"), "I think we should keep going")]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let err = strategist_decide(&env(&gw, &ledger, &templates), 1, "x").unwrap_err();
        assert_eq!(err.attempts().len(), 3);
        assert_eq!(ledger.calls(), 3);
    }

    #[test]
    fn extractor_reads_scripted_attribute() {
        let reply = r#"{"attributes":[{"type":"Height","value":["tall"],"confidence":3,"evidence":[{"seq":7,"quote":"barely fits me"}]}]}"#;
        let gw = gateway(vec![
            ScriptEntry::respond(containing("extractor", &["Miata"]), reply),
            ScriptEntry::respond(on("extractor"), r#"{"attributes":[]}"#),
        ]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let e = env(&gw, &ledger, &templates);
        let batch = vec![activity(6, "what a week"), activity(7, "my Miata barely fits me")];
        let out = extract_attributes(&e, 1, &batch, "", ExtractContext::None).unwrap();
        assert_eq!(out.value, vec![attr_quote("Height", "tall", 3, 7, "barely fits me")]);
        let plain = vec![activity(8, "the weather was nice")];
        assert!(extract_attributes(&e, 2, &plain, "", ExtractContext::None).unwrap().value.is_empty());
    }

    fn attr_quote(t: &str, v: &str, c: i64, seq: u32, quote: &str) -> InferredAttribute {
        InferredAttribute::single(t, v, conf(c), vec![Evidence::new(seq, quote)]).unwrap()
    }

    #[test]
    fn extractor_drops_unseen_evidence() {
        let reply = r#"{"attributes":[{"type":"City","value":"Leeds","confidence":4,"evidence":[{"seq":2,"quote":"in Leeds"},{"seq":40,"quote":"made up"},{"seq":9,"quote":"earlier"}]}]}"#;
        let gw = gateway(vec![ScriptEntry::respond(on("extractor"), reply)]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let e = env(&gw, &ledger, &templates);
        let mut profile = Profile::new("u1");
        profile.attributes.push(attr("Age", &["30"], 3, &[9]));
        let out = extract_attributes(&e, 1, &[activity(2, "back in Leeds")], "", ExtractContext::Profile(&profile)).unwrap();
        let seqs: Vec<u32> = out.value[0].evidence().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![2, 9]);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn extractor_exhaustion_gives_empty_list() {
        let gw = gateway(vec![ScriptEntry::respond(on("extractor"), "no idea")]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let out = extract_attributes(&env(&gw, &ledger, &templates), 1, &[activity(1, "hi there")], "", ExtractContext::None).unwrap();
        assert!(out.value.is_empty());
        assert!(out.fallback);
        assert_eq!(out.attempts.len(), 3);
    }

    #[test]
    fn summarizer_echo_merges_duplicates() {
        let gw = gateway(vec![ScriptEntry::echo(on("summarizer"))]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let e = env(&gw, &ledger, &templates);
        let mut current = Profile::new("u1");
        current.attributes.push(attr("Age", &["30-35"], 4, &[1]));
        let out = summarize_refine(&e, 1, &current, vec![attr("age", &["30-35"], 3, &[5])], true).unwrap();
        assert_eq!(out.value.attributes, vec![attr("Age", &["30-35"], 4, &[1, 5])]);
        assert_eq!(ledger.calls(), 1);

        let same = summarize_refine(&e, 2, &current, Vec::new(), true).unwrap();
        assert_eq!(same.value, current);
        assert_eq!(ledger.calls(), 1);
    }

    #[test]
    fn summarizer_exhaustion_falls_back_to_mechanical_merge() {
        let gw = gateway(vec![ScriptEntry::respond(on("summarizer"), "sorry")]);
        let ledger = UsageLedger::new();
        let templates = TemplateSet::builtin();
        let current = Profile::new("u1");
        let incoming = vec![attr("Location", &["seattle"], 4, &[1]), attr("Location", &["portland"], 4, &[2, 3])];
        let out = summarize_refine(&env(&gw, &ledger, &templates), 1, &current, incoming.clone(), true).unwrap();
        assert!(out.fallback);
        assert_eq!(out.value, mechanical_merge("u1", incoming));
    }

    #[test]
    fn mechanical_merge_tie_breaks() {
        // Equal confidence: more evidence wins.
        let p = mechanical_merge("u", vec![attr("Location", &["seattle"], 4, &[1]), attr("Location", &["portland"], 4, &[2, 3])]);
        assert_eq!(p.attributes, vec![attr("Location", &["portland", "seattle"], 4, &[1, 2, 3])]);
        // Equal confidence and evidence count: more recent wins.
        let p = mechanical_merge("u", vec![attr("Location", &["seattle"], 4, &[9]), attr("Location", &["portland"], 4, &[2])]);
        assert_eq!(p.attributes[0].values(), ["seattle", "portland"]);
        // Higher confidence beats everything.
        let p = mechanical_merge("u", vec![attr("Location", &["seattle"], 3, &[9, 10]), attr("Location", &["portland"], 4, &[2])]);
        assert_eq!(p.attributes[0].values(), ["portland", "seattle"]);
        // Same value under different spelling is one candidate.
        let p = mechanical_merge("u", vec![attr("Age", &["30-35"], 4, &[1]), attr("age", &["30-35."], 3, &[2])]);
        assert_eq!(p.attributes, vec![attr("Age", &["30-35"], 4, &[1, 2])]);
    }

    fn arb_attr() -> impl Strategy<Value = InferredAttribute> {
        let types = prop::sample::select(vec!["Age", "age", "Location", "City", "Job "]);
        let values = prop::collection::vec(prop::sample::select(vec!["a", "A", "b", "c.", "c", "d", "e"]), 1..=3);
        (types, values, 1i64..=5, prop::collection::vec(1u32..20, 0..3)).prop_map(|(t, v, c, seqs)| {
            InferredAttribute::new(t, v.into_iter().map(String::from).collect(), conf(c), seqs.into_iter().map(|s| Evidence::new(s, "q")).collect())
                .unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn merges_are_idempotent_and_deduplicated(attrs in prop::collection::vec(arb_attr(), 0..12)) {
            let once = dedup(attrs.clone());
            prop_assert_eq!(dedup(once.clone()), once.clone());
            let profile = Profile { user_id: "u".into(), attributes: once };
            prop_assert!(profile.is_deduplicated());

            let merged = mechanical_merge("u", attrs.clone());
            prop_assert_eq!(mechanical_merge("u", merged.attributes.clone()), merged.clone());
            prop_assert!(merged.is_deduplicated());
            let in_conf = attrs.iter().map(|a| a.confidence()).max();
            prop_assert_eq!(merged.attributes.iter().map(|a| a.confidence()).max(), in_conf);
        }
    }

    #[test]
    fn retrieval_never_repeats() {
        let acts: Vec<Activity> = (1..=23).map(|i| activity(i, "text")).collect();
        let mut src = crate::ingestion::MemorySource::new("u", acts);
        let mut cursor = Cursor::start();
        let mut seen = BTreeSet::new();
        loop {
            let page = retrieve_batch(&mut src, &cursor, 10).unwrap();
            assert!(page.activities.len() <= 10);
            for a in &page.activities {
                assert!(seen.insert(a.seq));
            }
            cursor = page.next;
            if page.exhausted {
                break;
            }
        }
        assert_eq!(seen.len(), 23);
    }
}
