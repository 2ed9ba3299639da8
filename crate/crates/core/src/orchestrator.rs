//! The iterative profiling loop: Strategist decides, the other roles act,
//! the profile is the only memory carried between iterations.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    extract_attributes, mechanical_merge, render_attribute_list, render_batch, retrieve_batch, strategist_decide,
    summarize_refine, AgentEnv, AgentOutput, ExtractContext, MessageFormat, TemplateSet,
};
use crate::gateway::{Gateway, GatewayError, UsageLedger, UsageRecord};
use crate::ingestion::{ActivitySource, Cursor, IngestError, Page};
use crate::model::{Action, Activity, InferredAttribute, Profile, StrategistDecision};
use crate::protocol::{to_canonical_json, Attempt, MessageEnvelope, Payload, RepairError, Sender};

/// Used when the source cannot report its size up front.
pub const DEFAULT_MAX_ITERATIONS: usize = 400;

/// Which optional roles take part. The Extractor always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub strategist: bool,
    pub retriever: bool,
    pub summarizer: bool,
}

impl AblationConfig {
    pub const ALL_ON: AblationConfig = AblationConfig {
        strategist: true,
        retriever: true,
        summarizer: true,
    };

    pub const EXTRACTOR_ONLY: AblationConfig = AblationConfig {
        strategist: false,
        retriever: false,
        summarizer: false,
    };

    /// The five component combinations: `e`, `es`, `esr`, `esu`, `all`.
    pub fn from_code(code: &str) -> Option<Self> {
        let (strategist, retriever, summarizer) = match code {
            "e" => (false, false, false),
            "es" => (true, false, false),
            "esr" => (true, true, false),
            "esu" => (true, false, true),
            "all" => (true, true, true),
            _ => return None,
        };
        Some(Self {
            strategist,
            retriever,
            summarizer,
        })
    }

    pub fn code(&self) -> String {
        if *self == Self::ALL_ON {
            return "all".into();
        }
        let mut code = String::from("e");
        for (on, c) in [(self.strategist, 's'), (self.retriever, 'r'), (self.summarizer, 'u')] {
            if on {
                code.push(c);
            }
        }
        code
    }

    pub fn is_extractor_only(&self) -> bool {
        *self == Self::EXTRACTOR_ONLY
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::ALL_ON
    }
}

/// What agents remember between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MemoryMode {
    /// The structured profile is the only history.
    #[default]
    Structured,
    /// Raw activities seen so far, oldest dropped beyond `window_chars`.
    RawHistory { window_chars: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub batch_size: usize,
    pub max_repair_retries: u32,
    pub extractor_sees_profile: bool,
    pub memory: MemoryMode,
    pub format: MessageFormat,
    /// Character budget for one chunk when the Retriever is off.
    pub context_window_chars: usize,
    pub max_iterations: Option<usize>,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            max_repair_retries: 2,
            extractor_sees_profile: true,
            memory: MemoryMode::Structured,
            format: MessageFormat::Structured,
            context_window_chars: 24_000,
            max_iterations: None,
            ablation: AblationConfig::ALL_ON,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Source(#[from] IngestError),
    #[error("no saved run state at {0}")]
    StateMissing(PathBuf),
    #[error("templates changed since the run started (saved {saved}, current {current})")]
    TemplateMismatch { saved: String, current: String },
    #[error("saved run belongs to user {saved:?}, source is {current:?}")]
    UserMismatch { saved: String, current: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Persist { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOrigin {
    Strategist,
    Schedule,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Finish,
    IterationCap,
}

/// One transcript line. Serialized as canonical JSON with no wall-clock
/// data, so identical runs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Header {
        run_id: String,
        user_id: String,
        template_hash: String,
        ablation: String,
        config: PipelineConfig,
        max_iterations: usize,
    },
    Action {
        iteration: usize,
        action: Action,
        origin: ActionOrigin,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        requested: Option<Action>,
    },
    Llm {
        agent: String,
        step: u32,
        attempt: usize,
        raw: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Message {
        iteration: usize,
        envelope: MessageEnvelope,
    },
    Warning {
        iteration: usize,
        message: String,
    },
    Fallback {
        iteration: usize,
        agent: String,
        reason: String,
    },
    Finish {
        iteration: usize,
        reason: FinishReason,
        attributes: usize,
    },
}

/// The ordered record of a run, one canonical JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunTranscript {
    pub lines: Vec<String>,
}

impl RunTranscript {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn events(&self) -> impl Iterator<Item = TranscriptEvent> + '_ {
        self.lines
            .iter()
            .map(|l| serde_json::from_str(l).expect("transcript lines are events"))
    }
}

/// Everything the loop carries between iterations. Persisted after every
/// dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub user_id: String,
    pub cursor: Cursor,
    pub pending_batch: Option<Vec<Activity>>,
    /// Extractor output waiting for its Refine.
    pub pending_refine: Option<Vec<InferredAttribute>>,
    pub profile: Profile,
    pub iteration: usize,
    pub exhausted: bool,
    pub retrieved: usize,
    pub action_log: Vec<(usize, Action)>,
    pub instructions: String,
    /// Raw-history memory only.
    pub history: Vec<Activity>,
    pub history_dropped: usize,
    pub steps: BTreeMap<String, u32>,
    pub strategist_fallback: bool,
    pub fallback_used: bool,
    pub finished: Option<FinishReason>,
    pub max_summary_bytes: usize,
}

impl WorkflowState {
    fn new(user_id: &str, exhausted: bool) -> Self {
        Self {
            user_id: user_id.to_string(),
            cursor: Cursor::start(),
            pending_batch: None,
            pending_refine: None,
            profile: Profile::new(user_id),
            iteration: 0,
            exhausted,
            retrieved: 0,
            action_log: Vec::new(),
            instructions: String::new(),
            history: Vec::new(),
            history_dropped: 0,
            steps: BTreeMap::new(),
            strategist_fallback: false,
            fallback_used: false,
            finished: None,
            max_summary_bytes: 0,
        }
    }

    fn next_step(&mut self, agent: &str) -> u32 {
        let s = self.steps.entry(agent.to_string()).or_insert(0);
        *s += 1;
        *s
    }

    pub fn actions(&self) -> Vec<Action> {
        self.action_log.iter().map(|(_, a)| *a).collect()
    }
}

/// The Strategist's view of the run. Its size depends on the profile, not
/// on how much text has been read.
pub fn progress_summary(state: &WorkflowState, total: Option<usize>, memory: MemoryMode, format: MessageFormat) -> String {
    let remaining = match total {
        Some(t) => t.saturating_sub(state.retrieved).to_string(),
        None => "unknown".into(),
    };
    let pending = match &state.pending_batch {
        Some(b) => format!("present ({} activities)", b.len()),
        None => "none".into(),
    };
    let last = state
        .action_log
        .last()
        .map(|(_, a)| a.as_str())
        .unwrap_or("none");
    let mut out = format!(
        "iteration: {}\nactivities_retrieved: {}\nactivities_remaining: {remaining}\npending_batch: {pending}\nsource: {}\nattributes_held: {}\nlast_action: {last}\n",
        state.iteration,
        state.retrieved,
        if state.exhausted { "exhausted" } else { "open" },
        state.profile.len(),
    );
    match memory {
        MemoryMode::Structured => {
            out.push_str("inferred_attributes:\n");
            let stripped: Vec<InferredAttribute> = state
                .profile
                .attributes
                .iter()
                .map(|a| InferredAttribute::new(a.attr_type(), a.values().to_vec(), a.confidence(), Vec::new()).expect("valid"))
                .collect();
            out.push_str(&render_attribute_list(&stripped, format));
        }
        MemoryMode::RawHistory { .. } => {
            out.push_str("history:\n");
            out.push_str(&render_batch(&state.history));
        }
    }
    out
}

/// Where batches come from: the source itself, or pre-cut chunks when the
/// Retriever is disabled.
enum Feeder<'s> {
    Source(&'s mut dyn ActivitySource),
    Chunks(Vec<Vec<Activity>>),
}

impl Feeder<'_> {
    fn next(&mut self, cursor: &Cursor, batch_size: usize) -> Result<Page, IngestError> {
        match self {
            Feeder::Source(src) => retrieve_batch(&mut **src, cursor, batch_size),
            Feeder::Chunks(chunks) => {
                let i = if cursor.0.is_empty() {
                    0
                } else {
                    cursor
                        .0
                        .parse::<usize>()
                        .ok()
                        .filter(|i| *i <= chunks.len())
                        .ok_or_else(|| IngestError::InvalidCursor(cursor.0.clone()))?
                };
                Ok(Page {
                    activities: chunks.get(i).cloned().unwrap_or_default(),
                    next: Cursor((i + 1).min(chunks.len()).to_string()),
                    exhausted: i + 1 >= chunks.len(),
                })
            }
        }
    }

    /// Number of batches a full pass needs, if known.
    fn units(&self, batch_size: usize) -> Option<usize> {
        match self {
            Feeder::Source(src) => src.total().map(|t| t.div_ceil(batch_size)),
            Feeder::Chunks(chunks) => Some(chunks.len()),
        }
    }

    fn total(&self) -> Option<usize> {
        match self {
            Feeder::Source(src) => src.total(),
            Feeder::Chunks(chunks) => Some(chunks.iter().map(Vec::len).sum()),
        }
    }
}

fn rendered_len(a: &Activity) -> usize {
    a.render().len() + 1
}

fn read_everything(source: &mut dyn ActivitySource) -> Result<Vec<Activity>, IngestError> {
    let mut all = Vec::new();
    let mut cursor = Cursor::start();
    loop {
        let page = source.next_page(&cursor, 100)?;
        all.extend(page.activities);
        if page.exhausted {
            return Ok(all);
        }
        cursor = page.next;
    }
}

/// Packs whole activities into chunks of at most `budget` rendered
/// characters. An activity longer than the budget gets a chunk of its own.
pub fn chunk_by_chars(activities: Vec<Activity>, budget: usize) -> Vec<Vec<Activity>> {
    let mut chunks: Vec<Vec<Activity>> = Vec::new();
    let mut size = 0;
    for a in activities {
        let len = rendered_len(&a);
        match chunks.last_mut() {
            Some(last) if size + len <= budget => last.push(a),
            _ => chunks.push(vec![a]),
        }
        size = if chunks.last().map_or(0, Vec::len) == 1 { len } else { size + len };
    }
    chunks
}

/// Keeps the longest prefix fitting in `budget` characters (at least one
/// activity). Returns the prefix and how many activities were cut.
fn truncate_to_budget(mut activities: Vec<Activity>, budget: usize) -> (Vec<Activity>, usize) {
    let mut size = 0;
    let keep = activities
        .iter()
        .position(|a| {
            size += rendered_len(a);
            size > budget
        })
        .unwrap_or(activities.len())
        .max(1)
        .min(activities.len());
    let dropped = activities.len() - keep;
    activities.truncate(keep);
    (activities, dropped)
}

/// Files of one run: `state.json`, `transcript.jsonl`, `profile.json`,
/// `usage.json`.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
    run_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedRun {
    run_id: String,
    template_hash: String,
    config: PipelineConfig,
    max_iterations: usize,
    transcript_bytes: u64,
    usage: BTreeMap<String, UsageRecord>,
    state: WorkflowState,
}

/// `usage.json`: totals overall and per agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub total: UsageRecord,
    pub by_agent: BTreeMap<String, UsageRecord>,
}

impl RunStore {
    /// `runs_dir/<run_id>`.
    pub fn new(runs_dir: &Path, run_id: impl Into<String>) -> Self {
        let run_id = run_id.into();
        Self {
            dir: runs_dir.join(&run_id),
            run_id,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.dir.join("transcript.jsonl")
    }

    pub fn profile_path(&self) -> PathBuf {
        self.dir.join("profile.json")
    }

    pub fn usage_path(&self) -> PathBuf {
        self.dir.join("usage.json")
    }

    fn err(path: &Path, e: impl std::fmt::Display) -> RunError {
        RunError::Persist {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    /// Write to a temp file, then rename over the target.
    fn write_atomic(&self, path: &Path, contents: &str) -> Result<(), RunError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents).map_err(|e| Self::err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Self::err(path, e))
    }

    fn load(&self) -> Result<SavedRun, RunError> {
        let path = self.state_path();
        let text = fs::read_to_string(&path).map_err(|_| RunError::StateMissing(path.clone()))?;
        serde_json::from_str(&text).map_err(|e| Self::err(&path, e))
    }

    /// The saved profile of a finished run.
    pub fn load_profile(&self) -> Result<Profile, RunError> {
        let path = self.profile_path();
        let text = fs::read_to_string(&path).map_err(|_| RunError::StateMissing(path.clone()))?;
        serde_json::from_str(&text).map_err(|e| Self::err(&path, e))
    }

    pub fn load_transcript(&self) -> Result<RunTranscript, RunError> {
        let path = self.transcript_path();
        let text = fs::read_to_string(&path).map_err(|_| RunError::StateMissing(path.clone()))?;
        Ok(RunTranscript {
            lines: text.lines().map(str::to_string).collect(),
        })
    }

    pub fn load_usage(&self) -> Result<UsageReport, RunError> {
        let path = self.usage_path();
        let text = fs::read_to_string(&path).map_err(|_| RunError::StateMissing(path.clone()))?;
        serde_json::from_str(&text).map_err(|e| Self::err(&path, e))
    }
}

/// Deterministic run id from the input fingerprint, configuration and
/// templates.
pub fn derive_run_id(source_fingerprint: &str, config: &PipelineConfig, template_hash: &str) -> String {
    let mut h = Sha256::new();
    for part in [source_fingerprint, &to_canonical_json(config), template_hash] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Largest progress summary rendered, in bytes.
    pub max_summary_bytes: usize,
    /// Activities dropped from raw history to fit the window.
    pub history_dropped: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: Option<String>,
    pub profile: Profile,
    pub transcript: RunTranscript,
    pub usage: UsageReport,
    pub actions: Vec<Action>,
    /// Some agent never produced a usable reply and a fallback stood in.
    pub fallback_used: bool,
    pub finish_reason: FinishReason,
    pub stats: RunStats,
}

struct Run<'a, 's> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    config: PipelineConfig,
    ledger: UsageLedger,
    base_usage: BTreeMap<String, UsageRecord>,
    feeder: Feeder<'s>,
    max_iterations: usize,
    state: WorkflowState,
    transcript: RunTranscript,
    store: Option<(RunStore, File)>,
    transcript_bytes: u64,
}

fn ablation_feeder<'s>(
    source: &'s mut dyn ActivitySource,
    config: &PipelineConfig,
) -> Result<(Feeder<'s>, Vec<String>), IngestError> {
    let ab = config.ablation;
    if ab.retriever && !ab.is_extractor_only() {
        return Ok((Feeder::Source(source), Vec::new()));
    }
    let all = read_everything(source)?;
    if ab.is_extractor_only() {
        if all.is_empty() {
            return Ok((Feeder::Chunks(Vec::new()), Vec::new()));
        }
        let (kept, dropped) = truncate_to_budget(all, config.context_window_chars);
        let warnings = if dropped > 0 {
            vec![format!("input truncated to fit the context window; {dropped} activities left out")]
        } else {
            Vec::new()
        };
        return Ok((Feeder::Chunks(vec![kept]), warnings));
    }
    Ok((Feeder::Chunks(chunk_by_chars(all, config.context_window_chars)), Vec::new()))
}

fn merge_usage(base: &BTreeMap<String, UsageRecord>, ledger: &UsageLedger) -> UsageReport {
    let mut by_agent = base.clone();
    for (agent, rec) in ledger.entries() {
        by_agent.entry(agent).or_default().add(&rec);
    }
    let mut total = UsageRecord::default();
    for rec in by_agent.values() {
        total.add(rec);
    }
    UsageReport { total, by_agent }
}

impl<'a, 's> Run<'a, 's> {
    fn env(&self) -> AgentEnv<'_> {
        AgentEnv {
            gateway: self.gateway,
            ledger: &self.ledger,
            templates: self.templates,
            user_id: &self.state.user_id,
            max_repair_retries: self.config.max_repair_retries,
            format: self.config.format,
        }
    }

    fn emit(&mut self, event: TranscriptEvent) -> Result<(), RunError> {
        let line = to_canonical_json(&event);
        if let Some((store, file)) = &mut self.store {
            writeln!(file, "{line}").map_err(|e| RunStore::err(&store.transcript_path(), e))?;
        }
        self.transcript_bytes += line.len() as u64 + 1;
        self.transcript.lines.push(line);
        Ok(())
    }

    fn emit_attempts(&mut self, agent: &str, step: u32, attempts: &[Attempt]) -> Result<(), RunError> {
        for (i, a) in attempts.iter().enumerate() {
            self.emit(TranscriptEvent::Llm {
                agent: agent.to_string(),
                step,
                attempt: i,
                raw: a.raw.clone(),
                error: a.error.clone(),
            })?;
        }
        Ok(())
    }

    fn emit_message(&mut self, envelope: MessageEnvelope) -> Result<(), RunError> {
        self.emit(TranscriptEvent::Message {
            iteration: self.state.iteration,
            envelope,
        })
    }

    fn warn(&mut self, message: String) -> Result<(), RunError> {
        self.emit(TranscriptEvent::Warning {
            iteration: self.state.iteration,
            message,
        })
    }

    fn checkpoint(&mut self) -> Result<(), RunError> {
        let Some((store, file)) = &mut self.store else {
            return Ok(());
        };
        file.flush().map_err(|e| RunStore::err(&store.transcript_path(), e))?;
        let saved = SavedRun {
            run_id: store.run_id.clone(),
            template_hash: self.templates.hash().to_string(),
            config: self.config.clone(),
            max_iterations: self.max_iterations,
            transcript_bytes: self.transcript_bytes,
            usage: merge_usage(&self.base_usage, &self.ledger).by_agent,
            state: self.state.clone(),
        };
        let store = store.clone();
        store.write_atomic(&store.state_path(), &to_canonical_json(&saved))
    }

    fn fixed_schedule(&self) -> Action {
        if self.state.pending_batch.is_some() {
            Action::Infer
        } else if !self.state.exhausted {
            Action::Retrieve
        } else {
            Action::Finish
        }
    }

    /// Turns a decision that cannot be carried out into the nearest one
    /// that can.
    fn legalize(&self, action: Action) -> Action {
        let pending = self.state.pending_batch.is_some();
        let exhausted = self.state.exhausted;
        if exhausted && !pending {
            return Action::Finish;
        }
        match action {
            Action::Retrieve if exhausted => Action::Infer,
            Action::Infer if !pending => Action::Retrieve,
            other => other,
        }
    }

    fn choose(&mut self) -> Result<(Action, ActionOrigin, Option<Action>), RunError> {
        let summary = progress_summary(&self.state, self.feeder.total(), self.config.memory, self.config.format);
        self.state.max_summary_bytes = self.state.max_summary_bytes.max(summary.len());
        if self.state.pending_refine.is_some() {
            return Ok((Action::Refine, ActionOrigin::Auto, None));
        }
        if !self.config.ablation.strategist || self.state.strategist_fallback {
            return Ok((self.fixed_schedule(), ActionOrigin::Schedule, None));
        }
        let step = self.state.next_step("strategist");
        let result = strategist_decide(&self.env(), step, &summary);
        match result {
            Ok(out) => {
                self.emit_attempts("strategist", step, &out.attempts)?;
                let decision: StrategistDecision = out.value;
                let envelope = match self.config.format {
                    MessageFormat::Structured => MessageEnvelope::decision(decision.clone()),
                    MessageFormat::Plain => {
                        let raw = out.attempts.last().map(|a| a.raw.clone()).unwrap_or_default();
                        MessageEnvelope::new(Sender::Strategist, Payload::Text(raw)).expect("strategist may send text")
                    }
                };
                self.emit_message(envelope)?;
                let action = self.legalize(decision.action);
                self.state.instructions = decision.instructions;
                let requested = (action != decision.action).then_some(decision.action);
                if let Some(req) = requested {
                    self.warn(format!("strategist asked for {req}, which is not possible now; doing {action}"))?;
                }
                Ok((action, ActionOrigin::Strategist, requested))
            }
            Err(RepairError::Exhausted { attempts }) => {
                self.emit_attempts("strategist", step, &attempts)?;
                self.state.strategist_fallback = true;
                self.state.fallback_used = true;
                self.state.instructions.clear();
                self.emit(TranscriptEvent::Fallback {
                    iteration: self.state.iteration,
                    agent: "strategist".into(),
                    reason: format!("no usable reply after {} attempts; switching to the fixed schedule", attempts.len()),
                })?;
                Ok((self.fixed_schedule(), ActionOrigin::Schedule, None))
            }
            Err(RepairError::Backend { error, attempts }) => {
                self.emit_attempts("strategist", step, &attempts)?;
                Err(error.into())
            }
        }
    }

    fn record_agent<T>(&mut self, agent: &str, step: u32, out: &AgentOutput<T>) -> Result<(), RunError> {
        self.emit_attempts(agent, step, &out.attempts)?;
        for w in &out.warnings {
            self.warn(w.clone())?;
        }
        if out.fallback {
            self.state.fallback_used = true;
            self.emit(TranscriptEvent::Fallback {
                iteration: self.state.iteration,
                agent: agent.to_string(),
                reason: format!("no usable reply after {} attempts", out.attempts.len()),
            })?;
        }
        Ok(())
    }

    fn text_envelope(&self, sender: Sender, out_attempts: &[Attempt]) -> Option<MessageEnvelope> {
        if self.config.format != MessageFormat::Plain {
            return None;
        }
        let raw = out_attempts.last()?.raw.clone();
        MessageEnvelope::new(sender, Payload::Text(raw)).ok()
    }

    fn trim_history(&mut self, window: usize) {
        let mut size: usize = self.state.history.iter().map(rendered_len).sum();
        let mut cut = 0;
        while size > window && cut < self.state.history.len() {
            size -= rendered_len(&self.state.history[cut]);
            cut += 1;
        }
        self.state.history.drain(..cut);
        self.state.history_dropped += cut;
    }

    fn dispatch(&mut self, action: Action) -> Result<(), RunError> {
        match action {
            Action::Retrieve => {
                let page = self.feeder.next(&self.state.cursor, self.config.batch_size)?;
                self.state.cursor = page.next;
                self.state.exhausted = page.exhausted;
                self.state.retrieved += page.activities.len();
                self.emit_message(MessageEnvelope::activities(page.activities.clone()))?;
                if !page.activities.is_empty() {
                    self.state.pending_batch.get_or_insert_with(Vec::new).extend(page.activities);
                }
            }
            Action::Infer => {
                let batch = self.state.pending_batch.take().unwrap_or_default();
                let step = self.state.next_step("extractor");
                let history = std::mem::take(&mut self.state.history);
                let context = match self.config.memory {
                    MemoryMode::RawHistory { .. } => ExtractContext::History(&history),
                    MemoryMode::Structured if self.config.extractor_sees_profile => ExtractContext::Profile(&self.state.profile),
                    MemoryMode::Structured => ExtractContext::None,
                };
                let result = extract_attributes(&self.env(), step, &batch, &self.state.instructions, context);
                self.state.history = history;
                let out = result?;
                self.record_agent("extractor", step, &out)?;
                let envelope = self
                    .text_envelope(Sender::Extractor, &out.attempts)
                    .unwrap_or_else(|| MessageEnvelope::attributes(out.value.clone()));
                self.emit_message(envelope)?;
                self.state.pending_refine = Some(out.value);
                if let MemoryMode::RawHistory { window_chars } = self.config.memory {
                    self.state.history.extend(batch);
                    self.trim_history(window_chars);
                }
            }
            Action::Refine => {
                let incoming = self.state.pending_refine.take().unwrap_or_default();
                let use_model = self.config.ablation.summarizer;
                let calls_model = use_model && !incoming.is_empty();
                let step = if calls_model { self.state.next_step("summarizer") } else { 0 };
                let out = summarize_refine(&self.env(), step, &self.state.profile, incoming, use_model)?;
                self.record_agent("summarizer", step, &out)?;
                let envelope = self
                    .text_envelope(Sender::Summarizer, &out.attempts)
                    .unwrap_or_else(|| MessageEnvelope::profile(out.value.clone()));
                self.emit_message(envelope)?;
                self.state.profile = out.value;
            }
            Action::Finish => {}
        }
        Ok(())
    }

    fn finish(&mut self, reason: FinishReason) -> Result<(), RunError> {
        if let Some(left) = self.state.pending_refine.take() {
            if !left.is_empty() {
                let mut all = self.state.profile.attributes.clone();
                all.extend(left);
                self.state.profile = mechanical_merge(&self.state.user_id, all);
                self.warn("iteration cap reached before the last refine; merged mechanically".into())?;
            }
        }
        self.state.finished = Some(reason);
        self.emit(TranscriptEvent::Finish {
            iteration: self.state.iteration,
            reason,
            attributes: self.state.profile.len(),
        })
    }

    fn drive(&mut self) -> Result<(), RunError> {
        while self.state.finished.is_none() {
            if self.state.iteration >= self.max_iterations {
                self.finish(FinishReason::IterationCap)?;
                break;
            }
            let (action, origin, requested) = self.choose()?;
            self.emit(TranscriptEvent::Action {
                iteration: self.state.iteration,
                action,
                origin,
                requested,
            })?;
            self.dispatch(action)?;
            self.state.action_log.push((self.state.iteration, action));
            self.state.iteration += 1;
            if action == Action::Finish {
                self.finish(FinishReason::Finish)?;
            }
            self.checkpoint()?;
        }
        self.checkpoint()
    }

    fn outcome(self) -> Result<RunOutcome, RunError> {
        let usage = merge_usage(&self.base_usage, &self.ledger);
        let run_id = self.store.as_ref().map(|(s, _)| s.run_id.clone());
        if let Some((store, _)) = &self.store {
            store.write_atomic(&store.profile_path(), &to_canonical_json(&self.state.profile))?;
            store.write_atomic(&store.usage_path(), &to_canonical_json(&usage))?;
        }
        Ok(RunOutcome {
            run_id,
            profile: self.state.profile.clone(),
            transcript: self.transcript,
            usage,
            actions: self.state.actions(),
            fallback_used: self.state.fallback_used,
            finish_reason: self.state.finished.unwrap_or(FinishReason::Finish),
            stats: RunStats {
                max_summary_bytes: self.state.max_summary_bytes,
                history_dropped: self.state.history_dropped,
                iterations: self.state.iteration,
            },
        })
    }
}

fn validate(config: &PipelineConfig) -> Result<(), RunError> {
    if config.batch_size == 0 {
        return Err(RunError::Config("batch_size must be at least 1".into()));
    }
    if config.context_window_chars == 0 {
        return Err(RunError::Config("context_window_chars must be at least 1".into()));
    }
    if let MemoryMode::RawHistory { window_chars: 0 } = config.memory {
        return Err(RunError::Config("memory window must be at least 1 character".into()));
    }
    Ok(())
}

/// Runs the whole loop on `source`. With a store, every iteration is
/// checkpointed under its run directory and the run can be resumed.
pub fn run_profile(
    source: &mut dyn ActivitySource,
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &PipelineConfig,
    store: Option<&RunStore>,
) -> Result<RunOutcome, RunError> {
    validate(config)?;
    let user_id = source.user_id().to_string();
    let (feeder, warnings) = ablation_feeder(source, config)?;
    let units = feeder.units(config.batch_size);
    let max_iterations = config
        .max_iterations
        .unwrap_or_else(|| units.map_or(DEFAULT_MAX_ITERATIONS, |u| 4 * u.max(1)));
    let exhausted = feeder.total() == Some(0);
    let store = match store {
        Some(s) => {
            fs::create_dir_all(&s.dir).map_err(|e| RunStore::err(&s.dir, e))?;
            for p in [s.state_path(), s.profile_path(), s.usage_path()] {
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| RunStore::err(&p, e))?;
                }
            }
            let file = File::create(s.transcript_path()).map_err(|e| RunStore::err(&s.transcript_path(), e))?;
            Some((s.clone(), file))
        }
        None => None,
    };
    let mut run = Run {
        gateway,
        templates,
        config: config.clone(),
        ledger: UsageLedger::new(),
        base_usage: BTreeMap::new(),
        feeder,
        max_iterations,
        state: WorkflowState::new(&user_id, exhausted),
        transcript: RunTranscript::default(),
        store,
        transcript_bytes: 0,
    };
    run.emit(TranscriptEvent::Header {
        run_id: run.store.as_ref().map(|(s, _)| s.run_id.clone()).unwrap_or_default(),
        user_id,
        template_hash: templates.hash().to_string(),
        ablation: config.ablation.code(),
        config: config.clone(),
        max_iterations,
    })?;
    for w in warnings {
        run.warn(w)?;
    }
    run.checkpoint()?;
    run.drive()?;
    run.outcome()
}

/// [`run_profile`] with the given components switched on.
pub fn run_ablation(
    source: &mut dyn ActivitySource,
    ablation: AblationConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &PipelineConfig,
    store: Option<&RunStore>,
) -> Result<RunOutcome, RunError> {
    let config = PipelineConfig {
        ablation,
        ..config.clone()
    };
    run_profile(source, gateway, templates, &config, store)
}

/// Continues a checkpointed run. The source must be the one the run
/// started on; configuration comes from the saved state.
pub fn resume(
    store: &RunStore,
    source: &mut dyn ActivitySource,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<RunOutcome, RunError> {
    let saved = store.load()?;
    if saved.template_hash != templates.hash() {
        return Err(RunError::TemplateMismatch {
            saved: saved.template_hash,
            current: templates.hash().to_string(),
        });
    }
    if saved.state.user_id != source.user_id() {
        return Err(RunError::UserMismatch {
            saved: saved.state.user_id,
            current: source.user_id().to_string(),
        });
    }
    let path = store.transcript_path();
    let file = OpenOptions::new()
        .write(true)
        .open(&path)
        .map_err(|_| RunError::StateMissing(path.clone()))?;
    file.set_len(saved.transcript_bytes).map_err(|e| RunStore::err(&path, e))?;
    drop(file);
    let file = OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| RunStore::err(&path, e))?;
    let transcript = store.load_transcript()?;

    let finished = saved.state.finished.is_some();
    let feeder = if finished {
        Feeder::Chunks(Vec::new())
    } else {
        ablation_feeder(source, &saved.config)?.0
    };
    let mut run = Run {
        gateway,
        templates,
        config: saved.config,
        ledger: UsageLedger::new(),
        base_usage: saved.usage,
        feeder,
        max_iterations: saved.max_iterations,
        state: saved.state,
        transcript,
        store: Some((store.clone(), file)),
        transcript_bytes: saved.transcript_bytes,
    };
    if !finished {
        run.drive()?;
    }
    run.outcome()
}
