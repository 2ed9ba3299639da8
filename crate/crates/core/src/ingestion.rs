//! Activity sources, dataset loading and the noise/masking utilities.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Activity, ActivityKind, GroundTruthLabel};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("archive {0} contains no activities")]
    EmptyArchive(PathBuf),
    #[error("invalid cursor {0:?}")]
    InvalidCursor(String),
    #[error("HTTP source: {0}")]
    Http(String),
    #[error("dataset schema mismatch at {path}: {reason}")]
    SchemaMismatch { path: PathBuf, reason: String },
    #[error("noise pool has {available} activities, {needed} needed")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("noise fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("noise pool shares activity {0} with the target archive")]
    PoolNotDisjoint(String),
    #[error("span {start}..{end} is out of bounds for text of {len} bytes")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("spans {first:?} and {second:?} overlap")]
    OverlappingSpans {
        first: (usize, usize),
        second: (usize, usize),
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Opaque resume position within a source. The empty cursor is the start.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cursor(pub String);

impl Cursor {
    pub fn start() -> Self {
        Self::default()
    }
}

/// One page of activities in `seq` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub activities: Vec<Activity>,
    pub next: Cursor,
    /// No activities remain after this page.
    pub exhausted: bool,
}

/// A paginated reader over one user's activities.
pub trait ActivitySource: Send {
    fn user_id(&self) -> &str;

    fn next_page(&mut self, cursor: &Cursor, limit: usize) -> Result<Page, IngestError>;

    /// Total activity count if known without reading everything.
    fn total(&self) -> Option<usize>;
}

/// One line of an archive file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveRecord {
    pub id: String,
    pub timestamp: DateTime<Utc>,
    pub kind: ActivityKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub venue: Option<String>,
}

impl ArchiveRecord {
    pub fn into_activity(self, seq: u32) -> Result<Activity, crate::model::ModelError> {
        let mut a = Activity::new(self.id, seq, self.timestamp, self.kind, self.text)?;
        a.thread_context = self.thread_context;
        a.venue = self.venue;
        Ok(a)
    }

    pub fn from_activity(a: &Activity) -> Self {
        Self {
            id: a.id.clone(),
            timestamp: a.timestamp,
            kind: a.kind,
            text: a.text.clone(),
            thread_context: a.thread_context.clone(),
            venue: a.venue.clone(),
        }
    }
}

/// Optional first line of an archive: `{"meta": {...}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    /// The archive owner agreed to this audit.
    #[serde(default)]
    pub consent: bool,
    /// Synthetic test data.
    #[serde(default)]
    pub fixture: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: ArchiveMeta,
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    offset: u64,
    len: usize,
}

/// A JSON-Lines archive read lazily: opening indexes record offsets in
/// chronological order, pages read only the records they return.
pub struct ArchiveSource {
    path: PathBuf,
    reader: BufReader<File>,
    index: Vec<IndexEntry>,
    meta: ArchiveMeta,
    user_id: String,
    peak_resident: usize,
}

impl std::fmt::Debug for ArchiveSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ArchiveSource")
            .field("path", &self.path)
            .field("records", &self.index.len())
            .field("user_id", &self.user_id)
            .finish()
    }
}

/// Opens an archive, numbering activities 1..N by timestamp (file order
/// breaks ties).
pub fn open_archive(path: &Path) -> Result<ArchiveSource, IngestError> {
    ArchiveSource::open(path)
}

impl ArchiveSource {
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = BufReader::new(file);
        let mut meta = ArchiveMeta::default();
        let mut keyed: Vec<(DateTime<Utc>, usize, IndexEntry)> = Vec::new();
        let mut ids = HashSet::new();
        let mut offset = 0u64;
        let mut line_no = 0usize;
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(io_err(path))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let entry = IndexEntry { offset, len: n };
            offset += n as u64;
            let line = buf.trim();
            if line.is_empty() {
                continue;
            }
            if keyed.is_empty() && line.starts_with("{\"meta\"") {
                let parsed: MetaLine = serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
                meta = parsed.meta;
                continue;
            }
            let record = parse_record(line, line_no)?;
            if !ids.insert(record.id.clone()) {
                return Err(IngestError::MalformedRecord {
                    line: line_no,
                    reason: format!("duplicate id {:?}", record.id),
                });
            }
            keyed.push((record.timestamp, keyed.len(), entry));
        }
        if keyed.is_empty() {
            return Err(IngestError::EmptyArchive(path.to_path_buf()));
        }
        keyed.sort_by_key(|(ts, order, _)| (*ts, *order));
        let user_id = meta.user_id.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "user".into())
        });
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            index: keyed.into_iter().map(|(_, _, e)| e).collect(),
            meta,
            user_id,
            peak_resident: 0,
        })
    }

    pub fn meta(&self) -> &ArchiveMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Largest number of activities materialized by a single page so far.
    pub fn peak_resident(&self) -> usize {
        self.peak_resident
    }

    fn read_at(&mut self, pos: usize) -> Result<Activity, IngestError> {
        let entry = self.index[pos];
        self.reader.seek(SeekFrom::Start(entry.offset)).map_err(io_err(&self.path))?;
        let mut bytes = vec![0u8; entry.len];
        self.reader.read_exact(&mut bytes).map_err(io_err(&self.path))?;
        let line = String::from_utf8_lossy(&bytes);
        let record = parse_record(line.trim(), 0)?;
        record
            .into_activity(pos as u32 + 1)
            .map_err(|e| IngestError::MalformedRecord {
                line: 0,
                reason: e.to_string(),
            })
    }

    /// Reads the whole archive. Only for small inputs and tooling.
    pub fn read_all(&mut self) -> Result<Vec<Activity>, IngestError> {
        (0..self.index.len()).map(|i| self.read_at(i)).collect()
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<ArchiveRecord, IngestError> {
    let record: ArchiveRecord = serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    if record.text.trim().is_empty() {
        return Err(IngestError::MalformedRecord {
            line: line_no,
            reason: format!("activity {:?} has empty text", record.id),
        });
    }
    Ok(record)
}

fn position(cursor: &Cursor, len: usize) -> Result<usize, IngestError> {
    if cursor.0.is_empty() {
        return Ok(0);
    }
    match cursor.0.parse::<usize>() {
        Ok(p) if p <= len => Ok(p),
        _ => Err(IngestError::InvalidCursor(cursor.0.clone())),
    }
}

impl ActivitySource for ArchiveSource {
    fn user_id(&self) -> &str {
        &self.user_id
    }

    fn next_page(&mut self, cursor: &Cursor, limit: usize) -> Result<Page, IngestError> {
        let start = position(cursor, self.index.len())?;
        let end = (start + limit).min(self.index.len());
        let activities = (start..end).map(|i| self.read_at(i)).collect::<Result<Vec<_>, _>>()?;
        self.peak_resident = self.peak_resident.max(activities.len());
        Ok(Page {
            activities,
            next: Cursor(end.to_string()),
            exhausted: end == self.index.len(),
        })
    }

    fn total(&self) -> Option<usize> {
        Some(self.index.len())
    }
}

/// An in-memory source. Activities are served in `seq` order.
#[derive(Debug, Clone)]
pub struct MemorySource {
    user_id: String,
    activities: Vec<Activity>,
}

impl MemorySource {
    pub fn new(user_id: impl Into<String>, mut activities: Vec<Activity>) -> Self {
        activities.sort_by_key(|a| a.seq);
        Self {
            user_id: user_id.into(),
            activities,
        }
    }

    pub fn activities(&self) -> &[Activity] {
        &self.activities
    }
}

impl ActivitySource for MemorySource {
    fn user_id(&self) -> &str {
        &self.user_id
    }

    fn next_page(&mut self, cursor: &Cursor, limit: usize) -> Result<Page, IngestError> {
        let start = position(cursor, self.activities.len())?;
        let end = (start + limit).min(self.activities.len());
        Ok(Page {
            activities: self.activities[start..end].to_vec(),
            next: Cursor(end.to_string()),
            exhausted: end == self.activities.len(),
        })
    }

    fn total(&self) -> Option<usize> {
        Some(self.activities.len())
    }
}

/// Page shape served by an auditor-controlled export endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpPage {
    pub activities: Vec<Activity>,
    #[serde(default)]
    pub next_cursor: Option<String>,
    pub exhausted: bool,
    #[serde(default)]
    pub total: Option<usize>,
}

/// Reads pages from `GET {base_url}?user=..&cursor=..&limit=..` with a
/// bearer token taken from an environment variable.
pub struct HttpPageSource {
    base_url: String,
    user_id: String,
    token_env: String,
    agent: ureq::Agent,
    total: Option<usize>,
}

impl HttpPageSource {
    pub fn new(base_url: impl Into<String>, user_id: impl Into<String>, token_env: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            user_id: user_id.into(),
            token_env: token_env.into(),
            agent: ureq::Agent::config_builder()
                .http_status_as_error(false)
                .build()
                .into(),
            total: None,
        }
    }
}

impl ActivitySource for HttpPageSource {
    fn user_id(&self) -> &str {
        &self.user_id
    }

    fn next_page(&mut self, cursor: &Cursor, limit: usize) -> Result<Page, IngestError> {
        let token = std::env::var(&self.token_env)
            .map_err(|_| IngestError::Http(format!("environment variable {} is not set", self.token_env)))?;
        let mut response = self
            .agent
            .get(&self.base_url)
            .query("user", &self.user_id)
            .query("cursor", &cursor.0)
            .query("limit", limit.to_string())
            .header("authorization", format!("Bearer {token}"))
            .call()
            .map_err(|e| IngestError::Http(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| IngestError::Http(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(IngestError::Http(format!("HTTP {status}: {body}")));
        }
        let page: HttpPage = serde_json::from_str(&body).map_err(|e| IngestError::Http(format!("bad page: {e}")))?;
        if page.activities.len() > limit {
            return Err(IngestError::Http(format!(
                "server returned {} activities for limit {limit}",
                page.activities.len()
            )));
        }
        if page.activities.iter().any(|a| a.seq == 0 || a.text.trim().is_empty()) {
            return Err(IngestError::Http("page holds an activity with zero seq or empty text".into()));
        }
        if page.activities.windows(2).any(|w| w[0].seq >= w[1].seq) {
            return Err(IngestError::Http("page is not in seq order".into()));
        }
        if page.total.is_some() {
            self.total = page.total;
        }
        let next = match page.next_cursor {
            Some(c) => Cursor(c),
            None if page.exhausted => cursor.clone(),
            None => return Err(IngestError::Http("page without next_cursor before exhaustion".into())),
        };
        Ok(Page {
            activities: page.activities,
            next,
            exhausted: page.exhausted,
        })
    }

    fn total(&self) -> Option<usize> {
        self.total
    }
}

/// Labeled synthetic benchmark: per-user comment archives plus labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledDataset {
    pub users: BTreeMap<String, Vec<Activity>>,
    pub labels: Vec<GroundTruthLabel>,
}

impl LabeledDataset {
    pub fn comment_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    /// Every other user's activities, as a noise pool for `user`.
    pub fn pool_excluding(&self, user: &str) -> Vec<Activity> {
        self.users
            .iter()
            .filter(|(u, _)| u.as_str() != user)
            .flat_map(|(_, acts)| acts.iter().cloned())
            .collect()
    }
}

/// One line of `comments.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommentRecord {
    pub author: String,
    #[serde(flatten)]
    pub record: ArchiveRecord,
}

pub const COMMENTS_FILE: &str = "comments.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

/// Loads a labeled dataset directory holding `comments.jsonl` and
/// `labels.jsonl`.
pub fn load_synthpai(dir: &Path) -> Result<LabeledDataset, IngestError> {
    let comments_path = dir.join(COMMENTS_FILE);
    let labels_path = dir.join(LABELS_FILE);
    let read = |path: &Path| -> Result<String, IngestError> {
        std::fs::read_to_string(path).map_err(|e| IngestError::SchemaMismatch {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    };
    let comments_text = read(&comments_path)?;
    let labels_text = read(&labels_path)?;

    let mut by_user: BTreeMap<String, Vec<ArchiveRecord>> = BTreeMap::new();
    let mut ids = HashSet::new();
    for (i, line) in comments_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mismatch = |reason: String| IngestError::SchemaMismatch {
            path: comments_path.clone(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let c: CommentRecord = serde_json::from_str(line).map_err(|e| mismatch(e.to_string()))?;
        if c.record.text.trim().is_empty() {
            return Err(mismatch("empty text".into()));
        }
        if !ids.insert(c.record.id.clone()) {
            return Err(mismatch(format!("duplicate id {:?}", c.record.id)));
        }
        by_user.entry(c.author).or_default().push(c.record);
    }

    let mut users = BTreeMap::new();
    for (user, mut records) in by_user {
        // Stable sort keeps file order for equal timestamps.
        records.sort_by_key(|r| r.timestamp);
        let acts = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.into_activity(i as u32 + 1))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IngestError::SchemaMismatch {
                path: comments_path.clone(),
                reason: e.to_string(),
            })?;
        users.insert(user, acts);
    }

    let mut labels = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in labels_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mismatch = |reason: String| IngestError::SchemaMismatch {
            path: labels_path.clone(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let label: GroundTruthLabel = serde_json::from_str(line).map_err(|e| mismatch(e.to_string()))?;
        if !users.contains_key(&label.user_id) {
            return Err(mismatch(format!("label for unknown user {:?}", label.user_id)));
        }
        if !seen.insert((label.user_id.clone(), label.attr_type)) {
            return Err(mismatch(format!(
                "second label for ({}, {})",
                label.user_id, label.attr_type
            )));
        }
        labels.push(label);
    }
    Ok(LabeledDataset { users, labels })
}

/// A noisy copy of an archive and what was swapped in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyArchive {
    pub activities: Vec<Activity>,
    /// `(seq of replaced slot, id of the pool activity used)`.
    pub replaced: Vec<(u32, String)>,
}

/// Replaces `floor(fraction * N)` activities with randomly drawn pool
/// activities. Replaced slots keep their id, seq and timestamp.
pub fn inject_noise(
    target: &[Activity],
    pool: &[Activity],
    fraction: f64,
    seed: u64,
) -> Result<NoisyArchive, IngestError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(IngestError::InvalidFraction(fraction));
    }
    let n = target.len();
    // The epsilon absorbs binary rounding (0.1 * 30 = 3.0000000000000004).
    let k = ((fraction * n as f64) + 1e-9).floor() as usize;
    let k = k.min(n);
    if k == 0 {
        return Ok(NoisyArchive {
            activities: target.to_vec(),
            replaced: Vec::new(),
        });
    }
    if pool.len() < k {
        return Err(IngestError::PoolTooSmall {
            needed: k,
            available: pool.len(),
        });
    }
    let target_ids: HashSet<&str> = target.iter().map(|a| a.id.as_str()).collect();
    if let Some(shared) = pool.iter().find(|a| target_ids.contains(a.id.as_str())) {
        return Err(IngestError::PoolNotDisjoint(shared.id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = sample(&mut rng, n, k).into_vec();
    positions.sort_unstable();
    let picks = sample(&mut rng, pool.len(), k).into_vec();

    let mut activities = target.to_vec();
    let mut replaced = Vec::with_capacity(k);
    for (&pos, &pick) in positions.iter().zip(&picks) {
        let slot = &mut activities[pos];
        let donor = &pool[pick];
        slot.kind = donor.kind;
        slot.text = donor.text.clone();
        slot.thread_context = donor.thread_context.clone();
        slot.venue = donor.venue.clone();
        replaced.push((slot.seq, donor.id.clone()));
    }
    Ok(NoisyArchive { activities, replaced })
}

/// Half-open byte range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

pub const MASK: &str = "***";

/// Replaces every span with `***`. Text outside spans is unchanged.
pub fn mask_entities(text: &str, spans: &[Span]) -> Result<String, IngestError> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start > s.end || s.end > text.len() || !text.is_char_boundary(s.start) || !text.is_char_boundary(s.end) {
            return Err(IngestError::SpanOutOfBounds {
                start: s.start,
                end: s.end,
                len: text.len(),
            });
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(IngestError::OverlappingSpans {
                first: (w[0].start, w[0].end),
                second: (w[1].start, w[1].end),
            });
        }
    }
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    for s in &sorted {
        out.push_str(&text[pos..s.start]);
        out.push_str(MASK);
        pos = s.end;
    }
    out.push_str(&text[pos..]);
    Ok(out)
}

/// Finds entity mentions to mask.
pub trait EntityDetector: Send + Sync {
    fn detect(&self, text: &str) -> Vec<Span>;
}

/// Regex detector for emails, URLs, phone numbers and capitalized
/// two-word names. Overlaps resolve leftmost-longest.
pub struct BuiltinDetector {
    patterns: Vec<Regex>,
}

impl Default for BuiltinDetector {
    fn default() -> Self {
        let patterns = [
            r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}",
            r"(?:https?://|www\.)[^\s]+",
            r"(?:\+?\d{1,3}[\s.-]?)?(?:\(\d{3}\)|\d{3})[\s.-]?\d{3}[\s.-]?\d{4}\b",
            r"\b[A-Z][a-z]+(?:\s+[A-Z][a-z]+)+\b",
        ];
        Self {
            patterns: patterns.iter().map(|p| Regex::new(p).expect("static regex")).collect(),
        }
    }
}

impl EntityDetector for BuiltinDetector {
    fn detect(&self, text: &str) -> Vec<Span> {
        let mut found: Vec<Span> = self
            .patterns
            .iter()
            .flat_map(|re| re.find_iter(text).map(|m| Span::new(m.start(), m.end())))
            .collect();
        found.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
        let mut out: Vec<Span> = Vec::new();
        for s in found {
            if out.last().is_none_or(|last| s.start >= last.end) {
                out.push(s);
            }
        }
        out
    }
}

/// Masks the text and thread context of every activity.
pub fn mask_activities(activities: &[Activity], detector: &dyn EntityDetector) -> Vec<Activity> {
    activities
        .iter()
        .map(|a| {
            let mut masked = a.clone();
            masked.text = mask_entities(&a.text, &detector.detect(&a.text)).expect("detector spans are valid");
            if let Some(ctx) = &a.thread_context {
                masked.thread_context =
                    Some(mask_entities(ctx, &detector.detect(ctx)).expect("detector spans are valid"));
            }
            masked
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use std::io::Write;

    fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
    }

    fn write_archive(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn record(id: &str, secs: i64, text: &str) -> String {
        serde_json::to_string(&ArchiveRecord {
            id: id.into(),
            timestamp: ts(secs),
            kind: ActivityKind::Comment,
            text: text.into(),
            thread_context: None,
            venue: None,
        })
        .unwrap()
    }

    fn acts(n: usize, prefix: &str) -> Vec<Activity> {
        (0..n)
            .map(|i| {
                Activity::new(format!("{prefix}{i}"), i as u32 + 1, ts(i as i64), ActivityKind::Comment, format!("{prefix} text {i}"))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn seqs_follow_timestamps() {
        let f = write_archive(&[record("c", 30, "third"), record("a", 10, "first"), record("b", 20, "second")]);
        let mut src = open_archive(f.path()).unwrap();
        let page = src.next_page(&Cursor::start(), 10).unwrap();
        let got: Vec<(u32, &str)> = page.activities.iter().map(|a| (a.seq, a.id.as_str())).collect();
        assert_eq!(got, vec![(1, "a"), (2, "b"), (3, "c")]);
        assert!(page.exhausted);
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let f = write_archive(&[record("x", 5, "one"), record("y", 5, "two"), record("w", 1, "zero")]);
        let mut src = open_archive(f.path()).unwrap();
        let ids: Vec<String> = src.read_all().unwrap().into_iter().map(|a| a.id).collect();
        assert_eq!(ids, ["w", "x", "y"]);
    }

    #[test]
    fn duplicate_ids_and_bad_lines_are_rejected() {
        let f = write_archive(&[record("a", 1, "one"), record("a", 2, "two")]);
        assert!(matches!(open_archive(f.path()), Err(IngestError::MalformedRecord { line: 2, .. })));
        let f = write_archive(&[record("a", 1, "one"), "{not json".into()]);
        assert!(matches!(open_archive(f.path()), Err(IngestError::MalformedRecord { line: 2, .. })));
        let f = write_archive(&[record("a", 1, "   ")]);
        assert!(matches!(open_archive(f.path()), Err(IngestError::MalformedRecord { line: 1, .. })));
        let f = write_archive(&[]);
        assert!(matches!(open_archive(f.path()), Err(IngestError::EmptyArchive(_))));
    }

    #[test]
    fn meta_line_sets_user_and_consent() {
        let f = write_archive(&[
            r#"{"meta":{"user_id":"throwaway42","consent":true}}"#.into(),
            record("a", 1, "hello"),
        ]);
        let src = open_archive(f.path()).unwrap();
        assert_eq!(src.user_id(), "throwaway42");
        assert!(src.meta().consent);
        assert!(!src.meta().fixture);
        assert_eq!(src.len(), 1);
    }

    #[test]
    fn pages_of_ten_ten_five() {
        let lines: Vec<String> = (0..25).map(|i| record(&format!("id{i}"), i, &format!("text {i}"))).collect();
        let f = write_archive(&lines);
        let mut src = open_archive(f.path()).unwrap();
        let mut cursor = Cursor::start();
        let mut sizes = Vec::new();
        let mut seen = HashSet::new();
        loop {
            let page = src.next_page(&cursor, 10).unwrap();
            sizes.push((page.activities.len(), page.exhausted));
            for a in &page.activities {
                assert!(seen.insert(a.seq));
            }
            cursor = page.next;
            if page.exhausted {
                break;
            }
        }
        assert_eq!(sizes, vec![(10, false), (10, false), (5, true)]);
        assert_eq!(src.peak_resident(), 10);
        // Repeatable from a persisted cursor.
        let again = src.next_page(&Cursor("10".into()), 10).unwrap();
        assert_eq!(again.activities[0].seq, 11);
        assert!(matches!(src.next_page(&Cursor("99".into()), 10), Err(IngestError::InvalidCursor(_))));
    }

    #[test]
    fn empty_memory_source_is_exhausted_immediately() {
        let mut src = MemorySource::new("u", Vec::new());
        let page = src.next_page(&Cursor::start(), 10).unwrap();
        assert!(page.activities.is_empty());
        assert!(page.exhausted);
    }

    #[test]
    fn noise_replaces_floor_fraction() {
        let target = acts(40, "t");
        let pool = acts(100, "p");
        let noisy = inject_noise(&target, &pool, 0.10, 7).unwrap();
        assert_eq!(noisy.replaced.len(), 4);
        let changed = noisy
            .activities
            .iter()
            .zip(&target)
            .filter(|(a, b)| a.text != b.text)
            .count();
        assert_eq!(changed, 4);
        assert_eq!(inject_noise(&target, &pool, 0.10, 7).unwrap(), noisy);
        assert_ne!(inject_noise(&target, &pool, 0.10, 8).unwrap().replaced, noisy.replaced);
        let same = inject_noise(&target, &pool, 0.0, 7).unwrap();
        assert_eq!(same.activities, target);
        assert_eq!(inject_noise(&acts(30, "t"), &pool, 0.1, 1).unwrap().replaced.len(), 3);
    }

    #[test]
    fn noise_errors() {
        let target = acts(40, "t");
        assert!(matches!(
            inject_noise(&target, &acts(3, "p"), 0.1, 0),
            Err(IngestError::PoolTooSmall { needed: 4, available: 3 })
        ));
        assert!(matches!(inject_noise(&target, &target, 0.1, 0), Err(IngestError::PoolNotDisjoint(_))));
        assert!(matches!(inject_noise(&target, &target, 1.5, 0), Err(IngestError::InvalidFraction(_))));
    }

    proptest! {
        #[test]
        fn noise_preserves_length_and_seqs(n in 0usize..60, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let target = acts(n, "t");
            let pool = acts(80, "p");
            let noisy = inject_noise(&target, &pool, frac, seed).unwrap();
            prop_assert_eq!(noisy.activities.len(), n);
            let seqs: Vec<u32> = noisy.activities.iter().map(|a| a.seq).collect();
            let orig: Vec<u32> = target.iter().map(|a| a.seq).collect();
            prop_assert_eq!(seqs, orig);
            prop_assert_eq!(noisy.replaced.len(), (frac * n as f64 + 1e-9).floor() as usize);
            for (a, b) in noisy.activities.iter().zip(&target) {
                prop_assert_eq!(a.timestamp, b.timestamp);
                prop_assert_eq!(&a.id, &b.id);
            }
        }

        #[test]
        fn mask_length_identity(text in "[a-z ]{0,60}", cuts in proptest::collection::vec(0usize..60, 0..8)) {
            let mut points: Vec<usize> = cuts.into_iter().map(|c| c.min(text.len())).collect();
            points.sort_unstable();
            points.dedup();
            let spans: Vec<Span> = points.chunks_exact(2).map(|c| Span::new(c[0], c[1])).collect();
            let masked = mask_entities(&text, &spans).unwrap();
            let removed: usize = spans.iter().map(|s| s.end - s.start).sum();
            prop_assert_eq!(masked.len(), text.len() - removed + 3 * spans.len());
        }
    }

    #[test]
    fn mask_examples() {
        let text = "invisible string for Dahlia";
        let masked = mask_entities(text, &[Span::new(21, 27), Span::new(0, 16)]).unwrap();
        assert_eq!(masked, "*** for ***");
        assert_eq!(mask_entities(text, &[]).unwrap(), text);
        assert!(matches!(
            mask_entities(text, &[Span::new(0, 10), Span::new(5, 12)]),
            Err(IngestError::OverlappingSpans { .. })
        ));
        assert!(matches!(
            mask_entities(text, &[Span::new(20, 99)]),
            Err(IngestError::SpanOutOfBounds { .. })
        ));
        assert!(matches!(mask_entities("héllo", &[Span::new(0, 2)]), Err(IngestError::SpanOutOfBounds { .. })));
    }

    #[test]
    fn builtin_detector_finds_common_identifiers() {
        let d = BuiltinDetector::default();
        let text = "Mail jane.doe@example.com or call 555-123-4567, ask for Mary Smith at https://example.org/x";
        let masked = mask_entities(text, &d.detect(text)).unwrap();
        assert_eq!(masked, "Mail *** or call ***, ask for *** at ***");
    }

    fn write_dataset(dir: &Path, comments: &[String], labels: &[&str]) {
        std::fs::write(dir.join(COMMENTS_FILE), comments.join("\n")).unwrap();
        std::fs::write(dir.join(LABELS_FILE), labels.join("\n")).unwrap();
    }

    fn comment(author: &str, id: &str, secs: i64) -> String {
        let mut v: serde_json::Value = serde_json::from_str(&record(id, secs, &format!("comment {id}"))).unwrap();
        v["author"] = author.into();
        v.to_string()
    }

    #[test]
    fn labeled_dataset_loading() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &[comment("u1", "a", 2), comment("u1", "b", 1), comment("u2", "c", 3)],
            &[r#"{"user_id":"u1","attr_type":"Sex","true_value":"male","hardness":1,"certainty":5}"#],
        );
        let ds = load_synthpai(dir.path()).unwrap();
        assert_eq!(ds.users.len(), 2);
        assert_eq!(ds.comment_count(), 3);
        assert_eq!(ds.users["u1"][0].id, "b");
        assert_eq!(ds.labels.len(), 1);
        assert_eq!(ds.pool_excluding("u1").len(), 1);
    }

    #[test]
    fn labeled_dataset_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(COMMENTS_FILE), comment("u1", "a", 1)).unwrap();
        match load_synthpai(dir.path()) {
            Err(IngestError::SchemaMismatch { path, .. }) => assert!(path.ends_with(LABELS_FILE)),
            other => panic!("{other:?}"),
        }
        write_dataset(
            dir.path(),
            &[comment("u1", "a", 1)],
            &[r#"{"user_id":"u1","attr_type":"Sex","true_value":"male","hardness":9,"certainty":5}"#],
        );
        assert!(matches!(load_synthpai(dir.path()), Err(IngestError::SchemaMismatch { .. })));
        write_dataset(
            dir.path(),
            &[comment("u1", "a", 1)],
            &[r#"{"user_id":"ghost","attr_type":"Sex","true_value":"male","hardness":1,"certainty":5}"#],
        );
        assert!(matches!(load_synthpai(dir.path()), Err(IngestError::SchemaMismatch { .. })));
    }

    #[test]
    fn http_source_pages() {
        use std::io::{BufRead, BufReader as StdBufReader};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let all = acts(3, "h");
        let pages = vec![
            serde_json::json!({"activities": &all[..2], "next_cursor": "p2", "exhausted": false, "total": 3}),
            serde_json::json!({"activities": &all[2..], "next_cursor": null, "exhausted": true}),
        ];
        let server = std::thread::spawn(move || {
            let mut requests = Vec::new();
            for page in pages {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = StdBufReader::new(stream.try_clone().unwrap());
                let mut first = String::new();
                reader.read_line(&mut first).unwrap();
                let mut auth = String::new();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h.to_ascii_lowercase().starts_with("authorization") {
                        auth = h.trim().to_string();
                    }
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                requests.push((first.trim().to_string(), auth));
                let body = page.to_string();
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    body.len(),
                    body
                )
                .unwrap();
            }
            requests
        });
        std::env::set_var("PSEUDOSCOPE_TEST_EXPORT_TOKEN", "s3cret");
        let mut src = HttpPageSource::new(format!("http://{addr}/export"), "u9", "PSEUDOSCOPE_TEST_EXPORT_TOKEN");
        let p1 = src.next_page(&Cursor::start(), 2).unwrap();
        assert_eq!(p1.activities.len(), 2);
        assert_eq!(p1.next, Cursor("p2".into()));
        assert_eq!(src.total(), Some(3));
        let p2 = src.next_page(&p1.next, 2).unwrap();
        assert!(p2.exhausted);
        assert_eq!(p2.activities[0].seq, 3);
        let requests = server.join().unwrap();
        assert!(requests[0].0.contains("user=u9"));
        assert!(requests[1].0.contains("cursor=p2"));
        assert!(requests[0].1.ends_with("Bearer s3cret"));
    }
}
