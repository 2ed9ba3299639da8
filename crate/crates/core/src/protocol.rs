//! Structured messages exchanged between agents.
//!
//! Envelopes are encoded as canonical JSON (sorted keys, no insignificant
//! whitespace). Model replies are parsed leniently: Markdown fences are
//! stripped and the first balanced top-level JSON object is used. Parse
//! failures carry a distinguishable error so the repair loop can tell the
//! model what went wrong.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, UsageLedger};
use crate::model::{
    Action, Activity, Category, Confidence, Evidence, InferredAttribute, Profile, StrategistDecision,
    MAX_CANDIDATE_VALUES,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("no JSON object found in the reply")]
    NoJsonFound,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("confidence must be an integer from 1 to 5, got {0}")]
    ConfidenceInvalid(String),
    #[error("field {field:?} is invalid: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("sender {sender} cannot carry a {payload} payload")]
    EnvelopeMismatch { sender: String, payload: String },
    #[error("malformed JSON: {0}")]
    Json(String),
}

impl ProtocolError {
    /// Stable error name used in corrective prompts.
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolError::NoJsonFound => "NoJsonFound",
            ProtocolError::UnknownAction(_) => "UnknownAction",
            ProtocolError::MissingField(_) => "MissingField",
            ProtocolError::ConfidenceInvalid(_) => "ConfidenceInvalid",
            ProtocolError::InvalidField { .. } => "InvalidField",
            ProtocolError::EnvelopeMismatch { .. } => "EnvelopeMismatch",
            ProtocolError::Json(_) => "MalformedJson",
        }
    }

    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ProtocolError::InvalidField {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sender {
    Strategist,
    Retriever,
    Extractor,
    Summarizer,
}

impl Sender {
    pub fn as_str(self) -> &'static str {
        match self {
            Sender::Strategist => "strategist",
            Sender::Retriever => "retriever",
            Sender::Extractor => "extractor",
            Sender::Summarizer => "summarizer",
        }
    }
}

impl std::fmt::Display for Sender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    Decision(StrategistDecision),
    Activities(Vec<Activity>),
    Attributes(Vec<InferredAttribute>),
    Profile(Profile),
    /// Unvalidated model text, only produced in plain-text mode.
    Text(String),
}

impl Payload {
    fn kind(&self) -> &'static str {
        match self {
            Payload::Decision(_) => "decision",
            Payload::Activities(_) => "activities",
            Payload::Attributes(_) => "attributes",
            Payload::Profile(_) => "profile",
            Payload::Text(_) => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEnvelope")]
pub struct MessageEnvelope {
    sender: Sender,
    payload: Payload,
}

#[derive(Deserialize)]
struct RawEnvelope {
    sender: Sender,
    payload: Payload,
}

impl TryFrom<RawEnvelope> for MessageEnvelope {
    type Error = ProtocolError;
    fn try_from(raw: RawEnvelope) -> Result<Self, Self::Error> {
        MessageEnvelope::new(raw.sender, raw.payload)
    }
}

impl MessageEnvelope {
    pub fn new(sender: Sender, payload: Payload) -> Result<Self, ProtocolError> {
        let ok = matches!(
            (sender, &payload),
            (Sender::Strategist, Payload::Decision(_))
                | (Sender::Retriever, Payload::Activities(_))
                | (Sender::Extractor, Payload::Attributes(_))
                | (Sender::Summarizer, Payload::Profile(_))
                | (Sender::Strategist | Sender::Extractor | Sender::Summarizer, Payload::Text(_))
        );
        if !ok {
            return Err(ProtocolError::EnvelopeMismatch {
                sender: sender.to_string(),
                payload: payload.kind().to_string(),
            });
        }
        Ok(Self { sender, payload })
    }

    pub fn decision(decision: StrategistDecision) -> Self {
        Self {
            sender: Sender::Strategist,
            payload: Payload::Decision(decision),
        }
    }

    pub fn activities(activities: Vec<Activity>) -> Self {
        Self {
            sender: Sender::Retriever,
            payload: Payload::Activities(activities),
        }
    }

    pub fn attributes(attributes: Vec<InferredAttribute>) -> Self {
        Self {
            sender: Sender::Extractor,
            payload: Payload::Attributes(attributes),
        }
    }

    pub fn profile(profile: Profile) -> Self {
        Self {
            sender: Sender::Summarizer,
            payload: Payload::Profile(profile),
        }
    }

    pub fn sender(&self) -> Sender {
        self.sender
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }
}

/// Rebuilds every object with its keys in sorted order.
fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, canonicalize(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Serializes any value as canonical JSON text.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("protocol types serialize to JSON");
    serde_json::to_string(&canonicalize(value)).expect("JSON values always print")
}

pub fn encode(envelope: &MessageEnvelope) -> String {
    to_canonical_json(envelope)
}

pub fn decode(text: &str) -> Result<MessageEnvelope, ProtocolError> {
    serde_json::from_str(text).map_err(|e| ProtocolError::Json(e.to_string()))
}

/// Removes Markdown code fence markers (three backticks plus an optional
/// language tag) and keeps everything else.
pub fn strip_fences(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(pos) = rest.find("```") {
        out.push_str(&rest[..pos]);
        rest = &rest[pos + 3..];
        let tag_len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
            .unwrap_or(rest.len());
        rest = &rest[tag_len..];
    }
    out.push_str(rest);
    out
}

/// Byte length of the balanced `{...}` starting at `text[0]`, honoring JSON
/// string quoting. `None` if it never closes.
fn balanced_len(text: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in text.bytes().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Iterates over the top-level balanced objects in `text` that parse as
/// JSON objects, yielding `(start, end)` byte ranges.
fn json_objects(text: &str) -> impl Iterator<Item = (usize, usize, Map<String, Value>)> + '_ {
    let mut pos = 0;
    std::iter::from_fn(move || {
        while let Some(off) = text[pos..].find('{') {
            let start = pos + off;
            if let Some(len) = balanced_len(&text[start..]) {
                if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..start + len]) {
                    pos = start + len;
                    return Some((start, start + len, map));
                }
            }
            pos = start + 1;
        }
        None
    })
}

/// First well-formed JSON object in a model reply, after fence stripping.
pub fn extract_json_object(raw: &str) -> Result<Map<String, Value>, ProtocolError> {
    let stripped = strip_fences(raw);
    let first = json_objects(&stripped).next();
    first.map(|(_, _, map)| map).ok_or(ProtocolError::NoJsonFound)
}

/// Last well-formed top-level JSON object in `text`.
pub fn last_json_object(text: &str) -> Option<&str> {
    json_objects(text).last().map(|(s, e, _)| &text[s..e])
}

fn string_field(obj: &Map<String, Value>, field: &str) -> Result<String, ProtocolError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(ProtocolError::MissingField(field.to_string())),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other @ (Value::Array(_) | Value::Object(_))) => Ok(to_canonical_json(other)),
        Some(other) => Ok(other.to_string()),
    }
}

pub fn parse_strategist(raw: &str) -> Result<StrategistDecision, ProtocolError> {
    let obj = extract_json_object(raw)?;
    let action = match obj.get("action") {
        None | Some(Value::Null) => return Err(ProtocolError::MissingField("action".into())),
        Some(Value::String(s)) => s
            .parse::<Action>()
            .map_err(|_| ProtocolError::UnknownAction(s.clone()))?,
        Some(other) => return Err(ProtocolError::UnknownAction(other.to_string())),
    };
    Ok(StrategistDecision {
        action,
        rationale: string_field(&obj, "rationale")?,
        instructions: string_field(&obj, "instructions")?,
    })
}

/// Parsed attribute list plus non-fatal notes (e.g. truncated candidates).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedAttributes {
    pub attributes: Vec<InferredAttribute>,
    pub warnings: Vec<String>,
}

fn parse_confidence(value: Option<&Value>) -> Result<Confidence, ProtocolError> {
    let value = match value {
        None | Some(Value::Null) => return Err(ProtocolError::MissingField("confidence".into())),
        Some(v) => v,
    };
    value
        .as_i64()
        .and_then(|n| Confidence::new(n).ok())
        .ok_or_else(|| ProtocolError::ConfidenceInvalid(value.to_string()))
}

fn parse_values(value: Option<&Value>, warnings: &mut Vec<String>, attr_type: &str) -> Result<Vec<String>, ProtocolError> {
    let mut values = match value {
        None | Some(Value::Null) => return Err(ProtocolError::MissingField("value".into())),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(ProtocolError::invalid("value", format!("non-string candidate {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => return Err(ProtocolError::invalid("value", format!("expected string or list, got {other}"))),
    };
    if values.is_empty() {
        return Err(ProtocolError::invalid("value", "no candidate values"));
    }
    if values.iter().any(|v| v.trim().is_empty()) {
        return Err(ProtocolError::invalid("value", "empty candidate value"));
    }
    if values.len() > MAX_CANDIDATE_VALUES {
        warnings.push(format!(
            "attribute {attr_type:?} had {} candidate values; kept the first {MAX_CANDIDATE_VALUES}",
            values.len()
        ));
        values.truncate(MAX_CANDIDATE_VALUES);
    }
    Ok(values)
}

fn parse_evidence(value: Option<&Value>) -> Result<Vec<Evidence>, ProtocolError> {
    let items = match value {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::Array(items)) => items,
        Some(other) => return Err(ProtocolError::invalid("evidence", format!("expected a list, got {other}"))),
    };
    items
        .iter()
        .map(|item| {
            let seq = item
                .get("seq")
                .and_then(Value::as_u64)
                .filter(|s| (1..=u64::from(u32::MAX)).contains(s))
                .ok_or_else(|| ProtocolError::invalid("evidence.seq", format!("need a positive integer in {item}")))?;
            let quote = item
                .get("quote")
                .and_then(Value::as_str)
                .ok_or_else(|| ProtocolError::invalid("evidence.quote", format!("need a string in {item}")))?;
            Ok(Evidence::new(seq as u32, quote))
        })
        .collect()
}

fn parse_attribute_list(obj: &Map<String, Value>) -> Result<ParsedAttributes, ProtocolError> {
    let items = match obj.get("attributes") {
        None | Some(Value::Null) => return Err(ProtocolError::MissingField("attributes".into())),
        Some(Value::Array(items)) => items,
        Some(other) => return Err(ProtocolError::invalid("attributes", format!("expected a list, got {other}"))),
    };
    let mut out = ParsedAttributes::default();
    for item in items {
        let item = item
            .as_object()
            .ok_or_else(|| ProtocolError::invalid("attributes", "entries must be objects"))?;
        let attr_type = match item.get("type") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            None | Some(Value::Null) => return Err(ProtocolError::MissingField("type".into())),
            Some(other) => return Err(ProtocolError::invalid("type", format!("need a non-empty string, got {other}"))),
        };
        let values = parse_values(item.get("value"), &mut out.warnings, &attr_type)?;
        let confidence = parse_confidence(item.get("confidence"))?;
        let evidence = parse_evidence(item.get("evidence"))?;
        let attr = InferredAttribute::new(attr_type, values, confidence, evidence)
            .map_err(|e| ProtocolError::invalid("attributes", e.to_string()))?;
        out.attributes.push(attr);
    }
    Ok(out)
}

/// Parses `{"attributes": [{"type", "value", "confidence", "evidence"}]}`.
pub fn parse_extractor(raw: &str) -> Result<ParsedAttributes, ProtocolError> {
    parse_attribute_list(&extract_json_object(raw)?)
}

/// The Summarizer replies with the same attribute schema as the Extractor.
pub fn parse_summarizer(raw: &str) -> Result<ParsedAttributes, ProtocolError> {
    parse_extractor(raw)
}

/// Parses `{"category": "<one of the ten>"}`.
pub fn parse_category(raw: &str) -> Result<Category, ProtocolError> {
    let obj = extract_json_object(raw)?;
    let name = string_field(&obj, "category")?;
    name.parse()
        .map_err(|_| ProtocolError::invalid("category", format!("{name:?} is not one of the ten categories")))
}

/// Plain-text mode: the first action keyword in the reply decides.
pub fn parse_strategist_plain(raw: &str) -> Result<StrategistDecision, ProtocolError> {
    let text = raw.trim();
    let action = text
        .split(|c: char| !c.is_ascii_alphabetic())
        .find_map(|word| word.parse::<Action>().ok())
        .ok_or_else(|| ProtocolError::UnknownAction(text.chars().take(40).collect()))?;
    Ok(StrategistDecision::new(action, text, text))
}

/// Plain-text mode: one attribute per line, `Type: v1 | v2 (confidence N)`.
/// Lines in any other shape are ignored.
pub fn parse_attributes_plain(raw: &str) -> ParsedAttributes {
    let line_re = plain_line_regex();
    let mut out = ParsedAttributes::default();
    for line in raw.lines() {
        let Some(caps) = line_re.captures(line) else {
            continue;
        };
        let mut values: Vec<String> = caps[2]
            .split('|')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            continue;
        }
        if values.len() > MAX_CANDIDATE_VALUES {
            out.warnings.push(format!("line {line:?} had more than 3 values"));
            values.truncate(MAX_CANDIDATE_VALUES);
        }
        let confidence = Confidence::new(caps[3].parse().unwrap_or(0)).expect("regex admits only 1..=5");
        if let Ok(attr) = InferredAttribute::new(caps[1].trim(), values, confidence, Vec::new()) {
            out.attributes.push(attr);
        }
    }
    out
}

fn plain_line_regex() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(r"^\s*(?:[-*]\s*)?([^:|()]+):\s*(.+?)\s*\((?i:confidence):?\s*([1-5])\)\s*$")
            .expect("static regex")
    })
}

/// Renders attributes in the plain-text line format.
pub fn render_attributes_plain(attributes: &[InferredAttribute]) -> String {
    attributes
        .iter()
        .map(|a| format!("- {}: {} (confidence {})", a.attr_type(), a.values().join(" | "), a.confidence()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One model call made inside the repair loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Repaired<T> {
    pub value: T,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, thiserror::Error)]
pub enum RepairError {
    #[error("no parseable reply after {} attempts", attempts.len())]
    Exhausted { attempts: Vec<Attempt> },
    #[error("backend failed: {error}")]
    Backend { error: GatewayError, attempts: Vec<Attempt> },
}

impl RepairError {
    pub fn attempts(&self) -> &[Attempt] {
        match self {
            RepairError::Exhausted { attempts } | RepairError::Backend { attempts, .. } => attempts,
        }
    }
}

/// The follow-up turn sent after an unparseable reply.
pub fn corrective_prompt(error: &ProtocolError) -> String {
    format!(
        "Your previous reply could not be used ({}: {error}). Reply again with only the output format described in your instructions.",
        error.name()
    )
}

/// Sends `request`, and on a parse failure re-sends it with the reply and a
/// corrective turn appended. Makes at most `max_retries + 1` calls.
pub fn repair_loop<T>(
    gateway: &Gateway,
    ledger: &UsageLedger,
    mut request: ChatRequest,
    max_retries: u32,
    parse: impl Fn(&str) -> Result<T, ProtocolError>,
) -> Result<Repaired<T>, RepairError> {
    let mut attempts = Vec::new();
    for attempt in 0..=max_retries {
        request.tag.attempt = attempt;
        let text = match gateway.complete(&request, ledger) {
            Ok((text, _)) => text,
            Err(error) => return Err(RepairError::Backend { error, attempts }),
        };
        match parse(&text) {
            Ok(value) => {
                attempts.push(Attempt { raw: text, error: None });
                return Ok(Repaired { value, attempts });
            }
            Err(e) => {
                request.messages.push(ChatMessage::assistant(text.clone()));
                request.messages.push(ChatMessage::user(corrective_prompt(&e)));
                attempts.push(Attempt {
                    raw: text,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Err(RepairError::Exhausted { attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{RequestTag, ScriptEntry, ScriptMatch, ScriptedBackend};
    use std::sync::Arc;

    #[test]
    fn decision_encodes_with_sorted_keys() {
        let d = StrategistDecision::new(Action::Finish, "no data left", "");
        assert_eq!(
            to_canonical_json(&d),
            r#"{"action":"finish","instructions":"","rationale":"no data left"}"#
        );
        let env = MessageEnvelope::decision(d);
        let text = encode(&env);
        assert!(text.starts_with(r#"{"payload":{"decision":{"action":"finish""#));
        assert_eq!(decode(&text).unwrap(), env);
    }

    #[test]
    fn envelope_rejects_mismatched_payload() {
        let err = MessageEnvelope::new(Sender::Retriever, Payload::Profile(Profile::new("u"))).unwrap_err();
        assert_eq!(err.name(), "EnvelopeMismatch");
        let forged = r#"{"payload":{"attributes":[]},"sender":"strategist"}"#;
        assert!(decode(forged).is_err());
    }

    #[test]
    fn strategist_plain_json() {
        let d = parse_strategist(r#"{"action":"retrieve","rationale":"need data","instructions":"next 10"}"#).unwrap();
        assert_eq!(d, StrategistDecision::new(Action::Retrieve, "need data", "next 10"));
    }

    #[test]
    fn strategist_fenced_with_prose() {
        // Fences go first, leaving `Sure! {"action":"FINISH",...}`; the first
        // '{' opens a balanced object that parses.
        let raw = r#"Sure! ```json{"action":"FINISH","rationale":"done","instructions":""}```"#;
        assert_eq!(strip_fences(raw), r#"Sure! {"action":"FINISH","rationale":"done","instructions":""}"#);
        let d = parse_strategist(raw).unwrap();
        assert_eq!(d, StrategistDecision::new(Action::Finish, "done", ""));
    }

    #[test]
    fn strategist_errors_are_distinct() {
        assert_eq!(
            parse_strategist(r#"{"action":"explore"}"#).unwrap_err(),
            ProtocolError::UnknownAction("explore".into())
        );
        assert_eq!(parse_strategist("no json here").unwrap_err(), ProtocolError::NoJsonFound);
        assert_eq!(
            parse_strategist(r#"{"action":"infer","rationale":"x"}"#).unwrap_err(),
            ProtocolError::MissingField("instructions".into())
        );
        assert_eq!(
            parse_strategist(r#"{"rationale":"x"}"#).unwrap_err(),
            ProtocolError::MissingField("action".into())
        );
    }

    #[test]
    fn skips_unbalanced_and_invalid_candidates() {
        let raw = r#"{ broken {"action":"refine","rationale":"r","instructions":"i"} trailing }"#;
        // The outer braces balance but do not parse; the inner object does.
        assert_eq!(parse_strategist(raw).unwrap().action, Action::Refine);
        let nested = r#"text {"a": "}"} then {"action":"infer","rationale":"","instructions":""}"#;
        assert!(matches!(parse_strategist(nested), Err(ProtocolError::MissingField(_))));
    }

    #[test]
    fn extractor_schema() {
        let raw = r#"{"attributes":[{"type":"Age","value":["30-35"],"confidence":4,"evidence":[{"seq":7,"quote":"turned 32 last month"}]}]}"#;
        let parsed = parse_extractor(raw).unwrap();
        assert_eq!(parsed.attributes.len(), 1);
        let a = &parsed.attributes[0];
        assert_eq!(a.attr_type(), "Age");
        assert_eq!(a.values(), ["30-35"]);
        assert_eq!(a.confidence().get(), 4);
        assert_eq!(a.evidence(), [Evidence::new(7, "turned 32 last month")]);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn extractor_confidence_rules() {
        for bad in ["7", "0", "3.5", "\"high\"", "-1"] {
            let raw = format!(r#"{{"attributes":[{{"type":"Age","value":"30","confidence":{bad}}}]}}"#);
            assert!(
                matches!(parse_extractor(&raw), Err(ProtocolError::ConfidenceInvalid(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn extractor_truncates_to_three_values() {
        let raw = r#"{"attributes":[{"type":"City","value":["a","b","c","d"],"confidence":2,"evidence":[]}]}"#;
        let parsed = parse_extractor(raw).unwrap();
        assert_eq!(parsed.attributes[0].values(), ["a", "b", "c"]);
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn extractor_empty_list_and_missing_fields() {
        assert!(parse_extractor(r#"{"attributes":[]}"#).unwrap().attributes.is_empty());
        assert_eq!(
            parse_extractor(r#"{"attrs":[]}"#).unwrap_err(),
            ProtocolError::MissingField("attributes".into())
        );
        assert_eq!(
            parse_extractor(r#"{"attributes":[{"value":"x","confidence":3}]}"#).unwrap_err(),
            ProtocolError::MissingField("type".into())
        );
        assert!(matches!(
            parse_extractor(r#"{"attributes":[{"type":"x","value":"y","confidence":3,"evidence":[{"seq":0,"quote":"q"}]}]}"#),
            Err(ProtocolError::InvalidField { .. })
        ));
    }

    #[test]
    fn category_parsing() {
        assert_eq!(parse_category(r#"{"category":"Asset"}"#).unwrap(), Category::Asset);
        assert!(parse_category(r#"{"category":"Hobby"}"#).is_err());
    }

    #[test]
    fn plain_text_parsers() {
        let d = parse_strategist_plain("I think we should Infer now.").unwrap();
        assert_eq!(d.action, Action::Infer);
        assert!(parse_strategist_plain("hmm").is_err());
        let attrs = parse_attributes_plain("- Age: 30-35 | 36-40 (confidence 4)\nnoise\nLocation: Seattle (Confidence: 5)");
        assert_eq!(attrs.attributes.len(), 2);
        assert_eq!(attrs.attributes[0].values(), ["30-35", "36-40"]);
        assert_eq!(parse_attributes_plain(&render_attributes_plain(&attrs.attributes)).attributes, attrs.attributes);
    }

    fn gateway(lines: &str) -> Gateway {
        Gateway::new(Arc::new(ScriptedBackend::parse_jsonl(lines).unwrap()))
    }

    fn request() -> ChatRequest {
        ChatRequest::new(
            "sys",
            "go",
            RequestTag {
                agent: "strategist".into(),
                ..Default::default()
            },
        )
    }

    #[test]
    fn repair_succeeds_on_second_attempt() {
        let gw = gateway(
            r#"{"match":{"agent":"strategist","attempt":0},"response":"not json"}
{"match":{"agent":"strategist","attempt":1},"response":"{\"action\":\"infer\",\"rationale\":\"r\",\"instructions\":\"i\"}"}"#,
        );
        let ledger = UsageLedger::new();
        let out = repair_loop(&gw, &ledger, request(), 3, parse_strategist).unwrap();
        assert_eq!(out.value.action, Action::Infer);
        assert_eq!(out.attempts.len(), 2);
        assert_eq!(out.attempts[0].raw, "not json");
        assert!(out.attempts[0].error.as_deref().unwrap().contains("no JSON object"));
        assert_eq!(ledger.calls(), 2);
    }

    #[test]
    fn repair_exhausts_after_max_retries_plus_one() {
        let gw = gateway(r#"{"match":{"agent":"strategist"},"response":"{\"action\":\"dance\"}"}"#);
        let ledger = UsageLedger::new();
        let err = repair_loop(&gw, &ledger, request(), 2, parse_strategist).unwrap_err();
        assert!(matches!(err, RepairError::Exhausted { .. }));
        assert_eq!(err.attempts().len(), 3);
        assert_eq!(ledger.calls(), 3);
    }

    #[test]
    fn repair_valid_first_time_is_one_call() {
        let gw = gateway(r#"{"match":{"agent":"strategist"},"response":"{\"action\":\"finish\",\"rationale\":\"\",\"instructions\":\"\"}"}"#);
        let ledger = UsageLedger::new();
        let out = repair_loop(&gw, &ledger, request(), 5, parse_strategist).unwrap();
        assert_eq!(out.attempts.len(), 1);
        assert_eq!(ledger.calls(), 1);
    }

    #[test]
    fn corrective_turn_names_the_error() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::respond(
                ScriptMatch {
                    agent: "strategist".into(),
                    contains: vec!["UnknownAction".into()],
                    ..Default::default()
                },
                r#"{"action":"finish","rationale":"","instructions":""}"#,
            ),
            ScriptEntry::respond(
                ScriptMatch {
                    agent: "strategist".into(),
                    ..Default::default()
                },
                r#"{"action":"wander","rationale":"","instructions":""}"#,
            ),
        ])
        .unwrap();
        let gw = Gateway::new(Arc::new(backend));
        let out = repair_loop(&gw, &UsageLedger::new(), request(), 1, parse_strategist).unwrap();
        assert_eq!(out.value.action, Action::Finish);
    }

    #[test]
    fn last_object_for_echo() {
        assert_eq!(last_json_object("a {\"x\":1} b {\"y\":{\"z\":2}} c"), Some("{\"y\":{\"z\":2}}"));
        assert_eq!(last_json_object("none"), None);
    }
}
