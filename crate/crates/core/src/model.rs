//! Domain types shared by every stage of the pipeline.
//!
//! All types here are plain immutable values. Constructors validate ranges so
//! that downstream code can rely on the invariants without re-checking them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Maximum number of candidate values an attribute may carry.
pub const MAX_CANDIDATE_VALUES: usize = 3;

/// Evidence quotes are stored verbatim up to this many characters.
pub const MAX_QUOTE_CHARS: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("{what} {value} outside {min}..={max}")]
    OutOfRange {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("an attribute needs 1 to 3 candidate values, got {0}")]
    ValueCount(usize),
    #[error("activity {0} has empty text")]
    EmptyText(String),
    #[error("activity sequence numbers are 1-based")]
    ZeroSeq,
    #[error("score table is missing category {0}")]
    MissingCategory(Category),
    #[error("unknown attribute type {0:?}")]
    UnknownAttrType(String),
}

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?'];

/// Canonical form of an attribute value or type name.
///
/// Lowercases, collapses runs of whitespace to a single space and strips
/// trailing punctuation. Idempotent.
pub fn normalize(raw: &str) -> Result<String, ModelError> {
    let lowered = raw.to_lowercase();
    let mut out = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let trimmed = out.trim_end_matches(TRAILING_PUNCT).trim_end();
        if trimmed.len() == out.len() {
            break;
        }
        out.truncate(trimmed.len());
    }
    if out.is_empty() {
        return Err(ModelError::InvalidValue(raw.to_string()));
    }
    Ok(out)
}

/// Like [`normalize`] but maps unnormalizable input to the empty string.
/// Used for comparisons where an empty value simply never matches.
pub(crate) fn normalize_lossy(raw: &str) -> String {
    normalize(raw).unwrap_or_default()
}

macro_rules! bounded_int {
    ($(#[$meta:meta])* $name:ident, $what:literal, $min:literal, $max:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "i64", into = "u8")]
        pub struct $name(u8);

        impl $name {
            pub const MIN: u8 = $min;
            pub const MAX: u8 = $max;

            pub fn new(value: i64) -> Result<Self, ModelError> {
                if (i64::from($min)..=i64::from($max)).contains(&value) {
                    Ok(Self(value as u8))
                } else {
                    Err(ModelError::OutOfRange {
                        what: $what,
                        value,
                        min: $min,
                        max: $max,
                    })
                }
            }

            pub fn get(self) -> u8 {
                self.0
            }
        }

        impl TryFrom<i64> for $name {
            type Error = ModelError;
            fn try_from(value: i64) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for u8 {
            fn from(value: $name) -> u8 {
                value.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

bounded_int!(
    /// Model confidence in an inference, 1 (weak) to 5 (strong).
    Confidence,
    "confidence",
    1,
    5
);
bounded_int!(
    /// Annotated hardness or certainty level of a labeled attribute.
    Level,
    "level",
    1,
    5
);
bounded_int!(
    /// Sensitivity or identifiability score of a category.
    Score,
    "score",
    1,
    10
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityKind {
    Post,
    Comment,
}

/// One post or comment from a user's archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub id: String,
    /// Chronological index within the user's archive, starting at 1.
    pub seq: u32,
    pub timestamp: DateTime<Utc>,
    pub kind: ActivityKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub venue: Option<String>,
}

impl Activity {
    pub fn new(
        id: impl Into<String>,
        seq: u32,
        timestamp: DateTime<Utc>,
        kind: ActivityKind,
        text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let text = text.into();
        if seq == 0 {
            return Err(ModelError::ZeroSeq);
        }
        if text.trim().is_empty() {
            return Err(ModelError::EmptyText(id));
        }
        Ok(Self {
            id,
            seq,
            timestamp,
            kind,
            text,
            thread_context: None,
            venue: None,
        })
    }

    pub fn with_thread_context(mut self, context: impl Into<String>) -> Self {
        self.thread_context = Some(context.into());
        self
    }

    pub fn with_venue(mut self, venue: impl Into<String>) -> Self {
        self.venue = Some(venue.into());
        self
    }

    /// The numbered rendering agents see: `[seq] (kind in venue) text`.
    pub fn render(&self) -> String {
        let kind = match self.kind {
            ActivityKind::Post => "post",
            ActivityKind::Comment => "comment",
        };
        let mut out = format!("[{}] ({kind}", self.seq);
        if let Some(venue) = &self.venue {
            out.push_str(" in ");
            out.push_str(venue);
        }
        out.push_str(") ");
        if let Some(ctx) = &self.thread_context {
            out.push_str("re: \"");
            out.push_str(ctx);
            out.push_str("\" ");
        }
        out.push_str(&self.text);
        out
    }
}

/// A quote from an activity that supports an inference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Evidence {
    pub seq: u32,
    pub quote: String,
}

impl Evidence {
    /// Quotes longer than [`MAX_QUOTE_CHARS`] characters are cut.
    pub fn new(seq: u32, quote: impl Into<String>) -> Self {
        let mut quote = quote.into();
        if let Some((cut, _)) = quote.char_indices().nth(MAX_QUOTE_CHARS) {
            quote.truncate(cut);
        }
        Self { seq, quote }
    }
}

/// A typed claim about the user: 1 to 3 candidate values (most likely first),
/// a confidence and the supporting evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAttribute")]
pub struct InferredAttribute {
    #[serde(rename = "type")]
    attr_type: String,
    #[serde(rename = "value")]
    values: Vec<String>,
    confidence: Confidence,
    evidence: Vec<Evidence>,
}

#[derive(Deserialize)]
struct RawAttribute {
    #[serde(rename = "type")]
    attr_type: String,
    #[serde(rename = "value")]
    values: Vec<String>,
    confidence: Confidence,
    #[serde(default)]
    evidence: Vec<Evidence>,
}

impl TryFrom<RawAttribute> for InferredAttribute {
    type Error = ModelError;
    fn try_from(raw: RawAttribute) -> Result<Self, Self::Error> {
        Self::new(raw.attr_type, raw.values, raw.confidence, raw.evidence)
    }
}

impl InferredAttribute {
    pub fn new(
        attr_type: impl Into<String>,
        values: Vec<String>,
        confidence: Confidence,
        evidence: Vec<Evidence>,
    ) -> Result<Self, ModelError> {
        let attr_type = attr_type.into();
        if attr_type.trim().is_empty() {
            return Err(ModelError::InvalidValue("empty attribute type".into()));
        }
        if values.is_empty() || values.len() > MAX_CANDIDATE_VALUES {
            return Err(ModelError::ValueCount(values.len()));
        }
        if values.iter().any(|v| v.trim().is_empty()) {
            return Err(ModelError::InvalidValue("empty candidate value".into()));
        }
        let evidence = evidence
            .into_iter()
            .map(|e| Evidence::new(e.seq, e.quote))
            .collect();
        Ok(Self {
            attr_type,
            values,
            confidence,
            evidence,
        })
    }

    /// Convenience constructor for a single-valued attribute.
    pub fn single(
        attr_type: impl Into<String>,
        value: impl Into<String>,
        confidence: Confidence,
        evidence: Vec<Evidence>,
    ) -> Result<Self, ModelError> {
        Self::new(attr_type, vec![value.into()], confidence, evidence)
    }

    pub fn attr_type(&self) -> &str {
        &self.attr_type
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn primary_value(&self) -> &str {
        &self.values[0]
    }

    pub fn confidence(&self) -> Confidence {
        self.confidence
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    /// `(normalized type, normalized primary value)`, the dedup key of a profile.
    pub fn dedup_key(&self) -> (String, String) {
        (
            normalize_lossy(&self.attr_type),
            normalize_lossy(self.primary_value()),
        )
    }

    pub fn max_evidence_seq(&self) -> u32 {
        self.evidence.iter().map(|e| e.seq).max().unwrap_or(0)
    }

    pub(crate) fn retain_evidence(&mut self, keep: impl FnMut(&Evidence) -> bool) {
        self.evidence.retain(keep);
    }
}

/// The deduplicated attribute set inferred for one user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub user_id: String,
    pub attributes: Vec<InferredAttribute>,
}

impl Profile {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            attributes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// True when no two attributes share a normalized `(type, primary value)`.
    pub fn is_deduplicated(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.attributes.iter().all(|a| seen.insert(a.dedup_key()))
    }

    /// All evidence sequence numbers referenced by the profile.
    pub fn evidence_seqs(&self) -> std::collections::BTreeSet<u32> {
        self.attributes
            .iter()
            .flat_map(|a| a.evidence.iter().map(|e| e.seq))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Retrieve,
    Infer,
    Refine,
    Finish,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Retrieve, Action::Infer, Action::Refine, Action::Finish];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Retrieve => "retrieve",
            Action::Infer => "infer",
            Action::Refine => "refine",
            Action::Finish => "finish",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_ascii_lowercase();
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == lowered)
            .ok_or_else(|| ModelError::InvalidValue(s.to_string()))
    }
}

/// The Strategist's choice of next step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategistDecision {
    pub action: Action,
    pub rationale: String,
    pub instructions: String,
}

impl StrategistDecision {
    pub fn new(action: Action, rationale: impl Into<String>, instructions: impl Into<String>) -> Self {
        Self {
            action,
            rationale: rationale.into(),
            instructions: instructions.into(),
        }
    }
}

/// Whether a category identifies a person or is merely sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grouping {
    #[serde(rename = "PII")]
    Pii,
    #[serde(rename = "SPI")]
    Spi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Identifier,
    Demographic,
    Background,
    Geographic,
    Health,
    Finance,
    Relationship,
    Behavior,
    Secrets,
    Asset,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Identifier,
        Category::Demographic,
        Category::Background,
        Category::Geographic,
        Category::Health,
        Category::Finance,
        Category::Relationship,
        Category::Behavior,
        Category::Secrets,
        Category::Asset,
    ];

    pub fn grouping(self) -> Grouping {
        match self {
            Category::Identifier
            | Category::Demographic
            | Category::Background
            | Category::Geographic => Grouping::Pii,
            Category::Health
            | Category::Finance
            | Category::Relationship
            | Category::Behavior
            | Category::Secrets
            | Category::Asset => Grouping::Spi,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Identifier => "Identifier",
            Category::Demographic => "Demographic",
            Category::Background => "Background",
            Category::Geographic => "Geographic",
            Category::Health => "Health",
            Category::Finance => "Finance",
            Category::Relationship => "Relationship",
            Category::Behavior => "Behavior",
            Category::Secrets => "Secrets",
            Category::Asset => "Asset",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_lowercase();
        // "Geolocation" is used interchangeably with Geographic.
        if wanted == "geolocation" {
            return Ok(Category::Geographic);
        }
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().to_ascii_lowercase() == wanted)
            .ok_or_else(|| ModelError::InvalidValue(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub sensitivity: Score,
    pub identifiability: Score,
}

/// Sensitivity and identifiability per category. Always covers all ten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Category, CategoryScores>", into = "BTreeMap<Category, CategoryScores>")]
pub struct ScoreTable(BTreeMap<Category, CategoryScores>);

impl ScoreTable {
    pub fn new(scores: BTreeMap<Category, CategoryScores>) -> Result<Self, ModelError> {
        if let Some(missing) = Category::ALL.into_iter().find(|c| !scores.contains_key(c)) {
            return Err(ModelError::MissingCategory(missing));
        }
        Ok(Self(scores))
    }

    pub fn from_pairs(pairs: [(Category, i64, i64); 10]) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for (cat, sensitivity, identifiability) in pairs {
            map.insert(
                cat,
                CategoryScores {
                    sensitivity: Score::new(sensitivity)?,
                    identifiability: Score::new(identifiability)?,
                },
            );
        }
        Self::new(map)
    }

    pub fn get(&self, category: Category) -> CategoryScores {
        self.0[&category]
    }
}

impl Default for ScoreTable {
    /// Editable defaults chosen for this tool. Not calibrated ground truth.
    fn default() -> Self {
        Self::from_pairs([
            (Category::Identifier, 6, 10),
            (Category::Demographic, 4, 5),
            (Category::Background, 4, 7),
            (Category::Geographic, 5, 7),
            (Category::Health, 9, 3),
            (Category::Finance, 8, 3),
            (Category::Relationship, 6, 3),
            (Category::Behavior, 4, 3),
            (Category::Secrets, 10, 2),
            (Category::Asset, 5, 4),
        ])
        .expect("default score table is complete and in range")
    }
}

impl TryFrom<BTreeMap<Category, CategoryScores>> for ScoreTable {
    type Error = ModelError;
    fn try_from(map: BTreeMap<Category, CategoryScores>) -> Result<Self, Self::Error> {
        Self::new(map)
    }
}

impl From<ScoreTable> for BTreeMap<Category, CategoryScores> {
    fn from(table: ScoreTable) -> Self {
        table.0
    }
}

/// The eight labeled attribute types of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabeledAttr {
    #[serde(rename = "Age")]
    Age,
    #[serde(rename = "Education")]
    Education,
    #[serde(rename = "Income Level")]
    IncomeLevel,
    #[serde(rename = "Location")]
    Location,
    #[serde(rename = "Occupation")]
    Occupation,
    #[serde(rename = "Place of Birth")]
    PlaceOfBirth,
    #[serde(rename = "Relationship Status")]
    RelationshipStatus,
    #[serde(rename = "Sex")]
    Sex,
}

impl LabeledAttr {
    /// Table column order (alphabetical by abbreviation).
    pub const ALL: [LabeledAttr; 8] = [
        LabeledAttr::Age,
        LabeledAttr::Education,
        LabeledAttr::IncomeLevel,
        LabeledAttr::Location,
        LabeledAttr::Occupation,
        LabeledAttr::PlaceOfBirth,
        LabeledAttr::RelationshipStatus,
        LabeledAttr::Sex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabeledAttr::Age => "Age",
            LabeledAttr::Education => "Education",
            LabeledAttr::IncomeLevel => "Income Level",
            LabeledAttr::Location => "Location",
            LabeledAttr::Occupation => "Occupation",
            LabeledAttr::PlaceOfBirth => "Place of Birth",
            LabeledAttr::RelationshipStatus => "Relationship Status",
            LabeledAttr::Sex => "Sex",
        }
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            LabeledAttr::Age => "AGE",
            LabeledAttr::Education => "EDU",
            LabeledAttr::IncomeLevel => "INC",
            LabeledAttr::Location => "LOC",
            LabeledAttr::Occupation => "OCC",
            LabeledAttr::PlaceOfBirth => "POB",
            LabeledAttr::RelationshipStatus => "REL",
            LabeledAttr::Sex => "SEX",
        }
    }

    /// Maps an open-vocabulary attribute type onto one of the eight labeled
    /// types, if it names one.
    pub fn from_open_type(attr_type: &str) -> Option<Self> {
        let t = normalize_lossy(attr_type);
        let t = t.as_str();
        let hit = |words: &[&str]| words.contains(&t);
        if hit(&["age", "age range", "estimated age", "age group"]) {
            Some(LabeledAttr::Age)
        } else if hit(&["sex", "gender"]) {
            Some(LabeledAttr::Sex)
        } else if hit(&["education", "education level", "educational background", "degree"]) {
            Some(LabeledAttr::Education)
        } else if hit(&["income", "income level", "income bracket"]) {
            Some(LabeledAttr::IncomeLevel)
        } else if hit(&["relationship status", "marital status", "relationship"]) {
            Some(LabeledAttr::RelationshipStatus)
        } else if hit(&["place of birth", "birthplace", "birth place", "hometown", "born in"]) {
            Some(LabeledAttr::PlaceOfBirth)
        } else if hit(&["location", "current location", "city", "residence", "city_country"]) {
            Some(LabeledAttr::Location)
        } else if hit(&["occupation", "job", "profession", "job title"]) {
            Some(LabeledAttr::Occupation)
        } else {
            None
        }
    }
}

impl fmt::Display for LabeledAttr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabeledAttr {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = normalize_lossy(s);
        LabeledAttr::ALL
            .into_iter()
            .find(|a| normalize_lossy(a.name()) == wanted || a.abbrev().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ModelError::UnknownAttrType(s.to_string()))
    }
}

/// A human-labeled attribute with its annotation levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub user_id: String,
    pub attr_type: LabeledAttr,
    pub true_value: String,
    pub hardness: Level,
    pub certainty: Level,
}

/// One record of an auxiliary dataset: attribute type to value, with keys
/// in normalized form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct AuxRecord(BTreeMap<String, String>);

pub type AuxDataset = Vec<AuxRecord>;

impl AuxRecord {
    pub fn new<K, V>(pairs: impl IntoIterator<Item = (K, V)>) -> Result<Self, ModelError>
    where
        K: AsRef<str>,
        V: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            map.insert(normalize(k.as_ref())?, v.into());
        }
        Ok(Self(map))
    }

    /// Value stored under an attribute type (the key is normalized first).
    pub fn get(&self, attr_type: &str) -> Option<&str> {
        self.0.get(&normalize_lossy(attr_type)).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Record-shaped view of a profile: each type maps to the primary value
    /// of its highest-confidence attribute (first wins on ties).
    pub fn from_profile(profile: &Profile) -> Self {
        let mut best: BTreeMap<String, (Confidence, String)> = BTreeMap::new();
        for attr in &profile.attributes {
            let key = normalize_lossy(attr.attr_type());
            if key.is_empty() {
                continue;
            }
            match best.get(&key) {
                Some((conf, _)) if *conf >= attr.confidence() => {}
                _ => {
                    best.insert(key, (attr.confidence(), attr.primary_value().to_string()));
                }
            }
        }
        Self(best.into_iter().map(|(k, (_, v))| (k, v)).collect())
    }
}

impl TryFrom<BTreeMap<String, String>> for AuxRecord {
    type Error = ModelError;
    fn try_from(map: BTreeMap<String, String>) -> Result<Self, Self::Error> {
        Self::new(map)
    }
}

impl From<AuxRecord> for BTreeMap<String, String> {
    fn from(record: AuxRecord) -> Self {
        record.0
    }
}
