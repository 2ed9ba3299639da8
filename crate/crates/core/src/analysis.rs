//! Post-run analysis: confidence filtering, categorization, risk scores
//! and the Markdown report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentEnv, AgentOutput, TemplateRole};
use crate::gateway::GatewayError;
use crate::model::{normalize_lossy, Category, Confidence, Grouping, InferredAttribute, Profile, ScoreTable};
use crate::protocol::{parse_category, repair_loop, to_canonical_json, RepairError};

pub const DEFAULT_MIN_CONFIDENCE: u8 = 4;

/// Keeps attributes with confidence at least `min_conf`, in order.
pub fn filter_by_confidence(profile: &Profile, min_conf: Confidence) -> Profile {
    Profile {
        user_id: profile.user_id.clone(),
        attributes: profile
            .attributes
            .iter()
            .filter(|a| a.confidence() >= min_conf)
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorizeMode {
    #[default]
    Rule,
    Llm,
}

/// Keyword table, checked in this order. A trailing `*` matches any word
/// starting with the stem; other keywords match whole words.
const RULES: [(Category, &[&str]); 9] = [
    (
        Category::Identifier,
        &["name", "username", "email", "e-mail", "phone", "address", "ssn", "passport", "handle", "identifier", "id"],
    ),
    (
        Category::Secrets,
        &["secret*", "password*", "crime*", "criminal", "illegal", "affair", "confidential", "arrest*"],
    ),
    (
        Category::Asset,
        &["vehicle*", "car", "cars", "ownership", "property", "properties", "real", "estate", "pet", "pets", "possession*", "asset*", "boat", "motorcycle", "bike"],
    ),
    (
        Category::Finance,
        &["income", "salary", "financ*", "debt*", "wealth*", "saving*", "loan*", "spending", "money", "invest*", "tax*", "credit"],
    ),
    (
        Category::Health,
        &["health*", "medical", "medication*", "illness*", "disease*", "condition*", "disabilit*", "mental", "diagnos*", "height", "weight", "pregnan*", "allerg*", "therap*", "fitness"],
    ),
    (
        Category::Relationship,
        &["relationship*", "marital", "married", "spouse", "partner*", "family", "children", "child", "kids", "sibling*", "parent*", "friend*", "dating", "wife", "husband"],
    ),
    (
        Category::Geographic,
        &["location*", "city", "country", "place", "residence", "hometown", "region", "neighborhood", "neighbourhood", "travel*", "lives", "birthplace"],
    ),
    (
        Category::Demographic,
        &["age", "sex", "gender", "ethnic*", "race", "nationality", "language*", "generation"],
    ),
    (
        Category::Background,
        &["occupation*", "job", "profession*", "career*", "employ*", "work*", "educat*", "degree", "school*", "universit*", "college", "skill*", "industry", "background"],
    ),
];

fn words(text: &str) -> Vec<String> {
    normalize_lossy(text)
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn rule_hit(text: &str) -> Option<Category> {
    let ws = words(text);
    RULES.iter().find_map(|(cat, keys)| {
        let hit = keys.iter().any(|k| match k.strip_suffix('*') {
            Some(stem) => ws.iter().any(|w| w.starts_with(stem)),
            None => ws.iter().any(|w| w == k),
        });
        hit.then_some(*cat)
    })
}

/// Keyword categorization on the type name, then the values. Anything
/// unmatched is Behavior.
pub fn categorize_rule(attr: &InferredAttribute) -> Category {
    rule_hit(attr.attr_type())
        .or_else(|| rule_hit(&attr.values().join(" ")))
        .unwrap_or(Category::Behavior)
}

/// Asks the model; falls back to the rule table when it never answers with
/// a valid category.
pub fn categorize_llm(env: &AgentEnv<'_>, step: u32, attr: &InferredAttribute) -> Result<AgentOutput<Category>, GatewayError> {
    let shown = serde_json::json!({
        "type": attr.attr_type(),
        "value": attr.values(),
        "confidence": attr.confidence(),
    });
    let system = env
        .templates
        .get(TemplateRole::Categorizer)
        .render(&[("inferred_attributes", &to_canonical_json(&shown))]);
    let request = env.request("categorizer", step, system, "Classify the attribute above.");
    match repair_loop(env.gateway, env.ledger, request, env.max_repair_retries, parse_category) {
        Ok(r) => Ok(AgentOutput {
            value: r.value,
            attempts: r.attempts,
            warnings: Vec::new(),
            fallback: false,
        }),
        Err(RepairError::Exhausted { attempts }) => Ok(AgentOutput {
            value: categorize_rule(attr),
            warnings: vec![format!(
                "categorizer gave no usable reply for {:?}; used the keyword table",
                attr.attr_type()
            )],
            attempts,
            fallback: true,
        }),
        Err(RepairError::Backend { error, .. }) => Err(error),
    }
}

/// A manual override produced by reviewing a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub attr_index: usize,
    pub category: Category,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("correction for attribute {index}, but the profile has {len}")]
    CorrectionOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

pub fn load_corrections(path: &Path) -> Result<Vec<Correction>, AnalysisError> {
    let err = |message: String| AnalysisError::File {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(format!("line {}: {e}", i + 1))))
        .collect()
}

/// One line per attribute with its current category, for hand editing.
pub fn corrections_template(categories: &[Category]) -> String {
    categories
        .iter()
        .enumerate()
        .map(|(i, c)| to_canonical_json(&Correction { attr_index: i, category: *c }) + "\n")
        .collect()
}

pub fn apply_corrections(categories: &mut [Category], corrections: &[Correction]) -> Result<(), AnalysisError> {
    for c in corrections {
        let len = categories.len();
        let slot = categories
            .get_mut(c.attr_index)
            .ok_or(AnalysisError::CorrectionOutOfRange { index: c.attr_index, len })?;
        *slot = c.category;
    }
    Ok(())
}

/// Average scores over all attributes plus per-category counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub attributes: usize,
    /// `None` for an empty profile.
    pub avg_sensitivity: Option<f64>,
    pub avg_identifiability: Option<f64>,
    pub counts: BTreeMap<Category, usize>,
}

impl RiskSummary {
    /// PII and SPI shares in tenths of a percent; they add up to 1000.
    pub fn split_permille(&self) -> Option<(u64, u64)> {
        if self.attributes == 0 {
            return None;
        }
        let n = self.attributes as u64;
        let pii: u64 = self
            .counts
            .iter()
            .filter(|(c, _)| c.grouping() == Grouping::Pii)
            .map(|(_, k)| *k as u64)
            .sum();
        let pii_permille = (1000 * pii + n / 2) / n;
        Some((pii_permille, 1000 - pii_permille))
    }
}

/// Unweighted means of the category scores of every attribute.
pub fn privacy_risk(categories: &[Category], table: &ScoreTable) -> RiskSummary {
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    let mut sens = 0u64;
    let mut ident = 0u64;
    for c in categories {
        *counts.entry(*c).or_default() += 1;
        let s = table.get(*c);
        sens += u64::from(s.sensitivity.get());
        ident += u64::from(s.identifiability.get());
    }
    let n = categories.len();
    let avg = |total: u64| (n > 0).then(|| total as f64 / n as f64);
    RiskSummary {
        attributes: n,
        avg_sensitivity: avg(sens),
        avg_identifiability: avg(ident),
        counts,
    }
}

/// Loads a score table: a JSON object with all ten categories.
pub fn load_score_table(path: &Path) -> Result<ScoreTable, AnalysisError> {
    let err = |message: String| AnalysisError::File {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// A filtered, categorized profile with its risk summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub min_confidence: Confidence,
    pub profile: Profile,
    pub categories: Vec<Category>,
    pub risk: RiskSummary,
}

/// Filters, categorizes by rule, applies corrections and scores.
pub fn analyze_rule(
    profile: &Profile,
    min_conf: Confidence,
    table: &ScoreTable,
    corrections: &[Correction],
) -> Result<Analysis, AnalysisError> {
    let filtered = filter_by_confidence(profile, min_conf);
    let mut categories: Vec<Category> = filtered.attributes.iter().map(categorize_rule).collect();
    apply_corrections(&mut categories, corrections)?;
    let risk = privacy_risk(&categories, table);
    Ok(Analysis {
        min_confidence: min_conf,
        profile: filtered,
        categories,
        risk,
    })
}

fn permille(p: u64) -> String {
    format!("{}.{}%", p / 10, p % 10)
}

/// Deterministic Markdown report.
pub fn render_report(analysis: &Analysis) -> String {
    let mut out = String::new();
    let p = &analysis.profile;
    let _ = writeln!(out, "# Exposure report for {}\n", p.user_id);
    let _ = writeln!(
        out,
        "Attributes with confidence {} or higher: {}\n",
        analysis.min_confidence,
        p.len()
    );
    if p.is_empty() {
        out.push_str("No attributes above threshold.\n");
        return out;
    }
    let risk = &analysis.risk;
    let (pii, spi) = risk.split_permille().expect("non-empty");
    out.push_str("## Risk summary\n\n");
    let _ = writeln!(out, "- Average sensitivity: {:.2}", risk.avg_sensitivity.unwrap_or_default());
    let _ = writeln!(out, "- Average identifiability: {:.2}", risk.avg_identifiability.unwrap_or_default());
    let _ = writeln!(out, "- PII share: {}", permille(pii));
    let _ = writeln!(out, "- SPI share: {}", permille(spi));
    out.push_str("\nScores come from a configurable table, not calibrated ground truth.\n\n");
    out.push_str("| Category | Group | Attributes |\n|---|---|---|\n");
    for (cat, n) in &risk.counts {
        let group = match cat.grouping() {
            Grouping::Pii => "PII",
            Grouping::Spi => "SPI",
        };
        let _ = writeln!(out, "| {cat} | {group} | {n} |");
    }
    for cat in Category::ALL {
        let members: Vec<&InferredAttribute> = p
            .attributes
            .iter()
            .zip(&analysis.categories)
            .filter(|(_, c)| **c == cat)
            .map(|(a, _)| a)
            .collect();
        if members.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n## {cat}\n");
        for a in members {
            let alternatives = if a.values().len() > 1 {
                format!(" (alternatives: {})", a.values()[1..].join(", "))
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "- **{}**: {}{} [confidence {}]",
                a.attr_type(),
                a.primary_value(),
                alternatives,
                a.confidence()
            );
            for e in a.evidence() {
                let _ = writeln!(out, "  - [{}] \"{}\"", e.seq, e.quote);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Evidence, Score};
    use proptest::prelude::*;

    fn conf(n: i64) -> Confidence {
        Confidence::new(n).unwrap()
    }

    fn attr(t: &str, v: &str, c: i64) -> InferredAttribute {
        InferredAttribute::single(t, v, conf(c), vec![Evidence::new(1, "q")]).unwrap()
    }

    fn profile(attrs: Vec<InferredAttribute>) -> Profile {
        Profile {
            user_id: "u".into(),
            attributes: attrs,
        }
    }

    #[test]
    fn threshold_semantics() {
        let p = profile((1..=5).map(|c| attr(&format!("T{c}"), "v", c)).collect());
        let kept: Vec<u8> = filter_by_confidence(&p, conf(4)).attributes.iter().map(|a| a.confidence().get()).collect();
        assert_eq!(kept, vec![4, 5]);
        assert_eq!(filter_by_confidence(&p, conf(1)), p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn filter_counts_and_monotone(confs in prop::collection::vec(1i64..=5, 0..20), t in 1i64..=5) {
            let p = profile(confs.iter().enumerate().map(|(i, c)| attr(&format!("T{i}"), "v", *c)).collect());
            let out = filter_by_confidence(&p, conf(t));
            prop_assert_eq!(out.len(), confs.iter().filter(|c| **c >= t).count());
            prop_assert!(out.attributes.iter().all(|a| i64::from(a.confidence().get()) >= t));
            prop_assert_eq!(filter_by_confidence(&out, conf(t)), out.clone());
            if t < 5 {
                let higher = filter_by_confidence(&p, conf(t + 1));
                prop_assert!(higher.attributes.iter().all(|a| out.attributes.contains(a)));
            }
        }

        #[test]
        fn averages_match_brute_force(idx in prop::collection::vec(0usize..10, 1..30)) {
            let table = ScoreTable::default();
            let cats: Vec<Category> = idx.iter().map(|i| Category::ALL[*i]).collect();
            let risk = privacy_risk(&cats, &table);
            let mut s = 0.0;
            let mut d = 0.0;
            for c in &cats {
                s += f64::from(table.get(*c).sensitivity.get());
                d += f64::from(table.get(*c).identifiability.get());
            }
            let n = cats.len() as f64;
            prop_assert!((risk.avg_sensitivity.unwrap() - s / n).abs() < 1e-12);
            prop_assert!((risk.avg_identifiability.unwrap() - d / n).abs() < 1e-12);
            let avg = risk.avg_sensitivity.unwrap();
            prop_assert!((1.0..=10.0).contains(&avg));
            let (pii, spi) = risk.split_permille().unwrap();
            prop_assert_eq!(pii + spi, 1000);
        }
    }

    #[test]
    fn rule_categories() {
        assert_eq!(categorize_rule(&attr("Occupation", "nurse", 4)), Category::Background);
        assert_eq!(categorize_rule(&attr("Email address", "a@b.c", 4)), Category::Identifier);
        assert_eq!(categorize_rule(&attr("Vehicle ownership", "Miata", 4)), Category::Asset);
        assert_eq!(categorize_rule(&attr("Career stage", "mid", 4)), Category::Background);
        assert_eq!(categorize_rule(&attr("Place of Birth", "Leeds", 4)), Category::Geographic);
        assert_eq!(categorize_rule(&attr("Relationship Status", "married", 4)), Category::Relationship);
        assert_eq!(categorize_rule(&attr("Income Level", "high", 4)), Category::Finance);
        assert_eq!(categorize_rule(&attr("Height", "tall", 3)), Category::Health);
        assert_eq!(categorize_rule(&attr("Age", "34", 4)), Category::Demographic);
        assert_eq!(categorize_rule(&attr("Favourite band", "the national", 4)), Category::Behavior);
        // Type misses, value hits.
        assert_eq!(categorize_rule(&attr("Commute", "drives a car", 4)), Category::Asset);
    }

    #[test]
    fn two_category_average() {
        let table = ScoreTable::default();
        let mut pairs: Vec<(Category, i64, i64)> = Category::ALL
            .iter()
            .map(|c| (*c, i64::from(table.get(*c).sensitivity.get()), i64::from(table.get(*c).identifiability.get())))
            .collect();
        pairs[0].1 = 3;
        pairs[1].1 = 7;
        let table = ScoreTable::from_pairs(pairs.try_into().unwrap()).unwrap();
        let risk = privacy_risk(&[Category::ALL[0], Category::ALL[1]], &table);
        assert_eq!(risk.avg_sensitivity, Some(5.0));
        let single = privacy_risk(&[Category::Health; 3], &table);
        assert_eq!(single.avg_sensitivity, Some(f64::from(table.get(Category::Health).sensitivity.get())));
        assert_eq!(privacy_risk(&[], &table).avg_sensitivity, None);
        let _ = Score::new(1).unwrap();
    }

    #[test]
    fn report_states_empty_profile() {
        let a = analyze_rule(&profile(vec![attr("Age", "30", 2)]), conf(4), &ScoreTable::default(), &[]).unwrap();
        assert!(render_report(&a).to_lowercase().contains("no attributes above threshold"));
    }

    #[test]
    fn corrections_override_and_check_range() {
        let p = profile(vec![attr("Age", "30", 5), attr("Hobby", "chess", 5)]);
        let fix = [Correction {
            attr_index: 1,
            category: Category::Secrets,
        }];
        let a = analyze_rule(&p, conf(4), &ScoreTable::default(), &fix).unwrap();
        assert_eq!(a.categories, vec![Category::Demographic, Category::Secrets]);
        let bad = [Correction {
            attr_index: 5,
            category: Category::Secrets,
        }];
        assert!(analyze_rule(&p, conf(4), &ScoreTable::default(), &bad).is_err());
        let lines = corrections_template(&a.categories);
        assert_eq!(lines.lines().count(), 2);
        assert!(lines.starts_with(r#"{"attr_index":0,"category":"Demographic"}"#));
    }
}
