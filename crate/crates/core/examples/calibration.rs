//! Accuracy per labeled type on the mini dataset, then broken down by
//! annotated hardness and by the model's own confidence.
//!
//!     cargo run --example calibration

use std::path::Path;

use pseudoscope::agents::TemplateSet;
use pseudoscope::evaluation::{calibration_accuracy, evaluate_dataset, FtiSchema, Harness, LevelSelector, Method, ValueMatch};
use pseudoscope::gateway::GatewayConfig;
use pseudoscope::ingestion::load_synthpai;
use pseudoscope::orchestrator::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthpai_mini");
    let dataset = load_synthpai(&dir)?;
    let gateway = GatewayConfig::scripted("script.jsonl").build(&dir)?;
    let templates = TemplateSet::builtin();
    let harness = Harness {
        gateway: &gateway,
        templates: &templates,
        config: PipelineConfig {
            batch_size: 1,
            extractor_sees_profile: false,
            ..PipelineConfig::default()
        },
        schema: FtiSchema::default(),
        values: ValueMatch::Exact,
        jobs: 2,
    };
    let report = evaluate_dataset(&dataset, Method::Pipeline, &harness)?;
    for (attr, acc) in &report.per_type {
        println!("{:<20} {}/{}", attr.name(), acc.correct, acc.total);
    }
    println!("overall {}%", report.overall.percent());

    let show = |name: &str, sel: LevelSelector| {
        let acc = calibration_accuracy(&report.predictions, &dataset.labels, |s| sel.selects(s), ValueMatch::Exact);
        match acc {
            Some(a) => println!("  {name}: {}/{} ({}%)", a.correct, a.total, a.percent()),
            None => println!("  {name}: no labels"),
        }
    };
    println!("by hardness");
    for h in 1..=5 {
        show(&format!("level {h}"), LevelSelector::Hardness(h));
    }
    println!("by model confidence");
    for c in 1..=5 {
        show(&format!("level {c}"), LevelSelector::ModelConfidence(c));
    }
    Ok(())
}
