//! Confidence filter, categories, risk scores and the Markdown report for
//! a profile produced from the 25-activity fixture.
//!
//!     cargo run --example risk_report

use std::path::Path;

use pseudoscope::agents::TemplateSet;
use pseudoscope::analysis::{analyze_rule, render_report, DEFAULT_MIN_CONFIDENCE};
use pseudoscope::gateway::GatewayConfig;
use pseudoscope::ingestion::open_archive;
use pseudoscope::model::{Confidence, ScoreTable};
use pseudoscope::orchestrator::{run_profile, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let gateway = GatewayConfig::scripted("script_25.jsonl").build(&fixtures)?;
    let mut source = open_archive(&fixtures.join("archive_25.jsonl"))?;
    let outcome = run_profile(&mut source, &gateway, &TemplateSet::builtin(), &PipelineConfig::default(), None)?;

    let min = Confidence::new(i64::from(DEFAULT_MIN_CONFIDENCE))?;
    let analysis = analyze_rule(&outcome.profile, min, &ScoreTable::default(), &[])?;
    println!(
        "{} of {} attributes kept at confidence >= {min}",
        analysis.profile.len(),
        outcome.profile.len()
    );
    println!();
    print!("{}", render_report(&analysis));
    Ok(())
}
