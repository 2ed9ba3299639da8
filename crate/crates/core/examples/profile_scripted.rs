//! Profile the bundled 25-activity archive offline with the scripted backend
//! and print the action log, the inferred attributes and the usage totals.
//!
//!     cargo run --example profile_scripted

use std::path::Path;

use pseudoscope::agents::TemplateSet;
use pseudoscope::gateway::GatewayConfig;
use pseudoscope::ingestion::open_archive;
use pseudoscope::orchestrator::{run_profile, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut source = open_archive(&fixtures.join("archive_25.jsonl"))?;
    let gateway = GatewayConfig::scripted("script_25.jsonl").build(&fixtures)?;
    let templates = TemplateSet::builtin();

    let outcome = run_profile(&mut source, &gateway, &templates, &PipelineConfig::default(), None)?;

    let log: Vec<&str> = outcome.actions.iter().map(|a| a.as_str()).collect();
    println!("actions: {}", log.join(" -> "));
    for attr in &outcome.profile.attributes {
        let seqs: Vec<String> = attr.evidence().iter().map(|e| e.seq.to_string()).collect();
        println!(
            "  {:<20} {:<12} confidence {}  evidence [{}]",
            attr.attr_type(),
            attr.primary_value(),
            attr.confidence(),
            seqs.join(", ")
        );
    }
    let total = outcome.usage.total;
    println!(
        "{} calls, {} input / {} output tokens, ${:.4} estimated",
        total.calls, total.input_tokens, total.output_tokens, total.cost_estimate
    );
    for (agent, usage) in &outcome.usage.by_agent {
        println!("  {agent}: {} calls", usage.calls);
    }
    Ok(())
}
