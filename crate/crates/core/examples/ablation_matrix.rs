//! Run the 25-activity fixture under every component combination and
//! compare actions, backend calls and attributes found.
//!
//!     cargo run --example ablation_matrix

use std::path::Path;

use pseudoscope::agents::TemplateSet;
use pseudoscope::gateway::GatewayConfig;
use pseudoscope::ingestion::open_archive;
use pseudoscope::orchestrator::{run_ablation, AblationConfig, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let templates = TemplateSet::builtin();
    let config = PipelineConfig::default();
    println!("{:<5} {:>7} {:>5} {:>10}", "code", "actions", "calls", "attributes");
    for code in ["e", "es", "esr", "esu", "all"] {
        let ablation = AblationConfig::from_code(code).expect("known code");
        let gateway = GatewayConfig::scripted("script_25.jsonl").build(&fixtures)?;
        let mut source = open_archive(&fixtures.join("archive_25.jsonl"))?;
        let out = run_ablation(&mut source, ablation, &gateway, &templates, &config, None)?;
        println!("{code:<5} {:>7} {:>5} {:>10}", out.actions.len(), out.usage.total.calls, out.profile.len());
    }
    Ok(())
}
