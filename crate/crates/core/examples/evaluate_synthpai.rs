//! Compare the agent pipeline with the single-call baseline on a labeled
//! dataset. Defaults to the bundled mini fixture.
//!
//!     cargo run --example evaluate_synthpai -- [dataset_dir]

use std::path::PathBuf;

use pseudoscope::agents::TemplateSet;
use pseudoscope::evaluation::{accuracy_csv, evaluate_dataset, FtiSchema, Harness, Method, ValueMatch};
use pseudoscope::gateway::GatewayConfig;
use pseudoscope::ingestion::load_synthpai;
use pseudoscope::orchestrator::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthpai_mini"));
    let dataset = load_synthpai(&dir)?;
    println!("{} users, {} comments, {} labels", dataset.users.len(), dataset.comment_count(), dataset.labels.len());
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
        jobs: 4,
    };
    let agents = evaluate_dataset(&dataset, Method::Pipeline, &harness)?;
    let single = evaluate_dataset(&dataset, Method::Fti, &harness)?;
    print!("{}", accuracy_csv(&[&agents, &single]));
    println!("calls: {} vs {}", agents.usage.calls, single.usage.calls);
    Ok(())
}
