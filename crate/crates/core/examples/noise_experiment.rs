//! Replace 10% of every user's comments with other users' comments and
//! compare accuracy before and after.
//!
//!     cargo run --example noise_experiment -- [seed]

use std::path::Path;

use pseudoscope::agents::TemplateSet;
use pseudoscope::evaluation::{run_noise_experiment, FtiSchema, Harness, Method, ValueMatch};
use pseudoscope::gateway::GatewayConfig;
use pseudoscope::ingestion::load_synthpai;
use pseudoscope::orchestrator::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
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
        jobs: 4,
    };
    let report = run_noise_experiment(&dataset, 0.10, seed, Method::Pipeline, &harness)?;
    for (user, slots) in &report.replaced {
        for (seq, from) in slots {
            let text = dataset.users.values().flatten().find(|a| a.id == *from).map_or("", |a| a.text.as_str());
            println!("{user}: slot {seq} <- {from} {text:?}");
        }
    }
    println!();
    print!("{}", report.to_csv());
    Ok(())
}
