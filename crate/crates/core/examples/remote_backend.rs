//! Profile an archive with a live chat-completions endpoint.
//!
//!     PSEUDOSCOPE_API_KEY=... cargo run --example remote_backend -- <archive.jsonl> [model]
//!
//! `PSEUDOSCOPE_API_BASE` points the client at a compatible server. The
//! archive needs a `{"meta":{"consent":true}}` first line.

use std::path::PathBuf;

use pseudoscope::agents::TemplateSet;
use pseudoscope::gateway::{BackendKind, GatewayConfig, PriceSetting, Provider, RemoteConfig};
use pseudoscope::ingestion::open_archive;
use pseudoscope::orchestrator::{run_profile, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let Some(archive) = args.next().map(PathBuf::from) else {
        eprintln!("usage: remote_backend <archive.jsonl> [model]");
        std::process::exit(64);
    };
    let model = args.next().unwrap_or_else(|| "gpt-4-turbo".into());

    let mut source = open_archive(&archive)?;
    if !source.meta().consent {
        return Err(format!("{} has no consent marker", archive.display()).into());
    }
    let config = GatewayConfig {
        backend: BackendKind::Remote,
        remote: Some(RemoteConfig::new(Provider::Openai, model)),
        price_table: PriceSetting::Preset("gpt-4-turbo".into()),
        ..GatewayConfig::default()
    };
    let gateway = config.build(std::path::Path::new("."))?;
    let outcome = run_profile(&mut source, &gateway, &TemplateSet::builtin(), &PipelineConfig::default(), None)?;
    println!("{}", serde_json::to_string_pretty(&outcome.profile)?);
    let total = outcome.usage.total;
    eprintln!(
        "{} calls, {:.1}s, ${:.2}{}",
        total.calls,
        total.wall_time.as_secs_f64(),
        total.cost_estimate,
        if total.approximate { " (approximate tokens)" } else { "" }
    );
    Ok(())
}
