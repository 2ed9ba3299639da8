//! Checkpointed runs: a backend that dies mid-run, then a resume that
//! finishes the job without repeating completed calls.
//!
//!     cargo run --example resume_run

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pseudoscope::agents::TemplateSet;
use pseudoscope::gateway::{ChatRequest, Completion, Gateway, GatewayError, LlmBackend, ScriptedBackend};
use pseudoscope::ingestion::open_archive;
use pseudoscope::orchestrator::{derive_run_id, resume, run_profile, PipelineConfig, RunStore};

/// Fails every call after the first `budget`.
struct Dying {
    inner: ScriptedBackend,
    budget: usize,
    used: AtomicUsize,
}

impl LlmBackend for Dying {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        if self.used.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(GatewayError::Transport {
                message: "connection lost".into(),
                transient: false,
            });
        }
        self.inner.complete(request)
    }

    fn name(&self) -> &str {
        "dying"
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let archive = fixtures.join("archive_25.jsonl");
    let script = fixtures.join("script_25.jsonl");
    let runs = std::env::temp_dir().join("pseudoscope-resume-example");
    let templates = TemplateSet::builtin();
    let config = PipelineConfig::default();
    let store = RunStore::new(&runs, derive_run_id("archive_25", &config, templates.hash()));

    let dying = Gateway::new(Arc::new(Dying {
        inner: ScriptedBackend::from_path(&script)?,
        budget: 5,
        used: AtomicUsize::new(0),
    }));
    let err = run_profile(&mut open_archive(&archive)?, &dying, &templates, &config, Some(&store)).unwrap_err();
    println!("first attempt stopped: {err}");
    println!("checkpoint: {}", store.state_path().display());

    let healthy = Gateway::new(Arc::new(ScriptedBackend::from_path(&script)?));
    let outcome = resume(&store, &mut open_archive(&archive)?, &healthy, &templates)?;
    let log: Vec<&str> = outcome.actions.iter().map(|a| a.as_str()).collect();
    println!("resumed run {}: {}", store.run_id(), log.join(" -> "));
    println!("{} attributes, {} calls in total", outcome.profile.len(), outcome.usage.total.calls);
    Ok(())
}
