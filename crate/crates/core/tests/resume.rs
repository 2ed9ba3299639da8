mod common;

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pseudoscope::agents::TemplateSet;
use pseudoscope::gateway::{ChatRequest, Completion, Gateway, GatewayError, LlmBackend, ScriptedBackend};
use pseudoscope::ingestion::open_archive;
use pseudoscope::orchestrator::{resume, run_profile, PipelineConfig, RunError, RunStore};

use common::fixtures;

struct DiesAfter {
    inner: ScriptedBackend,
    budget: usize,
    used: AtomicUsize,
}

impl LlmBackend for DiesAfter {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        if self.used.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(GatewayError::Transport {
                message: "killed".into(),
                transient: false,
            });
        }
        self.inner.complete(request)
    }

    fn name(&self) -> &str {
        "dies-after"
    }
}

fn script() -> ScriptedBackend {
    ScriptedBackend::from_path(&fixtures().join("script_25.jsonl")).unwrap()
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let archive = fixtures().join("archive_25.jsonl");
    let templates = TemplateSet::builtin();
    let config = PipelineConfig::default();
    let runs = tempfile::tempdir().unwrap();

    let reference_store = RunStore::new(runs.path(), "reference");
    let healthy = Gateway::new(Arc::new(script()));
    let reference = run_profile(&mut open_archive(&archive).unwrap(), &healthy, &templates, &config, Some(&reference_store)).unwrap();
    let total_calls = reference.usage.total.calls as usize;

    for budget in 0..total_calls {
        let store = RunStore::new(runs.path(), format!("cut{budget}"));
        let dying = Gateway::new(Arc::new(DiesAfter {
            inner: script(),
            budget,
            used: AtomicUsize::new(0),
        }));
        let err = run_profile(&mut open_archive(&archive).unwrap(), &dying, &templates, &config, Some(&store)).unwrap_err();
        assert!(matches!(err, RunError::Backend(_)), "{err}");

        let counting = Gateway::new(Arc::new(script()));
        let out = resume(&store, &mut open_archive(&archive).unwrap(), &counting, &templates).unwrap();
        assert_eq!(out.profile, reference.profile, "budget {budget}");
        assert_eq!(out.actions, reference.actions, "budget {budget}");
        assert_eq!(out.usage.total.calls as usize, total_calls, "budget {budget}");

        let strip_run_id = |t: String| t.replacen(&format!("\"run_id\":\"cut{budget}\""), "\"run_id\":\"reference\"", 1);
        assert_eq!(
            strip_run_id(fs::read_to_string(store.transcript_path()).unwrap()),
            fs::read_to_string(reference_store.transcript_path()).unwrap(),
            "budget {budget}"
        );
    }
}

#[test]
fn resume_rejects_changed_templates_and_missing_state() {
    let archive = fixtures().join("archive_25.jsonl");
    let runs = tempfile::tempdir().unwrap();
    let store = RunStore::new(runs.path(), "r");
    let gateway = Gateway::new(Arc::new(script()));
    let templates = TemplateSet::builtin();
    run_profile(&mut open_archive(&archive).unwrap(), &gateway, &templates, &PipelineConfig::default(), Some(&store)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    for role in pseudoscope::agents::TemplateRole::ALL {
        let mut text = templates.get(role).text().to_string();
        if role == pseudoscope::agents::TemplateRole::Strategist {
            text.insert_str(0, "Be brief. ");
        }
        fs::write(dir.path().join(format!("{}.txt", role.as_str())), text).unwrap();
    }
    let edited = TemplateSet::load_dir(dir.path()).unwrap();
    let err = resume(&store, &mut open_archive(&archive).unwrap(), &gateway, &edited).unwrap_err();
    assert!(matches!(err, RunError::TemplateMismatch { .. }));

    let missing = RunStore::new(runs.path(), "never-ran");
    let err = resume(&missing, &mut open_archive(&archive).unwrap(), &gateway, &templates).unwrap_err();
    assert!(matches!(err, RunError::StateMissing(_)), "{err}");
}
