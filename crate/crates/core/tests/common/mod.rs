#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use pseudoscope::gateway::{Gateway, ScriptedBackend};
use pseudoscope::ingestion::ArchiveRecord;
use pseudoscope::model::{Activity, ActivityKind};
use pseudoscope::orchestrator::PipelineConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn script_gateway(name: &str) -> Gateway {
    Gateway::new(Arc::new(ScriptedBackend::from_path(&fixtures().join(name)).unwrap()))
}

/// Pipeline settings the mini dataset's script is written for.
pub fn mini_config() -> PipelineConfig {
    PipelineConfig {
        batch_size: 1,
        extractor_sees_profile: false,
        ..PipelineConfig::default()
    }
}

pub fn activities(prefix: &str, n: u32, text: &str) -> Vec<Activity> {
    (1..=n)
        .map(|i| {
            Activity::new(
                format!("{prefix}{i}"),
                i,
                Utc.timestamp_opt(1_600_000_000 + i64::from(i) * 60, 0).unwrap(),
                ActivityKind::Comment,
                format!("{text} {i}"),
            )
            .unwrap()
        })
        .collect()
}

/// Writes an archive of `n` activities whose text is padded to about
/// `chars` characters.
pub fn write_archive(dir: &Path, name: &str, n: u32, chars: usize) -> PathBuf {
    let mut out = String::from("{\"meta\":{\"fixture\":true,\"user_id\":\"bulk\"}}\n");
    for a in activities("b", n, "message") {
        let mut rec = ArchiveRecord::from_activity(&a);
        while rec.text.len() < chars {
            rec.text.push_str(" lorem ipsum");
        }
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, out).unwrap();
    path
}
