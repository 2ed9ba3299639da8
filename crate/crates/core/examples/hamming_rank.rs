//! Rank candidate identities by Hamming distance to an inferred record and
//! report top-k accuracy over a few targets.
//!
//!     cargo run --example hamming_rank

use pseudoscope::evaluation::{hamming_rank, top_k_accuracy};
use pseudoscope::model::AuxRecord;

fn rec(pairs: &[(&str, &str)]) -> AuxRecord {
    AuxRecord::new(pairs.iter().map(|(k, v)| (*k, v.to_string()))).expect("valid record")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let candidates = vec![
        rec(&[("age", "30-39"), ("city", "Leeds"), ("job", "nurse"), ("sex", "female")]),
        rec(&[("age", "30-39"), ("city", "Leeds"), ("job", "teacher"), ("sex", "female")]),
        rec(&[("age", "40-49"), ("city", "York"), ("job", "nurse"), ("sex", "male")]),
        rec(&[("age", "20-29"), ("city", "Hull"), ("job", "chef"), ("sex", "male")]),
    ];
    // The adversary did not infer a job for this target.
    let inferred = rec(&[("age", "30-39"), ("city", "Leeds"), ("sex", "female")]);
    for g in hamming_rank(&inferred, &candidates)? {
        println!("rank {} (distance {}): candidates {:?}", g.rank, g.distance, g.members);
    }

    let targets = vec![
        (inferred, 0),
        (rec(&[("age", "40-49"), ("city", "York"), ("job", "nurse"), ("sex", "male")]), 2),
        (rec(&[("age", "20-29"), ("city", "Leeds"), ("job", "chef"), ("sex", "male")]), 3),
    ];
    for k in [1, 2, 3] {
        let acc = top_k_accuracy(&targets, &candidates, k)?;
        println!("top-{k}: {}/{}", acc.correct, acc.total);
    }
    Ok(())
}
