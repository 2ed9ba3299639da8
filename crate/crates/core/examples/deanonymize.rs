//! (n, k)-de-anonymization: how many people in an auxiliary dataset share
//! at least n inferred attributes with a profile.
//!
//!     cargo run --example deanonymize

use pseudoscope::evaluation::{anonymity_set, is_nk_deanonymized, TypeValueMatch};
use pseudoscope::model::{AuxRecord, Confidence, Evidence, InferredAttribute, Profile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let conf = Confidence::new(4)?;
    let inferred = [("Age", "33"), ("Sex", "female"), ("City", "Leeds"), ("Occupation", "nurse")];
    let profile = Profile {
        user_id: "fixture_user".into(),
        attributes: inferred
            .iter()
            .map(|(t, v)| InferredAttribute::single(*t, *v, conf, vec![Evidence::new(1, "...")]))
            .collect::<Result<_, _>>()?,
    };

    let people = [
        [("age", "33"), ("sex", "female"), ("city", "Leeds"), ("occupation", "Nurse")],
        [("age", "33"), ("sex", "female"), ("city", "Leeds"), ("occupation", "teacher")],
        [("age", "41"), ("sex", "female"), ("city", "Leeds"), ("occupation", "nurse")],
        [("age", "33"), ("sex", "male"), ("city", "York"), ("occupation", "nurse")],
        [("age", "58"), ("sex", "male"), ("city", "Hull"), ("occupation", "plumber")],
    ];
    let aux: Vec<AuxRecord> = people
        .iter()
        .map(|r| AuxRecord::new(r.iter().map(|(k, v)| (*k, v.to_string()))))
        .collect::<Result<_, _>>()?;

    let f = TypeValueMatch::exact();
    for n in 1..=4 {
        let size = anonymity_set(&profile, &aux, &f, n);
        println!(
            "n={n}: {size} candidate(s); ({n},1)-de-anonymized: {}",
            is_nk_deanonymized(&profile, &aux, &f, n, 1)
        );
    }
    Ok(())
}
