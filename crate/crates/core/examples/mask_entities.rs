//! Mask names, e-mail addresses, URLs and phone numbers before text leaves
//! the machine, with the built-in detector or explicit spans.
//!
//!     cargo run --example mask_entities

use pseudoscope::ingestion::{mask_entities, BuiltinDetector, EntityDetector, Span};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let detector = BuiltinDetector::default();
    for text in [
        "Ask Maria Lopez, she is on maria.lopez@example.org",
        "Call 0113 496 0000 or see https://example.com/menu",
        "Nothing to hide here.",
    ] {
        let spans = detector.detect(text);
        println!("{text}\n  -> {}", mask_entities(text, &spans)?);
    }

    let text = "Moved to Leeds in 2019.";
    println!("{text}\n  -> {}", mask_entities(text, &[Span::new(9, 14)])?);
    Ok(())
}
