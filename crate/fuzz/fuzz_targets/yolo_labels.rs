//! YOLO-txt label parser: no panics, accepted labels are valid, and the
//! 6-decimal writer is a fixed point after one round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use spmamba::data::labels::{parse_labels, write_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(labels) = parse_labels(text, "fuzz", 4) else {
        return;
    };
    for l in &labels {
        assert!(l.validate(4).is_ok(), "parser accepted an invalid label");
    }
    let mut once = Vec::new();
    write_labels(&mut once, &labels).expect("valid labels serialize");
    let text1 = String::from_utf8(once).expect("writer emits UTF-8");
    let again = parse_labels(&text1, "fuzz", 4).expect("written labels re-parse");
    let mut twice = Vec::new();
    write_labels(&mut twice, &again).expect("valid labels serialize");
    assert_eq!(text1.as_bytes(), &twice[..], "quantization must be idempotent");
});
