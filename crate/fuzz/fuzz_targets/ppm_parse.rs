//! PPM decoder must never panic, and anything it accepts must survive a
//! write/parse round trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;
use spmamba::data::ppm::{parse_ppm, write_ppm};

fuzz_target!(|data: &[u8]| {
    let Ok(img) = parse_ppm(data, "fuzz") else {
        return;
    };
    assert_eq!(img.pixels.len(), img.width * img.height * 3);
    let mut buf = Vec::new();
    write_ppm(&mut buf, img.width, img.height, &img.pixels).expect("accepted image re-encodes");
    let back = parse_ppm(&buf, "fuzz").expect("re-encoded image parses");
    assert_eq!(back.width, img.width);
    assert_eq!(back.height, img.height);
    assert_eq!(back.pixels, img.pixels);
});
