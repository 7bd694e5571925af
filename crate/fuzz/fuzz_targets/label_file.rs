#![no_main]

use cosynorm_core::datagen::io::{encode_labels, parse_labels};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(labels) = parse_labels(text) {
        assert_eq!(parse_labels(&encode_labels(&labels)).expect("labels round-trip"), labels);
    }
});
