#![no_main]

use cosynorm_core::datagen::io::{encode_manifest, parse_manifest, parse_manifest_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(row) = parse_manifest_line(text) {
        let rows = vec![row];
        assert_eq!(parse_manifest(&encode_manifest(&rows)).expect("row round-trips"), rows);
    }
    if let Ok(rows) = parse_manifest(text) {
        assert_eq!(parse_manifest(&encode_manifest(&rows)).expect("manifest round-trips"), rows);
    }
});
