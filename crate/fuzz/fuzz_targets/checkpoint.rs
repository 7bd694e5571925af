#![no_main]

use cosynorm_core::numerics::checkpoint::{decode, encode_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = decode(data) {
        let bytes = encode_records(records.iter().map(|(n, t)| (n.as_str(), t)));
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), records.len());
        assert_eq!(encode_records(again.iter().map(|(n, t)| (n.as_str(), t))), bytes);
    }
});
