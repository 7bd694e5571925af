#![no_main]

use cosynorm_core::datagen::io::{decode_features, encode_features};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(features) = decode_features(data) {
        assert!(features.is_finite());
        let bytes = encode_features(&features).expect("decoded features re-encode");
        assert_eq!(bytes, data);
    }
});
