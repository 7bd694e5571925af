#![no_main]

use cosynorm_core::datagen::DatagenConfig;
use cosynorm_core::pipeline::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = TrainConfig::from_toml(text) {
        assert_eq!(TrainConfig::from_toml(&config.to_toml()).expect("config round-trips"), config);
    }
    let _ = DatagenConfig::from_toml(text);
});
