#![no_main]

use drinet::training::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = TrainConfig::from_toml(text) else { return };
    let again = TrainConfig::from_toml(&cfg.to_toml().expect("valid config serializes")).expect("round trip");
    assert_eq!(again, cfg);
});
