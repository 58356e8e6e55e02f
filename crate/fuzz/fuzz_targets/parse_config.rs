#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegraph::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_text(text) {
        let back = TrainConfig::from_text(&cfg.to_text()).expect("round trip");
        assert_eq!(back.to_text(), cfg.to_text());
    }
});
