#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegraph::graph::parse_features;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_features(text) {
        for b in &table.blocks {
            assert!(b.data().iter().all(|x| x.is_finite()));
        }
    }
});
