#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegraph::graph::parse_splits;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = parse_splits(text, 16) {
        assert!(s.train.iter().chain(&s.val).chain(&s.test).all(|&v| v < 16));
    }
});
