#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegraph::graph::parse_labels;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(labels) = parse_labels(text, 16) {
        assert_eq!(labels.len(), 16);
    }
});
