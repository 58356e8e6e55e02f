#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegraph::graph::{max_edge_step, parse_edges};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let steps = max_edge_step(text).map_or(1, |t| t.saturating_add(1)).min(64);
    if let Ok(edges) = parse_edges(text, 32, steps) {
        assert_eq!(edges.len(), steps);
        assert!(edges.iter().flatten().all(|&(u, v)| u < 32 && v < 32));
    }
});
