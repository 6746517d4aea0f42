#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::datasets::parse_idx_labels;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = parse_idx_labels(data) {
        assert!(labels.iter().all(|&y| y < 256));
    }
});
