#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::datasets::parse_idx_images;

fuzz_target!(|data: &[u8]| {
    if let Ok((n, h, w, pixels)) = parse_idx_images(data) {
        assert_eq!(pixels.len(), n * h * w);
        assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
