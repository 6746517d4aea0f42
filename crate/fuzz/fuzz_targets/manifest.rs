#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::datasets::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::from_json(data) {
        let again = Manifest::from_json(m.to_json().as_bytes()).expect("re-encoded manifest must decode");
        assert_eq!(again, m);
    }
});
