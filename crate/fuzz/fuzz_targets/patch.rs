#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::patchops::Patch;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = Patch::from_bytes(data) {
        assert!(p.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = Patch::from_bytes(&p.to_bytes()).expect("re-encoded patch must decode");
        assert!(again.bit_eq(&p));
    }
});
