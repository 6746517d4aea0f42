#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::codec::{tensor_from_bytes, tensor_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = tensor_from_bytes(data) {
        let again = tensor_from_bytes(&tensor_to_bytes(&t)).expect("re-encoded tensor must decode");
        assert!(again.bit_eq(&t));
    }
});
