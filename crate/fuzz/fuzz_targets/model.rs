#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::nn::TrainedModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = TrainedModel::from_bytes(data) {
        let again = TrainedModel::from_bytes(&m.to_bytes()).expect("re-encoded model must decode");
        assert!(again.bit_eq(&m));
    }
});
