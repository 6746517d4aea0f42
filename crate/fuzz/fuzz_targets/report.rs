#![no_main]

use libfuzzer_sys::fuzz_target;
use patchbench::metrics::EvalReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = EvalReport::from_csv(data) {
        let again = EvalReport::from_csv(r.to_csv().as_bytes()).expect("re-encoded report must decode");
        assert_eq!(again.rows, r.rows);
    }
});
