use std::fs;
use std::path::PathBuf;

use patchbench::codec::tensor_from_bytes;
use patchbench::config::RunConfig;
use patchbench::datasets::{parse_idx_images, parse_idx_labels, Manifest};
use patchbench::metrics::EvalReport;
use patchbench::nn::TrainedModel;
use patchbench::patchops::Patch;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.display().to_string(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn every_checked_in_seed_decodes() {
    for (name, b) in seeds("tensor") {
        tensor_from_bytes(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("model") {
        TrainedModel::from_bytes(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("patch") {
        Patch::from_bytes(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("idx_images") {
        parse_idx_images(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("idx_labels") {
        parse_idx_labels(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("manifest") {
        Manifest::from_json(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("config") {
        let cfg = RunConfig::from_toml(std::str::from_utf8(&b).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, b) in seeds("report") {
        EvalReport::from_csv(&b[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
