use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 17
k = [1, 2]

[data]
source = "shapes"
classes = 10
per_class = 8
image = [1, 16, 16]
noise_std = 0.1
test_n = 20

[train]
learning_rate = 0.05
epochs = 2
batch_size = 8

[[models]]
id = "ens-a"
group = "ENSEMBLE"
channels = [3]
seed = 1

[[models]]
id = "ens-b"
group = "ENSEMBLE"
channels = [4]
seed = 2

[[models]]
id = "ens-c"
group = "ENSEMBLE"
channels = [5]
seed = 3

[[models]]
id = "held-a"
group = "HELD_OUT_STANDARD"
channels = [2]
seed = 4

[[models]]
id = "held-b"
group = "HELD_OUT_STANDARD"
channels = [6]
seed = 5

[[models]]
id = "held-c"
group = "HELD_OUT_OTHER"
channels = [3, 4]
seed = 6

[craft]
targets = [2, 5]
learning_rate = 1.0
epochs = 3
corpus_size = 3
patch_side = 4

[eval]
exclude_target_class = true
"#;

fn patchbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchbench")).args(args).output().unwrap()
}

/// Writes `text` as the config in a fresh directory and returns both.
fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, format!("out = {:?}\n{text}", dir.path().join("out"))).unwrap();
    (dir, path)
}

fn step(config: &Path, command: &str) -> Output {
    let out = patchbench(&["--config", config.to_str().unwrap(), command]);
    assert!(
        out.status.success(),
        "{command} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_writes_every_artifact_and_reruns_bit_identically() {
    let (a, ca) = setup(CONFIG);
    let (b, cb) = setup(CONFIG);
    for cfg in [&ca, &cb] {
        step(cfg, "train");
        step(cfg, "craft");
        step(cfg, "gen-dataset");
        let eval = String::from_utf8(step(cfg, "eval").stdout).unwrap();
        assert!(eval.contains("Pearson"), "{eval}");
    }
    let out = a.path().join("out");
    let models: Vec<_> = fs::read_dir(out.join("models"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pfm"))
        .collect();
    assert_eq!(models.len(), 6);
    assert!(out.join("patches/patch-t2.pfp").exists() && out.join("patches/patch-t5.pfp").exists());
    assert!(out.join("dataset/manifest.json").exists());

    let report = fs::read_to_string(out.join("report/report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "model_id,group,patch_id,metric,k,value,n,seed");
    assert_eq!(files(&out), files(&b.path().join("out")));

    let printed = String::from_utf8(step(&ca, "report").stdout).unwrap();
    assert_eq!(printed, fs::read_to_string(out.join("report/table.txt")).unwrap());
}

#[test]
fn flags_override_the_config() {
    let (dir, cfg) = setup(CONFIG);
    let other = dir.path().join("elsewhere");
    let out = patchbench(&["--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap(), "--k", "1", "train"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(other.join("models/ens-a.pfm").exists());
    assert!(!dir.path().join("out").exists());
    let summary = fs::read_to_string(other.join("models/summary.csv")).unwrap();
    assert!(summary.lines().next().unwrap().ends_with(",C_1"));
}

#[test]
fn a_misspelled_key_exits_two_and_names_it() {
    let (_d, cfg) = setup(&CONFIG.replace("noise_std", "noise_sdt"));
    let out = patchbench(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("noise_sdt"), "{}", stderr(&out));
}

#[test]
fn a_missing_seed_exits_two() {
    let (_d, cfg) = setup(&CONFIG.replace("seed = 17\n", ""));
    let out = patchbench(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn crafting_without_models_exits_two() {
    let (_d, cfg) = setup(CONFIG);
    let out = patchbench(&["--config", cfg.to_str().unwrap(), "craft"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("run `train` first"), "{}", stderr(&out));
}

#[test]
fn a_held_out_model_cannot_be_listed_for_crafting() {
    let text = CONFIG.replace("patch_side = 4", "patch_side = 4\nmodels = [\"ens-a\", \"held-b\"]");
    let (_d, cfg) = setup(&text);
    let out = patchbench(&["--config", cfg.to_str().unwrap(), "craft"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("held-b") && stderr(&out).contains("HELD_OUT_STANDARD"), "{}", stderr(&out));
}

#[test]
fn target_count_sets_the_patch_file_count() {
    let (dir, cfg) = setup(&CONFIG.replace("targets = [2, 5]", "targets = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]"));
    step(&cfg, "train");
    step(&cfg, "craft");
    let patches = dir.path().join("out/patches");
    let count = |ext: &str| walk(&patches).iter().filter(|p| p.to_str().unwrap().ends_with(ext)).count();
    assert_eq!(count(".pfp"), 10);
    assert_eq!(count(".loss.csv"), 10);

    let (dir, cfg) = setup(&CONFIG.replace("targets = [2, 5]", "targets = []"));
    step(&cfg, "train");
    step(&cfg, "craft");
    let patches = dir.path().join("out/patches");
    assert!(!patches.exists() || walk(&patches).is_empty());
}

#[test]
fn gradcheck_passes_and_respects_the_tolerance() {
    let out = patchbench(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("warp_backward") && text.contains("all checks passed"));

    let strict = patchbench(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8(strict.stdout).unwrap().contains("FAIL"));
}

#[test]
fn report_without_eval_exits_two() {
    let (_d, cfg) = setup(CONFIG);
    let out = patchbench(&["--config", cfg.to_str().unwrap(), "report"]);
    assert_eq!(out.status.code(), Some(2));
}
