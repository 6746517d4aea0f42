//! The train → craft → gen-dataset → eval workflow over an output
//! directory.
//!
//! Layout under `out`:
//!
//! ```text
//! models/<id>.pfm       models/summary.csv
//! patches/<id>.pfp      patches/<id>.loss.csv
//! dataset/manifest.json dataset/patched-NNN.pft
//! report/report.csv     report/clean_vs_robust.csv   report/table.txt
//! ```
//!
//! Every sub-seed derives from the config seed by a fixed tag, so each
//! command is a pure function of the config and the files it reads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::codec;
use crate::config::{DataConfig, RunConfig};
use crate::crafting::{craft_bundle, CraftResult};
use crate::datasets::{emit_patched_dataset, gen_shapes_dataset, load_idx, select_splits, LabeledDataset, Manifest, ShapesSpec, Split};
use crate::error::{Error, Result};
use crate::metrics::{clean_accuracy, run_benchmark, BenchmarkOptions, EvalReport};
use crate::nn::{convnet_with_head, train_model, ModelGroup, ModelSpec, TrainedModel};
use crate::patchops::Patch;
use crate::rng;

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn patches_dir(out: &Path) -> PathBuf {
    out.join("patches")
}

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

pub fn report_dir(out: &Path) -> PathBuf {
    out.join("report")
}

fn sub_seed(cfg: &RunConfig, what: &str) -> Result<u64> {
    Ok(rng::derive(cfg.seed()?, &[rng::tag(what)]))
}

/// The full dataset named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<LabeledDataset> {
    match &cfg.data {
        DataConfig::Shapes {
            classes,
            per_class,
            image,
            noise_std,
            arrangement,
            contrast,
            ..
        } => gen_shapes_dataset(
            &ShapesSpec {
                class_count: *classes,
                per_class: *per_class,
                dims: (image[0], image[1], image[2]),
                noise_std: *noise_std,
                arrangement: *arrangement,
                contrast: *contrast,
            },
            sub_seed(cfg, "data")?,
        ),
        DataConfig::Idx { images, labels, .. } => load_idx(images, labels),
    }
}

/// Test split for evaluation; the rest trains models and feeds corpora.
pub fn load_splits(cfg: &RunConfig) -> Result<Split> {
    let data = load_data(cfg)?;
    select_splits(&data, cfg.data.test_n(), sub_seed(cfg, "split")?)
}

fn canvas_dims(split: &Split) -> Result<(usize, usize)> {
    split.test.canvas().or_else(|_| split.reservoir.canvas())
}

pub struct TrainOutcome {
    pub models: Vec<TrainedModel>,
    /// Contents of `models/summary.csv`.
    pub summary: String,
}

/// Trains every configured model on the reservoir split and records its
/// clean accuracy on the test split.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = load_splits(cfg)?;
    let image_shape = split.reservoir.image_shape();
    let classes = split.reservoir.class_count.max(split.test.class_count);
    let mut summary = String::from("model_id,group,train_seed,train_accuracy");
    for k in &cfg.k {
        write!(summary, ",C_{k}").unwrap();
    }
    summary.push('\n');
    let mut models = Vec::new();
    for entry in &cfg.models {
        let spec = ModelSpec {
            model_id: entry.id.clone(),
            group: entry.group,
            layers: convnet_with_head(&image_shape, &entry.channels, entry.kernel, classes, entry.head)
                .map_err(|e| Error::Config(format!("model `{}`: {e}", entry.id)))?,
        };
        let mut model = train_model(&spec, &split.reservoir, &cfg.train_config(entry.seed))?;
        let clean: Vec<f64> = cfg
            .k
            .iter()
            .map(|&k| clean_accuracy(&model, &split.test, k))
            .collect::<Result<_>>()?;
        model.clean_acc_cache = clean.first().copied();
        model.save(&models_dir(&cfg.out).join(format!("{}.pfm", entry.id)))?;
        write!(
            summary,
            "{},{},{},{}",
            entry.id,
            entry.group.as_str(),
            entry.seed,
            model.train_accuracy.unwrap_or(f64::NAN)
        )
        .unwrap();
        for c in clean {
            write!(summary, ",{c}").unwrap();
        }
        summary.push('\n');
        models.push(model);
    }
    codec::write_file(&models_dir(&cfg.out).join("summary.csv"), summary.as_bytes())?;
    Ok(TrainOutcome { models, summary })
}

/// Loads every configured model from `models/`, checking that the stored
/// id and group match the config.
pub fn load_models(cfg: &RunConfig) -> Result<Vec<TrainedModel>> {
    cfg.models
        .iter()
        .map(|entry| {
            let path = models_dir(&cfg.out).join(format!("{}.pfm", entry.id));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "model file {} is missing; run `train` first",
                    path.display()
                )));
            }
            let model = TrainedModel::load(&path)?;
            if model.model_id != entry.id || model.group() != entry.group {
                return Err(Error::Config(format!(
                    "{} holds {} ({}), config says {} ({})",
                    path.display(),
                    model.model_id,
                    model.group().as_str(),
                    entry.id,
                    entry.group.as_str()
                )));
            }
            Ok(model)
        })
        .collect()
}

/// The crafting ensemble: `craft.models` if given, else every ensemble
/// model. Anything outside the ensemble group is refused.
pub fn select_ensemble(cfg: &RunConfig, models: Vec<TrainedModel>) -> Result<Vec<TrainedModel>> {
    let chosen: Vec<TrainedModel> = match &cfg.craft.models {
        Some(ids) => ids
            .iter()
            .map(|id| {
                models
                    .iter()
                    .find(|m| &m.model_id == id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("craft.models lists unknown model `{id}`")))
            })
            .collect::<Result<_>>()?,
        None => models.into_iter().filter(|m| m.group() == ModelGroup::Ensemble).collect(),
    };
    if let Some(m) = chosen.iter().find(|m| m.group() != ModelGroup::Ensemble) {
        return Err(Error::Config(format!(
            "model `{}` is in group {} and cannot be used for crafting",
            m.model_id,
            m.group().as_str()
        )));
    }
    Ok(chosen)
}

pub fn patch_file_name(patch_id: &str) -> String {
    format!("{patch_id}.pfp")
}

fn patch_id_for(target: usize) -> String {
    format!("patch-t{target}")
}

/// Crafts one patch per configured target against the ensemble, with
/// corpora drawn from the reservoir split.
pub fn cmd_craft(cfg: &RunConfig) -> Result<Vec<CraftResult>> {
    cfg.validate()?;
    if cfg.craft.targets.is_empty() {
        return Ok(Vec::new());
    }
    let ensemble = select_ensemble(cfg, load_models(cfg)?)?;
    if ensemble.is_empty() {
        return Err(Error::Config("no ensemble models to craft with".into()));
    }
    let split = load_splits(cfg)?;
    let (h, w) = canvas_dims(&split)?;
    let craft = cfg.craft_config(h, w, sub_seed(cfg, "craft")?)?;
    let results = craft_bundle(&ensemble, &split.reservoir, &cfg.craft.targets, &craft)?;
    let dir = patches_dir(&cfg.out);
    for r in &results {
        r.patch.save(&dir.join(patch_file_name(&r.patch.patch_id)))?;
        r.write_loss_log(&dir.join(format!("{}.loss.csv", r.patch.patch_id)))?;
    }
    Ok(results)
}

/// The crafted patches for the configured targets, in target order.
pub fn load_bundle(cfg: &RunConfig) -> Result<Vec<Patch>> {
    cfg.craft
        .targets
        .iter()
        .map(|&t| {
            let path = patches_dir(&cfg.out).join(patch_file_name(&patch_id_for(t)));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "patch file {} is missing; run `craft` first",
                    path.display()
                )));
            }
            Patch::load(&path)
        })
        .collect()
}

/// Applies every patch to every test image and writes the manifest.
pub fn cmd_gen_dataset(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let bundle = load_bundle(cfg)?;
    let split = load_splits(cfg)?;
    let (h, w) = canvas_dims(&split)?;
    let dist = cfg.transform_distribution(h, w)?;
    emit_patched_dataset(&split.test, &bundle, &dist, sub_seed(cfg, "gen-dataset")?, &dataset_dir(&cfg.out))
}

/// Scores every model on the test split and writes the report files.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let models = load_models(cfg)?;
    let bundle = load_bundle(cfg)?;
    let split = load_splits(cfg)?;
    let (h, w) = canvas_dims(&split)?;
    let dist = cfg.transform_distribution(h, w)?;
    let opts = BenchmarkOptions {
        k_list: cfg.k.clone(),
        seed: sub_seed(cfg, "eval")?,
        exclude_target_class: cfg.eval.exclude_target_class,
    };
    let report = run_benchmark(&models, &bundle, &split.test, &dist, &opts)?;
    let dir = report_dir(&cfg.out);
    report.save_csv(&dir.join("report.csv"))?;
    codec::write_file(&dir.join("clean_vs_robust.csv"), report.clean_vs_robust_csv().as_bytes())?;
    codec::write_file(&dir.join("table.txt"), render_report(&report).as_bytes())?;
    Ok(report)
}

/// Group table followed by the correlation block.
pub fn render_report(report: &EvalReport) -> String {
    format!("{}\nPearson correlations across models\n{}", report.table(), report.correlation_block())
}

/// Re-renders the table of an existing `report/report.csv`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let path = report_dir(&cfg.out).join("report.csv");
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run `eval` first", path.display())));
    }
    Ok(render_report(&EvalReport::load_csv(&path)?))
}
