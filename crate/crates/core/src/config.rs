//! TOML run configuration shared by every pipeline command.
//!
//! Unknown keys are rejected everywhere and no value ever defaults to
//! wall-clock entropy: the top-level `seed` and every model `seed` must be
//! written down.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crafting::{BatchSize, CraftConfig};
use crate::datasets::Arrangement;
use crate::error::{Error, Result};
use crate::nn::{Head, ModelGroup, TrainConfig};
use crate::patchops::{default_trans_bound, TransformDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; 0 picks one per core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    pub data: DataConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
    pub craft: CraftSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

fn default_contrast() -> [f32; 2] {
    crate::datasets::DEFAULT_CONTRAST
}

fn default_k() -> Vec<usize> {
    vec![1, 3, 5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedural glyph images.
    Shapes {
        classes: usize,
        per_class: usize,
        /// `[channels, height, width]`.
        image: [usize; 3],
        noise_std: f32,
        #[serde(default)]
        arrangement: Arrangement,
        /// Range of per-glyph contrast.
        #[serde(default = "default_contrast")]
        contrast: [f32; 2],
        test_n: usize,
    },
    /// An IDX image/label file pair; relative paths resolve against the
    /// config file's directory.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_n: usize,
    },
}

impl DataConfig {
    pub fn test_n(&self) -> usize {
        match self {
            DataConfig::Shapes { test_n, .. } | DataConfig::Idx { test_n, .. } => *test_n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub group: ModelGroup,
    /// Output channels of each conv/relu/pool block.
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub head: Head,
    pub seed: u64,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CraftSection {
    pub targets: Vec<usize>,
    pub learning_rate: f32,
    pub epochs: usize,
    pub corpus_size: usize,
    pub patch_side: usize,
    #[serde(default = "default_rot_bound")]
    pub rot_bound: f64,
    /// Defaults to the largest shift that keeps a rotated patch on the
    /// canvas.
    pub trans_bound: Option<f64>,
    /// Samples per update; omitted means one update per epoch.
    pub batch_size: Option<usize>,
    #[serde(default = "yes")]
    pub clamp_each_update: bool,
    /// Crafting ensemble; defaults to every model in the ensemble group.
    pub models: Option<Vec<String>>,
}

fn default_rot_bound() -> f64 {
    std::f64::consts::PI / 8.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Drop test images whose true label is the patch target.
    #[serde(default)]
    pub exclude_target_class: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Parses `path`, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataConfig::Idx { images, labels, .. } = &mut cfg.data {
            *images = base.join(&*images);
            *labels = base.join(&*labels);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("`seed` is required (set it in the config or pass --seed)".into()))
    }

    /// Checks everything that does not need the data on disk.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::Config("`k` must list positive ranks".into()));
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("model id `{}` appears twice", w[0])));
        }
        for m in &self.models {
            let ok = !m.id.is_empty() && m.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok || m.id.starts_with('.') {
                return Err(Error::Config(format!("model id `{}` must be [A-Za-z0-9._-]", m.id)));
            }
            if m.channels.is_empty() || m.channels.contains(&0) || m.kernel == 0 {
                return Err(Error::Config(format!("model `{}` needs positive channels and kernel", m.id)));
            }
        }
        self.train_config(0).validate().map_err(as_config("train"))?;
        if let Some(listed) = &self.craft.models {
            for id in listed {
                let entry = self
                    .models
                    .iter()
                    .find(|m| &m.id == id)
                    .ok_or_else(|| Error::Config(format!("craft.models lists unknown model `{id}`")))?;
                if entry.group != ModelGroup::Ensemble {
                    return Err(Error::Config(format!(
                        "craft.models lists `{id}`, which is in group {}; only ensemble models may craft",
                        entry.group.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
        }
    }

    /// Transform distribution on an `height x width` canvas.
    pub fn transform_distribution(&self, height: usize, width: usize) -> Result<TransformDistribution> {
        let c = &self.craft;
        let trans = c
            .trans_bound
            .unwrap_or_else(|| default_trans_bound(height, width, c.patch_side));
        TransformDistribution::new(c.rot_bound, trans).map_err(as_config("craft"))
    }

    pub fn craft_config(&self, height: usize, width: usize, seed: u64) -> Result<CraftConfig> {
        let c = &self.craft;
        let cfg = CraftConfig {
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            corpus_size: c.corpus_size,
            patch_side: c.patch_side,
            dist: self.transform_distribution(height, width)?,
            batch_size: c.batch_size.map_or(BatchSize::Full, BatchSize::Samples),
            clamp_each_update: c.clamp_each_update,
            seed,
        };
        cfg.validate().map_err(as_config("craft"))?;
        Ok(cfg)
    }
}

fn as_config(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidArgument(m) => Error::Config(format!("[{section}] {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
k = [1, 5]

[data]
source = "shapes"
classes = 4
per_class = 10
image = [1, 16, 16]
noise_std = 0.1
test_n = 8

[train]
learning_rate = 0.1
epochs = 2
batch_size = 8

[[models]]
id = "a"
group = "ENSEMBLE"
channels = [4]
seed = 1

[[models]]
id = "b"
group = "HELD_OUT_STANDARD"
channels = [6]
seed = 2

[craft]
targets = [1]
learning_rate = 1.0
epochs = 5
corpus_size = 3
patch_side = 4
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(BASE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.k, vec![1, 5]);
        assert_eq!(cfg.threads, 0);
        assert_eq!(cfg.models[1].group, ModelGroup::HeldOutStandard);
        assert_eq!(cfg.models[0].kernel, 3);
        assert!(cfg.craft.clamp_each_update);
        let d = cfg.transform_distribution(12, 12).unwrap();
        assert_eq!(d.trans_bound, default_trans_bound(12, 12, 4));
        assert_eq!(d.rot_bound, std::f64::consts::PI / 8.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASE.replace("learning_rate = 0.1", "lerning_rate = 0.1");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("lerning_rate"), "{err}");
    }

    #[test]
    fn seed_must_be_explicit() {
        let text = BASE.replace("seed = 3\n", "");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("seed")));
        let text = BASE.replace("seed = 2\n", "");
        assert!(RunConfig::from_toml(&text).unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn held_out_model_cannot_craft() {
        let text = BASE.replace("patch_side = 4", "patch_side = 4\nmodels = [\"a\", \"b\"]");
        let err = RunConfig::from_toml(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("`b`") && err.contains("HELD_OUT_STANDARD"), "{err}");
    }

    #[test]
    fn duplicate_model_ids_are_rejected() {
        let text = BASE.replace("id = \"b\"", "id = \"a\"");
        assert!(RunConfig::from_toml(&text).unwrap().validate().is_err());
    }
}
