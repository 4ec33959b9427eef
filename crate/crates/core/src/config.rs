//! Declarative run description stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::scalar::DType;
use crate::training::{PipelineSpec, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural gratings; see [`data::make_toy_dataset`].
    Toy {
        #[serde(default = "toy_classes")]
        classes: usize,
        per_class: usize,
        val_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// The six CIFAR-10 binary batch files; the test batch validates.
    Cifar10 {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_per_class: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Headered raw files for training and validation.
    Raw { train: PathBuf, val: PathBuf },
}

fn toy_classes() -> usize {
    10
}

impl DataSource {
    /// Paths are resolved against `base`, the directory of the config file.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match self {
            DataSource::Toy {
                classes,
                per_class,
                val_per_class,
                seed,
            } => Ok((
                data::make_toy_dataset(*classes, *per_class, *seed)?,
                data::make_toy_dataset(*classes, *val_per_class, seed.wrapping_add(1))?,
            )),
            DataSource::Cifar10 {
                dir,
                train_per_class,
                test_limit,
            } => {
                let dir = resolve(dir);
                if !dir.is_dir() {
                    return Err(Error::config(format!("data.dir {} is not a directory", dir.display())));
                }
                let (train, mut test) = data::load_cifar10_binary(&dir)?;
                let train = match train_per_class {
                    Some(k) => train.balanced_subset(*k),
                    None => train,
                };
                if let Some(l) = test_limit {
                    test.images.truncate(*l);
                }
                Ok((train, test))
            }
            DataSource::Raw { train, val } => {
                let (t, v) = (resolve(train), resolve(val));
                for (field, p) in [("data.train", &t), ("data.val", &v)] {
                    if !p.is_file() {
                        return Err(Error::config(format!("{field} {} does not exist", p.display())));
                    }
                }
                Ok((data::load_raw_labeled(&t)?, data::load_raw_labeled(&v)?))
            }
        }
    }
}

fn default_eval_batch() -> usize {
    256
}
fn default_threads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: default_eval_batch(),
            threads: default_threads(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Filled from the training split on first use, then reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        match raw.get("schema_version").map(|v| v.as_integer()) {
            None => return Err(Error::config("schema_version is missing")),
            Some(Some(v)) if v == SCHEMA_VERSION as i64 => {}
            Some(Some(v)) => {
                return Err(Error::config(format!(
                    "schema_version {v} is not supported; this build reads version {SCHEMA_VERSION}"
                )))
            }
            Some(None) => return Err(Error::config("schema_version must be an integer")),
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 || self.eval.threads == 0 {
            return Err(Error::config("eval.batch_size and eval.threads must be at least 1"));
        }
        match &self.data {
            DataSource::Toy { classes, .. } if *classes != self.network.classes => Err(Error::config(format!(
                "data.classes = {classes} disagrees with network.classes = {}",
                self.network.classes
            ))),
            DataSource::Toy { per_class: 0, .. } | DataSource::Toy { val_per_class: 0, .. } => {
                Err(Error::config("data.per_class and data.val_per_class must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// A small toy-data run suitable as a template.
    pub fn example() -> Self {
        use crate::network::{ShortKind, Shortened};
        let mut s = Shortened::new("1-1-2", ShortKind::Reset);
        s.width = 4;
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dtype: DType::F32,
            out_dir: default_out(),
            data: DataSource::Toy {
                classes: 10,
                per_class: 20,
                val_per_class: 5,
                seed: 0,
            },
            network: s.config().expect("template network"),
            train: TrainConfig {
                batch_size: 32,
                eval_every: 10,
                log_every: 5,
                ..TrainConfig::default()
            },
            pipeline: PipelineSpec::single(20),
            eval: EvalConfig::default(),
            normalization: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips() {
        let cfg = RunConfig::example();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn schema_version_is_enforced() {
        let text = RunConfig::example().to_toml().unwrap();
        let old = text.replace("schema_version = 1", "schema_version = 0");
        let e = RunConfig::from_toml(&old).unwrap_err().to_string();
        assert!(e.contains("schema_version 0"), "{e}");
        let missing = text.replace("schema_version = 1\n", "");
        assert!(RunConfig::from_toml(&missing).is_err());
    }

    #[test]
    fn errors_point_at_lines_and_fields() {
        let text = RunConfig::example().to_toml().unwrap();
        let bad = text.replace("batch_size = 32", "batch_size = \"many\"");
        let e = RunConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.contains("line") && e.contains("batch_size"), "{e}");
        let unknown = text.replace("batch_size = 32", "batch_sise = 32");
        let e = RunConfig::from_toml(&unknown).unwrap_err().to_string();
        assert!(e.contains("batch_sise"), "{e}");
    }
}
