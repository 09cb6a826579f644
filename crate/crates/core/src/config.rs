//! Run configuration: one TOML file with a top-level seed and one section
//! per module. Every section falls back to its defaults and rejects
//! unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::dataset::cfar::CfarConfig;
use crate::dataset::DatasetSpec;
use crate::eval::EocSetting;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid [{section}]: {msg}")]
    Invalid { section: &'static str, msg: String },
}

fn invalid(section: &'static str) -> impl Fn(String) -> ConfigError {
    move |msg| ConfigError::Invalid { section, msg }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load chips from this directory instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load: Option<PathBuf>,
    /// Detector for loaded chips that come without a mask.
    pub cfar: CfarConfig,
    pub synthetic: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seeds of the perturbation draws in sweeps.
    pub seeds: Vec<u64>,
    pub gaussian_snr_db: Vec<f64>,
    pub replace_fractions: Vec<f64>,
    pub occlusion_sizes: Vec<usize>,
    pub swap_scenes: Vec<u32>,
    /// Counts shadow pixels as target in the Shapley region.
    pub shadow_is_target: bool,
    /// Test chips used for Shapley values (0: all).
    pub shapley_chips: usize,
    pub saliency_chips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            gaussian_snr_db: vec![10.0, 5.0, 0.0, -5.0, -10.0],
            replace_fractions: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            occlusion_sizes: vec![5, 10, 15],
            swap_scenes: vec![10, 11, 12],
            shadow_is_target: false,
            shapley_chips: 0,
            saliency_chips: 8,
        }
    }
}

impl EvalConfig {
    /// The configured sweep for one setting name.
    pub fn settings(&self, name: &str) -> Result<Vec<EocSetting>, ConfigError> {
        let err = invalid("eval");
        let v: Vec<EocSetting> = match name {
            "gaussian" => self.gaussian_snr_db.iter().map(|&snr_db| EocSetting::GaussianNoise { snr_db }).collect(),
            "replace" => self.replace_fractions.iter().map(|&fraction| EocSetting::RandomReplace { fraction }).collect(),
            "occlusion" => self.occlusion_sizes.iter().map(|&size| EocSetting::Occlusion { size }).collect(),
            "scene" => vec![EocSetting::SceneSwap {
                scenes: self.swap_scenes.clone(),
            }],
            other => return Err(err(format!("no test-time sweep named {other:?}"))),
        };
        for s in &v {
            s.validate().map_err(|e| err(e.to_string()))?;
        }
        Ok(v)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("eval")("seeds must not be empty".into()));
        }
        for name in ["gaussian", "replace", "occlusion", "scene"] {
            self.settings(name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutConfig {
    pub dir: PathBuf,
}

impl Default for OutConfig {
    fn default() -> Self {
        Self { dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: OutConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.set_seed(c.seed);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Read {
                path: path.display().to_string(),
                msg: m.replace('\n', " "),
            },
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Sets the run seed and every sub-seed taken from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synthetic.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.load.is_none() {
            self.data.synthetic.validate().map_err(|e| invalid("data")(e.to_string()))?;
            let d = &self.data.synthetic;
            if d.image_size != self.model.image_size || d.num_classes != self.model.num_classes {
                return Err(invalid("model")(format!(
                    "model expects {} classes of {}×{} but data.synthetic has {} of {}×{}",
                    self.model.num_classes,
                    self.model.image_size,
                    self.model.image_size,
                    d.num_classes,
                    d.image_size,
                    d.image_size
                )));
            }
        }
        self.augment.validate().map_err(|e| invalid("augment")(e.to_string()))?;
        self.model.validate().map_err(|e| invalid("model")(e.to_string()))?;
        self.loss.validate().map_err(invalid("loss"))?;
        self.train.validate().map_err(|e| invalid("train")(e.to_string()))?;
        self.eval.validate()?;
        if self.out.dir.as_os_str().is_empty() {
            return Err(invalid("out")("dir must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        c.data.load = Some("chips".into());
        c.loss.beta = 0.0;
        c.data.synthetic.shadow_attenuation = Some(0.5);
        c.eval.gaussian_snr_db.push(f64::INFINITY);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model]\nwidth = 3", "[train.optimizer]\nmomentum = 0.9", "[data.synthetic]\nseed = 3"] {
            assert!(matches!(RunConfig::from_toml(text), Err(ConfigError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn seed_reaches_every_consumer() {
        let c = RunConfig::from_toml("seed = 9").unwrap();
        assert_eq!((c.data.synthetic.seed, c.train.seed), (9, 9));
    }

    #[test]
    fn shipped_example_parses_and_validates() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/example.toml");
        let c = RunConfig::load(&path).unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_section() {
        let mut c = RunConfig::default();
        c.model.image_size = 32;
        assert!(c.validate().unwrap_err().to_string().contains("[model]"));
        let mut c = RunConfig::default();
        c.eval.replace_fractions = vec![0.5];
        assert!(c.validate().unwrap_err().to_string().contains("[eval]"));
        let mut c = RunConfig::default();
        c.data.synthetic.train_per_class = 0;
        c.data.synthetic.test_per_class = 0;
        assert!(c.validate().unwrap_err().to_string().contains("[data]"));
    }
}
