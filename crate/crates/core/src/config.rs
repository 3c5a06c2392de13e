//! Experiment configuration.
//!
//! Configuration files are TOML. Every key is optional; absent keys take
//! the defaults below, unknown keys are rejected. Command-line flags are
//! applied on top of the file through [`ConfigOverrides`].
//!
//! ```toml
//! seed = 42
//! epochs = 10
//! mode = "binary"            # binary | multilevel | float
//! learning_rate = 0.01
//! batch_size = 8
//! threshold = 0.002
//! logit_gain = 8.0
//! train_biases = true
//! topology = [784, 128, 10]
//! init = "random_signs"      # random_signs | all_negative
//! model = "noiseless"        # "noiseless", "default" or a macro-model file
//! out_dir = "out"
//! data_dir = "data/mnist"    # or the four explicit paths below
//! train_images = "..."
//! train_subset = 2000
//! debug_dump = false
//!
//! [device]                   # overrides on top of `model`
//! sigma_d2d_uS = 0.45
//!
//! [calibration]
//! rows = 64
//! cols = 64
//! cycles = 100
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::import_macro_model;
use crate::device::MacroModel;
use crate::error::{Error, Result};
use crate::mnist;
use crate::trainer::{Topology, TrainingConfig, UpdateMode, WeightInit};

/// Environment variable consulted for the MNIST directory when the config
/// names no dataset paths.
pub const DATA_DIR_ENV: &str = "FERROSIM_DATA_DIR";

pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceOverrides {
    #[serde(rename = "g_off_uS", skip_serializing_if = "Option::is_none")]
    pub g_off: Option<f64>,
    #[serde(rename = "g_on_uS", skip_serializing_if = "Option::is_none")]
    pub g_on: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<i64>,
    #[serde(rename = "sigma_d2d_uS", skip_serializing_if = "Option::is_none")]
    pub sigma_d2d: Option<f64>,
    #[serde(rename = "sigma_c2c_uS", skip_serializing_if = "Option::is_none")]
    pub sigma_c2c: Option<f64>,
}

impl DeviceOverrides {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalibration {
    rows: Option<i64>,
    cols: Option<i64>,
    cycles: Option<i64>,
}

/// The file form: everything optional, integers signed so that negative
/// values are reported as range errors rather than type errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    epochs: Option<i64>,
    mode: Option<String>,
    learning_rate: Option<f64>,
    batch_size: Option<i64>,
    threshold: Option<f64>,
    logit_gain: Option<f64>,
    train_biases: Option<bool>,
    topology: Option<Vec<i64>>,
    init: Option<WeightInit>,
    model: Option<String>,
    out_dir: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    train_subset: Option<i64>,
    test_subset: Option<i64>,
    debug_dump: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    device: Option<DeviceOverrides>,
    calibration: Option<RawCalibration>,
}

/// Values supplied on the command line; each beats the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<i64>,
    pub mode: Option<String>,
    pub model: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub train_subset: Option<i64>,
    pub test_subset: Option<i64>,
    pub cycles: Option<i64>,
}

/// Where the device macro-model comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSource {
    /// Built-in defaults (synthetic 5% sigmas).
    Default,
    /// Built-in window with both sigmas zero.
    Noiseless,
    File(PathBuf),
}

impl ModelSource {
    fn parse(s: &str) -> Self {
        match s {
            "noiseless" => Self::Noiseless,
            "default" => Self::Default,
            path => Self::File(PathBuf::from(path)),
        }
    }

    fn as_config_str(&self) -> String {
        match self {
            Self::Default => "default".into(),
            Self::Noiseless => "noiseless".into(),
            Self::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataPaths {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl DataPaths {
    fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: Some(dir.join(mnist::TRAIN_IMAGES)),
            train_labels: Some(dir.join(mnist::TRAIN_LABELS)),
            test_images: Some(dir.join(mnist::TEST_IMAGES)),
            test_labels: Some(dir.join(mnist::TEST_LABELS)),
        }
    }

    fn entries(&self) -> [(&'static str, &Option<PathBuf>); 4] {
        [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
        ]
    }

    /// All four paths, or an error naming the first one that is missing.
    pub fn require(&self) -> Result<[&Path; 4]> {
        let mut out: [&Path; 4] = [Path::new(""); 4];
        for (slot, (name, path)) in out.iter_mut().zip(self.entries()) {
            *slot = path.as_deref().ok_or_else(|| {
                Error::Config(format!(
                    "missing dataset path `{name}` (set it, `data_dir`, or {DATA_DIR_ENV})"
                ))
            })?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibrationConfig {
    pub rows: u32,
    pub cols: u32,
    pub cycles: u32,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            cycles: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    pub topology: Topology,
    pub training: TrainingConfig,
    pub model_source: ModelSource,
    pub device: DeviceOverrides,
    pub out_dir: PathBuf,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub debug_dump: bool,
    pub calibration: CalibrationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            topology: Topology::default(),
            training: TrainingConfig::default(),
            model_source: ModelSource::Default,
            device: DeviceOverrides::default(),
            out_dir: PathBuf::from("out"),
            train_subset: None,
            test_subset: None,
            debug_dump: false,
            calibration: CalibrationConfig::default(),
        }
    }
}

fn range_err(key: &str, requirement: &str, value: impl std::fmt::Display) -> Error {
    Error::Config(format!("range error: `{key}` must be {requirement}, got {value}"))
}

fn positive_int(key: &str, v: i64) -> Result<usize> {
    if v < 1 {
        return Err(range_err(key, ">= 1", v));
    }
    Ok(v as usize)
}

fn positive_u32(key: &str, v: i64) -> Result<u32> {
    if !(1..=i64::from(u32::MAX)).contains(&v) {
        return Err(range_err(key, "in [1, 2^32)", v));
    }
    Ok(v as u32)
}

fn positive_real(key: &str, v: f64) -> Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        return Err(range_err(key, "a positive finite number", v));
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Parse TOML text, apply flag overrides, fill defaults and validate.
    /// `env_data_dir` is the fallback dataset directory.
    pub fn from_toml(text: &str, overrides: &ConfigOverrides, env_data_dir: Option<&Path>) -> Result<Self> {
        let mut raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.seed = overrides.seed.or(raw.seed);
        raw.epochs = overrides.epochs.or(raw.epochs);
        raw.mode = overrides.mode.clone().or(raw.mode);
        raw.model = overrides.model.clone().or(raw.model);
        raw.out_dir = overrides.out_dir.clone().or(raw.out_dir);
        raw.train_subset = overrides.train_subset.or(raw.train_subset);
        raw.test_subset = overrides.test_subset.or(raw.test_subset);
        if let Some(c) = overrides.cycles {
            raw.calibration.get_or_insert_with(Default::default).cycles = Some(c);
        }
        Self::from_raw(raw, env_data_dir)
    }

    fn from_raw(raw: RawConfig, env_data_dir: Option<&Path>) -> Result<Self> {
        let defaults = Self::default();
        let d = defaults.training;
        let mode = match raw.mode.as_deref() {
            Some(m) => m.parse::<UpdateMode>()?,
            None => d.mode,
        };
        let training = TrainingConfig {
            learning_rate: positive_real("learning_rate", raw.learning_rate.unwrap_or(d.learning_rate))?,
            batch_size: positive_int("batch_size", raw.batch_size.unwrap_or(d.batch_size as i64))?,
            epochs: positive_int("epochs", raw.epochs.unwrap_or(d.epochs as i64))?,
            threshold: positive_real("threshold", raw.threshold.unwrap_or(d.threshold))?,
            mode,
            seed: raw.seed.unwrap_or(d.seed),
            init: raw.init.unwrap_or(d.init),
            logit_gain: positive_real("logit_gain", raw.logit_gain.unwrap_or(d.logit_gain))?,
            train_biases: raw.train_biases.unwrap_or(d.train_biases),
        };
        let topology = match raw.topology {
            Some(sizes) => {
                let sizes = sizes
                    .into_iter()
                    .map(|s| positive_int("topology", s))
                    .collect::<Result<Vec<_>>>()?;
                Topology::new(sizes).map_err(|e| Error::Config(e.to_string()))?
            }
            None => defaults.topology,
        };

        let explicit = DataPaths {
            train_images: raw.train_images,
            train_labels: raw.train_labels,
            test_images: raw.test_images,
            test_labels: raw.test_labels,
        };
        let fallback = raw
            .data_dir
            .as_deref()
            .or(env_data_dir)
            .map(DataPaths::in_dir)
            .unwrap_or_default();
        let data = DataPaths {
            train_images: explicit.train_images.or(fallback.train_images),
            train_labels: explicit.train_labels.or(fallback.train_labels),
            test_images: explicit.test_images.or(fallback.test_images),
            test_labels: explicit.test_labels.or(fallback.test_labels),
        };
        for (name, path) in data.entries() {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "dataset path `{name}` = {} does not exist",
                        p.display()
                    )));
                }
            }
        }

        let model_source = raw.model.as_deref().map(ModelSource::parse).unwrap_or(ModelSource::Default);
        if let ModelSource::File(p) = &model_source {
            if !p.exists() {
                return Err(Error::Config(format!("model file {} does not exist", p.display())));
            }
        }

        let cal = raw.calibration.unwrap_or_default();
        let cd = defaults.calibration;
        let calibration = CalibrationConfig {
            rows: positive_u32("calibration.rows", cal.rows.unwrap_or(i64::from(cd.rows)))?,
            cols: positive_u32("calibration.cols", cal.cols.unwrap_or(i64::from(cd.cols)))?,
            cycles: positive_u32("calibration.cycles", cal.cycles.unwrap_or(i64::from(cd.cycles)))?,
        };

        let config = Self {
            data,
            topology,
            training,
            model_source,
            device: raw.device.unwrap_or_default(),
            out_dir: raw.out_dir.unwrap_or(defaults.out_dir),
            train_subset: raw.train_subset.map(|n| positive_int("train_subset", n)).transpose()?,
            test_subset: raw.test_subset.map(|n| positive_int("test_subset", n)).transpose()?,
            debug_dump: raw.debug_dump.unwrap_or(false),
            calibration,
        };
        config.macro_model()?;
        Ok(config)
    }

    /// Read and validate a config file. The dataset directory falls back to
    /// `FERROSIM_DATA_DIR`.
    pub fn load(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let env_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        Self::from_toml(&text, overrides, env_dir.as_deref())
    }

    /// The macro-model after applying `[device]` overrides to the source.
    pub fn macro_model(&self) -> Result<MacroModel> {
        let base = match &self.model_source {
            ModelSource::Default => MacroModel::default(),
            ModelSource::Noiseless => MacroModel::noiseless(),
            ModelSource::File(p) => import_macro_model(p)?,
        };
        let o = &self.device;
        let levels = match o.levels {
            Some(l) => u32::try_from(l).map_err(|_| range_err("device.levels", "in [2, 8]", l))?,
            None => base.levels,
        };
        let model = MacroModel {
            g_off: o.g_off.unwrap_or(base.g_off),
            g_on: o.g_on.unwrap_or(base.g_on),
            levels,
            sigma_d2d: o.sigma_d2d.unwrap_or(base.sigma_d2d),
            sigma_c2c: o.sigma_c2c.unwrap_or(base.sigma_c2c),
        };
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(model)
    }

    /// Canonical TOML form of the effective configuration. Parsing it back
    /// yields an identical config.
    pub fn to_toml(&self) -> String {
        let t = &self.training;
        let raw = RawConfig {
            seed: Some(t.seed),
            epochs: Some(t.epochs as i64),
            mode: Some(
                match t.mode {
                    UpdateMode::Binary => "binary",
                    UpdateMode::Multilevel => "multilevel",
                    UpdateMode::Float => "float",
                }
                .into(),
            ),
            learning_rate: Some(t.learning_rate),
            batch_size: Some(t.batch_size as i64),
            threshold: Some(t.threshold),
            logit_gain: Some(t.logit_gain),
            train_biases: Some(t.train_biases),
            topology: Some(self.topology.sizes().iter().map(|&s| s as i64).collect()),
            init: Some(t.init),
            model: Some(self.model_source.as_config_str()),
            out_dir: Some(self.out_dir.clone()),
            data_dir: None,
            train_images: self.data.train_images.clone(),
            train_labels: self.data.train_labels.clone(),
            test_images: self.data.test_images.clone(),
            test_labels: self.data.test_labels.clone(),
            train_subset: self.train_subset.map(|n| n as i64),
            test_subset: self.test_subset.map(|n| n as i64),
            debug_dump: Some(self.debug_dump),
            device: (!self.device.is_empty()).then(|| self.device.clone()),
            calibration: Some(RawCalibration {
                rows: Some(i64::from(self.calibration.rows)),
                cols: Some(i64::from(self.calibration.cols)),
                cycles: Some(i64::from(self.calibration.cycles)),
            }),
        };
        toml::to_string(&raw).expect("config serialises")
    }
}
