use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sca_core::attacks::{ApgdParams, AttackKind};
use sca_core::nn::{ModelSpec, TrainConfig};
use sca_core::sca::ScaHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mlp,
    Sca,
    Mlp5,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Mlp => "mlp",
            Preset::Sca => "sca",
            Preset::Mlp5 => "mlp5",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Fmnist,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub margin: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            samples: 600,
            dim: 10,
            classes: 3,
            margin: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSettings {
    pub kind: AttackKind,
    pub steps: usize,
    pub restarts: usize,
    /// Step size as a multiple of ε.
    pub step_ratio: f64,
    pub seed: u64,
    pub apgd: ApgdParams,
    /// Test examples attacked; all when absent.
    pub samples: Option<usize>,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            kind: AttackKind::ApgdCeDlr,
            steps: 100,
            restarts: 1,
            step_ratio: 2.0,
            seed: 0,
            apgd: ApgdParams::default(),
            samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvTrainSettings {
    pub epsilon: f64,
    pub steps: usize,
    pub step_ratio: f64,
}

impl Default for AdvTrainSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            steps: 7,
            step_ratio: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSettings {
    pub epsilons: Vec<f64>,
    pub samples: usize,
    pub keep_matrices: bool,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            samples: 1000,
            keep_matrices: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub steps: Vec<usize>,
    pub epsilon: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4, 8, 16],
            epsilon: 0.05,
        }
    }
}

/// Reductions applied by `--desk-scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskScale {
    pub train: usize,
    pub val: usize,
    pub max_epochs: usize,
    pub attack_steps: usize,
    pub attack_samples: usize,
    pub analysis_samples: usize,
}

impl Default for DeskScale {
    fn default() -> Self {
        Self {
            train: 10_000,
            val: 2_000,
            max_epochs: 20,
            attack_steps: 25,
            attack_samples: 1000,
            analysis_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetName,
    pub blobs: BlobsConfig,
    /// Seed of the train/validation shuffle, shared by all model seeds.
    pub split_seed: u64,
    pub models: Vec<Preset>,
    pub hidden: usize,
    pub width: usize,
    pub sca: ScaHyper,
    pub train: TrainConfig,
    pub epsilons: Vec<f64>,
    pub attack: AttackSettings,
    pub adv_train: AdvTrainSettings,
    pub analysis: AnalysisSettings,
    pub tsweep: SweepSettings,
    pub seeds: Vec<u64>,
    pub out: String,
    pub desk_scale: bool,
    pub desk: DeskScale,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: DatasetName::Fmnist,
            blobs: BlobsConfig::default(),
            split_seed: 0,
            models: vec![Preset::Mlp, Preset::Sca],
            hidden: 384,
            width: 384,
            sca: ScaHyper::default(),
            train: TrainConfig::default(),
            epsilons: CLEAN_GRID.to_vec(),
            attack: AttackSettings::default(),
            adv_train: AdvTrainSettings::default(),
            analysis: AnalysisSettings::default(),
            tsweep: SweepSettings::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out: "runs".into(),
            desk_scale: false,
            desk: DeskScale::default(),
        }
    }
}

/// Budgets for clean-trained image models.
pub const CLEAN_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.125, 0.15, 0.2];
/// Budgets for adversarially trained image models.
pub const ADV_GRID: [f64; 6] = [0.0, 0.2, 0.3, 0.325, 0.35, 0.375];

pub const PRESETS: [&str; 8] = [
    "mnist-clean",
    "fmnist-clean",
    "mnist-adv",
    "fmnist-adv",
    "fmnist-tsweep",
    "fmnist-corr",
    "blobs",
    "blobs-adv",
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let base = ExperimentConfig::default();
    let cfg = match name {
        "mnist-clean" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetName::Mnist,
            ..base
        },
        "fmnist-clean" => ExperimentConfig {
            name: name.into(),
            ..base
        },
        "mnist-adv" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetName::Mnist,
            epsilons: ADV_GRID.to_vec(),
            ..base
        },
        "fmnist-adv" => ExperimentConfig {
            name: name.into(),
            epsilons: ADV_GRID.to_vec(),
            ..base
        },
        "fmnist-tsweep" => ExperimentConfig {
            name: name.into(),
            models: vec![Preset::Sca],
            epsilons: vec![0.0, 0.05],
            ..base
        },
        "fmnist-corr" => ExperimentConfig {
            name: name.into(),
            models: vec![Preset::Mlp5],
            epsilons: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            analysis: AnalysisSettings {
                epsilons: vec![0.0, 0.05, 0.1, 0.15, 0.2],
                ..AnalysisSettings::default()
            },
            ..base
        },
        "blobs" | "blobs-adv" => ExperimentConfig {
            name: name.into(),
            dataset: DatasetName::Blobs,
            hidden: 16,
            width: 16,
            sca: ScaHyper {
                steps: 4,
                ..ScaHyper::default()
            },
            train: TrainConfig {
                batch_size: 64,
                max_epochs: 8,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            epsilons: vec![0.0, 0.5, 1.0],
            attack: AttackSettings {
                steps: 10,
                ..AttackSettings::default()
            },
            adv_train: AdvTrainSettings {
                epsilon: if name == "blobs-adv" { 1.0 } else { 0.0 },
                ..AdvTrainSettings::default()
            },
            analysis: AnalysisSettings {
                epsilons: vec![0.0, 0.5, 1.0],
                samples: 100,
                keep_matrices: false,
            },
            tsweep: SweepSettings {
                steps: vec![0, 4],
                epsilon: 0.5,
            },
            seeds: vec![0, 1],
            ..base
        },
        _ => return None,
    };
    Some(cfg)
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Parses a config file; unknown fields and type errors report line and column.
pub fn parse(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError(format!("{origin}: {e}")))
}

/// Applies `path.to.field=value` overrides. Values are parsed as JSON and fall
/// back to plain strings.
pub fn apply_overrides(cfg: ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut v = serde_json::to_value(&cfg).map_err(|e| ConfigError(e.to_string()))?;
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{item}` is not of the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut v;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| ConfigError(format!("override `{path}`: unknown field `{key}`")))?;
        }
        *slot = value;
    }
    serde_json::from_value(v).map_err(|e| ConfigError(format!("override: {e}")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.seeds.is_empty() {
            return err("seed list must not be empty".into());
        }
        if self.models.is_empty() {
            return err("model list must not be empty".into());
        }
        if self.epsilons.first() != Some(&0.0) || self.epsilons.windows(2).any(|w| !(w[0] < w[1])) {
            return err("epsilons must start at 0 and increase strictly".into());
        }
        if self.analysis.epsilons.first() != Some(&0.0) {
            return err("analysis.epsilons must start at 0".into());
        }
        if self.attack.steps == 0 || !(self.attack.step_ratio > 0.0) {
            return err("attack needs positive steps and step_ratio".into());
        }
        self.train.validate().map_err(|e| ConfigError(format!("train: {e}")))?;
        self.sca.validate().map_err(|e| ConfigError(format!("sca: {e}")))?;
        self.attack
            .apgd
            .validate()
            .map_err(|e| ConfigError(format!("attack.apgd: {e}")))?;
        for p in &self.models {
            self.model_spec(*p, 784, 10)
                .validate()
                .map_err(|e| ConfigError(format!("model {}: {e}", p.name())))?;
        }
        Ok(())
    }

    pub fn model_spec(&self, preset: Preset, input: usize, classes: usize) -> ModelSpec {
        let mut spec = match preset {
            Preset::Mlp => ModelSpec::mlp(input, self.hidden, self.width, classes),
            Preset::Sca => ModelSpec::sca(input, self.hidden, self.width, classes, self.sca),
            Preset::Mlp5 => ModelSpec::mlp5(input, classes),
        };
        if self.dataset == DatasetName::Blobs {
            spec.normalization = None;
        }
        spec
    }

    /// Training settings after desk-scale reductions.
    pub fn effective_train(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        if self.desk_scale {
            t.max_epochs = t.max_epochs.min(self.desk.max_epochs);
        }
        t
    }

    pub fn attack_steps(&self) -> usize {
        if self.desk_scale {
            self.attack.steps.min(self.desk.attack_steps)
        } else {
            self.attack.steps
        }
    }

    pub fn attack_samples(&self) -> Option<usize> {
        match (self.desk_scale, self.attack.samples) {
            (true, Some(n)) => Some(n.min(self.desk.attack_samples)),
            (true, None) => Some(self.desk.attack_samples),
            (false, s) => s,
        }
    }

    pub fn analysis_samples(&self) -> usize {
        if self.desk_scale {
            self.analysis.samples.min(self.desk.analysis_samples)
        } else {
            self.analysis.samples
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out.clear();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
