//! Resolved settings for each subcommand. A JSON config file fills in
//! values first, command-line flags override it, and the seed falls back to
//! `PTSTAB_SEED` when neither sets one.

use std::path::{Path, PathBuf};

use ptstab_core::analysis::BenchConfig;
use ptstab_core::dataset::DatasetConfig;
use ptstab_core::operator::{Activation, Architecture, TimeEncoding, TrainConfig};
use ptstab_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "PTSTAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    #[default]
    Kernel,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    OpenLoop,
    #[default]
    Analytic,
    NoKernel,
    NoFeedback,
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TimeWarp {
    Linear,
    #[default]
    Blowup,
}

/// Reads a JSON config; unknown keys are rejected.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("config {}: {e}", p.display())))
        }
    }
}

/// Flag, then config, then `PTSTAB_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidInput(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(0),
    }
}

/// Top-level keys left out of the config hash: where files go and where
/// inputs come from do not change the numbers.
const UNHASHED: [&str; 4] = ["out", "data", "checkpoint", "run_id"];

/// First 16 hex digits of the SHA-256 of the settings' JSON form, without
/// the path keys.
pub fn config_hash<T: Serialize>(settings: &T) -> String {
    let mut value = serde_json::to_value(settings).expect("settings serialize");
    if let Some(map) = value.as_object_mut() {
        for k in UNHASHED {
            map.remove(k);
        }
    }
    let bytes = serde_json::to_vec(&value).expect("value serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

pub fn comment_line(command: &str, hash: &str) -> String {
    format!("ptstab {command} config {hash}")
}

fn space_points(dx: f64) -> Result<usize> {
    if !(dx > 0.0 && dx <= 0.5) {
        return Err(Error::InvalidInput(format!("dx = {dx} must lie in (0, 0.5]")));
    }
    let n = (1.0 / dx).round() as usize + 1;
    if ((n - 1) as f64 * dx - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("dx = {dx} does not divide [0, 1]")));
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub kind: Kind,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub name: Option<String>,
    pub dx: f64,
    pub dt: f64,
    pub horizon: f64,
    pub margin: f64,
    pub theta: f64,
    pub q: f64,
    pub stored_times: Option<usize>,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub split: f64,
    pub amplitude_low: f64,
    pub amplitude_high: f64,
    pub jobs: usize,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            kind: Kind::Kernel,
            samples: None,
            seed: None,
            out: PathBuf::from("data"),
            name: None,
            dx: 0.05,
            dt: d.dt,
            horizon: d.horizon,
            margin: d.margin,
            theta: d.theta,
            q: d.q,
            stored_times: None,
            sigma_low: d.sigma_low,
            sigma_high: d.sigma_high,
            split: d.split_fraction,
            amplitude_low: d.amplitude_low,
            amplitude_high: d.amplitude_high,
            jobs: 0,
        }
    }
}

impl GenDataSettings {
    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let base = match self.kind {
            Kind::Kernel => DatasetConfig::default(),
            Kind::Feedback => DatasetConfig::feedback_default(),
        };
        Ok(DatasetConfig {
            name: self.name.clone().unwrap_or(base.name),
            out_dir: self.out.clone(),
            samples: self.samples.unwrap_or(base.samples),
            sigma_low: self.sigma_low,
            sigma_high: self.sigma_high,
            seed: self.seed.unwrap_or(0),
            space_points: space_points(self.dx)?,
            dt: self.dt,
            horizon: self.horizon,
            margin: self.margin,
            theta: self.theta,
            q: self.q,
            stored_times: self.stored_times.unwrap_or(base.stored_times),
            split_fraction: self.split,
            amplitude_low: self.amplitude_low,
            amplitude_high: self.amplitude_high,
            jobs: self.jobs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSettings {
    pub width: usize,
    pub depth: usize,
    pub p: usize,
    pub activation: Activation,
    pub time_encoding: TimeWarp,
}

impl Default for ArchSettings {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            width: a.branch_hidden[0],
            depth: a.branch_hidden.len(),
            p: a.p,
            activation: a.activation,
            time_encoding: TimeWarp::Blowup,
        }
    }
}

impl ArchSettings {
    pub fn architecture(&self, horizon: f64) -> Result<Architecture> {
        if self.width == 0 || self.p == 0 {
            return Err(Error::InvalidInput("width and p must be positive".into()));
        }
        Ok(Architecture {
            branch_hidden: vec![self.width; self.depth],
            trunk_hidden: vec![self.width; self.depth],
            p: self.p,
            activation: self.activation,
            time_encoding: match self.time_encoding {
                TimeWarp::Linear => TimeEncoding::Linear,
                TimeWarp::Blowup => TimeEncoding::Blowup { horizon },
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub kind: Option<Kind>,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub validation_fraction: Option<f64>,
    pub arch: ArchSettings,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kind: None,
            data: PathBuf::from("data"),
            out: None,
            seed: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.learning_rate,
            final_lr: t.final_learning_rate,
            validation_fraction: None,
            arch: ArchSettings::default(),
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, split: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            final_learning_rate: self.final_lr,
            seed: self.seed.unwrap_or(0),
            validation_fraction: self.validation_fraction.unwrap_or(split),
            ..TrainConfig::default()
        }
    }
}

/// Scenario shared by `simulate` and `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSettings {
    pub sigma: f64,
    pub horizon: f64,
    pub margin: f64,
    pub theta: f64,
    pub q: f64,
    pub dx: f64,
    pub dt: f64,
    pub amplitude: f64,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self { sigma: 3.3, horizon: 8.0, margin: 0.4, theta: 1.0, q: 1.0, dx: 0.05, dt: 6.25e-4, amplitude: 10.25 }
    }
}

impl ScenarioSettings {
    pub fn space_points(&self) -> Result<usize> {
        space_points(self.dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub controller: ControllerKind,
    /// Controller under the disturbance when `controller` is `perturbed`.
    pub base: ControllerKind,
    pub checkpoint: Option<PathBuf>,
    pub epsilon: f64,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub run_id: Option<String>,
    pub scenario: ScenarioSettings,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            controller: ControllerKind::Analytic,
            base: ControllerKind::Analytic,
            checkpoint: None,
            epsilon: 0.0,
            seed: None,
            out: PathBuf::from("runs"),
            run_id: None,
            scenario: ScenarioSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub quick: bool,
    pub epsilon_scaling: bool,
    pub checkpoint: Option<PathBuf>,
    pub data: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub scenario: ScenarioSettings,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            quick: false,
            epsilon_scaling: false,
            checkpoint: None,
            data: Vec::new(),
            seed: None,
            out: PathBuf::from("verify"),
            scenario: ScenarioSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub bench: BenchConfig,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { checkpoint: PathBuf::from("checkpoints/kernel"), out: PathBuf::from("bench"), bench: BenchConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dx_must_divide_unit_interval() {
        assert_eq!(space_points(0.05).unwrap(), 21);
        assert_eq!(space_points(0.005).unwrap(), 201);
        assert!(space_points(0.3).is_err());
        assert!(space_points(0.0).is_err());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = SimulateSettings::default();
        let b = SimulateSettings { epsilon: 0.1, ..a.clone() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
        let c = SimulateSettings { out: "elsewhere".into(), ..a.clone() };
        assert_eq!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sigma_typo": 3}"#).unwrap();
        assert!(load_config::<SimulateSettings>(Some(&p)).is_err());
        std::fs::write(&p, r#"{"epsilon": 0.5, "scenario": {"sigma": 2.5}}"#).unwrap();
        let s: SimulateSettings = load_config(Some(&p)).unwrap();
        assert_eq!(s.epsilon, 0.5);
        assert_eq!(s.scenario.sigma, 2.5);
        assert_eq!(s.scenario.horizon, 8.0);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some(4)).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(4)).unwrap(), 4);
    }
}
