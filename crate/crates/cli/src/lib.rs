//! Command-line front end: `gen-data`, `train`, `simulate`, `verify`, `bench`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure
//! or failed check, 3 I/O or corrupt files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod commands;
pub mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ptstab_core::operator::Activation;
use ptstab_core::{Error, Result};

use settings::*;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Domain(_) => 1,
        Error::Convergence { .. } | Error::Stability(_) | Error::Numeric(_) | Error::Divergence { .. } => 2,
        Error::Corruption { .. } | Error::Format(_) | Error::Io { .. } | Error::Json(_) => 3,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ptstab", version, about = "Prescribed-time boundary stabilization with neural-operator gains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a kernel or feedback training corpus.
    GenData(GenDataArgs),
    /// Train a neural operator on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Run the plant under one controller and write state, scalar and stability CSVs.
    Simulate(SimulateArgs),
    /// Run the check suite and print pass/fail per criterion.
    Verify(VerifyArgs),
    /// Time the analytic kernel solve against the surrogate.
    Bench(BenchArgs),
}

macro_rules! merge {
    ($dst:expr, $($field:ident),+ from $src:expr) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })+
    };
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Coefficient samples (kernel) or rollouts (feedback).
    #[arg(long = "n", visible_alias = "samples")]
    pub samples: Option<usize>,
    /// Falls back to PTSTAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File stem of the manifest and blobs.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub dx: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Prescribed horizon T.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Trajectories stop at T - margin.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    /// Times stored per trajectory.
    #[arg(long)]
    pub stored_times: Option<usize>,
    #[arg(long)]
    pub sigma_low: Option<f64>,
    #[arg(long)]
    pub sigma_high: Option<f64>,
    /// Validation fraction recorded in the manifest.
    #[arg(long)]
    pub split: Option<f64>,
    /// Lower bound of initial amplitudes a in a x (1 - x), feedback corpora.
    #[arg(long)]
    pub amplitude_low: Option<f64>,
    #[arg(long)]
    pub amplitude_high: Option<f64>,
    /// Worker threads; 0 uses every logical core.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl GenDataArgs {
    pub fn settings(&self) -> Result<GenDataSettings> {
        let mut s: GenDataSettings = load_config(self.config.as_deref())?;
        merge!(s, kind, out, dx, dt, horizon, margin, theta, q, sigma_low, sigma_high, split, amplitude_low, amplitude_high, jobs from self);
        if self.samples.is_some() {
            s.samples = self.samples;
        }
        if self.name.is_some() {
            s.name = self.name.clone();
        }
        if self.stored_times.is_some() {
            s.stored_times = self.stored_times;
        }
        s.seed = Some(resolve_seed(self.seed, s.seed)?);
        Ok(s)
    }
}

fn parse_activation(v: &str) -> std::result::Result<Activation, String> {
    match v {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        _ => Err(format!("unknown activation {v:?}; use tanh or relu")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected corpus kind; also picks the manifest inside a directory.
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Dataset manifest, or a directory holding one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path stem; defaults to checkpoints/<kind>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Falls back to PTSTAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial Adam step size.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Step size at the last epoch; the decay is geometric.
    #[arg(long)]
    pub final_lr: Option<f64>,
    /// Overrides the split stored in the manifest.
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Hidden width of branch and trunk.
    #[arg(long)]
    pub width: Option<usize>,
    /// Hidden layers of branch and trunk.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Latent dimension shared by branch and trunk.
    #[arg(long)]
    pub p: Option<usize>,
    /// tanh or relu.
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    /// Time input of the trunk.
    #[arg(long, value_enum)]
    pub time_encoding: Option<TimeWarp>,
}

impl TrainArgs {
    pub fn settings(&self) -> Result<TrainSettings> {
        let mut s: TrainSettings = load_config(self.config.as_deref())?;
        merge!(s, data, epochs, batch_size, lr, final_lr from self);
        merge!(s.arch, width, depth, p, activation, time_encoding from self);
        if self.kind.is_some() {
            s.kind = self.kind;
        }
        if self.out.is_some() {
            s.out = self.out.clone();
        }
        if self.validation_fraction.is_some() {
            s.validation_fraction = self.validation_fraction;
        }
        s.seed = Some(resolve_seed(self.seed, s.seed)?);
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Coefficient parameter of lambda.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Prescribed horizon T.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Runs stop at T - margin.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub dx: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Initial state a x (1 - x).
    #[arg(long)]
    pub amplitude: Option<f64>,
}

impl ScenarioArgs {
    fn apply(&self, s: &mut ScenarioSettings) {
        merge!(s, sigma, horizon, margin, theta, q, dx, dt, amplitude from self);
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerKind>,
    /// Controller under the disturbance when --controller is perturbed.
    #[arg(long, value_enum)]
    pub base: Option<ControllerKind>,
    /// Operator checkpoint for no-kernel and no-feedback.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Disturbance bound for the perturbed controller.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Disturbance seed; falls back to PTSTAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File prefix; defaults to the controller name.
    #[arg(long)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

impl SimulateArgs {
    pub fn settings(&self) -> Result<SimulateSettings> {
        let mut s: SimulateSettings = load_config(self.config.as_deref())?;
        merge!(s, controller, base, epsilon, out from self);
        if self.checkpoint.is_some() {
            s.checkpoint = self.checkpoint.clone();
        }
        if self.run_id.is_some() {
            s.run_id = self.run_id.clone();
        }
        self.scenario.apply(&mut s.scenario);
        s.seed = Some(resolve_seed(self.seed, s.seed)?);
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skip the disturbance sweep unless --epsilon-scaling asks for it.
    #[arg(long)]
    pub quick: bool,
    /// Run the disturbance sweep and write its table.
    #[arg(long)]
    pub epsilon_scaling: bool,
    /// Kernel or feedback checkpoint to check as well.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifests or directories whose checksums to verify.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Disturbance seed; falls back to PTSTAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

impl VerifyArgs {
    pub fn settings(&self) -> Result<VerifySettings> {
        let mut s: VerifySettings = load_config(self.config.as_deref())?;
        s.quick |= self.quick;
        s.epsilon_scaling |= self.epsilon_scaling;
        if self.checkpoint.is_some() {
            s.checkpoint = self.checkpoint.clone();
        }
        if !self.data.is_empty() {
            s.data = self.data.clone();
        }
        if let Some(o) = &self.out {
            s.out = o.clone();
        }
        self.scenario.apply(&mut s.scenario);
        s.seed = Some(resolve_seed(self.seed, s.seed)?);
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Kernel checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated grid spacings.
    #[arg(long, value_delimiter = ',')]
    pub dx: Vec<f64>,
    /// Timed repetitions per row (median reported).
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Prescribed horizon T.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Time step of the solve and of the surrogate queries.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BenchArgs {
    pub fn settings(&self) -> Result<BenchSettings> {
        let mut s: BenchSettings = load_config(self.config.as_deref())?;
        merge!(s, checkpoint, out from self);
        merge!(s.bench, sigma, horizon, margin, dt from self);
        if let Some(r) = self.reps {
            s.bench.repetitions = r;
        }
        if !self.dx.is_empty() {
            s.bench.dx = self.dx.clone();
        }
        Ok(s)
    }
}

fn dispatch(command: &Command) -> Result<i32> {
    match command {
        Command::GenData(a) => commands::gen_data(&a.settings()?),
        Command::Train(a) => {
            let s = a.settings()?;
            Ok(commands::train(&s, &config_hash(&s))?.0)
        }
        Command::Simulate(a) => {
            let s = a.settings()?;
            let seed = s.seed.unwrap_or(0);
            Ok(commands::simulate(&s, seed, &config_hash(&s))?.0)
        }
        Command::Verify(a) => {
            let s = a.settings()?;
            let seed = s.seed.unwrap_or(0);
            Ok(commands::verify(&s, seed, &config_hash(&s))?.0)
        }
        Command::Bench(a) => {
            let s = a.settings()?;
            Ok(commands::bench(&s, &config_hash(&s))?.0)
        }
    }
}

/// Parses `args` and runs the subcommand; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 1);
        assert_eq!(exit_code(&Error::Divergence { epoch: 1, loss: f64::NAN }), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epsilon": 0.5, "seed": 3, "scenario": {"sigma": 2.5, "margin": 0.8}}"#).unwrap();
        let cli = Cli::try_parse_from([
            "ptstab", "simulate", "--config", p.to_str().unwrap(), "--sigma", "3.0", "--controller", "perturbed",
        ])
        .unwrap();
        let Command::Simulate(a) = cli.command else { panic!() };
        let s = a.settings().unwrap();
        assert_eq!(s.scenario.sigma, 3.0);
        assert_eq!(s.scenario.margin, 0.8);
        assert_eq!(s.epsilon, 0.5);
        assert_eq!(s.seed, Some(3));
        assert_eq!(s.controller, ControllerKind::Perturbed);
    }

    #[test]
    fn bench_dx_list() {
        let cli = Cli::try_parse_from(["ptstab", "bench", "--dx", "0.01,0.005", "--reps", "7"]).unwrap();
        let Command::Bench(a) = cli.command else { panic!() };
        let s = a.settings().unwrap();
        assert_eq!(s.bench.dx, vec![0.01, 0.005]);
        assert_eq!(s.bench.repetitions, 7);
    }

    #[test]
    fn gen_data_flags() {
        let cli = Cli::try_parse_from(["ptstab", "gen-data", "--kind", "feedback", "--n", "12", "--T", "6", "--seed", "4"])
            .unwrap();
        let Command::GenData(a) = cli.command else { panic!() };
        let s = a.settings().unwrap();
        assert_eq!(s.kind, Kind::Feedback);
        assert_eq!(s.samples, Some(12));
        assert_eq!(s.horizon, 6.0);
        assert_eq!(s.dataset_config().unwrap().seed, 4);
    }
}
