//! Training corpora for the kernel operator and the feedback operator:
//! generation, on-disk format (JSON manifest plus little-endian `f64` blobs)
//! and seeded train/validation splits.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gamma_field, CoeffSpec, GainSchedule, TimeGrid, TriGrid};
use crate::io::{read_blob, read_json, write_blob, write_json};
use crate::kernel::{
    cfl_check, kernel_slices_at_steps, solve_kernel_trajectory, KernelKind, KernelSolverOptions,
};
use crate::operator::{FeedbackData, KernelData, OperatorData, SensorLayout};
use crate::plant::{parabolic_state, simulate, Controller};
use crate::transform::{control_gain, control_u};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    KernelPairs,
    FeedbackTriples,
}

/// `n` uniform draws from `[low, high)`.
pub fn sample_sigma(seed: u64, n: usize, low: f64, high: f64) -> Result<Vec<f64>> {
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(Error::invalid(format!("bad sigma range [{low}, {high})")));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.gen_range(low..high)).collect())
}

/// `count` step indices spread uniformly over `0..=steps`.
pub fn uniform_steps(steps: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    let mut out: Vec<usize> =
        (0..count).map(|k| ((k as f64) * steps as f64 / (count - 1) as f64).round() as usize).collect();
    out.dedup();
    out
}

/// Settings shared by both corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub name: String,
    pub out_dir: PathBuf,
    /// Coefficient samples (kernel) or rollouts (feedback).
    pub samples: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub seed: u64,
    pub space_points: usize,
    pub dt: f64,
    pub horizon: f64,
    pub margin: f64,
    pub theta: f64,
    pub q: f64,
    /// Stored times per trajectory or rollout, uniform over `[0, T - margin]`.
    pub stored_times: usize,
    pub split_fraction: f64,
    /// Initial amplitudes `a` of `a x (1 - x)` for feedback rollouts.
    pub amplitude_low: f64,
    pub amplitude_high: f64,
    /// Worker threads; 0 uses every logical core.
    pub jobs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "kernel".into(),
            out_dir: PathBuf::from("data"),
            samples: 200,
            sigma_low: 2.0,
            sigma_high: 4.0,
            seed: 0,
            space_points: 21,
            dt: 6.25e-4,
            horizon: 8.0,
            margin: 0.4,
            theta: 1.0,
            q: 1.0,
            stored_times: 17,
            split_fraction: 0.1,
            amplitude_low: 1.0,
            amplitude_high: 20.0,
            jobs: 0,
        }
    }
}

impl DatasetConfig {
    pub fn feedback_default() -> Self {
        Self { name: "feedback".into(), samples: 100, stored_times: 50, ..Self::default() }
    }

    fn validate(&self) -> Result<(TriGrid, TimeGrid)> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("dataset name must be a plain file stem"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid("split fraction must lie in (0, 1)"));
        }
        if self.stored_times == 0 {
            return Err(Error::invalid("stored_times must be >= 1"));
        }
        let grid = TriGrid::new(self.space_points)?;
        let tg = TimeGrid::new(self.dt, self.horizon, self.margin)?;
        if !cfl_check(self.theta, grid.dx(), self.dt) {
            return Err(Error::invalid(format!(
                "CFL check fails: theta dt / dx^2 = {} > 1/2",
                self.theta * self.dt / (grid.dx() * grid.dx())
            )));
        }
        Ok((grid, tg))
    }

    /// Coefficient of one sample.
    pub fn spec(&self, sigma: f64) -> Result<CoeffSpec> {
        CoeffSpec::chebyshev(sigma, self.horizon).with_constants(self.theta, self.q)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    /// Values per record.
    pub stride: usize,
    /// Field order within a record.
    pub layout: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub sigma: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: DatasetKind,
    pub name: String,
    /// Records in the blobs.
    pub sample_count: usize,
    pub sigma_range: [f64; 2],
    /// One coefficient per group (kernel sample or rollout).
    pub sigmas: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Group of each record; splits never separate a group.
    pub record_groups: Vec<usize>,
    pub space_points: usize,
    pub dx: f64,
    pub dt: f64,
    pub horizon: f64,
    pub margin: f64,
    pub theta: f64,
    pub q: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub sensor_layout: SensorLayout,
    pub stored_steps: Vec<usize>,
    pub stored_times: Vec<f64>,
    pub inputs: BlobInfo,
    pub targets: BlobInfo,
    pub failures: Vec<SampleFailure>,
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest.json"))
}

struct Written {
    inputs: BlobInfo,
    targets: BlobInfo,
}

fn write_blobs(
    cfg: &DatasetConfig,
    inputs: &[f64],
    in_stride: usize,
    in_layout: &str,
    targets: &[f64],
    t_stride: usize,
    t_layout: &str,
) -> Result<Written> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let in_file = format!("{}.inputs.bin", cfg.name);
    let t_file = format!("{}.targets.bin", cfg.name);
    let in_sha = write_blob(&cfg.out_dir.join(&in_file), inputs)?;
    let t_sha = write_blob(&cfg.out_dir.join(&t_file), targets)?;
    Ok(Written {
        inputs: BlobInfo { file: in_file, stride: in_stride, layout: in_layout.into(), sha256: in_sha },
        targets: BlobInfo { file: t_file, stride: t_stride, layout: t_layout.into(), sha256: t_sha },
    })
}

/// Kernel pairs: per sample the `lambda` sensor vector and the direct kernel
/// at the stored steps (time-major, nodes in triangular order).
pub fn generate_kernel_dataset(cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let (grid, tg) = cfg.validate()?;
    let layout = SensorLayout::kernel(tg.stop_time());
    let sigmas = sample_sigma(cfg.seed, cfg.samples, cfg.sigma_low, cfg.sigma_high)?;
    let steps = uniform_steps(tg.steps(), cfg.stored_times);
    let sched = GainSchedule::prescribed(cfg.horizon);
    let opts = KernelSolverOptions::default();

    let one = |sigma: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let spec = cfg.spec(sigma)?;
        let sensors = layout.lambda_samples(&spec)?;
        let slices = kernel_slices_at_steps(KernelKind::Direct, &spec, &sched, grid, &tg, &steps, opts)?;
        let mut fields = Vec::with_capacity(steps.len() * grid.node_count());
        for s in &slices {
            let gamma = gamma_field(&spec, &sched, grid.space(), s.t)?;
            let viol = s.diagonal_violation(&gamma, spec.theta)?;
            if !s.is_finite() || viol > 1e-8 * (1.0 + s.sup_norm()) {
                return Err(Error::Numeric(format!("slice at t = {} breaks the diagonal condition ({viol:e})", s.t)));
            }
            fields.extend_from_slice(&s.values);
        }
        Ok((sensors, fields))
    };
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = cfg.pool()?.install(|| sigmas.par_iter().map(|s| one(*s)).collect());

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut kept = Vec::new();
    let mut failures = Vec::new();
    for (index, (sigma, r)) in sigmas.iter().zip(results).enumerate() {
        match r {
            Ok((s, f)) => {
                inputs.extend(s);
                targets.extend(f);
                kept.push(*sigma);
            }
            Err(e) => failures.push(SampleFailure { index, sigma: *sigma, message: e.to_string() }),
        }
    }
    let stride = steps.len() * grid.node_count();
    let written = write_blobs(
        cfg,
        &inputs,
        layout.lambda_len(),
        "lambda sensors, x outer, t inner",
        &targets,
        stride,
        "k(x_i, y_j, t_s) for s in stored times, (i, j) in triangular order i(i+1)/2 + j",
    )?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        kind: DatasetKind::KernelPairs,
        name: cfg.name.clone(),
        sample_count: kept.len(),
        sigma_range: [cfg.sigma_low, cfg.sigma_high],
        record_groups: (0..kept.len()).collect(),
        sigmas: kept,
        amplitudes: Vec::new(),
        space_points: cfg.space_points,
        dx: grid.dx(),
        dt: cfg.dt,
        horizon: cfg.horizon,
        margin: cfg.margin,
        theta: cfg.theta,
        q: cfg.q,
        seed: cfg.seed,
        split_fraction: cfg.split_fraction,
        sensor_layout: layout,
        stored_times: steps.iter().map(|m| tg.time(*m)).collect(),
        stored_steps: steps,
        inputs: written.inputs,
        targets: written.targets,
        failures,
    };
    write_json(&manifest_path(&cfg.out_dir, &cfg.name), &manifest)?;
    Ok(manifest)
}

/// Feedback triples from exact closed-loop rollouts with random coefficients
/// and initial states `a x (1 - x)`.
pub fn generate_feedback_dataset(cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let (grid, tg) = cfg.validate()?;
    if !(cfg.amplitude_low <= cfg.amplitude_high) {
        return Err(Error::invalid("amplitude range is empty"));
    }
    let layout = SensorLayout::feedback(tg.stop_time());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws: Vec<(f64, f64)> = (0..cfg.samples)
        .map(|_| {
            let s = rng.gen_range(cfg.sigma_low..cfg.sigma_high);
            let a = if cfg.amplitude_low < cfg.amplitude_high {
                rng.gen_range(cfg.amplitude_low..cfg.amplitude_high)
            } else {
                cfg.amplitude_low
            };
            (s, a)
        })
        .collect();
    if cfg.samples == 0 {
        return Err(Error::invalid("need at least one rollout"));
    }
    let steps = uniform_steps(tg.steps(), cfg.stored_times);
    let sched = GainSchedule::prescribed(cfg.horizon);
    let opts = KernelSolverOptions::default();
    let stride = layout.branch_len(crate::operator::Head::Feedback);

    let one = |(sigma, amp): (f64, f64)| -> Result<(Vec<f64>, Vec<f64>)> {
        let spec = cfg.spec(sigma)?;
        let sensors = layout.lambda_samples(&spec)?;
        let kt = solve_kernel_trajectory(&spec, &sched, grid, &tg, opts)?;
        let v0 = parabolic_state(grid.space(), amp);
        let traj = simulate(&spec, &sched, &Controller::analytic(&kt)?, &tg, &v0)?;
        if traj.blown_up {
            return Err(Error::Numeric("exact closed loop blew up".into()));
        }
        let mut inputs = Vec::with_capacity(steps.len() * stride);
        let mut targets = Vec::with_capacity(steps.len());
        for &m in &steps {
            let v = &traj.states[m];
            inputs.extend_from_slice(&sensors);
            inputs.extend(layout.state_samples(v));
            inputs.push(v.t);
            targets.push(control_u(&control_gain(&kt.slices[m]), v)?);
        }
        Ok((inputs, targets))
    };
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = cfg.pool()?.install(|| draws.par_iter().map(|d| one(*d)).collect());

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut sigmas = Vec::new();
    let mut amplitudes = Vec::new();
    let mut groups = Vec::new();
    let mut failures = Vec::new();
    for (index, (&(sigma, amp), r)) in draws.iter().zip(results).enumerate() {
        match r {
            Ok((i, t)) => {
                groups.extend(std::iter::repeat_n(sigmas.len(), t.len()));
                inputs.extend(i);
                targets.extend(t);
                sigmas.push(sigma);
                amplitudes.push(amp);
            }
            Err(e) => failures.push(SampleFailure { index, sigma, message: e.to_string() }),
        }
    }
    let written = write_blobs(
        cfg,
        &inputs,
        stride,
        "lambda sensors (x outer, t inner), v at uniform state points, t",
        &targets,
        1,
        "U(t) = int k(1, y, t) v(y, t) dy",
    )?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        kind: DatasetKind::FeedbackTriples,
        name: cfg.name.clone(),
        sample_count: targets.len(),
        sigma_range: [cfg.sigma_low, cfg.sigma_high],
        sigmas,
        amplitudes,
        record_groups: groups,
        space_points: cfg.space_points,
        dx: grid.dx(),
        dt: cfg.dt,
        horizon: cfg.horizon,
        margin: cfg.margin,
        theta: cfg.theta,
        q: cfg.q,
        seed: cfg.seed,
        split_fraction: cfg.split_fraction,
        sensor_layout: layout,
        stored_times: steps.iter().map(|m| tg.time(*m)).collect(),
        stored_steps: steps,
        inputs: written.inputs,
        targets: written.targets,
        failures,
    };
    write_json(&manifest_path(&cfg.out_dir, &cfg.name), &manifest)?;
    Ok(manifest)
}

/// A loaded corpus with its split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub data: OperatorData,
    pub train_records: Vec<usize>,
    pub validation_records: Vec<usize>,
}

impl Dataset {
    pub fn train_data(&self) -> OperatorData {
        self.data.select(&self.train_records)
    }

    pub fn validation_data(&self) -> OperatorData {
        self.data.select(&self.validation_records)
    }

    /// Re-splits with a different validation fraction, same seed.
    pub fn resplit(&mut self, fraction: f64) -> Result<()> {
        let (t, v) = split_groups(&self.manifest.record_groups, fraction, self.manifest.seed)?;
        self.train_records = t;
        self.validation_records = v;
        Ok(())
    }
}

/// Records of a seeded group-level split: `(train, validation)`, each in
/// ascending order.
pub fn split_groups(groups: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie in (0, 1)"));
    }
    let count = groups.iter().max().map_or(0, |g| g + 1);
    if count < 2 {
        return Err(Error::invalid("a split needs at least two groups"));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let n_val = ((fraction * count as f64).round() as usize).clamp(1, count - 1);
    let mut is_val = vec![false; count];
    for g in &ids[..n_val] {
        is_val[*g] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, g) in groups.iter().enumerate() {
        if is_val[*g] {
            val.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((train, val))
}

/// Loads and verifies a corpus written by the generators.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_json(manifest)?;
    if m.version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {} is not supported", m.version)));
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let inputs = read_blob(&dir.join(&m.inputs.file), &m.inputs.sha256)?;
    let targets = read_blob(&dir.join(&m.targets.file), &m.targets.sha256)?;
    let n = m.sample_count;
    if inputs.len() != n * m.inputs.stride || targets.len() != n * m.targets.stride || m.record_groups.len() != n {
        return Err(Error::Format("record count disagrees with blob sizes".into()));
    }
    let inputs = Array2::from_shape_vec((n, m.inputs.stride), inputs).expect("checked shape");
    let data = match m.kind {
        DatasetKind::KernelPairs => {
            let grid = TriGrid::new(m.space_points)?;
            if m.targets.stride != m.stored_times.len() * grid.node_count() {
                return Err(Error::Format("kernel record stride does not match the grid".into()));
            }
            OperatorData::Kernel(KernelData {
                grid,
                times: m.stored_times.clone(),
                sensors: inputs,
                fields: Array2::from_shape_vec((n, m.targets.stride), targets).expect("checked shape"),
            })
        }
        DatasetKind::FeedbackTriples => {
            let l = m.sensor_layout.lambda_len();
            let s = m.sensor_layout.state_points;
            if m.inputs.stride != l + s + 1 || m.targets.stride != 1 {
                return Err(Error::Format("feedback record stride does not match the layout".into()));
            }
            OperatorData::Feedback(FeedbackData {
                sensors: inputs.slice(ndarray::s![.., ..l]).to_owned(),
                states: inputs.slice(ndarray::s![.., l..l + s]).to_owned(),
                times: inputs.column(l + s).to_owned(),
                controls: Array1::from(targets),
            })
        }
    };
    let (train_records, validation_records) = split_groups(&m.record_groups, m.split_fraction, m.seed)?;
    Ok(Dataset { manifest: m, data, train_records, validation_records })
}
