use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp, MlpGrads};
use crate::error::{Error, Result};
use crate::grid::{lambda_field, CoeffSpec, SpaceGrid, TriGrid};
use crate::transform::StateVector;

/// Which learned map an operator represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `lambda -> k(x, y, t)`; trunk query `(x, y, t)`.
    Kernel,
    /// `(lambda, v(., t), t) -> U(t)`; trunk query `t`.
    Feedback,
}

impl Head {
    pub fn trunk_dim(self) -> usize {
        match self {
            Head::Kernel => 3,
            Head::Feedback => 1,
        }
    }
}

/// Where input functions are sampled. `lambda` is read on `lambda_x` uniform
/// points of `[0, 1]` times `lambda_t` uniform points of `[0, t_max]`,
/// flattened with `x` outer. The feedback head appends `state_points`
/// uniform samples of `v` and the time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub lambda_x: usize,
    pub lambda_t: usize,
    pub t_max: f64,
    pub state_points: usize,
}

impl SensorLayout {
    pub fn kernel(t_max: f64) -> Self {
        Self { lambda_x: 11, lambda_t: 9, t_max, state_points: 0 }
    }

    pub fn feedback(t_max: f64) -> Self {
        Self { lambda_x: 11, lambda_t: 9, t_max, state_points: 21 }
    }

    pub fn lambda_len(&self) -> usize {
        self.lambda_x * self.lambda_t
    }

    pub fn branch_len(&self, head: Head) -> usize {
        match head {
            Head::Kernel => self.lambda_len(),
            Head::Feedback => self.lambda_len() + self.state_points + 1,
        }
    }

    fn validate(&self, head: Head) -> Result<()> {
        if self.lambda_x < 2 || self.lambda_t < 2 || !(self.t_max > 0.0) {
            return Err(Error::invalid("sensor layout needs >= 2 points per axis and t_max > 0"));
        }
        if head == Head::Feedback && self.state_points < 2 {
            return Err(Error::invalid("feedback head needs >= 2 state sample points"));
        }
        Ok(())
    }

    pub fn sensor_times(&self) -> Vec<f64> {
        (0..self.lambda_t).map(|j| self.t_max * j as f64 / (self.lambda_t - 1) as f64).collect()
    }

    /// `lambda` on the sensor lattice.
    pub fn lambda_samples(&self, spec: &CoeffSpec) -> Result<Vec<f64>> {
        let xs = SpaceGrid::new(self.lambda_x)?;
        let cols: Vec<Vec<f64>> =
            self.sensor_times().iter().map(|t| lambda_field(spec, xs, *t)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.lambda_len());
        for i in 0..self.lambda_x {
            for col in &cols {
                out.push(col[i]);
            }
        }
        Ok(out)
    }

    /// `v` at the state sensor points by linear interpolation.
    pub fn state_samples(&self, v: &StateVector) -> Vec<f64> {
        let n = self.state_points;
        (0..n).map(|i| v.interpolate(i as f64 / (n - 1) as f64)).collect()
    }
}

/// `normalized = (raw - shift) / scale`, per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Self { shift: vec![0.0; n], scale: vec![1.0; n] }
    }

    /// Column mean and standard deviation; constant columns keep scale 1.
    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let shift: Vec<f64> = rows.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let scale = rows
            .axis_iter(Axis(1))
            .zip(&shift)
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift, scale }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.shift).zip(&self.scale).map(|((r, s), c)| (r - s) / c).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.shift).zip(&self.scale).map(|((z, s), c)| z * c + s).collect()
    }

    fn normalize_rows(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / c;
            }
        }
        out
    }
}

/// Per-node spread is floored at this fraction of the slice's RMS spread.
const SPREAD_FLOOR: f64 = 0.05;

/// Pointwise statistics of kernel targets across training samples: a mean
/// field and the spread around it, both stored per training time as an RMS
/// amplitude times a shape. Between stored times amplitudes are interpolated
/// log-linearly and shapes linearly; in space shapes are piecewise linear on
/// the stored triangular lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldNormalization {
    pub times: Vec<f64>,
    pub grid_n: usize,
    pub shape: Vec<Vec<f64>>,
    pub log_amplitude: Vec<f64>,
    pub spread_shape: Vec<Vec<f64>>,
    pub log_spread: Vec<f64>,
}

impl FieldNormalization {
    fn fit(grid: TriGrid, times: &[f64], fields: ArrayView2<f64>) -> Result<Self> {
        let nodes = grid.node_count();
        if fields.ncols() != times.len() * nodes || fields.nrows() == 0 {
            return Err(Error::invalid("kernel field block does not match times x nodes"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("training times must be strictly increasing"));
        }
        let s = fields.nrows() as f64;
        let mean = fields.sum_axis(Axis(0)) / s;
        let mut shape = Vec::with_capacity(times.len());
        let mut log_amplitude = Vec::with_capacity(times.len());
        let mut log_spread = Vec::with_capacity(times.len());
        let mut spread_shape = Vec::with_capacity(times.len());
        for j in 0..times.len() {
            let cols = j * nodes..(j + 1) * nodes;
            let mu = mean.slice(ndarray::s![cols.clone()]);
            let amp = (mu.iter().map(|v| v * v).sum::<f64>() / nodes as f64).sqrt();
            let block = fields.slice(ndarray::s![.., cols]);
            let mut node_var = vec![0.0; nodes];
            for row in block.axis_iter(Axis(0)) {
                for ((acc, a), b) in node_var.iter_mut().zip(row.iter()).zip(mu.iter()) {
                    *acc += (a - b) * (a - b) / s;
                }
            }
            let rms = (node_var.iter().sum::<f64>() / nodes as f64).sqrt();
            let spread = rms.max(1e-12 * amp.max(1.0));
            spread_shape.push(node_var.iter().map(|v| (v.sqrt() / spread).max(SPREAD_FLOOR)).collect());
            if amp > 0.0 {
                shape.push(mu.iter().map(|v| v / amp).collect());
                log_amplitude.push(amp.ln());
            } else {
                shape.push(vec![0.0; nodes]);
                log_amplitude.push(0.0);
            }
            log_spread.push(spread.ln());
        }
        Ok(Self { times: times.to_vec(), grid_n: grid.n(), shape, log_amplitude, spread_shape, log_spread })
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let last = self.times.len() - 1;
        if last == 0 || t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[last] {
            return (last - 1, 1.0);
        }
        let j = self.times.partition_point(|s| *s <= t) - 1;
        (j, (t - self.times[j]) / (self.times[j + 1] - self.times[j]))
    }

    fn lattice_eval(&self, f: &[f64], x: f64, y: f64) -> f64 {
        let n = self.grid_n;
        let h = 1.0 / (n - 1) as f64;
        let grid = TriGrid::new(n).expect("stored grid is valid");
        let x = x.clamp(0.0, 1.0);
        let y = y.clamp(0.0, x);
        let i = ((x / h).floor() as usize).min(n - 2);
        let k = ((y / h).floor() as usize).min(i);
        let a = (x / h - i as f64).clamp(0.0, 1.0);
        let b = (y / h - k as f64).clamp(0.0, 1.0);
        let f00 = f[grid.index(i, k)];
        let f10 = f[grid.index(i + 1, k)];
        let f11 = f[grid.index(i + 1, k + 1)];
        if b <= a || k == i {
            f00 + a * (f10 - f00) + b * (f11 - f10)
        } else {
            let f01 = f[grid.index(i, k + 1)];
            f00 + b * (f01 - f00) + a * (f11 - f01)
        }
    }

    /// `(mean, spread)` at `(x, y, t)`.
    pub fn eval(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let (j, w) = self.bracket(t);
        let k = (j + 1).min(self.times.len() - 1);
        let lerp = |a: f64, b: f64| (1.0 - w) * a + w * b;
        let amp = lerp(self.log_amplitude[j], self.log_amplitude[k]).exp();
        let shape = lerp(self.lattice_eval(&self.shape[j], x, y), self.lattice_eval(&self.shape[k], x, y));
        let spread = lerp(self.log_spread[j], self.log_spread[k]).exp();
        let spread_shape =
            lerp(self.lattice_eval(&self.spread_shape[j], x, y), self.lattice_eval(&self.spread_shape[k], x, y));
        (amp * shape, spread * spread_shape)
    }
}

/// Output normalization: `target = mean + spread * network`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetNorm {
    Global { mean: f64, std: f64 },
    Field(FieldNormalization),
}

impl TargetNorm {
    /// `query` is the physical trunk query.
    pub fn stats(&self, query: &[f64]) -> (f64, f64) {
        match self {
            TargetNorm::Global { mean, std } => (*mean, *std),
            TargetNorm::Field(f) => f.eval(query[0], query[1], query[2]),
        }
    }
}

/// How the time coordinate of a trunk query is mapped into `[0, 1]` before
/// the affine normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeEncoding {
    /// `t / t_max`.
    Linear,
    /// `ln(T / (T - t)) / ln(T / (T - t_max))`, which spreads out the times
    /// close to the blow-up horizon `T`.
    Blowup { horizon: f64 },
}

impl TimeEncoding {
    pub fn encode(self, t: f64, t_max: f64) -> f64 {
        match self {
            TimeEncoding::Linear => t / t_max,
            TimeEncoding::Blowup { horizon } => {
                let t = t.min(horizon * (1.0 - 1e-12));
                (horizon / (horizon - t)).ln() / (horizon / (horizon - t_max)).ln()
            }
        }
    }

    fn validate(self, t_max: f64) -> Result<()> {
        match self {
            TimeEncoding::Blowup { horizon } if !(horizon > t_max) => {
                Err(Error::invalid(format!("time encoding horizon {horizon} must exceed t_max {t_max}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub p: usize,
    pub activation: Activation,
    pub time_encoding: TimeEncoding,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            branch_hidden: vec![64; 3],
            trunk_hidden: vec![64; 3],
            p: 32,
            activation: Activation::Tanh,
            time_encoding: TimeEncoding::Linear,
        }
    }
}

/// Branch/trunk operator network with output `sum_i b_i tau_i + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepOperator {
    pub head: Head,
    pub layout: SensorLayout,
    pub branch: Mlp,
    pub trunk: Mlp,
    pub bias: f64,
    pub branch_norm: Affine,
    pub trunk_norm: Affine,
    pub target_norm: TargetNorm,
    pub time_encoding: TimeEncoding,
    pub seed: u64,
}

/// Gradients of the loss, laid out like the operator's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub branch: MlpGrads,
    pub trunk: MlpGrads,
    pub bias: f64,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.branch.write(&mut out);
        self.trunk.write(&mut out);
        out.push(self.bias);
        out
    }
}

/// A training batch in normalized units.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    /// Every branch row against every trunk row; `targets` is branch x trunk.
    Grid { branch: ArrayView2<'a, f64>, trunk: ArrayView2<'a, f64>, targets: ArrayView2<'a, f64> },
    /// Row `s` of `branch` pairs with row `s` of `trunk`.
    Paired { branch: ArrayView2<'a, f64>, trunk: ArrayView2<'a, f64>, targets: ArrayView1<'a, f64> },
}

impl DeepOperator {
    pub fn new(head: Head, layout: SensorLayout, arch: &Architecture, seed: u64) -> Result<Self> {
        layout.validate(head)?;
        if arch.p == 0 {
            return Err(Error::invalid("p must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bs = vec![layout.branch_len(head)];
        bs.extend(&arch.branch_hidden);
        bs.push(arch.p);
        let mut ts = vec![head.trunk_dim()];
        ts.extend(&arch.trunk_hidden);
        ts.push(arch.p);
        let branch = Mlp::init(&bs, arch.activation, &mut rng)?;
        let trunk = Mlp::init(&ts, arch.activation, &mut rng)?;
        arch.time_encoding.validate(layout.t_max)?;
        // encoded coordinates live in [0, 1]; centre them on [-1, 1]
        let d = head.trunk_dim();
        let trunk_norm = Affine { shift: vec![0.5; d], scale: vec![0.5; d] };
        Ok(Self {
            head,
            branch_norm: Affine::identity(layout.branch_len(head)),
            layout,
            branch,
            trunk,
            bias: 0.0,
            trunk_norm,
            target_norm: TargetNorm::Global { mean: 0.0, std: 1.0 },
            time_encoding: arch.time_encoding,
            seed,
        })
    }

    pub fn p(&self) -> usize {
        self.branch.output_size()
    }

    pub fn architecture(&self) -> Architecture {
        let hidden = |m: &Mlp| {
            let s = m.sizes();
            s[1..s.len() - 1].to_vec()
        };
        Architecture {
            branch_hidden: hidden(&self.branch),
            trunk_hidden: hidden(&self.trunk),
            p: self.p(),
            activation: self.branch.activation,
            time_encoding: self.time_encoding,
        }
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count() + 1
    }

    /// Branch parameters, trunk parameters, then the bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.branch.write_params(&mut out);
        self.trunk.write_params(&mut out);
        out.push(self.bias);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let used = self.branch.read_params(flat)?;
        let used2 = self.trunk.read_params(&flat[used..])?;
        self.bias = flat[used + used2];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.branch.is_finite() && self.trunk.is_finite() && self.bias.is_finite()
    }

    fn check_branch(&self, len: usize) -> Result<()> {
        if len != self.branch.input_size() {
            return Err(Error::invalid(format!(
                "branch expects {} samples, got {len}",
                self.branch.input_size()
            )));
        }
        Ok(())
    }

    fn check_query(&self, len: usize) -> Result<()> {
        if len != self.trunk.input_size() {
            return Err(Error::invalid(format!("trunk expects {} coordinates, got {len}", self.trunk.input_size())));
        }
        Ok(())
    }

    /// Trunk inputs for physical queries: time encoded, then normalized.
    pub fn trunk_inputs(&self, queries: ArrayView2<f64>) -> Array2<f64> {
        let mut enc = queries.to_owned();
        let last = enc.ncols() - 1;
        for mut row in enc.axis_iter_mut(Axis(0)) {
            row[last] = self.time_encoding.encode(row[last], self.layout.t_max);
        }
        self.trunk_norm.normalize_rows(enc.view())
    }

    /// Branch output for physical sensor samples.
    pub fn encode_branch(&self, fn_samples: &[f64]) -> Result<Vec<f64>> {
        self.check_branch(fn_samples.len())?;
        self.branch.forward(&self.branch_norm.normalize(fn_samples))
    }

    /// Predictions at physical queries (rows) for a precomputed branch code.
    pub fn eval_with_code(&self, code: &[f64], queries: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_query(queries.ncols())?;
        let tau = self.trunk.forward_batch(self.trunk_inputs(queries).view())?;
        let code = ArrayView1::from(code);
        let raw = tau.dot(&code);
        Ok(queries
            .axis_iter(Axis(0))
            .zip(raw.iter())
            .map(|(q, r)| {
                let (m, s) = self.target_norm.stats(q.as_slice().expect("contiguous row"));
                m + s * (r + self.bias)
            })
            .collect())
    }

    /// Raw normalized outputs: `branch x trunk` matrix.
    pub fn raw_grid(&self, branch: ArrayView2<f64>, trunk: ArrayView2<f64>) -> Result<Array2<f64>> {
        let b = self.branch.forward_batch(branch)?;
        let t = self.trunk.forward_batch(trunk)?;
        Ok(b.dot(&t.t()) + self.bias)
    }
}

/// Physical-unit prediction at one query.
pub fn deeponet_forward(op: &DeepOperator, fn_samples: &[f64], query: &[f64]) -> Result<f64> {
    let code = op.encode_branch(fn_samples)?;
    op.check_query(query.len())?;
    let q = ArrayView2::from_shape((1, query.len()), query).expect("row view");
    Ok(op.eval_with_code(&code, q)?[0])
}

/// Mean squared error in normalized units and its exact gradient.
pub fn loss_and_gradients(op: &DeepOperator, batch: &Batch) -> Result<(f64, Gradients)> {
    match *batch {
        Batch::Grid { branch, trunk, targets } => {
            let (s, q) = (branch.nrows(), trunk.nrows());
            if s == 0 || q == 0 {
                return Err(Error::invalid("empty batch"));
            }
            if targets.dim() != (s, q) {
                return Err(Error::invalid("grid batch targets must be branch rows x trunk rows"));
            }
            let ba = op.branch.forward_cached(branch)?;
            let ta = op.trunk.forward_cached(trunk)?;
            let bo = ba.last().unwrap();
            let to = ta.last().unwrap();
            let mut resid = bo.dot(&to.t());
            resid += op.bias;
            resid -= &targets;
            let count = (s * q) as f64;
            let loss = resid.iter().map(|r| r * r).sum::<f64>() / count;
            let dp = resid * (2.0 / count);
            let dbias = dp.sum();
            let db = dp.dot(to);
            let dt = dp.t().dot(bo);
            Ok((
                loss,
                Gradients { branch: op.branch.backward(&ba, db), trunk: op.trunk.backward(&ta, dt), bias: dbias },
            ))
        }
        Batch::Paired { branch, trunk, targets } => {
            let s = branch.nrows();
            if s == 0 {
                return Err(Error::invalid("empty batch"));
            }
            if trunk.nrows() != s || targets.len() != s {
                return Err(Error::invalid("paired batch rows must agree"));
            }
            let ba = op.branch.forward_cached(branch)?;
            let ta = op.trunk.forward_cached(trunk)?;
            let bo = ba.last().unwrap();
            let to = ta.last().unwrap();
            let pred: Array1<f64> = (bo * to).sum_axis(Axis(1)) + op.bias;
            let resid = pred - targets;
            let loss = resid.iter().map(|r| r * r).sum::<f64>() / s as f64;
            let dp = resid * (2.0 / s as f64);
            let dcol = dp.view().insert_axis(Axis(1));
            let db = to * &dcol;
            let dt = bo * &dcol;
            Ok((
                loss,
                Gradients {
                    branch: op.branch.backward(&ba, db),
                    trunk: op.trunk.backward(&ta, dt),
                    bias: dp.sum(),
                },
            ))
        }
    }
}

/// Physical-unit kernel training corpus: one row per coefficient sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelData {
    pub grid: TriGrid,
    pub times: Vec<f64>,
    /// `samples x lambda sensors`.
    pub sensors: Array2<f64>,
    /// `samples x (times * nodes)`, time-major.
    pub fields: Array2<f64>,
}

/// Physical-unit feedback corpus: one row per `(lambda, v, t) -> U` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackData {
    pub sensors: Array2<f64>,
    pub states: Array2<f64>,
    pub times: Array1<f64>,
    pub controls: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorData {
    Kernel(KernelData),
    Feedback(FeedbackData),
}

impl OperatorData {
    pub fn len(&self) -> usize {
        match self {
            OperatorData::Kernel(k) => k.sensors.nrows(),
            OperatorData::Feedback(f) => f.sensors.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            OperatorData::Kernel(k) => OperatorData::Kernel(KernelData {
                grid: k.grid,
                times: k.times.clone(),
                sensors: k.sensors.select(Axis(0), idx),
                fields: k.fields.select(Axis(0), idx),
            }),
            OperatorData::Feedback(f) => OperatorData::Feedback(FeedbackData {
                sensors: f.sensors.select(Axis(0), idx),
                states: f.states.select(Axis(0), idx),
                times: f.times.select(Axis(0), idx),
                controls: f.controls.select(Axis(0), idx),
            }),
        }
    }
}

/// Normalized arrays ready for [`loss_and_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingSet {
    Grid { branch: Array2<f64>, trunk: Array2<f64>, targets: Array2<f64> },
    Paired { branch: Array2<f64>, trunk: Array2<f64>, targets: Array1<f64> },
}

impl TrainingSet {
    pub fn batch(&self) -> Batch<'_> {
        match self {
            TrainingSet::Grid { branch, trunk, targets } => {
                Batch::Grid { branch: branch.view(), trunk: trunk.view(), targets: targets.view() }
            }
            TrainingSet::Paired { branch, trunk, targets } => {
                Batch::Paired { branch: branch.view(), trunk: trunk.view(), targets: targets.view() }
            }
        }
    }
}

fn kernel_queries(grid: TriGrid, times: &[f64]) -> Array2<f64> {
    let nodes = grid.node_count();
    let mut q = Array2::zeros((times.len() * nodes, 3));
    let space = grid.space();
    for (j, t) in times.iter().enumerate() {
        for (i, k) in grid.nodes() {
            let r = j * nodes + grid.index(i, k);
            q[[r, 0]] = space.x(i);
            q[[r, 1]] = space.x(k);
            q[[r, 2]] = *t;
        }
    }
    q
}

/// RMS of the state samples. The feedback head sees `v / r` and predicts
/// `U / r`, which makes the learned map degree-one homogeneous in `v` and
/// sends `v = 0` to `U = 0` exactly.
pub fn state_scale(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn row_scales(f: &FeedbackData) -> Vec<f64> {
    f.states.axis_iter(Axis(0)).map(|r| state_scale(&r.to_vec())).collect()
}

fn feedback_branch(f: &FeedbackData) -> Result<Array2<f64>> {
    let n = f.sensors.nrows();
    if f.states.nrows() != n || f.times.len() != n || f.controls.len() != n {
        return Err(Error::invalid("feedback data columns disagree in length"));
    }
    let mut out = Array2::zeros((n, f.sensors.ncols() + f.states.ncols() + 1));
    for r in 0..n {
        let mut row = out.row_mut(r);
        let mut c = 0;
        for v in f.sensors.row(r) {
            row[c] = *v;
            c += 1;
        }
        let scale = state_scale(&f.states.row(r).to_vec());
        for v in f.states.row(r) {
            row[c] = if scale > 0.0 { v / scale } else { 0.0 };
            c += 1;
        }
        row[c] = f.times[r];
    }
    Ok(out)
}

fn scaled_controls(f: &FeedbackData) -> Vec<f64> {
    f.controls.iter().zip(row_scales(f)).map(|(u, r)| if r > 0.0 { u / r } else { 0.0 }).collect()
}

impl DeepOperator {
    fn check_data(&self, data: &OperatorData) -> Result<()> {
        match (self.head, data) {
            (Head::Kernel, OperatorData::Kernel(k)) => {
                self.check_branch(k.sensors.ncols())?;
                if k.fields.nrows() != k.sensors.nrows() || k.fields.ncols() != k.times.len() * k.grid.node_count() {
                    return Err(Error::invalid("kernel data shapes are inconsistent"));
                }
                Ok(())
            }
            (Head::Feedback, OperatorData::Feedback(f)) => {
                self.check_branch(f.sensors.ncols() + f.states.ncols() + 1)
            }
            _ => Err(Error::invalid("data kind does not match the operator head")),
        }
    }

    /// Fits input and target normalization to a training corpus.
    pub fn fit_normalization(&mut self, data: &OperatorData) -> Result<()> {
        self.check_data(data)?;
        if data.is_empty() {
            return Err(Error::invalid("cannot fit normalization to an empty corpus"));
        }
        match data {
            OperatorData::Kernel(k) => {
                self.branch_norm = Affine::fit(k.sensors.view());
                self.target_norm = TargetNorm::Field(FieldNormalization::fit(k.grid, &k.times, k.fields.view())?);
            }
            OperatorData::Feedback(f) => {
                self.branch_norm = Affine::fit(feedback_branch(f)?.view());
                let scaled = scaled_controls(f);
                let n = scaled.len() as f64;
                let mean = scaled.iter().sum::<f64>() / n;
                let var = scaled.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n;
                let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                self.target_norm = TargetNorm::Global { mean, std };
            }
        }
        Ok(())
    }

    /// Normalized arrays for a corpus under the current normalization.
    pub fn encode(&self, data: &OperatorData) -> Result<TrainingSet> {
        self.check_data(data)?;
        match data {
            OperatorData::Kernel(k) => {
                let queries = kernel_queries(k.grid, &k.times);
                let stats: Vec<(f64, f64)> = queries
                    .axis_iter(Axis(0))
                    .map(|q| self.target_norm.stats(q.as_slice().expect("contiguous")))
                    .collect();
                let mut targets = k.fields.clone();
                for mut row in targets.axis_iter_mut(Axis(0)) {
                    for (v, (m, s)) in row.iter_mut().zip(&stats) {
                        *v = (*v - m) / s;
                    }
                }
                Ok(TrainingSet::Grid {
                    branch: self.branch_norm.normalize_rows(k.sensors.view()),
                    trunk: self.trunk_inputs(queries.view()),
                    targets,
                })
            }
            OperatorData::Feedback(f) => {
                let raw = feedback_branch(f)?;
                let trunk_raw = f.times.view().insert_axis(Axis(1));
                let (m, s) = self.target_norm.stats(&[]);
                let targets = Array1::from(scaled_controls(f)).mapv(|u| (u - m) / s);
                Ok(TrainingSet::Paired {
                    branch: self.branch_norm.normalize_rows(raw.view()),
                    trunk: self.trunk_inputs(trunk_raw),
                    targets,
                })
            }
        }
    }

    /// Physical-unit predictions for every target of a corpus, same layout
    /// as the targets (`samples x queries` for kernels, one column for
    /// feedback).
    pub fn predict_corpus(&self, data: &OperatorData) -> Result<Array2<f64>> {
        let set = self.encode(data)?;
        match (&set, data) {
            (TrainingSet::Grid { branch, trunk, .. }, OperatorData::Kernel(k)) => {
                let mut raw = self.raw_grid(branch.view(), trunk.view())?;
                let queries = kernel_queries(k.grid, &k.times);
                let stats: Vec<(f64, f64)> = queries
                    .axis_iter(Axis(0))
                    .map(|q| self.target_norm.stats(q.as_slice().expect("contiguous")))
                    .collect();
                for mut row in raw.axis_iter_mut(Axis(0)) {
                    for (v, (m, s)) in row.iter_mut().zip(&stats) {
                        *v = m + s * *v;
                    }
                }
                Ok(raw)
            }
            (TrainingSet::Paired { branch, trunk, .. }, _) => {
                let b = self.branch.forward_batch(branch.view())?;
                let t = self.trunk.forward_batch(trunk.view())?;
                let (m, s) = self.target_norm.stats(&[]);
                let mut pred = ((b * t).sum_axis(Axis(1)) + self.bias).mapv(|r| m + s * r);
                if let OperatorData::Feedback(f) = data {
                    for (p, r) in pred.iter_mut().zip(row_scales(f)) {
                        *p *= r;
                    }
                }
                Ok(pred.insert_axis(Axis(1)))
            }
            _ => unreachable!("encode matched the head"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(seed: u64, head: Head) -> DeepOperator {
        let layout = SensorLayout { lambda_x: 3, lambda_t: 2, t_max: 2.0, state_points: 3 };
        let arch = Architecture { branch_hidden: vec![8, 8], trunk_hidden: vec![8, 8], p: 5, ..Default::default() };
        let mut op = DeepOperator::new(head, layout, &arch, seed).unwrap();
        op.bias = 0.3;
        op
    }

    #[test]
    fn readout_is_dot_product_plus_bias() {
        let layout = SensorLayout { lambda_x: 2, lambda_t: 2, t_max: 1.0, state_points: 0 };
        let arch = Architecture { branch_hidden: vec![], trunk_hidden: vec![], p: 1, ..Default::default() };
        let mut op = DeepOperator::new(Head::Kernel, layout, &arch, 0).unwrap();
        op.branch.weights[0] = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0]]);
        op.branch.biases[0] = ndarray::arr1(&[0.0]);
        op.trunk.weights[0] = ndarray::arr2(&[[0.0, 0.0, 1.0]]);
        op.trunk.biases[0] = ndarray::arr1(&[0.5]);
        op.bias = -0.25;
        let y = deeponet_forward(&op, &[3.0, 9.0, 9.0, 9.0], &[0.2, 0.1, 0.5]).unwrap();
        // t = 0.5 encodes to 0.5 and normalizes to 0, so the trunk emits its bias
        assert!((y - (3.0 * 0.5 - 0.25)).abs() < 1e-14);
    }

    #[test]
    fn zero_trunk_gives_bias() {
        let mut op = small(1, Head::Kernel);
        for w in &mut op.trunk.weights {
            w.fill(0.0);
        }
        for b in &mut op.trunk.biases {
            b.fill(0.0);
        }
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        for q in [[0.0, 0.0, 0.0], [1.0, 0.5, 1.7]] {
            assert_eq!(deeponet_forward(&op, &s, &q).unwrap(), 0.3);
        }
    }

    #[test]
    fn batch_composition_does_not_matter() {
        let op = small(2, Head::Kernel);
        let s = [0.1, -0.2, 0.3, 0.4, 0.0, 0.6];
        let code = op.encode_branch(&s).unwrap();
        let qs = ndarray::arr2(&[[0.5, 0.2, 0.1], [1.0, 1.0, 1.9], [0.3, 0.0, 0.0]]);
        let all = op.eval_with_code(&code, qs.view()).unwrap();
        for (r, v) in all.iter().enumerate() {
            let one = deeponet_forward(&op, &s, qs.row(r).as_slice().unwrap()).unwrap();
            assert!((one - v).abs() < 1e-14);
        }
        assert!(deeponet_forward(&op, &s[..4], &[0.0, 0.0, 0.0]).is_err());
        assert!(deeponet_forward(&op, &s, &[0.0]).is_err());
    }

    fn random_batch(op: &DeepOperator, rng: &mut impl Rng, grid: bool) -> TrainingSet {
        let m = op.branch.input_size();
        let d = op.trunk.input_size();
        let mut r = |rows, cols| Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0));
        if grid {
            TrainingSet::Grid { branch: r(3, m), trunk: r(4, d), targets: r(3, 4) }
        } else {
            let t = r(5, 1).column(0).to_owned();
            TrainingSet::Paired { branch: r(5, m), trunk: r(5, d), targets: t }
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let op = small(4, Head::Kernel);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        if let TrainingSet::Grid { branch, trunk, .. } = random_batch(&op, &mut rng, true) {
            let targets = op.raw_grid(branch.view(), trunk.view()).unwrap();
            let (loss, g) = loss_and_gradients(
                &op,
                &Batch::Grid { branch: branch.view(), trunk: trunk.view(), targets: targets.view() },
            )
            .unwrap();
            assert_eq!(loss, 0.0);
            assert!(g.flatten().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn doubling_residuals_quadruples_loss() {
        let op = small(6, Head::Kernel);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        if let TrainingSet::Grid { branch, trunk, targets } = random_batch(&op, &mut rng, true) {
            let pred = op.raw_grid(branch.view(), trunk.view()).unwrap();
            let far = &pred + (&targets - &pred) * 2.0;
            let l1 = loss_and_gradients(&op, &Batch::Grid { branch: branch.view(), trunk: trunk.view(), targets: targets.view() })
                .unwrap()
                .0;
            let l2 = loss_and_gradients(&op, &Batch::Grid { branch: branch.view(), trunk: trunk.view(), targets: far.view() })
                .unwrap()
                .0;
            assert!((l2 / l1 - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_round_trip() {
        let rows = ndarray::arr2(&[[1.0, 5.0, 2.0], [3.0, 5.0, -1.0], [2.5, 5.0, 0.0]]);
        let a = Affine::fit(rows.view());
        assert_eq!(a.scale[1], 1.0);
        for r in rows.axis_iter(Axis(0)) {
            let raw = r.to_vec();
            let back = a.denormalize(&a.normalize(&raw));
            for (x, y) in back.iter().zip(&raw) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn field_normalization_reproduces_nodes() {
        let grid = TriGrid::new(5).unwrap();
        let times = [0.0, 1.0, 2.0];
        let nodes = grid.node_count();
        let fields = Array2::from_shape_fn((4, 3 * nodes), |(s, c)| {
            let (j, node) = (c / nodes, c % nodes);
            (1.0 + s as f64) * (node as f64 - 3.0) * (1.0 + j as f64).powi(3)
        });
        let f = FieldNormalization::fit(grid, &times, fields.view()).unwrap();
        let sp = grid.space();
        let mean = fields.sum_axis(Axis(0)) / 4.0;
        for (j, t) in times.iter().enumerate() {
            for (i, k) in grid.nodes() {
                let (m, s) = f.eval(sp.x(i), sp.x(k), *t);
                assert!((m - mean[j * nodes + grid.index(i, k)]).abs() < 1e-9 * (1.0 + m.abs()));
                assert!(s > 0.0);
            }
        }
    }

    #[test]
    fn lambda_sensors_are_x_outer() {
        let layout = SensorLayout::kernel(7.6);
        let spec = CoeffSpec::chebyshev(3.3, 8.0);
        let s = layout.lambda_samples(&spec).unwrap();
        assert_eq!(s.len(), 99);
        let expect = crate::grid::eval_lambda(&spec, 0.3, 7.6 * 2.0 / 8.0).unwrap();
        assert!((s[3 * 9 + 2] - expect).abs() < 1e-12);
    }
}
