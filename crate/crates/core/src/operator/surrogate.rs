use ndarray::Array2;

use super::deeponet::{deeponet_forward, state_scale, DeepOperator, Head};
use crate::error::{Error, Result};
use crate::grid::{CoeffSpec, SpaceGrid, TimeGrid, TriGrid};
use crate::kernel::KernelSlice;
use crate::transform::{GainRow, StateVector};

fn require_head(op: &DeepOperator, head: Head) -> Result<()> {
    if op.head != head {
        return Err(Error::invalid(format!("operator head is {:?}, expected {head:?}", op.head)));
    }
    Ok(())
}

fn check_time(op: &DeepOperator, t: f64) -> Result<()> {
    let t_max = op.layout.t_max;
    if !(t >= 0.0 && t <= t_max * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("t = {t} is outside the trained range [0, {t_max}]")));
    }
    Ok(())
}

fn slice_queries(grid: TriGrid, t: f64) -> Array2<f64> {
    let sp = grid.space();
    let mut q = Array2::zeros((grid.node_count(), 3));
    for (i, k) in grid.nodes() {
        let r = grid.index(i, k);
        q[[r, 0]] = sp.x(i);
        q[[r, 1]] = sp.x(k);
        q[[r, 2]] = t;
    }
    q
}

fn row_queries(grid: SpaceGrid, t: f64) -> Array2<f64> {
    Array2::from_shape_fn((grid.len(), 3), |(j, c)| match c {
        0 => 1.0,
        1 => grid.x(j),
        _ => t,
    })
}

/// `k_hat(., ., t)` at every node of `grid`; the diagonal condition is not
/// imposed.
pub fn predict_kernel_slice(op: &DeepOperator, lambda_sensors: &[f64], t: f64, grid: TriGrid) -> Result<KernelSlice> {
    require_head(op, Head::Kernel)?;
    check_time(op, t)?;
    let code = op.encode_branch(lambda_sensors)?;
    let values = op.eval_with_code(&code, slice_queries(grid, t).view())?;
    KernelSlice::new(grid, values, t)
}

/// `k_hat(1, ., t)` on `grid`.
pub fn predict_gain_row(op: &DeepOperator, lambda_sensors: &[f64], t: f64, grid: SpaceGrid) -> Result<GainRow> {
    KernelSurrogate::new(op.clone(), lambda_sensors)?.gain_row(grid, t)
}

/// `U_hat = G_hat(lambda, v, t)`; `v_samples` on the layout's state points.
/// The network sees the samples scaled to unit RMS and its output is scaled
/// back, so a zero state gives exactly zero control.
pub fn predict_feedback(op: &DeepOperator, lambda_sensors: &[f64], v_samples: &[f64], t: f64) -> Result<f64> {
    require_head(op, Head::Feedback)?;
    check_time(op, t)?;
    if lambda_sensors.len() != op.layout.lambda_len() || v_samples.len() != op.layout.state_points {
        return Err(Error::invalid(format!(
            "feedback head expects {} lambda and {} state samples, got {} and {}",
            op.layout.lambda_len(),
            op.layout.state_points,
            lambda_sensors.len(),
            v_samples.len()
        )));
    }
    let scale = state_scale(v_samples);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let mut input = Vec::with_capacity(op.layout.branch_len(Head::Feedback));
    input.extend_from_slice(lambda_sensors);
    input.extend(v_samples.iter().map(|v| v / scale));
    input.push(t);
    Ok(scale * deeponet_forward(op, &input, &[t])?)
}

/// A kernel operator bound to one coefficient; the branch code is computed
/// once and reused for every query.
#[derive(Debug, Clone)]
pub struct KernelSurrogate {
    op: DeepOperator,
    code: Vec<f64>,
}

impl KernelSurrogate {
    pub fn new(op: DeepOperator, lambda_sensors: &[f64]) -> Result<Self> {
        require_head(&op, Head::Kernel)?;
        let code = op.encode_branch(lambda_sensors)?;
        Ok(Self { op, code })
    }

    pub fn for_spec(op: DeepOperator, spec: &CoeffSpec) -> Result<Self> {
        let sensors = op.layout.lambda_samples(spec)?;
        Self::new(op, &sensors)
    }

    pub fn operator(&self) -> &DeepOperator {
        &self.op
    }

    pub fn gain_row(&self, grid: SpaceGrid, t: f64) -> Result<GainRow> {
        check_time(&self.op, t)?;
        let values = self.op.eval_with_code(&self.code, row_queries(grid, t).view())?;
        GainRow::new(grid, values, t)
    }

    /// `k_hat(1, ., t)` at every time in `times`, evaluated as one batch.
    pub fn gain_rows(&self, grid: SpaceGrid, times: &[f64]) -> Result<Vec<GainRow>> {
        for t in times {
            check_time(&self.op, *t)?;
        }
        let n = grid.len();
        let q = Array2::from_shape_fn((n * times.len(), 3), |(r, c)| match c {
            0 => 1.0,
            1 => grid.x(r % n),
            _ => times[r / n],
        });
        let values = self.op.eval_with_code(&self.code, q.view())?;
        values.chunks(n).zip(times).map(|(v, t)| GainRow::new(grid, v.to_vec(), *t)).collect()
    }

    pub fn slice(&self, grid: TriGrid, t: f64) -> Result<KernelSlice> {
        check_time(&self.op, t)?;
        let values = self.op.eval_with_code(&self.code, slice_queries(grid, t).view())?;
        KernelSlice::new(grid, values, t)
    }

    pub(crate) fn covers(&self, tg: &TimeGrid) -> Result<()> {
        check_time(&self.op, tg.time(tg.steps()))
    }
}

/// A feedback operator bound to one coefficient.
#[derive(Debug, Clone)]
pub struct FeedbackSurrogate {
    op: DeepOperator,
    sensors: Vec<f64>,
}

impl FeedbackSurrogate {
    pub fn new(op: DeepOperator, lambda_sensors: &[f64]) -> Result<Self> {
        require_head(&op, Head::Feedback)?;
        if lambda_sensors.len() != op.layout.lambda_len() {
            return Err(Error::invalid("lambda sensor count does not match the layout"));
        }
        Ok(Self { op, sensors: lambda_sensors.to_vec() })
    }

    pub fn for_spec(op: DeepOperator, spec: &CoeffSpec) -> Result<Self> {
        let sensors = op.layout.lambda_samples(spec)?;
        Self::new(op, &sensors)
    }

    pub fn operator(&self) -> &DeepOperator {
        &self.op
    }

    pub fn control(&self, v: &StateVector, t: f64) -> Result<f64> {
        predict_feedback(&self.op, &self.sensors, &self.op.layout.state_samples(v), t)
    }

    pub(crate) fn covers(&self, tg: &TimeGrid) -> Result<()> {
        check_time(&self.op, tg.time(tg.steps()))
    }
}
