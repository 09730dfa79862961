//! Volterra transforms between plant and target states and the boundary
//! feedback `U(t) = int_0^1 k(1, y, t) v(y, t) dy`.

use crate::error::{Error, Result};
use crate::grid::{trapezoid_unchecked, SpaceGrid};
use crate::kernel::KernelSlice;

/// A state sampled on a [`SpaceGrid`] at time `t`. Used for both `v` and `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub grid: SpaceGrid,
    pub values: Vec<f64>,
    pub t: f64,
}

impl StateVector {
    pub fn new(grid: SpaceGrid, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "state has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state contains non-finite values"));
        }
        Ok(Self { grid, values, t })
    }

    pub fn from_fn(grid: SpaceGrid, t: f64, f: impl Fn(f64) -> f64) -> Self {
        Self { grid, values: grid.nodes().into_iter().map(f).collect(), t }
    }

    pub fn zeros(grid: SpaceGrid, t: f64) -> Self {
        Self { grid, values: vec![0.0; grid.len()], t }
    }

    /// `||v||_2` over `[0, 1]` by the trapezoid rule.
    pub fn l2_norm(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v * v).collect();
        trapezoid_unchecked(&sq, self.grid.dx()).sqrt()
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Linear interpolation at `x` in `[0, 1]`.
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.grid.len();
        let pos = (x.clamp(0.0, 1.0) / self.grid.dx()).min((n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let w = pos - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }
}

/// The gain `k(1, y_j, t)` along the top row of a kernel slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub grid: SpaceGrid,
    pub values: Vec<f64>,
    pub t: f64,
}

impl GainRow {
    pub fn new(grid: SpaceGrid, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("gain row length does not match its grid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gain row contains non-finite values"));
        }
        Ok(Self { grid, values, t })
    }
}

fn check_alignment(state: &StateVector, kernel: &KernelSlice) -> Result<()> {
    if state.grid.len() != kernel.grid.n() {
        return Err(Error::invalid(format!(
            "state has {} nodes but the kernel grid has {}",
            state.grid.len(),
            kernel.grid.n()
        )));
    }
    if (state.t - kernel.t).abs() > 1e-9 * (1.0 + state.t.abs()) {
        return Err(Error::invalid(format!(
            "state time {} does not match kernel time {}",
            state.t, kernel.t
        )));
    }
    Ok(())
}

fn volterra(state: &StateVector, kernel: &KernelSlice, sign: f64) -> Result<StateVector> {
    check_alignment(state, kernel)?;
    let dx = state.grid.dx();
    let mut buf = Vec::with_capacity(state.grid.len());
    let values = (0..state.grid.len())
        .map(|i| {
            buf.clear();
            buf.extend(kernel.row(i).iter().zip(&state.values[..=i]).map(|(k, v)| k * v));
            state.values[i] + sign * trapezoid_unchecked(&buf, dx)
        })
        .collect();
    Ok(StateVector { grid: state.grid, values, t: state.t })
}

/// `w(x) = v(x) - int_0^x k(x, y) v(y) dy`.
pub fn forward_transform(v: &StateVector, k: &KernelSlice) -> Result<StateVector> {
    volterra(v, k, -1.0)
}

/// `v(x) = w(x) + int_0^x l(x, y) w(y) dy`.
pub fn inverse_transform(w: &StateVector, l: &KernelSlice) -> Result<StateVector> {
    volterra(w, l, 1.0)
}

/// Top row `k(1, ., t)` of a slice.
pub fn control_gain(k: &KernelSlice) -> GainRow {
    let n = k.grid.n();
    GainRow { grid: k.grid.space(), values: k.row(n - 1).to_vec(), t: k.t }
}

/// `U = int_0^1 g(y) v(y) dy`.
pub fn control_u(g: &GainRow, v: &StateVector) -> Result<f64> {
    if g.grid != v.grid {
        return Err(Error::invalid("gain row and state live on different grids"));
    }
    let prod: Vec<f64> = g.values.iter().zip(&v.values).map(|(a, b)| a * b).collect();
    Ok(trapezoid_unchecked(&prod, g.grid.dx()))
}
