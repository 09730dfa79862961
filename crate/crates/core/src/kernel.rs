//! Backstepping kernels on the triangle `0 <= y <= x <= 1`.
//!
//! Both the direct kernel `k` and the inverse kernel `l` satisfy a Goursat
//! problem at every time level,
//!
//! ```text
//! theta (k_xx - k_yy) = r k + k_t,   k_y(x, 0) = q k(x, 0),
//! k(x, x) = -1/(2 theta) int_0^x gamma,
//! ```
//!
//! with `r = gamma(y, t)` for `k` and `r = -gamma(x, t)` for `l`. In the
//! characteristic variables `xi = x + y`, `eta = x - y` this becomes
//! `4 theta G_{xi eta} = r G + f`, which integrates to a Volterra equation
//! solved here by Picard iteration on a lattice of spacing `dx` in both
//! `xi` and `eta`. Even-parity lattice points are the nodes of the
//! triangular grid; odd-parity points sit at half nodes.
//!
//! The time derivative is carried by a first-order correction: the kernel at
//! `t` is the frozen-coefficient kernel `S(t)` plus the zero-data solution
//! driven by `(S(t) - S(t - dt)) / dt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    cumulative_trapezoid, gamma_field, trapezoid_unchecked, CoeffSpec, GainSchedule, SpaceGrid,
    TimeGrid, TriGrid,
};

/// Which of the two kernel problems a slice or trajectory solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Direct,
    Inverse,
}

/// Kernel values on a [`TriGrid`] at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSlice {
    pub grid: TriGrid,
    pub values: Vec<f64>,
    pub t: f64,
}

impl KernelSlice {
    pub fn zeros(grid: TriGrid, t: f64) -> Self {
        Self { grid, values: vec![0.0; grid.node_count()], t }
    }

    pub fn from_fn(grid: TriGrid, t: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let dx = grid.dx();
        let values = grid.nodes().map(|(i, j)| f(i as f64 * dx, j as f64 * dx)).collect();
        Self { grid, values, t }
    }

    pub fn new(grid: TriGrid, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::invalid(format!(
                "kernel slice needs {} values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        Ok(Self { grid, values, t })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// Row `x = x_i`, i.e. `k(x_i, y_j)` for `j = 0..=i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let start = self.grid.index(i, 0);
        &self.values[start..start + i + 1]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `L^2(Omega)` norm by the trapezoid rule along `y` and then `x`.
    pub fn l2_norm(&self) -> f64 {
        let dx = self.grid.dx();
        let rows: Vec<f64> = (0..self.grid.n())
            .map(|i| {
                let sq: Vec<f64> = self.row(i).iter().map(|v| v * v).collect();
                trapezoid_unchecked(&sq, dx)
            })
            .collect();
        trapezoid_unchecked(&rows, dx).sqrt()
    }

    /// Largest deviation of the diagonal from `-1/(2 theta) int_0^x gamma`.
    pub fn diagonal_violation(&self, gamma: &[f64], theta: f64) -> Result<f64> {
        if gamma.len() != self.grid.n() {
            return Err(Error::invalid("gamma field does not match the kernel grid"));
        }
        let cum = cumulative_trapezoid(gamma, self.grid.dx());
        Ok((0..self.grid.n())
            .map(|i| (self.get(i, i) + cum[i] / (2.0 * theta)).abs())
            .fold(0.0, f64::max))
    }

    /// Max-norm residual of `theta (k_xx - k_yy) - r k` at interior nodes with
    /// full central stencils. This is the `O(dx^2)` truncation error of the
    /// lattice solution, reported as a diagnostic.
    pub fn stationary_residual(&self, kind: KernelKind, gamma: &[f64], theta: f64) -> f64 {
        let n = self.grid.n();
        let h2 = self.grid.dx() * self.grid.dx();
        let mut worst = 0.0_f64;
        for i in 2..n.saturating_sub(1) {
            for j in 1..i {
                let kxx = self.get(i + 1, j) - 2.0 * self.get(i, j) + self.get(i - 1, j);
                let kyy = self.get(i, j + 1) - 2.0 * self.get(i, j) + self.get(i, j - 1);
                let r = match kind {
                    KernelKind::Direct => gamma[j],
                    KernelKind::Inverse => -gamma[i],
                };
                worst = worst.max((theta * (kxx - kyy) / h2 - r * self.get(i, j)).abs());
            }
        }
        worst
    }

    /// Discrete Robin residual `k_y(x, 0) - q k(x, 0)` with the second-order
    /// one-sided difference, maximized over rows with at least three nodes.
    pub fn robin_residual(&self, q: f64) -> f64 {
        let dx = self.grid.dx();
        (2..self.grid.n())
            .map(|i| {
                let ky = (-3.0 * self.get(i, 0) + 4.0 * self.get(i, 1) - self.get(i, 2)) / (2.0 * dx);
                (ky - q * self.get(i, 0)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Time-ordered kernel slices on one time grid.
#[derive(Debug, Clone)]
pub struct KernelTrajectory {
    pub kind: KernelKind,
    pub time_grid: TimeGrid,
    pub slices: Vec<KernelSlice>,
}

impl KernelTrajectory {
    pub fn grid(&self) -> TriGrid {
        self.slices[0].grid
    }

    /// `sup_t ||k(., ., t)||_inf`.
    pub fn sup_norm(&self) -> f64 {
        self.slices.iter().map(KernelSlice::sup_norm).fold(0.0, f64::max)
    }

    /// Slice at the stored time nearest to `t`.
    pub fn slice_near(&self, t: f64) -> &KernelSlice {
        &self.slices[self.time_grid.nearest_index(t).min(self.slices.len() - 1)]
    }
}

/// Settings of the Picard iteration and of the time correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSolverOptions {
    /// Max-norm change per Picard sweep at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Add the first-order `k_t` correction when stepping in time.
    pub time_correction: bool,
}

impl Default for KernelSolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, time_correction: true }
    }
}

/// `true` iff `theta dt / dx^2 <= 1/2`.
pub fn cfl_check(theta: f64, dx: f64, dt: f64) -> bool {
    theta * dt / (dx * dx) <= 0.5
}

/// Characteristic lattice `{(a, b) : 0 <= b <= N, b <= a <= 2N - b}` with
/// rows indexed by `b` (the `eta` index) stored contiguously.
#[derive(Debug, Clone)]
struct Lattice {
    intervals: usize,
    offsets: Vec<usize>,
    len: usize,
}

impl Lattice {
    fn new(grid: TriGrid) -> Self {
        let big_n = grid.n() - 1;
        let mut offsets = Vec::with_capacity(big_n + 2);
        let mut acc = 0;
        for b in 0..=big_n {
            offsets.push(acc);
            acc += 2 * (big_n - b) + 1;
        }
        offsets.push(acc);
        Self { intervals: big_n, offsets, len: acc }
    }

    #[inline]
    fn idx(&self, a: usize, b: usize) -> usize {
        self.offsets[b] + (a - b)
    }

    #[inline]
    fn row_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// `(a, b)` for grid node `(i, j)`.
    #[inline]
    fn node(i: usize, j: usize) -> (usize, usize) {
        (i + j, i - j)
    }
}

/// `gamma` on the half-node grid `y = m dx / 2`, `m = 0..=2N`.
fn half_node_values(gamma: &[f64]) -> Vec<f64> {
    let big_n = gamma.len() - 1;
    (0..=2 * big_n)
        .map(|m| {
            if m % 2 == 0 {
                gamma[m / 2]
            } else {
                0.5 * (gamma[m / 2] + gamma[m / 2 + 1])
            }
        })
        .collect()
}

/// Inputs of one Goursat solve on the lattice.
struct GoursatData {
    /// Reaction `r(a, b)` on the lattice.
    reaction: Vec<f64>,
    /// Diagonal datum `D(xi_a)`, `a = 0..=2N`.
    datum: Vec<f64>,
    /// `dD/dxi` at `xi_c`, `c = 0..=N`.
    datum_slope: Vec<f64>,
}

struct GoursatSolver {
    lattice: Lattice,
    dx: f64,
    theta: f64,
    q: f64,
    opts: KernelSolverOptions,
}

impl GoursatSolver {
    fn new(grid: TriGrid, theta: f64, q: f64, opts: KernelSolverOptions) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::invalid(format!("theta must be positive, got {theta}")));
        }
        if !(q >= 0.0) || !q.is_finite() {
            return Err(Error::invalid(format!("q must be nonnegative, got {q}")));
        }
        if !(opts.tol > 0.0) {
            return Err(Error::invalid(format!("tolerance must be positive, got {}", opts.tol)));
        }
        Ok(Self { lattice: Lattice::new(grid), dx: grid.dx(), theta, q, opts })
    }

    fn data(&self, kind: KernelKind, gamma: &[f64]) -> Result<GoursatData> {
        let big_n = self.lattice.intervals;
        if gamma.len() != big_n + 1 {
            return Err(Error::invalid(format!(
                "gamma has {} samples, kernel grid has {}",
                gamma.len(),
                big_n + 1
            )));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("gamma contains non-finite values"));
        }
        let half = half_node_values(gamma);
        let mut reaction = vec![0.0; self.lattice.len];
        for b in 0..=big_n {
            for a in b..=2 * big_n - b {
                reaction[self.lattice.idx(a, b)] = match kind {
                    KernelKind::Direct => half[a - b],
                    KernelKind::Inverse => -half[a + b],
                };
            }
        }
        // Even entries coincide with the coarse trapezoid on the grid nodes.
        let fine = cumulative_trapezoid(&half, 0.5 * self.dx);
        let coarse = cumulative_trapezoid(gamma, self.dx);
        let scale = -1.0 / (2.0 * self.theta);
        let datum = (0..=2 * big_n)
            .map(|a| scale * if a % 2 == 0 { coarse[a / 2] } else { fine[a] })
            .collect();
        let datum_slope = (0..=big_n).map(|c| -half[c] / (4.0 * self.theta)).collect();
        Ok(GoursatData { reaction, datum, datum_slope })
    }

    /// Zero diagonal datum, same reaction as `data`.
    fn homogeneous(data: &GoursatData) -> GoursatData {
        GoursatData {
            reaction: data.reaction.clone(),
            datum: vec![0.0; data.datum.len()],
            datum_slope: vec![0.0; data.datum_slope.len()],
        }
    }

    /// Picard iteration for `4 theta G_{xi eta} = r G + f`.
    fn solve(&self, data: &GoursatData, source: Option<&[f64]>) -> Result<Vec<f64>> {
        let lat = &self.lattice;
        let big_n = lat.intervals;
        let h = self.dx;
        let inv4t = 1.0 / (4.0 * self.theta);
        let decay = (-self.q * h).exp();

        let mut g = vec![0.0; lat.len];
        let mut f = vec![0.0; lat.len];
        let mut p_prev = vec![0.0; 2 * big_n + 1];
        let mut p_cur = vec![0.0; 2 * big_n + 1];
        let mut p_diag = vec![0.0; big_n + 1];
        let mut q_int = vec![0.0; lat.len];
        let mut change = f64::INFINITY;

        for sweep in 0..=self.opts.max_iter {
            for (k, fk) in f.iter_mut().enumerate() {
                let s = source.map_or(0.0, |s| s[k]);
                *fk = (data.reaction[k] * g[k] + s) * inv4t;
            }
            // P(a, b) = int_0^{eta_b} F(xi_a, s) ds, built row by row in b;
            // Q(a, b) = int_{eta_b}^{xi_a} P(tau, b) dtau within each row.
            p_prev.iter_mut().for_each(|v| *v = 0.0);
            for b in 0..=big_n {
                let row = lat.row_range(b);
                let lo = b;
                let hi = 2 * big_n - b;
                if b == 0 {
                    p_cur[lo..=hi].fill(0.0);
                } else {
                    let prev_row = lat.row_range(b - 1);
                    for a in lo..=hi {
                        let f_prev = f[prev_row.start + (a - (b - 1))];
                        let f_here = f[row.start + (a - b)];
                        p_cur[a] = p_prev[a] + 0.5 * h * (f_prev + f_here);
                    }
                }
                p_diag[b] = p_cur[b];
                let mut acc = 0.0;
                q_int[row.start] = 0.0;
                for a in lo + 1..=hi {
                    acc += 0.5 * h * (p_cur[a - 1] + p_cur[a]);
                    q_int[row.start + (a - b)] = acc;
                }
                std::mem::swap(&mut p_prev, &mut p_cur);
            }
            // Robin side: B' = 2 (D' + P(c, c)) - q B, B(0) = 0.
            let mut new_change = 0.0_f64;
            let mut boundary = 0.0;
            let mut drive_prev = 2.0 * (data.datum_slope[0] + p_diag[0]);
            for b in 0..=big_n {
                if b > 0 {
                    let drive = 2.0 * (data.datum_slope[b] + p_diag[b]);
                    boundary = decay * boundary + 0.5 * h * (decay * drive_prev + drive);
                    drive_prev = drive;
                }
                let row = lat.row_range(b);
                let shift = boundary - data.datum[b];
                for a in b..=2 * big_n - b {
                    let k = row.start + (a - b);
                    let value = shift + data.datum[a] + q_int[k];
                    new_change = new_change.max((value - g[k]).abs());
                    g[k] = value;
                }
            }
            if !new_change.is_finite() {
                return Err(Error::Numeric(format!(
                    "kernel iteration produced non-finite values at sweep {sweep}"
                )));
            }
            change = new_change;
            if change < self.opts.tol {
                return Ok(g);
            }
        }
        Err(Error::Convergence { iterations: self.opts.max_iter, residual: change })
    }

    fn to_slice(&self, grid: TriGrid, field: &[f64], t: f64) -> KernelSlice {
        let values = grid
            .nodes()
            .map(|(i, j)| {
                let (a, b) = Lattice::node(i, j);
                field[self.lattice.idx(a, b)]
            })
            .collect();
        KernelSlice { grid, values, t }
    }
}

/// Frozen-coefficient kernel for `gamma` sampled on the grid nodes.
pub fn solve_stationary(
    kind: KernelKind,
    gamma: &[f64],
    theta: f64,
    q: f64,
    grid: TriGrid,
    opts: KernelSolverOptions,
) -> Result<KernelSlice> {
    let solver = GoursatSolver::new(grid, theta, q, opts)?;
    let data = solver.data(kind, gamma)?;
    let field = solver.solve(&data, None)?;
    Ok(solver.to_slice(grid, &field, 0.0))
}

/// Frozen-coefficient direct kernel: `theta (k_xx - k_yy) = gamma(y) k`.
pub fn solve_stationary_kernel(
    gamma: &[f64],
    theta: f64,
    q: f64,
    grid: TriGrid,
    tol: f64,
    max_iter: usize,
) -> Result<KernelSlice> {
    let opts = KernelSolverOptions { tol, max_iter, time_correction: false };
    solve_stationary(KernelKind::Direct, gamma, theta, q, grid, opts)
}

/// Advances a kernel in time one level at a time.
///
/// The first slice is the frozen-coefficient kernel of the initial `gamma`.
/// Each [`advance`](Self::advance) returns `S(t) + C(t)` where `C` is driven
/// by the backward difference of the frozen-coefficient kernels.
pub struct KernelStepper {
    kind: KernelKind,
    grid: TriGrid,
    solver: GoursatSolver,
    frozen: Vec<f64>,
    current: KernelSlice,
}

impl KernelStepper {
    pub fn new(
        kind: KernelKind,
        gamma0: &[f64],
        t0: f64,
        theta: f64,
        q: f64,
        grid: TriGrid,
        opts: KernelSolverOptions,
    ) -> Result<Self> {
        let solver = GoursatSolver::new(grid, theta, q, opts)?;
        let data = solver.data(kind, gamma0)?;
        let frozen = solver.solve(&data, None)?;
        let current = solver.to_slice(grid, &frozen, t0);
        Ok(Self { kind, grid, solver, frozen, current })
    }

    pub fn current(&self) -> &KernelSlice {
        &self.current
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Moves to `t + dt` with `gamma_next = gamma(., t + dt)`.
    pub fn advance(&mut self, gamma_next: &[f64], dt: f64) -> Result<&KernelSlice> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let data = self.solver.data(self.kind, gamma_next)?;
        let frozen = self.solver.solve(&data, None)?;
        let t_next = self.current.t + dt;
        let mut field = frozen.clone();
        if self.solver.opts.time_correction {
            let rate: Vec<f64> = frozen
                .iter()
                .zip(&self.frozen)
                .map(|(new, old)| (new - old) / dt)
                .collect();
            if rate.iter().any(|r| *r != 0.0) {
                let homogeneous = GoursatSolver::homogeneous(&data);
                let correction = self.solver.solve(&homogeneous, Some(&rate))?;
                field.iter_mut().zip(&correction).for_each(|(k, c)| *k += c);
            }
        }
        self.frozen = frozen;
        self.current = self.solver.to_slice(self.grid, &field, t_next);
        if !self.current.is_finite() {
            return Err(Error::Numeric(format!("kernel became non-finite at t = {t_next}")));
        }
        Ok(&self.current)
    }
}

/// One time step of the kernel from `gamma_now` to `gamma_next`.
pub fn step_kernel(
    kind: KernelKind,
    gamma_now: &[f64],
    gamma_next: &[f64],
    t_now: f64,
    theta: f64,
    q: f64,
    grid: TriGrid,
    dt: f64,
    opts: KernelSolverOptions,
) -> Result<KernelSlice> {
    let mut stepper = KernelStepper::new(kind, gamma_now, t_now, theta, q, grid, opts)?;
    Ok(stepper.advance(gamma_next, dt)?.clone())
}

fn check_grid_fits(spec: &CoeffSpec, sched: &GainSchedule, tg: &TimeGrid) -> Result<()> {
    if let Some(h) = sched.horizon() {
        if tg.stop_time() >= h {
            return Err(Error::Domain("time grid reaches the gain singularity".into()));
        }
    }
    if let crate::grid::LambdaModel::ChebyshevBlowup { horizon, .. } = spec.lambda {
        if tg.stop_time() >= horizon {
            return Err(Error::Domain("time grid reaches the coefficient singularity".into()));
        }
    }
    Ok(())
}

/// Streams every slice of the trajectory on `tg` to `visit`, in time order.
pub fn for_each_kernel_slice(
    kind: KernelKind,
    spec: &CoeffSpec,
    sched: &GainSchedule,
    grid: TriGrid,
    tg: &TimeGrid,
    opts: KernelSolverOptions,
    mut visit: impl FnMut(usize, &KernelSlice) -> Result<()>,
) -> Result<()> {
    check_grid_fits(spec, sched, tg)?;
    let space = grid.space();
    let gamma0 = gamma_field(spec, sched, space, 0.0)?;
    let mut stepper = KernelStepper::new(kind, &gamma0, 0.0, spec.theta, spec.q, grid, opts)?;
    visit(0, stepper.current())?;
    for m in 1..=tg.steps() {
        let gamma = gamma_field(spec, sched, space, tg.time(m))?;
        let slice = stepper.advance(&gamma, tg.dt)?;
        // keep timestamps exactly on the grid
        let mut slice = slice.clone();
        slice.t = tg.time(m);
        stepper.current.t = slice.t;
        visit(m, &slice)?;
    }
    Ok(())
}

fn collect_trajectory(
    kind: KernelKind,
    spec: &CoeffSpec,
    sched: &GainSchedule,
    grid: TriGrid,
    tg: &TimeGrid,
    opts: KernelSolverOptions,
) -> Result<KernelTrajectory> {
    let mut slices = Vec::with_capacity(tg.steps() + 1);
    for_each_kernel_slice(kind, spec, sched, grid, tg, opts, |_, s| {
        slices.push(s.clone());
        Ok(())
    })?;
    Ok(KernelTrajectory { kind, time_grid: *tg, slices })
}

/// Direct kernel `k` on every time of `tg`.
pub fn solve_kernel_trajectory(
    spec: &CoeffSpec,
    sched: &GainSchedule,
    grid: TriGrid,
    tg: &TimeGrid,
    opts: KernelSolverOptions,
) -> Result<KernelTrajectory> {
    collect_trajectory(KernelKind::Direct, spec, sched, grid, tg, opts)
}

/// Inverse kernel `l` on every time of `tg`.
pub fn solve_inverse_kernel_trajectory(
    spec: &CoeffSpec,
    sched: &GainSchedule,
    grid: TriGrid,
    tg: &TimeGrid,
    opts: KernelSolverOptions,
) -> Result<KernelTrajectory> {
    collect_trajectory(KernelKind::Inverse, spec, sched, grid, tg, opts)
}

/// Slices at selected step indices of `tg`, equal to the corresponding
/// trajectory slices without marching through the intermediate steps.
pub fn kernel_slices_at_steps(
    kind: KernelKind,
    spec: &CoeffSpec,
    sched: &GainSchedule,
    grid: TriGrid,
    tg: &TimeGrid,
    steps: &[usize],
    opts: KernelSolverOptions,
) -> Result<Vec<KernelSlice>> {
    check_grid_fits(spec, sched, tg)?;
    let space = grid.space();
    steps
        .iter()
        .map(|&m| {
            if m > tg.steps() {
                return Err(Error::Domain(format!("step {m} beyond the time grid")));
            }
            let gamma_now = gamma_field(spec, sched, space, tg.time(m))?;
            if m == 0 {
                let solver = GoursatSolver::new(grid, spec.theta, spec.q, opts)?;
                let data = solver.data(kind, &gamma_now)?;
                return Ok(solver.to_slice(grid, &solver.solve(&data, None)?, 0.0));
            }
            let gamma_prev = gamma_field(spec, sched, space, tg.time(m - 1))?;
            let mut slice = step_kernel(
                kind,
                &gamma_prev,
                &gamma_now,
                tg.time(m - 1),
                spec.theta,
                spec.q,
                grid,
                tg.dt,
                opts,
            )?;
            slice.t = tg.time(m);
            Ok(slice)
        })
        .collect()
}

/// Max-norm residual of `l - k - int_y^x l(x, s) k(s, y) ds` over all nodes.
pub fn reciprocity_residual(k: &KernelSlice, l: &KernelSlice) -> Result<f64> {
    if k.grid != l.grid {
        return Err(Error::invalid("reciprocity needs kernels on the same grid"));
    }
    if (k.t - l.t).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "reciprocity needs matching timestamps, got {} and {}",
            k.t, l.t
        )));
    }
    let dx = k.grid.dx();
    let mut worst = 0.0_f64;
    let mut buf = Vec::with_capacity(k.grid.n());
    for (i, j) in k.grid.nodes() {
        buf.clear();
        buf.extend((j..=i).map(|m| l.get(i, m) * k.get(m, j)));
        let integral = trapezoid_unchecked(&buf, dx);
        worst = worst.max((l.get(i, j) - k.get(i, j) - integral).abs());
    }
    Ok(worst)
}

/// Gamma field for a slice's own grid and time.
pub fn slice_gamma(spec: &CoeffSpec, sched: &GainSchedule, slice: &KernelSlice) -> Result<Vec<f64>> {
    gamma_field(spec, sched, SpaceGrid::new(slice.grid.n())?, slice.t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{LambdaModel, TabulatedField};

    fn opts() -> KernelSolverOptions {
        KernelSolverOptions::default()
    }

    /// Modified Bessel `I_1(z) / z` by its power series.
    fn bessel_i1_over_z(z: f64) -> f64 {
        let quarter = z * z / 4.0;
        let mut term = 0.5;
        let mut sum = term;
        for m in 1..200 {
            term *= quarter / (m as f64 * (m + 1) as f64);
            sum += term;
            if term < 1e-18 * sum {
                break;
            }
        }
        sum
    }

    #[test]
    fn zero_gamma_gives_zero_kernel() {
        let grid = TriGrid::new(21).unwrap();
        let k = solve_stationary_kernel(&[0.0; 21], 1.0, 1.0, grid, 1e-8, 200).unwrap();
        assert!(k.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_gamma_diagonal() {
        let grid = TriGrid::new(21).unwrap();
        for theta in [1.0, 2.5] {
            let k = solve_stationary_kernel(&[3.0; 21], theta, 1.0, grid, 1e-8, 200).unwrap();
            for i in 0..21 {
                let x = i as f64 * grid.dx();
                assert!((k.get(i, i) + 3.0 * x / (2.0 * theta)).abs() < 1e-12);
            }
            assert_eq!(k.get(0, 0), 0.0);
        }
    }

    #[test]
    fn matches_bessel_kernel_for_neumann_end() {
        // q = 0: k(x, y) = -(g / theta) x I_1(z) / z, z = sqrt(g (x^2 - y^2) / theta).
        let (g, theta) = (4.0, 1.3);
        let mut prev = f64::INFINITY;
        for n in [21, 41, 81] {
            let grid = TriGrid::new(n).unwrap();
            let k = solve_stationary(KernelKind::Direct, &vec![g; n], theta, 0.0, grid, opts())
                .unwrap();
            let dx = grid.dx();
            let err = grid
                .nodes()
                .map(|(i, j)| {
                    let (x, y) = (i as f64 * dx, j as f64 * dx);
                    let z = (g * (x * x - y * y) / theta).sqrt();
                    (k.get(i, j) + g / theta * x * bessel_i1_over_z(z)).abs()
                })
                .fold(0.0, f64::max);
            assert!(err < prev / 3.0, "n = {n}: error {err} vs previous {prev}");
            prev = err;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn inverse_matches_bessel_j_kernel_for_neumann_end() {
        // q = 0: l(x, y) = -(g / theta) x J_1(z) / z.
        let (g, theta) = (4.0, 1.0);
        let n = 81;
        let grid = TriGrid::new(n).unwrap();
        let l = solve_stationary(KernelKind::Inverse, &vec![g; n], theta, 0.0, grid, opts()).unwrap();
        let j1_over_z = |z: f64| {
            let quarter = z * z / 4.0;
            let mut term = 0.5;
            let mut sum = term;
            for m in 1..200 {
                term *= -quarter / (m as f64 * (m + 1) as f64);
                sum += term;
            }
            sum
        };
        let dx = grid.dx();
        let err = grid
            .nodes()
            .map(|(i, j)| {
                let (x, y) = (i as f64 * dx, j as f64 * dx);
                let z = (g * (x * x - y * y) / theta).sqrt();
                (l.get(i, j) + g / theta * x * j1_over_z(z)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn self_convergence_constant_gamma() {
        let coarse =
            solve_stationary_kernel(&[1.0; 101], 1.0, 1.0, TriGrid::new(101).unwrap(), 1e-8, 200)
                .unwrap();
        let fine =
            solve_stationary_kernel(&[1.0; 201], 1.0, 1.0, TriGrid::new(201).unwrap(), 1e-8, 200)
                .unwrap();
        let diff = coarse
            .grid
            .nodes()
            .map(|(i, j)| (coarse.get(i, j) - fine.get(2 * i, 2 * j)).abs())
            .fold(0.0, f64::max);
        assert!(diff < 5e-3, "{diff}");
    }

    #[test]
    fn robin_condition_holds_to_discretization_accuracy() {
        let mut prev = f64::INFINITY;
        for n in [21, 41, 81] {
            let k = solve_stationary_kernel(&vec![2.0; n], 1.0, 1.0, TriGrid::new(n).unwrap(), 1e-10, 200)
                .unwrap();
            let r = k.robin_residual(1.0);
            assert!(r < prev / 2.5, "n = {n}: {r} vs {prev}");
            prev = r;
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let grid = TriGrid::new(21).unwrap();
        let err = solve_stationary_kernel(&[50.0; 21], 1.0, 1.0, grid, 1e-8, 3).unwrap_err();
        assert!(matches!(err, Error::Convergence { iterations: 3, .. }));
    }

    #[test]
    fn bad_inputs() {
        let grid = TriGrid::new(5).unwrap();
        assert!(solve_stationary_kernel(&[1.0; 4], 1.0, 1.0, grid, 1e-8, 10).is_err());
        assert!(solve_stationary_kernel(&[f64::NAN; 5], 1.0, 1.0, grid, 1e-8, 10).is_err());
        assert!(solve_stationary_kernel(&[1.0; 5], 1.0, 1.0, grid, 0.0, 10).is_err());
    }

    #[test]
    fn cfl_examples() {
        assert!(cfl_check(1.0, 0.05, 6.25e-4));
        assert!((1.0 * 6.25e-4 / (0.05 * 0.05) - 0.25_f64).abs() < 1e-12);
        assert!(!cfl_check(1.0, 0.05, 2e-3));
        assert!(cfl_check(1.0, 0.05, 1.25e-3));
        assert!(!cfl_check(2.0, 0.05, 1.25e-3));
        assert!(cfl_check(2.0, 0.05, 0.625e-3));
    }

    #[test]
    fn stationary_is_fixed_point_of_step() {
        let grid = TriGrid::new(21).unwrap();
        let gamma: Vec<f64> = (0..21).map(|i| 2.0 + (i as f64 * 0.3).sin()).collect();
        let tol = 1e-8;
        let dt = 6.25e-4;
        let k0 = solve_stationary(KernelKind::Direct, &gamma, 1.0, 1.0, grid, opts()).unwrap();
        let k1 = step_kernel(KernelKind::Direct, &gamma, &gamma, 0.0, 1.0, 1.0, grid, dt, opts())
            .unwrap();
        let drift = k0.values.iter().zip(&k1.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift <= 10.0 * dt * tol);
        assert!((k1.t - dt).abs() < 1e-15);
    }

    #[test]
    fn zero_stays_zero() {
        let grid = TriGrid::new(11).unwrap();
        let z = vec![0.0; 11];
        let k = step_kernel(KernelKind::Direct, &z, &z, 0.0, 1.0, 1.0, grid, 1e-3, opts()).unwrap();
        assert!(k.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_step_scenario_coefficients() {
        let spec = CoeffSpec::chebyshev(3.3, 8.0);
        let sched = GainSchedule::prescribed(8.0);
        let grid = TriGrid::new(21).unwrap();
        let dt = 6.25e-4;
        let space = grid.space();
        let g0 = gamma_field(&spec, &sched, space, 0.0).unwrap();
        let g1 = gamma_field(&spec, &sched, space, dt).unwrap();
        let k = step_kernel(KernelKind::Direct, &g0, &g1, 0.0, 1.0, 1.0, grid, dt, opts()).unwrap();
        assert!(k.is_finite());
        assert!(k.diagonal_violation(&g1, 1.0).unwrap() < 1e-10);
        assert_eq!(k.get(0, 0), 0.0);
        // regression values for the top row
        let top = k.row(20);
        assert!((top[20] - (-0.5 * trapezoid_unchecked(&g1, 0.05))).abs() < 1e-12);
        assert!(top[0] < 0.0 && top[10] < 0.0);
    }

    fn frozen_spec(gamma0: f64, n: usize) -> (CoeffSpec, GainSchedule) {
        let space = SpaceGrid::new(n).unwrap();
        let field = TabulatedField::new(space, 0.0, 1.0, vec![vec![gamma0; n]]).unwrap();
        let spec = CoeffSpec::new(LambdaModel::Tabulated(field), 1.0, 1.0).unwrap();
        let sched = GainSchedule::Tabulated { t0: 0.0, dt: 1.0, values: vec![0.0] };
        (spec, sched)
    }

    #[test]
    fn frozen_coefficients_keep_stationary_kernel() {
        let (spec, sched) = frozen_spec(2.0, 21);
        let grid = TriGrid::new(21).unwrap();
        let tg = TimeGrid::new(0.05, 2.0, 0.5).unwrap();
        let traj = solve_kernel_trajectory(&spec, &sched, grid, &tg, opts()).unwrap();
        assert_eq!(traj.slices.len(), tg.steps() + 1);
        let first = &traj.slices[0];
        for s in &traj.slices {
            let d = s.values.iter().zip(&first.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= 10.0 * 1e-8);
        }
        assert!(traj.slices.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn theta_scaling() {
        // (theta, gamma) at time t equals (1, gamma/theta) at time theta t.
        let theta = 2.0;
        let grid = TriGrid::new(11).unwrap();
        let space = grid.space();
        let gamma_at = |t: f64| -> Vec<f64> {
            (0..11).map(|i| 1.0 + t * t + space.x(i)).collect()
        };
        let dt = 0.01;
        let mut a = KernelStepper::new(KernelKind::Direct, &gamma_at(0.0), 0.0, theta, 1.0, grid, opts())
            .unwrap();
        let scaled = |t: f64| gamma_at(t).iter().map(|g| g / theta).collect::<Vec<_>>();
        let mut b = KernelStepper::new(KernelKind::Direct, &scaled(0.0), 0.0, 1.0, 1.0, grid, opts())
            .unwrap();
        for m in 1..=20 {
            let t = m as f64 * dt;
            let ka = a.advance(&gamma_at(t), dt).unwrap().clone();
            let kb = b.advance(&scaled(t), theta * dt).unwrap().clone();
            let d = ka.values.iter().zip(&kb.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-9, "step {m}: {d}");
        }
    }

    #[test]
    fn inverse_zero_and_reciprocity() {
        let grid = TriGrid::new(11).unwrap();
        let l = solve_stationary(KernelKind::Inverse, &[0.0; 11], 1.0, 1.0, grid, opts()).unwrap();
        assert!(l.values.iter().all(|v| *v == 0.0));
        let z = KernelSlice::zeros(grid, 0.0);
        assert_eq!(reciprocity_residual(&z, &z).unwrap(), 0.0);
        let other = KernelSlice::zeros(TriGrid::new(5).unwrap(), 0.0);
        assert!(reciprocity_residual(&z, &other).is_err());
    }

    #[test]
    fn reciprocity_converges() {
        let residual = |n: usize| {
            let grid = TriGrid::new(n).unwrap();
            let g = vec![0.5; n];
            let k = solve_stationary(KernelKind::Direct, &g, 1.0, 1.0, grid, opts()).unwrap();
            let l = solve_stationary(KernelKind::Inverse, &g, 1.0, 1.0, grid, opts()).unwrap();
            reciprocity_residual(&k, &l).unwrap()
        };
        let r51 = residual(51);
        let r101 = residual(101);
        assert!(r101 < r51);
        assert!(r101 < 1e-2);
        // second order in dx
        assert!(r51 / r101 > 3.0, "{r51} {r101}");
    }

    #[test]
    fn sampled_steps_match_trajectory() {
        let spec = CoeffSpec::chebyshev(2.7, 8.0);
        let sched = GainSchedule::prescribed(8.0);
        let grid = TriGrid::new(11).unwrap();
        let tg = TimeGrid::new(0.1, 8.0, 0.4).unwrap();
        let traj = solve_kernel_trajectory(&spec, &sched, grid, &tg, opts()).unwrap();
        let picks = [0, 1, 17, tg.steps()];
        let sampled = kernel_slices_at_steps(KernelKind::Direct, &spec, &sched, grid, &tg, &picks, opts())
            .unwrap();
        for (s, &m) in sampled.iter().zip(&picks) {
            assert_eq!(s.values, traj.slices[m].values);
            assert_eq!(s.t, traj.slices[m].t);
        }
    }
}
