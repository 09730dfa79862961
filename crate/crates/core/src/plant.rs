//! Crank-Nicolson simulation of `v_t = theta v_xx + lambda(x, t) v` with
//! `v_x(0) = q v(0)` and boundary actuation `v(1) = U(t)`.
//!
//! Diffusion and reaction are both implicit at the half step. The Robin row
//! uses the second-order one-sided difference and is folded back into
//! tridiagonal form. Linear feedback laws `U = int g v + d` are imposed
//! implicitly: the step is affine in `U`, so two tridiagonal solves and one
//! scalar equation give the exact closed-loop update.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{
    cumulative_trapezoid, eval_c, lambda_field, trapezoid_unchecked, CoeffSpec, GainSchedule,
    SpaceGrid, TimeGrid,
};
use crate::kernel::{KernelKind, KernelSlice, KernelTrajectory};
use crate::operator::{FeedbackSurrogate, KernelSurrogate};
use crate::transform::{control_gain, forward_transform, GainRow, StateVector};

/// States above this max-norm count as blown up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

/// Gain rows `k(1, ., t_m)` for every time of a time grid.
#[derive(Debug, Clone)]
pub struct GainTable {
    pub time_grid: TimeGrid,
    pub rows: Vec<GainRow>,
}

impl GainTable {
    pub fn from_trajectory(traj: &KernelTrajectory) -> Result<Self> {
        if traj.kind != KernelKind::Direct {
            return Err(Error::invalid("feedback gains come from the direct kernel"));
        }
        Ok(Self { time_grid: traj.time_grid, rows: traj.slices.iter().map(control_gain).collect() })
    }

    fn covers(&self, tg: &TimeGrid, grid: SpaceGrid) -> Result<()> {
        if self.rows.len() < tg.steps() + 1 || (self.time_grid.dt - tg.dt).abs() > 1e-15 {
            return Err(Error::invalid("gain table does not cover the simulation time grid"));
        }
        if self.rows[0].grid != grid {
            return Err(Error::invalid("gain table grid differs from the state grid"));
        }
        Ok(())
    }
}

/// Boundary control law used by [`simulate`].
pub enum Controller {
    /// `U = 0`.
    OpenLoop,
    /// `U = int k(1, y, t) v(y, t) dy` with solved kernels.
    AnalyticKernel(GainTable),
    /// Same law with surrogate kernels `k_hat(1, y, t)`.
    NoKernel(KernelSurrogate),
    /// `U = G_hat(lambda, v(., t), t)` from the feedback surrogate.
    NoFeedback(FeedbackSurrogate),
    /// Base law plus a uniform draw from `[-epsilon, epsilon]` each step.
    PerturbedExact { base: Box<Controller>, epsilon: f64, seed: u64 },
}

impl Controller {
    pub fn analytic(traj: &KernelTrajectory) -> Result<Self> {
        Ok(Controller::AnalyticKernel(GainTable::from_trajectory(traj)?))
    }

    pub fn perturbed(base: Controller, epsilon: f64, seed: u64) -> Self {
        Controller::PerturbedExact { base: Box::new(base), epsilon, seed }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Controller::OpenLoop => "open-loop",
            Controller::AnalyticKernel(_) => "analytic",
            Controller::NoKernel(_) => "no-kernel",
            Controller::NoFeedback(_) => "no-feedback",
            Controller::PerturbedExact { .. } => "perturbed",
        }
    }
}

/// Time history of a simulation. `controls[m]` is the boundary value applied
/// on the step ending at `t_{m+1}`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub controls: Vec<f64>,
    pub time_grid: TimeGrid,
    pub blown_up: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn l2_norms(&self) -> Vec<f64> {
        self.states.iter().map(StateVector::l2_norm).collect()
    }

    /// `||v(., t_end)|| / ||v_0||`.
    pub fn terminal_ratio(&self) -> f64 {
        self.final_state().l2_norm() / self.states[0].l2_norm()
    }

    /// Writes `<run_id>_state.csv` (`t,x,v`) and `<run_id>_scalar.csv`
    /// (`t,U,l2norm`); `comment` becomes a leading `#` line.
    pub fn write_csv(&self, dir: &Path, run_id: &str, comment: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state_path = dir.join(format!("{run_id}_state.csv"));
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("t,x,v\n");
        for s in &self.states {
            for (i, v) in s.values.iter().enumerate() {
                out.push_str(&format!("{},{},{:e}\n", s.t, s.grid.x(i), v));
            }
        }
        write_file(&state_path, out.as_bytes())?;

        let scalar_path = dir.join(format!("{run_id}_scalar.csv"));
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("t,U,l2norm\n");
        for (m, s) in self.states.iter().enumerate() {
            let u = if m == 0 { *s.values.last().unwrap() } else { self.controls[m - 1] };
            out.push_str(&format!("{},{:e},{:e}\n", s.t, u, s.l2_norm()));
        }
        write_file(&scalar_path, out.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Thomas algorithm; `lower[0]` and `upper[n-1]` are ignored.
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot.abs() < 1e-300 {
        return Err(Error::Numeric("singular tridiagonal system (zero pivot)".into()));
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot.abs() < 1e-300 || !pivot.is_finite() {
            return Err(Error::Numeric(format!("singular tridiagonal system at row {i}")));
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// One Crank-Nicolson step, written as `v_next = base + U * unit`.
struct AffineStep {
    base: Vec<f64>,
    unit: Vec<f64>,
}

impl AffineStep {
    fn at(&self, u: f64) -> Vec<f64> {
        self.base.iter().zip(&self.unit).map(|(a, b)| a + u * b).collect()
    }
}

fn crank_nicolson_affine(
    v: &StateVector,
    lambda_now: &[f64],
    lambda_next: &[f64],
    theta: f64,
    q: f64,
    dt: f64,
) -> Result<AffineStep> {
    let n = v.grid.len();
    if n < 3 {
        return Err(Error::invalid("the plant needs at least 3 grid nodes"));
    }
    if lambda_now.len() != n || lambda_next.len() != n {
        return Err(Error::invalid("reaction field does not match the state grid"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let dx = v.grid.dx();
    let r = theta * dt / (2.0 * dx * dx);
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];

    for i in 1..n - 1 {
        lower[i] = -r;
        diag[i] = 1.0 + 2.0 * r - 0.5 * dt * lambda_next[i];
        upper[i] = -r;
        let u = &v.values;
        rhs[i] = r * u[i - 1] + (1.0 - 2.0 * r + 0.5 * dt * lambda_now[i]) * u[i] + r * u[i + 1];
    }
    // (-3 v0 + 4 v1 - v2) / (2 dx) = q v0, with v2 eliminated through row 1.
    let (mut a0, mut a1, a2) = (-1.5 / dx - q, 2.0 / dx, -0.5 / dx);
    let factor = a2 / upper[1];
    a0 -= factor * lower[1];
    a1 -= factor * diag[1];
    diag[0] = a0;
    upper[0] = a1;
    rhs[0] = -factor * rhs[1];

    diag[n - 1] = 1.0;
    lower[n - 1] = 0.0;

    rhs[n - 1] = 0.0;
    let base = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;

    let mut unit_rhs = vec![0.0; n];
    unit_rhs[n - 1] = 1.0;
    let unit = solve_tridiagonal(&lower, &diag, &upper, &unit_rhs)?;
    Ok(AffineStep { base, unit })
}

/// One step with the Dirichlet value `u_next` imposed at `x = 1`.
pub fn step_plant(
    v: &StateVector,
    lambda_now: &[f64],
    lambda_next: &[f64],
    theta: f64,
    q: f64,
    u_next: f64,
    dt: f64,
) -> Result<StateVector> {
    let step = crank_nicolson_affine(v, lambda_now, lambda_next, theta, q, dt)?;
    let mut values = step.at(u_next);
    *values.last_mut().unwrap() = u_next;
    Ok(StateVector { grid: v.grid, values, t: v.t + dt })
}

/// One step under `U = int g v_next + offset`, solved exactly. Returns the new
/// state and the applied `U`.
pub fn step_plant_feedback(
    v: &StateVector,
    lambda_now: &[f64],
    lambda_next: &[f64],
    theta: f64,
    q: f64,
    gain: &GainRow,
    offset: f64,
    dt: f64,
) -> Result<(StateVector, f64)> {
    if gain.grid != v.grid {
        return Err(Error::invalid("gain row grid differs from the state grid"));
    }
    let step = crank_nicolson_affine(v, lambda_now, lambda_next, theta, q, dt)?;
    let dx = v.grid.dx();
    let weighted = |f: &[f64]| {
        let prod: Vec<f64> = gain.values.iter().zip(f).map(|(g, x)| g * x).collect();
        trapezoid_unchecked(&prod, dx)
    };
    let denom = 1.0 - weighted(&step.unit);
    if denom.abs() < 1e-300 || !denom.is_finite() {
        return Err(Error::Numeric("closed-loop boundary equation is singular".into()));
    }
    let u = (weighted(&step.base) + offset) / denom;
    let mut values = step.at(u);
    *values.last_mut().unwrap() = u;
    Ok((StateVector { grid: v.grid, values, t: v.t + dt }, u))
}

/// One step under a nonlinear law `U = law(v_next)`, solved by secant
/// iteration on the affine dependence of `v_next` on `U`.
fn step_plant_implicit(
    v: &StateVector,
    lambda_now: &[f64],
    lambda_next: &[f64],
    theta: f64,
    q: f64,
    dt: f64,
    mut law: impl FnMut(&StateVector) -> Result<f64>,
) -> Result<(StateVector, f64)> {
    let step = crank_nicolson_affine(v, lambda_now, lambda_next, theta, q, dt)?;
    let t_next = v.t + dt;
    let mut eval = |u: f64| -> Result<f64> {
        let mut values = step.at(u);
        *values.last_mut().unwrap() = u;
        let s = StateVector { grid: v.grid, values, t: t_next };
        Ok(law(&s)? - u)
    };
    let mut u0 = *v.values.last().unwrap();
    let mut f0 = eval(u0)?;
    let mut u1 = u0 + f0;
    let mut f1 = eval(u1)?;
    for _ in 0..30 {
        if f1.abs() <= 1e-12 * (1.0 + u1.abs()) || f1 == f0 {
            break;
        }
        let u2 = u1 - f1 * (u1 - u0) / (f1 - f0);
        u0 = u1;
        f0 = f1;
        u1 = u2;
        f1 = eval(u1)?;
    }
    if !u1.is_finite() {
        return Err(Error::Numeric("feedback surrogate produced a non-finite control".into()));
    }
    let mut values = step.at(u1);
    *values.last_mut().unwrap() = u1;
    Ok((StateVector { grid: v.grid, values, t: t_next }, u1))
}

enum Law<'a> {
    Zero,
    Linear { gain: GainRow, offset: f64 },
    Surrogate { op: &'a FeedbackSurrogate, offset: f64 },
}

fn law_at<'a>(ctrl: &'a Controller, m_next: usize, t_next: f64, grid: SpaceGrid) -> Result<Law<'a>> {
    Ok(match ctrl {
        Controller::OpenLoop => Law::Zero,
        Controller::AnalyticKernel(table) => {
            Law::Linear { gain: table.rows[m_next].clone(), offset: 0.0 }
        }
        Controller::NoKernel(sur) => Law::Linear { gain: sur.gain_row(grid, t_next)?, offset: 0.0 },
        Controller::NoFeedback(sur) => Law::Surrogate { op: sur, offset: 0.0 },
        Controller::PerturbedExact { base, .. } => law_at(base, m_next, t_next, grid)?,
    })
}

fn validate_controller(ctrl: &Controller, tg: &TimeGrid, grid: SpaceGrid) -> Result<()> {
    match ctrl {
        Controller::AnalyticKernel(table) => table.covers(tg, grid),
        Controller::NoKernel(s) => s.covers(tg),
        Controller::NoFeedback(s) => s.covers(tg),
        Controller::PerturbedExact { base, epsilon, .. } => {
            if !(*epsilon >= 0.0) {
                return Err(Error::invalid("perturbation size must be nonnegative"));
            }
            validate_controller(base, tg, grid)
        }
        Controller::OpenLoop => Ok(()),
    }
}

/// Runs the plant on `tg` from `v0` under `ctrl`.
pub fn simulate(
    spec: &CoeffSpec,
    sched: &GainSchedule,
    ctrl: &Controller,
    tg: &TimeGrid,
    v0: &StateVector,
) -> Result<Trajectory> {
    eval_c(sched, tg.stop_time())?;
    validate_controller(ctrl, tg, v0.grid)?;
    let mut rng = match ctrl {
        Controller::PerturbedExact { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let epsilon = match ctrl {
        Controller::PerturbedExact { epsilon, .. } => *epsilon,
        _ => 0.0,
    };

    let grid = v0.grid;
    let mut state = StateVector { t: 0.0, ..v0.clone() };
    let mut states = Vec::with_capacity(tg.steps() + 1);
    let mut controls = Vec::with_capacity(tg.steps());
    let mut lambda_now = lambda_field(spec, grid, 0.0)?;
    states.push(state.clone());
    let mut blown_up = false;

    for m in 0..tg.steps() {
        let t_next = tg.time(m + 1);
        let lambda_next = lambda_field(spec, grid, t_next)?;
        let disturbance = match rng.as_mut() {
            Some(r) => epsilon * (2.0 * r.gen::<f64>() - 1.0),
            None => 0.0,
        };
        let (mut next, u) = match law_at(ctrl, m + 1, t_next, grid)? {
            Law::Zero => {
                let s = step_plant(&state, &lambda_now, &lambda_next, spec.theta, spec.q, disturbance, tg.dt)?;
                (s, disturbance)
            }
            Law::Linear { gain, offset } => step_plant_feedback(
                &state,
                &lambda_now,
                &lambda_next,
                spec.theta,
                spec.q,
                &gain,
                offset + disturbance,
                tg.dt,
            )?,
            Law::Surrogate { op, offset } => step_plant_implicit(
                &state,
                &lambda_now,
                &lambda_next,
                spec.theta,
                spec.q,
                tg.dt,
                |s| Ok(op.control(s, t_next)? + offset + disturbance),
            )?,
        };
        next.t = t_next;
        controls.push(u);
        let too_big = next.values.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD);
        if too_big {
            blown_up = true;
            if next.values.iter().all(|v| v.is_finite()) {
                states.push(next);
            } else {
                controls.pop();
            }
            break;
        }
        states.push(next.clone());
        state = next;
        lambda_now = lambda_next;
    }
    Ok(Trajectory { states, controls, time_grid: *tg, blown_up })
}

/// Per-time residuals of the target system along a trajectory.
#[derive(Debug, Clone)]
pub struct TargetResidualReport {
    pub times: Vec<f64>,
    /// `|w(1, t)|` at every stored time.
    pub boundary: Vec<f64>,
    /// `|w(1, 0)|`, fixed by the initial state before any control acts.
    pub initial_boundary: f64,
    /// Max-norm of the Crank-Nicolson residual of `w_t = theta w_xx - c w`
    /// over interior nodes on each step (one entry per step).
    pub interior: Vec<f64>,
    /// Max of `|w(1, t)|` over `t >= t_1`, the times whose boundary value the
    /// controller sets.
    pub max_boundary: f64,
    pub max_interior: f64,
}

/// Maps a trajectory through the kernels and measures how well `w` follows
/// the target dynamics.
pub fn target_residual(
    traj: &Trajectory,
    ktraj: &KernelTrajectory,
    sched: &GainSchedule,
    theta: f64,
    _q: f64,
) -> Result<TargetResidualReport> {
    if ktraj.kind != KernelKind::Direct {
        return Err(Error::invalid("target residual needs the direct kernel"));
    }
    if ktraj.slices.len() < traj.states.len() {
        return Err(Error::invalid("kernel trajectory is shorter than the state trajectory"));
    }
    let ws: Vec<StateVector> = traj
        .states
        .iter()
        .zip(&ktraj.slices)
        .map(|(v, k)| forward_transform(v, k))
        .collect::<Result<_>>()?;
    let boundary: Vec<f64> = ws.iter().map(|w| w.values.last().unwrap().abs()).collect();
    let dt = traj.time_grid.dt;
    let mut interior = Vec::with_capacity(ws.len().saturating_sub(1));
    for pair in ws.windows(2) {
        let (w0, w1) = (&pair[0], &pair[1]);
        let c0 = eval_c(sched, w0.t)?;
        let c1 = eval_c(sched, w1.t)?;
        let dx = w0.grid.dx();
        let n = w0.grid.len();
        let lap = |w: &[f64], i: usize| (w[i + 1] - 2.0 * w[i] + w[i - 1]) / (dx * dx);
        let worst = (1..n - 1)
            .map(|i| {
                let dwdt = (w1.values[i] - w0.values[i]) / dt;
                let rhs = 0.5 * theta * (lap(&w1.values, i) + lap(&w0.values, i))
                    - 0.5 * (c1 * w1.values[i] + c0 * w0.values[i]);
                (dwdt - rhs).abs()
            })
            .fold(0.0, f64::max);
        interior.push(worst);
    }
    Ok(TargetResidualReport {
        times: ws.iter().map(|w| w.t).collect(),
        initial_boundary: boundary[0],
        max_boundary: boundary[1..].iter().cloned().fold(0.0, f64::max),
        max_interior: interior.iter().cloned().fold(0.0, f64::max),
        boundary,
        interior,
    })
}

/// `v0(x) = amplitude * x (1 - x)`.
pub fn parabolic_state(grid: SpaceGrid, amplitude: f64) -> StateVector {
    StateVector::from_fn(grid, 0.0, |x| amplitude * x * (1.0 - x))
}

/// `k(1, .)` of a kernel slice evaluated against `v`: the exact law.
pub fn exact_control(k: &KernelSlice, v: &StateVector) -> Result<f64> {
    crate::transform::control_u(&control_gain(k), v)
}

/// Running `int_0^t ||v||^2` along a trajectory, used by energy audits.
pub fn cumulative_energy(traj: &Trajectory) -> Vec<f64> {
    let sq: Vec<f64> = traj.l2_norms().iter().map(|n| n * n).collect();
    cumulative_trapezoid(&sq, traj.time_grid.dt)
}
