//! Lyapunov and decay-envelope diagnostics for closed-loop runs, the
//! stability-condition constants, and the solver-versus-surrogate benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{eval_c, trapezoid_unchecked, CoeffSpec, GainSchedule, TimeGrid, TriGrid};
use crate::io::write_json;
use crate::kernel::{for_each_kernel_slice, KernelKind, KernelSolverOptions, KernelTrajectory};
use crate::operator::{DeepOperator, KernelSurrogate};
use crate::plant::Trajectory;
use crate::transform::{control_gain, forward_transform, StateVector};

/// Measured-over-envelope ratio allowed before an envelope check fails.
pub const ENVELOPE_SLACK: f64 = 1.5;

/// `V = 1/2 int w^2`.
pub fn lyapunov_v(w: &StateVector) -> f64 {
    let sq: Vec<f64> = w.values.iter().map(|v| v * v).collect();
    0.5 * trapezoid_unchecked(&sq, w.grid.dx())
}

/// `zeta(t) = exp(-2 int_0^t c)`.
pub fn zeta(sched: &GainSchedule, t: f64) -> Result<f64> {
    Ok((-2.0 * sched.integral(t)?).exp())
}

/// `C = (1 + sup_t ||l(., ., t)||_inf)^2`, so that `||v||^2 <= C ||w||^2`.
pub fn estimate_c_vw(ltraj: &KernelTrajectory) -> Result<f64> {
    if ltraj.kind != KernelKind::Inverse {
        return Err(Error::invalid("C_vw needs the inverse kernel trajectory"));
    }
    Ok((1.0 + ltraj.sup_norm()).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonStar {
    pub value: f64,
    /// Set when `c(t) <= theta` somewhere on the grid, which clips the bound
    /// to zero.
    pub warning: bool,
}

/// `inf_t sqrt(max(0, 2 (c(t) - theta) / (C theta)))` over the grid times.
pub fn epsilon_star(sched: &GainSchedule, theta: f64, c_vw: f64, tg: &TimeGrid) -> Result<EpsilonStar> {
    if !(c_vw > 0.0) || !(theta > 0.0) {
        return Err(Error::invalid("C and theta must be positive"));
    }
    let mut value = f64::INFINITY;
    let mut warning = false;
    for t in tg.times() {
        let c = eval_c(sched, t)?;
        if c <= theta {
            warning = true;
        }
        value = value.min((2.0 * (c - theta) / (c_vw * theta)).max(0.0).sqrt());
    }
    Ok(EpsilonStar { value, warning })
}

/// `C sqrt(T) eps`.
pub fn practical_residual_bound(eps_hat: f64, horizon: f64, c: f64) -> Result<f64> {
    if eps_hat < 0.0 || horizon < 0.0 || c < 0.0 {
        return Err(Error::invalid("residual bound inputs must be nonnegative"));
    }
    Ok(c * horizon.sqrt() * eps_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub times: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub zeta: Vec<f64>,
    pub w_norm: Vec<f64>,
    pub w_envelope: Vec<f64>,
    pub v_norm: Vec<f64>,
    pub v_envelope: Vec<f64>,
    pub c_vw: f64,
    /// `(1 + sup ||k||_inf)`, bounding `||w_0|| / ||v_0||`.
    pub c_wv_sqrt: f64,
    pub epsilon_star: EpsilonStar,
    pub epsilon_hat: f64,
    pub slack: f64,
    pub terminal_norm: f64,
    pub terminal_ratio: f64,
    pub w_envelope_pass: bool,
    pub v_envelope_pass: bool,
}

impl StabilityReport {
    pub fn pass(&self) -> bool {
        self.w_envelope_pass && self.v_envelope_pass
    }

    /// Per-time columns as CSV; `comment` becomes a leading `#` line.
    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("t,V,zeta,w_norm,w_envelope,v_norm,v_envelope\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                self.times[i],
                self.lyapunov[i],
                self.zeta[i],
                self.w_norm[i],
                self.w_envelope[i],
                self.v_norm[i],
                self.v_envelope[i]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Compares a run against the prescribed-time envelopes
/// `||w(t)|| <= sqrt(zeta(t)) exp((theta eps^2 C + 2 theta) t / 2) ||w_0||` and
/// `||v(t)|| <= sqrt(C) (1 + sup ||k||) sqrt(zeta(t)) exp(...) ||v_0||`.
pub fn decay_envelope_check(
    traj: &Trajectory,
    ktraj: &KernelTrajectory,
    ltraj: &KernelTrajectory,
    sched: &GainSchedule,
    theta: f64,
    eps_hat: f64,
) -> Result<StabilityReport> {
    if ktraj.kind != KernelKind::Direct {
        return Err(Error::invalid("envelope check needs the direct kernel first"));
    }
    if ktraj.slices.len() < traj.states.len() {
        return Err(Error::invalid("kernel trajectory is shorter than the run"));
    }
    let c_vw = estimate_c_vw(ltraj)?;
    let c_wv_sqrt = 1.0 + ktraj.sup_norm();
    let eps = epsilon_star(sched, theta, c_vw, &traj.time_grid)?;
    let rate = theta * eps_hat * eps_hat * c_vw + 2.0 * theta;

    let mut report = StabilityReport {
        times: Vec::new(),
        lyapunov: Vec::new(),
        zeta: Vec::new(),
        w_norm: Vec::new(),
        w_envelope: Vec::new(),
        v_norm: Vec::new(),
        v_envelope: Vec::new(),
        c_vw,
        c_wv_sqrt,
        epsilon_star: eps,
        epsilon_hat: eps_hat,
        slack: ENVELOPE_SLACK,
        terminal_norm: traj.final_state().l2_norm(),
        terminal_ratio: traj.terminal_ratio(),
        w_envelope_pass: true,
        v_envelope_pass: true,
    };
    let v0 = traj.states[0].l2_norm();
    let mut w0 = None;
    for (v, k) in traj.states.iter().zip(&ktraj.slices) {
        let w = forward_transform(v, k)?;
        let wn = w.l2_norm();
        let w0n = *w0.get_or_insert(wn);
        let z = zeta(sched, v.t)?;
        let growth = z.sqrt() * (0.5 * rate * v.t).exp();
        let w_env = growth * w0n;
        let v_env = c_vw.sqrt() * c_wv_sqrt * growth * v0;
        let vn = v.l2_norm();
        report.w_envelope_pass &= wn <= ENVELOPE_SLACK * w_env;
        report.v_envelope_pass &= vn <= ENVELOPE_SLACK * v_env;
        report.times.push(v.t);
        report.lyapunov.push(0.5 * wn * wn);
        report.zeta.push(z);
        report.w_norm.push(wn);
        report.w_envelope.push(w_env);
        report.v_norm.push(vn);
        report.v_envelope.push(v_env);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dx: Vec<f64>,
    pub repetitions: usize,
    pub sigma: f64,
    pub horizon: f64,
    pub margin: f64,
    /// Time step shared by the analytic trajectory and the surrogate queries.
    pub dt: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { dx: vec![0.01, 0.005], repetitions: 5, sigma: 3.3, horizon: 8.0, margin: 0.4, dt: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dx: f64,
    pub analytic_s: f64,
    pub surrogate_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub environment: String,
    pub config: BenchConfig,
}

impl BenchTable {
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("dx,analytic_s,surrogate_s,speedup\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:e},{:.3}\n", r.dx, r.analytic_s, r.surrogate_s, r.speedup));
        }
        out
    }

    pub fn write(&self, csv: &Path, json: &Path, comment: Option<&str>) -> Result<()> {
        std::fs::write(csv, self.to_csv(comment)).map_err(|e| Error::io(csv, e))?;
        write_json(json, self)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn environment_descriptor() -> String {
    format!(
        "{} {}, {} logical cores, timings on the calling thread",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    )
}

/// Median wall time of one analytic kernel-trajectory solve and of the
/// surrogate gain rows `k_hat(1, ., t_m)` on the same grid and times, per
/// `dx`. One warm-up run precedes the timed repetitions.
pub fn benchmark_speedup(cfg: &BenchConfig, op: &DeepOperator) -> Result<BenchTable> {
    if cfg.repetitions == 0 || cfg.dx.is_empty() {
        return Err(Error::invalid("benchmark needs at least one dx and one repetition"));
    }
    let spec = CoeffSpec::chebyshev(cfg.sigma, cfg.horizon);
    let sched = GainSchedule::prescribed(cfg.horizon);
    let tg = TimeGrid::new(cfg.dt, cfg.horizon, cfg.margin)?;
    let times = tg.times();
    let mut rows = Vec::with_capacity(cfg.dx.len());
    for &dx in &cfg.dx {
        let n = (1.0 / dx).round() as usize + 1;
        if ((n - 1) as f64 * dx - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("dx = {dx} does not divide [0, 1]")));
        }
        let grid = TriGrid::new(n)?;
        let analytic = || -> Result<f64> {
            let start = Instant::now();
            let mut checksum = 0.0;
            for_each_kernel_slice(KernelKind::Direct, &spec, &sched, grid, &tg, KernelSolverOptions::default(), |_, s| {
                checksum += control_gain(s).values[0];
                Ok(())
            })?;
            std::hint::black_box(checksum);
            Ok(start.elapsed().as_secs_f64())
        };
        let surrogate = || -> Result<f64> {
            let start = Instant::now();
            let sur = KernelSurrogate::for_spec(op.clone(), &spec)?;
            let mut checksum = 0.0;
            for t in &times {
                checksum += sur.gain_row(grid.space(), *t)?.values[0];
            }
            std::hint::black_box(checksum);
            Ok(start.elapsed().as_secs_f64())
        };
        analytic()?;
        surrogate()?;
        let a = median((0..cfg.repetitions).map(|_| analytic()).collect::<Result<_>>()?);
        let s = median((0..cfg.repetitions).map(|_| surrogate()).collect::<Result<_>>()?);
        rows.push(BenchRow { dx, analytic_s: a, surrogate_s: s, speedup: a / s });
    }
    Ok(BenchTable { rows, environment: environment_descriptor(), config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceGrid;

    #[test]
    fn lyapunov_examples() {
        let g = SpaceGrid::new(101).unwrap();
        assert_eq!(lyapunov_v(&StateVector::zeros(g, 0.0)), 0.0);
        assert!((lyapunov_v(&StateVector::from_fn(g, 0.0, |_| 1.0)) - 0.5).abs() < 1e-14);
        let s = StateVector::from_fn(g, 0.0, |x| (std::f64::consts::PI * x).sin());
        assert!((lyapunov_v(&s) - 0.25).abs() < 1e-3);
    }

    #[test]
    fn zeta_examples() {
        let sched = GainSchedule::prescribed(8.0);
        assert_eq!(zeta(&sched, 0.0).unwrap(), 1.0);
        assert!((zeta(&sched, 4.0).unwrap() - (-4.0f64).exp()).abs() < 1e-15);
        assert!(zeta(&sched, 8.0).is_err());
        let z = (-4.0 * 7.6 / 0.4f64).exp();
        assert!((zeta(&sched, 7.6).unwrap() / z - 1.0).abs() < 1e-9);
    }

    #[test]
    fn epsilon_star_examples() {
        let tg = TimeGrid::new(0.1, 8.0, 0.4).unwrap();
        let e = epsilon_star(&GainSchedule::prescribed(8.0), 1.0, 1.0, &tg).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.warning);
        let flat = |c: f64| GainSchedule::Tabulated { t0: 0.0, dt: 1.0, values: vec![c; 20] };
        let e = epsilon_star(&flat(3.0), 1.0, 1.0, &tg).unwrap();
        assert!((e.value - 2.0).abs() < 1e-12);
        assert!(!e.warning);
        let e = epsilon_star(&flat(1.0), 1.0, 1.0, &tg).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.warning);
    }

    #[test]
    fn residual_bound_examples() {
        assert_eq!(practical_residual_bound(0.0, 8.0, 3.0).unwrap(), 0.0);
        let a = practical_residual_bound(0.1, 8.0, 3.0).unwrap();
        assert!((practical_residual_bound(0.2, 8.0, 3.0).unwrap() - 2.0 * a).abs() < 1e-15);
        assert!((practical_residual_bound(0.1, 32.0, 3.0).unwrap() - 2.0 * a).abs() < 1e-14);
        assert!(practical_residual_bound(-1.0, 8.0, 3.0).is_err());
    }

    #[test]
    fn c_vw_examples() {
        let tg = TimeGrid::new(0.5, 8.0, 0.4).unwrap();
        let grid = TriGrid::new(5).unwrap();
        let mk = |v: f64, kind| KernelTrajectory {
            kind,
            time_grid: tg,
            slices: vec![crate::kernel::KernelSlice::from_fn(grid, 0.0, |_, _| v)],
        };
        assert_eq!(estimate_c_vw(&mk(0.0, KernelKind::Inverse)).unwrap(), 1.0);
        assert!(estimate_c_vw(&mk(2.0, KernelKind::Inverse)).unwrap() > estimate_c_vw(&mk(1.0, KernelKind::Inverse)).unwrap());
        assert!(estimate_c_vw(&mk(0.0, KernelKind::Direct)).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
