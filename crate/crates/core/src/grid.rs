//! Uniform grids, quadrature and coefficient evaluation shared by every solver.
//!
//! The reaction coefficient comes either from the Chebyshev blow-up family
//! `a + cos(sigma * acos(x)) + T / (T - t)^2` or from tabulated samples, and
//! the prescribed-time gain is `c(t) = 2T / (T - t)^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform nodes `x_i = i * dx` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceGrid {
    n: usize,
}

impl SpaceGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("space grid needs at least 2 nodes, got {n}")));
        }
        Ok(Self { n })
    }

    /// Grid whose spacing is `dx`; `1/dx` must be (close to) an integer.
    pub fn with_spacing(dx: f64) -> Result<Self> {
        if !(dx > 0.0 && dx <= 1.0) {
            return Err(Error::invalid(format!("dx must lie in (0, 1], got {dx}")));
        }
        let intervals = (1.0 / dx).round();
        if ((1.0 / dx) - intervals).abs() > 1e-6 * intervals {
            return Err(Error::invalid(format!("1/dx must be an integer, got dx = {dx}")));
        }
        Self::new(intervals as usize + 1)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            1.0
        } else {
            i as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }
}

/// Lower-triangular lattice `{(x_i, y_j) : 0 <= j <= i <= n - 1}`.
///
/// Values are stored row-major with `i` outer and `j` inner, so node
/// `(i, j)` lives at `i (i + 1) / 2 + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriGrid {
    n: usize,
}

impl TriGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("triangular grid needs n >= 2, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn node_count(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.n);
        i * (i + 1) / 2 + j
    }

    pub fn space(&self) -> SpaceGrid {
        SpaceGrid { n: self.n }
    }

    /// Iterates `(i, j)` in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(|i| (0..=i).map(move |j| (i, j)))
    }
}

/// Sample times `t_m = m * dt` on `[0, T - margin]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub horizon: f64,
    pub margin: f64,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64, margin: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if !(margin > 0.0 && margin < horizon) {
            return Err(Error::invalid(format!(
                "margin must satisfy 0 < margin < T, got margin = {margin}, T = {horizon}"
            )));
        }
        let grid = Self { dt, horizon, margin };
        if grid.steps() == 0 {
            return Err(Error::invalid("time grid has no steps: dt exceeds T - margin"));
        }
        Ok(grid)
    }

    /// Default margin of 5% of the horizon.
    pub fn with_default_margin(dt: f64, horizon: f64) -> Result<Self> {
        Self::new(dt, horizon, 0.05 * horizon)
    }

    pub fn stop_time(&self) -> f64 {
        self.horizon - self.margin
    }

    /// Number of steps `floor((T - margin) / dt)`.
    pub fn steps(&self) -> usize {
        ((self.stop_time() / self.dt) + 1e-9).floor() as usize
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|m| self.time(m)).collect()
    }

    /// Index of the stored time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps())
    }
}

/// Samples of a field on `SpaceGrid x {t0 + m dt}`; row `m` holds time `t0 + m dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedField {
    pub space: SpaceGrid,
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<Vec<f64>>,
}

impl TabulatedField {
    pub fn new(space: SpaceGrid, t0: f64, dt: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("tabulated field has no time rows"));
        }
        if values.len() > 1 && !(dt > 0.0) {
            return Err(Error::invalid("tabulated field needs dt > 0"));
        }
        if let Some(row) = values.iter().find(|r| r.len() != space.len()) {
            return Err(Error::invalid(format!(
                "tabulated row has {} values, grid has {}",
                row.len(),
                space.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tabulated field contains non-finite values"));
        }
        Ok(Self { space, t0, dt, values })
    }

    /// Bilinear interpolation, clamped to the sample lattice.
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let (m0, m1, wt) = bracket(t - self.t0, self.dt, self.values.len());
        let (i0, i1, wx) = bracket(x, self.space.dx(), self.space.len());
        let at = |m: usize| (1.0 - wx) * self.values[m][i0] + wx * self.values[m][i1];
        (1.0 - wt) * at(m0) + wt * at(m1)
    }
}

fn bracket(s: f64, h: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 || s <= 0.0 {
        return (0, 0, 0.0);
    }
    let pos = s / h;
    if pos >= (len - 1) as f64 {
        return (len - 1, len - 1, 0.0);
    }
    let i = pos.floor() as usize;
    (i, i + 1, pos - i as f64)
}

/// Reaction coefficient `lambda(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LambdaModel {
    /// `base + cos(sigma * acos(x)) + T / (T - t)^2`.
    ChebyshevBlowup { base: f64, sigma: f64, horizon: f64 },
    Tabulated(TabulatedField),
}

/// Plant coefficients: reaction model, diffusion `theta` and Robin constant `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffSpec {
    pub lambda: LambdaModel,
    pub theta: f64,
    pub q: f64,
}

impl CoeffSpec {
    pub fn new(lambda: LambdaModel, theta: f64, q: f64) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!("theta must be positive, got {theta}")));
        }
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::invalid(format!("q must be positive, got {q}")));
        }
        if let LambdaModel::ChebyshevBlowup { horizon, .. } = lambda {
            if !(horizon > 0.0) {
                return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
            }
        }
        Ok(Self { lambda, theta, q })
    }

    /// The Chebyshev blow-up family with base 5, `theta = q = 1`.
    pub fn chebyshev(sigma: f64, horizon: f64) -> Self {
        Self {
            lambda: LambdaModel::ChebyshevBlowup { base: 5.0, sigma, horizon },
            theta: 1.0,
            q: 1.0,
        }
    }

    pub fn with_constants(mut self, theta: f64, q: f64) -> Result<Self> {
        self.theta = theta;
        self.q = q;
        Self::new(self.lambda, self.theta, self.q)
    }
}

/// Evaluates `lambda(x, t)`.
pub fn eval_lambda(spec: &CoeffSpec, x: f64, t: f64) -> Result<f64> {
    match &spec.lambda {
        LambdaModel::ChebyshevBlowup { base, sigma, horizon } => {
            if t >= *horizon {
                return Err(Error::Domain(format!(
                    "lambda blows up at t = T = {horizon}; got t = {t}"
                )));
            }
            let x = x.clamp(-1.0, 1.0);
            let gap = horizon - t;
            Ok(base + (sigma * x.acos()).cos() + horizon / (gap * gap))
        }
        LambdaModel::Tabulated(field) => Ok(field.eval(x, t)),
    }
}

/// `lambda(., t)` sampled on every node of `grid`.
pub fn lambda_field(spec: &CoeffSpec, grid: SpaceGrid, t: f64) -> Result<Vec<f64>> {
    (0..grid.len()).map(|i| eval_lambda(spec, grid.x(i), t)).collect()
}

/// Prescribed-time damping gain `c(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum GainSchedule {
    /// `c(t) = 2T / (T - t)^2`.
    Prescribed { horizon: f64 },
    /// Samples `c(t0 + m dt)`, linearly interpolated and clamped.
    Tabulated { t0: f64, dt: f64, values: Vec<f64> },
}

impl GainSchedule {
    pub fn prescribed(horizon: f64) -> Self {
        GainSchedule::Prescribed { horizon }
    }

    pub fn horizon(&self) -> Option<f64> {
        match self {
            GainSchedule::Prescribed { horizon } => Some(*horizon),
            GainSchedule::Tabulated { .. } => None,
        }
    }

    /// `int_0^t c(s) ds`: closed form `2t / (T - t)` for the prescribed
    /// schedule, trapezoid over the samples otherwise.
    pub fn integral(&self, t: f64) -> Result<f64> {
        match self {
            GainSchedule::Prescribed { horizon } => {
                check_before_horizon(*horizon, t)?;
                Ok(2.0 * t / (horizon - t))
            }
            GainSchedule::Tabulated { .. } => {
                if t <= 0.0 {
                    return Ok(0.0);
                }
                let pieces = 64usize.max((t / 1e-3).ceil() as usize);
                let h = t / pieces as f64;
                let vals: Vec<f64> = (0..=pieces)
                    .map(|m| eval_c(self, m as f64 * h))
                    .collect::<Result<_>>()?;
                trapezoid(&vals, h)
            }
        }
    }
}

fn check_before_horizon(horizon: f64, t: f64) -> Result<()> {
    if t >= horizon {
        return Err(Error::Domain(format!(
            "c(t) is singular at t = T = {horizon}; got t = {t}"
        )));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    Ok(())
}

/// Evaluates `c(t)`.
pub fn eval_c(sched: &GainSchedule, t: f64) -> Result<f64> {
    match sched {
        GainSchedule::Prescribed { horizon } => {
            check_before_horizon(*horizon, t)?;
            let gap = horizon - t;
            Ok(2.0 * horizon / (gap * gap))
        }
        GainSchedule::Tabulated { t0, dt, values } => {
            if values.is_empty() {
                return Err(Error::invalid("tabulated gain schedule is empty"));
            }
            let (m0, m1, w) = bracket(t - t0, *dt, values.len());
            Ok((1.0 - w) * values[m0] + w * values[m1])
        }
    }
}

/// `gamma(x, t) = lambda(x, t) + c(t)`.
pub fn eval_gamma(spec: &CoeffSpec, sched: &GainSchedule, x: f64, t: f64) -> Result<f64> {
    Ok(eval_lambda(spec, x, t)? + eval_c(sched, t)?)
}

/// `gamma(., t)` sampled on every node of `grid`.
pub fn gamma_field(
    spec: &CoeffSpec,
    sched: &GainSchedule,
    grid: SpaceGrid,
    t: f64,
) -> Result<Vec<f64>> {
    let c = eval_c(sched, t)?;
    (0..grid.len())
        .map(|i| Ok(eval_lambda(spec, grid.x(i), t)? + c))
        .collect()
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], dx: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "trapezoid needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(dx > 0.0) {
        return Err(Error::invalid(format!("trapezoid needs dx > 0, got {dx}")));
    }
    Ok(trapezoid_unchecked(values, dx))
}

#[inline]
pub(crate) fn trapezoid_unchecked(values: &[f64], dx: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        len => {
            let inner: f64 = values[1..len - 1].iter().sum();
            dx * (inner + 0.5 * (values[0] + values[len - 1]))
        }
    }
}

/// Running trapezoid integrals `int_0^{x_i}`; the first entry is 0.
pub fn cumulative_trapezoid(values: &[f64], dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            acc += 0.5 * dx * (values[i - 1] + v);
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_examples() {
        let g = SpaceGrid::new(11).unwrap();
        let dx = g.dx();
        let ones = vec![1.0; 11];
        assert!((trapezoid(&ones, dx).unwrap() - 1.0).abs() < 1e-14);
        let lin: Vec<f64> = g.nodes();
        assert!((trapezoid(&lin, dx).unwrap() - 0.5).abs() < 1e-14);
        // Euler-Maclaurin: 1/3 + dx^2/12 * (f'(1) - f'(0)) = 1/3 + 0.01/12 * 2.
        let sq: Vec<f64> = g.nodes().iter().map(|x| x * x).collect();
        let oracle = 1.0 / 3.0 + dx * dx / 12.0 * 2.0;
        assert!((oracle - 0.335).abs() < 1e-12);
        assert!((trapezoid(&sq, dx).unwrap() - 0.335).abs() < 1e-12);
        assert!(trapezoid(&[1.0], dx).is_err());
        assert!(trapezoid(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn trapezoid_exact_for_affine() {
        let g = SpaceGrid::new(37).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|x| -3.2 * x + 1.7).collect();
        let exact = -1.6 + 1.7;
        assert!((trapezoid(&f, g.dx()).unwrap() - exact).abs() < 1e-14);
    }

    #[test]
    fn cumulative_matches_total() {
        let g = SpaceGrid::new(21).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|x| x.sin()).collect();
        let cum = cumulative_trapezoid(&f, g.dx());
        assert_eq!(cum[0], 0.0);
        assert!((cum[20] - trapezoid(&f, g.dx()).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn grids() {
        let g = SpaceGrid::new(21).unwrap();
        assert_eq!(g.x(0), 0.0);
        assert_eq!(g.x(20), 1.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(SpaceGrid::new(1).is_err());
        assert_eq!(SpaceGrid::with_spacing(0.05).unwrap().len(), 21);
        assert_eq!(SpaceGrid::with_spacing(0.005).unwrap().len(), 201);
        assert!(SpaceGrid::with_spacing(0.3).is_err());
        for n in 2..40 {
            let t = TriGrid::new(n).unwrap();
            assert_eq!(t.nodes().count(), n * (n + 1) / 2);
            assert_eq!(t.node_count(), n * (n + 1) / 2);
            for (k, (i, j)) in t.nodes().enumerate() {
                assert_eq!(t.index(i, j), k);
            }
        }
    }

    #[test]
    fn time_grid_counts() {
        let tg = TimeGrid::new(6.25e-4, 8.0, 0.4).unwrap();
        assert_eq!(tg.steps(), 12160);
        assert!(tg.time(tg.steps()) <= tg.stop_time() + 1e-12);
        assert!(TimeGrid::new(0.1, 8.0, 8.0).is_err());
        assert!(TimeGrid::new(-0.1, 8.0, 0.4).is_err());
        let d = TimeGrid::with_default_margin(0.01, 8.0).unwrap();
        assert!((d.margin - 0.4).abs() < 1e-15);
    }

    #[test]
    fn lambda_examples() {
        let spec = CoeffSpec::chebyshev(3.3, 8.0);
        assert!((eval_lambda(&spec, 1.0, 0.0).unwrap() - 6.125).abs() < 1e-12);
        for (s, t) in [(2.0, 1.0), (3.7, 5.5)] {
            let sp = CoeffSpec::chebyshev(s, 8.0);
            let expect = 6.0 + 8.0 / ((8.0 - t) * (8.0 - t));
            assert!((eval_lambda(&sp, 1.0, t).unwrap() - expect).abs() < 1e-12);
        }
        let s2 = CoeffSpec::chebyshev(2.0, 8.0);
        assert!((eval_lambda(&s2, 0.0, 0.0).unwrap() - 4.125).abs() < 1e-12);
        assert!(matches!(eval_lambda(&spec, 0.5, 8.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gain_examples() {
        let c = GainSchedule::prescribed(8.0);
        assert!((eval_c(&c, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((eval_c(&c, 4.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(eval_c(&c, 8.0).is_err());
        let tg = TimeGrid::new(0.01, 8.0, 0.4).unwrap();
        let vals: Vec<f64> = tg.times().iter().map(|&t| eval_c(&c, t).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
        assert!(eval_c(&c, 7.999_999).unwrap() > 1e12);
    }

    #[test]
    fn gamma_examples() {
        let spec = CoeffSpec::chebyshev(3.3, 8.0);
        let c = GainSchedule::prescribed(8.0);
        assert!((eval_gamma(&spec, &c, 1.0, 0.0).unwrap() - 6.375).abs() < 1e-12);

        let space = SpaceGrid::new(5).unwrap();
        let zero = TabulatedField::new(space, 0.0, 1.0, vec![vec![0.0; 5]; 3]).unwrap();
        let flat = CoeffSpec::new(LambdaModel::Tabulated(zero), 1.0, 1.0).unwrap();
        assert!((eval_gamma(&flat, &c, 0.3, 0.0).unwrap() - 0.25).abs() < 1e-15);
        let g1 = eval_gamma(&flat, &c, 0.3, 1.0).unwrap();
        let g2 = eval_gamma(&flat, &c, 0.3, 3.0).unwrap();
        let dc = eval_c(&c, 3.0).unwrap() - eval_c(&c, 1.0).unwrap();
        assert!(((g2 - g1) - dc).abs() < 1e-14);
    }

    #[test]
    fn closed_form_integral_matches_quadrature() {
        let c = GainSchedule::prescribed(8.0);
        let dt = 6.25e-4;
        let tg = TimeGrid::new(dt, 8.0, 0.4).unwrap();
        let vals: Vec<f64> = tg.times().iter().map(|&t| eval_c(&c, t).unwrap()).collect();
        let cum = cumulative_trapezoid(&vals, dt);
        for m in (1..=tg.steps()).step_by(97) {
            let t = tg.time(m);
            let exact = c.integral(t).unwrap();
            assert!((cum[m] - exact).abs() <= 1e-3 * exact, "t = {t}");
        }
    }

    #[test]
    fn tabulated_bilinear_and_clamp() {
        let space = SpaceGrid::new(3).unwrap();
        let f = TabulatedField::new(space, 0.0, 1.0, vec![vec![0.0, 1.0, 2.0], vec![10.0, 11.0, 12.0]])
            .unwrap();
        assert!((f.eval(0.25, 0.5) - 5.5).abs() < 1e-14);
        assert!((f.eval(1.0, 5.0) - 12.0).abs() < 1e-14);
        assert!((f.eval(-1.0, -5.0) - 0.0).abs() < 1e-14);
        let sched = GainSchedule::Tabulated { t0: 0.0, dt: 1.0, values: vec![1.0, 3.0] };
        assert!((eval_c(&sched, 0.5).unwrap() - 2.0).abs() < 1e-14);
        assert!((sched.integral(1.0).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn coeff_validation() {
        let lam = LambdaModel::ChebyshevBlowup { base: 5.0, sigma: 3.0, horizon: 8.0 };
        assert!(CoeffSpec::new(lam.clone(), 0.0, 1.0).is_err());
        assert!(CoeffSpec::new(lam.clone(), 1.0, -1.0).is_err());
        assert!(CoeffSpec::new(lam, 2.0, 0.5).is_ok());
    }
}
