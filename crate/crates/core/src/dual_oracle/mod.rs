//! Numerical minimization of the discretized dual problem in normalized
//! coordinates.
//!
//! The dual control splits into a deterministic function `a` and one kernel
//! slice `l(., s)` per time `s`. Each part is a strictly convex quadratic on
//! `m` left-endpoint knots and is solved by conjugate gradient with an `O(m)`
//! matrix-free product. Nothing here evaluates the closed-form kernels; they
//! only appear in tests and in the verification suite.

pub mod tree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::conjugate_gradient;
use crate::error::{Error, Result};
use crate::params::ReducedParams;

const CG_TOL: f64 = 1e-13;

/// Discretized dual control on the knots `t_i = i T / m`, `i < m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualControl {
    horizon: f64,
    pub a: Vec<f64>,
    /// `l[j][i - j]` is the kernel at `(t_i, t_j)` for `i >= j`.
    pub l: Vec<Vec<f64>>,
}

impl DualControl {
    pub fn zeros(m: usize, horizon: f64) -> Self {
        DualControl { horizon, a: vec![0.0; m], l: (0..m).map(|j| vec![0.0; m - j]).collect() }
    }

    /// Samples `a(t_i)` and `l(t_i, t_j)` on the knots.
    pub fn sample<A, L>(m: usize, horizon: f64, a: A, l: L) -> Self
    where
        A: Fn(f64) -> f64,
        L: Fn(f64, f64) -> f64,
    {
        let dt = horizon / m as f64;
        DualControl {
            horizon,
            a: (0..m).map(|i| a(i as f64 * dt)).collect(),
            l: (0..m)
                .map(|j| (j..m).map(|i| l(i as f64 * dt, j as f64 * dt)).collect())
                .collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.m() as f64
    }

    /// `wa * self + wb * other`.
    pub fn combine(&self, wa: f64, other: &DualControl, wb: f64) -> Result<DualControl> {
        if self.m() != other.m() || self.horizon != other.horizon {
            return Err(Error::Input("controls live on different grids".into()));
        }
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| wa * p + wb * q).collect();
        Ok(DualControl {
            horizon: self.horizon,
            a: mix(&self.a, &other.a),
            l: self.l.iter().zip(&other.l).map(|(x, y)| mix(x, y)).collect(),
        })
    }

    fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.l.len() != m || self.l.iter().enumerate().any(|(j, v)| v.len() != m - j) {
            return Err(Error::Input("kernel slices do not match the knot count".into()));
        }
        if self.a.iter().chain(self.l.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Input("control has non-finite entries".into()));
        }
        Ok(())
    }
}

/// `sum_i (dt sum_{k >= i} x_k)^2`
fn tail_square_sum(x: &[f64], dt: f64) -> f64 {
    let mut tail = 0.0;
    let mut acc = 0.0;
    for v in x.iter().rev() {
        tail += v * dt;
        acc += tail * tail;
    }
    acc
}

/// a-part of the dual functional.
pub fn a_functional(a: &[f64], dt: f64, r: &ReducedParams) -> f64 {
    let sum: f64 = a.iter().sum();
    let sq: f64 = a.iter().map(|v| v * v).sum();
    -r.phi0_r * sum * dt + sq * dt / (2.0 * r.alpha_r) + tail_square_sum(a, dt) * dt / (2.0 * r.lambda_r)
}

/// Kernel slice functional attached to time `s`; `l` lives on the knots at
/// and after `s`.
pub fn l_functional(s: f64, l: &[f64], dt: f64, r: &ReducedParams) -> f64 {
    let d = s.min(r.delta);
    let sum: f64 = l.iter().sum();
    let sq: f64 = l.iter().map(|v| v * v).sum();
    let miss = 1.0 - sum * dt;
    sq * dt / (2.0 * r.alpha_r) + tail_square_sum(l, dt) * dt / (2.0 * r.lambda_r) + d / (2.0 * r.lambda_r) * miss * miss
}

/// Discretized dual functional, left-endpoint Riemann sums throughout.
pub fn dual_functional(ctrl: &DualControl, r: &ReducedParams) -> Result<f64> {
    ctrl.validate()?;
    let dt = ctrl.dt();
    let slices: f64 = ctrl
        .l
        .iter()
        .enumerate()
        .map(|(j, l)| l_functional(j as f64 * dt, l, dt, r))
        .sum();
    Ok(a_functional(&ctrl.a, dt, r) + slices * dt)
}

/// `out = x / alpha + (dt^2 / lambda) U'U x + c (1'x) 1`, `U` the
/// upper-triangular ones matrix.
fn apply_system(x: &[f64], out: &mut [f64], inv_alpha: f64, tail_weight: f64, rank_one: f64) {
    let n = x.len();
    // out <- U x (suffix sums)
    let mut acc = 0.0;
    for i in (0..n).rev() {
        acc += x[i];
        out[i] = acc;
    }
    let total = acc;
    // out <- U' out (prefix sums)
    let mut acc = 0.0;
    for i in 0..n {
        acc += out[i];
        out[i] = acc;
    }
    for i in 0..n {
        out[i] = inv_alpha * x[i] + tail_weight * out[i] + rank_one * total;
    }
}

/// Minimizer and minimum of one quadratic subproblem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub control: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

fn check_m(m: usize) -> Result<()> {
    if m < 4 {
        return Err(Error::Config(format!("need at least 4 knots, got {m}")));
    }
    Ok(())
}

/// Minimizes the a-part on `m` knots.
pub fn minimize_a(r: &ReducedParams, m: usize) -> Result<Minimum> {
    check_m(m)?;
    let dt = r.horizon / m as f64;
    let b = vec![r.phi0_r; m];
    let mut a = vec![0.0; m];
    let (ia, tw) = (1.0 / r.alpha_r, dt * dt / r.lambda_r);
    let out = conjugate_gradient(|x, o| apply_system(x, o, ia, tw, 0.0), &b, &mut a, CG_TOL, 10 * m + 100)?;
    let value = a_functional(&a, dt, r);
    Ok(Minimum { control: a, value, iterations: out.iterations })
}

/// Minimizes the kernel slice attached to the knot `s` on `m` knots. At
/// `s = T` the slice is empty and the value is `(T ^ delta) / (2 lambda)`.
pub fn minimize_l(s: f64, r: &ReducedParams, m: usize) -> Result<Minimum> {
    check_m(m)?;
    let dt = r.horizon / m as f64;
    if s >= r.horizon * (1.0 - 1e-12) {
        let d = r.horizon.min(r.delta);
        return Ok(Minimum { control: Vec::new(), value: d / (2.0 * r.lambda_r), iterations: 0 });
    }
    let pos = s / dt;
    let j = pos.round();
    if s < 0.0 || (pos - j).abs() > 1e-9 * pos.max(1.0) {
        return Err(Error::Domain(format!("s = {s} is not a knot of the {m}-point grid")));
    }
    minimize_l_at(j as usize, r, m)
}

fn minimize_l_at(j: usize, r: &ReducedParams, m: usize) -> Result<Minimum> {
    let dt = r.horizon / m as f64;
    let s = j as f64 * dt;
    let d = s.min(r.delta);
    let n = m - j;
    let mut l = vec![0.0; n];
    if d == 0.0 {
        return Ok(Minimum { control: l, value: 0.0, iterations: 0 });
    }
    let b = vec![d / r.lambda_r; n];
    let (ia, tw, ro) = (1.0 / r.alpha_r, dt * dt / r.lambda_r, d * dt / r.lambda_r);
    let out = conjugate_gradient(|x, o| apply_system(x, o, ia, tw, ro), &b, &mut l, CG_TOL, 10 * n + 100)?;
    let value = l_functional(s, &l, dt, r);
    Ok(Minimum { control: l, value, iterations: out.iterations })
}

/// `int_s^T l(t, s) dt` of a discrete slice.
pub fn slice_mass(l: &[f64], dt: f64) -> f64 {
    l.iter().sum::<f64>() * dt
}

/// Scalar quadratic in `theta = int_s^T l` left after minimizing over slice
/// shapes with a fixed mass.
pub fn theta_quadratic(theta: f64, s: f64, r: &ReducedParams) -> f64 {
    let sr = r.rho.sqrt();
    let coth = 1.0 / (sr * (r.horizon - s)).tanh();
    let d = s.min(r.delta);
    (coth / sr * theta * theta + d * (1.0 - theta) * (1.0 - theta)) / (2.0 * r.lambda_r)
}

/// Vertex of [`theta_quadratic`] from a three-point parabola fit, with the
/// value there.
pub fn theta_vertex(s: f64, r: &ReducedParams) -> Result<(f64, f64)> {
    if !(0.0..r.horizon).contains(&s) {
        return Err(Error::Domain(format!("need 0 <= s < T, got {s}")));
    }
    let q = |x: f64| theta_quadratic(x, s, r);
    let (qm, q0, qp) = (q(-1.0), q(0.0), q(1.0));
    let curvature = qm - 2.0 * q0 + qp;
    let theta = (qm - qp) / (2.0 * curvature);
    Ok((theta, q(theta)))
}

/// Discrete dual value: the a-minimum plus the Riemann sum of slice minima.
pub fn dual_value_assembly(r: &ReducedParams, m: usize) -> Result<f64> {
    let dt = r.horizon / m as f64;
    let a = minimize_a(r, m)?;
    let slices: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|j| minimize_l_at(j, r, m).map(|x| x.value))
        .collect::<Result<_>>()?;
    Ok(a.value + slices.iter().sum::<f64>() * dt)
}

/// One row of a refinement-ladder report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub m: usize,
    pub value: f64,
    pub closed_form: f64,
    pub abs_err: f64,
    /// `log(err_prev / err) / log(m / m_prev)`; absent on the first row.
    pub observed_order: Option<f64>,
}

pub fn ladder_rows(points: &[(usize, f64)], closed_form: f64) -> Vec<LadderRow> {
    let mut rows: Vec<LadderRow> = Vec::with_capacity(points.len());
    for &(m, value) in points {
        let abs_err = (value - closed_form).abs();
        let observed_order = rows
            .last()
            .map(|prev| (prev.abs_err / abs_err).ln() / (m as f64 / prev.m as f64).ln());
        rows.push(LadderRow { m, value, closed_form, abs_err, observed_order });
    }
    rows
}
