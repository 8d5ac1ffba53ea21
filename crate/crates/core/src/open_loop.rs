//! Open-loop form of the optimal rate: the rate at time `t` as an explicit
//! linear functional of the normalized noise path on `[0, (t + delta) ^ T]`.
//!
//! The resolvent is separable, `k(s, r) = -exp(J(s) - J(r)) n(s) m(r)` with
//! `J(s) = int_0^s l(u, u) du`, so the inner `dX` integrals collapse into one
//! running sum. For a path that is linear between grid nodes every kernel
//! integral depends on the grid only and is tabulated once; a path then costs
//! `O(N)`.
//!
//! Also provides an accurate rollout of the feedback form on the same
//! piecewise-linear path, used to cross-check the two representations.

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::params::{ModelParams, ReducedParams};
use crate::quad::integrate;

/// Beyond this `sqrt(rho) T` the tabulated exponentials leave the `f64` range.
const MAX_SCALED_HORIZON: f64 = 300.0;

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    /// Grid interval whose slope applies on this piece.
    interval: usize,
    /// `int (1 - G)`
    r: f64,
    /// `int (1 - G) n e^J`
    p: f64,
    /// `int (1 - G) n e^J H` with `H(s) = int_0^s e^{-J} m`
    q: f64,
    h_a: f64,
    h_b: f64,
}

/// Tabulated open-loop functional at a fixed time on a fixed grid, in
/// normalized coordinates.
#[derive(Debug, Clone)]
pub struct OpenLoop {
    t: f64,
    tau: f64,
    dt: f64,
    lambda: f64,
    phi0: f64,
    pieces: Vec<Piece>,
    /// `I(int a) - int_0^T a`
    position_term: f64,
}

impl OpenLoop {
    pub fn new(reduced: &ReducedParams, t: f64, dt: f64) -> Result<Self> {
        let ks = KernelSet::from_reduced(reduced);
        let horizon = ks.horizon();
        if ks.sqrt_rho() * horizon > MAX_SCALED_HORIZON {
            return Err(Error::Domain(format!(
                "sqrt(rho) T = {} is too large for the open-loop tables",
                ks.sqrt_rho() * horizon
            )));
        }
        if !(0.0..=horizon).contains(&t) || !(dt > 0.0) {
            return Err(Error::Domain(format!("need 0 <= t <= T and dt > 0, got t = {t}, dt = {dt}")));
        }
        let tau = (t + ks.delta()).min(horizon);
        let sr = ks.sqrt_rho();

        let n = |s: f64| (sr * (horizon - s)).cosh();
        let m = |s: f64| ks.l_hat(s, s) / n(s);
        let one_minus_g = |s: f64| 1.0 - integrate(|u| ks.l_hat(u, s), s, horizon);
        let a_hat = |s: f64| ks.a_hat(s);

        let mut nodes: Vec<f64> = Vec::new();
        let mut k = 0usize;
        while (k as f64) * dt < tau {
            nodes.push(k as f64 * dt);
            k += 1;
        }
        if ks.delta() > 0.0 && ks.delta() < tau {
            nodes.push(ks.delta());
        }
        nodes.push(tau);
        nodes.sort_by(f64::total_cmp);
        nodes.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * horizon);

        let mut pieces = Vec::with_capacity(nodes.len());
        let (mut j_a, mut h_a, mut z_a) = (0.0, 0.0, 0.0);
        let (mut ia_first, mut ia_second) = (0.0, 0.0);
        for w in nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            let j_in = |s: f64| j_a + integrate(|u| ks.l_hat(u, u), a, s);
            let h_in = |s: f64| h_a + integrate(|r| (-j_in(r)).exp() * m(r), a, s);
            let z_in = |s: f64| z_a + integrate(|r| (-j_in(r)).exp() * m(r) * a_hat(r), a, s);
            let ne = |s: f64| n(s) * j_in(s).exp();

            let r = integrate(one_minus_g, a, b);
            let p = integrate(|s| one_minus_g(s) * ne(s), a, b);
            let q = integrate(|s| one_minus_g(s) * ne(s) * h_in(s), a, b);
            ia_first += integrate(|s| one_minus_g(s) * a_hat(s), a, b);
            ia_second += integrate(|s| one_minus_g(s) * ne(s) * z_in(s), a, b);

            let h_b = h_in(b);
            let interval = (0.5 * (a + b) / dt).floor() as usize;
            pieces.push(Piece { a, interval, r, p, q, h_a, h_b });
            z_a = z_in(b);
            j_a = j_in(b);
            h_a = h_b;
        }
        let total_a = ks.lambda() * ks.a_hat_tail_integral(0.0);
        Ok(OpenLoop {
            t,
            tau,
            dt,
            lambda: ks.lambda(),
            phi0: reduced.phi0_r,
            pieces,
            position_term: ia_first + ia_second - total_a,
        })
    }

    /// `I(X)` for the path linear between the samples `x[k] = X(k dt)`.
    pub fn operator(&self, x: &[f64]) -> Result<f64> {
        let needed = self.pieces.last().map_or(0, |p| p.interval + 1);
        if x.len() <= needed {
            return Err(Error::Input(format!(
                "path of {} samples does not reach tau = {}",
                x.len(),
                self.tau
            )));
        }
        let mut z = 0.0;
        let mut total = 0.0;
        for pc in &self.pieces {
            let slope = (x[pc.interval + 1] - x[pc.interval]) / self.dt;
            total += slope * pc.r + (z - slope * pc.h_a) * pc.p + slope * pc.q;
            z += slope * (pc.h_b - pc.h_a);
        }
        Ok(total)
    }

    /// Optimal rate at `t` given the normalized path `w`.
    pub fn rate(&self, w: &[f64]) -> Result<f64> {
        let i_w = self.operator(w)?;
        let w_t = interpolate(w, self.dt, self.t) - w[0];
        Ok((i_w - w_t + self.phi0 * self.position_term) / self.lambda)
    }

    pub fn pieces(&self) -> usize {
        self.pieces.len()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.pieces.first().map_or(0.0, |p| p.a), self.tau)
    }
}

/// Optimal rate at `t` from the normalized path `w` sampled every `dt`.
pub fn open_loop_rate(t: f64, w: &[f64], dt: f64, reduced: &ReducedParams) -> Result<f64> {
    OpenLoop::new(reduced, t, dt)?.rate(w)
}

fn interpolate(x: &[f64], dt: f64, t: f64) -> f64 {
    let last = x.len() - 1;
    let pos = t / dt;
    let k = (pos.floor() as usize).min(last);
    if k == last {
        return x[last];
    }
    let frac = pos - k as f64;
    x[k] + frac * (x[k + 1] - x[k])
}

/// Piecewise-linear price path with exact running integrals.
struct LinearPath<'a> {
    s: &'a [f64],
    dt: f64,
    cumulative: Vec<f64>,
}

impl<'a> LinearPath<'a> {
    fn new(s: &'a [f64], dt: f64) -> Self {
        let mut cumulative = Vec::with_capacity(s.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in s.windows(2) {
            acc += 0.5 * (w[0] + w[1]) * dt;
            cumulative.push(acc);
        }
        LinearPath { s, dt, cumulative }
    }

    fn end(&self) -> f64 {
        (self.s.len() - 1) as f64 * self.dt
    }

    fn at(&self, t: f64) -> f64 {
        interpolate(self.s, self.dt, t.min(self.end()))
    }

    /// `int_0^t S`, extended by the last sample past the end.
    fn integral(&self, t: f64) -> f64 {
        let end = self.end();
        if t >= end {
            return self.cumulative[self.s.len() - 1] + (t - end) * self.s[self.s.len() - 1];
        }
        let k = ((t / self.dt).floor() as usize).min(self.s.len() - 2);
        let tk = k as f64 * self.dt;
        self.cumulative[k] + 0.5 * (t - tk) * (self.s[k] + self.at(t))
    }
}

/// Continuous-time feedback rate on a piecewise-linear path.
fn continuous_rate(path: &LinearPath<'_>, ks: &KernelSet, params: &ModelParams, t: f64, position: f64) -> f64 {
    let horizon = params.horizon();
    let delta = params.delta();
    let s_t = path.at(t);
    let last = path.at(t + delta);
    let s_bar = if delta == 0.0 {
        s_t
    } else {
        let u = ks.upsilon(horizon - t);
        (1.0 - u) * last + u * (path.integral(t + delta) - path.integral(t)) / delta
    };
    (s_bar - s_t) / params.lambda() + ks.urgency(t) * (params.merton_position() - position)
}

/// Position and feedback rate at `t_end` obtained by integrating the
/// feedback ODE with classical RK4 (`substeps` per grid interval) along the
/// path linear between the samples.
pub fn feedback_rollout(
    path: &[f64],
    dt: f64,
    params: &ModelParams,
    t_end: f64,
    substeps: usize,
) -> Result<(f64, f64)> {
    let n = path.len() - 1;
    if ((n as f64) * dt - params.horizon()).abs() > 1e-9 * params.horizon() {
        return Err(Error::Input(format!("path of {} samples does not span the horizon", path.len())));
    }
    let ks = KernelSet::from_reduced(&params.reduce());
    let lp = LinearPath::new(path, dt);
    let f = |t: f64, x: f64| continuous_rate(&lp, &ks, params, t, x);
    let steps = ((t_end / dt).round() as usize) * substeps.max(1);
    let h = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let mut x = params.phi0();
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = f(t, x);
        let k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
        let k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
        let k4 = f(t + h, x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok((x, f(t_end, x)))
}
