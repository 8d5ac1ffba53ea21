//! Closed-form kernels of the normalized (`S = W`) problem.
//!
//! Everything here is a pure function of `(rho, T, delta, lambda)`. With unit
//! volatility the risk aversion is `alpha = rho * lambda`.
//!
//! Ratios of hyperbolic functions are evaluated through exponentials of
//! argument differences so that `sqrt(rho) * T` in the hundreds does not
//! overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ReducedParams;
use crate::quad;

/// `cosh(a) / cosh(b)` for `a, b >= 0`.
pub(crate) fn cosh_ratio(a: f64, b: f64) -> f64 {
    ln_cosh_ratio(a, b).exp()
}

pub(crate) fn ln_cosh_ratio(a: f64, b: f64) -> f64 {
    (a - b) + (-2.0 * a).exp().ln_1p() - (-2.0 * b).exp().ln_1p()
}

/// `sinh(a) / cosh(b)` for `a, b >= 0`.
pub(crate) fn sinh_cosh_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    (a - b).exp() * (-(-2.0 * a).exp_m1()) / (1.0 + (-2.0 * b).exp())
}

/// `sinh(a) / sinh(b)` for `a >= 0, b > 0`.
pub(crate) fn sinh_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    (a - b).exp() * (-2.0 * a).exp_m1() / (-2.0 * b).exp_m1()
}

/// Evaluator for the kernels of the normalized problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    rho: f64,
    horizon: f64,
    delta: f64,
    lambda: f64,
    #[serde(skip)]
    flip_resolvent: bool,
}

impl KernelSet {
    pub fn new(rho: f64, horizon: f64, delta: f64, lambda: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive and finite, got {rho}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta must be nonnegative, got {delta}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(KernelSet { rho, horizon, delta, lambda, flip_resolvent: false })
    }

    pub fn from_reduced(r: &ReducedParams) -> Self {
        KernelSet {
            rho: r.rho,
            horizon: r.horizon,
            delta: r.delta,
            lambda: r.lambda_r,
            flip_resolvent: false,
        }
    }

    /// Mutation hook for the verification suite: flips the sign of the
    /// resolvent so that its defining identity no longer holds.
    #[doc(hidden)]
    pub fn with_flipped_resolvent(mut self) -> Self {
        self.flip_resolvent = true;
        self
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn sqrt_rho(&self) -> f64 {
        self.rho.sqrt()
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    /// Risk aversion of the normalized problem.
    pub fn alpha(&self) -> f64 {
        self.rho * self.lambda
    }

    fn capped(&self, s: f64) -> f64 {
        s.min(self.delta)
    }

    /// Weight `Upsilon(tau)` given to the average of the known future prices
    /// when `tau` time units remain.
    pub fn upsilon(&self, tau: f64) -> f64 {
        let y = self.sqrt_rho() * (tau - self.delta).max(0.0);
        if self.delta == 0.0 || y == 0.0 {
            return 0.0;
        }
        let c = self.delta * self.sqrt_rho() * y.tanh();
        c / (1.0 + c)
    }

    /// Speed of mean reversion towards the Merton position at time `t`.
    /// For `delta > 0` this is `upsilon(T - t) / delta`; for `delta = 0` it is
    /// the frictionless limit `sqrt(rho) tanh(sqrt(rho) (T - t))`.
    pub fn urgency(&self, t: f64) -> f64 {
        let y = self.sqrt_rho() * (self.horizon - t - self.delta).max(0.0);
        let th = y.tanh();
        self.sqrt_rho() * th / (1.0 + self.delta * self.sqrt_rho() * th)
    }

    /// Minimizing control of the deterministic a-problem per unit of initial
    /// position.
    pub fn a_hat(&self, t: f64) -> f64 {
        let sr = self.sqrt_rho();
        self.alpha() * cosh_ratio(sr * (self.horizon - t), sr * self.horizon)
    }

    /// `int_s^T a_hat(u) / lambda du`.
    pub fn a_hat_tail_integral(&self, s: f64) -> f64 {
        let sr = self.sqrt_rho();
        sr * sinh_cosh_ratio(sr * (self.horizon - s).max(0.0), sr * self.horizon)
    }

    /// Minimum value of the a-problem is `-a_hat_minimum() * phi0^2`.
    pub fn a_hat_minimum(&self) -> f64 {
        let sr = self.sqrt_rho();
        self.lambda * sr * (sr * self.horizon).tanh() / 2.0
    }

    /// Minimizer of the l-problem attached to time `s`, evaluated at `t >= s`.
    pub fn l_hat(&self, t: f64, s: f64) -> f64 {
        let d = self.capped(s);
        if d <= 0.0 {
            return 0.0;
        }
        let sr = self.sqrt_rho();
        let xs = sr * (self.horizon - s);
        self.rho * d * cosh_ratio(sr * (self.horizon - t), xs) / (1.0 + sr * d * xs.tanh())
    }

    fn ln_l_hat(&self, t: f64, s: f64) -> f64 {
        let d = self.capped(s);
        let sr = self.sqrt_rho();
        let xs = sr * (self.horizon - s);
        (self.rho * d).ln() + ln_cosh_ratio(sr * (self.horizon - t), xs) - (sr * d * xs.tanh()).ln_1p()
    }

    /// Minimum value `L_hat(s)` of the l-problem attached to time `s`.
    pub fn l_hat_minimum(&self, s: f64) -> f64 {
        let d = self.capped(s);
        let sr = self.sqrt_rho();
        d / (1.0 + d * sr * (sr * (self.horizon - s)).tanh()) / (2.0 * self.lambda)
    }

    /// `int_s^t l_hat(u, u) du` by adaptive quadrature, split at `delta`.
    pub fn diagonal_integral(&self, s: f64, t: f64) -> f64 {
        quad::integrate_split(|u| self.l_hat(u, u), s, t, &[self.delta])
    }

    /// Resolvent kernel of `l_hat`.
    pub fn k_hat(&self, t: f64, s: f64) -> f64 {
        if self.capped(s) <= 0.0 {
            return 0.0;
        }
        let k = -(self.diagonal_integral(s, t) + self.ln_l_hat(t, s)).exp();
        if self.flip_resolvent {
            -k
        } else {
            k
        }
    }

    /// `k_hat(t,s) + l_hat(t,s) - int_s^t l_hat(t,u) k_hat(u,s) du`, which
    /// vanishes for the true resolvent.
    pub fn resolvent_residual(&self, t: f64, s: f64) -> f64 {
        if self.capped(s) <= 0.0 {
            return 0.0;
        }
        let conv = quad::integrate_split(|u| self.l_hat(t, u) * self.k_hat(u, s), s, t, &[self.delta]);
        self.k_hat(t, s) + self.l_hat(t, s) - conv
    }

    /// Extremal `g(t) = theta sinh(sqrt(rho)(T-t)) / sinh(sqrt(rho)(T-s))` of
    /// the boundary value problem `g'' = rho g`, `g(s) = theta`, `g(T) = 0`.
    pub fn euler_lagrange_extremal(&self, theta: f64, s: f64, t: f64) -> Result<f64> {
        if s >= self.horizon {
            return Err(Error::Domain(format!(
                "extremal needs s < T (s = {s}, T = {})",
                self.horizon
            )));
        }
        if !(0.0 <= s && s <= t && t <= self.horizon) {
            return Err(Error::Domain(format!("need 0 <= s <= t <= T, got s = {s}, t = {t}")));
        }
        let sr = self.sqrt_rho();
        Ok(theta * sinh_ratio(sr * (self.horizon - t), sr * (self.horizon - s)))
    }

    /// Boundary weight `f_T(s)` for `0 <= s <= min(delta, T)`; linear in `s`.
    pub fn f_t(&self, s: f64) -> f64 {
        let sr = self.sqrt_rho();
        let th = (sr * (self.horizon - self.delta).max(0.0)).tanh();
        s * sr * th / (1.0 + self.delta * sr * th)
    }

    /// `f_T(s)` before simplification: an exponential of a diagonal integral
    /// times a hyperbolic ratio. Agrees with [`KernelSet::f_t`].
    pub fn f_t_unsimplified(&self, s: f64) -> f64 {
        let sr = self.sqrt_rho();
        let upper = self.delta.min(self.horizon);
        let growth = quad::integrate(
            |u| u * self.rho / (1.0 + u * sr * (sr * (self.horizon - u)).tanh()),
            s,
            upper,
        );
        let x = sr * (self.horizon - s);
        let y = sr * (self.horizon - self.delta).max(0.0);
        growth.exp() * s * sr * sinh_cosh_ratio(y, x) / (1.0 + s * sr * x.tanh())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn reference() -> KernelSet {
        // Normalized reference market: rho = 0.27, lambda_r = 0.01 / 0.3.
        KernelSet::new(0.27, 10.0, 1.0, 0.01 / 0.3).unwrap()
    }

    #[test]
    fn hyperbolic_helpers_match_direct() {
        for &(a, b) in &[(0.0, 0.0), (0.3, 1.2), (2.5, 0.7), (5.0, 5.0)] {
            assert_relative_eq!(cosh_ratio(a, b), a.cosh() / b.cosh(), max_relative = 1e-14);
            assert_relative_eq!(sinh_cosh_ratio(a, b), a.sinh() / b.cosh(), max_relative = 1e-13, epsilon = 1e-300);
        }
        assert_relative_eq!(sinh_ratio(0.4, 1.1), 0.4f64.sinh() / 1.1f64.sinh(), max_relative = 1e-13);
        // Far beyond the range of cosh itself.
        assert_relative_eq!(cosh_ratio(799.0, 800.0), (-1.0f64).exp(), max_relative = 1e-14);
        assert!(sinh_cosh_ratio(900.0, 1000.0).is_finite());
    }

    #[test]
    fn upsilon_examples() {
        let k = reference();
        assert_eq!(k.upsilon(0.5), 0.0);
        assert_eq!(k.upsilon(1.0), 0.0);
        let k0 = KernelSet::new(0.27, 10.0, 0.0, 1.0).unwrap();
        assert_eq!(k0.upsilon(7.0), 0.0);
        // Direct high-precision evaluation: sqrt(.27)*tanh(sqrt(.27)*9) / (1 + ...).
        let sr = 0.27f64.sqrt();
        let c = sr * (sr * 9.0).tanh();
        assert_relative_eq!(k.upsilon(10.0), c / (1.0 + c), max_relative = 1e-15);
        assert_abs_diff_eq!(k.upsilon(10.0), 0.34190, epsilon = 5e-6);
    }

    #[test]
    fn upsilon_long_horizon_limit() {
        let k = KernelSet::new(0.5, 200.0, 1.5, 1.0).unwrap();
        let c = 1.5 * 0.5f64.sqrt();
        assert_relative_eq!(k.upsilon(150.0), c / (1.0 + c), max_relative = 1e-12);
    }

    #[test]
    fn a_hat_examples() {
        let k = reference();
        assert_relative_eq!(k.a_hat(0.0), k.alpha(), max_relative = 1e-15);
        let sr = k.sqrt_rho();
        assert_relative_eq!(k.a_hat(10.0), k.alpha() / (sr * 10.0).cosh(), max_relative = 1e-13);
        let tiny = KernelSet::new(1e-14, 10.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(tiny.a_hat(7.0), tiny.alpha(), max_relative = 1e-12);
    }

    #[test]
    fn a_hat_tail_integral_examples() {
        let k = reference();
        assert_eq!(k.a_hat_tail_integral(10.0), 0.0);
        let sr = k.sqrt_rho();
        assert_relative_eq!(k.a_hat_tail_integral(0.0), sr * (sr * 10.0).tanh(), max_relative = 1e-14);
        // Quadrature oracle at s = T/2.
        let oracle = quad::integrate_with(|u| k.a_hat(u) / k.lambda(), 5.0, 10.0, 1e-13, 0.0).value;
        assert_abs_diff_eq!(k.a_hat_tail_integral(5.0), oracle, epsilon = 1e-12);
    }

    #[test]
    fn a_hat_tail_matches_quadrature_on_samples() {
        for &(rho, t) in &[(0.27, 10.0), (2.0, 3.0), (0.01, 50.0)] {
            let k = KernelSet::new(rho, t, 0.5, 0.7).unwrap();
            for i in 0..50 {
                let s = t * i as f64 / 49.0;
                let oracle = quad::integrate_with(|u| k.a_hat(u) / k.lambda(), s, t, 1e-14, 1e-15).value;
                let got = k.a_hat_tail_integral(s);
                assert!(
                    (got - oracle).abs() <= 1e-10 * oracle.abs().max(1e-12),
                    "rho={rho} s={s}: {got} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn a_hat_minimum_limits() {
        let short = KernelSet::new(0.27, 1e-9, 1.0, 0.01).unwrap();
        assert!(short.a_hat_minimum() < 1e-11);
        let long = KernelSet::new(0.27, 100.0, 1.0, 0.01).unwrap();
        assert_relative_eq!(long.a_hat_minimum(), 0.01 * 0.27f64.sqrt() / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn l_hat_examples() {
        let k = reference();
        assert_eq!(k.l_hat(4.0, 0.0), 0.0);
        let k0 = KernelSet::new(0.27, 10.0, 0.0, 1.0).unwrap();
        assert_eq!(k0.l_hat(4.0, 2.0), 0.0);
        assert_relative_eq!(k.l_hat(10.0, 10.0), 0.27 * 1.0, max_relative = 1e-14);
        let beyond = KernelSet::new(0.27, 10.0, 12.0, 1.0).unwrap();
        assert_relative_eq!(beyond.l_hat(10.0, 10.0), 0.27 * 10.0, max_relative = 1e-14);
    }

    #[test]
    fn l_hat_minimum_examples() {
        let k = reference();
        assert_eq!(k.l_hat_minimum(0.0), 0.0);
        let k0 = KernelSet::new(0.27, 10.0, 0.0, 1.0).unwrap();
        assert_eq!(k0.l_hat_minimum(3.0), 0.0);
        assert_relative_eq!(k.l_hat_minimum(10.0), 1.0 / (2.0 * k.lambda()), max_relative = 1e-14);
        let beyond = KernelSet::new(0.27, 4.0, 9.0, 0.5).unwrap();
        assert_relative_eq!(beyond.l_hat_minimum(4.0), 4.0 / 1.0, max_relative = 1e-14);
    }

    #[test]
    fn k_hat_examples() {
        let k = reference();
        assert_eq!(k.k_hat(3.0, 0.0), 0.0);
        assert_relative_eq!(k.k_hat(2.5, 2.5), -k.l_hat(2.5, 2.5), max_relative = 1e-14);
        for &(t, s) in &[(3.0, 0.5), (9.0, 2.0), (10.0, 9.9)] {
            assert!(k.resolvent_residual(t, s).abs() < 1e-8);
        }
        assert_eq!(k.resolvent_residual(4.0, 0.0), 0.0);
        let k0 = KernelSet::new(0.27, 10.0, 0.0, 1.0).unwrap();
        assert_eq!(k0.resolvent_residual(4.0, 2.0), 0.0);
    }

    #[test]
    fn flipped_resolvent_breaks_identity() {
        let k = reference().with_flipped_resolvent();
        assert!(k.resolvent_residual(6.0, 0.8).abs() > 1e-3);
    }

    #[test]
    fn extremal_boundary_values_and_ode() {
        let k = reference();
        let (theta, s) = (0.7, 2.0);
        assert_eq!(k.euler_lagrange_extremal(theta, s, 10.0).unwrap(), 0.0);
        assert_relative_eq!(k.euler_lagrange_extremal(theta, s, s).unwrap(), theta, max_relative = 1e-15);
        // Central second differences against rho * g.
        let h = 1e-3;
        for &t in &[2.5, 4.0, 7.0, 9.5] {
            let g = |x| k.euler_lagrange_extremal(theta, s, x).unwrap();
            let second = (g(t + h) - 2.0 * g(t) + g(t - h)) / (h * h);
            assert_relative_eq!(second, k.rho() * g(t), max_relative = 1e-6);
        }
        assert!(matches!(k.euler_lagrange_extremal(1.0, 10.0, 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn f_t_examples() {
        let k = reference();
        assert_eq!(k.f_t(0.0), 0.0);
        let full = KernelSet::new(0.27, 2.0, 3.0, 1.0).unwrap();
        assert_eq!(full.f_t(1.5), 0.0);
        assert_eq!(full.f_t_unsimplified(1.5), 0.0);
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            assert_abs_diff_eq!(k.f_t(s), k.f_t_unsimplified(s), epsilon = 1e-8);
        }
    }

    #[test]
    fn f_t_matches_its_definition_as_kernel_integral() {
        // f_T(s) = int_{delta}^T exp(int_s^delta l(u,u) du) l(t, s) dt for s <= delta < T.
        let k = KernelSet::new(0.8, 5.0, 1.3, 0.4).unwrap();
        for &s in &[0.1, 0.6, 1.3] {
            let growth = k.diagonal_integral(s, k.delta()).exp();
            let direct = growth * quad::integrate(|t| k.l_hat(t, s), k.delta(), k.horizon());
            assert_abs_diff_eq!(k.f_t(s), direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn large_horizon_stays_finite() {
        let k = KernelSet::new(1.0, 600.0, 2.0, 1.0).unwrap();
        for &(t, s) in &[(0.0, 0.0), (300.0, 1.0), (599.0, 100.0), (600.0, 600.0)] {
            assert!(k.l_hat(t, s).is_finite());
            assert!(k.a_hat(t).is_finite());
            assert!(k.a_hat_tail_integral(s).is_finite());
        }
        assert!(k.k_hat(400.0, 1.0).is_finite());
    }

    proptest! {
        #[test]
        fn sign_and_monotonicity(
            rho in 0.01..5.0f64,
            horizon in 0.5..20.0f64,
            dfrac in 0.0..1.5f64,
            a in 0.0..1.0f64,
            b in 0.0..1.0f64,
        ) {
            let delta = dfrac * horizon;
            let k = KernelSet::new(rho, horizon, delta, 1.0).unwrap();
            let (s, t) = if a <= b { (a * horizon, b * horizon) } else { (b * horizon, a * horizon) };
            prop_assert!(k.l_hat(t, s) >= 0.0);
            prop_assert!(k.k_hat(t, s) <= 0.0);
            // l_hat nonincreasing in t
            prop_assert!(k.l_hat(t, s) <= k.l_hat(s, s) * (1.0 + 1e-14));
            // upsilon nondecreasing in tau and in delta, bounded in [0, 1)
            let u = k.upsilon(t);
            prop_assert!((0.0..1.0).contains(&u));
            prop_assert!(k.upsilon(s) <= u + 1e-15);
            // More lookahead weights the average more once enough time is left:
            // d/d(delta) has the sign of sinh(2y)/2 - delta sqrt(rho).
            let wide = delta * 1.1 + 0.01;
            let wider = KernelSet::new(rho, horizon, wide, 1.0).unwrap();
            let sr = rho.sqrt();
            let tau = wide + (2.0 * wide * sr).asinh() / (2.0 * sr) + t;
            prop_assert!(wider.upsilon(tau) + 1e-15 >= k.upsilon(tau));
        }

        #[test]
        fn urgency_times_delta_is_upsilon(
            rho in 0.01..5.0f64,
            delta in 0.01..5.0f64,
            t in 0.0..10.0f64,
        ) {
            let k = KernelSet::new(rho, 10.0, delta, 1.0).unwrap();
            prop_assert!((delta * k.urgency(t) - k.upsilon(10.0 - t)).abs() <= 1e-14);
        }
    }
}
