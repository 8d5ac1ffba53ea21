//! Closed-form value and certainty equivalent, Monte Carlo expected utility
//! and the perturbation battery.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_sim::{generate_path, TimeGrid};
use crate::params::{ModelParams, ReducedParams};
use crate::policy::{FnPolicy, Policy, RateSplit, Schedule, StandardPolicy, StepContext, terminal_pnl};
use crate::quad::integrate_split;

/// Utility exponents above this are clamped before `exp`.
pub const MAX_EXPONENT: f64 = 700.0;

/// `int_0^T (s ^ delta) / (1 + (s ^ delta) sqrt(rho) tanh(sqrt(rho)(T - s))) ds`.
pub fn lookahead_integral(params: &ModelParams) -> f64 {
    lookahead_integral_raw(params.rho(), params.horizon(), params.delta())
}

fn lookahead_integral_raw(rho: f64, horizon: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    let sr = rho.sqrt();
    integrate_split(
        |s| {
            let d = s.min(delta);
            d / (1.0 + d * sr * (sr * (horizon - s)).tanh())
        },
        0.0,
        horizon,
        &[delta],
    )
}

/// `log(-primal_value)`, finite even where the value itself under- or
/// overflows.
pub fn ln_neg_primal_value(params: &ModelParams) -> f64 {
    let sr = params.rho().sqrt();
    let off = params.phi0() - params.merton_position();
    let unwind = params.alpha() * params.lambda() * sr * (sr * params.horizon()).tanh() / 2.0 * off * off;
    let premium = params.mu() * params.mu() * params.horizon() / (2.0 * params.sigma() * params.sigma());
    unwind - premium - 0.5 * params.rho() * lookahead_integral(params)
}

/// Maximal expected utility `E[-exp(-alpha V)]`.
pub fn primal_value(params: &ModelParams) -> f64 {
    -ln_neg_primal_value(params).exp()
}

/// Value of the dual problem in normalized coordinates.
pub fn dual_value_reduced(reduced: &ReducedParams) -> f64 {
    let sr = reduced.rho.sqrt();
    let unwind = reduced.lambda_r * reduced.phi0_r * reduced.phi0_r * sr * (sr * reduced.horizon).tanh() / 2.0;
    let info = lookahead_integral_raw(reduced.rho, reduced.horizon, reduced.delta) / (2.0 * reduced.lambda_r);
    info - unwind
}

/// Dual value mapped to original units; equals `-(1/alpha) log(-primal)`.
pub fn dual_value(params: &ModelParams) -> f64 {
    let r = params.reduce();
    r.sigma * dual_value_reduced(&r) + r.entropy_shift / params.alpha()
}

/// Cash value of the lookahead. Independent of `mu` and `phi0`.
pub fn certainty_equivalent(params: &ModelParams) -> f64 {
    params.rho() * lookahead_integral(params) / (2.0 * params.alpha())
}

/// `-exp(-alpha v)`, with the exponent clamped at [`MAX_EXPONENT`].
pub fn utility(alpha: f64, v: f64) -> (f64, bool) {
    let x = -alpha * v;
    if x > MAX_EXPONENT {
        (-MAX_EXPONENT.exp(), true)
    } else {
        (-x.exp(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Samples whose utility exponent was clamped.
    pub clamped: usize,
}

impl MCEstimate {
    pub fn from_samples(samples: &[f64], seed: u64, clamped: usize) -> Self {
        let (mean, std_error) = mean_and_se(samples);
        MCEstimate { mean, std_error, n_samples: samples.len(), seed, clamped }
    }

    /// Distance to `x` in standard errors.
    pub fn gap_in_sigmas(&self, x: f64) -> f64 {
        (self.mean - x).abs() / self.std_error
    }
}

/// Sample mean and its standard error, summed in index order.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Utilities of several policies on the same simulated paths. Row `i` holds
/// the utilities of path `i`.
fn utility_matrix(
    policies: &[&dyn Policy],
    params: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let grid = TimeGrid::new(params, n_steps)?;
    let schedule = Schedule::new(params, &grid);
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = generate_path(params, &grid, seed, i);
            policies
                .iter()
                .map(|p| utility(params.alpha(), terminal_pnl(&path, &grid, &schedule, params, *p)))
                .unzip()
        })
        .collect();
    let mut clamped = vec![0; policies.len()];
    let mut utilities = Vec::with_capacity(n_paths);
    for (u, c) in rows {
        for (j, flag) in c.iter().enumerate() {
            clamped[j] += usize::from(*flag);
        }
        utilities.push(u);
    }
    if utilities.iter().flatten().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("non-finite utility in Monte Carlo run".into()));
    }
    Ok((utilities, clamped))
}

/// Monte Carlo estimate of `E[-exp(-alpha V)]` for one policy.
pub fn mc_expected_utility<P: Policy>(
    policy: &P,
    params: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<MCEstimate> {
    let (rows, clamped) = utility_matrix(&[policy], params, n_paths, n_steps, seed)?;
    let column: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    Ok(MCEstimate::from_samples(&column, seed, clamped[0]))
}

/// Policies evaluated on common random numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub names: Vec<String>,
    pub estimates: Vec<MCEstimate>,
    /// `E[U_j - U_0]` with the paired standard error, for every policy `j`.
    pub paired_diff: Vec<(f64, f64)>,
}

pub fn mc_compare(
    policies: &[&dyn Policy],
    params: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Comparison> {
    if policies.is_empty() {
        return Err(Error::Input("nothing to compare".into()));
    }
    let (rows, clamped) = utility_matrix(policies, params, n_paths, n_steps, seed)?;
    let mut estimates = Vec::new();
    let mut paired_diff = Vec::new();
    for j in 0..policies.len() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        estimates.push(MCEstimate::from_samples(&col, seed, clamped[j]));
        let diff: Vec<f64> = rows.iter().map(|r| r[j] - r[0]).collect();
        paired_diff.push(mean_and_se(&diff));
    }
    Ok(Comparison { names: policies.iter().map(|p| p.name().to_string()).collect(), estimates, paired_diff })
}

/// Least-squares line through `(dt, mean)` evaluated at `dt = 0`, with the
/// standard error propagated from independent level estimates.
pub fn extrapolate_linear(levels: &[(f64, MCEstimate)]) -> Result<(f64, f64)> {
    if levels.len() < 2 {
        return Err(Error::Input("extrapolation needs at least two levels".into()));
    }
    let n = levels.len() as f64;
    let xbar = levels.iter().map(|(x, _)| x).sum::<f64>() / n;
    let sxx: f64 = levels.iter().map(|(x, _)| (x - xbar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("extrapolation needs distinct step sizes".into()));
    }
    // intercept = sum_i w_i y_i
    let weights: Vec<f64> = levels.iter().map(|(x, _)| 1.0 / n - xbar * (x - xbar) / sxx).collect();
    let intercept = weights.iter().zip(levels).map(|(w, (_, e))| w * e.mean).sum();
    let var: f64 = weights.iter().zip(levels).map(|(w, (_, e))| (w * e.std_error).powi(2)).sum();
    Ok((intercept, var.sqrt()))
}

/// Bounded perturbation directions adapted to the lookahead information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Constant,
    /// `sign(S_bar - S)`
    SignFrontrun,
    /// Indicator of `[T/4, T/2]`.
    Bump,
    /// `1 - t/T`
    Ramp,
    /// `sign(m - Phi)`
    SignMerton,
    /// `sign(S_{t+delta} - S_t)`
    SignLookahead,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Constant,
        Direction::SignFrontrun,
        Direction::Bump,
        Direction::Ramp,
        Direction::SignMerton,
        Direction::SignLookahead,
    ];

    pub fn eval(&self, ctx: &StepContext<'_>) -> f64 {
        let horizon = ctx.params.horizon();
        match self {
            Direction::Constant => 1.0,
            Direction::SignFrontrun => sign(ctx.s_bar() - ctx.price()),
            Direction::Bump => {
                if (0.25 * horizon..=0.5 * horizon).contains(&ctx.t) {
                    1.0
                } else {
                    0.0
                }
            }
            Direction::Ramp => 1.0 - ctx.t / horizon,
            Direction::SignMerton => sign(ctx.params.merton_position() - ctx.position),
            Direction::SignLookahead => sign(ctx.view.last() - ctx.price()),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Natural size of a rate perturbation: one lookahead window of price noise
/// traded at the impact cost.
pub fn perturbation_scale(params: &ModelParams, dt: f64) -> f64 {
    params.sigma() * params.delta().max(dt).sqrt() / params.lambda()
}

/// The informed policy plus `eps * direction`.
pub fn perturbed(direction: Direction, eps: f64) -> impl Policy {
    FnPolicy::new(format!("{direction:?}{eps:+}"), move |ctx: &StepContext<'_>| {
        let base = StandardPolicy::Informed.rate(ctx);
        RateSplit { frontrun: base.frontrun, merton: base.merton + eps * direction.eval(ctx) }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub direction: Direction,
    /// Relative size; the absolute perturbation is `eps * scale`.
    pub eps: f64,
    /// `E[U_eps - U_0]` and its paired standard error.
    pub diff: f64,
    pub std_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcavityOutcome {
    pub direction: Direction,
    pub eps: f64,
    /// `E[(U_+ + U_-)/2 - U_0]` and its paired standard error.
    pub diff: f64,
    pub std_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub base: MCEstimate,
    pub scale: f64,
    pub outcomes: Vec<PerturbationOutcome>,
    pub concavity: Vec<ConcavityOutcome>,
}

impl PerturbationReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed) && self.concavity.iter().all(|c| c.passed)
    }
}

/// Checks that no perturbation of the informed policy beats it by more than
/// three paired standard errors. Each positive `eps` is also paired with
/// `-eps` for the concavity check.
pub fn perturbation_test(
    params: &ModelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    directions: &[Direction],
    eps: &[f64],
) -> Result<PerturbationReport> {
    let grid = TimeGrid::new(params, n_steps)?;
    let scale = perturbation_scale(params, grid.dt);
    let mut cases = Vec::new();
    for &d in directions {
        for &e in eps {
            cases.push((d, e));
        }
    }
    let mut policies: Vec<Box<dyn Policy>> = vec![Box::new(StandardPolicy::Informed)];
    for &(d, e) in &cases {
        policies.push(Box::new(perturbed(d, e * scale)));
    }
    let refs: Vec<&dyn Policy> = policies.iter().map(|p| p.as_ref()).collect();
    let (rows, clamped) = utility_matrix(&refs, params, n_paths, n_steps, seed)?;

    let base_col: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let base = MCEstimate::from_samples(&base_col, seed, clamped[0]);
    let mut outcomes = Vec::new();
    for (j, &(direction, e)) in cases.iter().enumerate() {
        let diff: Vec<f64> = rows.iter().map(|r| r[j + 1] - r[0]).collect();
        let (m, se) = mean_and_se(&diff);
        outcomes.push(PerturbationOutcome { direction, eps: e, diff: m, std_error: se, passed: m <= 3.0 * se });
    }
    let mut concavity = Vec::new();
    for (j, &(direction, e)) in cases.iter().enumerate() {
        if e <= 0.0 {
            continue;
        }
        let Some(k) = cases.iter().position(|&(d2, e2)| d2 == direction && e2 == -e) else {
            continue;
        };
        let diff: Vec<f64> = rows.iter().map(|r| 0.5 * (r[j + 1] + r[k + 1]) - r[0]).collect();
        let (m, se) = mean_and_se(&diff);
        concavity.push(ConcavityOutcome { direction, eps: e, diff: m, std_error: se, passed: m <= 3.0 * se });
    }
    Ok(PerturbationReport { base, scale, outcomes, concavity })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueReport {
    pub primal_closed_form: f64,
    pub dual_closed_form: f64,
    pub certainty_equivalent: f64,
    pub mc_estimate: Option<MCEstimate>,
    pub mc_gap_in_sigmas: Option<f64>,
}

/// Closed-form values, optionally with a Monte Carlo cross-check of the
/// informed policy.
pub fn value_report(params: &ModelParams, mc: Option<(usize, usize, u64)>) -> Result<ValueReport> {
    let primal = primal_value(params);
    let mc_estimate = match mc {
        Some((n_paths, n_steps, seed)) => {
            Some(mc_expected_utility(&StandardPolicy::Informed, params, n_paths, n_steps, seed)?)
        }
        None => None,
    };
    Ok(ValueReport {
        primal_closed_form: primal,
        dual_closed_form: dual_value(params),
        certainty_equivalent: certainty_equivalent(params),
        mc_gap_in_sigmas: mc_estimate.map(|e| e.gap_in_sigmas(primal)),
        mc_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn reference() -> ModelParams {
        ModelParams::reference()
    }

    fn random_params() -> impl Strategy<Value = ModelParams> {
        (
            -1.0..1.0f64,
            0.05..2.0f64,
            1e-3..1.0f64,
            1e-3..1.0f64,
            0.5..20.0f64,
            0.0..1.5f64,
            -20.0..20.0f64,
        )
            .prop_map(|(mu, sigma, lambda, alpha, horizon, frac, phi0)| {
                ModelParams::builder()
                    .mu(mu)
                    .sigma(sigma)
                    .lambda(lambda)
                    .alpha(alpha)
                    .horizon(horizon)
                    .delta(frac * horizon)
                    .phi0(phi0)
                    .build()
                    .unwrap()
            })
    }

    #[test]
    fn primal_examples() {
        let p = reference().to_builder().delta(0.0).mu(0.0).build().unwrap();
        assert_eq!(primal_value(&p), -1.0);
        let q = reference().to_builder().delta(0.0).build().unwrap();
        let q = q.to_builder().phi0(q.merton_position()).build().unwrap();
        let expected = -(-q.mu() * q.mu() * q.horizon() / (2.0 * q.sigma() * q.sigma())).exp();
        assert_relative_eq!(primal_value(&q), expected, max_relative = 1e-14);
        assert!(primal_value(&reference()) < 0.0);
    }

    #[test]
    fn dual_examples() {
        let p = reference().to_builder().delta(0.0).build().unwrap();
        let r = p.to_builder().phi0(p.merton_position()).build().unwrap().reduce();
        assert_eq!(dual_value_reduced(&r), 0.0);
        let r = p.to_builder().phi0(3.0).build().unwrap().reduce();
        let sr = r.rho.sqrt();
        let expected = -r.lambda_r * r.phi0_r * r.phi0_r * sr * (sr * r.horizon).tanh() / 2.0;
        assert_relative_eq!(dual_value_reduced(&r), expected, max_relative = 1e-14);
    }

    #[test]
    fn certainty_equivalent_examples() {
        assert_eq!(certainty_equivalent(&reference().to_builder().delta(0.0).build().unwrap()), 0.0);
        let base = reference();
        let ce = |mu: f64| certainty_equivalent(&base.to_builder().mu(mu).phi0(mu * 7.0).build().unwrap());
        assert_eq!(ce(-1.0).to_bits(), ce(0.0).to_bits());
        assert_eq!(ce(1.0).to_bits(), ce(0.0).to_bits());
        // Ratio form.
        let p0 = base.to_builder().delta(0.0).build().unwrap();
        let ratio = -(primal_value(&base) / primal_value(&p0)).ln() / base.alpha();
        assert_relative_eq!(ratio, certainty_equivalent(&base), max_relative = 1e-10);
    }

    #[test]
    fn certainty_equivalent_monotone() {
        let base = reference();
        let mut last = -1.0;
        for i in 0..=20 {
            let c = certainty_equivalent(&base.to_builder().delta(0.5 * i as f64).build().unwrap());
            assert!(c > last || (i == 0 && c == 0.0));
            last = c;
        }
        let c = |b: crate::params::ParamsBuilder| certainty_equivalent(&b.build().unwrap());
        assert!(c(base.to_builder().sigma(0.4)) > c(base.to_builder()));
        assert!(c(base.to_builder().horizon(12.0)) > c(base.to_builder()));
    }

    #[test]
    fn long_run_accrual_rate() {
        // alpha * dc/dT at large T approaches rho delta / (2 (1 + delta sqrt(rho))).
        let base = reference().to_builder().horizon(100.0).build().unwrap();
        let shorter = base.to_builder().horizon(99.0).build().unwrap();
        let rate = base.alpha() * (certainty_equivalent(&base) - certainty_equivalent(&shorter));
        let (rho, d) = (base.rho(), base.delta());
        let target = rho * d / (2.0 * (1.0 + d * rho.sqrt()));
        assert!((rate / target - 1.0).abs() < 0.01);
        assert!(rate <= rho.sqrt() / 2.0);
    }

    #[test]
    fn utility_clamps() {
        assert_eq!(utility(1.0, 0.0), (-1.0, false));
        let (u, c) = utility(1.0, -1e6);
        assert!(c && u.is_finite());
    }

    #[test]
    fn do_nothing_utility_is_minus_one() {
        let p = reference().to_builder().mu(0.0).build().unwrap();
        let idle = FnPolicy::new("idle", |_: &StepContext<'_>| RateSplit::default());
        let est = mc_expected_utility(&idle, &p, 200, 50, 1).unwrap();
        assert_eq!(est.mean, -1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn constant_rate_matches_discrete_oracle() {
        // delta = 0, mu = 0, phi0 = 0 and phi = c: V is Gaussian with mean
        // -lambda c^2 T / 2 and variance sigma^2 dt^3 c^2 N(N+1)(2N+1)/6.
        let p = reference().to_builder().delta(0.0).mu(0.0).build().unwrap();
        let n = 40usize;
        let dt = p.horizon() / n as f64;
        let c = 0.6;
        let konst = FnPolicy::new("c", move |_: &StepContext<'_>| RateSplit { frontrun: 0.0, merton: c });
        let est = mc_expected_utility(&konst, &p, 100_000, n, 5).unwrap();
        let nf = n as f64;
        let var = p.sigma().powi(2) * dt.powi(3) * nf * (nf + 1.0) * (2.0 * nf + 1.0) / 6.0 * c * c;
        let a = p.alpha();
        let exact = -(a * p.lambda() * c * c * p.horizon() / 2.0 + a * a * var / 2.0).exp();
        assert!(est.gap_in_sigmas(exact) < 3.5, "{} vs {exact}", est.mean);
        assert!(est.mean < -1.0 + 3.0 * est.std_error);
    }

    #[test]
    fn extrapolation_weights() {
        let mk = |mean, se| MCEstimate { mean, std_error: se, n_samples: 1, seed: 0, clamped: 0 };
        let levels = [(0.02, mk(1.02, 0.1)), (0.01, mk(1.01, 0.1)), (0.005, mk(1.005, 0.1))];
        let (b, se) = extrapolate_linear(&levels).unwrap();
        assert_relative_eq!(b, 1.0, max_relative = 1e-12);
        let expected_se = 0.1 * (0.25f64 + 0.25 + 1.0).sqrt();
        assert_relative_eq!(se, expected_se, max_relative = 1e-12);
        assert!(extrapolate_linear(&levels[..1]).is_err());
    }

    #[test]
    fn zero_perturbation_is_the_base_estimate() {
        let p = reference();
        let report = perturbation_test(&p, 500, 100, 3, &[Direction::Ramp], &[0.0]).unwrap();
        let base = mc_expected_utility(&StandardPolicy::Informed, &p, 500, 100, 3).unwrap();
        assert_eq!(report.base, base);
        assert_eq!(report.outcomes[0].diff, 0.0);
    }

    #[test]
    fn constant_perturbation_strictly_hurts() {
        let p = reference().to_builder().delta(0.0).mu(0.0).build().unwrap();
        let report = perturbation_test(&p, 100_000, 100, 7, &[Direction::Constant], &[0.1, -0.1]).unwrap();
        for o in &report.outcomes {
            assert!(o.diff < -3.0 * o.std_error, "{o:?}");
        }
    }

    #[test]
    fn value_report_trivial_market() {
        let p = reference().to_builder().delta(0.0).mu(0.0).build().unwrap();
        let r = value_report(&p, None).unwrap();
        assert_eq!(r.primal_closed_form, -1.0);
        assert_eq!(r.certainty_equivalent, 0.0);
        assert!(r.mc_estimate.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("mc_gap_in_sigmas"));
    }

    #[test]
    fn primal_decreases_with_impact() {
        let base = reference().to_builder().phi0(10.0).build().unwrap();
        let mut last = f64::INFINITY;
        for l in [0.001, 0.003, 0.01, 0.03, 0.1, 0.3] {
            let v = primal_value(&base.to_builder().lambda(l).build().unwrap());
            assert!(v <= last);
            last = v;
        }
    }

    proptest! {
        #[test]
        fn duality_identity(p in random_params()) {
            let lhs = -ln_neg_primal_value(&p) / p.alpha();
            let rhs = dual_value(&p);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300), "{lhs} vs {rhs}");
        }

        #[test]
        fn reduction_consistency(p in random_params()) {
            let r = p.reduce();
            let via = ln_neg_primal_value(&r.as_model().unwrap()) - r.entropy_shift;
            let direct = ln_neg_primal_value(&p);
            prop_assert!((via - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            let round = r.unreduce().unwrap();
            prop_assert!((ln_neg_primal_value(&round) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }
}
