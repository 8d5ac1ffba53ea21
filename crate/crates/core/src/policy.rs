//! Optimal turnover rate in feedback form, comparison policies and the
//! forward-Euler rollout engine.
//!
//! All functions here work in original price units. The open-loop form lives
//! in [`crate::open_loop`].

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::market_sim::{lookahead_view, pnl, LookaheadView, PnlBreakdown, StrategyTrace, TimeGrid};
use crate::params::ModelParams;
use crate::quad::trapezoid;

/// The two addends of the feedback rate: trading on the known price
/// average, and mean reversion towards the Merton position.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateSplit {
    pub frontrun: f64,
    pub merton: f64,
}

impl RateSplit {
    pub fn total(&self) -> f64 {
        self.frontrun + self.merton
    }
}

/// State handed to [`s_bar`] and [`feedback_rate`].
#[derive(Debug, Clone, Copy)]
pub struct PolicyInputs<'a> {
    pub t: f64,
    pub window: LookaheadView<'a>,
    pub position: f64,
}

impl PolicyInputs<'_> {
    pub fn current_price(&self) -> f64 {
        self.window.first()
    }
}

/// Kernels of the market in a form usable from original coordinates. The
/// weight and the urgency only depend on `(rho, T, delta)`.
pub fn kernels_for(params: &ModelParams) -> KernelSet {
    KernelSet::from_reduced(&params.reduce())
}

/// Whether `t` lies in the final stretch `T - t <= delta`, decided with a
/// relative tolerance so that grid times land on the right side.
fn in_terminal_stretch(t: f64, horizon: f64, delta: f64) -> bool {
    horizon - t - delta <= 1e-12 * horizon
}

fn check_window(inputs: &PolicyInputs<'_>, horizon: f64, delta: f64) -> Result<()> {
    let w = &inputs.window;
    let dt = w.dt();
    let m = w.lookahead_steps();
    if delta < horizon && (m as f64 * dt - delta).abs() > 1e-9 * delta.max(dt) {
        return Err(Error::Input(format!(
            "window spans {m} steps of {dt}, lookahead is {delta}"
        )));
    }
    let remaining = ((horizon - inputs.t) / dt).round();
    if remaining < 0.0 || (horizon - inputs.t - remaining * dt).abs() > 1e-9 * horizon {
        return Err(Error::Input(format!("t = {} is not a grid time", inputs.t)));
    }
    let expected = m.min(remaining as usize) + 1;
    if w.len() != expected {
        return Err(Error::Input(format!(
            "window has {} samples, expected {expected} at t = {}",
            w.len(),
            inputs.t
        )));
    }
    Ok(())
}

/// Weighted price average `(1 - U) S_{t+delta} + U / delta int_t^{t+delta} S`
/// with `U = upsilon(T - t)`.
pub fn s_bar(inputs: &PolicyInputs<'_>, kernels: &KernelSet) -> Result<f64> {
    check_window(inputs, kernels.horizon(), kernels.delta())?;
    if kernels.delta() == 0.0 {
        return Ok(inputs.window.first());
    }
    if in_terminal_stretch(inputs.t, kernels.horizon(), kernels.delta()) {
        return Ok(inputs.window.last());
    }
    let u = kernels.upsilon(kernels.horizon() - inputs.t);
    Ok(blend(inputs.window.last(), inputs.window.window_integral(), u, kernels.delta()))
}

fn blend(last: f64, integral: f64, upsilon: f64, delta: f64) -> f64 {
    if upsilon == 0.0 {
        last
    } else {
        (1.0 - upsilon) * last + upsilon * integral / delta
    }
}

fn split(s_t: f64, s_bar: f64, urgency: f64, position: f64, params: &ModelParams) -> RateSplit {
    RateSplit {
        frontrun: (s_bar - s_t) / params.lambda(),
        merton: urgency * (params.merton_position() - position),
    }
}

/// Optimal turnover rate in feedback form.
pub fn feedback_rate(inputs: &PolicyInputs<'_>, params: &ModelParams) -> Result<RateSplit> {
    let ks = kernels_for(params);
    let sb = s_bar(inputs, &ks)?;
    Ok(split(inputs.window.first(), sb, urgency(inputs.t, params), inputs.position, params))
}

/// Mean-reversion speed towards the Merton position.
pub fn urgency(t: f64, params: &ModelParams) -> f64 {
    if params.delta() > 0.0 && in_terminal_stretch(t, params.horizon(), params.delta()) {
        return 0.0;
    }
    kernels_for(params).urgency(t)
}

/// Initial turnover rate from the price prefix `S_0, ..., S_{delta ^ T}`
/// sampled with step `dt`.
pub fn initial_rate_closed_form(prefix: &[f64], dt: f64, params: &ModelParams) -> Result<f64> {
    let span = params.delta().min(params.horizon());
    let steps = span / dt;
    if prefix.is_empty() || (steps - (prefix.len() - 1) as f64).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::Input(format!(
            "prefix of {} samples does not cover [0, {span}] at dt = {dt}",
            prefix.len()
        )));
    }
    let sr = params.rho().sqrt();
    let th = (sr * (params.horizon() - params.delta()).max(0.0)).tanh();
    let lam = params.lambda();
    let d = params.delta();
    // sqrt(rho) / (coth + d sqrt(rho)), written with tanh so that th = 0 is safe.
    let weight = sr * th / (1.0 + d * sr * th);
    let s_end = prefix[prefix.len() - 1];
    Ok(s_end / (1.0 + d * sr * th) / lam + weight * trapezoid(prefix, dt) / lam - prefix[0] / lam
        + weight * (params.merton_position() - params.phi0()))
}

/// Deterministic per-step coefficients shared by every rollout on a grid.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub upsilon: Vec<f64>,
    pub urgency: Vec<f64>,
    /// Urgency of the investor without lookahead.
    pub urgency_uninformed: Vec<f64>,
}

impl Schedule {
    pub fn new(params: &ModelParams, grid: &TimeGrid) -> Self {
        let ks = kernels_for(params);
        let blind = KernelSet::new(params.rho(), params.horizon(), 0.0, ks.lambda())
            .expect("parameters were validated");
        let n = grid.n_steps;
        let m = grid.lookahead_steps;
        let mut upsilon = Vec::with_capacity(n);
        let mut urg = Vec::with_capacity(n);
        let mut urg0 = Vec::with_capacity(n);
        for k in 0..n {
            let t = grid.time(k);
            // Exact zeros once the window reaches the horizon.
            if params.delta() > 0.0 && n - k <= m {
                upsilon.push(0.0);
                urg.push(0.0);
            } else {
                upsilon.push(ks.upsilon(params.horizon() - t));
                urg.push(ks.urgency(t));
            }
            urg0.push(blind.urgency(t));
        }
        Schedule { upsilon, urgency: urg, urgency_uninformed: urg0 }
    }
}

/// Everything a policy may look at on step `k`.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub k: usize,
    pub t: f64,
    pub view: LookaheadView<'a>,
    pub position: f64,
    /// `int_t^{t+delta} S_u du` on the visible window.
    pub window_integral: f64,
    pub upsilon: f64,
    pub urgency: f64,
    pub urgency_uninformed: f64,
    pub params: &'a ModelParams,
}

impl StepContext<'_> {
    pub fn price(&self) -> f64 {
        self.view.first()
    }

    /// Informed price average at this step.
    pub fn s_bar(&self) -> f64 {
        let d = self.params.delta();
        if d == 0.0 {
            self.view.first()
        } else {
            blend(self.view.last(), self.window_integral, self.upsilon, d)
        }
    }
}

/// A turnover rule adapted to the lookahead information.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    fn rate(&self, ctx: &StepContext<'_>) -> RateSplit;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StandardPolicy {
    /// Optimal feedback rule with lookahead.
    Informed,
    /// Optimal rule of an investor who ignores the lookahead.
    Uninformed,
    /// Trades only on the plain window average, without the Merton term.
    NaiveFrontrun,
}

impl StandardPolicy {
    pub const ALL: [StandardPolicy; 3] =
        [StandardPolicy::Informed, StandardPolicy::Uninformed, StandardPolicy::NaiveFrontrun];
}

impl Policy for StandardPolicy {
    fn name(&self) -> &str {
        match self {
            StandardPolicy::Informed => "informed",
            StandardPolicy::Uninformed => "uninformed",
            StandardPolicy::NaiveFrontrun => "naive_frontrun",
        }
    }

    fn rate(&self, ctx: &StepContext<'_>) -> RateSplit {
        let p = ctx.params;
        match self {
            StandardPolicy::Informed => split(ctx.price(), ctx.s_bar(), ctx.urgency, ctx.position, p),
            StandardPolicy::Uninformed => RateSplit {
                frontrun: 0.0,
                merton: ctx.urgency_uninformed * (p.merton_position() - ctx.position),
            },
            StandardPolicy::NaiveFrontrun => {
                let avg = if p.delta() == 0.0 { ctx.price() } else { ctx.window_integral / p.delta() };
                RateSplit { frontrun: (avg - ctx.price()) / p.lambda(), merton: 0.0 }
            }
        }
    }
}

/// Policy defined by a closure.
pub struct FnPolicy<F> {
    name: String,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&StepContext<'_>) -> RateSplit + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnPolicy { name: name.into(), f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&StepContext<'_>) -> RateSplit + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn rate(&self, ctx: &StepContext<'_>) -> RateSplit {
        (self.f)(ctx)
    }
}

const RESYNC_EVERY: usize = 512;

/// Forward-Euler rollout. `on_step` sees every context and the chosen rate.
/// Returns the final position and the P&L.
fn rollout<P, F>(
    path: &[f64],
    grid: &TimeGrid,
    schedule: &Schedule,
    params: &ModelParams,
    policy: &P,
    audit: Option<&Cell<usize>>,
    mut on_step: F,
) -> (f64, PnlBreakdown)
where
    P: Policy + ?Sized,
    F: FnMut(&StepContext<'_>, RateSplit),
{
    let n = grid.n_steps;
    let m = grid.lookahead_steps;
    let dt = grid.dt;
    let s_end = path[n];
    let view_at = |k: usize| {
        let v = lookahead_view(path, k, m, dt);
        match audit {
            Some(cell) => v.with_audit(cell),
            None => v,
        }
    };

    let mut position = params.phi0();
    let mut gain = 0.0;
    let mut cost = 0.0;
    let mut window = if m > 0 { view_at(0).window_integral() } else { 0.0 };
    let mut prev_price = path[0];
    for k in 0..n {
        let view = view_at(k);
        if m > 0 && k > 0 {
            if k % RESYNC_EVERY == 0 {
                window = view.window_integral();
            } else {
                let s_k = view.first();
                window -= 0.5 * (prev_price + s_k) * dt;
                window += if k + m <= n {
                    0.5 * (view.get(m - 1).unwrap() + view.last()) * dt
                } else {
                    view.last() * dt
                };
            }
        }
        let ctx = StepContext {
            k,
            t: grid.time(k),
            view,
            position,
            window_integral: window,
            upsilon: schedule.upsilon[k],
            urgency: schedule.urgency[k],
            urgency_uninformed: schedule.urgency_uninformed[k],
            params,
        };
        let rate = policy.rate(&ctx);
        on_step(&ctx, rate);
        let phi = rate.total();
        prev_price = ctx.price();
        gain += phi * (s_end - prev_price);
        cost += phi * phi;
        position += phi * dt;
    }
    let initial = params.phi0() * (s_end - path[0]);
    let gain = gain * dt;
    let impact_cost = 0.5 * params.lambda() * cost * dt;
    (position, PnlBreakdown { initial, gain, impact_cost, total: initial + gain - impact_cost })
}

/// Rolls `policy` forward on one price path and records the full trace.
pub fn run_policy<P: Policy + ?Sized>(
    path: &[f64],
    grid: &TimeGrid,
    params: &ModelParams,
    policy: &P,
) -> Result<StrategyTrace> {
    check_path(path, grid)?;
    let schedule = Schedule::new(params, grid);
    let n = grid.n_steps;
    let mut trace = StrategyTrace {
        t: grid.times(),
        price: path.to_vec(),
        s_bar: Vec::with_capacity(n + 1),
        upsilon: Vec::with_capacity(n + 1),
        phi: Vec::with_capacity(n),
        frontrun: Vec::with_capacity(n),
        merton: Vec::with_capacity(n),
        position: Vec::with_capacity(n + 1),
        pnl: PnlBreakdown::default(),
    };
    let (last_position, breakdown) = rollout(path, grid, &schedule, params, policy, None, |ctx, r| {
        trace.s_bar.push(ctx.s_bar());
        trace.upsilon.push(ctx.upsilon);
        trace.position.push(ctx.position);
        trace.phi.push(r.total());
        trace.frontrun.push(r.frontrun);
        trace.merton.push(r.merton);
    });
    trace.s_bar.push(path[n]);
    trace.upsilon.push(0.0);
    trace.position.push(last_position);
    trace.pnl = breakdown;
    debug_assert!({
        let direct = pnl(&trace.phi, path, params, grid.dt).unwrap();
        (direct.total - breakdown.total).abs() <= 1e-9 * (1.0 + direct.total.abs())
    });
    Ok(trace)
}

/// Terminal P&L of a rollout without storing the trace.
pub fn terminal_pnl<P: Policy + ?Sized>(
    path: &[f64],
    grid: &TimeGrid,
    schedule: &Schedule,
    params: &ModelParams,
    policy: &P,
) -> f64 {
    rollout(path, grid, schedule, params, policy, None, |_, _| {}).1.total
}

/// Rollout with instrumented views. Returns, per step, the largest path
/// index that was read up to and including that step.
pub fn audit_rollout<P: Policy + ?Sized>(
    path: &[f64],
    grid: &TimeGrid,
    params: &ModelParams,
    policy: &P,
) -> Result<Vec<usize>> {
    check_path(path, grid)?;
    let schedule = Schedule::new(params, grid);
    let cell = Cell::new(0);
    let mut reads = Vec::with_capacity(grid.n_steps);
    rollout(path, grid, &schedule, params, policy, Some(&cell), |_, _| reads.push(cell.get()));
    Ok(reads)
}

fn check_path(path: &[f64], grid: &TimeGrid) -> Result<()> {
    if path.len() != grid.n_steps + 1 {
        return Err(Error::Input(format!(
            "path has {} samples, grid expects {}",
            path.len(),
            grid.n_steps + 1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_sim::{generate_path, trace_pnl};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn reference() -> ModelParams {
        ModelParams::reference()
    }

    fn inputs<'a>(path: &'a [f64], k: usize, grid: &TimeGrid, position: f64) -> PolicyInputs<'a> {
        PolicyInputs {
            t: grid.time(k),
            window: lookahead_view(path, k, grid.lookahead_steps, grid.dt),
            position,
        }
    }

    #[test]
    fn s_bar_examples() {
        let p = reference();
        let grid = TimeGrid::new(&p, 100).unwrap();
        let path = generate_path(&p, &grid, 1, 0);
        let ks = kernels_for(&p);
        // Terminal stretch: the last visible price, which is S_T.
        for k in 90..=100 {
            assert_eq!(s_bar(&inputs(&path, k, &grid, 0.0), &ks).unwrap(), path[100]);
        }
        // Constant path.
        let flat = vec![1.25; 101];
        for k in 0..=100 {
            assert_relative_eq!(s_bar(&inputs(&flat, k, &grid, 0.0), &ks).unwrap(), 1.25, max_relative = 1e-14);
        }
        // No lookahead.
        let p0 = p.to_builder().delta(0.0).build().unwrap();
        let g0 = TimeGrid::new(&p0, 100).unwrap();
        for k in [0, 17, 100] {
            assert_eq!(s_bar(&inputs(&path, k, &g0, 0.0), &kernels_for(&p0)).unwrap(), path[k]);
        }
    }

    #[test]
    fn s_bar_rejects_mismatched_window() {
        let p = reference();
        let grid = TimeGrid::new(&p, 100).unwrap();
        let path = vec![0.0; 101];
        let bad = PolicyInputs { t: 0.0, window: lookahead_view(&path, 0, 5, grid.dt), position: 0.0 };
        assert!(matches!(s_bar(&bad, &kernels_for(&p)), Err(Error::Input(_))));
        let off_grid = PolicyInputs { t: 0.05, ..inputs(&path, 0, &grid, 0.0) };
        assert!(s_bar(&off_grid, &kernels_for(&p)).is_err());
    }

    #[test]
    fn feedback_examples() {
        let p = reference();
        let grid = TimeGrid::new(&p, 200).unwrap();
        let path = generate_path(&p, &grid, 2, 0);
        // Terminal regime is exact.
        for k in 180..200 {
            let r = feedback_rate(&inputs(&path, k, &grid, 3.0), &p).unwrap();
            assert_eq!(r.total(), (path[200] - path[k]) / p.lambda());
        }
        // No lookahead: pure Merton tracking.
        let p0 = p.to_builder().delta(0.0).build().unwrap();
        let g0 = TimeGrid::new(&p0, 200).unwrap();
        let sr = p0.rho().sqrt();
        for k in [0, 50, 199] {
            let t = g0.time(k);
            let r = feedback_rate(&inputs(&path, k, &g0, 0.4), &p0).unwrap();
            let expected = sr * (sr * (p0.horizon() - t)).tanh() * (p0.merton_position() - 0.4);
            assert_eq!(r.frontrun, 0.0);
            assert_relative_eq!(r.total(), expected, max_relative = 1e-14);
        }
        let pz = p0.to_builder().mu(0.0).build().unwrap();
        assert_eq!(feedback_rate(&inputs(&path, 10, &g0, 0.0), &pz).unwrap().total(), 0.0);
    }

    #[test]
    fn urgency_examples() {
        let p = reference();
        assert_eq!(urgency(9.5, &p), 0.0);
        assert_eq!(urgency(9.0, &p), 0.0);
        let long = p.to_builder().delta(0.0).horizon(2000.0).build().unwrap();
        assert_relative_eq!(urgency(0.0, &long), long.rho().sqrt(), max_relative = 1e-14);
        let ks = kernels_for(&p);
        for t in [0.0, 1.0, 4.5, 8.9] {
            assert_relative_eq!(p.delta() * urgency(t, &p), ks.upsilon(p.horizon() - t), max_relative = 1e-14);
        }
    }

    #[test]
    fn initial_rate_matches_feedback() {
        let p = reference().to_builder().phi0(-3.0).build().unwrap();
        let grid = TimeGrid::new(&p, 400).unwrap();
        for i in 0..20 {
            let path = generate_path(&p, &grid, 9, i);
            let m = grid.lookahead_steps;
            let closed = initial_rate_closed_form(&path[..=m], grid.dt, &p).unwrap();
            let fb = feedback_rate(&inputs(&path, 0, &grid, p.phi0()), &p).unwrap().total();
            assert!((closed - fb).abs() < 1e-9 * (1.0 + fb.abs()), "{closed} vs {fb}");
        }
        let flat = vec![0.0; 41];
        let pz = reference().to_builder().mu(0.0).build().unwrap();
        assert_eq!(initial_rate_closed_form(&flat, grid.dt, &pz).unwrap(), 0.0);
        assert!(initial_rate_closed_form(&flat[..3], grid.dt, &pz).is_err());

        let p0 = p.to_builder().delta(0.0).build().unwrap();
        let sr = p0.rho().sqrt();
        let expected = sr * (sr * p0.horizon()).tanh() * (p0.merton_position() - p0.phi0());
        assert_relative_eq!(initial_rate_closed_form(&[0.7], 0.1, &p0).unwrap(), expected, max_relative = 1e-13);
    }

    #[test]
    fn rollout_on_flat_path_does_nothing() {
        let p = reference().to_builder().mu(0.0).build().unwrap();
        let grid = TimeGrid::new(&p, 100).unwrap();
        let flat = vec![0.0; 101];
        for policy in StandardPolicy::ALL {
            let trace = run_policy(&flat, &grid, &p, &policy).unwrap();
            assert!(trace.phi.iter().all(|&x| x == 0.0));
            assert_eq!(trace.pnl.total, 0.0);
        }
    }

    #[test]
    fn uninformed_position_follows_ode_solution() {
        // Expected path: Phi_t = m (1 - cosh(sqrt(rho)(T-t)) / cosh(sqrt(rho) T)).
        let p = reference().to_builder().delta(0.0).build().unwrap();
        let n = 20_000;
        let grid = TimeGrid::new(&p, n).unwrap();
        let mean_path: Vec<f64> = (0..=n).map(|k| p.s0() + p.mu() * grid.time(k)).collect();
        let trace = run_policy(&mean_path, &grid, &p, &StandardPolicy::Informed).unwrap();
        let sr = p.rho().sqrt();
        let m = p.merton_position();
        for k in (0..=n).step_by(1000) {
            let t = grid.time(k);
            let exact = m * (1.0 - (sr * (p.horizon() - t)).cosh() / (sr * p.horizon()).cosh());
            assert!((trace.position[k] - exact).abs() < 2e-3 * m, "k={k}");
        }
        assert!(trace.position.windows(2).all(|w| w[1] >= w[0]));
        assert!(trace.position.iter().all(|&x| x <= m));
    }

    #[test]
    fn trace_invariants_and_pnl() {
        let p = reference().to_builder().phi0(2.0).build().unwrap();
        let grid = TimeGrid::new(&p, 500).unwrap();
        let path = generate_path(&p, &grid, 4, 3);
        for policy in StandardPolicy::ALL {
            let tr = run_policy(&path, &grid, &p, &policy).unwrap();
            for k in 0..500 {
                assert_relative_eq!(tr.position[k + 1] - tr.position[k], tr.phi[k] * grid.dt, max_relative = 1e-9, epsilon = 1e-12);
                assert_relative_eq!(tr.phi[k], tr.frontrun[k] + tr.merton[k], max_relative = 1e-15);
            }
            let direct = trace_pnl(&tr, &path, &p, &grid).unwrap();
            assert_relative_eq!(direct.total, tr.pnl.total, max_relative = 1e-10);
            assert!(tr.pnl.impact_cost >= 0.0);
            let schedule = Schedule::new(&p, &grid);
            assert_eq!(terminal_pnl(&path, &grid, &schedule, &p, &policy), tr.pnl.total);
        }
    }

    #[test]
    fn rollout_matches_standalone_feedback() {
        let p = reference().to_builder().phi0(1.5).build().unwrap();
        let grid = TimeGrid::new(&p, 2000).unwrap();
        let path = generate_path(&p, &grid, 12, 0);
        let tr = run_policy(&path, &grid, &p, &StandardPolicy::Informed).unwrap();
        for k in (0..2000).step_by(37) {
            let r = feedback_rate(&inputs(&path, k, &grid, tr.position[k]), &p).unwrap();
            assert!((r.total() - tr.phi[k]).abs() < 1e-9 * (1.0 + r.total().abs()), "k={k}");
        }
    }

    #[test]
    fn information_audit() {
        let p = reference();
        let grid = TimeGrid::new(&p, 300).unwrap();
        let path = generate_path(&p, &grid, 6, 0);
        for policy in StandardPolicy::ALL {
            let reads = audit_rollout(&path, &grid, &p, &policy).unwrap();
            for (k, &max_read) in reads.iter().enumerate() {
                assert!(max_read <= (k + grid.lookahead_steps).min(300), "{} step {k}", policy.name());
            }
        }
    }

    #[test]
    fn frontrun_split_on_reference_market() {
        // Rising prices ahead mean a positive frontrunning term.
        let p = reference();
        let grid = TimeGrid::new(&p, 100).unwrap();
        let mut path = vec![0.0; 101];
        for (k, s) in path.iter_mut().enumerate().skip(1) {
            *s = if k <= 10 { 0.1 * k as f64 } else { 1.0 };
        }
        let tr = run_policy(&path, &grid, &p, &StandardPolicy::Informed).unwrap();
        assert!(tr.frontrun[0] > 0.0);
        assert!(tr.merton[0] > 0.0);
        assert!(tr.frontrun[50].abs() < 1e-10);
    }

    #[test]
    fn urgency_coefficient_converges_in_the_uninformed_limit() {
        // The Merton coefficient with delta = dt approaches the delta = 0 one
        // at first order.
        let p = reference();
        let t = 2.0;
        let target = kernels_for(&p.to_builder().delta(0.0).build().unwrap()).urgency(t);
        let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&d| (urgency(t, &p.to_builder().delta(d).build().unwrap()) - target).abs())
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 0.95, "order {order}");
        }
        // On a smooth path the whole rate converges at first order too.
        let rates: Vec<f64> = [50usize, 100, 200, 400]
            .iter()
            .map(|&n| {
                let pd = p.to_builder().delta(p.horizon() / n as f64).build().unwrap();
                let grid = TimeGrid::new(&pd, n).unwrap();
                let path: Vec<f64> = grid.times().iter().map(|t| (0.3 * t).sin()).collect();
                let k = n / 5;
                feedback_rate(&inputs(&path, k, &grid, 0.5), &pd).unwrap().total()
            })
            .collect();
        let p0 = p.to_builder().delta(0.0).build().unwrap();
        let limit = urgency(2.0, &p0) * (p0.merton_position() - 0.5);
        let errs: Vec<f64> = rates.iter().map(|r| (r - limit).abs()).collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 0.9);
        }
    }

    proptest! {
        #[test]
        fn s_bar_is_a_convex_combination(seed in 0u64..1000, k in 0usize..200, delta_steps in 0usize..40) {
            let p = reference().to_builder().delta(delta_steps as f64 * 0.05).build().unwrap();
            let grid = TimeGrid::new(&p, 200).unwrap();
            let path = generate_path(&p, &grid, seed, 0);
            let inp = inputs(&path, k, &grid, 0.0);
            let sb = s_bar(&inp, &kernels_for(&p)).unwrap();
            let w = &path[k..=(k + grid.lookahead_steps).min(200)];
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(sb >= lo - 1e-12 && sb <= hi + 1e-12);
        }
    }
}
