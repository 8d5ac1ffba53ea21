//! Bachelier price paths on a uniform grid, the lookahead information window
//! and the discretized profit-and-loss functional.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::quad::trapezoid;

/// Uniform grid `t_k = k * dt`, `k = 0..=n_steps`, with the lookahead spanning
/// an exact number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
    /// Lookahead in grid steps. Saturates at `n_steps` when the lookahead
    /// reaches past the horizon.
    pub lookahead_steps: usize,
}

impl TimeGrid {
    pub fn new(params: &ModelParams, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("the grid needs at least one step".into()));
        }
        let dt = params.horizon() / n_steps as f64;
        let lookahead_steps = if params.delta() >= params.horizon() {
            n_steps
        } else {
            let ratio = params.delta() / dt;
            let m = ratio.round();
            if (ratio - m).abs() > 1e-9 * ratio.max(1.0) {
                return Err(Error::Config(format!(
                    "lookahead {} is not a multiple of dt = {dt} (ratio {ratio})",
                    params.delta()
                )));
            }
            m as usize
        };
        Ok(TimeGrid { horizon: params.horizon(), n_steps, dt, lookahead_steps })
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    fn check_path(&self, path: &[f64]) -> Result<()> {
        if path.len() != self.n_steps + 1 {
            return Err(Error::Input(format!(
                "path has {} samples, grid expects {}",
                path.len(),
                self.n_steps + 1
            )));
        }
        Ok(())
    }
}

/// Prices visible at grid index `start`: `S_{t_k}, ..., S_{min(t_k + delta, T)}`.
///
/// The view borrows exactly that slice, so data past the window cannot be
/// reached through it. An optional audit cell records the largest absolute
/// index read.
#[derive(Debug, Clone, Copy)]
pub struct LookaheadView<'a> {
    start: usize,
    lookahead: usize,
    dt: f64,
    samples: &'a [f64],
    audit: Option<&'a Cell<usize>>,
}

impl<'a> LookaheadView<'a> {
    /// Builds a view from an already cut window. `samples[0]` is the current
    /// price; the window is complete unless it ends at the horizon.
    pub fn from_window(start: usize, lookahead: usize, dt: f64, samples: &'a [f64]) -> Result<Self> {
        if samples.is_empty() || samples.len() > lookahead + 1 {
            return Err(Error::Input(format!(
                "window of {} samples does not fit a lookahead of {lookahead} steps",
                samples.len()
            )));
        }
        Ok(LookaheadView { start, lookahead, dt, samples, audit: None })
    }

    pub fn with_audit(mut self, audit: &'a Cell<usize>) -> Self {
        self.audit = Some(audit);
        self
    }

    fn touch(&self, i: usize) {
        if let Some(cell) = self.audit {
            cell.set(cell.get().max(self.start + i));
        }
    }

    pub fn start(&self) -> usize {
        self.start
    }
    pub fn lookahead_steps(&self) -> usize {
        self.lookahead
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Price `i` steps ahead of the current time.
    pub fn get(&self, i: usize) -> Option<f64> {
        let v = self.samples.get(i).copied();
        if v.is_some() {
            self.touch(i);
        }
        v
    }

    /// Current price.
    pub fn first(&self) -> f64 {
        self.touch(0);
        self.samples[0]
    }

    /// `S_{min(t + delta, T)}`.
    pub fn last(&self) -> f64 {
        let i = self.samples.len() - 1;
        self.touch(i);
        self.samples[i]
    }

    /// Whether the window has been cut short by the horizon.
    pub fn truncated(&self) -> bool {
        self.samples.len() < self.lookahead + 1
    }

    /// `int_t^{t+delta} S_u du` by the trapezoidal rule, with `S_u := S_T`
    /// beyond the horizon.
    pub fn window_integral(&self) -> f64 {
        let n = self.samples.len();
        self.touch(n - 1);
        let covered = trapezoid(self.samples, self.dt);
        let missing = (self.lookahead + 1 - n) as f64 * self.dt;
        covered + missing * self.samples[n - 1]
    }
}

/// Window of `path` visible at grid index `k` with a lookahead of `m` steps.
pub fn lookahead_view(path: &[f64], k: usize, m: usize, dt: f64) -> LookaheadView<'_> {
    let end = (k + m).min(path.len() - 1);
    LookaheadView { start: k, lookahead: m, dt, samples: &path[k..=end], audit: None }
}

/// Per-path random stream: ChaCha8 keyed by the ensemble seed, one stream per
/// path index. Paths are reproducible regardless of how work is scheduled.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Price path `S_{t_0}, ..., S_{t_N}` with i.i.d. `N(mu dt, sigma^2 dt)`
/// increments.
pub fn generate_path(params: &ModelParams, grid: &TimeGrid, seed: u64, path_index: u64) -> Vec<f64> {
    let mut rng = path_rng(seed, path_index);
    let drift = params.mu() * grid.dt;
    let vol = params.sigma() * grid.dt.sqrt();
    let mut path = Vec::with_capacity(grid.n_steps + 1);
    let mut s = params.s0();
    path.push(s);
    for _ in 0..grid.n_steps {
        let z: f64 = rng.sample(StandardNormal);
        s += drift + vol * z;
        path.push(s);
    }
    path
}

/// Doubles the resolution of a path by Brownian-bridge midpoint insertion.
/// The coarse samples are kept, so successive refinements share one limit
/// path.
pub fn refine_path<R: Rng>(path: &[f64], sigma: f64, dt: f64, rng: &mut R) -> Vec<f64> {
    let sd = sigma * (dt / 4.0).sqrt();
    let mut fine = Vec::with_capacity(2 * path.len() - 1);
    fine.push(path[0]);
    for w in path.windows(2) {
        let z: f64 = rng.sample(StandardNormal);
        fine.push(0.5 * (w[0] + w[1]) + sd * z);
        fine.push(w[1]);
    }
    fine
}

/// Immutable ensemble of simulated price paths.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub seed: u64,
    pub prices: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub params: ModelParams,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n_steps: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub lookahead_steps: usize,
}

impl PathEnsemble {
    pub fn simulate(params: &ModelParams, n_paths: usize, n_steps: usize, seed: u64) -> Result<Self> {
        let grid = TimeGrid::new(params, n_steps)?;
        let prices = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| generate_path(params, &grid, seed, i))
            .collect();
        Ok(PathEnsemble { params: *params, grid, seed, prices })
    }

    pub fn n_paths(&self) -> usize {
        self.prices.len()
    }

    pub fn view(&self, path: usize, k: usize) -> LookaheadView<'_> {
        lookahead_view(&self.prices[path], k, self.grid.lookahead_steps, self.grid.dt)
    }

    pub fn meta(&self) -> EnsembleMeta {
        EnsembleMeta {
            params: self.params,
            seed: self.seed,
            n_steps: self.grid.n_steps,
            n_paths: self.n_paths(),
            dt: self.grid.dt,
            lookahead_steps: self.grid.lookahead_steps,
        }
    }
}

/// Addends of the terminal profit and loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PnlBreakdown {
    /// `phi0 (S_T - S_0)`
    pub initial: f64,
    /// `sum_k phi_k (S_T - S_k) dt`
    pub gain: f64,
    /// `(lambda / 2) sum_k phi_k^2 dt`, always nonnegative.
    pub impact_cost: f64,
    pub total: f64,
}

/// Per-step record of a policy rollout on one path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StrategyTrace {
    pub t: Vec<f64>,
    pub price: Vec<f64>,
    /// Informed price average at each step.
    pub s_bar: Vec<f64>,
    pub upsilon: Vec<f64>,
    /// Turnover rate on `[t_k, t_{k+1})`, `k < N`.
    pub phi: Vec<f64>,
    pub frontrun: Vec<f64>,
    pub merton: Vec<f64>,
    /// Position at every grid time, `k <= N`.
    pub position: Vec<f64>,
    pub pnl: PnlBreakdown,
}

/// Left-endpoint discretization of the terminal profit and loss.
pub fn pnl(phi: &[f64], path: &[f64], params: &ModelParams, dt: f64) -> Result<PnlBreakdown> {
    if path.len() != phi.len() + 1 {
        return Err(Error::Input(format!(
            "{} rates do not match a path of {} samples",
            phi.len(),
            path.len()
        )));
    }
    let s_t = path[path.len() - 1];
    let initial = params.phi0() * (s_t - path[0]);
    let gain: f64 = phi.iter().zip(path).map(|(f, s)| f * (s_t - s)).sum::<f64>() * dt;
    let impact_cost = 0.5 * params.lambda() * phi.iter().map(|f| f * f).sum::<f64>() * dt;
    Ok(PnlBreakdown { initial, gain, impact_cost, total: initial + gain - impact_cost })
}

/// Profit and loss of a recorded trace on the path it was run on.
pub fn trace_pnl(trace: &StrategyTrace, path: &[f64], params: &ModelParams, grid: &TimeGrid) -> Result<PnlBreakdown> {
    grid.check_path(path)?;
    pnl(&trace.phi, path, params, grid.dt)
}
