//! Entropic dual functional on a finite scenario tree, minimized by mirror
//! descent and compared against a direct search over trading strategies.
//!
//! Risk aversion is 1, impact is 2 and the initial position is 0. The
//! investor at step `k` knows the first `min(k + lookahead, n)` price moves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TREE_LAMBDA: f64 = 2.0;

/// Recombination-free tree of price moves with independent steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub dt: f64,
    pub lookahead: usize,
    /// `(increment, probability)` choices per step.
    pub steps: Vec<Vec<(f64, f64)>>,
    probs: Vec<f64>,
    /// `gains[k][w] = S_T - S_k` on scenario `w`.
    gains: Vec<Vec<f64>>,
    /// Scenarios sharing an atom of the step-`k` information form a
    /// contiguous block of this size.
    block: Vec<usize>,
}

impl ScenarioTree {
    pub fn new(steps: Vec<Vec<(f64, f64)>>, dt: f64, lookahead: usize) -> Result<Self> {
        if steps.is_empty() || steps.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("every step needs at least one branch".into()));
        }
        for s in &steps {
            let total: f64 = s.iter().map(|b| b.1).sum();
            if s.iter().any(|b| !(b.1 > 0.0) || !b.0.is_finite()) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Input("branch probabilities must be positive and sum to 1".into()));
            }
        }
        if !(dt > 0.0) {
            return Err(Error::Input(format!("dt must be positive, got {dt}")));
        }
        let n = steps.len();
        let count: usize = steps.iter().map(|s| s.len()).product();
        let mut probs = Vec::with_capacity(count);
        let mut moves = Vec::with_capacity(count);
        for w in 0..count {
            let mut rest = w;
            let mut p = 1.0;
            let mut mv = vec![0.0; n];
            for k in (0..n).rev() {
                let radix = steps[k].len();
                let (inc, pk) = steps[k][rest % radix];
                rest /= radix;
                p *= pk;
                mv[k] = inc;
            }
            probs.push(p);
            moves.push(mv);
        }
        let gains = (0..n)
            .map(|k| moves.iter().map(|mv| mv[k..].iter().sum()).collect())
            .collect();
        let block = (0..n)
            .map(|k| steps[(k + lookahead).min(n)..].iter().map(|s| s.len()).product())
            .collect();
        Ok(ScenarioTree { dt, lookahead, steps, probs, gains, block })
    }

    /// Same branches on each of `n` steps.
    pub fn repeated(branches: &[(f64, f64)], n: usize, dt: f64, lookahead: usize) -> Result<Self> {
        Self::new(vec![branches.to_vec(); n], dt, lookahead)
    }

    pub fn binomial(n: usize, lookahead: usize) -> Self {
        Self::repeated(&[(-1.0, 0.5), (1.0, 0.5)], n, 1.0, lookahead).expect("valid branches")
    }

    pub fn trinomial(n: usize, lookahead: usize) -> Self {
        let b = [(-3f64.sqrt(), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
        Self::repeated(&b, n, 1.0, lookahead).expect("valid branches")
    }

    /// Five-point Gauss-Hermite quantization of a standard normal step.
    pub fn gauss_hermite5(n: usize, lookahead: usize) -> Self {
        let x1 = (5.0 - 10f64.sqrt()).sqrt();
        let x2 = (5.0 + 10f64.sqrt()).sqrt();
        let w0 = 8.0 / 15.0;
        let w1 = (7.0 + 2.0 * 10f64.sqrt()) / 60.0;
        let w2 = (7.0 - 2.0 * 10f64.sqrt()) / 60.0;
        let b = [(-x2, w2), (-x1, w1), (0.0, w0), (x1, w1), (x2, w2)];
        Self::repeated(&b, n, 1.0, lookahead).expect("valid branches")
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
    pub fn n_scenarios(&self) -> usize {
        self.probs.len()
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
    pub fn n_atoms(&self, k: usize) -> usize {
        self.n_scenarios() / self.block[k]
    }

    fn check_weights(&self, r: &[f64]) -> Result<()> {
        let total: f64 = r.iter().sum();
        if r.len() != self.n_scenarios() || r.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::Input("weights must form a probability vector over the scenarios".into()));
        }
        Ok(())
    }

    /// Conditional means `m_A = E_R[S_T - S_k | A]` for every step and atom.
    fn conditional_gains(&self, r: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_steps())
            .map(|k| {
                let b = self.block[k];
                r.chunks(b)
                    .zip(self.gains[k].chunks(b))
                    .map(|(rw, xw)| {
                        let mass: f64 = rw.iter().sum();
                        if mass > 0.0 {
                            rw.iter().zip(xw).map(|(p, x)| p * x).sum::<f64>() / mass
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// `H(R | P) + (1/(2 lambda)) sum_k dt sum_A R(A) E_R[S_T - S_k | A]^2`.
pub fn xi_functional(tree: &ScenarioTree, r: &[f64]) -> Result<f64> {
    tree.check_weights(r)?;
    let entropy: f64 = r
        .iter()
        .zip(tree.probs())
        .map(|(x, p)| if *x > 0.0 { x * (x / p).ln() } else { 0.0 })
        .sum();
    let means = tree.conditional_gains(r);
    let mut quad = 0.0;
    for (k, mk) in means.iter().enumerate() {
        let b = tree.block[k];
        for (rw, m) in r.chunks(b).zip(mk) {
            quad += rw.iter().sum::<f64>() * m * m;
        }
    }
    Ok(entropy + quad * tree.dt / (2.0 * TREE_LAMBDA))
}

fn xi_gradient(tree: &ScenarioTree, r: &[f64]) -> Vec<f64> {
    let means = tree.conditional_gains(r);
    let mut g: Vec<f64> = r.iter().zip(tree.probs()).map(|(x, p)| (x / p).ln() + 1.0).collect();
    let c = tree.dt / (2.0 * TREE_LAMBDA);
    for (k, mk) in means.iter().enumerate() {
        let b = tree.block[k];
        for (w, gw) in g.iter_mut().enumerate() {
            let m = mk[w / b];
            *gw += c * (2.0 * tree.gains[k][w] * m - m * m);
        }
    }
    g
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XiMinimum {
    pub weights: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// `max_w |g_w - E_R[g]|`; zero at the minimizer.
    pub kkt_residual: f64,
}

/// Entropic mirror descent with backtracking, started from the reference
/// measure.
pub fn minimize_xi(tree: &ScenarioTree, tol: f64, max_iter: usize) -> Result<XiMinimum> {
    let mut r = tree.probs().to_vec();
    let mut value = xi_functional(tree, &r)?;
    let mut step = 1.0;
    for it in 0..max_iter {
        let g = xi_gradient(tree, &r);
        let mean: f64 = g.iter().zip(&r).map(|(a, b)| a * b).sum();
        let residual = g.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        if residual <= tol {
            return Ok(XiMinimum { weights: r, value, iterations: it, kkt_residual: residual });
        }
        loop {
            let mut next: Vec<f64> = r.iter().zip(&g).map(|(x, gw)| x * (-step * (gw - mean)).exp()).collect();
            let z: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= z);
            let v = xi_functional(tree, &next)?;
            if v < value {
                r = next;
                value = v;
                step = (step * 1.5).min(1e3);
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return Ok(XiMinimum { weights: r, value, iterations: it, kkt_residual: residual });
            }
        }
    }
    Err(Error::Numeric(format!("mirror descent did not converge in {max_iter} iterations")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimalMaximum {
    /// `rates[k][atom]`
    pub rates: Vec<Vec<f64>>,
    pub expected_utility: f64,
    /// `-log(-expected_utility)`
    pub certainty_value: f64,
    pub sweeps: usize,
}

/// Profit and loss per scenario for given rates.
fn tree_pnl(tree: &ScenarioTree, rates: &[Vec<f64>]) -> Vec<f64> {
    let mut v = vec![0.0; tree.n_scenarios()];
    for (k, rk) in rates.iter().enumerate() {
        let b = tree.block[k];
        for (w, vw) in v.iter_mut().enumerate() {
            let phi = rk[w / b];
            *vw += (phi * tree.gains[k][w] - 0.5 * TREE_LAMBDA * phi * phi) * tree.dt;
        }
    }
    v
}

fn coordinate_ascent(tree: &ScenarioTree, mut rates: Vec<Vec<f64>>, tol: f64, max_sweeps: usize) -> (Vec<Vec<f64>>, f64, usize) {
    let dt = tree.dt;
    let lam = TREE_LAMBDA;
    let mut v = tree_pnl(tree, &rates);
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut biggest: f64 = 0.0;
        for k in 0..tree.n_steps() {
            let b = tree.block[k];
            for atom in 0..rates[k].len() {
                let range = atom * b..(atom + 1) * b;
                for _ in 0..60 {
                    let phi = rates[k][atom];
                    let (mut d1, mut d2) = (0.0, 0.0);
                    for w in range.clone() {
                        let e = tree.probs[w] * (-v[w]).exp();
                        let slope = (tree.gains[k][w] - lam * phi) * dt;
                        d1 += e * slope;
                        d2 -= e * (slope * slope + lam * dt);
                    }
                    let delta = -d1 / d2;
                    let new = phi + delta;
                    for w in range.clone() {
                        v[w] += (tree.gains[k][w] * delta - 0.5 * lam * (new * new - phi * phi)) * dt;
                    }
                    rates[k][atom] = new;
                    biggest = biggest.max(delta.abs());
                    if delta.abs() <= 1e-15 * (1.0 + new.abs()) {
                        break;
                    }
                }
            }
        }
        if biggest <= tol {
            break;
        }
    }
    let eu = -tree.probs.iter().zip(&v).map(|(p, x)| p * (-x).exp()).sum::<f64>();
    (rates, eu, sweeps)
}

/// Maximizes `E[-exp(-V)]` over adapted rates by coordinate-wise Newton
/// ascent from the zero strategy and `extra_starts` random ones.
pub fn primal_tree_max(tree: &ScenarioTree, extra_starts: usize, seed: u64) -> Result<PrimalMaximum> {
    let shape: Vec<usize> = (0..tree.n_steps()).map(|k| tree.n_atoms(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<PrimalMaximum> = None;
    for start in 0..=extra_starts {
        let init: Vec<Vec<f64>> = shape
            .iter()
            .map(|&n| (0..n).map(|_| if start == 0 { 0.0 } else { rng.random_range(-2.0..2.0) }).collect())
            .collect();
        let (rates, eu, sweeps) = coordinate_ascent(tree, init, 1e-13, 100_000);
        if !eu.is_finite() || eu >= 0.0 {
            return Err(Error::Numeric(format!("primal search produced expected utility {eu}")));
        }
        if best.as_ref().is_none_or(|b| eu > b.expected_utility) {
            best = Some(PrimalMaximum { rates, expected_utility: eu, certainty_value: -(-eu).ln(), sweeps });
        }
    }
    Ok(best.expect("at least one start"))
}
