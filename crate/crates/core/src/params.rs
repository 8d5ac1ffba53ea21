//! Model parameters and the normalization to a driftless, unit-volatility
//! market.
//!
//! All formulas downstream are written for `S = W` (zero initial price, zero
//! drift, unit volatility). [`ModelParams::reduce`] maps a general Bachelier
//! market onto that case: risk aversion becomes `alpha * sigma`, the impact
//! coefficient `lambda / sigma`, and the initial position is measured relative
//! to the Merton position `mu / (alpha * sigma^2)`. Expected utilities in the
//! two coordinate systems differ by the constant factor
//! `exp(-entropy_shift)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full problem specification in original (currency) units.
///
/// Constructed through [`ModelParams::builder`] or deserialized from JSON;
/// both paths validate, so every value of this type satisfies
/// `sigma, lambda_impact, alpha, horizon_T > 0` and `lookahead_delta >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    s0: f64,
    mu: f64,
    sigma: f64,
    lambda: f64,
    alpha: f64,
    horizon: f64,
    delta: f64,
    phi0: f64,
}

/// Serialized form of [`ModelParams`]; field names are part of the config
/// file format.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub lambda_impact: f64,
    pub alpha: f64,
    pub horizon_T: f64,
    pub lookahead_delta: f64,
    pub phi0: f64,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        let p = ModelParams {
            s0: raw.s0,
            mu: raw.mu,
            sigma: raw.sigma,
            lambda: raw.lambda_impact,
            alpha: raw.alpha,
            horizon: raw.horizon_T,
            delta: raw.lookahead_delta,
            phi0: raw.phi0,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams {
            s0: p.s0,
            mu: p.mu,
            sigma: p.sigma,
            lambda_impact: p.lambda,
            alpha: p.alpha,
            horizon_T: p.horizon,
            lookahead_delta: p.delta,
            phi0: p.phi0,
        }
    }
}

impl Default for RawParams {
    fn default() -> Self {
        ModelParams::reference().into()
    }
}

impl ModelParams {
    pub fn builder() -> ParamsBuilder {
        ParamsBuilder::default()
    }

    /// Reference market used throughout the documentation and tests:
    /// `s0 = 0, mu = 0.1, sigma = 0.3, T = 10, delta = 1, alpha = 0.03,
    /// phi0 = 0, lambda = 0.01`.
    pub fn reference() -> Self {
        ModelParams {
            s0: 0.0,
            mu: 0.1,
            sigma: 0.3,
            lambda: 0.01,
            alpha: 0.03,
            horizon: 10.0,
            delta: 1.0,
            phi0: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [
            ("s0", self.s0),
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("lambda_impact", self.lambda),
            ("alpha", self.alpha),
            ("horizon_T", self.horizon),
            ("lookahead_delta", self.delta),
            ("phi0", self.phi0),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("lambda_impact", self.lambda),
            ("alpha", self.alpha),
            ("horizon_T", self.horizon),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.delta < 0.0 {
            return Err(Error::Config(format!(
                "lookahead_delta must be nonnegative, got {}",
                self.delta
            )));
        }
        let rho = self.rho();
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::Config(format!(
                "risk-liquidity ratio must be finite and positive, got {rho}"
            )));
        }
        Ok(())
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }
    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    /// Risk-liquidity ratio `alpha * sigma^2 / lambda`.
    pub fn rho(&self) -> f64 {
        self.alpha * self.sigma * self.sigma / self.lambda
    }

    /// Frictionless optimal position `mu / (alpha * sigma^2)`.
    pub fn merton_position(&self) -> f64 {
        self.mu / (self.alpha * self.sigma * self.sigma)
    }

    /// Builder seeded with the current values, for deriving variants.
    pub fn to_builder(&self) -> ParamsBuilder {
        ParamsBuilder { raw: (*self).into() }
    }

    pub fn reduce(&self) -> ReducedParams {
        let mu_r = self.mu / self.sigma;
        ReducedParams {
            alpha_r: self.alpha * self.sigma,
            lambda_r: self.lambda / self.sigma,
            mu_r,
            phi0_r: self.phi0 - self.merton_position(),
            entropy_shift: 0.5 * mu_r * mu_r * self.horizon,
            rho: self.rho(),
            horizon: self.horizon,
            delta: self.delta,
            s0: self.s0,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamsBuilder {
    raw: RawParams,
}

impl ParamsBuilder {
    pub fn s0(mut self, v: f64) -> Self {
        self.raw.s0 = v;
        self
    }
    pub fn mu(mut self, v: f64) -> Self {
        self.raw.mu = v;
        self
    }
    pub fn sigma(mut self, v: f64) -> Self {
        self.raw.sigma = v;
        self
    }
    pub fn lambda(mut self, v: f64) -> Self {
        self.raw.lambda_impact = v;
        self
    }
    pub fn alpha(mut self, v: f64) -> Self {
        self.raw.alpha = v;
        self
    }
    pub fn horizon(mut self, v: f64) -> Self {
        self.raw.horizon_T = v;
        self
    }
    pub fn delta(mut self, v: f64) -> Self {
        self.raw.lookahead_delta = v;
        self
    }
    pub fn phi0(mut self, v: f64) -> Self {
        self.raw.phi0 = v;
        self
    }
    pub fn build(self) -> Result<ModelParams> {
        ModelParams::try_from(self.raw)
    }
}

/// Parameters of the normalized market `S = W`.
///
/// Keeps the original `s0` and `sigma` so the transform can be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedParams {
    pub alpha_r: f64,
    pub lambda_r: f64,
    pub mu_r: f64,
    pub phi0_r: f64,
    /// `mu_r^2 T / 2`; expected utilities satisfy
    /// `E[u] = exp(-entropy_shift) * E'[u']`.
    pub entropy_shift: f64,
    pub rho: f64,
    pub horizon: f64,
    pub delta: f64,
    pub s0: f64,
    pub sigma: f64,
}

impl ReducedParams {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Normalized price path `(S - s0) / sigma`; driftless under the
    /// reduced measure.
    pub fn normalize_price(&self, s: f64) -> f64 {
        (s - self.s0) / self.sigma
    }

    /// The same normalized market, viewed as a driftless problem in its own
    /// right (`s0 = 0`, `mu = 0`, `sigma = 1`).
    pub fn as_model(&self) -> Result<ModelParams> {
        ModelParams::builder()
            .s0(0.0)
            .mu(0.0)
            .sigma(1.0)
            .lambda(self.lambda_r)
            .alpha(self.alpha_r)
            .horizon(self.horizon)
            .delta(self.delta)
            .phi0(self.phi0_r)
            .build()
    }

    pub fn unreduce(&self) -> Result<ModelParams> {
        let alpha = self.alpha_r / self.sigma;
        let mu = self.mu_r * self.sigma;
        let merton = mu / (alpha * self.sigma * self.sigma);
        ModelParams::builder()
            .s0(self.s0)
            .mu(mu)
            .sigma(self.sigma)
            .lambda(self.lambda_r * self.sigma)
            .alpha(alpha)
            .horizon(self.horizon)
            .delta(self.delta)
            .phi0(self.phi0_r + merton)
            .build()
    }
}
