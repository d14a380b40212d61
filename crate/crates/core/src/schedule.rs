//! Discrete mean-reverting SDE: forward marginals, optimal reverse states
//! and the noise-to-clean inversion used by the sampler.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Upper bound on the `e^{θ̄_i}` factor when inverting the marginal.
pub const MAX_INVERSE_GAIN: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Number of diffusion steps T.
    pub steps: usize,
    /// Stationary standard deviation λ.
    pub lambda: f64,
    /// Target value of `e^{−2θ̄_T}`.
    pub terminal_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lambda: 0.2,
            terminal_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    theta_bar: Vec<f64>,
    lambda: f64,
}

fn one_minus_exp_neg(x: f64) -> f64 {
    -(-x).exp_m1()
}

impl NoiseSchedule {
    /// `θ̄_i = θ_max·(i/T)²` with θ_max chosen so `e^{−2θ̄_T}` equals the
    /// configured terminal decay.
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(CoreError::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(cfg.terminal_decay > 0.0 && cfg.terminal_decay < 1.0) {
            return Err(CoreError::InvalidConfig("terminal_decay must lie in (0, 1)".into()));
        }
        let theta_max = -cfg.terminal_decay.ln() / 2.0;
        let t = cfg.steps as f64;
        let theta_bar = (0..=cfg.steps).map(|i| theta_max * (i as f64 / t).powi(2)).collect();
        Self::from_theta_bar(theta_bar, cfg.lambda)
    }

    /// Arbitrary cumulative rates; θ̄_0 must be 0 and the sequence strictly
    /// increasing.
    pub fn from_theta_bar(theta_bar: Vec<f64>, lambda: f64) -> Result<Self> {
        if theta_bar.len() < 2 || theta_bar[0] != 0.0 {
            return Err(CoreError::InvalidConfig(
                "theta_bar must start at 0 and have T >= 1".into(),
            ));
        }
        if theta_bar.windows(2).any(|w| !(w[1] > w[0])) || !theta_bar.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidConfig(
                "theta_bar must be finite and strictly increasing".into(),
            ));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CoreError::InvalidConfig("lambda must be positive".into()));
        }
        Ok(Self { theta_bar, lambda })
    }

    pub fn steps(&self) -> usize {
        self.theta_bar.len() - 1
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn theta_bar(&self, i: usize) -> f64 {
        self.theta_bar[i]
    }

    pub fn theta_bars(&self) -> &[f64] {
        &self.theta_bar
    }

    fn check(&self, i: usize, min: usize) -> Result<()> {
        if i < min || i > self.steps() {
            return Err(CoreError::IndexOutOfRange {
                index: i,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Marginal standard deviation `σ̄_i = λ·sqrt(1 − e^{−2θ̄_i})`.
    pub fn sigma_bar(&self, i: usize) -> f64 {
        self.lambda * one_minus_exp_neg(2.0 * self.theta_bar[i]).sqrt()
    }

    /// `(e^{−θ̄_i}, σ̄_i)`.
    pub fn marginal_coefficients(&self, i: usize) -> Result<(f64, f64)> {
        self.check(i, 0)?;
        Ok(((-self.theta_bar[i]).exp(), self.sigma_bar(i)))
    }

    /// Weights `(c_x, c_0)` with `x*_{i−1} = μ + c_x·(x_i − μ) + c_0·(x0 − μ)`.
    pub fn reverse_coefficients(&self, i: usize) -> Result<(f64, f64)> {
        self.check(i, 1)?;
        let prev = self.theta_bar[i - 1];
        let cur = self.theta_bar[i];
        let step = cur - prev;
        let denom = one_minus_exp_neg(2.0 * cur);
        let c_x = one_minus_exp_neg(2.0 * prev) / denom * (-step).exp();
        let c_0 = one_minus_exp_neg(2.0 * step) / denom * (-prev).exp();
        Ok((c_x, c_0))
    }

    /// Standard deviation of `x_{i−1}` given `x_i` and `x0`:
    /// `λ·sqrt((1 − e^{−2θ̄_{i−1}})(1 − e^{−2θ'_i}) / (1 − e^{−2θ̄_i}))`.
    /// Zero at `i = 1`.
    pub fn posterior_std(&self, i: usize) -> Result<f64> {
        self.check(i, 1)?;
        let prev = self.theta_bar[i - 1];
        let cur = self.theta_bar[i];
        let var = one_minus_exp_neg(2.0 * prev) * one_minus_exp_neg(2.0 * (cur - prev)) / one_minus_exp_neg(2.0 * cur);
        Ok(self.lambda * var.sqrt())
    }

    /// `min(e^{θ̄_i}, MAX_INVERSE_GAIN)`.
    pub fn inverse_gain(&self, i: usize) -> Result<f64> {
        self.check(i, 0)?;
        Ok(self.theta_bar[i].exp().min(MAX_INVERSE_GAIN))
    }

    /// Whether `e^{−2θ̄_T} ≤ 1e-4`.
    pub fn is_near_stationary(&self) -> bool {
        (-2.0 * self.theta_bar[self.steps()]).exp() <= 1e-4 * (1.0 + 1e-9)
    }

    pub fn forward_marginal(&self, x0: &Tensor, mu: &Tensor, i: usize) -> Result<(Tensor, f64)> {
        let (decay, std) = self.marginal_coefficients(i)?;
        Ok((((x0 - mu)? * decay)?.add(mu)?, std))
    }

    pub fn forward_sample(&self, x0: &Tensor, mu: &Tensor, i: usize, eps: &Tensor) -> Result<Tensor> {
        self.forward_sample_batch(x0, mu, &vec![i; x0.dim(0)?], eps)
    }

    pub fn optimal_reverse_state(&self, x_i: &Tensor, x0: &Tensor, mu: &Tensor, i: usize) -> Result<Tensor> {
        self.optimal_reverse_state_batch(x_i, x0, mu, &vec![i; x_i.dim(0)?])
    }

    /// `x̂0 = μ + (x_i − μ − σ̄_i·ε̂)·min(e^{θ̄_i}, 1e3)`.
    pub fn predict_x0(&self, x_i: &Tensor, mu: &Tensor, eps_hat: &Tensor, i: usize) -> Result<Tensor> {
        self.predict_x0_batch(x_i, mu, eps_hat, &vec![i; x_i.dim(0)?])
    }

    /// Per-item coefficients broadcast over the trailing dimensions of `like`.
    fn per_item(&self, values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1; like.rank()];
        shape[0] = values.len();
        Ok(Tensor::from_vec(values, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
    }

    fn check_batch(&self, x: &Tensor, steps: &[usize]) -> Result<()> {
        if x.dim(0)? != steps.len() {
            return Err(CoreError::BatchMismatch(x.dim(0)?, steps.len()));
        }
        Ok(())
    }

    /// Row `b` is sampled at step `steps[b]`.
    pub fn forward_sample_batch(&self, x0: &Tensor, mu: &Tensor, steps: &[usize], eps: &Tensor) -> Result<Tensor> {
        self.check_batch(x0, steps)?;
        let coeffs = steps
            .iter()
            .map(|&i| self.marginal_coefficients(i))
            .collect::<Result<Vec<_>>>()?;
        let decay = self.per_item(coeffs.iter().map(|c| c.0).collect(), x0)?;
        let std = self.per_item(coeffs.iter().map(|c| c.1).collect(), x0)?;
        Ok((x0 - mu)?
            .broadcast_mul(&decay)?
            .add(mu)?
            .add(&eps.broadcast_mul(&std)?)?)
    }

    pub fn optimal_reverse_state_batch(
        &self,
        x_i: &Tensor,
        x0: &Tensor,
        mu: &Tensor,
        steps: &[usize],
    ) -> Result<Tensor> {
        self.check_batch(x_i, steps)?;
        let coeffs = steps
            .iter()
            .map(|&i| self.reverse_coefficients(i))
            .collect::<Result<Vec<_>>>()?;
        let c_x = self.per_item(coeffs.iter().map(|c| c.0).collect(), x_i)?;
        let c_0 = self.per_item(coeffs.iter().map(|c| c.1).collect(), x_i)?;
        Ok((x_i - mu)?
            .broadcast_mul(&c_x)?
            .add(&(x0 - mu)?.broadcast_mul(&c_0)?)?
            .add(mu)?)
    }

    /// `ε̂ = (σ̄_i/λ²)·(x_i − μ) + e^{−θ̄_i}·raw`. The skip term is the best
    /// linear guess of ε when `x0 − μ` has variance λ², so the network output
    /// only carries the residual and `x̂0 = μ + e^{−θ̄_i}(x_i − μ) − σ̄_i·raw`.
    pub fn precondition_batch(&self, x_i: &Tensor, mu: &Tensor, raw: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.check_batch(x_i, steps)?;
        let lambda_sq = self.lambda * self.lambda;
        let skip = self.per_item(steps.iter().map(|&i| self.sigma_bar(i) / lambda_sq).collect(), x_i)?;
        let out = self.per_item(steps.iter().map(|&i| (-self.theta_bar[i]).exp()).collect(), x_i)?;
        Ok((x_i - mu)?.broadcast_mul(&skip)?.add(&raw.broadcast_mul(&out)?)?)
    }

    pub fn predict_x0_batch(&self, x_i: &Tensor, mu: &Tensor, eps_hat: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.check_batch(x_i, steps)?;
        let sigma = self.per_item(steps.iter().map(|&i| self.sigma_bar(i)).collect(), x_i)?;
        let gain = self.per_item(
            steps
                .iter()
                .map(|&i| self.inverse_gain(i))
                .collect::<Result<Vec<_>>>()?,
            x_i,
        )?;
        Ok((x_i - mu)?
            .sub(&eps_hat.broadcast_mul(&sigma)?)?
            .broadcast_mul(&gain)?
            .add(mu)?)
    }
}
