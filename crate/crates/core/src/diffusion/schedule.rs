use crate::error::{Error, Result};

/// Floor applied to the t = 1 posterior variance, which is exactly zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Discrete-time DDPM noise schedule. Timesteps are 1-based: `1..=steps()`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β interpolated linearly from `beta_start` at t = 1 to `beta_end` at t = T.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Argument(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Argument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Argument("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Argument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// The conventional DDPM schedule: T = 1000, β from 1e-4 to 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Argument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t), floored at [`VARIANCE_FLOOR`].
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let v = self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t));
        v.max(VARIANCE_FLOOR)
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x0 + ct·x_t`.
    pub fn posterior_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        (
            self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / denom,
        )
    }

    /// Coefficients `(cx, ce)` of the ε-parameterised reverse mean `cx·x_t − ce·ε`.
    pub fn reverse_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        (
            inv_sqrt_alpha,
            inv_sqrt_alpha * self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt(),
        )
    }

    /// `β_t / (2 α_t (1 − ᾱ_{t−1}))`: the factor turning a difference of squared
    /// ε-errors into a difference of reverse-transition log-densities evaluated
    /// at the posterior mean.
    pub fn density_scale(&self, t: usize) -> f64 {
        let (_, ce) = self.reverse_mean_coefficients(t);
        ce * ce / (2.0 * self.posterior_variance(t))
    }
}
