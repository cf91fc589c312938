use std::f64::consts::PI;

use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Isotropic Gaussian `N(mean, variance·I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: DenseArray,
    pub variance: f64,
}

impl GaussianParams {
    pub fn new(mean: DenseArray, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::Argument(format!("variance must be positive, got {variance}")));
        }
        Ok(Self { mean, variance })
    }
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_diffuse(x0: &DenseArray, t: usize, eps: &DenseArray, sched: &NoiseSchedule) -> Result<DenseArray> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Forward posterior `q(x_{t−1} | x_t, x0)`.
pub fn posterior_params(x0: &DenseArray, x_t: &DenseArray, t: usize, sched: &NoiseSchedule) -> Result<GaussianParams> {
    sched.check_t(t)?;
    let (c0, ct) = sched.posterior_mean_coefficients(t);
    let mean = x0.zip_map(x_t, |a, b| c0 * a + ct * b)?;
    GaussianParams::new(mean, sched.posterior_variance(t))
}

/// Reverse mean `(x_t − β_t/sqrt(1−ᾱ_t)·eps)/sqrt(α_t)` for a given ε prediction.
pub fn reverse_mean(x_t: &DenseArray, eps_pred: &DenseArray, t: usize, sched: &NoiseSchedule) -> Result<DenseArray> {
    let (cx, ce) = sched.reverse_mean_coefficients(t);
    x_t.zip_map(eps_pred, |x, e| cx * x - ce * e)
}

/// Learned reverse transition `p_θ(x_{t−1} | x_t, c)` with the variance fixed
/// to the posterior variance. `x_t` is a single sample (rank 1) or a batch
/// sharing `t` and `cond`.
pub fn model_reverse_params(
    model: &dyn NoisePredictor,
    x_t: &DenseArray,
    t: usize,
    cond: usize,
    sched: &NoiseSchedule,
) -> Result<GaussianParams> {
    sched.check_t(t)?;
    let batch = as_batch(x_t)?;
    let n = batch.rows();
    let eps = model.predict(&batch, &vec![t; n], &vec![cond; n])?;
    let mean = reverse_mean(&batch, &eps, t, sched)?.reshape(x_t.shape().to_vec())?;
    GaussianParams::new(mean, sched.posterior_variance(t))
}

fn as_batch(x: &DenseArray) -> Result<DenseArray> {
    match x.rank() {
        1 => x.clone().reshape(vec![1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::Shape(format!("expected rank 1 or 2, got {:?}", x.shape()))),
    }
}

/// `Σ_i −½·ln(2π·var) − (x_i − μ_i)²/(2·var)`.
pub fn gaussian_log_density(x: &DenseArray, g: &GaussianParams) -> Result<f64> {
    if !(g.variance > 0.0) {
        return Err(Error::Argument(format!("variance must be positive, got {}", g.variance)));
    }
    if x.shape() != g.mean.shape() {
        return Err(Error::Shape(format!("{:?} vs mean {:?}", x.shape(), g.mean.shape())));
    }
    Ok(log_density_slice(x.data(), g.mean.data(), g.variance))
}

pub(crate) fn log_density_slice(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let norm = -0.5 * (2.0 * PI * variance).ln();
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    norm * x.len() as f64 - sq / (2.0 * variance)
}
