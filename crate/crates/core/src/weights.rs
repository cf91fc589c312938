//! Importance weights between the learned reverse transition and a reference
//! transition, their clipping, and the pairwise clipped inverse weight.

use std::io::Write;

use crate::diffusion::{log_density_slice, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{clip_scalar, DenseArray};
use crate::rng::{self, Rng};

/// Clip range `[1 − ε, 1 + ε]` and whether the weight is a constant for
/// gradient purposes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub detach_weight: bool,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            detach_weight: true,
        }
    }
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Argument(format!(
                "clip epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn lo(&self) -> f64 {
        1.0 - self.epsilon
    }

    pub fn hi(&self) -> f64 {
        1.0 + self.epsilon
    }

    /// Strictly inside the clip range, where the clipped value still moves with its input.
    pub(crate) fn is_interior(&self, w: f64) -> bool {
        w > self.lo() && w < self.hi()
    }
}

/// One timestep's importance weight.
///
/// `raw = exp((log_p_model − log_q_forward) / dim)`; `log_q_forward` holds the
/// reference log-density, which is the forward posterior unless a previous
/// model was used as reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepWeight {
    pub t: usize,
    pub raw: f64,
    pub clipped: f64,
    pub log_p_model: f64,
    pub log_q_forward: f64,
}

impl StepWeight {
    pub fn from_log_densities(
        t: usize,
        log_p_model: f64,
        log_q_forward: f64,
        dim: usize,
        clip: &ClipConfig,
    ) -> Result<Self> {
        if !log_p_model.is_finite() || !log_q_forward.is_finite() {
            return Err(Error::NonFiniteDensity {
                log_p_model,
                log_q_forward,
            });
        }
        let raw = ((log_p_model - log_q_forward) / dim as f64).exp();
        Ok(Self {
            t,
            raw,
            clipped: clip_scalar(raw, clip.lo(), clip.hi())?,
            log_p_model,
            log_q_forward,
        })
    }

    /// Per-dimension log-ratio, i.e. `ln raw` without the round trip through `exp`.
    pub fn log_ratio(&self, dim: usize) -> f64 {
        (self.log_p_model - self.log_q_forward) / dim as f64
    }
}

/// Density the model transition is compared against.
#[derive(Clone, Copy)]
pub enum WeightReference<'a> {
    /// `q(x_{t−1} | x_t, x0)`.
    ForwardPosterior,
    /// `p_old(x_{t−1} | x_t)` from an earlier model.
    PreviousModel(&'a dyn NoisePredictor),
}

/// Weight for a single sample. Draws `x_{t−1} ~ q(· | x_t, x0)` once from
/// `rng` and compares `p_θ` against the chosen reference at that point.
#[allow(clippy::too_many_arguments)]
pub fn importance_weight(
    model: &dyn NoisePredictor,
    reference: WeightReference<'_>,
    x0: &DenseArray,
    x_t: &DenseArray,
    t: usize,
    cond: usize,
    sched: &NoiseSchedule,
    clip: &ClipConfig,
    rng: &mut Rng,
) -> Result<StepWeight> {
    if t < 2 || t > sched.steps() {
        return Err(Error::Argument(format!(
            "importance weight needs 2 <= t <= {}, got {t}",
            sched.steps()
        )));
    }
    if x0.shape() != x_t.shape() || x0.len() != model.data_dim() {
        return Err(Error::Shape(format!(
            "x0 {:?}, x_t {:?}, model dim {}",
            x0.shape(),
            x_t.shape(),
            model.data_dim()
        )));
    }
    let dim = x0.len();
    let row = x_t.clone().reshape(vec![1, dim])?;
    let eps_model = model.predict(&row, &[t], &[cond])?;
    let eps_ref = match reference {
        WeightReference::ForwardPosterior => None,
        WeightReference::PreviousModel(old) => Some(old.predict(&row, &[t], &[cond])?),
    };
    let xi = rng::normal_array(rng, &[dim]);
    step_weight_row(
        x0.data(),
        x_t.data(),
        eps_model.data(),
        eps_ref.as_ref().map(|e| e.data()),
        xi.data(),
        t,
        sched,
        clip,
    )
}

/// `x_{t−1} = posterior mean + sqrt(posterior var)·xi`.
pub(crate) fn posterior_point(x0: &[f64], x_t: &[f64], xi: Option<&[f64]>, t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let (c0, ct) = sched.posterior_mean_coefficients(t);
    let sd = sched.posterior_variance(t).sqrt();
    x0.iter()
        .zip(x_t)
        .enumerate()
        .map(|(j, (a, b))| c0 * a + ct * b + xi.map_or(0.0, |z| sd * z[j]))
        .collect()
}

pub(crate) fn reverse_mean_slice(x_t: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let (cx, ce) = sched.reverse_mean_coefficients(t);
    x_t.iter().zip(eps).map(|(x, e)| cx * x - ce * e).collect()
}

/// Weight for one row given ε predictions already evaluated at `x_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_weight_row(
    x0: &[f64],
    x_t: &[f64],
    eps_model: &[f64],
    eps_reference: Option<&[f64]>,
    xi: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    clip: &ClipConfig,
) -> Result<StepWeight> {
    let var = sched.posterior_variance(t);
    let x_prev = posterior_point(x0, x_t, Some(xi), t, sched);
    let model_mean = reverse_mean_slice(x_t, eps_model, t, sched);
    let ref_mean = match eps_reference {
        None => posterior_point(x0, x_t, None, t, sched),
        Some(e) => reverse_mean_slice(x_t, e, t, sched),
    };
    let log_p = log_density_slice(&x_prev, &model_mean, var);
    let log_q = log_density_slice(&x_prev, &ref_mean, var);
    StepWeight::from_log_densities(t, log_p, log_q, x0.len(), clip)
}

/// `clip(w, 1 − ε, 1 + ε)`.
pub fn clip_weight(w: f64, cfg: &ClipConfig) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::Argument(format!("weight must be positive, got {w}")));
    }
    clip_scalar(w, cfg.lo(), cfg.hi())
}

/// `max(clip(1/w_w), clip(1/w_l))`.
pub fn pair_inverse_weight(w_w: f64, w_l: f64, cfg: &ClipConfig) -> Result<f64> {
    if !(w_w > 0.0 && w_l > 0.0) {
        return Err(Error::Argument(format!(
            "pair weights must be positive, got ({w_w}, {w_l})"
        )));
    }
    Ok(clip_weight(1.0 / w_w, cfg)?.max(clip_weight(1.0 / w_l, cfg)?))
}

/// Same as [`pair_inverse_weight`] from per-dimension log weights, so that a
/// weight that underflowed to zero still clips to `1 + ε`.
/// Returns the value and which side (0 winner, 1 loser) attains the max.
pub(crate) fn pair_inverse_from_logs(log_w_w: f64, log_w_l: f64, cfg: &ClipConfig) -> (f64, usize) {
    let inv_w = (-log_w_w).exp().clamp(cfg.lo(), cfg.hi());
    let inv_l = (-log_w_l).exp().clamp(cfg.lo(), cfg.hi());
    if inv_l > inv_w {
        (inv_l, 1)
    } else {
        (inv_w, 0)
    }
}

/// Both sides of `E_p[f] = E_q[f·p/q]` by enumeration.
pub fn is_identity_check(p: &[f64], q: &[f64], f: &[f64]) -> Result<(f64, f64)> {
    if p.len() != q.len() || p.len() != f.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "p, q, f lengths {}, {}, {}",
            p.len(),
            q.len(),
            f.len()
        )));
    }
    if p.iter().chain(q).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Argument("probabilities must be finite and non-negative".into()));
    }
    if let Some(i) = p.iter().zip(q).position(|(pi, qi)| *pi > 0.0 && *qi == 0.0) {
        return Err(Error::Argument(format!(
            "q has no mass at outcome {i} where p does"
        )));
    }
    let lhs = p.iter().zip(f).map(|(pi, fi)| pi * fi).sum();
    let rhs = q
        .iter()
        .zip(p)
        .zip(f)
        .filter(|((qi, _), _)| **qi > 0.0)
        .map(|((qi, pi), fi)| qi * fi * (pi / qi))
        .sum();
    Ok((lhs, rhs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub step: usize,
    pub weight: StepWeight,
}

/// Weights collected over a run, exported as
/// `run_id,step,t,raw,clipped,log_p_model,log_q_forward`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightReport {
    pub run_id: String,
    pub records: Vec<WeightRecord>,
}

impl WeightReport {
    pub const HEADER: [&'static str; 7] = ["run_id", "step", "t", "raw", "clipped", "log_p_model", "log_q_forward"];

    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, weight: StepWeight) {
        self.records.push(WeightRecord { step, weight });
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for r in &self.records {
            let s = &r.weight;
            w.write_record([
                self.run_id.clone(),
                r.step.to_string(),
                s.t.to_string(),
                s.raw.to_string(),
                s.clipped.to_string(),
                s.log_p_model.to_string(),
                s.log_q_forward.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
