//! Preference objectives: Bradley–Terry, Diffusion-DPO, clipped/masked DPO
//! ("cm") and the importance-weighted sequence and diffusion forms ("sdpo").
//!
//! Scalar helpers work on plain numbers or any [`NoisePredictor`]; the batched
//! builder [`build_pref_loss`] records a loss on a [`CompGraph`] for training.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{forward_diffuse, log_density_slice, DenoiserNet, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, CompGraph, DenseArray, NodeId};
use crate::rng::{self, Rng};
use crate::weights::{pair_inverse_from_logs, posterior_point, step_weight_row, ClipConfig, StepWeight};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Diffusion-DPO on ε-prediction errors.
    Dpo,
    /// Diffusion-DPO scaled by the clipped importance weight, optionally masked.
    Cm,
    /// Transition-density logit divided by the clipped pairwise inverse weight.
    Sdpo,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dpo, Method::Cm, Method::Sdpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Cm => "cm",
            Method::Sdpo => "sdpo",
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            Method::Dpo => 2.0,
            Method::Cm | Method::Sdpo => 0.02,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(Method::Dpo),
            "cm" => Ok(Method::Cm),
            "sdpo" => Ok(Method::Sdpo),
            other => Err(Error::Argument(format!(
                "unknown method `{other}` (expected dpo, cm or sdpo)"
            ))),
        }
    }
}

/// Timestep weighting of the DPO logit. Only the constant is implemented; it
/// is absorbed into β.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OmegaMode {
    #[default]
    ConstantOne,
}

/// Which side of a pair defines the weight of the clipped DPO loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightPath {
    #[default]
    Winner,
    Loser,
    /// The larger clipped weight of the two sides.
    PairMax,
}

/// Where the transition densities of the diffusion-form SDPO logit are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalPoint {
    /// One draw of `x_{t−1}` from the forward posterior per side.
    #[default]
    Sample,
    /// The forward posterior mean; makes the logit a fixed multiple of the
    /// Δℓ form (see [`NoiseSchedule::density_scale`]).
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub omega: OmegaMode,
    pub clip: ClipConfig,
    pub hard_mask_threshold: Option<f64>,
    /// Inclusive `[t_lo, t_hi]` for timestep sampling during training.
    pub timestep_window: Option<(usize, usize)>,
    pub weight_path: WeightPath,
    pub eval_point: EvalPoint,
}

impl LossConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            beta: method.default_beta(),
            omega: OmegaMode::ConstantOne,
            clip: ClipConfig::default(),
            hard_mask_threshold: None,
            timestep_window: None,
            weight_path: WeightPath::Winner,
            eval_point: EvalPoint::Sample,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", format!("must be > 0, got {}", self.beta)));
        }
        self.clip
            .validate()
            .map_err(|e| Error::config("epsilon", e.to_string()))?;
        if let Some(th) = self.hard_mask_threshold {
            if !(th > 0.0 && th.is_finite()) {
                return Err(Error::config("mask_threshold", format!("must be > 0, got {th}")));
            }
        }
        if let Some((lo, hi)) = self.timestep_window {
            if !(1 <= lo && lo < hi && hi <= steps) {
                return Err(Error::config(
                    "window",
                    format!("need 1 <= t_lo < t_hi <= {steps}, got [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    /// Timestep range used for training draws.
    pub fn t_range(&self, steps: usize) -> (usize, usize) {
        self.timestep_window.unwrap_or((1, steps))
    }
}

/// One preference pair at one timestep, with every random draw fixed so that
/// the loss is a deterministic function of the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefBatchStep {
    pub cond: usize,
    pub t: usize,
    pub x0_w: DenseArray,
    pub eps_w: DenseArray,
    pub x_t_w: DenseArray,
    /// Standard normal draw placing `x_{t−1}` in the forward posterior.
    pub xi_w: DenseArray,
    pub x0_l: DenseArray,
    pub eps_l: DenseArray,
    pub x_t_l: DenseArray,
    pub xi_l: DenseArray,
}

impl PrefBatchStep {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cond: usize,
        t: usize,
        x0_w: DenseArray,
        eps_w: DenseArray,
        xi_w: DenseArray,
        x0_l: DenseArray,
        eps_l: DenseArray,
        xi_l: DenseArray,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let shape = x0_w.shape().to_vec();
        if x0_w.rank() != 1 || [&eps_w, &xi_w, &x0_l, &eps_l, &xi_l].iter().any(|a| a.shape() != shape.as_slice()) {
            return Err(Error::Shape("pair tensors must be rank-1 of one shape".into()));
        }
        let x_t_w = forward_diffuse(&x0_w, t, &eps_w, sched)?;
        let x_t_l = forward_diffuse(&x0_l, t, &eps_l, sched)?;
        Ok(Self {
            cond,
            t,
            x0_w,
            eps_w,
            x_t_w,
            xi_w,
            x0_l,
            eps_l,
            x_t_l,
            xi_l,
        })
    }

    /// Draws `eps` and `xi` for both sides from `rng`.
    pub fn draw(
        cond: usize,
        t: usize,
        x0_w: DenseArray,
        x0_l: DenseArray,
        sched: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = [x0_w.len()];
        let eps_w = rng::normal_array(rng, &d);
        let eps_l = rng::normal_array(rng, &d);
        let xi_w = rng::normal_array(rng, &d);
        let xi_l = rng::normal_array(rng, &d);
        Self::new(cond, t, x0_w, eps_w, xi_w, x0_l, eps_l, xi_l, sched)
    }

    pub fn dim(&self) -> usize {
        self.x0_w.len()
    }

    /// Winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            cond: self.cond,
            t: self.t,
            x0_w: self.x0_l.clone(),
            eps_w: self.eps_l.clone(),
            x_t_w: self.x_t_l.clone(),
            xi_w: self.xi_l.clone(),
            x0_l: self.x0_w.clone(),
            eps_l: self.eps_w.clone(),
            x_t_l: self.x_t_w.clone(),
            xi_l: self.xi_w.clone(),
        }
    }

    fn side(&self, winner: bool) -> (&DenseArray, &DenseArray, &DenseArray, &DenseArray) {
        if winner {
            (&self.x0_w, &self.eps_w, &self.x_t_w, &self.xi_w)
        } else {
            (&self.x0_l, &self.eps_l, &self.x_t_l, &self.xi_l)
        }
    }

    /// The point `x_{t−1}` at which transition densities are compared.
    pub fn x_prev(&self, winner: bool, eval: EvalPoint, sched: &NoiseSchedule) -> Vec<f64> {
        let (x0, _, xt, xi) = self.side(winner);
        let xi = match eval {
            EvalPoint::Sample => Some(xi.data()),
            EvalPoint::Mean => None,
        };
        posterior_point(x0.data(), xt.data(), xi, self.t, sched)
    }
}

/// `−log σ(r_w − r_l)`.
pub fn bt_reward_loss(r_w: f64, r_l: f64) -> f64 {
    -log_sigmoid(r_w - r_l)
}

fn predict_one(model: &dyn NoisePredictor, x_t: &DenseArray, t: usize, cond: usize) -> Result<Vec<f64>> {
    let row = x_t.clone().reshape(vec![1, x_t.len()])?;
    Ok(model.predict(&row, &[t], &[cond])?.into_data())
}

fn sq_err(pred: &[f64], eps: &[f64]) -> f64 {
    pred.iter().zip(eps).map(|(p, e)| (p + -e) * (p + -e)).sum()
}

/// `[‖ε_w − ε_θ‖² − ‖ε_w − ε_ref‖²] − [‖ε_l − ε_θ‖² − ‖ε_l − ε_ref‖²]`.
pub fn delta_ell(net: &dyn NoisePredictor, reference: &dyn NoisePredictor, step: &PrefBatchStep) -> Result<f64> {
    let mut sides = [0.0; 2];
    for (k, winner) in [true, false].into_iter().enumerate() {
        let (_, eps, xt, _) = step.side(winner);
        let th = sq_err(&predict_one(net, xt, step.t, step.cond)?, eps.data());
        let rf = sq_err(&predict_one(reference, xt, step.t, step.cond)?, eps.data());
        sides[k] = th - rf;
    }
    Ok(sides[0] - sides[1])
}

/// `−β·T·ω·Δℓ` with `ω ≡ 1`.
pub fn dpo_logit(delta_ell: f64, beta: f64, steps: usize) -> f64 {
    -beta * steps as f64 * delta_ell
}

/// `−log σ(−β·T·Δℓ)`.
pub fn diffusion_dpo_loss(
    net: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    step: &PrefBatchStep,
    cfg: &LossConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let dl = delta_ell(net, reference, step)?;
    Ok(-log_sigmoid(dpo_logit(dl, cfg.beta, sched.steps())))
}

/// Clipped weight times the Diffusion-DPO loss; zero when the hard mask is
/// enabled and the raw weight is below its threshold.
pub fn dpo_cm_loss(
    net: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    step: &PrefBatchStep,
    cfg: &LossConfig,
    weight: &StepWeight,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if cfg.hard_mask_threshold.is_some_and(|th| weight.raw < th) {
        return Ok(0.0);
    }
    Ok(weight.clipped * diffusion_dpo_loss(net, reference, step, cfg, sched)?)
}

/// `−log σ((β / w̃)·[(lp_w − ref_lp_w) − (lp_l − ref_lp_l)])`.
pub fn sdpo_sequence_loss(
    logp_w: f64,
    logp_l: f64,
    ref_logp_w: f64,
    ref_logp_l: f64,
    w_tilde: f64,
    beta: f64,
) -> Result<f64> {
    if !(w_tilde > 0.0) {
        return Err(Error::Argument(format!("w_tilde must be positive, got {w_tilde}")));
    }
    let logit = beta / w_tilde * ((logp_w - ref_logp_w) - (logp_l - ref_logp_l));
    Ok(-log_sigmoid(logit))
}

/// `(β·T / w̃)·[log p_θ(x^w_{t−1}|x^w_t) − log p_ref(·) − log p_θ(x^l_{t−1}|x^l_t) + log p_ref(·)]`.
pub fn sdpo_diffusion_logit(
    net: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    step: &PrefBatchStep,
    cfg: &LossConfig,
    w_tilde: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if !(w_tilde > 0.0) {
        return Err(Error::Argument(format!("w_tilde must be positive, got {w_tilde}")));
    }
    let var = sched.posterior_variance(step.t);
    let mut sides = [0.0; 2];
    for (k, winner) in [true, false].into_iter().enumerate() {
        let (_, _, xt, _) = step.side(winner);
        let x_prev = step.x_prev(winner, cfg.eval_point, sched);
        let mut lp = [0.0; 2];
        for (j, model) in [net, reference].into_iter().enumerate() {
            let eps = predict_one(model, xt, step.t, step.cond)?;
            let mean = crate::weights::reverse_mean_slice(xt.data(), &eps, step.t, sched);
            lp[j] = log_density_slice(&x_prev, &mean, var);
        }
        sides[k] = lp[0] - lp[1];
    }
    Ok(cfg.beta * sched.steps() as f64 / w_tilde * (sides[0] - sides[1]))
}

pub fn sdpo_diffusion_loss(
    net: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    step: &PrefBatchStep,
    cfg: &LossConfig,
    w_tilde: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    Ok(-log_sigmoid(sdpo_diffusion_logit(net, reference, step, cfg, w_tilde, sched)?))
}

/// Result of [`target_distribution_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCheck {
    /// `ref(x)·exp((w/β)·r(x)) / Z`.
    pub probs: Vec<f64>,
    /// `ln Σ ref(x)·exp(((1+ε)/β)·r(x))`.
    pub log_z: f64,
    /// `(β/w)·ln(p*(x)/ref(x)) + (β/w)·ln Z`, which should equal `r(x)`.
    pub recovered_rewards: Vec<f64>,
}

/// Builds the reweighted target distribution and inverts it back to rewards.
/// The numerator uses the weight `w` while `Z` uses `(1 + ε)/β`; with `w = 1 + ε`
/// the result is normalised. Computed in log space.
pub fn target_distribution_check(
    ref_probs: &[f64],
    rewards: &[f64],
    w: f64,
    beta: f64,
    epsilon: f64,
) -> Result<TargetCheck> {
    if ref_probs.len() != rewards.len() || ref_probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} rewards",
            ref_probs.len(),
            rewards.len()
        )));
    }
    if ref_probs.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::Argument("reference probabilities must be positive".into()));
    }
    let total: f64 = ref_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("reference probabilities sum to {total}")));
    }
    if !(beta > 0.0 && w > 0.0 && epsilon >= 0.0) {
        return Err(Error::Argument(format!("need beta > 0, w > 0, epsilon >= 0 (got {beta}, {w}, {epsilon})")));
    }
    let z_terms: Vec<f64> = ref_probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() + (1.0 + epsilon) / beta * r)
        .collect();
    let m = z_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + z_terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let log_p: Vec<f64> = ref_probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() + w / beta * r - log_z)
        .collect();
    let recovered_rewards = log_p
        .iter()
        .zip(ref_probs)
        .map(|(lp, p)| beta / w * (lp - p.ln()) + beta / w * log_z)
        .collect();
    Ok(TargetCheck {
        probs: log_p.iter().map(|v| v.exp()).collect(),
        log_z,
        recovered_rewards,
    })
}

/// Weights behind one pair's loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairWeights {
    pub winner: StepWeight,
    pub loser: StepWeight,
    /// Raw weight of the side that set `factor` (the winner for plain DPO).
    pub raw: f64,
    /// Multiplier on the loss (cm, 0 when masked) or divisor of the logit (sdpo); 1 for dpo.
    pub factor: f64,
    pub masked: bool,
}

/// Output of [`build_pref_loss`].
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub loss: NodeId,
    pub logits: Vec<f64>,
    pub pair_losses: Vec<f64>,
    pub weights: Vec<PairWeights>,
}

impl LossTerms {
    pub fn mean_logit(&self) -> f64 {
        self.logits.iter().sum::<f64>() / self.logits.len() as f64
    }
}

/// Per-row constants of a batch laid out as `[winners; losers]`.
struct Rows {
    n: usize,
    dim: usize,
    t: Vec<usize>,
    cond: Vec<usize>,
    x0: DenseArray,
    x_t: DenseArray,
    eps: DenseArray,
    xi: DenseArray,
}

impl Rows {
    fn new(batch: &[PrefBatchStep]) -> Result<Self> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Argument("empty preference batch".into()));
        }
        let dim = batch[0].dim();
        if batch.iter().any(|s| s.dim() != dim) {
            return Err(Error::Shape("preference batch mixes sample dimensions".into()));
        }
        let stack = |f: &dyn Fn(&PrefBatchStep, bool) -> Vec<f64>| -> Result<DenseArray> {
            let mut data = Vec::with_capacity(2 * b * dim);
            for winner in [true, false] {
                for s in batch {
                    data.extend(f(s, winner));
                }
            }
            DenseArray::matrix(2 * b, dim, data)
        };
        let mut t = Vec::with_capacity(2 * b);
        let mut cond = Vec::with_capacity(2 * b);
        for _ in 0..2 {
            t.extend(batch.iter().map(|s| s.t));
            cond.extend(batch.iter().map(|s| s.cond));
        }
        Ok(Self {
            n: b,
            dim,
            t,
            cond,
            x0: stack(&|s, w| s.side(w).0.data().to_vec())?,
            eps: stack(&|s, w| s.side(w).1.data().to_vec())?,
            x_t: stack(&|s, w| s.side(w).2.data().to_vec())?,
            xi: stack(&|s, w| s.side(w).3.data().to_vec())?,
        })
    }

    fn col(&self, f: impl Fn(usize) -> f64) -> DenseArray {
        DenseArray::matrix(2 * self.n, 1, (0..2 * self.n).map(f).collect()).expect("column shape")
    }

    /// `[n, 2n]` with `+1` at the winner row and `−1` at the loser row of each pair.
    fn pair_difference(&self) -> DenseArray {
        let n = self.n;
        let mut s = DenseArray::zeros(&[n, 2 * n]);
        for i in 0..n {
            s.data_mut()[i * 2 * n + i] = 1.0;
            s.data_mut()[i * 2 * n + n + i] = -1.0;
        }
        s
    }

    /// `[n, 2n]` picking row `side[i]·n + i` for each pair.
    fn selector(&self, side: &[usize]) -> DenseArray {
        let n = self.n;
        let mut s = DenseArray::zeros(&[n, 2 * n]);
        for (i, &k) in side.iter().enumerate() {
            s.data_mut()[i * 2 * n + k * n + i] = 1.0;
        }
        s
    }

    /// Evaluation points and the part of `x_{t−1} − μ_θ` that does not depend on ε̂.
    fn density_offsets(&self, eval: EvalPoint, sched: &NoiseSchedule) -> DenseArray {
        let mut out = Vec::with_capacity(2 * self.n * self.dim);
        for r in 0..2 * self.n {
            let t = self.t[r];
            let xi = match eval {
                EvalPoint::Sample => Some(self.xi.row(r)),
                EvalPoint::Mean => None,
            };
            let x_prev = posterior_point(self.x0.row(r), self.x_t.row(r), xi, t, sched);
            let (cx, _) = sched.reverse_mean_coefficients(t);
            out.extend(x_prev.iter().zip(self.x_t.row(r)).map(|(p, x)| p - cx * x));
        }
        DenseArray::matrix(2 * self.n, self.dim, out).expect("offset shape")
    }
}

/// Row-wise squared ε-errors `‖ε − ε̂‖²` as an `[rows, 1]` node.
fn error_rows(g: &mut CompGraph, eps_hat: NodeId, neg_eps: NodeId) -> Result<NodeId> {
    let r = g.add(eps_hat, neg_eps)?;
    let sq = g.square(r)?;
    g.sum(sq, Some(1))
}

/// Row-wise reverse-transition log-densities at fixed points, given
/// `offsets = x_{t−1} − cx·x_t`: `x_{t−1} − μ = ce·ε̂ + offsets`.
fn log_density_rows(
    g: &mut CompGraph,
    eps_hat: NodeId,
    ce: NodeId,
    offsets: NodeId,
    neg_half_inv_var: NodeId,
    norm: NodeId,
) -> Result<NodeId> {
    let m = g.mul(eps_hat, ce)?;
    let diff = g.add(m, offsets)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq, Some(1))?;
    let q = g.mul(s, neg_half_inv_var)?;
    g.add(q, norm)
}

/// Records the batch-mean preference loss of `method` on `graph`.
///
/// `params` are the graph nodes of `net`'s parameters. The reference model is
/// evaluated outside the tape. Weights are always computed (at the sampled
/// `x_{t−1}`, against the forward posterior) and reported; `fixed_factors`
/// overrides the per-pair factor they would produce, which is how a detached
/// weight is held constant across finite-difference probes.
#[allow(clippy::too_many_arguments)]
pub fn build_pref_loss(
    g: &mut CompGraph,
    params: &[NodeId],
    net: &DenoiserNet,
    reference: &dyn NoisePredictor,
    batch: &[PrefBatchStep],
    method: Method,
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    fixed_factors: Option<&[f64]>,
) -> Result<LossTerms> {
    let rows = Rows::new(batch)?;
    let n = rows.n;
    if let Some(f) = fixed_factors {
        if f.len() != n {
            return Err(Error::Shape(format!("{} fixed factors for {n} pairs", f.len())));
        }
    }
    let big_t = sched.steps() as f64;

    let feats = g.input(net.features(&rows.x_t, &rows.t, &rows.cond)?);
    let eps_th = net.forward_graph(g, params, feats)?;
    let eps_ref = g.input(reference.predict(&rows.x_t, &rows.t, &rows.cond)?);
    let eps_th_val = g.value(eps_th).clone();

    // Weights against the forward posterior at the sampled x_{t−1}.
    let mut side_weights = Vec::with_capacity(2 * n);
    for r in 0..2 * n {
        side_weights.push(step_weight_row(
            rows.x0.row(r),
            rows.x_t.row(r),
            eps_th_val.row(r),
            None,
            rows.xi.row(r),
            rows.t[r],
            sched,
            &cfg.clip,
        )?);
    }
    let log_w: Vec<f64> = side_weights.iter().map(|w| w.log_ratio(rows.dim)).collect();

    let mut weights = Vec::with_capacity(n);
    let mut chosen_side = Vec::with_capacity(n);
    let mut interior = Vec::with_capacity(n);
    for i in 0..n {
        let (ww, wl) = (side_weights[i], side_weights[n + i]);
        let (factor, side, raw, masked, inner) = match method {
            Method::Dpo => (1.0, 0, ww.raw, false, false),
            Method::Cm => {
                let side = match cfg.weight_path {
                    WeightPath::Winner => 0,
                    WeightPath::Loser => 1,
                    WeightPath::PairMax => usize::from(wl.clipped > ww.clipped),
                };
                let sel = if side == 0 { ww } else { wl };
                let masked = cfg.hard_mask_threshold.is_some_and(|th| sel.raw < th);
                let factor = if masked { 0.0 } else { sel.clipped };
                (factor, side, sel.raw, masked, !masked && cfg.clip.is_interior(sel.raw))
            }
            Method::Sdpo => {
                let (w_tilde, side) = pair_inverse_from_logs(log_w[i], log_w[n + i], &cfg.clip);
                let sel = if side == 0 { ww } else { wl };
                (w_tilde, side, sel.raw, false, cfg.clip.is_interior(w_tilde))
            }
        };
        weights.push(PairWeights {
            winner: ww,
            loser: wl,
            raw,
            factor,
            masked,
        });
        chosen_side.push(side);
        interior.push(inner);
    }
    let factors: Vec<f64> = match fixed_factors {
        Some(f) => f.to_vec(),
        None => weights.iter().map(|w| w.factor).collect(),
    };
    for (w, f) in weights.iter_mut().zip(&factors) {
        w.factor = *f;
    }
    let live = fixed_factors.is_none() && !cfg.clip.detach_weight && method != Method::Dpo;

    let diff = g.input(rows.pair_difference());
    let logit = match method {
        Method::Dpo | Method::Cm => {
            let neg_eps = g.input(rows.eps.scale(-1.0));
            let e_th = error_rows(g, eps_th, neg_eps)?;
            let e_ref = error_rows(g, eps_ref, neg_eps)?;
            let d_th = g.matmul(diff, e_th)?;
            let d_ref = g.matmul(diff, e_ref)?;
            let neg_ref = g.scale(d_ref, -1.0)?;
            let delta = g.add(d_th, neg_ref)?;
            g.scale(delta, -cfg.beta * big_t)?
        }
        Method::Sdpo => {
            let ce = g.input(rows.col(|r| sched.reverse_mean_coefficients(rows.t[r]).1));
            let nhiv = g.input(rows.col(|r| -1.0 / (2.0 * sched.posterior_variance(rows.t[r]))));
            let norm = g.input(rows.col(|r| {
                -0.5 * (2.0 * std::f64::consts::PI * sched.posterior_variance(rows.t[r])).ln() * rows.dim as f64
            }));
            let offsets = g.input(rows.density_offsets(cfg.eval_point, sched));
            let lp_th = log_density_rows(g, eps_th, ce, offsets, nhiv, norm)?;
            let lp_ref = log_density_rows(g, eps_ref, ce, offsets, nhiv, norm)?;
            let d_th = g.matmul(diff, lp_th)?;
            let d_ref = g.matmul(diff, lp_ref)?;
            let neg_ref = g.scale(d_ref, -1.0)?;
            let d = g.add(d_th, neg_ref)?;
            let scale = g.input(DenseArray::matrix(n, 1, factors.iter().map(|f| cfg.beta * big_t / f).collect())?);
            let mut logit = g.mul(d, scale)?;
            if live {
                // 1/w̃ equals the selected side's raw weight inside the clip range, so
                // d(1/w̃) = (1/w̃)·d ln w there: multiply by a factor whose value is
                // exactly one and whose gradient is that of ln w.
                let corr = weight_log_correction(g, eps_th, &rows, sched, &chosen_side)?;
                let ind = g.input(DenseArray::matrix(n, 1, interior.iter().map(|&b| f64::from(u8::from(b))).collect())?);
                let gated = g.mul(corr, ind)?;
                let one = g.input(DenseArray::full(&[n, 1], 1.0));
                let m = g.add(gated, one)?;
                logit = g.mul(logit, m)?;
            }
            logit
        }
    };

    let ls = g.log_sigmoid(logit)?;
    let logits = g.value(logit).data().to_vec();
    let per_pair = match method {
        Method::Cm => {
            let f = g.input(DenseArray::matrix(n, 1, factors.iter().map(|f| -f).collect())?);
            let mut total = g.mul(ls, f)?;
            if live {
                // d(w̃·L) = w̃·dL + L·w̃·d ln w inside the clip range.
                let corr = weight_log_correction(g, eps_th, &rows, sched, &chosen_side)?;
                let coef: Vec<f64> = (0..n)
                    .map(|i| {
                        let l = -g.value(ls).data()[i];
                        if interior[i] { l * factors[i] } else { 0.0 }
                    })
                    .collect();
                let c = g.input(DenseArray::matrix(n, 1, coef)?);
                let extra = g.mul(corr, c)?;
                total = g.add(total, extra)?;
            }
            total
        }
        Method::Dpo | Method::Sdpo => g.scale(ls, -1.0)?,
    };
    let pair_losses = g.value(per_pair).data().to_vec();
    let loss = g.mean(per_pair)?;
    Ok(LossTerms {
        loss,
        logits,
        pair_losses,
        weights,
    })
}

/// `ln w_sel − (ln w_sel as a constant)` per pair: zero in value, carrying the
/// gradient of the selected side's per-dimension log weight.
fn weight_log_correction(
    g: &mut CompGraph,
    eps_th: NodeId,
    rows: &Rows,
    sched: &NoiseSchedule,
    side: &[usize],
) -> Result<NodeId> {
    let ce = g.input(rows.col(|r| sched.reverse_mean_coefficients(rows.t[r]).1));
    let nhiv = g.input(rows.col(|r| -1.0 / (2.0 * sched.posterior_variance(rows.t[r]))));
    let zero = g.input(DenseArray::zeros(&[2 * rows.n, 1]));
    let offsets = g.input(rows.density_offsets(EvalPoint::Sample, sched));
    // Only the ε̂-dependent part matters; ln q and the normaliser are constants.
    let lp = log_density_rows(g, eps_th, ce, offsets, nhiv, zero)?;
    let lw = g.scale(lp, 1.0 / rows.dim as f64)?;
    let sel = g.input(rows.selector(side));
    let picked = g.matmul(sel, lw)?;
    let neg = g.input(g.value(picked).scale(-1.0));
    g.add(picked, neg)
}

/// Loss value, per-pair diagnostics and parameter gradients for one batch.
pub fn pref_loss_and_grads(
    net: &DenoiserNet,
    reference: &dyn NoisePredictor,
    batch: &[PrefBatchStep],
    method: Method,
    cfg: &LossConfig,
    sched: &NoiseSchedule,
) -> Result<(f64, LossTerms, Vec<DenseArray>)> {
    let mut g = CompGraph::new();
    let ids: Vec<NodeId> = net.params().iter().map(|p| g.param(p.clone())).collect();
    let terms = build_pref_loss(&mut g, &ids, net, reference, batch, method, cfg, sched, None)?;
    let value = g.value(terms.loss).item();
    let mut grads = g.backward(terms.loss)?;
    let out = ids
        .iter()
        .zip(net.params())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| DenseArray::zeros(p.shape())))
        .collect();
    Ok((value, terms, out))
}

/// Loss value and diagnostics without gradients.
pub fn pref_loss_value(
    net: &DenoiserNet,
    reference: &dyn NoisePredictor,
    batch: &[PrefBatchStep],
    method: Method,
    cfg: &LossConfig,
    sched: &NoiseSchedule,
) -> Result<(f64, LossTerms)> {
    let mut g = CompGraph::new();
    let ids: Vec<NodeId> = net.params().iter().map(|p| g.input(p.clone())).collect();
    let terms = build_pref_loss(&mut g, &ids, net, reference, batch, method, cfg, sched, None)?;
    Ok((g.value(terms.loss).item(), terms))
}
