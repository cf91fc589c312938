//! Stochastic sampling for interpolant flows.
//!
//! The path `x_t = α(t)·x_1 + β(t)·z` runs from noise (`t = 0`) to data
//! (`t = 1`). Given a denoiser `η(t, x) ≈ E[z | x_t = x]`, the flow is turned
//! into an SDE with diffusion `ε(t)` and integrated with Euler–Maruyama on a
//! clamped time grid.

use std::io::Write;

use crate::diffusion::{DenoiserNet, NetConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, CompGraph, DenseArray, NodeId};
use crate::rng::{self, Rng};

pub const DEFAULT_T_LO: f64 = 1e-3;
pub const DEFAULT_T_HI: f64 = 1.0 - 1e-3;

/// Interpolation schedules and the diffusion schedule.
pub trait Interpolant {
    fn alpha(&self, t: f64) -> f64;
    fn beta(&self, t: f64) -> f64;
    fn alpha_dot(&self, t: f64) -> f64;
    fn beta_dot(&self, t: f64) -> f64;
    /// Non-negative diffusion coefficient.
    fn epsilon(&self, t: f64) -> f64;
}

/// `α(t) = t`, `β(t) = 1 − t`, constant `ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearInterpolant {
    pub epsilon: f64,
}

impl Interpolant for LinearInterpolant {
    fn alpha(&self, t: f64) -> f64 {
        t
    }
    fn beta(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn alpha_dot(&self, _t: f64) -> f64 {
        1.0
    }
    fn beta_dot(&self, _t: f64) -> f64 {
        -1.0
    }
    fn epsilon(&self, _t: f64) -> f64 {
        self.epsilon
    }
}

/// `α(t) = sin(πt/2)`, `β(t) = cos(πt/2)`, constant `ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrigInterpolant {
    pub epsilon: f64,
}

impl Interpolant for TrigInterpolant {
    fn alpha(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }
    fn beta(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).cos()
    }
    fn alpha_dot(&self, t: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos()
    }
    fn beta_dot(&self, t: f64) -> f64 {
        -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
    }
    fn epsilon(&self, _t: f64) -> f64 {
        self.epsilon
    }
}

/// Algebraic form of the drift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DriftForm {
    /// `α̇·η + (β̇/β)·(x − α·η) − (ε/α)·η`.
    Printed,
    /// As `Printed` with `β` in the denominator of the last term.
    PrintedBetaDenominator,
    /// `α̇·(x − β·η)/α + β̇·η − (ε/β)·η`: the interpolant velocity written
    /// through `E[x_1 | x] = (x − β·η)/α`, plus `ε` times the score `−η/β`.
    /// Keeps the marginals of the path for any `ε ≥ 0`.
    #[default]
    Interpolant,
}

impl DriftForm {
    pub fn name(self) -> &'static str {
        match self {
            DriftForm::Printed => "printed",
            DriftForm::PrintedBetaDenominator => "printed-beta",
            DriftForm::Interpolant => "interpolant",
        }
    }
}

impl std::str::FromStr for DriftForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(DriftForm::Printed),
            "printed-beta" => Ok(DriftForm::PrintedBetaDenominator),
            "interpolant" => Ok(DriftForm::Interpolant),
            other => Err(Error::Argument(format!(
                "unknown drift form `{other}` (expected printed, printed-beta or interpolant)"
            ))),
        }
    }
}

/// A denoiser field `η(t, x)` over a batch of rows.
pub trait Denoiser {
    fn dim(&self) -> usize;
    fn eta(&self, t: f64, x: &DenseArray) -> Result<DenseArray>;
}

type EtaFn = dyn Fn(f64, &DenseArray) -> Result<DenseArray> + Send + Sync;

pub struct FnDenoiser {
    dim: usize,
    f: Box<EtaFn>,
}

impl FnDenoiser {
    pub fn new(dim: usize, f: impl Fn(f64, &DenseArray) -> Result<DenseArray> + Send + Sync + 'static) -> Self {
        Self { dim, f: Box::new(f) }
    }
}

impl Denoiser for FnDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eta(&self, t: f64, x: &DenseArray) -> Result<DenseArray> {
        (self.f)(t, x)
    }
}

/// Exact `E[z | x_t = x] = β·x/(α² + β²)` when the data are `N(0, I)`.
pub struct GaussianDenoiser<I> {
    pub dim: usize,
    pub interpolant: I,
}

impl<I: Interpolant> Denoiser for GaussianDenoiser<I> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eta(&self, t: f64, x: &DenseArray) -> Result<DenseArray> {
        let (a, b) = (self.interpolant.alpha(t), self.interpolant.beta(t));
        Ok(x.scale(b / (a * a + b * b)))
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn nonzero(v: f64, what: &str, t: f64) -> Result<f64> {
    if v.abs() < 1e-300 {
        return Err(Error::Domain(format!("{what}({t}) = 0; clamp t away from the endpoints")));
    }
    Ok(v)
}

/// SDE drift at time `t` for the rows of `x`.
pub fn drift_field(
    t: f64,
    x: &DenseArray,
    eta: &dyn Denoiser,
    interp: &dyn Interpolant,
    form: DriftForm,
) -> Result<DenseArray> {
    check_time(t)?;
    let e = eta.eta(t, x)?;
    if e.shape() != x.shape() {
        return Err(Error::Shape(format!("denoiser returned {:?} for {:?}", e.shape(), x.shape())));
    }
    let (a, b) = (interp.alpha(t), interp.beta(t));
    let (ad, bd) = (interp.alpha_dot(t), interp.beta_dot(t));
    let eps = interp.epsilon(t);
    match form {
        DriftForm::Printed | DriftForm::PrintedBetaDenominator => {
            let b_inv = 1.0 / nonzero(b, "beta", t)?;
            let last = match form {
                DriftForm::Printed => eps / nonzero(a, "alpha", t)?,
                _ => eps * b_inv,
            };
            x.zip_map(&e, |xv, ev| ad * ev + bd * b_inv * (xv - a * ev) - last * ev)
        }
        DriftForm::Interpolant => {
            let a_inv = 1.0 / nonzero(a, "alpha", t)?;
            let b_inv = 1.0 / nonzero(b, "beta", t)?;
            x.zip_map(&e, |xv, ev| ad * (xv - b * ev) * a_inv + bd * ev - eps * b_inv * ev)
        }
    }
}

/// `x + b·dt + sqrt(2·ε·dt)·ξ`.
pub fn em_step(x: &DenseArray, dt: f64, b: &DenseArray, eps_t: f64, xi: &DenseArray) -> Result<DenseArray> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    if !(eps_t >= 0.0) {
        return Err(Error::Argument(format!("diffusion coefficient must be >= 0, got {eps_t}")));
    }
    if b.shape() != x.shape() || xi.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "x {:?}, drift {:?}, noise {:?}",
            x.shape(),
            b.shape(),
            xi.shape()
        )));
    }
    let noise = (2.0 * eps_t * dt).sqrt();
    let mut out = x.clone();
    for ((o, bv), z) in out.data_mut().iter_mut().zip(b.data()).zip(xi.data()) {
        *o += bv * dt + noise * z;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdeConfig {
    pub n_steps: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub drift: DriftForm,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            t_lo: DEFAULT_T_LO,
            t_hi: DEFAULT_T_HI,
            drift: DriftForm::Interpolant,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::config("n_steps", format!("must be >= 2, got {}", self.n_steps)));
        }
        if !(0.0 < self.t_lo && self.t_lo < self.t_hi && self.t_hi < 1.0) {
            return Err(Error::config(
                "t_lo",
                format!("need 0 < t_lo < t_hi < 1, got [{}, {}]", self.t_lo, self.t_hi),
            ));
        }
        Ok(())
    }
}

/// States of selected paths along the time grid, exported as
/// `run_id,path_id,t,x0,x1,...`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathTrace {
    pub max_paths: usize,
    pub rows: Vec<(usize, f64, Vec<f64>)>,
}

impl PathTrace {
    pub fn new(max_paths: usize) -> Self {
        Self {
            max_paths,
            rows: Vec::new(),
        }
    }

    fn record(&mut self, t: f64, x: &DenseArray) {
        for p in 0..self.max_paths.min(x.rows()) {
            self.rows.push((p, t, x.row(p).to_vec()));
        }
    }

    pub fn write_csv<W: Write>(&self, run_id: &str, dim: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["run_id".to_string(), "path_id".into(), "t".into()];
        header.extend((0..dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (p, t, x) in &self.rows {
            let mut rec = vec![run_id.to_string(), p.to_string(), t.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrates from `x_init` at `t_lo` to `t_hi` on a uniform grid.
pub fn sde_integrate(
    x_init: &DenseArray,
    eta: &dyn Denoiser,
    interp: &dyn Interpolant,
    cfg: &SdeConfig,
    rng: &mut Rng,
    mut trace: Option<&mut PathTrace>,
) -> Result<DenseArray> {
    cfg.validate()?;
    let dt = (cfg.t_hi - cfg.t_lo) / cfg.n_steps as f64;
    let mut x = x_init.clone();
    if let Some(tr) = trace.as_deref_mut() {
        tr.record(cfg.t_lo, &x);
    }
    for k in 0..cfg.n_steps {
        let t = cfg.t_lo + k as f64 * dt;
        let b = drift_field(t, &x, eta, interp, cfg.drift)?;
        let eps_t = interp.epsilon(t);
        let xi = if eps_t > 0.0 {
            rng::normal_array(rng, x.shape())
        } else {
            DenseArray::zeros(x.shape())
        };
        x = em_step(&x, dt, &b, eps_t, &xi)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.record(cfg.t_lo + (k + 1) as f64 * dt, &x);
        }
    }
    Ok(x)
}

/// Draws `n_paths` starting points from `N(0, I)` and integrates them.
pub fn sde_sample(
    eta: &dyn Denoiser,
    interp: &dyn Interpolant,
    cfg: &SdeConfig,
    n_paths: usize,
    rng: &mut Rng,
    trace: Option<&mut PathTrace>,
) -> Result<DenseArray> {
    if n_paths == 0 {
        return Err(Error::Argument("nothing to sample".into()));
    }
    let x0 = rng::normal_array(rng, &[n_paths, eta.dim()]);
    sde_integrate(&x0, eta, interp, cfg, rng, trace)
}

/// MLP denoiser over continuous time; wraps a single-condition [`DenoiserNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct EtaNet {
    net: DenoiserNet,
}

impl EtaNet {
    pub fn new(dim: usize, hidden: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        let cfg = NetConfig {
            data_dim: dim,
            hidden,
            depth,
            time_embed_dim: 8,
            n_conditions: 1,
            steps: 1,
        };
        Ok(Self {
            net: DenoiserNet::new(cfg, rng)?,
        })
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    fn features(&self, t: &[f64], x: &DenseArray) -> Result<DenseArray> {
        self.net.features_at(x, t, &vec![0; x.rows()])
    }

    fn loss_graph(&self, g: &mut CompGraph, ids: &[NodeId], batch: &EtaBatch) -> Result<NodeId> {
        let f = g.input(self.features(&batch.t, &batch.x_t)?);
        let out = self.net.forward_graph(g, ids, f)?;
        let neg_z = g.input(batch.z.scale(-1.0));
        let r = g.add(out, neg_z)?;
        let sq = g.square(r)?;
        let s = g.sum(sq, None)?;
        g.scale(s, 1.0 / batch.x_t.rows() as f64)
    }
}

impl Denoiser for EtaNet {
    fn dim(&self) -> usize {
        self.net.config().data_dim
    }
    fn eta(&self, t: f64, x: &DenseArray) -> Result<DenseArray> {
        self.net.forward(&self.features(&vec![t; x.rows()], x)?)
    }
}

struct EtaBatch {
    t: Vec<f64>,
    x_t: DenseArray,
    z: DenseArray,
}

impl EtaBatch {
    fn draw(samples: &DenseArray, interp: &dyn Interpolant, cfg: &EtaTrainConfig, rng: &mut Rng) -> Result<Self> {
        let (n, d) = (cfg.batch_size, samples.cols());
        let z = rng::normal_array(rng, &[n, d]);
        let mut t = Vec::with_capacity(n);
        let mut x_t = Vec::with_capacity(n * d);
        for i in 0..n {
            let ti = rng::uniform(rng, cfg.t_lo, cfg.t_hi);
            let x1 = samples.row(rng::uniform_index(rng, samples.rows()));
            let (a, b) = (interp.alpha(ti), interp.beta(ti));
            x_t.extend(x1.iter().zip(z.row(i)).map(|(x, zz)| a * x + b * zz));
            t.push(ti);
        }
        Ok(Self {
            t,
            x_t: DenseArray::matrix(n, d, x_t)?,
            z,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for EtaTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            learning_rate: 2e-3,
            t_lo: DEFAULT_T_LO,
            t_hi: DEFAULT_T_HI,
        }
    }
}

/// Mean of `‖η(t, α·x_1 + β·z) − z‖²` over one random batch.
pub fn denoiser_loss(
    eta: &dyn Denoiser,
    samples: &DenseArray,
    interp: &dyn Interpolant,
    cfg: &EtaTrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let batch = EtaBatch::draw(samples, interp, cfg, rng)?;
    let mut total = 0.0;
    for i in 0..batch.x_t.rows() {
        let row = DenseArray::matrix(1, batch.x_t.cols(), batch.x_t.row(i).to_vec())?;
        let out = eta.eta(batch.t[i], &row)?;
        total += out.data().iter().zip(batch.z.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / batch.x_t.rows() as f64)
}

/// Regresses `eta` onto the noise with Adam, learning rate decayed linearly to
/// a tenth of its initial value. Returns the per-step losses.
pub fn train_denoiser(
    eta: &mut EtaNet,
    samples: &DenseArray,
    interp: &dyn Interpolant,
    cfg: &EtaTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if samples.rank() != 2 || samples.cols() != eta.dim() {
        return Err(Error::Shape(format!("samples {:?} for dimension {}", samples.shape(), eta.dim())));
    }
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), eta.net.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        adam.config.learning_rate = cfg.learning_rate * (1.0 - 0.9 * k as f64 / cfg.steps as f64);
        let batch = EtaBatch::draw(samples, interp, cfg, rng)?;
        let (loss, grads) = {
            let me: &EtaNet = eta;
            crate::numerics::forward_backward(me.net.params(), |g, ids| me.loss_graph(g, ids, &batch))?
        };
        let names: Vec<String> = (0..grads.len()).map(|i| eta.net.param_name(i)).collect();
        adam.step(eta.net.params_mut(), &grads, &|i| names[i].clone())?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(eps: f64) -> LinearInterpolant {
        LinearInterpolant { epsilon: eps }
    }

    fn zero_eta(dim: usize) -> FnDenoiser {
        FnDenoiser::new(dim, |_, x| Ok(DenseArray::zeros(x.shape())))
    }

    #[test]
    fn printed_drift_examples() {
        let x = DenseArray::matrix(1, 2, vec![0.7, -1.3]).unwrap();
        let b = drift_field(0.3, &x, &zero_eta(2), &lin(0.0), DriftForm::Printed).unwrap();
        let k = -1.0 / 0.7;
        assert!((b.data()[0] - k * 0.7).abs() < 1e-15 && (b.data()[1] - k * -1.3).abs() < 1e-15);

        let one = FnDenoiser::new(1, |_, x| Ok(DenseArray::full(x.shape(), 1.0)));
        let x = DenseArray::matrix(1, 1, vec![1.0]).unwrap();
        for form in [DriftForm::Printed, DriftForm::PrintedBetaDenominator, DriftForm::Interpolant] {
            let b = drift_field(0.5, &x, &one, &lin(0.0), form).unwrap();
            assert!(b.data()[0].abs() < 1e-15, "{form:?}");
        }
    }

    #[test]
    fn drift_is_affine_in_eta() {
        let mut r = rng::seeded(1);
        let x = rng::normal_array(&mut r, &[5, 3]);
        let a1 = rng::normal_array(&mut r, &[5, 3]);
        let a2 = rng::normal_array(&mut r, &[5, 3]);
        let sum = a1.zip_map(&a2, |a, b| a + b).unwrap();
        let mk = |v: DenseArray| FnDenoiser::new(3, move |_, _| Ok(v.clone()));
        for form in [DriftForm::Printed, DriftForm::PrintedBetaDenominator, DriftForm::Interpolant] {
            let d = |e: &FnDenoiser| drift_field(0.37, &x, e, &lin(0.4), form).unwrap();
            let (d12, d1, d2, d0) = (d(&mk(sum.clone())), d(&mk(a1.clone())), d(&mk(a2.clone())), d(&zero_eta(3)));
            for i in 0..15 {
                let v = d12.data()[i] - d1.data()[i] - d2.data()[i] + d0.data()[i];
                assert!(v.abs() < 1e-12, "{form:?}: {v}");
            }
        }
    }

    #[test]
    fn endpoints_are_domain_errors() {
        let x = DenseArray::matrix(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            drift_field(1.0, &x, &zero_eta(1), &lin(0.1), DriftForm::Printed),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            drift_field(0.0, &x, &zero_eta(1), &lin(0.1), DriftForm::Interpolant),
            Err(Error::Domain(_))
        ));
        assert!(drift_field(1.5, &x, &zero_eta(1), &lin(0.1), DriftForm::Interpolant).is_err());
    }

    #[test]
    fn em_step_examples() {
        let x = DenseArray::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let z = DenseArray::zeros(&[1, 2]);
        let xi = DenseArray::full(&[1, 2], 3.0);
        assert_eq!(em_step(&x, 0.1, &z, 0.0, &xi).unwrap(), x);
        let c = DenseArray::full(&[1, 2], 2.0);
        let y = em_step(&x, 0.1, &c, 0.0, &xi).unwrap();
        assert!((y.data()[0] - 1.2).abs() < 1e-15);
        assert!(em_step(&x, 0.1, &z, -1.0, &xi).is_err());
        assert!(em_step(&x, 0.0, &z, 0.0, &xi).is_err());
    }

    #[test]
    fn deterministic_without_noise() {
        let g = GaussianDenoiser {
            dim: 2,
            interpolant: lin(0.0),
        };
        let x0 = rng::normal_array(&mut rng::seeded(3), &[4, 2]);
        let cfg = SdeConfig::default();
        let a = sde_integrate(&x0, &g, &lin(0.0), &cfg, &mut rng::seeded(1), None).unwrap();
        let b = sde_integrate(&x0, &g, &lin(0.0), &cfg, &mut rng::seeded(2), None).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_path() {
        let g = GaussianDenoiser {
            dim: 2,
            interpolant: lin(0.3),
        };
        let cfg = SdeConfig::default();
        let mut t1 = PathTrace::new(2);
        let mut t2 = PathTrace::new(2);
        let a = sde_sample(&g, &lin(0.3), &cfg, 8, &mut rng::seeded(5), Some(&mut t1)).unwrap();
        let b = sde_sample(&g, &lin(0.3), &cfg, 8, &mut rng::seeded(5), Some(&mut t2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(t1, t2);
        assert_eq!(t1.rows.len(), 2 * (cfg.n_steps + 1));
    }

    #[test]
    fn trace_csv_header() {
        let mut tr = PathTrace::new(1);
        tr.record(0.5, &DenseArray::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let mut buf = Vec::new();
        tr.write_csv("r", 2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "run_id,path_id,t,x0,x1\nr,0,0.5,1,2\n");
    }

    #[test]
    fn zero_denoiser_loss_is_dimension() {
        let samples = rng::normal_array(&mut rng::seeded(7), &[1000, 2]);
        let cfg = EtaTrainConfig {
            batch_size: 50_000,
            ..Default::default()
        };
        let v = denoiser_loss(&zero_eta(2), &samples, &lin(0.0), &cfg, &mut rng::seeded(8)).unwrap();
        assert!((v / 2.0 - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn parse_drift_form() {
        for f in [DriftForm::Printed, DriftForm::PrintedBetaDenominator, DriftForm::Interpolant] {
            assert_eq!(f.name().parse::<DriftForm>().unwrap(), f);
        }
    }
}
