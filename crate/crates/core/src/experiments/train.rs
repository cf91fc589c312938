use std::io::Write;

use rand::seq::SliceRandom;

use crate::diffusion::{ddpm_sample, pretrain_step, DenoiserNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::experiments::diagnostics::{DensityProbe, DensityTrace};
use crate::experiments::pairs::{gen_pairs, PreferencePair};
use crate::experiments::target::{mean_reward, ToyTarget};
use crate::losses::{pref_loss_and_grads, LossConfig, Method, PrefBatchStep};
use crate::numerics::{AdamConfig, AdamState, DenseArray};
use crate::rng::{self, Rng};
use crate::weights::WeightReport;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 256,
            learning_rate: 2e-3,
        }
    }
}

/// ε-prediction training on fresh mixture draws with random conditions.
/// The learning rate decays linearly to a tenth. Returns per-step losses.
pub fn pretrain(
    net: &mut DenoiserNet,
    target: &ToyTarget,
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if net.config().data_dim != target.dim() || net.config().n_conditions < target.n_conditions() {
        return Err(Error::Argument("network does not match the target".into()));
    }
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), net.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        adam.config.learning_rate = cfg.learning_rate * (1.0 - 0.9 * k as f64 / cfg.steps as f64);
        let x0 = target.sample(cfg.batch_size, rng);
        let conds = target.sample_conditions(cfg.batch_size, rng);
        losses.push(pretrain_step(net, &mut adam, &x0, &conds, sched, rng)?);
    }
    Ok(losses)
}

/// Mean oracle reward of `n` fresh samples at uniformly random conditions.
pub fn evaluate_reward(
    net: &DenoiserNet,
    target: &ToyTarget,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let conds = target.sample_conditions(n, rng);
    let x = ddpm_sample(net, &conds, sched, rng)?;
    mean_reward(target, &conds, &x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub method: Method,
    pub loss: LossConfig,
    pub steps: usize,
    /// Pairs per optimizer step; all of them share one timestep.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Density-trace cadence in steps; 0 disables the trace.
    pub diagnostics_every: usize,
    pub density_windows: Vec<(usize, usize)>,
    pub density_pairs: usize,
}

impl AlignConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            loss: LossConfig::for_method(method),
            steps: 1000,
            batch_size: 64,
            learning_rate: 1e-4,
            diagnostics_every: 50,
            density_windows: vec![(500, 600)],
            density_pairs: 128,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.loss.validate(sched.steps())?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        for &(lo, hi) in &self.density_windows {
            if !(1 <= lo && lo < hi && hi <= sched.steps()) {
                return Err(Error::config("density_windows", format!("bad window [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Timesteps drawn during training. `t = 1` is excluded because its
    /// posterior variance is degenerate.
    pub fn t_range(&self, sched: &NoiseSchedule) -> (usize, usize) {
        let (lo, hi) = self.loss.t_range(sched.steps());
        (lo.max(2), hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub t: usize,
    pub loss: f64,
    pub logit: f64,
    pub w_raw: f64,
    pub w_clipped: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub run_id: String,
    pub method: Method,
    pub beta: f64,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 9] = ["run_id", "step", "t", "method", "loss", "logit", "w_raw", "w_clipped", "beta"];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                self.run_id.clone(),
                r.step.to_string(),
                r.t.to_string(),
                self.method.to_string(),
                r.loss.to_string(),
                r.logit.to_string(),
                r.w_raw.to_string(),
                r.w_clipped.to_string(),
                self.beta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub log: TrainingLog,
    pub weights: WeightReport,
    pub density: DensityTrace,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Preference fine-tuning of `net` against the frozen `ref_net`.
///
/// Pairs are visited in reshuffled epochs, `batch_size` per step, and every
/// step draws one `t` for the whole batch. The log holds batch means; the
/// weight report holds the first pair's winner and loser weights per step.
pub fn align(
    net: &mut DenoiserNet,
    ref_net: &DenoiserNet,
    pairs: &[PreferencePair],
    cfg: &AlignConfig,
    sched: &NoiseSchedule,
    run_id: &str,
    rng: &mut Rng,
) -> Result<AlignOutcome> {
    align_with(net, ref_net, pairs, cfg, sched, run_id, rng, &mut |_, _| Ok(()))
}

/// [`align`] calling `observe(step, net)` after every optimizer step.
/// The observer must not draw from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn align_with(
    net: &mut DenoiserNet,
    ref_net: &DenoiserNet,
    pairs: &[PreferencePair],
    cfg: &AlignConfig,
    sched: &NoiseSchedule,
    run_id: &str,
    rng: &mut Rng,
    observe: &mut dyn FnMut(usize, &DenoiserNet) -> Result<()>,
) -> Result<AlignOutcome> {
    cfg.validate(sched)?;
    if net.config() != ref_net.config() {
        return Err(Error::Argument("policy and reference architectures differ".into()));
    }
    let mut log = TrainingLog {
        run_id: run_id.to_string(),
        method: cfg.method,
        beta: cfg.loss.beta,
        rows: Vec::with_capacity(cfg.steps),
    };
    let mut weights = WeightReport::new(run_id);
    let mut density = DensityTrace::new(run_id);
    if cfg.steps == 0 {
        return Ok(AlignOutcome { log, weights, density });
    }
    if pairs.is_empty() {
        return Err(Error::Argument("no preference pairs".into()));
    }

    let mut probe_rng = rng::fork(rng, 1);
    let probes = if cfg.diagnostics_every > 0 {
        cfg.density_windows
            .iter()
            .map(|&(lo, hi)| DensityProbe::new(pairs, lo, hi, cfg.density_pairs, ref_net, sched, &mut probe_rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let trace = |step: usize, net: &DenoiserNet, density: &mut DensityTrace| -> Result<()> {
        for p in &probes {
            density.rows.push(p.evaluate(step, net, sched)?);
        }
        Ok(())
    };
    trace(0, net, &mut density)?;

    let (t_lo, t_hi) = cfg.t_range(sched);
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), net.params());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=cfg.steps {
        let t = rng::uniform_inclusive(rng, t_lo, t_hi);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(rng);
                cursor = 0;
            }
            let p = &pairs[order[cursor]];
            cursor += 1;
            batch.push(PrefBatchStep::draw(
                p.cond,
                t,
                DenseArray::vector(p.x0_w.clone()),
                DenseArray::vector(p.x0_l.clone()),
                sched,
                rng,
            )?);
        }
        let (loss, terms, grads) = pref_loss_and_grads(net, ref_net, &batch, cfg.method, &cfg.loss, sched)?;
        weights.push(step, terms.weights[0].winner);
        weights.push(step, terms.weights[0].loser);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                t,
                report: Box::new(weights),
            });
        }
        log.rows.push(LogRow {
            step,
            t,
            loss,
            logit: terms.mean_logit(),
            w_raw: mean(terms.weights.iter().map(|w| w.winner.raw)),
            w_clipped: mean(terms.weights.iter().map(|w| w.winner.clipped)),
        });
        let names: Vec<String> = (0..grads.len()).map(|i| net.param_name(i)).collect();
        adam.step(net.params_mut(), &grads, &|i| names[i].clone())?;
        if cfg.diagnostics_every > 0 && step % cfg.diagnostics_every == 0 {
            trace(step, net, &mut density)?;
        }
        observe(step, net)?;
    }
    Ok(AlignOutcome { log, weights, density })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterateConfig {
    pub rounds: usize,
    pub pairs_per_round: usize,
    pub epochs: usize,
    pub eval_samples: usize,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            pairs_per_round: 1000,
            epochs: 20,
            eval_samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetric {
    pub round: usize,
    pub pairs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub mean_reward: f64,
}

/// Columns: `run_id,round,pairs,steps,final_loss,mean_reward`; round 0 is
/// the starting model.
pub fn write_rounds_csv<W: Write>(run_id: &str, rounds: &[RoundMetric], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "round", "pairs", "steps", "final_loss", "mean_reward"])?;
    for r in rounds {
        w.write_record([
            run_id.to_string(),
            r.round.to_string(),
            r.pairs.to_string(),
            r.steps.to_string(),
            r.final_loss.to_string(),
            r.mean_reward.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rounds of: fresh on-policy pairs from the current model, `epochs` passes
/// of [`align`] over them against the fixed `ref_net`, then the mean oracle
/// reward of fresh samples. `align_cfg.steps` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn iterative_align(
    net: &mut DenoiserNet,
    ref_net: &DenoiserNet,
    target: &ToyTarget,
    cfg: &IterateConfig,
    align_cfg: &AlignConfig,
    sched: &NoiseSchedule,
    run_id: &str,
    rng: &mut Rng,
) -> Result<Vec<RoundMetric>> {
    if cfg.rounds == 0 {
        return Err(Error::config("rounds", "must be >= 1"));
    }
    if cfg.pairs_per_round == 0 || cfg.epochs == 0 {
        return Err(Error::config("pairs_per_round", "pairs and epochs must be >= 1"));
    }
    let steps = (cfg.epochs * cfg.pairs_per_round).div_ceil(align_cfg.batch_size.max(1));
    let round_cfg = AlignConfig {
        steps,
        diagnostics_every: 0,
        ..align_cfg.clone()
    };
    let mut eval_rng = rng::fork(rng, 2);
    let mut out = vec![RoundMetric {
        round: 0,
        pairs: 0,
        steps: 0,
        final_loss: f64::NAN,
        mean_reward: evaluate_reward(net, target, cfg.eval_samples, sched, &mut eval_rng)?,
    }];
    for round in 1..=cfg.rounds {
        let pairs = gen_pairs(net, target, cfg.pairs_per_round, sched, rng)?;
        let res = align(net, ref_net, &pairs, &round_cfg, sched, run_id, rng)?;
        let final_loss = res.log.rows.last().map_or(f64::NAN, |r| r.loss);
        out.push(RoundMetric {
            round,
            pairs: pairs.len(),
            steps,
            final_loss,
            mean_reward: evaluate_reward(net, target, cfg.eval_samples, sched, &mut eval_rng)?,
        });
    }
    Ok(out)
}
