use std::io::Write;

use crate::diffusion::{log_density_slice, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::experiments::pairs::PreferencePair;
use crate::numerics::DenseArray;
use crate::rng::{self, Rng};
use crate::weights::{posterior_point, reverse_mean_slice, step_weight_row, ClipConfig, StepWeight};

/// Samples with their noising draws fixed, so the same probe can be
/// re-evaluated as the model changes.
#[derive(Clone, Debug)]
pub struct Probe {
    pub t: Vec<usize>,
    pub cond: Vec<usize>,
    pub x0: DenseArray,
    pub x_t: DenseArray,
    pub xi: DenseArray,
}

impl Probe {
    /// Noises each row of `x0` at its own `t` with fresh draws from `rng`.
    pub fn new(x0: DenseArray, cond: Vec<usize>, t: Vec<usize>, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        let (n, d) = (x0.rows(), x0.cols());
        if cond.len() != n || t.len() != n {
            return Err(Error::Shape(format!("{n} samples, {} conditions, {} timesteps", cond.len(), t.len())));
        }
        let eps = rng::normal_array(rng, &[n, d]);
        let xi = rng::normal_array(rng, &[n, d]);
        let mut x_t = x0.clone();
        for i in 0..n {
            sched.check_t(t[i])?;
            let ab = sched.alpha_bar(t[i]);
            for (o, e) in x_t.row_mut(i).iter_mut().zip(eps.row(i)) {
                *o = ab.sqrt() * *o + (1.0 - ab).sqrt() * e;
            }
        }
        Ok(Self { t, cond, x0, x_t, xi })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Importance weights of `model` against the forward posterior, one per row.
    pub fn weights(&self, model: &dyn NoisePredictor, sched: &NoiseSchedule, clip: &ClipConfig) -> Result<Vec<StepWeight>> {
        let eps = model.predict(&self.x_t, &self.t, &self.cond)?;
        (0..self.len())
            .map(|i| {
                if self.t[i] < 2 {
                    return Err(Error::Argument("importance weights need t >= 2".into()));
                }
                step_weight_row(self.x0.row(i), self.x_t.row(i), eps.row(i), None, self.xi.row(i), self.t[i], sched, clip)
            })
            .collect()
    }

    /// `log p(x_{t−1} | x_t)` under `model` at the posterior draw of each row.
    pub fn log_densities(&self, model: &dyn NoisePredictor, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let eps = model.predict(&self.x_t, &self.t, &self.cond)?;
        Ok((0..self.len())
            .map(|i| {
                let t = self.t[i];
                let x_prev = posterior_point(self.x0.row(i), self.x_t.row(i), Some(self.xi.row(i)), t, sched);
                let mean = reverse_mean_slice(self.x_t.row(i), eps.row(i), t, sched);
                log_density_slice(&x_prev, &mean, sched.posterior_variance(t))
            })
            .collect())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> Result<DenseArray> {
    let data: Vec<f64> = rows.flatten().collect();
    DenseArray::matrix(data.len() / dim.max(1), dim, data)
}

/// One row of the density trace.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityRow {
    pub step: usize,
    pub t_lo: usize,
    pub t_hi: usize,
    /// Mean log-density over winner samples.
    pub logp_w: f64,
    pub logp_l: f64,
    /// Mean of `log p_θ − log p_ref` over winners minus the same over losers;
    /// exactly zero while θ equals the reference.
    pub margin: f64,
}

/// Winner and loser probes for one timestep window.
#[derive(Clone, Debug)]
pub struct DensityProbe {
    pub t_lo: usize,
    pub t_hi: usize,
    winners: Probe,
    losers: Probe,
    ref_w: Vec<f64>,
    ref_l: Vec<f64>,
}

impl DensityProbe {
    /// Uses up to `max_pairs` pairs; each pair shares one `t ~ U{t_lo..t_hi}`.
    pub fn new(
        pairs: &[PreferencePair],
        t_lo: usize,
        t_hi: usize,
        max_pairs: usize,
        reference: &dyn NoisePredictor,
        sched: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(1 <= t_lo && t_lo < t_hi && t_hi <= sched.steps()) {
            return Err(Error::Argument(format!("bad density window [{t_lo}, {t_hi}]")));
        }
        let used = &pairs[..pairs.len().min(max_pairs)];
        if used.is_empty() {
            return Err(Error::Argument("density trace needs at least one pair".into()));
        }
        let dim = used[0].x0_w.len();
        let t: Vec<usize> = used.iter().map(|_| rng::uniform_inclusive(rng, t_lo, t_hi)).collect();
        let cond: Vec<usize> = used.iter().map(|p| p.cond).collect();
        let winners = Probe::new(stack(used.iter().map(|p| p.x0_w.clone()), dim)?, cond.clone(), t.clone(), sched, rng)?;
        let losers = Probe::new(stack(used.iter().map(|p| p.x0_l.clone()), dim)?, cond, t, sched, rng)?;
        let ref_w = winners.log_densities(reference, sched)?;
        let ref_l = losers.log_densities(reference, sched)?;
        Ok(Self {
            t_lo,
            t_hi,
            winners,
            losers,
            ref_w,
            ref_l,
        })
    }

    pub fn evaluate(&self, step: usize, model: &dyn NoisePredictor, sched: &NoiseSchedule) -> Result<DensityRow> {
        let lw = self.winners.log_densities(model, sched)?;
        let ll = self.losers.log_densities(model, sched)?;
        let rel = |a: &[f64], b: &[f64]| mean(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        Ok(DensityRow {
            step,
            t_lo: self.t_lo,
            t_hi: self.t_hi,
            logp_w: mean(&lw),
            logp_l: mean(&ll),
            margin: rel(&lw, &self.ref_w) - rel(&ll, &self.ref_l),
        })
    }
}

/// Append-only trace, one row per (checkpoint, window).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityTrace {
    pub run_id: String,
    pub rows: Vec<DensityRow>,
}

impl DensityTrace {
    pub const HEADER: [&'static str; 8] = ["run_id", "step", "t_lo", "t_hi", "logp_w", "logp_l", "diff", "margin"];

    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                self.run_id.clone(),
                r.step.to_string(),
                r.t_lo.to_string(),
                r.t_hi.to_string(),
                r.logp_w.to_string(),
                r.logp_l.to_string(),
                (r.logp_w - r.logp_l).to_string(),
                r.margin.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Density trace of `model` on `pairs` at a single checkpoint.
pub fn density_trace(
    model: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    pairs: &[PreferencePair],
    t_lo: usize,
    t_hi: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DensityRow> {
    DensityProbe::new(pairs, t_lo, t_hi, pairs.len(), reference, sched, rng)?.evaluate(0, model, sched)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightBin {
    pub t_lo: usize,
    pub t_hi: usize,
    pub mean_raw: f64,
    pub mean_abs_log: f64,
    pub count: usize,
}

/// Bin edges splitting `[lo, hi]` into `bins` contiguous integer ranges.
pub fn bin_edges(lo: usize, hi: usize, bins: usize) -> Result<Vec<(usize, usize)>> {
    if bins < 2 || hi < lo || hi - lo + 1 < bins {
        return Err(Error::Argument(format!("cannot split [{lo}, {hi}] into {bins} bins")));
    }
    let width = (hi - lo + 1) as f64 / bins as f64;
    Ok((0..bins)
        .map(|b| {
            let a = lo + (b as f64 * width).round() as usize;
            let z = lo + ((b + 1) as f64 * width).round() as usize - 1;
            (a, z)
        })
        .collect())
}

/// Bins `[lo, 2lo−1], [2lo, 4lo−1], …` with the last one ending at `hi`.
pub fn log_bin_edges(lo: usize, hi: usize) -> Result<Vec<(usize, usize)>> {
    if lo == 0 || hi < 2 * lo {
        return Err(Error::Argument(format!("cannot split [{lo}, {hi}] into doubling bins")));
    }
    let mut edges = Vec::new();
    let mut a = lo;
    while a <= hi {
        let b = (2 * a - 1).min(hi);
        edges.push((a, b));
        a = b + 1;
    }
    Ok(edges)
}

/// Mean raw weight (and mean `|ln w|`) per timestep bin over `[2, T]`.
///
/// Each sample is drawn once per bin at a uniform `t` inside it; `t = 1` is
/// left out because the reverse step there is deterministic.
pub fn weight_curve(
    model: &dyn NoisePredictor,
    x0: &DenseArray,
    conds: &[usize],
    sched: &NoiseSchedule,
    bins: usize,
    rng: &mut Rng,
) -> Result<Vec<WeightBin>> {
    weight_curve_on(model, x0, conds, &bin_edges(2, sched.steps(), bins)?, sched, rng)
}

/// [`weight_curve`] on explicit bins.
pub fn weight_curve_on(
    model: &dyn NoisePredictor,
    x0: &DenseArray,
    conds: &[usize],
    edges: &[(usize, usize)],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<WeightBin>> {
    edges
        .iter()
        .map(|&(a, b)| window_weights(model, x0, conds, a, b, sched, rng))
        .collect()
}

/// Weight statistics for `x0` at timesteps drawn uniformly from `[t_lo, t_hi]`.
#[allow(clippy::too_many_arguments)]
pub fn window_weights(
    model: &dyn NoisePredictor,
    x0: &DenseArray,
    conds: &[usize],
    t_lo: usize,
    t_hi: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<WeightBin> {
    if t_lo < 2 || t_hi < t_lo || t_hi > sched.steps() {
        return Err(Error::Argument(format!("bad weight window [{t_lo}, {t_hi}]")));
    }
    let t: Vec<usize> = (0..x0.rows()).map(|_| rng::uniform_inclusive(rng, t_lo, t_hi)).collect();
    let probe = Probe::new(x0.clone(), conds.to_vec(), t, sched, rng)?;
    let ws = probe.weights(model, sched, &ClipConfig::default())?;
    let dim = x0.cols();
    Ok(WeightBin {
        t_lo,
        t_hi,
        mean_raw: mean(&ws.iter().map(|w| w.raw).collect::<Vec<_>>()),
        mean_abs_log: mean(&ws.iter().map(|w| w.log_ratio(dim).abs()).collect::<Vec<_>>()),
        count: ws.len(),
    })
}

/// Columns: `run_id,t_lo,t_hi,mean_raw,mean_abs_log,count`.
pub fn write_weight_curve_csv<W: Write>(run_id: &str, bins: &[WeightBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "t_lo", "t_hi", "mean_raw", "mean_abs_log", "count"])?;
    for b in bins {
        w.write_record([
            run_id.to_string(),
            b.t_lo.to_string(),
            b.t_hi.to_string(),
            b.mean_raw.to_string(),
            b.mean_abs_log.to_string(),
            b.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
