use crate::diffusion::gaussian::reverse_mean;
use crate::diffusion::net::{DenoiserNet, NoisePredictor};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, CompGraph, DenseArray, NodeId};
use crate::rng::{self, Rng};

/// Ancestral sampling: starts from `x_T ~ N(0, I)` and draws
/// `x_{t−1} ~ p_θ(· | x_t, c)` down to t = 1, whose step returns the mean.
/// One row of output per entry of `conds`.
pub fn ddpm_sample(
    model: &dyn NoisePredictor,
    conds: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DenseArray> {
    if conds.is_empty() {
        return Err(Error::Argument("nothing to sample".into()));
    }
    let n = conds.len();
    let dim = model.data_dim();
    let mut x = rng::normal_array(rng, &[n, dim]);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&x, &vec![t; n], conds)?;
        let mean = reverse_mean(&x, &eps, t, sched)?;
        if t > 1 {
            let sd = sched.posterior_variance(t).sqrt();
            let z = rng::normal_array(rng, &[n, dim]);
            x = mean.zip_map(&z, |m, e| m + sd * e)?;
        } else {
            x = mean;
        }
    }
    Ok(x)
}

/// Noise and timesteps drawn for one ε-prediction minibatch.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: DenseArray,
}

impl NoiseDraw {
    pub fn sample(n: usize, dim: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Self {
        let t = (0..n).map(|_| rng::uniform_inclusive(rng, 1, sched.steps())).collect();
        let eps = rng::normal_array(rng, &[n, dim]);
        Self { t, eps }
    }

    /// Row-wise `x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
    pub fn noised(&self, x0: &DenseArray, sched: &NoiseSchedule) -> Result<DenseArray> {
        if x0.shape() != self.eps.shape() {
            return Err(Error::Shape(format!("{:?} vs noise {:?}", x0.shape(), self.eps.shape())));
        }
        let mut out = x0.clone();
        for (i, &t) in self.t.iter().enumerate() {
            sched.check_t(t)?;
            let ab = sched.alpha_bar(t);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (o, e) in out.row_mut(i).iter_mut().zip(self.eps.row(i)) {
                *o = a * *o + s * e;
            }
        }
        Ok(out)
    }
}

/// Mean over the batch of `‖ε − ε̂(x_t, t, c)‖²` for any predictor.
pub fn pretrain_loss_with(
    model: &dyn NoisePredictor,
    x0: &DenseArray,
    conds: &[usize],
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let xt = draw.noised(x0, sched)?;
    let pred = model.predict(&xt, &draw.t, conds)?;
    let sq = pred.zip_map(&draw.eps, |a, b| (a - b) * (a - b))?;
    Ok(sq.sum() / x0.rows() as f64)
}

/// ε-prediction loss with fresh `t ~ U{1..T}` and `ε ~ N(0, I)`.
pub fn pretrain_loss(
    net: &dyn NoisePredictor,
    x0: &DenseArray,
    conds: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = NoiseDraw::sample(x0.rows(), x0.cols(), sched, rng);
    pretrain_loss_with(net, x0, conds, &draw, sched)
}

/// Records the ε-prediction loss on `graph`.
pub fn pretrain_loss_graph(
    graph: &mut CompGraph,
    params: &[NodeId],
    net: &DenoiserNet,
    x0: &DenseArray,
    conds: &[usize],
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let xt = draw.noised(x0, sched)?;
    let feats = graph.input(net.features(&xt, &draw.t, conds)?);
    let pred = net.forward_graph(graph, params, feats)?;
    let target = graph.input(draw.eps.scale(-1.0));
    let resid = graph.add(pred, target)?;
    let sq = graph.square(resid)?;
    let total = graph.sum(sq, None)?;
    graph.scale(total, 1.0 / x0.rows() as f64)
}

/// One Adam step on the ε-prediction loss. Returns the pre-update loss.
pub fn pretrain_step(
    net: &mut DenoiserNet,
    adam: &mut AdamState,
    x0: &DenseArray,
    conds: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = NoiseDraw::sample(x0.rows(), x0.cols(), sched, rng);
    let (loss, grads) = {
        let net_ref: &DenoiserNet = net;
        crate::numerics::forward_backward(net_ref.params(), |g, ids| {
            pretrain_loss_graph(g, ids, net_ref, x0, conds, &draw, sched)
        })?
    };
    let names = |i: usize| net.param_name(i);
    let names_owned: Vec<String> = (0..net.params().len()).map(names).collect();
    adam.step(net.params_mut(), &grads, &|i| names_owned[i].clone())?;
    Ok(loss)
}
