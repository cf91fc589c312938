use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{CompGraph, DenseArray, NodeId};
use crate::rng::{self, Rng};

/// Anything that predicts the noise ε from `(x_t, t, c)` for a batch.
///
/// `x_t` is `[n, dim]`; `t` and `cond` hold one entry per row.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict(&self, x_t: &DenseArray, t: &[usize], cond: &[usize]) -> Result<DenseArray>;
}

type PredictFn = dyn Fn(&DenseArray, &[usize], &[usize]) -> Result<DenseArray> + Send + Sync;

/// Wraps a closure as a [`NoisePredictor`]; used for analytic oracles.
pub struct FnPredictor {
    dim: usize,
    f: Box<PredictFn>,
}

impl FnPredictor {
    pub fn new(
        dim: usize,
        f: impl Fn(&DenseArray, &[usize], &[usize]) -> Result<DenseArray> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, f: Box::new(f) }
    }
}

impl NoisePredictor for FnPredictor {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x_t: &DenseArray, t: &[usize], cond: &[usize]) -> Result<DenseArray> {
        (self.f)(x_t, t, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Number of hidden tanh layers.
    pub depth: usize,
    /// Even number of sinusoidal features for the timestep.
    pub time_embed_dim: usize,
    pub n_conditions: usize,
    /// Total diffusion steps; the timestep is embedded as `t / steps`.
    pub steps: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 64,
            depth: 2,
            time_embed_dim: 16,
            n_conditions: 4,
            steps: 1000,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.data_dim) {
            return Err(Error::Argument(format!("data_dim {} outside 1..=16", self.data_dim)));
        }
        if self.hidden == 0 || self.depth == 0 || self.n_conditions == 0 || self.steps == 0 {
            return Err(Error::Argument("network sizes must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Argument(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.n_conditions
    }
}

/// Sinusoidal features of `t / steps` at geometrically spaced frequencies
/// between 1 and 200 radians per unit time.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    time_features(t as f64 / steps as f64, dim)
}

/// [`time_embedding`] for a time already scaled to `[0, 1]`.
pub fn time_features(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let omega = (200f64.ln() * frac).exp();
        out.push((omega * tau).sin());
        out.push((omega * tau).cos());
    }
    out
}

/// Fully connected ε-prediction network.
///
/// Input row: `[x_t, time embedding, one-hot condition]`; hidden layers use
/// tanh; the output has the data dimension. Parameters are stored as
/// `[W_0, b_0, …, W_out, b_out]` with `W_i` of shape `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: NetConfig,
    params: Vec<DenseArray>,
}

impl DenoiserNet {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut fan_in = config.input_dim();
        for layer in 0..=config.depth {
            let fan_out = if layer == config.depth { config.data_dim } else { config.hidden };
            let std = (1.0 / fan_in as f64).sqrt();
            params.push(rng::normal_array(rng, &[fan_in, fan_out]).scale(std));
            params.push(DenseArray::zeros(&[fan_out]));
            fan_in = fan_out;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: NetConfig, params: Vec<DenseArray>) -> Result<Self> {
        config.validate()?;
        let expected = Self::param_shapes(&config);
        if params.len() != expected.len() || params.iter().zip(&expected).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Shape(format!(
                "parameter shapes {:?} do not match {:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                expected
            )));
        }
        Ok(Self { config, params })
    }

    fn param_shapes(config: &NetConfig) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = config.input_dim();
        for layer in 0..=config.depth {
            let fan_out = if layer == config.depth { config.data_dim } else { config.hidden };
            shapes.push(vec![fan_in, fan_out]);
            shapes.push(vec![fan_out]);
            fan_in = fan_out;
        }
        shapes
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[DenseArray] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseArray] {
        &mut self.params
    }

    pub fn param_name(&self, index: usize) -> String {
        let layer = index / 2;
        let kind = if index % 2 == 0 { "weight" } else { "bias" };
        if layer == self.config.depth {
            format!("out.{kind}")
        } else {
            format!("hidden{layer}.{kind}")
        }
    }

    /// SHA-256 over the parameter bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for d in p.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Network input rows for a batch.
    pub fn features(&self, x_t: &DenseArray, t: &[usize], cond: &[usize]) -> Result<DenseArray> {
        let steps = self.config.steps as f64;
        let tau: Vec<f64> = t.iter().map(|&t| t as f64 / steps).collect();
        self.features_at(x_t, &tau, cond)
    }

    /// Input rows with the time given directly as a fraction `tau` of the horizon.
    pub fn features_at(&self, x_t: &DenseArray, tau: &[f64], cond: &[usize]) -> Result<DenseArray> {
        let cfg = &self.config;
        let n = x_t.rows();
        if x_t.rank() != 2 || x_t.cols() != cfg.data_dim || tau.len() != n || cond.len() != n {
            return Err(Error::Shape(format!(
                "x_t {:?} with {} timesteps and {} conditions (dim {})",
                x_t.shape(),
                tau.len(),
                cond.len(),
                cfg.data_dim
            )));
        }
        let width = cfg.input_dim();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            if cond[i] >= cfg.n_conditions {
                return Err(Error::Argument(format!(
                    "condition {} outside 0..{}",
                    cond[i], cfg.n_conditions
                )));
            }
            data.extend_from_slice(x_t.row(i));
            data.extend(time_features(tau[i], cfg.time_embed_dim));
            data.extend((0..cfg.n_conditions).map(|k| if k == cond[i] { 1.0 } else { 0.0 }));
        }
        DenseArray::new(vec![n, width], data)
    }

    /// Records the forward pass on `graph`; `params` are this network's
    /// parameters as graph nodes (in [`DenoiserNet::params`] order).
    pub fn forward_graph(&self, graph: &mut CompGraph, params: &[NodeId], features: NodeId) -> Result<NodeId> {
        let mut h = features;
        for layer in 0..=self.config.depth {
            h = graph.matmul(h, params[2 * layer])?;
            h = graph.add(h, params[2 * layer + 1])?;
            if layer < self.config.depth {
                h = graph.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass without recording; bit-identical to [`forward_graph`].
    ///
    /// [`forward_graph`]: DenoiserNet::forward_graph
    pub fn forward(&self, features: &DenseArray) -> Result<DenseArray> {
        let mut h = features.clone();
        for layer in 0..=self.config.depth {
            h = h.matmul(&self.params[2 * layer])?;
            let bias = self.params[2 * layer + 1].data();
            let cols = h.cols();
            for row in h.data_mut().chunks_mut(cols) {
                for (o, &b) in row.iter_mut().zip(bias) {
                    *o = *o + b;
                }
            }
            if layer < self.config.depth {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }
}

impl NoisePredictor for DenoiserNet {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict(&self, x_t: &DenseArray, t: &[usize], cond: &[usize]) -> Result<DenseArray> {
        self.forward(&self.features(x_t, t, cond)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            data_dim: 2,
            hidden: 8,
            depth: 2,
            time_embed_dim: 4,
            n_conditions: 3,
            steps: 1000,
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut r = rng::seeded(0);
        let net = DenoiserNet::new(small(), &mut r).unwrap();
        let x = rng::normal_array(&mut r, &[5, 2]);
        let t = [1, 10, 100, 500, 1000];
        let c = [0, 1, 2, 0, 1];
        let a = net.predict(&x, &t, &c).unwrap();
        let b = net.predict(&x, &t, &c).unwrap();
        assert_eq!(a.shape(), &[5, 2]);
        assert_eq!(a, b);
    }

    #[test]
    fn graph_forward_is_bit_identical() {
        let mut r = rng::seeded(1);
        let net = DenoiserNet::new(small(), &mut r).unwrap();
        let x = rng::normal_array(&mut r, &[4, 2]);
        let feats = net.features(&x, &[3, 30, 300, 900], &[2, 1, 0, 2]).unwrap();
        let mut g = CompGraph::new();
        let ids: Vec<_> = net.params().iter().map(|p| g.param(p.clone())).collect();
        let f = g.input(feats.clone());
        let out = net.forward_graph(&mut g, &ids, f).unwrap();
        assert_eq!(g.value(out), &net.forward(&feats).unwrap());
    }

    #[test]
    fn rejects_unknown_condition() {
        let mut r = rng::seeded(2);
        let net = DenoiserNet::new(small(), &mut r).unwrap();
        let x = DenseArray::zeros(&[1, 2]);
        assert!(net.predict(&x, &[5], &[3]).is_err());
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let mut r = rng::seeded(3);
        let mut net = DenoiserNet::new(small(), &mut r).unwrap();
        let before = net.fingerprint();
        assert_eq!(before, net.clone().fingerprint());
        net.params_mut()[1].data_mut()[0] += 1e-12;
        assert_ne!(before, net.fingerprint());
    }
}
