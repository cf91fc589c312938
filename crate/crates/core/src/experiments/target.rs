use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::rng::{self, Rng};

/// Isotropic Gaussian mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Standard deviation per dimension.
    pub scale: f64,
    pub weight: f64,
}

/// Mixture target plus the mode each condition asks for.
///
/// Pretraining data come from the whole mixture regardless of condition, so
/// a pretrained model puts only a component's weight on the mode a condition
/// designates; alignment has to move mass there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTarget {
    pub components: Vec<Component>,
    /// `condition_modes[c]` indexes into `components`.
    pub condition_modes: Vec<usize>,
}

impl Default for ToyTarget {
    /// A broad bulk at the origin and four narrow modes on the axes at radius
    /// 2.5; condition `k` designates mode `k`.
    fn default() -> Self {
        let r = 2.5;
        let mut components = vec![Component {
            mean: vec![0.0, 0.0],
            scale: 0.8,
            weight: 0.8,
        }];
        for m in [[r, 0.0], [0.0, r], [-r, 0.0], [0.0, -r]] {
            components.push(Component {
                mean: m.to_vec(),
                scale: 0.15,
                weight: 0.05,
            });
        }
        Self {
            components,
            condition_modes: vec![1, 2, 3, 4],
        }
    }
}

impl ToyTarget {
    pub fn validate(&self) -> Result<()> {
        let field = |m: String| Error::config("target", m);
        let Some(first) = self.components.first() else {
            return Err(field("no components".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(field("zero-dimensional component".into()));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(field(format!("component {k} has dimension {}, expected {dim}", c.mean.len())));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(field(format!("component {k}: scale must be > 0")));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(field(format!("component {k}: weight must be > 0")));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(field(format!("mixture weights sum to {total}, expected 1")));
        }
        if self.condition_modes.is_empty() {
            return Err(field("no conditions".into()));
        }
        if let Some(&m) = self.condition_modes.iter().find(|&&m| m >= self.components.len()) {
            return Err(field(format!("condition mode {m} out of range")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.condition_modes.len()
    }

    pub fn designated_mean(&self, c: usize) -> Result<&[f64]> {
        let k = self
            .condition_modes
            .get(c)
            .ok_or_else(|| Error::Argument(format!("unknown condition {c} (have {})", self.n_conditions())))?;
        Ok(&self.components[*k].mean)
    }

    fn draw_component(&self, k: usize, rng: &mut Rng) -> Vec<f64> {
        let c = &self.components[k];
        c.mean.iter().map(|m| m + c.scale * rng::normal(rng)).collect()
    }

    fn pick_component(&self, rng: &mut Rng) -> usize {
        let u = rng::uniform(rng, 0.0, 1.0);
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        self.components.len() - 1
    }

    /// `n` draws from the full mixture.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> DenseArray {
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            let k = self.pick_component(rng);
            data.extend(self.draw_component(k, rng));
        }
        DenseArray::matrix(n, self.dim(), data).expect("mixture sample shape")
    }

    /// One draw from the mode designated by `c`.
    pub fn sample_designated(&self, c: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        self.designated_mean(c)?;
        Ok(self.draw_component(self.condition_modes[c], rng))
    }

    /// Uniformly random conditions.
    pub fn sample_conditions(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| rng::uniform_index(rng, self.n_conditions())).collect()
    }
}

/// `−‖x0 − μ_c‖²` where `μ_c` is the mean of the mode designated by `c`.
pub fn reward_oracle(target: &ToyTarget, c: usize, x0: &[f64]) -> Result<f64> {
    let mean = target.designated_mean(c)?;
    if x0.len() != mean.len() {
        return Err(Error::Shape(format!("sample of dimension {} for target of dimension {}", x0.len(), mean.len())));
    }
    Ok(-x0.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Mean oracle reward of the rows of `x` under conditions `conds`.
pub fn mean_reward(target: &ToyTarget, conds: &[usize], x: &DenseArray) -> Result<f64> {
    if conds.len() != x.rows() {
        return Err(Error::Shape(format!("{} conditions for {} samples", conds.len(), x.rows())));
    }
    let mut total = 0.0;
    for (i, &c) in conds.iter().enumerate() {
        total += reward_oracle(target, c, x.row(i))?;
    }
    Ok(total / conds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let t = ToyTarget::default();
        t.validate().unwrap();
        assert_eq!(reward_oracle(&t, 0, &[2.5, 0.0]).unwrap(), 0.0);
        assert_eq!(reward_oracle(&t, 0, &[2.5, 1.0]).unwrap(), -1.0);
        assert_eq!(reward_oracle(&t, 1, &[1.0, 2.5]).unwrap(), -1.0);
        assert!(matches!(reward_oracle(&t, 9, &[0.0, 0.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn reward_is_rotation_invariant_about_the_mode() {
        let t = ToyTarget::default();
        let (r, m) = (0.7, [2.5, 0.0]);
        let base = reward_oracle(&t, 0, &[m[0] + r, m[1]]).unwrap();
        for k in 1..12 {
            let a = k as f64 * 0.5;
            let x = [m[0] + r * a.cos(), m[1] + r * a.sin()];
            assert!((reward_oracle(&t, 0, &x).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_proportions() {
        let t = ToyTarget::default();
        let x = t.sample(20_000, &mut rng::seeded(1));
        let far = (0..x.rows()).filter(|&i| x.row(i)[0].hypot(x.row(i)[1]) > 2.0).count();
        let frac = far as f64 / x.rows() as f64;
        // Rare modes hold 0.2 of the mass; the bulk leaks a little past radius 2.
        assert!((0.19..0.25).contains(&frac), "{frac}");
    }

    #[test]
    fn validation_names_the_problem() {
        let mut t = ToyTarget::default();
        t.components[0].weight = 0.5;
        let e = t.validate().unwrap_err().to_string();
        assert!(e.contains("sum to"), "{e}");
        let mut t = ToyTarget::default();
        t.condition_modes[0] = 7;
        assert!(t.validate().is_err());
    }
}
