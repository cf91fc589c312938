//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First and second moment accumulators for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<DenseArray>,
    second: Vec<DenseArray>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[DenseArray]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            second: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Gradients are validated before anything is
    /// touched, so a rejected step leaves both parameters and moments unchanged.
    /// `names` labels parameters in the error.
    pub fn step(
        &mut self,
        params: &mut [DenseArray],
        grads: &[DenseArray],
        names: &dyn Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: value {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    index: i,
                    name: names(i),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unnamed(i: usize) -> String {
        format!("p{i}")
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = vec![DenseArray::vector(vec![1.5, -2.0, 0.25])];
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let zero = vec![DenseArray::zeros(&[3])];
        for _ in 0..50 {
            adam.step(&mut params, &zero, &unnamed).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 50);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        let lr = 0.01;
        let g = 0.3;
        let mut params = vec![DenseArray::vector(vec![1.0])];
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(lr), &params);
        adam.step(&mut params, &[DenseArray::vector(vec![g])], &unnamed)
            .unwrap();
        let expected = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let lr = 1e-3;
        let mut params = vec![DenseArray::vector(vec![0.0, 0.0])];
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(lr), &params);
        let grads = [DenseArray::vector(vec![2.0, -0.5])];
        let mut prev = params[0].clone();
        for _ in 0..2000 {
            adam.step(&mut params, &grads, &unnamed).unwrap();
            let cur = params[0].clone();
            let d0 = cur.data()[0] - prev.data()[0];
            let d1 = cur.data()[1] - prev.data()[1];
            assert!((d0 + lr).abs() < 1e-9);
            assert!((d1 - lr).abs() < 1e-9);
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let mut params = vec![DenseArray::vector(vec![1.0]), DenseArray::vector(vec![2.0])];
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let grads = [DenseArray::vector(vec![0.1]), DenseArray::vector(vec![f64::NAN])];
        let err = adam
            .step(&mut params, &grads, &|i| ["w", "b"][i].to_string())
            .unwrap_err();
        match err {
            Error::NonFiniteGradient { index, name } => {
                assert_eq!(index, 1);
                assert_eq!(name, "b");
            }
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 0);
    }
}
