//! Dense arrays, reverse-mode autodiff and the Adam optimizer.

mod adam;
mod array;
mod graph;

pub use adam::{AdamConfig, AdamState};
pub use array::DenseArray;
pub use graph::{log_sigmoid, sigmoid, CompGraph, Gradients, NodeId};

use crate::error::{Error, Result};

/// `min(max(x, lo), hi)`.
pub fn clip_scalar(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::Argument(format!("clip bounds {lo} > {hi}")));
    }
    Ok(x.max(lo).min(hi))
}

/// Builds a graph over `params` with `build`, runs the backward pass and
/// returns the scalar loss together with one gradient per parameter.
/// Parameters the loss does not depend on get a zero gradient.
pub fn forward_backward<F>(params: &[DenseArray], build: F) -> Result<(f64, Vec<DenseArray>)>
where
    F: FnOnce(&mut CompGraph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = CompGraph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build(&mut graph, &ids)?;
    let mut grads = graph.backward(loss)?;
    let loss_value = graph.value(loss).item();
    let out = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| DenseArray::zeros(p.shape())))
        .collect();
    Ok((loss_value, out))
}

/// Evaluates the loss only.
pub fn forward_value<F>(params: &[DenseArray], build: F) -> Result<f64>
where
    F: FnOnce(&mut CompGraph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = CompGraph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.input(p.clone())).collect();
    let loss = build(&mut graph, &ids)?;
    Ok(graph.value(loss).item())
}

/// Below this magnitude a gradient entry is compared by absolute difference.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_deviation: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
    pub passed: bool,
}

/// Compares analytic gradients with central differences of step `h`.
pub fn grad_check<F>(params: &[DenseArray], h: f64, rtol: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut CompGraph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = forward_backward(params, &build)?;
    let mut work: Vec<DenseArray> = params.to_vec();
    let mut report = GradCheckReport {
        max_deviation: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
        passed: true,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = forward_value(&work, &build)?;
            work[p].data_mut()[i] = orig - h;
            let minus = forward_value(&work, &build)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.entries += 1;
            if dev > report.max_deviation || dev.is_nan() {
                report.max_deviation = dev;
                report.worst_param = p;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_deviation <= rtol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        DenseArray::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn square_of_three() {
        let (loss, grads) = forward_backward(&[DenseArray::scalar(3.0)], |g, p| {
            let sq = g.square(p[0])?;
            g.sum(sq, None)
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let x = DenseArray::matrix(2, 3, vec![0.3, -1.0, 2.0, 4.0, 5.0, -6.0]).unwrap();
        let (_, grads) = forward_backward(&[x], |g, p| g.sum(p[0], None)).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn log_sigmoid_gradient_at_zero() {
        let (loss, grads) = forward_backward(&[DenseArray::scalar(0.0)], |g, p| g.log_sigmoid(p[0])).unwrap();
        assert!((loss + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grads[0].data(), &[0.5]);
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut g = CompGraph::new();
        let w = g.param(DenseArray::scalar(2.0));
        let x = g.input(DenseArray::scalar(5.0));
        let y = g.mul(w, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[5.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn gradient_shapes_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = CompGraph::new();
        let x = g.input(randn(&mut rng, &[4, 3]));
        let w = g.param(randn(&mut rng, &[3, 2]));
        let b = g.param(randn(&mut rng, &[2]));
        let h = g.matmul(x, w).unwrap();
        let h = g.add(h, b).unwrap();
        let h = g.tanh(h).unwrap();
        let s = g.sum(h, Some(1)).unwrap();
        let loss = g.mean(s).unwrap();
        let grads = g.backward(loss).unwrap();
        for id in [w, b, h, s, loss] {
            assert_eq!(grads.get(id).unwrap().shape(), g.value(id).shape());
        }
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let mut g = CompGraph::new();
        let a = g.param(DenseArray::zeros(&[2, 3]));
        let b = g.param(DenseArray::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let c = g.param(DenseArray::zeros(&[4]));
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
        // Nothing was appended for the failed ops.
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = CompGraph::new();
        let a = g.param(DenseArray::zeros(&[2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[5, 3]);
        let w = randn(&mut rng, &[3, 2]);
        let report = grad_check(&[w], 1e-5, 1e-8, |g, p| {
            let xi = g.input(x.clone());
            let y = g.matmul(xi, p[0])?;
            g.sum(y, None)
        })
        .unwrap();
        assert!(report.max_deviation < 1e-8, "{report:?}");
    }

    #[test]
    fn two_layer_tanh_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[6, 4]);
        let params = vec![
            randn(&mut rng, &[4, 8]),
            randn(&mut rng, &[8]),
            randn(&mut rng, &[8, 2]),
            randn(&mut rng, &[2]),
        ];
        let report = grad_check(&params, 1e-5, 1e-4, |g, p| {
            let xi = g.input(x.clone());
            let h = g.matmul(xi, p[0])?;
            let h = g.add(h, p[1])?;
            let h = g.tanh(h)?;
            let o = g.matmul(h, p[2])?;
            let o = g.add(o, p[3])?;
            let o = g.square(o)?;
            g.mean(o)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn clip_scalar_cases() {
        assert_eq!(clip_scalar(1.0, 0.8, 1.2).unwrap(), 1.0);
        assert_eq!(clip_scalar(1.5, 0.8, 1.2).unwrap(), 1.2);
        assert_eq!(clip_scalar(0.5, 0.8, 1.2).unwrap(), 0.8);
        assert!(clip_scalar(0.5, 1.2, 0.8).is_err());
    }

    #[test]
    fn bad_step_rejected() {
        let r = grad_check(&[DenseArray::scalar(1.0)], 0.0, 1e-4, |g, p| g.square(p[0]));
        assert!(r.is_err());
    }
}
