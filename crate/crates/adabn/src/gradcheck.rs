//! Central finite-difference verification of analytic gradients.
//!
//! Each layer's backward pass is compared against a numeric derivative of a
//! scalar projection of its output. The projection weights are fixed random
//! values so every output element influences the scalar.

use crate::layers::{Layer, LayerError};
use crate::rng::{seeded_rng, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor that keeps tiny-magnitude comparisons sane.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8)
}

/// Largest per-element relative error between two gradient tensors.
pub fn max_relative_error(numeric: &Tensor, analytic: &Tensor) -> f64 {
    assert_eq!(numeric.shape(), analytic.shape(), "gradient shapes differ");
    numeric
        .data()
        .iter()
        .zip(analytic.data())
        .map(|(&n, &a)| relative_error(n, a))
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Outcome of one layer gradient check: the worst relative error seen across
/// the input gradient and every parameter gradient, and how many scalar
/// derivatives were compared.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub compared: usize,
}

fn random_like(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("random tensor shape is consistent")
}

fn weighted_sum(y: &Tensor, weights: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

/// Check one layer's analytic gradients (input and all parameters) against
/// central finite differences with step `h`.
///
/// The scalar under test is a fixed random projection of the layer output.
/// For relu layers callers should supply inputs bounded away from zero, where
/// the numeric derivative straddles the kink.
pub fn check_layer(layer: &Layer, x: &Tensor, seed: u64, h: f64) -> Result<GradReport, LayerError> {
    let mut probe = layer.clone();
    let (y0, cache) = probe.forward_train(x)?;
    let mut rng = seeded_rng(seed);
    let weights = random_like(y0.shape(), &mut rng);
    let (analytic_in, grads) = probe.backward(&weights, &cache)?;
    let analytic_params = grads.tensors;

    let scalar_of_input = |xt: &Tensor| -> f64 {
        let mut l = layer.clone();
        let (y, _) = l.forward_train(xt).expect("forward in finite difference");
        weighted_sum(&y, &weights)
    };
    let numeric_in = finite_diff(scalar_of_input, x, h);
    let mut max_rel = max_relative_error(&numeric_in, &analytic_in);
    let mut compared = x.len();

    for (pname, analytic_grad) in &analytic_params {
        let template = layer.clone();
        let param0 = template
            .params()
            .into_iter()
            .find(|(n, _)| n == pname)
            .expect("parameter exists")
            .1
            .clone();
        let scalar_of_param = |pt: &Tensor| -> f64 {
            let mut l = template.clone();
            {
                let mut params = l.params_mut();
                let (_, slot) = params
                    .iter_mut()
                    .find(|(n, _)| n == pname)
                    .expect("parameter exists");
                **slot = pt.clone();
            }
            let (y, _) = l.forward_train(x).expect("forward in finite difference");
            weighted_sum(&y, &weights)
        };
        let numeric_p = finite_diff(scalar_of_param, &param0, h);
        max_rel = max_rel.max(max_relative_error(&numeric_p, analytic_grad));
        compared += param0.len();
    }
    Ok(GradReport { max_rel, compared })
}

/// Gradient check for the fused softmax cross-entropy head.
pub fn check_loss_head(n: usize, k: usize, seed: u64, h: f64) -> GradReport {
    use crate::layers::{softmax_cross_entropy, softmax_cross_entropy_grad};
    let mut rng = seeded_rng(seed);
    let logits = random_like(&[n, k], &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let (_, probs) = softmax_cross_entropy(&logits, &labels).expect("loss forward");
    let analytic = softmax_cross_entropy_grad(&probs, &labels).expect("loss grad");
    let numeric = finite_diff(
        |lg: &Tensor| softmax_cross_entropy(lg, &labels).expect("loss forward").0,
        &logits,
        h,
    );
    GradReport {
        max_rel: max_relative_error(&numeric, &analytic),
        compared: logits.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNormLayer, Conv2dLayer, LinearLayer};

    fn random_away_from_zero(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.5);
                if rng.random_range(0..2) == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn finite_diff_of_quadratic() {
        // d/dx sum(x^2) = 2x
        let x = random_away_from_zero(vec![3, 2], 5);
        let g = finite_diff(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!(relative_error(*gi, 2.0 * xi) < 1e-8);
        }
    }

    #[test]
    fn linear_layer_gradcheck() {
        let mut rng = seeded_rng(7);
        let layer = Layer::Linear(LinearLayer::init(4, 3, &mut rng));
        let x = random_away_from_zero(vec![5, 4], 11);
        let report = check_layer(&layer, &x, 13, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn conv_layer_gradcheck() {
        let mut rng = seeded_rng(17);
        let layer = Layer::Conv2d(Conv2dLayer::init(3, 2, 2, 2, 1, &mut rng));
        let x = random_away_from_zero(vec![2, 2, 4, 4], 19);
        let report = check_layer(&layer, &x, 23, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn conv_layer_strided_gradcheck() {
        let mut rng = seeded_rng(27);
        let layer = Layer::Conv2d(Conv2dLayer::init(2, 3, 3, 3, 2, &mut rng));
        let x = random_away_from_zero(vec![2, 3, 7, 7], 29);
        let report = check_layer(&layer, &x, 31, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn batchnorm_layer_gradcheck() {
        let layer = Layer::BatchNorm(BatchNormLayer::new(4, 0.1, 1e-5).unwrap());
        let x = random_away_from_zero(vec![8, 4], 37);
        let report = check_layer(&layer, &x, 41, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn batchnorm_conv_input_gradcheck() {
        let layer = Layer::BatchNorm(BatchNormLayer::new(2, 0.1, 1e-5).unwrap());
        let x = random_away_from_zero(vec![3, 2, 3, 3], 43);
        let report = check_layer(&layer, &x, 47, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn relu_layer_gradcheck() {
        let layer = Layer::Relu;
        let x = random_away_from_zero(vec![6, 5], 53);
        let report = check_layer(&layer, &x, 59, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn flatten_layer_gradcheck() {
        let layer = Layer::Flatten;
        let x = random_away_from_zero(vec![2, 3, 2, 2], 61);
        let report = check_layer(&layer, &x, 67, FD_STEP).unwrap();
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }

    #[test]
    fn loss_head_gradcheck() {
        let report = check_loss_head(6, 4, 71, FD_STEP);
        assert!(report.max_rel < 1e-5, "max rel err {}", report.max_rel);
    }
}
