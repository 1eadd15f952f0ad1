//! Differentiable layers: linear, conv2d, relu, flatten, batch normalization,
//! and a fused softmax cross-entropy loss head. Every layer exposes an explicit
//! forward and backward pass; analytic gradients are held to a central
//! finite-difference oracle by the test suite.

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch of {got} samples is too small; batch-mode normalization needs at least 2")]
    BatchTooSmall { got: usize },
    #[error("batch-mode forward called on a normalization layer in eval mode")]
    WrongMode,
    #[error("statistics length {got} does not match feature count {expected}")]
    StatsLength { expected: usize, got: usize },
    #[error("negative variance {value} at feature {index}")]
    NegativeVariance { index: usize, value: f64 },
    #[error("scale {value} at feature {index} is not positive; cannot fold normalization into an affine map")]
    SingularScale { index: usize, value: f64 },
    #[error("invalid hyperparameter: {0}")]
    BadHyperparameter(String),
    #[error("backward cache does not match this layer kind")]
    CacheMismatch,
    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{op} expects {expected} labels, got {got}")]
    LabelCount {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Whether a normalization layer consumes batch moments or stored statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-feature normalization with learned scale and shift.
///
/// In train mode each feature is normalized by its mini-batch mean and
/// population variance, and running statistics track an exponential moving
/// average for later eval-mode use. For rank-4 inputs a feature is a channel
/// and moments reduce over batch and both spatial axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: f64,
    epsilon: f64,
    mode: BnMode,
    feature_count: usize,
}

/// Cache produced by a batch-norm forward pass, consumed by its backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// true when the forward pass normalized by batch moments (train mode);
    /// false when it used fixed statistics, which makes the map affine in x.
    through_batch: bool,
}

impl BatchNormLayer {
    pub fn new(feature_count: usize, momentum: f64, epsilon: f64) -> Result<Self, LayerError> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(LayerError::BadHyperparameter(format!(
                "momentum {momentum} outside (0, 1]"
            )));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(LayerError::BadHyperparameter(format!(
                "epsilon {epsilon} must be positive"
            )));
        }
        if feature_count == 0 {
            return Err(LayerError::BadHyperparameter(
                "feature count must be positive".into(),
            ));
        }
        Ok(Self {
            gamma: Tensor::ones(vec![feature_count]),
            beta: Tensor::zeros(vec![feature_count]),
            running_mean: Tensor::zeros(vec![feature_count]),
            running_var: Tensor::ones(vec![feature_count]),
            momentum,
            epsilon,
            mode: BnMode::Train,
            feature_count,
        })
    }

    /// Rebuild from stored vectors (checkpoint load); re-validates invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: f64,
        epsilon: f64,
        mode: BnMode,
    ) -> Result<Self, LayerError> {
        let p = gamma.len();
        let mut bn = Self::new(p, momentum, epsilon)?;
        for (name, t) in [
            ("gamma", &gamma),
            ("beta", &beta),
            ("running_mean", &running_mean),
            ("running_var", &running_var),
        ] {
            if t.shape() != [p] {
                return Err(LayerError::BadHyperparameter(format!(
                    "{name} shape {:?} does not match feature count {p}",
                    t.shape()
                )));
            }
        }
        if let Some((i, &v)) = running_var
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v < 0.0)
        {
            return Err(LayerError::NegativeVariance { index: i, value: v });
        }
        bn.gamma = gamma;
        bn.beta = beta;
        bn.running_mean = running_mean;
        bn.running_var = running_var;
        bn.mode = mode;
        Ok(bn)
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    /// Replace the stored statistics wholesale. Scale/shift parameters are
    /// untouched; callers use this to point eval-mode normalization at a
    /// different data distribution.
    pub fn set_running_stats(&mut self, mean: &[f64], var: &[f64]) -> Result<(), LayerError> {
        if mean.len() != self.feature_count || var.len() != self.feature_count {
            return Err(LayerError::StatsLength {
                expected: self.feature_count,
                got: if mean.len() != self.feature_count {
                    mean.len()
                } else {
                    var.len()
                },
            });
        }
        if let Some((i, &v)) = var.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(LayerError::NegativeVariance { index: i, value: v });
        }
        self.running_mean = Tensor::vector(mean)?;
        self.running_var = Tensor::vector(var)?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<(), LayerError> {
        let p = x.feature_count()?;
        if p != self.feature_count {
            return Err(LayerError::StatsLength {
                expected: self.feature_count,
                got: p,
            });
        }
        Ok(())
    }

    fn reduce_axes(x: &Tensor) -> &'static [usize] {
        if x.rank() == 4 {
            &[0, 2, 3]
        } else {
            &[0]
        }
    }

    /// Normalize by mini-batch moments and update running statistics:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache), LayerError> {
        if self.mode != BnMode::Train {
            return Err(LayerError::WrongMode);
        }
        self.check_input(x)?;
        let n = x.shape()[0];
        if n < 2 {
            return Err(LayerError::BatchTooSmall { got: n });
        }
        let (mean, var) = x.reduce_moments(Self::reduce_axes(x))?;
        let (y, cache) = self.normalize(x, mean.data(), var.data(), true)?;
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        Ok((y, cache))
    }

    /// Normalize by the supplied per-feature statistics; batch moments are
    /// never consulted, so the output for each sample is independent of the
    /// rest of the batch.
    pub fn forward_eval(&self, x: &Tensor, mean: &[f64], var: &[f64]) -> Result<Tensor, LayerError> {
        self.check_input(x)?;
        if mean.len() != self.feature_count || var.len() != self.feature_count {
            return Err(LayerError::StatsLength {
                expected: self.feature_count,
                got: if mean.len() != self.feature_count {
                    mean.len()
                } else {
                    var.len()
                },
            });
        }
        if let Some((i, &v)) = var.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(LayerError::NegativeVariance { index: i, value: v });
        }
        let (y, _) = self.normalize(x, mean, var, false)?;
        Ok(y)
    }

    /// Eval-mode forward using the layer's own running statistics.
    pub fn forward_eval_running(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let mean = self.running_mean.data().to_vec();
        let var = self.running_var.data().to_vec();
        self.forward_eval(x, &mean, &var)
    }

    /// Eval-mode forward that also returns the backward cache, for
    /// fine-tuning with fixed statistics.
    pub fn forward_eval_cached(&self, x: &Tensor) -> Result<(Tensor, BnCache), LayerError> {
        self.check_input(x)?;
        let mean = self.running_mean.data().to_vec();
        let var = self.running_var.data().to_vec();
        self.normalize(x, &mean, &var, false)
    }

    fn normalize(
        &self,
        x: &Tensor,
        mean: &[f64],
        var: &[f64],
        through_batch: bool,
    ) -> Result<(Tensor, BnCache), LayerError> {
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let xhat = map_per_feature(x, |j, v| (v - mean[j]) * inv_std[j]);
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let y = map_per_feature(&xhat, |j, v| gamma[j] * v + beta[j]);
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                through_batch,
            },
        ))
    }

    /// Gradients of the normalization. In batch mode the pass differentiates
    /// through the batch mean and variance; in fixed-stats mode the map is
    /// affine per feature.
    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: &BnCache,
    ) -> Result<(Tensor, Tensor, Tensor), LayerError> {
        if grad_out.shape() != cache.xhat.shape() {
            return Err(LayerError::CacheMismatch);
        }
        let p = self.feature_count;
        let gxhat = grad_out.mul(&cache.xhat)?;
        let dgamma = Tensor::vector(&feature_sums(&gxhat, p))?;
        let dbeta = Tensor::vector(&feature_sums(grad_out, p))?;
        let gamma = self.gamma.data();
        let grad_in = if cache.through_batch {
            let m = (grad_out.len() / p) as f64;
            let mean_g: Vec<f64> = dbeta.data().iter().map(|s| s / m).collect();
            let mean_gx: Vec<f64> = dgamma.data().iter().map(|s| s / m).collect();
            let xhat = &cache.xhat;
            let mut out = grad_out.clone();
            let shape = out.shape().to_vec();
            let feat = feature_index_fn(&shape);
            for (flat, d) in out.data_mut().iter_mut().enumerate() {
                let j = feat(flat);
                *d = gamma[j]
                    * cache.inv_std[j]
                    * (*d - mean_g[j] - xhat.data()[flat] * mean_gx[j]);
            }
            out
        } else {
            map_per_feature(grad_out, |j, g| g * gamma[j] * cache.inv_std[j])
        };
        Ok((grad_in, dgamma, dbeta))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

/// Feature index of a flat element position under batch-norm semantics.
fn feature_index_fn(shape: &[usize]) -> impl Fn(usize) -> usize {
    let rank = shape.len();
    let p = shape[1];
    let spatial = if rank == 4 { shape[2] * shape[3] } else { 1 };
    move |flat| {
        if rank == 4 {
            (flat / spatial) % p
        } else {
            flat % p
        }
    }
}

fn map_per_feature(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let shape = x.shape().to_vec();
    let feat = feature_index_fn(&shape);
    let data: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(flat, &v)| f(feat(flat), v))
        .collect();
    Tensor::new(shape, data).expect("per-feature map preserves shape")
}

fn feature_sums(x: &Tensor, p: usize) -> Vec<f64> {
    let feat = feature_index_fn(x.shape());
    let mut sums = vec![0.0; p];
    for (flat, &v) in x.data().iter().enumerate() {
        sums[feat(flat)] += v;
    }
    sums
}

/// Fully connected layer. The weight has shape `[p1, p2]` and acts on row
/// vectors as `y = x W + b`, so a single input column of length p1 is mapped
/// by the transpose of the stored matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Tensor,
    bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, LayerError> {
        if weight.rank() != 2 {
            return Err(LayerError::BadHyperparameter(format!(
                "weight must be rank 2, got shape {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[1]] {
            return Err(LayerError::BadHyperparameter(format!(
                "bias shape {:?} does not match weight columns {}",
                bias.shape(),
                weight.shape()[1]
            )));
        }
        Ok(Self { weight, bias })
    }

    /// He-style initialization: weights ~ N(0, 2/p1), bias zero.
    pub fn init(p1: usize, p2: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / p1 as f64).sqrt();
        let data: Vec<f64> = (0..p1 * p2)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self {
            weight: Tensor::new(vec![p1, p2], data).expect("init shape is consistent"),
            bias: Tensor::zeros(vec![p2]),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let mut y = x.matmul(&self.weight)?;
        let p2 = self.bias.len();
        for (flat, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[flat % p2];
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        x: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor), LayerError> {
        let grad_in = grad_out.matmul(&self.weight.transpose()?)?;
        let dweight = x.transpose()?.matmul(grad_out)?;
        let p2 = self.bias.len();
        let mut dbias = vec![0.0; p2];
        for (flat, &g) in grad_out.data().iter().enumerate() {
            dbias[flat % p2] += g;
        }
        Ok((grad_in, dweight, Tensor::vector(&dbias)?))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Valid cross-correlation layer with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv2dLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize) -> Result<Self, LayerError> {
        if kernel.rank() != 4 {
            return Err(LayerError::BadHyperparameter(format!(
                "kernel must be rank 4, got shape {:?}",
                kernel.shape()
            )));
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(LayerError::BadHyperparameter(format!(
                "bias shape {:?} does not match output channels {}",
                bias.shape(),
                kernel.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(LayerError::BadHyperparameter("stride must be positive".into()));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
        })
    }

    pub fn init(o: usize, c: usize, kh: usize, kw: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (c * kh * kw) as f64;
        let scale = (2.0 / fan_in).sqrt();
        let data: Vec<f64> = (0..o * c * kh * kw)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self {
            kernel: Tensor::new(vec![o, c, kh, kw], data).expect("init shape is consistent"),
            bias: Tensor::zeros(vec![o]),
            stride,
        }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let mut y = x.conv2d(&self.kernel, self.stride)?;
        let (o, ho, wo) = (y.shape()[1], y.shape()[2], y.shape()[3]);
        let plane = ho * wo;
        for (flat, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[(flat / plane) % o];
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        grad_out: &Tensor,
        x: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor), LayerError> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (
            self.kernel.shape()[0],
            self.kernel.shape()[2],
            self.kernel.shape()[3],
        );
        if grad_out.rank() != 4 || grad_out.shape()[0] != n || grad_out.shape()[1] != o {
            return Err(LayerError::CacheMismatch);
        }
        let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
        let s = self.stride;
        let mut dx = vec![0.0; n * c * h * w];
        let mut dk = vec![0.0; o * c * kh * kw];
        let mut db = vec![0.0; o];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = grad_out.data()[((ni * o + oi) * ho + i) * wo + j];
                        if g == 0.0 {
                            continue;
                        }
                        db[oi] += g;
                        for ci in 0..c {
                            for u in 0..kh {
                                let x_row = ((ni * c + ci) * h + i * s + u) * w + j * s;
                                let k_row = ((oi * c + ci) * kh + u) * kw;
                                for v in 0..kw {
                                    dx[x_row + v] += g * self.kernel.data()[k_row + v];
                                    dk[k_row + v] += g * x.data()[x_row + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, c, h, w], dx)?,
            Tensor::new(vec![o, c, kh, kw], dk)?,
            Tensor::vector(&db)?,
        ))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("kernel", &self.kernel), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("kernel", &mut self.kernel), ("bias", &mut self.bias)]
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// The derivative at exactly zero is taken as zero.
pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor, LayerError> {
    if grad_out.shape() != x.shape() {
        return Err(LayerError::CacheMismatch);
    }
    let data: Vec<f64> = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

pub fn flatten_forward(x: &Tensor) -> Result<Tensor, LayerError> {
    let n = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    Ok(x.reshape(vec![n, rest])?)
}

pub fn flatten_backward(grad_out: &Tensor, orig_shape: &[usize]) -> Result<Tensor, LayerError> {
    Ok(grad_out.reshape(orig_shape.to_vec())?)
}

/// Mean softmax cross-entropy over a batch of logits.
///
/// Returns the scalar loss and the softmax probabilities (the backward cache).
/// Row maxima are subtracted before exponentiation for stability.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor), LayerError> {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    if labels.len() != n {
        return Err(LayerError::LabelCount {
            op: "softmax_cross_entropy",
            expected: n,
            got: labels.len(),
        });
    }
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for i in 0..n {
        let label = labels[i];
        if label >= k {
            return Err(LayerError::LabelOutOfRange {
                row: i,
                label,
                classes: k,
            });
        }
        let row = &mut probs.data_mut()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        loss -= row[label].ln();
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean softmax cross-entropy with respect to the logits:
/// `(probs - onehot) / n`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor, LayerError> {
    let n = probs.shape()[0];
    let k = probs.shape()[1];
    if labels.len() != n {
        return Err(LayerError::LabelCount {
            op: "softmax_cross_entropy_grad",
            expected: n,
            got: labels.len(),
        });
    }
    let mut grad = probs.scale(1.0 / n as f64);
    for (i, &label) in labels.iter().enumerate() {
        let slot = i * k + label;
        grad.data_mut()[slot] -= 1.0 / n as f64;
    }
    Ok(grad)
}

/// Fold fixed per-feature normalization statistics into a following linear
/// layer, assuming unit scale and zero shift on the normalization.
///
/// Given statistics `(mu, sigma)` with `sigma` the per-feature standard
/// deviations, and a linear layer `y = W^T x + b` with `W: [p1, p2]`, returns
/// `(Wa, ba)` with `Wa = W^T S^{-1}` (shape `[p2, p1]`) and
/// `ba = -W^T S^{-1} mu + b`, so `Wa x + ba` equals the normalized-then-linear
/// path for every x.
pub fn compose_bn_linear(
    mu: &[f64],
    sigma: &[f64],
    linear: &LinearLayer,
) -> Result<(Tensor, Tensor), LayerError> {
    let p1 = linear.in_features();
    let p2 = linear.out_features();
    if mu.len() != p1 || sigma.len() != p1 {
        return Err(LayerError::StatsLength {
            expected: p1,
            got: if mu.len() != p1 { mu.len() } else { sigma.len() },
        });
    }
    if let Some((i, &s)) = sigma.iter().enumerate().find(|(_, s)| **s <= 0.0) {
        return Err(LayerError::SingularScale { index: i, value: s });
    }
    let w = linear.weight();
    let mut wa = vec![0.0; p2 * p1];
    for i in 0..p1 {
        for j in 0..p2 {
            wa[j * p1 + i] = w.get2(i, j) / sigma[i];
        }
    }
    let mut ba = linear.bias().data().to_vec();
    for j in 0..p2 {
        for i in 0..p1 {
            ba[j] -= w.get2(i, j) * mu[i] / sigma[i];
        }
    }
    Ok((Tensor::new(vec![p2, p1], wa)?, Tensor::vector(&ba)?))
}

/// A layer instance; the concrete kind determines which forward/backward
/// arithmetic runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Conv2d(Conv2dLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    Flatten,
}

/// Backward cache for one layer, produced by the matching forward call.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    Bn(BnCache),
    Shape(Vec<usize>),
    None,
}

/// Parameter gradients for one layer, ordered as the layer's `params()` list.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub tensors: Vec<(&'static str, Tensor)>,
}

impl LayerGrads {
    fn none() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    /// Training-mode forward pass; batch-norm layers consume batch moments
    /// and update running statistics.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, LayerCache), LayerError> {
        match self {
            Layer::Linear(l) => Ok((l.forward(x)?, LayerCache::Input(x.clone()))),
            Layer::Conv2d(l) => Ok((l.forward(x)?, LayerCache::Input(x.clone()))),
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward_train(x)?;
                Ok((y, LayerCache::Bn(cache)))
            }
            Layer::Relu => Ok((relu_forward(x), LayerCache::Input(x.clone()))),
            Layer::Flatten => Ok((flatten_forward(x)?, LayerCache::Shape(x.shape().to_vec()))),
        }
    }

    /// Eval-mode forward pass. `bn_stats` overrides the statistics a
    /// batch-norm layer normalizes by; `None` uses its stored running stats.
    pub fn forward_eval(
        &self,
        x: &Tensor,
        bn_stats: Option<(&[f64], &[f64])>,
    ) -> Result<Tensor, LayerError> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::BatchNorm(bn) => match bn_stats {
                Some((mean, var)) => bn.forward_eval(x, mean, var),
                None => bn.forward_eval_running(x),
            },
            Layer::Relu => Ok(relu_forward(x)),
            Layer::Flatten => flatten_forward(x),
        }
    }

    /// Backward pass; `cache` must come from the matching forward call.
    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: &LayerCache,
    ) -> Result<(Tensor, LayerGrads), LayerError> {
        match (self, cache) {
            (Layer::Linear(l), LayerCache::Input(x)) => {
                let (gin, dw, db) = l.backward(grad_out, x)?;
                Ok((
                    gin,
                    LayerGrads {
                        tensors: vec![("weight", dw), ("bias", db)],
                    },
                ))
            }
            (Layer::Conv2d(l), LayerCache::Input(x)) => {
                let (gin, dk, db) = l.backward(grad_out, x)?;
                Ok((
                    gin,
                    LayerGrads {
                        tensors: vec![("kernel", dk), ("bias", db)],
                    },
                ))
            }
            (Layer::BatchNorm(bn), LayerCache::Bn(c)) => {
                let (gin, dgamma, dbeta) = bn.backward(grad_out, c)?;
                Ok((
                    gin,
                    LayerGrads {
                        tensors: vec![("gamma", dgamma), ("beta", dbeta)],
                    },
                ))
            }
            (Layer::Relu, LayerCache::Input(x)) => {
                Ok((relu_backward(grad_out, x)?, LayerGrads::none()))
            }
            (Layer::Flatten, LayerCache::Shape(s)) => {
                Ok((flatten_backward(grad_out, s)?, LayerGrads::none()))
            }
            _ => Err(LayerError::CacheMismatch),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Linear(l) => l.params(),
            Layer::Conv2d(l) => l.params(),
            Layer::BatchNorm(bn) => bn.params(),
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Linear(l) => l.params_mut(),
            Layer::Conv2d(l) => l.params_mut(),
            Layer::BatchNorm(bn) => bn.params_mut(),
            Layer::Relu | Layer::Flatten => Vec::new(),
        }
    }

    pub fn as_batch_norm(&self) -> Option<&BatchNormLayer> {
        match self {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        }
    }

    pub fn as_batch_norm_mut(&mut self) -> Option<&mut BatchNormLayer> {
        match self {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng as _;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn bn_train_identity_on_normalized_input() {
        // Columns with zero mean and unit population variance pass through
        // unchanged (up to the epsilon shrink) when gamma=1, beta=0.
        let x = Tensor::new(vec![2, 2], vec![-1.0, -2.0, 1.0, 2.0]).unwrap();
        // column variances: 1 and 4; normalize second column by hand
        let mut bn = BatchNormLayer::new(2, 0.1, 1e-12).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        assert!((y.data()[0] - -1.0).abs() < 1e-9);
        assert!((y.data()[1] - -1.0).abs() < 1e-9);
        assert!((y.data()[2] - 1.0).abs() < 1e-9);
        assert!((y.data()[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bn_train_constant_column_maps_to_zero() {
        let x = Tensor::new(vec![3, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let mut bn = BatchNormLayer::new(1, 0.1, 1e-5).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_train_output_moments() {
        // Output columns have mean ~0 and variance sigma^2/(sigma^2+eps).
        let x = random_tensor(vec![64, 8], 7);
        let eps = 1e-5;
        let mut bn = BatchNormLayer::new(8, 0.1, eps).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        let (ym, yv) = y.reduce_moments(&[0]).unwrap();
        let (_, xv) = x.reduce_moments(&[0]).unwrap();
        for j in 0..8 {
            assert!(ym.data()[j].abs() < 1e-10, "column {j} mean {}", ym.data()[j]);
            let want = xv.data()[j] / (xv.data()[j] + eps);
            assert!(
                (yv.data()[j] - want).abs() < 1e-6,
                "column {j} variance {} vs {}",
                yv.data()[j],
                want
            );
        }
    }

    #[test]
    fn bn_train_rejects_single_sample() {
        let x = Tensor::ones(vec![1, 4]);
        let mut bn = BatchNormLayer::new(4, 0.1, 1e-5).unwrap();
        assert!(matches!(
            bn.forward_train(&x).unwrap_err(),
            LayerError::BatchTooSmall { got: 1 }
        ));
    }

    #[test]
    fn bn_train_rejects_eval_mode() {
        let x = Tensor::ones(vec![4, 2]);
        let mut bn = BatchNormLayer::new(2, 0.1, 1e-5).unwrap();
        bn.set_mode(BnMode::Eval);
        assert!(matches!(
            bn.forward_train(&x).unwrap_err(),
            LayerError::WrongMode
        ));
    }

    #[test]
    fn bn_running_stats_ema_update() {
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap(); // batch: mean 1, var 1
        let mut bn = BatchNormLayer::new(1, 0.25, 1e-5).unwrap(); // running starts at (0, 1)
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean().data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bn_eval_identity_stats() {
        let x = random_tensor(vec![5, 3], 17);
        let bn = BatchNormLayer::new(3, 0.1, 1e-12).unwrap();
        let y = bn.forward_eval(&x, &[0.0; 3], &[1.0; 3]).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_eval_with_batch_moments_matches_train() {
        let x = random_tensor(vec![16, 4], 19);
        let mut bn = BatchNormLayer::new(4, 0.1, 1e-5).unwrap();
        let (mean, var) = x.reduce_moments(&[0]).unwrap();
        let y_eval = bn
            .forward_eval(&x, mean.data(), var.data())
            .unwrap();
        let (y_train, _) = bn.forward_train(&x).unwrap();
        for (a, b) in y_eval.data().iter().zip(y_train.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_eval_gamma_zero_gives_constant_beta() {
        let x = random_tensor(vec![6, 2], 23);
        let bn = BatchNormLayer::from_parts(
            Tensor::zeros(vec![2]),
            Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(),
            Tensor::zeros(vec![2]),
            Tensor::ones(vec![2]),
            0.1,
            1e-5,
            BnMode::Eval,
        )
        .unwrap();
        let y = bn.forward_eval(&x, &[5.0, 7.0], &[2.0, 0.5]).unwrap();
        for i in 0..6 {
            assert_eq!(y.get2(i, 0), 3.0);
            assert_eq!(y.get2(i, 1), -1.0);
        }
    }

    #[test]
    fn bn_eval_never_uses_batch_stats() {
        // Same sample must produce the same output regardless of batch company.
        let bn = BatchNormLayer::new(2, 0.1, 1e-5).unwrap();
        let stats_mean = [0.3, -0.2];
        let stats_var = [1.5, 0.7];
        let alone = Tensor::new(vec![1, 2], vec![0.5, 0.9]).unwrap();
        let crowd = Tensor::new(vec![3, 2], vec![0.5, 0.9, 8.0, -4.0, 2.0, 2.0]).unwrap();
        let ya = bn.forward_eval(&alone, &stats_mean, &stats_var).unwrap();
        let yc = bn.forward_eval(&crowd, &stats_mean, &stats_var).unwrap();
        assert_eq!(ya.data()[0], yc.data()[0]);
        assert_eq!(ya.data()[1], yc.data()[1]);
    }

    #[test]
    fn bn_eval_is_affine_per_feature() {
        // For fixed stats, f(a*x + c) = a*slope*x + f(c-ish): verify exact
        // affine relation f(ax+c) - f(c) == a * (f(x) - f(0)).
        let mut rng = seeded_rng(31);
        let bn = BatchNormLayer::new(1, 0.1, 1e-5).unwrap();
        let stats_mean = [0.4];
        let stats_var = [2.0];
        let f = |v: f64| {
            let x = Tensor::new(vec![1, 1], vec![v]).unwrap();
            bn.forward_eval(&x, &stats_mean, &stats_var).unwrap().data()[0]
        };
        for _ in 0..20 {
            let a: f64 = rng.random_range(-3.0..3.0);
            let c: f64 = rng.random_range(-3.0..3.0);
            let x: f64 = rng.random_range(-3.0..3.0);
            let lhs = f(a * x + c) - f(c);
            let rhs = a * (f(x) - f(0.0));
            assert!((lhs - rhs).abs() < 1e-9, "affine relation violated");
        }
    }

    #[test]
    fn bn_conv_features_are_channels() {
        // A rank-4 batch where channel 0 is constant and channel 1 varies:
        // channel 0 normalizes to zero; channel 1 per-channel moments shared
        // across all spatial positions.
        let x = Tensor::new(
            vec![2, 2, 1, 2],
            vec![
                5.0, 5.0, 1.0, 2.0, // sample 0: ch0 [5,5], ch1 [1,2]
                5.0, 5.0, 3.0, 4.0, // sample 1: ch0 [5,5], ch1 [3,4]
            ],
        )
        .unwrap();
        let mut bn = BatchNormLayer::new(2, 0.1, 1e-5).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        // channel 0 constant -> all zeros
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[4], 0.0);
        assert_eq!(y.data()[5], 0.0);
        // channel 1: values 1,2,3,4 -> mean 2.5, pop var 1.25
        let inv = 1.0 / (1.25f64 + 1e-5).sqrt();
        assert!((y.data()[2] - (1.0 - 2.5) * inv).abs() < 1e-12);
        assert!((y.data()[7] - (4.0 - 2.5) * inv).abs() < 1e-12);
    }

    #[test]
    fn relu_backward_positive_input_passes_grad() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = random_tensor(vec![2, 2], 37);
        let gin = relu_backward(&g, &x).unwrap();
        assert_eq!(gin, g);
    }

    #[test]
    fn linear_backward_identity_weight_passes_grad() {
        let l = LinearLayer::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let x = random_tensor(vec![3, 2], 41);
        let g = random_tensor(vec![3, 2], 43);
        let (gin, _, _) = l.backward(&g, &x).unwrap();
        for (a, b) in gin.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_identity_stats_returns_transpose() {
        let w = random_tensor(vec![3, 2], 47);
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let l = LinearLayer::new(w.clone(), b.clone()).unwrap();
        let (wa, ba) = compose_bn_linear(&[0.0; 3], &[1.0; 3], &l).unwrap();
        let wt = w.transpose().unwrap();
        assert_eq!(wa, wt);
        assert_eq!(ba, b);
    }

    #[test]
    fn compose_scalar_hand_check() {
        // W=[2], b=[1], mu=[3], sigma=[2]: folded map is x - 2.
        let l = LinearLayer::new(
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::new(vec![1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let (wa, ba) = compose_bn_linear(&[3.0], &[2.0], &l).unwrap();
        assert_eq!(wa.data(), &[1.0]);
        assert_eq!(ba.data(), &[-2.0]);
    }

    #[test]
    fn compose_two_path_equality() {
        let mut rng = seeded_rng(53);
        for trial in 0..100 {
            let p1 = rng.random_range(1..6usize);
            let p2 = rng.random_range(1..6usize);
            let l = LinearLayer::init(p1, p2, &mut rng);
            let mu: Vec<f64> = (0..p1).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma: Vec<f64> = (0..p1).map(|_| rng.random_range(0.1..3.0)).collect();
            let (wa, ba) = compose_bn_linear(&mu, &sigma, &l).unwrap();
            let x: Vec<f64> = (0..p1).map(|_| rng.random_range(-4.0..4.0)).collect();
            // path 1: Wa x + ba
            let xt = Tensor::new(vec![p1, 1], x.clone()).unwrap();
            let y1 = wa.matmul(&xt).unwrap();
            // path 2: W^T ((x - mu)/sigma) + b
            let norm: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - mu[i]) / sigma[i])
                .collect();
            let nt = Tensor::new(vec![1, p1], norm).unwrap();
            let y2 = nt.matmul(l.weight()).unwrap();
            for j in 0..p2 {
                let a = y1.data()[j] + ba.data()[j];
                let b = y2.data()[j] + l.bias().data()[j];
                assert!((a - b).abs() < 1e-10, "trial {trial} output {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn compose_rejects_nonpositive_sigma() {
        let l = LinearLayer::init(2, 2, &mut seeded_rng(59));
        let err = compose_bn_linear(&[0.0, 0.0], &[1.0, 0.0], &l).unwrap_err();
        assert!(matches!(err, LayerError::SingularScale { index: 1, .. }));
    }

    #[test]
    fn softmax_loss_uniform_logits() {
        let logits = Tensor::zeros(vec![4, 3]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 1, 2, 0]).unwrap();
        assert!((loss - (3.0f64).ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_loss_rejects_bad_label() {
        let logits = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]).unwrap_err(),
            LayerError::LabelOutOfRange { row: 1, label: 3, classes: 3 }
        ));
    }

    #[test]
    fn softmax_grad_sums_to_zero_per_row() {
        let logits = random_tensor(vec![5, 4], 61);
        let labels = [0, 1, 2, 3, 1];
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let grad = softmax_cross_entropy_grad(&probs, &labels).unwrap();
        for i in 0..5 {
            let s: f64 = (0..4).map(|j| grad.get2(i, j)).sum();
            assert!(s.abs() < 1e-12);
        }
    }
}
