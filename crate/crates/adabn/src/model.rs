//! Ordered stacks of named layers with whole-network forward, backward, and
//! SGD update plumbing.

use std::collections::HashMap;

use crate::layers::{BnMode, Layer, LayerCache, LayerError, LayerGrads};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("duplicate layer name '{0}'")]
    DuplicateName(String),
    #[error("no layer named '{0}'")]
    UnknownLayer(String),
    #[error("empty layer name at position {0}")]
    EmptyName(usize),
    #[error("model has no layers")]
    Empty,
    #[error("gradient list length {got} does not match layer count {expected}")]
    GradCount { expected: usize, got: usize },
    #[error("cache list length {got} does not match layer count {expected}")]
    CacheCount { expected: usize, got: usize },
}

/// A layer plus its stable name. Names key checkpoints, statistics banks,
/// freeze lists, and per-layer learning-rate scales.
#[derive(Debug, Clone)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

/// Per-batch-norm statistics overrides used during eval-style passes,
/// keyed by layer name.
pub type BnOverrides = HashMap<String, (Vec<f64>, Vec<f64>)>;

/// An ordered feed-forward network.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<NamedLayer>,
}

impl Model {
    /// Layer names must be unique: batch-norm names key the statistics bank
    /// and every name may appear in freeze/scale maps.
    pub fn new(layers: Vec<(String, Layer)>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        for (i, (name, _)) in layers.iter().enumerate() {
            if name.is_empty() {
                return Err(ModelError::EmptyName(i));
            }
            if !seen.insert(name.clone()) {
                return Err(ModelError::DuplicateName(name.clone()));
            }
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|(name, layer)| NamedLayer { name, layer })
                .collect(),
        })
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Result<usize, ModelError> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLayer(name.to_string()))
    }

    /// Batch-norm layer names in network order.
    pub fn bn_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.layer, Layer::BatchNorm(_)))
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for l in &mut self.layers {
            if let Some(bn) = l.layer.as_batch_norm_mut() {
                bn.set_mode(mode);
            }
        }
    }

    /// Replace the stored statistics of one batch-norm layer. All learned
    /// parameters (including the layer's own scale/shift) are untouched.
    pub fn set_bn_running(
        &mut self,
        name: &str,
        mean: &[f64],
        var: &[f64],
    ) -> Result<(), ModelError> {
        let idx = self.layer_index(name)?;
        let bn = self.layers[idx]
            .layer
            .as_batch_norm_mut()
            .ok_or_else(|| ModelError::UnknownLayer(name.to_string()))?;
        bn.set_running_stats(mean, var)?;
        Ok(())
    }

    /// Training-mode forward pass; returns the output and per-layer caches
    /// for the backward pass.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>), ModelError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &mut self.layers {
            let (y, cache) = l.layer.forward_train(&h)?;
            caches.push(cache);
            h = y;
        }
        Ok((h, caches))
    }

    /// Eval-mode forward pass using each batch-norm layer's stored
    /// statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.forward_eval_with(x, &HashMap::new(), None)
    }

    /// Eval-mode forward pass with optional per-layer statistics overrides.
    /// When `stop_at` is `Some(i)` only layers `0..i` run and the returned
    /// tensor is the activation entering layer `i`.
    pub fn forward_eval_with(
        &self,
        x: &Tensor,
        overrides: &BnOverrides,
        stop_at: Option<usize>,
    ) -> Result<Tensor, ModelError> {
        let end = stop_at.unwrap_or(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers[..end] {
            let stats = overrides
                .get(&l.name)
                .map(|(m, v)| (m.as_slice(), v.as_slice()));
            h = l.layer.forward_eval(&h, stats)?;
        }
        Ok(h)
    }

    /// Activation entering the named layer under an eval-mode pass.
    pub fn input_to(
        &self,
        name: &str,
        x: &Tensor,
        overrides: &BnOverrides,
    ) -> Result<Tensor, ModelError> {
        let idx = self.layer_index(name)?;
        self.forward_eval_with(x, overrides, Some(idx))
    }

    /// Activation leaving the named layer under an eval-mode pass.
    pub fn output_of(
        &self,
        name: &str,
        x: &Tensor,
        overrides: &BnOverrides,
    ) -> Result<Tensor, ModelError> {
        let idx = self.layer_index(name)?;
        self.forward_eval_with(x, overrides, Some(idx + 1))
    }

    /// Backward pass over the whole stack. `caches` must come from the
    /// immediately preceding `forward_train` on the same input.
    pub fn backward(
        &self,
        grad_out: &Tensor,
        caches: &[LayerCache],
    ) -> Result<(Tensor, Vec<LayerGrads>), ModelError> {
        if caches.len() != self.layers.len() {
            return Err(ModelError::CacheCount {
                expected: self.layers.len(),
                got: caches.len(),
            });
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, cache) in self.layers.iter().zip(caches).rev() {
            let (gin, layer_grads) = l.layer.backward(&g, cache)?;
            grads.push(layer_grads);
            g = gin;
        }
        grads.reverse();
        Ok((g, grads))
    }

    /// Plain SGD update: `param -= lr * scale[layer] * grad`, skipping layers
    /// in the freeze list. Unknown names in either map are rejected so typos
    /// cannot silently train a frozen layer.
    pub fn sgd_step(
        &mut self,
        grads: &[LayerGrads],
        lr: f64,
        frozen: &[String],
        per_layer_scale: &HashMap<String, f64>,
    ) -> Result<(), ModelError> {
        if grads.len() != self.layers.len() {
            return Err(ModelError::GradCount {
                expected: self.layers.len(),
                got: grads.len(),
            });
        }
        for name in frozen {
            self.layer_index(name)?;
        }
        for name in per_layer_scale.keys() {
            self.layer_index(name)?;
        }
        for (l, g) in self.layers.iter_mut().zip(grads) {
            if frozen.iter().any(|f| f == &l.name) {
                continue;
            }
            let scale = per_layer_scale.get(&l.name).copied().unwrap_or(1.0);
            let step = -lr * scale;
            let mut params = l.layer.params_mut();
            for (pname, grad) in &g.tensors {
                let (_, param) = params
                    .iter_mut()
                    .find(|(n, _)| n == pname)
                    .expect("gradient name matches a parameter");
                param.axpy(step, grad).map_err(LayerError::from)?;
            }
        }
        Ok(())
    }

    /// Named parameter tensors of every layer, as `(layer, param, tensor)`.
    pub fn named_params(&self) -> Vec<(String, &'static str, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.layer
                    .params()
                    .into_iter()
                    .map(move |(pname, t)| (l.name.clone(), pname, t))
            })
            .collect()
    }
}
