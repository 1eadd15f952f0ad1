//! Domain adaptation by statistics replacement: estimate per-feature
//! activation moments of a new domain with a streaming accumulator, store
//! them in a per-domain bank, and point the model's normalization layers at
//! the domain the data actually comes from. No learned parameter changes.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::DomainDataset;
use crate::layers::BnMode;
use crate::model::{BnOverrides, Model, ModelError};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdabnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("accumulator of width {expected} fed a batch of width {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("cannot finalize statistics from an empty accumulator")]
    EmptyAccumulator,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{got} sample(s) cannot support variance estimation; need at least 2")]
    DegenerateSampleCount { got: usize },
    #[error("statistics bank has no entry for layer '{layer}' in domain '{domain}'")]
    IncompleteBank { layer: String, domain: String },
    #[error("model has no normalization layers to adapt")]
    NoBnLayers,
    #[error("bank entry for layer '{layer}' domain '{domain}' is invalid: {reason}")]
    BadBankEntry {
        layer: String,
        domain: String,
        reason: String,
    },
}

/// Streaming per-feature moment estimator: running count, mean, and summed
/// squared deviations. Accumulators over disjoint data shards merge into the
/// same result as one pass over the union.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfordAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WelfordAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Fold one observation row into the running moments.
    pub fn update_row(&mut self, row: &[f64]) -> Result<(), AdabnError> {
        if row.len() != self.mean.len() {
            return Err(AdabnError::WidthMismatch {
                expected: self.mean.len(),
                got: row.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for (j, &x) in row.iter().enumerate() {
            let delta = x - self.mean[j];
            self.mean[j] += delta / n;
            let delta2 = x - self.mean[j];
            self.m2[j] += delta * delta2;
        }
        Ok(())
    }

    /// Fold a batch of observations. Rank-2 batches contribute one row per
    /// sample; rank-4 batches contribute one row per (sample, spatial
    /// position) with channels as features.
    pub fn update(&mut self, batch: &Tensor) -> Result<(), AdabnError> {
        let fm = batch.feature_matrix()?;
        let width = fm.shape()[1];
        if width != self.mean.len() {
            return Err(AdabnError::WidthMismatch {
                expected: self.mean.len(),
                got: width,
            });
        }
        for i in 0..fm.shape()[0] {
            let row = &fm.data()[i * width..(i + 1) * width];
            self.count += 1;
            let n = self.count as f64;
            for (j, &x) in row.iter().enumerate() {
                let delta = x - self.mean[j];
                self.mean[j] += delta / n;
                let delta2 = x - self.mean[j];
                self.m2[j] += delta * delta2;
            }
        }
        Ok(())
    }

    /// Combine two accumulators as if their observations had been streamed
    /// into one, in any order.
    pub fn merge(&self, other: &WelfordAccumulator) -> Result<WelfordAccumulator, AdabnError> {
        if self.width() != other.width() {
            return Err(AdabnError::WidthMismatch {
                expected: self.width(),
                got: other.width(),
            });
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let count = self.count + other.count;
        let (na, nb, n) = (self.count as f64, other.count as f64, count as f64);
        let mut mean = vec![0.0; self.width()];
        let mut m2 = vec![0.0; self.width()];
        for j in 0..self.width() {
            let delta = other.mean[j] - self.mean[j];
            mean[j] = self.mean[j] + delta * (nb / n);
            m2[j] = (self.m2[j] + other.m2[j] + delta * delta * (na * nb / n)).max(0.0);
        }
        Ok(WelfordAccumulator { count, mean, m2 })
    }

    /// Final mean and population (1/N) variance.
    pub fn finalize(&self) -> Result<(Vec<f64>, Vec<f64>), AdabnError> {
        if self.count == 0 {
            return Err(AdabnError::EmptyAccumulator);
        }
        let n = self.count as f64;
        let var: Vec<f64> = self.m2.iter().map(|&m| (m / n).max(0.0)).collect();
        Ok((self.mean.clone(), var))
    }
}

/// One domain's statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Observations behind the estimate (rows for dense layers; sample times
    /// spatial positions for convolutional ones).
    pub count: u64,
}

/// Per-(layer, domain) statistics storage. Keys are ordered so iteration,
/// serialization, and hashing are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnStatsBank {
    entries: BTreeMap<(String, String), BankEntry>,
}

impl BnStatsBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        layer: &str,
        domain: &str,
        entry: BankEntry,
    ) -> Result<(), AdabnError> {
        let reason = if entry.mean.len() != entry.var.len() {
            Some(format!(
                "mean length {} != variance length {}",
                entry.mean.len(),
                entry.var.len()
            ))
        } else if entry.mean.is_empty() {
            Some("empty statistics vectors".to_string())
        } else if entry.count == 0 {
            Some("zero observation count".to_string())
        } else {
            entry
                .var
                .iter()
                .enumerate()
                .find(|(_, &v)| v < 0.0)
                .map(|(i, &v)| format!("negative variance {v} at feature {i}"))
        };
        if let Some(reason) = reason {
            return Err(AdabnError::BadBankEntry {
                layer: layer.to_string(),
                domain: domain.to_string(),
                reason,
            });
        }
        self.entries
            .insert((layer.to_string(), domain.to_string()), entry);
        Ok(())
    }

    pub fn get(&self, layer: &str, domain: &str) -> Option<&BankEntry> {
        self.entries
            .get(&(layer.to_string(), domain.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in (layer, domain) key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &BankEntry)> {
        self.entries
            .iter()
            .map(|((l, d), e)| (l.as_str(), d.as_str(), e))
    }

    pub fn domains(&self) -> Vec<String> {
        let mut ds: Vec<String> = self
            .entries
            .keys()
            .map(|(_, d)| d.clone())
            .collect();
        ds.sort();
        ds.dedup();
        ds
    }

    /// Copy every entry of `other` into `self`; colliding keys take the
    /// incoming value.
    pub fn absorb(&mut self, other: &BnStatsBank) {
        for ((l, d), e) in &other.entries {
            self.entries.insert((l.clone(), d.clone()), e.clone());
        }
    }
}

/// How estimation passes feed normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    /// Layer k is estimated with layers before it already using the new
    /// domain's statistics, so each layer sees the input distribution it
    /// will see after the swap. The default.
    Sequential,
    /// All layers estimated in one conceptual pass under the source
    /// statistics. Comparison variant.
    Simultaneous,
}

/// Estimation below this many samples is allowed but flagged: single-batch
/// estimates help yet stay noisy.
pub const RECOMMENDED_MIN_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum EstimationWarning {
    FewSamples { got: usize, recommended: usize },
}

impl fmt::Display for EstimationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimationWarning::FewSamples { got, recommended } => write!(
                f,
                "estimating from {got} samples; below {recommended} the statistics are noisy"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationOutcome {
    /// (layer name, entry) in network order.
    pub entries: Vec<(String, BankEntry)>,
    pub warnings: Vec<EstimationWarning>,
}

/// Options shared by estimation and the adapt composition.
#[derive(Debug, Clone)]
pub struct AdaptOptions {
    pub mode: EstimationMode,
    /// Samples per forward pass during estimation; affects memory only,
    /// never the result.
    pub batch_size: usize,
    /// Stop after this layer (inclusive) when estimating, adapting only a
    /// prefix of the network.
    pub up_to_layer: Option<String>,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            mode: EstimationMode::Sequential,
            batch_size: 64,
            up_to_layer: None,
        }
    }
}

/// Estimate per-feature activation moments of every normalization layer on
/// one domain's data. Labels are ignored; passes run in eval style (scale and
/// shift applied, supplied statistics consumed, no gradients, no running-stat
/// updates).
pub fn estimate_domain_stats(
    model: &Model,
    data: &DomainDataset,
    opts: &AdaptOptions,
) -> Result<EstimationOutcome, AdabnError> {
    let n = data.inputs.shape()[0];
    if n == 0 {
        return Err(AdabnError::EmptyDataset);
    }
    if n < 2 {
        return Err(AdabnError::DegenerateSampleCount { got: n });
    }
    let mut warnings = Vec::new();
    if n < RECOMMENDED_MIN_SAMPLES {
        warnings.push(EstimationWarning::FewSamples {
            got: n,
            recommended: RECOMMENDED_MIN_SAMPLES,
        });
    }
    let limit = match &opts.up_to_layer {
        Some(name) => model.layer_index(name)?,
        None => model.layers().len().saturating_sub(1),
    };
    let bn_targets: Vec<(usize, String, usize)> = model
        .layers()
        .iter()
        .enumerate()
        .take(limit + 1)
        .filter_map(|(i, l)| {
            l.layer
                .as_batch_norm()
                .map(|bn| (i, l.name.clone(), bn.feature_count()))
        })
        .collect();
    if bn_targets.is_empty() {
        return Err(AdabnError::NoBnLayers);
    }
    let batch = opts.batch_size.max(1);
    let mut overrides = BnOverrides::new();
    let mut entries = Vec::with_capacity(bn_targets.len());
    for (layer_idx, name, width) in &bn_targets {
        let mut acc = WelfordAccumulator::new(*width);
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = data.select(&rows).expect("chunk rows are in range");
            let h = model.forward_eval_with(&chunk.inputs, &overrides, Some(*layer_idx))?;
            acc.update(&h)?;
            start = end;
        }
        let (mean, var) = acc.finalize()?;
        let entry = BankEntry {
            mean: mean.clone(),
            var: var.clone(),
            count: acc.count(),
        };
        if opts.mode == EstimationMode::Sequential {
            overrides.insert(name.clone(), (mean, var));
        }
        entries.push((name.clone(), entry));
    }
    Ok(EstimationOutcome { entries, warnings })
}

/// Point every normalization layer at one domain's statistics. Returns a new
/// model value; learned parameters are carried over untouched, so the swap is
/// weight-preserving by construction. Applying another domain afterwards
/// simply overwrites the statistics (last write wins).
pub fn apply_domain(
    model: &Model,
    bank: &BnStatsBank,
    domain_id: &str,
) -> Result<Model, AdabnError> {
    let mut adapted = model.clone();
    let names = adapted.bn_names();
    if names.is_empty() {
        return Err(AdabnError::NoBnLayers);
    }
    for name in names {
        let entry = bank
            .get(&name, domain_id)
            .ok_or_else(|| AdabnError::IncompleteBank {
                layer: name.clone(),
                domain: domain_id.to_string(),
            })?;
        adapted.set_bn_running(&name, &entry.mean, &entry.var)?;
    }
    adapted.set_bn_mode(BnMode::Eval);
    Ok(adapted)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: Model,
    pub bank: BnStatsBank,
    pub warnings: Vec<EstimationWarning>,
}

/// Full adaptation: estimate the domain's statistics, bank them, and return
/// the model with the swap applied. Introduces zero learnable parameters.
pub fn adapt(
    model: &Model,
    target: &DomainDataset,
    domain_id: &str,
    opts: &AdaptOptions,
) -> Result<AdaptOutcome, AdabnError> {
    let outcome = estimate_domain_stats(model, target, opts)?;
    let mut bank = BnStatsBank::new();
    for (layer, entry) in &outcome.entries {
        bank.insert(layer, domain_id, entry.clone())?;
    }
    let adapted = apply_domain(model, &bank, domain_id)?;
    Ok(AdaptOutcome {
        model: adapted,
        bank,
        warnings: outcome.warnings,
    })
}

/// Bank entries for a trained model's own running statistics, keyed as the
/// given domain. `count` should be the number of training samples the
/// running statistics tracked.
pub fn bank_from_running_stats(
    model: &Model,
    domain_id: &str,
    count: u64,
) -> Result<BnStatsBank, AdabnError> {
    let mut bank = BnStatsBank::new();
    for nl in model.layers() {
        if let Some(bn) = nl.layer.as_batch_norm() {
            bank.insert(
                &nl.name,
                domain_id,
                BankEntry {
                    mean: bn.running_mean().data().to_vec(),
                    var: bn.running_var().data().to_vec(),
                    count,
                },
            )?;
        }
    }
    if bank.is_empty() {
        return Err(AdabnError::NoBnLayers);
    }
    Ok(bank)
}
