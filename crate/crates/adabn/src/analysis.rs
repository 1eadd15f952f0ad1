//! Empirical probes around normalization statistics: mini-batch statistic
//! separability between domains, per-feature symmetric KL divergence of
//! activations before and after a statistics swap, and sensitivity of
//! adapted accuracy to how much target data feeds the estimate.

use std::collections::HashMap;
use std::io::Write;

use crate::adabn::{
    apply_domain, estimate_domain_stats, AdabnError, AdaptOptions, BnStatsBank, EstimationMode,
};
use crate::data::{DataError, DomainDataset};
use crate::layers::{Layer, LinearLayer};
use crate::model::{Model, ModelError};
use crate::rng::{derive_seed, derive_seed_indexed, seeded_permutation, seeded_rng};
use crate::tensor::{Tensor, TensorError};
use crate::train::{evaluate, train, TrainConfig, TrainError};
use rand::Rng as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adabn(#[from] AdabnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variance must be positive, got {0}")]
    NonpositiveVariance(f64),
    #[error("domain '{domain}' yields {got} full mini-batches; the probe needs at least {need}")]
    TooFewBatches {
        domain: String,
        got: usize,
        need: usize,
    },
    #[error("separability probe needs at least 2 domains")]
    TooFewDomains,
    #[error("layer '{layer}' has no feature with positive variance on both domains")]
    DegenerateLayer { layer: String },
    #[error("{0}")]
    BadArgument(&'static str),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Symmetric KL divergence between two univariate Gaussians given as
/// (mean, variance) pairs:
/// `KL(i||j) = log(s_j/s_i) + (s_i^2 + (m_i - m_j)^2) / (2 s_j^2) - 1/2`,
/// summed over both directions.
pub fn symmetric_kl(
    mu_i: f64,
    var_i: f64,
    mu_j: f64,
    var_j: f64,
) -> Result<f64, AnalysisError> {
    for v in [var_i, var_j] {
        if v.is_nan() || v <= 0.0 {
            return Err(AnalysisError::NonpositiveVariance(v));
        }
    }
    let kl = |m_a: f64, v_a: f64, m_b: f64, v_b: f64| -> f64 {
        0.5 * (v_b / v_a).ln() + (v_a + (m_a - m_b) * (m_a - m_b)) / (2.0 * v_b) - 0.5
    };
    Ok(kl(mu_i, var_i, mu_j, var_j) + kl(mu_j, var_j, mu_i, var_i))
}

/// Mini-batch statistics at one layer for one domain: the per-feature batch
/// means concatenated with the per-feature batch variances, length twice the
/// layer's feature count.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStatVector {
    pub layer_name: String,
    pub domain_id: String,
    pub values: Vec<f64>,
}

/// Batch statistics of the activations entering the named layer, one vector
/// per full mini-batch. Rows are shuffled deterministically, then chunked;
/// only full chunks are kept so every vector aggregates the same sample
/// count.
pub fn collect_stat_vectors(
    model: &Model,
    data: &DomainDataset,
    layer_name: &str,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BnStatVector>, AnalysisError> {
    if batch_size < 2 {
        return Err(AnalysisError::BadArgument(
            "batch_size must be at least 2 for batch statistics",
        ));
    }
    let n = data.sample_count();
    let order = seeded_permutation(n, derive_seed(seed, &format!("statvec:{}", data.domain_id)));
    let mut vectors = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size {
            break;
        }
        let sub = data.select(chunk)?;
        let h = model.input_to(layer_name, &sub.inputs, &HashMap::new())?;
        let fm = h.feature_matrix()?;
        let (mean, var) = fm.reduce_moments(&[0])?;
        let mut values = mean.data().to_vec();
        values.extend_from_slice(var.data());
        vectors.push(BnStatVector {
            layer_name: layer_name.to_string(),
            domain_id: data.domain_id.clone(),
            values,
        });
    }
    Ok(vectors)
}

/// Wide-format CSV of one layer's statistic vectors:
/// `domain,batch_index,m0..m{p-1},v0..v{p-1}`.
pub fn write_stat_vectors_csv(
    w: &mut impl Write,
    vectors: &[BnStatVector],
) -> Result<(), AnalysisError> {
    if vectors.is_empty() {
        return Ok(());
    }
    let p = vectors[0].values.len() / 2;
    let mut header = String::from("domain,batch_index");
    for j in 0..p {
        header.push_str(&format!(",m{j}"));
    }
    for j in 0..p {
        header.push_str(&format!(",v{j}"));
    }
    writeln!(w, "{header}")?;
    let mut per_domain: HashMap<&str, usize> = HashMap::new();
    for v in vectors {
        let idx = per_domain.entry(v.domain_id.as_str()).or_insert(0);
        let cells: Vec<String> = v.values.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{},{}", v.domain_id, idx, cells.join(","))?;
        *idx += 1;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LayerSeparability {
    pub layer_name: String,
    /// Held-out domain-classification accuracy of the linear probe.
    pub accuracy: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub vectors: Vec<BnStatVector>,
}

#[derive(Debug, Clone)]
pub struct SeparabilityReport {
    pub layers: Vec<LayerSeparability>,
    pub batch_size: usize,
}

/// Minimum full mini-batches per domain for the separability probe.
pub const MIN_PROBE_BATCHES: usize = 20;

/// Train a linear probe (logistic regression via this library's own SGD) to
/// classify which domain a mini-batch statistic vector came from, with a
/// fixed 80/20 train/test split. High held-out accuracy means the domains
/// are linearly separable in normalization-statistics space.
pub fn pilot_separability(
    model: &Model,
    domains: &[DomainDataset],
    layer_names: &[String],
    batch_size: usize,
    probe_seed: u64,
) -> Result<SeparabilityReport, AnalysisError> {
    if domains.len() < 2 {
        return Err(AnalysisError::TooFewDomains);
    }
    let mut layers = Vec::with_capacity(layer_names.len());
    for layer_name in layer_names {
        let mut vectors: Vec<BnStatVector> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for (d_idx, domain) in domains.iter().enumerate() {
            let vs = collect_stat_vectors(model, domain, layer_name, batch_size, probe_seed)?;
            if vs.len() < MIN_PROBE_BATCHES {
                return Err(AnalysisError::TooFewBatches {
                    domain: domain.domain_id.clone(),
                    got: vs.len(),
                    need: MIN_PROBE_BATCHES,
                });
            }
            labels.extend(std::iter::repeat_n(d_idx, vs.len()));
            vectors.extend(vs);
        }
        let width = vectors[0].values.len();
        let n = vectors.len();
        let split_seed = derive_seed(probe_seed, &format!("probe-split:{layer_name}"));
        let perm = seeded_permutation(n, split_seed);
        let train_n = (n * 8) / 10;
        let (train_idx, test_idx) = perm.split_at(train_n);

        // Standardize columns with train-split moments; constant columns are
        // left at their raw values. An affine feature map preserves linear
        // separability, so the probe's claim is unchanged.
        let mut col_mean = vec![0.0; width];
        let mut col_var = vec![0.0; width];
        for &i in train_idx {
            for (j, &v) in vectors[i].values.iter().enumerate() {
                col_mean[j] += v;
            }
        }
        for m in &mut col_mean {
            *m /= train_n as f64;
        }
        for &i in train_idx {
            for (j, &v) in vectors[i].values.iter().enumerate() {
                let d = v - col_mean[j];
                col_var[j] += d * d;
            }
        }
        for v in &mut col_var {
            *v /= train_n as f64;
        }
        let standardize = |values: &[f64]| -> Vec<f64> {
            values
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if col_var[j] > 1e-12 {
                        (v - col_mean[j]) / col_var[j].sqrt()
                    } else {
                        v
                    }
                })
                .collect()
        };
        let build = |idx: &[usize], tag: &str| -> Result<DomainDataset, AnalysisError> {
            let mut flat = Vec::with_capacity(idx.len() * width);
            let mut ls = Vec::with_capacity(idx.len());
            for &i in idx {
                flat.extend(standardize(&vectors[i].values));
                ls.push(labels[i]);
            }
            Ok(DomainDataset::new(
                format!("probe-{tag}"),
                Tensor::new(vec![idx.len(), width], flat)?,
                Some(ls),
                domains.len(),
            )?)
        };
        let train_set = build(train_idx, "train")?;
        let test_set = build(test_idx, "test")?;

        let mut rng = seeded_rng(derive_seed(probe_seed, &format!("probe-init:{layer_name}")));
        let probe = Model::new(vec![(
            "probe".into(),
            Layer::Linear(LinearLayer::init(width, domains.len(), &mut rng)),
        )])?;
        let cfg = TrainConfig {
            base_lr: 0.5,
            lr_drop_factor: 0.1,
            lr_drop_every: 200,
            epochs: 300,
            batch_size: 8,
            frozen_layers: Vec::new(),
            per_layer_lr_scale: HashMap::new(),
            seed: derive_seed(probe_seed, &format!("probe-train:{layer_name}")),
        };
        let trained = train(probe, &[train_set], &cfg)?;
        let metrics = evaluate(&trained.model, &test_set)?;
        layers.push(LayerSeparability {
            layer_name: layer_name.clone(),
            accuracy: metrics.accuracy,
            train_count: train_idx.len(),
            test_count: test_idx.len(),
            vectors,
        });
    }
    Ok(SeparabilityReport {
        layers,
        batch_size,
    })
}

/// Condition under which a divergence was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    BeforeAdapt,
    AfterAdapt,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::BeforeAdapt => "before_adapt",
            Condition::AfterAdapt => "after_adapt",
        }
    }
}

/// Per-feature symmetric KL divergence between two domains' activation
/// distributions at one layer's output.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub layer_name: String,
    pub condition: Condition,
    /// (feature index, divergence) for every feature with positive variance
    /// on both domains.
    pub per_feature: Vec<(usize, f64)>,
    /// Features excluded because variance fell below the threshold on either
    /// domain.
    pub excluded: Vec<usize>,
    pub mean: f64,
}

/// Variance below this is treated as zero when fitting per-feature Gaussians.
pub const VARIANCE_FLOOR: f64 = 1e-12;

fn gaussian_fit(
    model: &Model,
    layer: &str,
    data: &DomainDataset,
) -> Result<(Vec<f64>, Vec<f64>), AnalysisError> {
    let h = model.output_of(layer, &data.inputs, &HashMap::new())?;
    let fm = h.feature_matrix()?;
    let (mean, var) = fm.reduce_moments(&[0])?;
    Ok((mean.data().to_vec(), var.data().to_vec()))
}

fn divergence_between(
    layer: &str,
    condition: Condition,
    src_fit: (&[f64], &[f64]),
    tgt_fit: (&[f64], &[f64]),
) -> Result<DivergenceReport, AnalysisError> {
    let (sm, sv) = src_fit;
    let (tm, tv) = tgt_fit;
    let mut per_feature = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..sm.len() {
        if sv[j] <= VARIANCE_FLOOR || tv[j] <= VARIANCE_FLOOR {
            excluded.push(j);
            continue;
        }
        per_feature.push((j, symmetric_kl(sm[j], sv[j], tm[j], tv[j])?));
    }
    if per_feature.is_empty() {
        return Err(AnalysisError::DegenerateLayer {
            layer: layer.to_string(),
        });
    }
    let mean = per_feature.iter().map(|(_, d)| d).sum::<f64>() / per_feature.len() as f64;
    Ok(DivergenceReport {
        layer_name: layer.to_string(),
        condition,
        per_feature,
        excluded,
        mean,
    })
}

/// Fit per-feature Gaussians to each domain's activations at the named
/// layers' outputs and report the symmetric KL divergence per feature.
///
/// The before condition runs both domains through `model` as-is. When a bank
/// is given, the after condition reruns the target through the model with
/// the target domain's banked statistics applied (the source side is
/// unchanged by construction).
pub fn feature_divergence_profile(
    model: &Model,
    src: &DomainDataset,
    tgt: &DomainDataset,
    layer_names: &[String],
    bank: Option<&BnStatsBank>,
) -> Result<Vec<DivergenceReport>, AnalysisError> {
    let adapted = match bank {
        Some(b) => Some(apply_domain(model, b, &tgt.domain_id)?),
        None => None,
    };
    let mut reports = Vec::new();
    for layer in layer_names {
        let src_fit = gaussian_fit(model, layer, src)?;
        let tgt_before = gaussian_fit(model, layer, tgt)?;
        reports.push(divergence_between(
            layer,
            Condition::BeforeAdapt,
            (&src_fit.0, &src_fit.1),
            (&tgt_before.0, &tgt_before.1),
        )?);
        if let Some(adapted) = &adapted {
            let tgt_after = gaussian_fit(adapted, layer, tgt)?;
            reports.push(divergence_between(
                layer,
                Condition::AfterAdapt,
                (&src_fit.0, &src_fit.1),
                (&tgt_after.0, &tgt_after.1),
            )?);
        }
    }
    Ok(reports)
}

/// CSV of divergence reports in long format:
/// `layer,condition,feature,divergence` with per-layer mean rows appended as
/// `layer,condition,mean,<value>`.
pub fn write_divergence_csv(
    w: &mut impl Write,
    reports: &[DivergenceReport],
) -> Result<(), AnalysisError> {
    writeln!(w, "layer,condition,feature,divergence")?;
    for r in reports {
        for (j, d) in &r.per_feature {
            writeln!(w, "{},{},{},{}", r.layer_name, r.condition.as_str(), j, d)?;
        }
        for j in &r.excluded {
            writeln!(w, "{},{},{},excluded", r.layer_name, r.condition.as_str(), j)?;
        }
        writeln!(w, "{},{},mean,{}", r.layer_name, r.condition.as_str(), r.mean)?;
    }
    Ok(())
}

/// One row of the sensitivity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub batch_count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub trials: usize,
    /// True when the requested sample exceeded the dataset and rows were
    /// drawn with replacement instead.
    pub with_replacement: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub batch_size: usize,
}

pub fn write_sweep_csv(w: &mut impl Write, report: &SweepReport) -> Result<(), AnalysisError> {
    writeln!(
        w,
        "batch_count,mean_accuracy,std_accuracy,trials,with_replacement"
    )?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.batch_count, r.mean_accuracy, r.std_accuracy, r.trials, r.with_replacement
        )?;
    }
    Ok(())
}

/// How adapted accuracy depends on the number of target mini-batches feeding
/// the statistics estimate. For each batch count, `trials` independent row
/// samples are drawn, statistics are estimated from only those rows, applied,
/// and evaluated on the full labeled target set.
///
/// Sampling is without replacement; when `count * batch_size` equals the
/// dataset size the full data is used in its canonical order, which is
/// byte-identical to the plain adapt path. When the request exceeds the
/// dataset, rows are drawn with replacement and the row is flagged.
pub fn sensitivity_sweep(
    model: &Model,
    target: &DomainDataset,
    batch_counts: &[usize],
    batch_size: usize,
    trials: usize,
    seed: u64,
) -> Result<SweepReport, AnalysisError> {
    if batch_counts.is_empty() || batch_counts.contains(&0) {
        return Err(AnalysisError::BadArgument(
            "batch_counts must be non-empty and positive",
        ));
    }
    if trials == 0 {
        return Err(AnalysisError::BadArgument("trials must be at least 1"));
    }
    if target.labels.is_none() {
        return Err(AnalysisError::Train(TrainError::Unlabeled(
            target.domain_id.clone(),
        )));
    }
    let n = target.sample_count();
    let opts = AdaptOptions {
        mode: EstimationMode::Sequential,
        batch_size,
        up_to_layer: None,
    };
    let mut rows = Vec::with_capacity(batch_counts.len());
    for &count in batch_counts {
        let want = count * batch_size;
        let with_replacement = want > n;
        let mut accs = Vec::with_capacity(trials);
        for trial in 0..trials {
            let trial_seed =
                derive_seed_indexed(seed, &format!("sweep-n{count}"), trial as u64);
            let sample_rows: Vec<usize> = if want == n {
                (0..n).collect()
            } else if with_replacement {
                let mut rng = seeded_rng(trial_seed);
                (0..want).map(|_| rng.random_range(0..n)).collect()
            } else {
                seeded_permutation(n, trial_seed)[..want].to_vec()
            };
            let sample = target.select(&sample_rows)?;
            let est = estimate_domain_stats(model, &sample, &opts)?;
            let mut bank = BnStatsBank::new();
            for (layer, entry) in &est.entries {
                bank.insert(layer, &target.domain_id, entry.clone())?;
            }
            let adapted = apply_domain(model, &bank, &target.domain_id)?;
            let metrics = evaluate(&adapted, target)?;
            accs.push(metrics.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / trials as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / trials as f64;
        rows.push(SweepRow {
            batch_count: count,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            trials,
            with_replacement,
        });
    }
    Ok(SweepReport { rows, batch_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, shift_domain, ShiftSpec};
    use crate::layers::BatchNormLayer;
    use crate::rng::seeded_rng;

    #[test]
    fn symmetric_kl_identical_is_zero() {
        assert_eq!(symmetric_kl(0.3, 2.0, 0.3, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_kl_unit_shift_is_one() {
        let d = symmetric_kl(0.0, 1.0, 1.0, 1.0).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative() {
        let mut rng = seeded_rng(7);
        for _ in 0..100 {
            let m1 = rng.random_range(-5.0..5.0);
            let m2 = rng.random_range(-5.0..5.0);
            let v1 = rng.random_range(0.05..4.0);
            let v2 = rng.random_range(0.05..4.0);
            let a = symmetric_kl(m1, v1, m2, v2).unwrap();
            let b = symmetric_kl(m2, v2, m1, v1).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0);
            if (m1 - m2).abs() > 1e-3 || (v1 - v2).abs() > 1e-3 {
                assert!(a > 0.0);
            }
        }
    }

    #[test]
    fn symmetric_kl_rejects_nonpositive_variance() {
        assert!(symmetric_kl(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(symmetric_kl(0.0, 1.0, 0.0, -2.0).is_err());
    }

    /// Numerical-integration oracle: trapezoid rule over both directed KL
    /// integrands on a wide grid.
    fn symmetric_kl_numeric(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        let (s1, s2) = (v1.sqrt(), v2.sqrt());
        let lo = (m1 - 12.0 * s1).min(m2 - 12.0 * s2);
        let hi = (m1 + 12.0 * s1).max(m2 + 12.0 * s2);
        let steps = 200_000;
        let dx = (hi - lo) / steps as f64;
        let pdf = |x: f64, m: f64, v: f64| {
            (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        };
        let integrand = |x: f64| {
            let f = pdf(x, m1, v1);
            let g = pdf(x, m2, v2);
            let fg = if f > 0.0 && g > 0.0 { f * (f / g).ln() } else { 0.0 };
            let gf = if f > 0.0 && g > 0.0 { g * (g / f).ln() } else { 0.0 };
            fg + gf
        };
        let mut acc = 0.5 * (integrand(lo) + integrand(hi));
        for k in 1..steps {
            acc += integrand(lo + k as f64 * dx);
        }
        acc * dx
    }

    #[test]
    fn symmetric_kl_matches_numerical_integration() {
        let mut rng = seeded_rng(11);
        for trial in 0..20 {
            let m1 = rng.random_range(-2.0..2.0);
            let m2 = rng.random_range(-2.0..2.0);
            let v1 = rng.random_range(0.2..3.0);
            let v2 = rng.random_range(0.2..3.0);
            let closed = symmetric_kl(m1, v1, m2, v2).unwrap();
            let numeric = symmetric_kl_numeric(m1, v1, m2, v2);
            assert!(
                (closed - numeric).abs() < 1e-4,
                "trial {trial}: closed {closed} vs numeric {numeric}"
            );
        }
    }

    fn bn_model(dim: usize, hidden: usize, classes: usize, seed: u64) -> Model {
        let mut rng = seeded_rng(seed);
        Model::new(vec![
            (
                "fc1".into(),
                Layer::Linear(LinearLayer::init(dim, hidden, &mut rng)),
            ),
            (
                "bn1".into(),
                Layer::BatchNorm(BatchNormLayer::new(hidden, 0.1, 1e-5).unwrap()),
            ),
            ("relu1".into(), Layer::Relu),
            (
                "fc2".into(),
                Layer::Linear(LinearLayer::init(hidden, hidden, &mut rng)),
            ),
            (
                "bn2".into(),
                Layer::BatchNorm(BatchNormLayer::new(hidden, 0.1, 1e-5).unwrap()),
            ),
            ("relu2".into(), Layer::Relu),
            (
                "head".into(),
                Layer::Linear(LinearLayer::init(hidden, classes, &mut rng)),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn stat_vector_length_is_twice_feature_count() {
        let model = bn_model(4, 6, 2, 13);
        let data = make_blobs(2, 40, 4, 3.0, 15).unwrap();
        let vs = collect_stat_vectors(&model, &data, "bn1", 8, 17).unwrap();
        assert_eq!(vs.len(), 10);
        for v in &vs {
            assert_eq!(v.values.len(), 12);
        }
    }

    #[test]
    fn probe_requires_enough_batches() {
        let model = bn_model(4, 6, 2, 19);
        let a = make_blobs(2, 30, 4, 3.0, 21).unwrap(); // 60 rows -> 7 batches of 8
        let b = make_blobs(2, 30, 4, 3.0, 23).unwrap();
        let err = pilot_separability(&model, &[a, b], &["bn1".into()], 8, 25).unwrap_err();
        assert!(matches!(err, AnalysisError::TooFewBatches { need: 20, .. }));
    }

    #[test]
    fn divergence_profile_same_data_is_zero() {
        let model = bn_model(4, 6, 2, 27);
        let data = make_blobs(2, 100, 4, 3.0, 29).unwrap();
        let reports =
            feature_divergence_profile(&model, &data, &data, &["bn1".into(), "bn2".into()], None)
                .unwrap();
        assert_eq!(reports.len(), 2);
        for r in reports {
            assert_eq!(r.condition, Condition::BeforeAdapt);
            assert!(r.mean < 0.01, "layer {} mean {}", r.layer_name, r.mean);
        }
    }

    #[test]
    fn divergence_profile_self_consistency_shrinks_with_samples() {
        // two independent halves of one generation process: divergence falls
        // as the halves grow
        let model = bn_model(4, 8, 2, 31);
        let mut means = Vec::new();
        for &per_class in &[50usize, 500, 5000] {
            let all = make_blobs(2, per_class * 2, 4, 3.0, 33).unwrap();
            let n = all.sample_count();
            // rows are blocked by class, so split even/odd to get two
            // same-distribution halves
            let half_a: Vec<usize> = (0..n).step_by(2).collect();
            let half_b: Vec<usize> = (1..n).step_by(2).collect();
            let a = all.select(&half_a).unwrap();
            let b = all.select(&half_b).unwrap();
            let reports =
                feature_divergence_profile(&model, &a, &b, &["bn1".into()], None).unwrap();
            means.push(reports[0].mean);
        }
        assert!(
            means[0] > means[1] && means[1] > means[2],
            "divergence should shrink with sample count: {means:?}"
        );
        assert!(means[2] < 0.01);
    }

    #[test]
    fn divergence_profile_drops_after_adaptation() {
        let src = make_blobs(3, 200, 4, 4.0, 37).unwrap();
        let spec = ShiftSpec::translation(vec![3.0, -2.0, 1.5, 0.5], 39);
        let tgt = shift_domain(&src, &spec, "target").unwrap();
        // seat the source domain's statistics first, as training would
        let fresh = bn_model(4, 8, 3, 35);
        let model = crate::adabn::adapt(
            &fresh,
            &src.unlabeled(),
            &src.domain_id,
            &AdaptOptions::default(),
        )
        .unwrap()
        .model;
        let adapt_out =
            crate::adabn::adapt(&model, &tgt.unlabeled(), "target", &AdaptOptions::default())
                .unwrap();
        let layers = vec!["bn1".to_string(), "bn2".to_string()];
        let reports =
            feature_divergence_profile(&model, &src, &tgt, &layers, Some(&adapt_out.bank))
                .unwrap();
        assert_eq!(reports.len(), 4);
        for pair in reports.chunks(2) {
            let before = &pair[0];
            let after = &pair[1];
            assert_eq!(before.condition, Condition::BeforeAdapt);
            assert_eq!(after.condition, Condition::AfterAdapt);
            assert!(
                after.mean < before.mean,
                "layer {}: after {} !< before {}",
                before.layer_name,
                after.mean,
                before.mean
            );
        }
    }

    #[test]
    fn divergence_excludes_dead_features() {
        // a model whose first linear layer has a zero row produces a
        // zero-variance feature at bn1's input; after relu the bn1 output of
        // that feature is constant beta, still zero variance at bn2's input
        // for that path. Check bookkeeping via a dead output at bn1.
        let mut model = bn_model(4, 6, 2, 41);
        {
            let nl = &mut model.layers_mut()[0];
            if let Layer::Linear(l) = &nl.layer {
                let mut w = l.weight().clone();
                let p2 = w.shape()[1];
                for i in 0..w.shape()[0] {
                    w.data_mut()[i * p2] = 0.0; // kill output feature 0
                }
                let mut b = l.bias().clone();
                b.data_mut()[0] = 0.0;
                nl.layer = Layer::Linear(LinearLayer::new(w, b).unwrap());
            }
        }
        let data = make_blobs(2, 100, 4, 3.0, 43).unwrap();
        let reports =
            feature_divergence_profile(&model, &data, &data, &["bn1".into()], None).unwrap();
        assert!(
            reports[0].excluded.contains(&0),
            "feature 0 should be excluded, got {:?}",
            reports[0].excluded
        );
    }

    #[test]
    fn sweep_validates_arguments() {
        let model = bn_model(4, 6, 2, 45);
        let data = make_blobs(2, 50, 4, 3.0, 47).unwrap();
        assert!(sensitivity_sweep(&model, &data, &[], 8, 3, 0).is_err());
        assert!(sensitivity_sweep(&model, &data, &[0], 8, 3, 0).is_err());
        assert!(sensitivity_sweep(&model, &data, &[1], 8, 0, 0).is_err());
        assert!(sensitivity_sweep(&model, &data.unlabeled(), &[1], 8, 2, 0).is_err());
    }

    #[test]
    fn sweep_full_count_matches_adapt_exactly() {
        let model = bn_model(4, 6, 2, 49);
        let data = make_blobs(2, 64, 4, 6.0, 51).unwrap(); // 128 rows = 16 batches of 8
        let report = sensitivity_sweep(&model, &data, &[16], 8, 3, 53).unwrap();
        let adapt_out =
            crate::adabn::adapt(&model, &data, &data.domain_id, &AdaptOptions {
                batch_size: 8,
                ..AdaptOptions::default()
            })
            .unwrap();
        let direct = evaluate(&adapt_out.model, &data).unwrap();
        let row = &report.rows[0];
        assert!(!row.with_replacement);
        assert_eq!(row.mean_accuracy, direct.accuracy, "full sweep must equal adapt");
        assert_eq!(row.std_accuracy, 0.0, "full-data trials are identical");
    }

    #[test]
    fn sweep_flags_with_replacement() {
        let model = bn_model(4, 6, 2, 55);
        let data = make_blobs(2, 20, 4, 6.0, 57).unwrap(); // 40 rows
        let report = sensitivity_sweep(&model, &data, &[10], 8, 2, 59).unwrap();
        assert!(report.rows[0].with_replacement, "80 > 40 rows needs replacement");
    }

    #[test]
    fn sweep_csv_shape() {
        let report = SweepReport {
            rows: vec![SweepRow {
                batch_count: 4,
                mean_accuracy: 0.9,
                std_accuracy: 0.01,
                trials: 5,
                with_replacement: false,
            }],
            batch_size: 64,
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("4,0.9,0.01,5,false"));
    }
}
