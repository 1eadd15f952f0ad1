//! Stock architectures and the default covariate-shift benchmark shared by
//! the command-line tool and the acceptance suite. Everything here is built
//! from one master seed so a run is reproducible end to end.

use crate::data::{make_blobs, shift_domain, DataError, DomainDataset, ShiftSpec};
use crate::layers::{BatchNormLayer, Conv2dLayer, Layer, LayerError, LinearLayer};
use crate::model::{Model, ModelError};
use crate::rng::{derive_seed, seeded_rng};
use crate::train::TrainConfig;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PresetError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("image size {0} is too small for the convolutional preset; need at least 8")]
    ImageTooSmall(usize),
    #[error("{0}")]
    BadArgument(&'static str),
}

/// Three-block multilayer perceptron with normalization after each hidden
/// linear layer: fc1 - bn1 - relu1 - fc2 - bn2 - relu2 - head.
pub fn mlp(
    input_dim: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<Model, PresetError> {
    if input_dim == 0 || hidden == 0 || classes < 2 {
        return Err(PresetError::BadArgument(
            "mlp needs input_dim >= 1, hidden >= 1, classes >= 2",
        ));
    }
    let mut rng = seeded_rng(derive_seed(seed, "mlp-init"));
    Ok(Model::new(vec![
        (
            "fc1".into(),
            Layer::Linear(LinearLayer::init(input_dim, hidden, &mut rng)),
        ),
        (
            "bn1".into(),
            Layer::BatchNorm(BatchNormLayer::new(hidden, 0.1, 1e-5)?),
        ),
        ("relu1".into(), Layer::Relu),
        (
            "fc2".into(),
            Layer::Linear(LinearLayer::init(hidden, hidden, &mut rng)),
        ),
        (
            "bn2".into(),
            Layer::BatchNorm(BatchNormLayer::new(hidden, 0.1, 1e-5)?),
        ),
        ("relu2".into(), Layer::Relu),
        (
            "head".into(),
            Layer::Linear(LinearLayer::init(hidden, classes, &mut rng)),
        ),
    ])?)
}

/// Two-stage convolutional network for single-channel square images:
/// conv1(3x3, stride 1) - bn1 - relu1 - conv2(3x3, stride 2) - bn2 - relu2 -
/// flatten - head.
pub fn cnn(
    in_channels: usize,
    image_size: usize,
    classes: usize,
    seed: u64,
) -> Result<Model, PresetError> {
    if image_size < 8 {
        return Err(PresetError::ImageTooSmall(image_size));
    }
    if in_channels == 0 || classes < 2 {
        return Err(PresetError::BadArgument(
            "cnn needs in_channels >= 1 and classes >= 2",
        ));
    }
    let c1 = 6;
    let c2 = 12;
    let after1 = image_size - 2; // 3x3 valid, stride 1
    let after2 = (after1 - 3) / 2 + 1; // 3x3 valid, stride 2
    let mut rng = seeded_rng(derive_seed(seed, "cnn-init"));
    Ok(Model::new(vec![
        (
            "conv1".into(),
            Layer::Conv2d(Conv2dLayer::init(c1, in_channels, 3, 3, 1, &mut rng)),
        ),
        (
            "bn1".into(),
            Layer::BatchNorm(BatchNormLayer::new(c1, 0.1, 1e-5)?),
        ),
        ("relu1".into(), Layer::Relu),
        (
            "conv2".into(),
            Layer::Conv2d(Conv2dLayer::init(c2, c1, 3, 3, 2, &mut rng)),
        ),
        (
            "bn2".into(),
            Layer::BatchNorm(BatchNormLayer::new(c2, 0.1, 1e-5)?),
        ),
        ("relu2".into(), Layer::Relu),
        ("flat".into(), Layer::Flatten),
        (
            "head".into(),
            Layer::Linear(LinearLayer::init(c2 * after2 * after2, classes, &mut rng)),
        ),
    ])?)
}

/// The default benchmark: Gaussian class blobs as the source domain and a
/// translated, anisotropically rescaled copy as the target. Class separation
/// is tight enough that the transform pushes clusters across the trained
/// decision boundaries, while a statistics swap restores most of the source
/// accuracy.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    /// Per-coordinate translation applied to the target domain.
    pub shift: Vec<f64>,
    /// Per-coordinate scaling applied to the target domain.
    pub scale: Vec<f64>,
    pub noise_sigma: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn with_seed(seed: u64) -> Self {
        let dim = 16;
        // alternating-sign translation of 3 within-class standard deviations
        // per coordinate plus alternating stretch/squeeze, against class
        // separation 2.2
        let shift = (0..dim)
            .map(|i| if i % 2 == 0 { 3.0 } else { -3.0 })
            .collect();
        let scale = (0..dim)
            .map(|i| if i % 2 == 0 { 1.5 } else { 0.7 })
            .collect();
        Self {
            class_count: 3,
            per_class: 700,
            dim,
            separation: 2.2,
            shift,
            scale,
            noise_sigma: 0.05,
            hidden: 32,
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: 0.05,
            lr_drop_factor: 0.1,
            lr_drop_every: 30,
            epochs: 40,
            batch_size: 64,
            frozen_layers: Vec::new(),
            per_layer_lr_scale: HashMap::new(),
            seed: derive_seed(self.seed, "benchmark-train"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub source: DomainDataset,
    /// Labeled target; adaptation must only ever see `target.unlabeled()`,
    /// labels exist for evaluation.
    pub target: DomainDataset,
    /// Untrained model; train with `spec.train_config()`.
    pub model: Model,
}

pub fn default_benchmark(seed: u64) -> Result<Benchmark, PresetError> {
    build_benchmark(BenchmarkSpec::with_seed(seed))
}

pub fn build_benchmark(spec: BenchmarkSpec) -> Result<Benchmark, PresetError> {
    let source = make_blobs(
        spec.class_count,
        spec.per_class,
        spec.dim,
        spec.separation,
        derive_seed(spec.seed, "benchmark-source"),
    )?
    .with_domain_id("source");
    let shift_spec = ShiftSpec {
        input_shift: spec.shift.clone(),
        input_scale: spec.scale.clone(),
        rotation_angle: None,
        noise_sigma: spec.noise_sigma,
        seed: derive_seed(spec.seed, "benchmark-shift"),
    };
    let target = shift_domain(&source, &shift_spec, "target")?;
    let model = mlp(
        spec.dim,
        spec.hidden,
        spec.class_count,
        derive_seed(spec.seed, "benchmark-model"),
    )?;
    Ok(Benchmark {
        spec,
        source,
        target,
        model,
    })
}

/// Two labeled source domains plus one unlabeled-at-adaptation target, all
/// derived from a common generating process: domain B is a mildly shifted
/// copy of A, the target a strongly shifted one. Exercises the multi-domain
/// path where each domain owns its bank entries.
#[derive(Debug, Clone)]
pub struct MultiSourceBenchmark {
    pub source_a: DomainDataset,
    pub source_b: DomainDataset,
    pub target: DomainDataset,
    pub model: Model,
    pub train: TrainConfig,
}

pub fn multi_source_benchmark(seed: u64) -> Result<MultiSourceBenchmark, PresetError> {
    let dim = 16;
    let classes = 3;
    let base = make_blobs(
        classes,
        500,
        dim,
        2.2,
        derive_seed(seed, "multi-base"),
    )?
    .with_domain_id("source-a");
    let mild = ShiftSpec {
        input_shift: (0..dim).map(|i| if i % 2 == 0 { 0.6 } else { -0.6 }).collect(),
        input_scale: vec![1.0; dim],
        rotation_angle: None,
        noise_sigma: 0.05,
        seed: derive_seed(seed, "multi-mild"),
    };
    let strong = ShiftSpec {
        input_shift: (0..dim).map(|i| if i % 2 == 0 { -3.0 } else { 3.0 }).collect(),
        input_scale: (0..dim).map(|i| if i % 2 == 0 { 0.7 } else { 1.5 }).collect(),
        rotation_angle: None,
        noise_sigma: 0.05,
        seed: derive_seed(seed, "multi-strong"),
    };
    let source_b = shift_domain(&base, &mild, "source-b")?;
    let target = shift_domain(&base, &strong, "target")?;
    let model = mlp(dim, 32, classes, derive_seed(seed, "multi-model"))?;
    let train = TrainConfig {
        base_lr: 0.05,
        lr_drop_factor: 0.1,
        lr_drop_every: 30,
        epochs: 40,
        batch_size: 64,
        frozen_layers: Vec::new(),
        per_layer_lr_scale: HashMap::new(),
        seed: derive_seed(seed, "multi-train"),
    };
    Ok(MultiSourceBenchmark {
        source_a: base,
        source_b,
        target,
        model,
        train,
    })
}
