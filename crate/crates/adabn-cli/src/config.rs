//! Declarative experiment description. A config file is the unit of review:
//! it pins the dataset recipe, the architecture, the training schedule, the
//! adaptation options, and the analysis selections under one master seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use adabn::data::ShiftSpec;
use adabn::rng::derive_seed;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random choice in a run derives from it.
    pub seed: u64,
    /// Run directory, overridable with --out.
    pub out_dir: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
    #[serde(default)]
    pub adapt: AdaptParams,
    #[serde(default)]
    pub analysis: AnalysisParams,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: GeneratorConfig,
    #[serde(default = "default_source_id")]
    pub source_id: String,
    /// Covariate-shifted domains derived from the source.
    pub targets: Vec<TargetConfig>,
}

fn default_source_id() -> String {
    "source".to_string()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorConfig {
    Blobs(BlobsParams),
    DigitsGrid(DigitsParams),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsParams {
    pub class_count: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DigitsParams {
    pub per_class: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub domain_id: String,
    pub shift: ShiftParams,
}

/// Affine covariate shift `x' = scale (.) x + shift + noise`, with an
/// optional rotation of the first two features of flat inputs.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    #[serde(default)]
    pub rotation_angle: Option<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl ShiftParams {
    /// The noise seed derives from the master seed and the domain id, so two
    /// targets with the same recipe still draw distinct noise.
    pub fn to_spec(&self, master_seed: u64, domain_id: &str) -> ShiftSpec {
        ShiftSpec {
            input_shift: self.input_shift.clone(),
            input_scale: self.input_scale.clone(),
            rotation_angle: self.rotation_angle,
            noise_sigma: self.noise_sigma,
            seed: derive_seed(master_seed, &format!("shift:{domain_id}")),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp(MlpParams),
    Cnn(CnnParams),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MlpParams {
    pub hidden: usize,
}

/// Channel widths and kernel sizes are fixed by the preset; the image size
/// and class count come from the generator.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CnnParams {}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationModeParam {
    Sequential,
    Simultaneous,
}

impl From<EstimationModeParam> for adabn::adabn::EstimationMode {
    fn from(m: EstimationModeParam) -> Self {
        match m {
            EstimationModeParam::Sequential => adabn::adabn::EstimationMode::Sequential,
            EstimationModeParam::Simultaneous => adabn::adabn::EstimationMode::Simultaneous,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptParams {
    pub estimation_mode: EstimationModeParam,
    /// Samples per estimation pass; memory knob, never changes the result.
    pub batch_size: usize,
    /// Cap on how many batches of target data feed the estimate; null means
    /// all of it.
    pub batches: Option<usize>,
}

impl Default for AdaptParams {
    fn default() -> Self {
        Self {
            estimation_mode: EstimationModeParam::Sequential,
            batch_size: 64,
            batches: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    Divergence,
    Pilot,
    Sensitivity,
}

impl AnalysisKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnalysisKind::Divergence => "divergence",
            AnalysisKind::Pilot => "pilot",
            AnalysisKind::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisParams {
    /// Normalization layers to analyze; empty means every one in the model.
    pub layers: Vec<String>,
    pub probe_batch_size: usize,
    pub sweep_batch_counts: Vec<usize>,
    pub sweep_batch_size: usize,
    pub sweep_trials: usize,
    pub run: Vec<AnalysisKind>,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            probe_batch_size: 32,
            sweep_batch_counts: vec![1, 2, 4, 8, 16, 32],
            sweep_batch_size: 64,
            sweep_trials: 5,
            run: vec![
                AnalysisKind::Divergence,
                AnalysisKind::Pilot,
                AnalysisKind::Sensitivity,
            ],
        }
    }
}

/// Domain ids become file names, so they stay to a safe alphabet.
fn valid_domain_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ExperimentConfig {
    /// Cross-field checks serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        let ds = &self.dataset;
        if ds.targets.is_empty() {
            return Err("dataset.targets: need at least one target domain".into());
        }
        if !valid_domain_id(&ds.source_id) {
            return Err(format!(
                "dataset.source_id: '{}' must be nonempty [A-Za-z0-9_-]",
                ds.source_id
            ));
        }
        let mut seen = vec![ds.source_id.as_str()];
        for t in &ds.targets {
            if !valid_domain_id(&t.domain_id) {
                return Err(format!(
                    "dataset.targets: domain id '{}' must be nonempty [A-Za-z0-9_-]",
                    t.domain_id
                ));
            }
            if seen.contains(&t.domain_id.as_str()) {
                return Err(format!(
                    "dataset.targets: domain id '{}' appears more than once",
                    t.domain_id
                ));
            }
            seen.push(&t.domain_id);
        }
        match (&ds.generator, &self.model) {
            (GeneratorConfig::Blobs(b), ModelConfig::Mlp(_)) => {
                for t in &ds.targets {
                    for (field, v) in [
                        ("input_shift", &t.shift.input_shift),
                        ("input_scale", &t.shift.input_scale),
                    ] {
                        if v.len() != b.dim {
                            return Err(format!(
                                "dataset.targets[{}].shift.{field}: length {} does not match generator dim {}",
                                t.domain_id,
                                v.len(),
                                b.dim
                            ));
                        }
                    }
                }
            }
            (GeneratorConfig::DigitsGrid(_), ModelConfig::Cnn(_)) => {}
            (GeneratorConfig::Blobs(_), ModelConfig::Cnn(_)) => {
                return Err("model.cnn needs image data; pair it with dataset.generator.digits_grid".into());
            }
            (GeneratorConfig::DigitsGrid(_), ModelConfig::Mlp(_)) => {
                return Err("model.mlp needs flat feature data; pair it with dataset.generator.blobs".into());
            }
        }
        if let Some(0) = self.adapt.batches {
            return Err("adapt.batches: must be at least 1 when set".into());
        }
        if self.adapt.batch_size == 0 {
            return Err("adapt.batch_size: must be at least 1".into());
        }
        Ok(())
    }
}

/// A parsed config plus the digest of the exact bytes it was parsed from.
/// The digest is what reports and checkpoints embed.
pub struct LoadedConfig {
    pub cfg: ExperimentConfig,
    pub hash: Vec<u8>,
}

impl LoadedConfig {
    pub fn hash_hex(&self) -> String {
        hex(&self.hash)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> Vec<u8> {
    Sha256::digest(bytes).to_vec()
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let raw = fs::read(path)
        .map_err(|e| CliError::File(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_slice(&raw);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        CliError::Config(format!(
            "{}: {} (key path: {})",
            path.display(),
            e.inner(),
            e.path()
        ))
    })?;
    cfg.validate()
        .map_err(|msg| CliError::Config(format!("{}: {msg}", path.display())))?;
    Ok(LoadedConfig {
        cfg,
        hash: sha256_bytes(&raw),
    })
}
