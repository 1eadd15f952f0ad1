//! Synthetic multi-domain datasets with controllable covariate shift.
//!
//! Two generators (Gaussian class blobs for dense networks, procedural glyph
//! images for convolutional ones) plus affine shift transforms that
//! manufacture a target domain from a source domain while preserving labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, BinReadError};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::{Tensor, TensorError};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset has no samples")]
    Empty,
    #[error("label {label} at row {row} out of range for {classes} classes")]
    LabelRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("labels length {got} does not match sample count {expected}")]
    LabelCount { expected: usize, got: usize },
    #[error("{field} length {got} does not match feature width {expected}")]
    SpecWidth {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("scale at index {index} must be positive, got {value}")]
    BadScale { index: usize, value: f64 },
    #[error("noise_sigma must be nonnegative, got {0}")]
    BadNoise(f64),
    #[error("rotation needs rank-2 inputs with at least 2 features")]
    RotationUnsupported,
    #[error("per-class transform needs a labeled dataset")]
    MissingLabels,
    #[error("expected {expected} per-class specs, got {got}")]
    SpecCount { expected: usize, got: usize },
    #[error("class centers coincide; separation cannot be scaled")]
    DegenerateCenters,
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error("image_size must be at least 8, got {0}")]
    ImageTooSmall(usize),
    #[error("row index {index} out of range for {count} samples")]
    RowOutOfRange { index: usize, count: usize },
    #[error(transparent)]
    Read(#[from] BinReadError),
    #[error("file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: String, got: String },
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u32),
}

/// A labeled (or unlabeled) collection of samples drawn from one domain.
/// The first input axis indexes samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn new(
        domain_id: String,
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        let n = inputs.shape()[0];
        if n == 0 {
            return Err(DataError::Empty);
        }
        if class_count == 0 {
            return Err(DataError::NonPositive {
                what: "class_count",
            });
        }
        if let Some(ls) = &labels {
            if ls.len() != n {
                return Err(DataError::LabelCount {
                    expected: n,
                    got: ls.len(),
                });
            }
            if let Some((row, &label)) = ls.iter().enumerate().find(|(_, &l)| l >= class_count) {
                return Err(DataError::LabelRange {
                    row,
                    label,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            domain_id,
            inputs,
            labels,
            class_count,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.inputs.shape()[0]
    }

    /// Flat values per sample.
    pub fn sample_width(&self) -> usize {
        self.inputs.len() / self.sample_count()
    }

    pub fn with_domain_id(mut self, domain_id: &str) -> Self {
        self.domain_id = domain_id.to_string();
        self
    }

    /// Copy of the dataset without labels, for unsupervised paths.
    pub fn unlabeled(&self) -> Self {
        Self {
            domain_id: self.domain_id.clone(),
            inputs: self.inputs.clone(),
            labels: None,
            class_count: self.class_count,
        }
    }

    /// New dataset holding the given sample rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, DataError> {
        let n = self.sample_count();
        let width = self.sample_width();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(DataError::RowOutOfRange { index: r, count: n });
            }
            data.extend_from_slice(&self.inputs.data()[r * width..(r + 1) * width]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = rows.len();
        let labels = self
            .labels
            .as_ref()
            .map(|ls| rows.iter().map(|&r| ls[r]).collect());
        Self::new(
            self.domain_id.clone(),
            Tensor::new(shape, data)?,
            labels,
            self.class_count,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Byte layout (all integers little-endian):
    /// magic "ADBNDATA", u32 version, domain_id (u32 length + UTF-8),
    /// u64 class_count, u64 rank, rank u64 extents, raw f64 payload,
    /// u8 label flag, then N u64 labels when the flag is 1.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DataError> {
        w.write_all(DATASET_MAGIC)?;
        binio::write_u32(w, DATASET_VERSION)?;
        binio::write_str(w, &self.domain_id)?;
        binio::write_u64(w, self.class_count as u64)?;
        binio::write_u64(w, self.inputs.rank() as u64)?;
        for &e in self.inputs.shape() {
            binio::write_u64(w, e as u64)?;
        }
        binio::write_f64_slice(w, self.inputs.data())?;
        match &self.labels {
            Some(ls) => {
                w.write_all(&[1u8])?;
                for &l in ls {
                    binio::write_u64(w, l as u64)?;
                }
            }
            None => w.write_all(&[0u8])?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DataError> {
        let mut magic = [0u8; 8];
        binio::read_exact_describing(r, &mut magic, "dataset magic")?;
        if &magic != DATASET_MAGIC {
            return Err(DataError::BadMagic {
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
                got: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = binio::read_u32(r, "dataset version")?;
        if version != DATASET_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let domain_id = binio::read_str(r, "domain_id")?;
        let class_count = binio::read_u64(r, "class_count")? as usize;
        let rank = binio::read_u64(r, "rank")?;
        if rank == 0 || rank > 8 {
            return Err(BinReadError::Unreasonable {
                what: "tensor rank",
                got: rank,
                limit: 8,
            }
            .into());
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let e = binio::read_u64(r, "extent")?;
            total = total.saturating_mul(e);
            shape.push(e as usize);
        }
        if total > binio::MAX_ELEMENTS {
            return Err(BinReadError::Unreasonable {
                what: "element count",
                got: total,
                limit: binio::MAX_ELEMENTS,
            }
            .into());
        }
        let data = binio::read_f64_vec(r, total as usize, "input payload")?;
        let inputs = Tensor::new(shape, data)?;
        let mut flag = [0u8; 1];
        binio::read_exact_describing(r, &mut flag, "label flag")?;
        let labels = match flag[0] {
            0 => None,
            _ => {
                let n = inputs.shape()[0];
                let mut ls = Vec::with_capacity(n);
                for _ in 0..n {
                    ls.push(binio::read_u64(r, "label")? as usize);
                }
                Some(ls)
            }
        };
        Self::new(domain_id, inputs, labels, class_count)
    }

    /// Plain-text export for small sets: one sample per row, flattened
    /// feature columns, then the label (blank when unlabeled).
    pub fn export_csv(&self, w: &mut impl Write) -> Result<(), DataError> {
        let width = self.sample_width();
        write!(w, "{}", (0..width).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","))?;
        writeln!(w, ",label")?;
        for i in 0..self.sample_count() {
            let row = &self.inputs.data()[i * width..(i + 1) * width];
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            match &self.labels {
                Some(ls) => writeln!(w, "{},{}", cells.join(","), ls[i])?,
                None => writeln!(w, "{},", cells.join(","))?,
            }
        }
        Ok(())
    }
}

pub const DATASET_MAGIC: &[u8; 8] = b"ADBNDATA";
pub const DATASET_VERSION: u32 = 1;

/// Affine covariate-shift recipe: `x' = scale (.) R(x) + shift + noise`.
/// Rotation applies to the first two features of rank-2 inputs only.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub rotation_angle: Option<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ShiftSpec {
    /// Pure translation by `shift`, the canonical covariate-shift treatment.
    pub fn translation(shift: Vec<f64>, seed: u64) -> Self {
        let d = shift.len();
        Self {
            input_shift: shift,
            input_scale: vec![1.0; d],
            rotation_angle: None,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn identity(width: usize, seed: u64) -> Self {
        Self::translation(vec![0.0; width], seed)
    }

    fn validate(&self, feature_width: usize, input_rank: usize) -> Result<(), DataError> {
        if self.input_shift.len() != feature_width {
            return Err(DataError::SpecWidth {
                field: "input_shift",
                expected: feature_width,
                got: self.input_shift.len(),
            });
        }
        if self.input_scale.len() != feature_width {
            return Err(DataError::SpecWidth {
                field: "input_scale",
                expected: feature_width,
                got: self.input_scale.len(),
            });
        }
        if let Some((index, &value)) = self
            .input_scale
            .iter()
            .enumerate()
            .find(|(_, &s)| s <= 0.0)
        {
            return Err(DataError::BadScale { index, value });
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::BadNoise(self.noise_sigma));
        }
        if self.rotation_angle.is_some() && (input_rank != 2 || feature_width < 2) {
            return Err(DataError::RotationUnsupported);
        }
        Ok(())
    }
}

/// Feature width a shift spec must match: columns for rank-2 inputs,
/// channels for rank-4 images.
fn shift_width(inputs: &Tensor) -> Result<usize, DataError> {
    Ok(inputs.feature_count()?)
}

/// Gaussian class clusters in `dim` dimensions. Within-class scatter is the
/// identity, so `separation` is the minimum center distance in units of the
/// class standard deviation. Samples are grouped by class in row order.
pub fn make_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    for (value, what) in [
        (class_count, "class_count"),
        (per_class, "per_class"),
        (dim, "dim"),
    ] {
        if value == 0 {
            return Err(DataError::NonPositive { what });
        }
    }
    if separation <= 0.0 {
        return Err(DataError::NonPositive { what: "separation" });
    }
    let mut center_rng = seeded_rng(derive_seed(seed, "blob-centers"));
    let mut centers = vec![0.0; class_count * dim];
    for c in centers.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut center_rng);
        *c = z;
    }
    if class_count > 1 {
        let mut min_dist = f64::INFINITY;
        for a in 0..class_count {
            for b in (a + 1)..class_count {
                let d2: f64 = (0..dim)
                    .map(|j| {
                        let d = centers[a * dim + j] - centers[b * dim + j];
                        d * d
                    })
                    .sum();
                min_dist = min_dist.min(d2.sqrt());
            }
        }
        if min_dist <= 1e-9 {
            return Err(DataError::DegenerateCenters);
        }
        let scale = separation / min_dist;
        for c in centers.iter_mut() {
            *c *= scale;
        }
    }
    let n = class_count * per_class;
    let mut sample_rng = seeded_rng(derive_seed(seed, "blob-samples"));
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..class_count {
        for _ in 0..per_class {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut sample_rng);
                data.push(centers[class * dim + j] + z);
            }
            labels.push(class);
        }
    }
    DomainDataset::new(
        format!("blobs-s{seed}"),
        Tensor::new(vec![n, dim], data)?,
        Some(labels),
        class_count,
    )
}

/// Segment layout for procedural glyphs: (row0, col0, row1, col1) in a unit
/// box, the classic seven-segment arrangement.
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.0, 0.0, 0.0, 1.0), // A: top
    (0.0, 1.0, 0.5, 1.0), // B: top right
    (0.5, 1.0, 1.0, 1.0), // C: bottom right
    (1.0, 0.0, 1.0, 1.0), // D: bottom
    (0.5, 0.0, 1.0, 0.0), // E: bottom left
    (0.0, 0.0, 0.5, 0.0), // F: top left
    (0.5, 0.0, 0.5, 1.0), // G: middle
];

/// Which segments light up for digits 0-9.
const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

/// Procedurally rendered ten-class glyph images, shape `[N, 1, s, s]`,
/// pixel values in [0, 1]. Per-sample jitter comes from integer translation,
/// stroke intensity scaling, and additive pixel noise.
pub fn make_digits_grid(
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    if per_class == 0 {
        return Err(DataError::NonPositive { what: "per_class" });
    }
    if image_size < 8 {
        return Err(DataError::ImageTooSmall(image_size));
    }
    let s = image_size;
    let n = 10 * per_class;
    let mut rng = seeded_rng(derive_seed(seed, "digit-samples"));
    let mut data = vec![0.0; n * s * s];
    let mut labels = Vec::with_capacity(n);
    let margin = (s as f64 * 0.2).max(1.0);
    let thickness = (s as f64 / 8.0).max(1.0);
    let mut idx = 0;
    for digit in 0..10usize {
        for _ in 0..per_class {
            let dx = rng.random_range(-1i64..=1) as f64;
            let dy = rng.random_range(-1i64..=1) as f64;
            let intensity: f64 = rng.random_range(0.7..1.0);
            let noise_amp = 0.03;
            let img = &mut data[idx * s * s..(idx + 1) * s * s];
            for seg in DIGIT_SEGMENTS[digit] {
                let (r0, c0, r1, c1) = SEGMENTS[*seg];
                let top = margin + r0 * (s as f64 - 2.0 * margin) + dy;
                let bot = margin + r1 * (s as f64 - 2.0 * margin) + dy;
                let left = margin + c0 * (s as f64 - 2.0 * margin) + dx;
                let right = margin + c1 * (s as f64 - 2.0 * margin) + dx;
                for i in 0..s {
                    for j in 0..s {
                        let (pi, pj) = (i as f64, j as f64);
                        let within = pi >= top - thickness / 2.0
                            && pi <= bot + thickness / 2.0
                            && pj >= left - thickness / 2.0
                            && pj <= right + thickness / 2.0;
                        if within {
                            img[i * s + j] = intensity;
                        }
                    }
                }
            }
            for px in img.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *px = (*px + noise_amp * z).clamp(0.0, 1.0);
            }
            labels.push(digit);
            idx += 1;
        }
    }
    DomainDataset::new(
        format!("digits-s{seed}"),
        Tensor::new(vec![n, 1, s, s], data)?,
        Some(labels),
        10,
    )
}

fn apply_affine(
    inputs: &Tensor,
    spec: &ShiftSpec,
    rows: Option<&[usize]>,
) -> Result<Tensor, DataError> {
    let width = shift_width(inputs)?;
    spec.validate(width, inputs.rank())?;
    let mut out = inputs.clone();
    let n = inputs.shape()[0];
    let all_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all_rows = (0..n).collect();
            &all_rows
        }
    };
    let sample_width = inputs.len() / n;
    let mut noise_rng = seeded_rng(derive_seed(spec.seed, "shift-noise"));
    for &r in rows {
        let sample = &mut out.data_mut()[r * sample_width..(r + 1) * sample_width];
        if let Some(theta) = spec.rotation_angle {
            let (sin, cos) = theta.sin_cos();
            let (x0, x1) = (sample[0], sample[1]);
            sample[0] = cos * x0 - sin * x1;
            sample[1] = sin * x0 + cos * x1;
        }
        for (k, v) in sample.iter_mut().enumerate() {
            // feature index: column for rank 2, channel for rank 4
            let j = if inputs.rank() == 4 {
                k / (sample_width / width)
            } else {
                k
            };
            let noise = if spec.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                spec.noise_sigma * z
            } else {
                0.0
            };
            *v = spec.input_scale[j] * *v + spec.input_shift[j] + noise;
        }
    }
    Ok(out)
}

/// Manufacture a covariate-shifted domain: every sample is transformed by
/// the same affine map (plus optional noise), labels are copied verbatim.
pub fn shift_domain(
    src: &DomainDataset,
    spec: &ShiftSpec,
    new_domain_id: &str,
) -> Result<DomainDataset, DataError> {
    let inputs = apply_affine(&src.inputs, spec, None)?;
    DomainDataset::new(
        new_domain_id.to_string(),
        inputs,
        src.labels.clone(),
        src.class_count,
    )
}

/// Harsher shift family: each class is transformed by its own spec, breaking
/// the pure-covariate-shift assumption. Global per-feature standardization
/// cannot realign domains produced this way, which bounds what statistics
/// swapping alone can recover.
pub fn shift_domain_per_class(
    src: &DomainDataset,
    specs: &[ShiftSpec],
    new_domain_id: &str,
) -> Result<DomainDataset, DataError> {
    let labels = src.labels.as_ref().ok_or(DataError::MissingLabels)?;
    if specs.len() != src.class_count {
        return Err(DataError::SpecCount {
            expected: src.class_count,
            got: specs.len(),
        });
    }
    let mut inputs = src.inputs.clone();
    for (class, spec) in specs.iter().enumerate() {
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        inputs = apply_affine(&inputs, spec, Some(&rows))?;
    }
    DomainDataset::new(
        new_domain_id.to_string(),
        inputs,
        Some(labels.clone()),
        src.class_count,
    )
}
