//! Single-file binary checkpoints: model architecture, named parameter
//! tensors, per-domain statistics bank, and run provenance. The byte layout
//! is little-endian throughout and documented in docs/formats.md; loading
//! validates every invariant before returning, so a corrupt file never
//! yields a partially built model.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::adabn::{AdabnError, BankEntry, BnStatsBank};
use crate::binio::{
    read_exact_describing, read_f64_vec, read_str, read_u32, read_u64, write_f64_slice, write_str,
    write_u32, write_u64, BinReadError, MAX_ELEMENTS,
};
use crate::layers::{BatchNormLayer, BnMode, Conv2dLayer, Layer, LayerError, LinearLayer};
use crate::model::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// File magic, first eight bytes of every checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADBNCKPT";
/// Highest format version this reader understands.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Read(#[from] BinReadError),
    #[error("not a checkpoint file: bad magic {got:?}")]
    BadMagic { got: [u8; 8] },
    #[error("unsupported format version {got}; this reader handles up to {supported}")]
    UnsupportedVersion { got: u32, supported: u32 },
    #[error("unknown layer kind '{0}' in architecture descriptor")]
    UnknownLayerKind(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("refusing to overwrite {0}; pass overwrite to replace it")]
    AlreadyExists(PathBuf),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bank(#[from] AdabnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything needed to resume or inspect a run: the model (architecture and
/// all tensors), the per-(layer, domain) statistics bank, and provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub bank: BnStatsBank,
    /// Master seed the producing run was started with.
    pub seed: u64,
    /// Hash of the producing run's configuration; empty when no config was
    /// involved.
    pub config_hash: Vec<u8>,
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    write_u32(w, t.rank() as u32)?;
    for &e in t.shape() {
        write_u64(w, e as u64)?;
    }
    write_f64_slice(w, t.data())
}

fn read_tensor(r: &mut impl Read, what: &str) -> Result<Tensor, CheckpointError> {
    let rank = read_u32(r, what)?;
    if rank > 8 {
        return Err(CheckpointError::Corrupt(format!(
            "{what}: tensor rank {rank} exceeds 8"
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elements: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r, what)?;
        elements = elements.saturating_mul(e.max(1));
        if elements > MAX_ELEMENTS {
            return Err(BinReadError::Unreasonable {
                what: "tensor elements",
                got: elements,
                limit: MAX_ELEMENTS,
            }
            .into());
        }
        shape.push(e as usize);
    }
    let data = read_f64_vec(r, shape.iter().product(), what)?;
    Ok(Tensor::new(shape, data)?)
}

fn write_layer(w: &mut impl Write, name: &str, layer: &Layer) -> std::io::Result<()> {
    write_str(w, name)?;
    write_str(w, layer.kind())?;
    match layer {
        Layer::Linear(l) => {
            write_tensor(w, l.weight())?;
            write_tensor(w, l.bias())?;
        }
        Layer::Conv2d(c) => {
            write_u32(w, c.stride() as u32)?;
            write_tensor(w, c.kernel())?;
            write_tensor(w, c.bias())?;
        }
        Layer::BatchNorm(bn) => {
            write_f64_slice(w, &[bn.momentum(), bn.epsilon()])?;
            let mode = match bn.mode() {
                BnMode::Train => 0u32,
                BnMode::Eval => 1u32,
            };
            write_u32(w, mode)?;
            write_tensor(w, bn.gamma())?;
            write_tensor(w, bn.beta())?;
            write_tensor(w, bn.running_mean())?;
            write_tensor(w, bn.running_var())?;
        }
        Layer::Relu | Layer::Flatten => {}
    }
    Ok(())
}

fn read_layer(r: &mut impl Read) -> Result<(String, Layer), CheckpointError> {
    let name = read_str(r, "layer name")?;
    let kind = read_str(r, "layer kind")?;
    let what = format!("layer '{name}'");
    let layer = match kind.as_str() {
        "linear" => {
            let weight = read_tensor(r, &what)?;
            let bias = read_tensor(r, &what)?;
            Layer::Linear(LinearLayer::new(weight, bias)?)
        }
        "conv2d" => {
            let stride = read_u32(r, &what)? as usize;
            let kernel = read_tensor(r, &what)?;
            let bias = read_tensor(r, &what)?;
            Layer::Conv2d(Conv2dLayer::new(kernel, bias, stride)?)
        }
        "batchnorm" => {
            let hp = read_f64_vec(r, 2, &what)?;
            let mode = match read_u32(r, &what)? {
                0 => BnMode::Train,
                1 => BnMode::Eval,
                other => {
                    return Err(CheckpointError::Corrupt(format!(
                        "{what}: mode byte {other} is neither train (0) nor eval (1)"
                    )))
                }
            };
            let gamma = read_tensor(r, &what)?;
            let beta = read_tensor(r, &what)?;
            let running_mean = read_tensor(r, &what)?;
            let running_var = read_tensor(r, &what)?;
            Layer::BatchNorm(BatchNormLayer::from_parts(
                gamma,
                beta,
                running_mean,
                running_var,
                hp[0],
                hp[1],
                mode,
            )?)
        }
        "relu" => Layer::Relu,
        "flatten" => Layer::Flatten,
        other => return Err(CheckpointError::UnknownLayerKind(other.to_string())),
    };
    Ok((name, layer))
}

impl Checkpoint {
    pub fn new(model: Model, bank: BnStatsBank, seed: u64, config_hash: Vec<u8>) -> Self {
        Self {
            model,
            bank,
            seed,
            config_hash,
        }
    }

    /// Serialize to `path`. Refuses to replace an existing file unless
    /// `overwrite` is set.
    pub fn save(&self, path: &Path, overwrite: bool) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if !overwrite && path.exists() {
            return Err(CheckpointError::AlreadyExists(path.to_path_buf()));
        }
        let file = if overwrite {
            File::create(path).map_err(io_err)?
        } else {
            OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(path)
                .map_err(io_err)?
        };
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_u64(w, self.seed)?;
        write_u32(w, self.config_hash.len() as u32)?;
        w.write_all(&self.config_hash)?;
        write_u32(w, self.model.layers().len() as u32)?;
        for nl in self.model.layers() {
            write_layer(w, &nl.name, &nl.layer)?;
        }
        write_u32(w, self.bank.len() as u32)?;
        for (layer, domain, entry) in self.bank.iter() {
            write_str(w, layer)?;
            write_str(w, domain)?;
            write_u64(w, entry.count)?;
            write_u32(w, entry.mean.len() as u32)?;
            write_f64_slice(w, &entry.mean)?;
            write_f64_slice(w, &entry.var)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = File::open(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact_describing(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { got: magic });
        }
        let version = read_u32(r, "format version")?;
        if version == 0 || version > CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                got: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let seed = read_u64(r, "seed")?;
        let hash_len = read_u32(r, "config hash length")? as usize;
        if hash_len > 1024 {
            return Err(CheckpointError::Corrupt(format!(
                "config hash length {hash_len} exceeds 1024"
            )));
        }
        let mut config_hash = vec![0u8; hash_len];
        read_exact_describing(r, &mut config_hash, "config hash")?;
        let layer_count = read_u32(r, "layer count")?;
        let mut layers = Vec::with_capacity(layer_count as usize);
        for _ in 0..layer_count {
            layers.push(read_layer(r)?);
        }
        let model = Model::new(layers)?;
        let entry_count = read_u32(r, "bank entry count")?;
        let mut bank = BnStatsBank::new();
        for _ in 0..entry_count {
            let layer = read_str(r, "bank layer name")?;
            let domain = read_str(r, "bank domain id")?;
            let what = format!("bank entry ({layer}, {domain})");
            let count = read_u64(r, &what)?;
            let width = read_u32(r, &what)? as usize;
            let mean = read_f64_vec(r, width, &what)?;
            let var = read_f64_vec(r, width, &what)?;
            bank.insert(&layer, &domain, BankEntry { mean, var, count })?;
        }
        Ok(Self {
            model,
            bank,
            seed,
            config_hash,
        })
    }

    /// Human-readable header dump: version, provenance, layer table, bank
    /// contents. Never prints tensor payloads.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("format_version: {CHECKPOINT_VERSION}\n"));
        out.push_str(&format!("seed: {}\n", self.seed));
        if self.config_hash.is_empty() {
            out.push_str("config_hash: (none)\n");
        } else {
            let hex: String = self.config_hash.iter().map(|b| format!("{b:02x}")).collect();
            out.push_str(&format!("config_hash: {hex}\n"));
        }
        out.push_str(&format!("layers: {}\n", self.model.layers().len()));
        for nl in self.model.layers() {
            let detail = match &nl.layer {
                Layer::Linear(l) => format!(
                    "weight{:?} bias{:?}",
                    l.weight().shape(),
                    l.bias().shape()
                ),
                Layer::Conv2d(c) => format!(
                    "kernel{:?} bias{:?} stride={}",
                    c.kernel().shape(),
                    c.bias().shape(),
                    c.stride()
                ),
                Layer::BatchNorm(bn) => format!(
                    "features={} momentum={} epsilon={} mode={}",
                    bn.feature_count(),
                    bn.momentum(),
                    bn.epsilon(),
                    match bn.mode() {
                        BnMode::Train => "train",
                        BnMode::Eval => "eval",
                    }
                ),
                Layer::Relu | Layer::Flatten => String::new(),
            };
            out.push_str(&format!("  {} {} {}\n", nl.name, nl.layer.kind(), detail));
        }
        out.push_str(&format!("bank_entries: {}\n", self.bank.len()));
        for (layer, domain, entry) in self.bank.iter() {
            out.push_str(&format!(
                "  {} @ {}: width={} count={}\n",
                layer,
                domain,
                entry.mean.len(),
                entry.count
            ));
        }
        out
    }
}

/// Structural difference between two checkpoints, compared tensor by tensor
/// at bit granularity.
#[derive(Debug, Clone, Default)]
pub struct DiffReport {
    /// Layer names, kinds, order, or hyperparameters differ.
    pub arch_changed: bool,
    /// `layer.tensor` labels whose payload bits differ.
    pub changed_tensors: Vec<String>,
    /// Bank keys present in only one side or with different values.
    pub changed_bank_keys: Vec<(String, String)>,
    pub seed_changed: bool,
    pub config_hash_changed: bool,
}

impl DiffReport {
    /// True when the two checkpoints differ in nothing but bank entries.
    pub fn bank_only(&self) -> bool {
        !self.arch_changed
            && self.changed_tensors.is_empty()
            && !self.changed_bank_keys.is_empty()
            && !self.seed_changed
            && !self.config_hash_changed
    }

    pub fn identical(&self) -> bool {
        !self.arch_changed
            && self.changed_tensors.is_empty()
            && self.changed_bank_keys.is_empty()
            && !self.seed_changed
            && !self.config_hash_changed
    }
}

fn tensors_bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn layer_arch_equal(a: &Layer, b: &Layer) -> bool {
    match (a, b) {
        (Layer::Linear(_), Layer::Linear(_)) => true,
        (Layer::Conv2d(x), Layer::Conv2d(y)) => x.stride() == y.stride(),
        (Layer::BatchNorm(x), Layer::BatchNorm(y)) => {
            x.feature_count() == y.feature_count()
                && x.momentum() == y.momentum()
                && x.epsilon() == y.epsilon()
                && x.mode() == y.mode()
        }
        (Layer::Relu, Layer::Relu) | (Layer::Flatten, Layer::Flatten) => true,
        _ => false,
    }
}

fn layer_tensors(layer: &Layer) -> Vec<(&'static str, &Tensor)> {
    match layer {
        Layer::Linear(l) => vec![("weight", l.weight()), ("bias", l.bias())],
        Layer::Conv2d(c) => vec![("kernel", c.kernel()), ("bias", c.bias())],
        Layer::BatchNorm(bn) => vec![
            ("gamma", bn.gamma()),
            ("beta", bn.beta()),
            ("running_mean", bn.running_mean()),
            ("running_var", bn.running_var()),
        ],
        Layer::Relu | Layer::Flatten => Vec::new(),
    }
}

/// Compare two checkpoints structurally. Tensor payloads are compared by
/// their bit patterns, so the report distinguishes "same numbers" from
/// "same bytes".
pub fn structural_diff(a: &Checkpoint, b: &Checkpoint) -> DiffReport {
    let mut report = DiffReport {
        seed_changed: a.seed != b.seed,
        config_hash_changed: a.config_hash != b.config_hash,
        ..DiffReport::default()
    };
    let (la, lb) = (a.model.layers(), b.model.layers());
    if la.len() != lb.len() {
        report.arch_changed = true;
    }
    for (x, y) in la.iter().zip(lb.iter()) {
        if x.name != y.name || !layer_arch_equal(&x.layer, &y.layer) {
            report.arch_changed = true;
            continue;
        }
        for ((label, tx), (_, ty)) in layer_tensors(&x.layer)
            .into_iter()
            .zip(layer_tensors(&y.layer))
        {
            if !tensors_bit_equal(tx, ty) {
                report.changed_tensors.push(format!("{}.{}", x.name, label));
            }
        }
    }
    let keys: std::collections::BTreeSet<(String, String)> = a
        .bank
        .iter()
        .chain(b.bank.iter())
        .map(|(l, d, _)| (l.to_string(), d.to_string()))
        .collect();
    for (layer, domain) in keys {
        let ea = a.bank.get(&layer, &domain);
        let eb = b.bank.get(&layer, &domain);
        let same = match (ea, eb) {
            (Some(x), Some(y)) => {
                x.count == y.count
                    && x.mean.len() == y.mean.len()
                    && x.mean
                        .iter()
                        .zip(&y.mean)
                        .all(|(p, q)| p.to_bits() == q.to_bits())
                    && x.var
                        .iter()
                        .zip(&y.var)
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            }
            (None, None) => true,
            _ => false,
        };
        if !same {
            report.changed_bank_keys.push((layer, domain));
        }
    }
    report
}
