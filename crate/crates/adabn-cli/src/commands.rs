//! Verb implementations. Every command is deterministic given its config and
//! seed, writes its outputs under a run directory, and records what it read
//! and wrote in a manifest. Commands never modify their input files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{
    self, AnalysisKind, AnalysisParams, ExperimentConfig, GeneratorConfig, LoadedConfig,
    ModelConfig,
};
use crate::error::CliError;
use adabn::adabn::{
    adapt as run_adapt, apply_domain, bank_from_running_stats, AdaptOptions, EstimationMode,
};
use adabn::analysis::{
    feature_divergence_profile, pilot_separability, sensitivity_sweep, write_divergence_csv,
    write_stat_vectors_csv, write_sweep_csv,
};
use adabn::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use adabn::data::{make_blobs, make_digits_grid, shift_domain, DomainDataset, DATASET_VERSION};
use adabn::model::Model;
use adabn::presets;
use adabn::rng::{derive_seed, seeded_permutation};
use adabn::train::{evaluate, train, TrainConfig};

/// Resolved invocation context for the config-driven verbs.
pub struct RunCtx {
    pub loaded: LoadedConfig,
    pub config_path: PathBuf,
    /// Effective seed: --seed when given, else the config's.
    pub seed: u64,
    /// Effective run directory: --out when given, else the config's.
    pub out_dir: PathBuf,
    pub overwrite: bool,
}

impl RunCtx {
    fn cfg(&self) -> &ExperimentConfig {
        &self.loaded.cfg
    }

    fn data_file(&self, domain_id: &str) -> PathBuf {
        self.out_dir.join("data").join(format!("{domain_id}.dat"))
    }

    fn report_header(&self) -> String {
        format!(
            "# config_hash {}\n# seed {}\n",
            self.loaded.hash_hex(),
            self.seed
        )
    }
}

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn file_err(path: &Path) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::File(format!("{}: {e}", path.display()))
}

fn ensure_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| file_err(p)(&e))
}

fn refuse_existing(p: &Path, overwrite: bool) -> Result<(), CliError> {
    if !overwrite && p.exists() {
        return Err(CliError::File(format!(
            "refusing to overwrite {}; pass --overwrite to replace it",
            p.display()
        )));
    }
    Ok(())
}

fn load_dataset(p: &Path) -> Result<DomainDataset, CliError> {
    DomainDataset::load(p).map_err(|e| file_err(p)(&e))
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(p).map_err(|e| file_err(p)(&e))
}

/// Reports and manifests are cheap derived files; they always overwrite.
fn write_report(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, body.as_ref()).map_err(|e| file_err(path)(&e))
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

fn file_entry(path: &Path) -> Result<FileEntry, CliError> {
    let bytes = fs::read(path).map_err(|e| file_err(path)(&e))?;
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: config::hex(&config::sha256_bytes(&bytes)),
    })
}

/// What a command read and wrote, with digests, so a run can be audited and
/// replayed byte for byte.
#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    config_sha256: Option<String>,
    seed: u64,
    dataset_format_version: u32,
    checkpoint_format_version: u32,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_sha256: Option<String>,
    seed: u64,
    inputs: &[&Path],
    outputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        tool: "adabn",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        config_sha256,
        seed,
        dataset_format_version: DATASET_VERSION,
        checkpoint_format_version: CHECKPOINT_VERSION,
        inputs: inputs
            .iter()
            .map(|p| file_entry(p))
            .collect::<Result<_, _>>()?,
        outputs: outputs
            .iter()
            .map(|p| file_entry(p))
            .collect::<Result<_, _>>()?,
    };
    ensure_dir(dir)?;
    let path = dir.join(format!("manifest-{command}.json"));
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, body).map_err(|e| file_err(&path)(&e))?;
    Ok(path)
}

fn build_source(cfg: &ExperimentConfig, seed: u64) -> Result<DomainDataset, CliError> {
    let gen_seed = derive_seed(seed, "gen-data");
    let ds = match &cfg.dataset.generator {
        GeneratorConfig::Blobs(b) => {
            make_blobs(b.class_count, b.per_class, b.dim, b.separation, gen_seed)
        }
        GeneratorConfig::DigitsGrid(d) => make_digits_grid(d.per_class, d.image_size, gen_seed),
    }
    .map_err(cfg_err)?;
    Ok(ds.with_domain_id(&cfg.dataset.source_id))
}

fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model, CliError> {
    let init = derive_seed(seed, "model-init");
    match (&cfg.model, &cfg.dataset.generator) {
        (ModelConfig::Mlp(m), GeneratorConfig::Blobs(b)) => {
            presets::mlp(b.dim, m.hidden, b.class_count, init)
        }
        (ModelConfig::Cnn(_), GeneratorConfig::DigitsGrid(d)) => {
            presets::cnn(1, d.image_size, 10, init)
        }
        _ => unreachable!("config validation enforces the generator/model pairing"),
    }
    .map_err(cfg_err)
}

pub fn cmd_gen_data(ctx: &RunCtx) -> Result<Vec<PathBuf>, CliError> {
    let cfg = ctx.cfg();
    let source = build_source(cfg, ctx.seed)?;
    let mut domains = vec![source.clone()];
    for t in &cfg.dataset.targets {
        let spec = t.shift.to_spec(ctx.seed, &t.domain_id);
        domains.push(shift_domain(&source, &spec, &t.domain_id).map_err(cfg_err)?);
    }

    ensure_dir(&ctx.out_dir.join("data"))?;
    let mut written = Vec::new();
    for ds in &domains {
        let path = ctx.data_file(&ds.domain_id);
        refuse_existing(&path, ctx.overwrite)?;
        ds.save(&path).map_err(|e| file_err(&path)(&e))?;
        println!(
            "wrote {} ({} samples, {} classes)",
            path.display(),
            ds.sample_count(),
            ds.class_count
        );
        written.push(path);
    }
    write_manifest(
        &ctx.out_dir,
        "gen-data",
        Some(ctx.loaded.hash_hex()),
        ctx.seed,
        &[&ctx.config_path],
        &written,
    )?;
    Ok(written)
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(ctx: &RunCtx) -> Result<TrainArtifacts, CliError> {
    let cfg = ctx.cfg();
    let src_path = ctx.data_file(&cfg.dataset.source_id);
    let source = load_dataset(&src_path)?;
    let model = build_model(cfg, ctx.seed)?;
    let tc = TrainConfig {
        base_lr: cfg.train.base_lr,
        lr_drop_factor: cfg.train.lr_drop_factor,
        lr_drop_every: cfg.train.lr_drop_every,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        frozen_layers: Vec::new(),
        per_layer_lr_scale: Default::default(),
        seed: derive_seed(ctx.seed, "train"),
    };
    let outcome = train(model, std::slice::from_ref(&source), &tc).map_err(cfg_err)?;

    // the source's running statistics go into the bank under its own domain
    // id, so later commands can ask for "the source condition" explicitly
    let bank = bank_from_running_stats(
        &outcome.model,
        &cfg.dataset.source_id,
        source.sample_count() as u64,
    )
    .map_err(cfg_err)?;
    let ckpt = Checkpoint::new(outcome.model, bank, ctx.seed, ctx.loaded.hash.clone());

    let ckpt_path = ctx.out_dir.join("checkpoint.adbn");
    ckpt.save(&ckpt_path, ctx.overwrite)
        .map_err(|e| file_err(&ckpt_path)(&e))?;
    let log_path = ctx.out_dir.join("train_log.tsv");
    write_report(
        &log_path,
        ctx.report_header() + &outcome.log.to_table(),
    )?;

    if let Some(last) = outcome.log.records.last() {
        println!(
            "trained {} epoch(s) on '{}'; final loss {:.4}, accuracy {:.4}",
            outcome.log.records.len(),
            source.domain_id,
            last.loss,
            last.accuracy
        );
    }
    println!("wrote {}", ckpt_path.display());
    let outputs = vec![ckpt_path.clone(), log_path.clone()];
    write_manifest(
        &ctx.out_dir,
        "train",
        Some(ctx.loaded.hash_hex()),
        ctx.seed,
        &[&ctx.config_path, &src_path],
        &outputs,
    )?;
    Ok(TrainArtifacts {
        checkpoint: ckpt_path,
        log: log_path,
    })
}

pub struct AdaptArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub domain_id: Option<String>,
    pub mode: EstimationMode,
    pub batch_size: usize,
    /// Cap on how many batches of data feed the estimate; None means all.
    pub batches: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub overwrite: bool,
}

/// A budget of n batches keeps a seeded random subset of n * batch_size
/// rows; without a budget (or when the budget covers everything) the full
/// dataset passes through untouched, in its natural order.
fn budget_subset(
    ds: &DomainDataset,
    batches: Option<usize>,
    batch_size: usize,
    seed: u64,
    domain: &str,
) -> Result<DomainDataset, CliError> {
    let n = ds.sample_count();
    if let Some(b) = batches {
        if let Some(want) = b.checked_mul(batch_size) {
            if want < n {
                let perm =
                    seeded_permutation(n, derive_seed(seed, &format!("adapt-budget:{domain}")));
                return ds.select(&perm[..want]).map_err(cfg_err);
            }
        }
    }
    Ok(ds.clone())
}

pub fn cmd_adapt(a: &AdaptArgs) -> Result<PathBuf, CliError> {
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be at least 1".into()));
    }
    if a.batches == Some(0) {
        return Err(CliError::Usage("--batches must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let domain = a.domain_id.clone().unwrap_or_else(|| ds.domain_id.clone());
    let seed = a.seed.unwrap_or(ckpt.seed);
    let subset = budget_subset(&ds, a.batches, a.batch_size, seed, &domain)?;
    let opts = AdaptOptions {
        mode: a.mode,
        batch_size: a.batch_size,
        up_to_layer: None,
    };
    let outcome = run_adapt(&ckpt.model, &subset.unlabeled(), &domain, &opts).map_err(cfg_err)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }

    // the artifact keeps the original model byte for byte; adaptation only
    // grows the statistics bank
    let mut bank = ckpt.bank.clone();
    let mut estimated = 0;
    for (layer, dom, entry) in outcome.bank.iter() {
        bank.insert(layer, dom, entry.clone()).map_err(cfg_err)?;
        estimated += 1;
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("adapted.adbn"));
    refuse_existing(&out, a.overwrite)?;
    let adapted = Checkpoint::new(ckpt.model, bank, ckpt.seed, ckpt.config_hash);
    adapted
        .save(&out, true)
        .map_err(|e| file_err(&out)(&e))?;
    println!(
        "estimated {} layer statistic(s) for domain '{}' from {} samples",
        estimated,
        domain,
        subset.sample_count()
    );
    println!("wrote {}", out.display());

    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    write_manifest(
        &dir,
        "adapt",
        None,
        seed,
        &[&a.checkpoint, &a.data],
        std::slice::from_ref(&out),
    )?;
    Ok(out)
}

#[derive(Serialize)]
pub struct PerClassReport {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

/// Evaluation record; serialized bytes are identical across reruns on the
/// same artifacts.
#[derive(Serialize)]
pub struct EvalReport {
    pub report: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub domain_id: String,
    /// Which normalization statistics produced the numbers: `bank:<domain>`
    /// when the checkpoint's bank holds the domain, else `running`.
    pub statistics: String,
    pub sample_count: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<PerClassReport>,
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    domain_id: Option<&str>,
    out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let domain = domain_id
        .map(str::to_string)
        .unwrap_or_else(|| ds.domain_id.clone());
    let bn = ckpt.model.bn_names();
    let has_entry = bn.iter().any(|l| ckpt.bank.get(l, &domain).is_some());
    let (model, statistics) = if has_entry {
        (
            apply_domain(&ckpt.model, &ckpt.bank, &domain).map_err(cfg_err)?,
            format!("bank:{domain}"),
        )
    } else {
        (ckpt.model.clone(), "running".to_string())
    };
    let metrics = evaluate(&model, &ds).map_err(cfg_err)?;
    let report = EvalReport {
        report: "eval",
        config_hash: config::hex(&ckpt.config_hash),
        seed: ckpt.seed,
        domain_id: domain,
        statistics,
        sample_count: metrics.sample_count,
        accuracy: metrics.accuracy,
        mean_loss: metrics.mean_loss,
        per_class: metrics
            .per_class
            .iter()
            .map(|c| PerClassReport {
                class: c.class,
                count: c.count,
                correct: c.correct,
                accuracy: c.accuracy(),
            })
            .collect(),
    };
    let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match out {
        Some(path) => {
            write_report(path, &body)?;
            println!(
                "accuracy {:.4} on '{}' ({}); wrote {}",
                report.accuracy,
                report.domain_id,
                report.statistics,
                path.display()
            );
        }
        None => print!("{body}"),
    }
    Ok(report)
}

pub struct AnalyzeArgs {
    pub which: AnalysisKind,
    pub checkpoint: PathBuf,
    pub data: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<Vec<PathBuf>, CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let loaded = match &a.config {
        Some(p) => Some(config::load_config(p)?),
        None => None,
    };
    let params: AnalysisParams = loaded
        .as_ref()
        .map(|l| l.cfg.analysis.clone())
        .unwrap_or_default();
    let hash_hex = loaded
        .as_ref()
        .map(|l| l.hash_hex())
        .unwrap_or_else(|| config::hex(&ckpt.config_hash));
    let seed = a
        .seed
        .or(loaded.as_ref().map(|l| l.cfg.seed))
        .unwrap_or(ckpt.seed);
    let out_dir = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join("analysis")
    });
    ensure_dir(&out_dir)?;

    let datasets: Vec<DomainDataset> = a
        .data
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<_, _>>()?;
    let layers = if params.layers.is_empty() {
        ckpt.model.bn_names()
    } else {
        params.layers.clone()
    };
    if layers.is_empty() {
        return Err(CliError::Config(
            "model has no normalization layers to analyze".into(),
        ));
    }
    let header = format!("# config_hash {hash_hex}\n# seed {seed}\n");

    let mut outputs = Vec::new();
    match a.which {
        AnalysisKind::Divergence => {
            if datasets.len() != 2 {
                return Err(CliError::Usage(
                    "analyze divergence needs exactly two --data files: the source, then the target"
                        .into(),
                ));
            }
            let (src, tgt) = (&datasets[0], &datasets[1]);
            let covered = ckpt
                .model
                .bn_names()
                .iter()
                .all(|l| ckpt.bank.get(l, &tgt.domain_id).is_some());
            if !covered {
                eprintln!(
                    "note: bank has no statistics for domain '{}'; reporting the before condition only",
                    tgt.domain_id
                );
            }
            let reports = feature_divergence_profile(
                &ckpt.model,
                src,
                tgt,
                &layers,
                covered.then_some(&ckpt.bank),
            )
            .map_err(cfg_err)?;
            for r in &reports {
                println!(
                    "{} ({}): mean divergence {:.4}",
                    r.layer_name,
                    r.condition.as_str(),
                    r.mean
                );
            }
            let path = out_dir.join("divergence.csv");
            let mut buf = header.clone().into_bytes();
            write_divergence_csv(&mut buf, &reports).map_err(cfg_err)?;
            write_report(&path, buf)?;
            outputs.push(path);
        }
        AnalysisKind::Pilot => {
            if datasets.len() < 2 {
                return Err(CliError::Usage(
                    "analyze pilot needs at least two --data files, one per domain".into(),
                ));
            }
            let rep = pilot_separability(
                &ckpt.model,
                &datasets,
                &layers,
                params.probe_batch_size,
                derive_seed(seed, "analysis-probe"),
            )
            .map_err(cfg_err)?;
            let mut text = header.clone();
            text.push_str("layer,accuracy,train_count,test_count\n");
            for l in &rep.layers {
                println!(
                    "{}: domain-probe accuracy {:.4} on {} held-out vectors",
                    l.layer_name, l.accuracy, l.test_count
                );
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    l.layer_name, l.accuracy, l.train_count, l.test_count
                ));
            }
            let path = out_dir.join("probe.csv");
            write_report(&path, text)?;
            outputs.push(path);
            for l in &rep.layers {
                let vpath = out_dir.join(format!("stat_vectors_{}.csv", l.layer_name));
                let mut buf = header.clone().into_bytes();
                write_stat_vectors_csv(&mut buf, &l.vectors).map_err(cfg_err)?;
                write_report(&vpath, buf)?;
                outputs.push(vpath);
            }
        }
        AnalysisKind::Sensitivity => {
            if datasets.len() != 1 {
                return Err(CliError::Usage(
                    "analyze sensitivity needs exactly one labeled --data file".into(),
                ));
            }
            let rep = sensitivity_sweep(
                &ckpt.model,
                &datasets[0],
                &params.sweep_batch_counts,
                params.sweep_batch_size,
                params.sweep_trials,
                derive_seed(seed, "analysis-sweep"),
            )
            .map_err(cfg_err)?;
            for r in &rep.rows {
                println!(
                    "{} batch(es): accuracy {:.4} +/- {:.4}",
                    r.batch_count, r.mean_accuracy, r.std_accuracy
                );
            }
            let path = out_dir.join("sweep.csv");
            let mut buf = header.clone().into_bytes();
            write_sweep_csv(&mut buf, &rep).map_err(cfg_err)?;
            write_report(&path, buf)?;
            outputs.push(path);
        }
    }

    let mut inputs: Vec<&Path> = vec![a.checkpoint.as_path()];
    inputs.extend(a.data.iter().map(PathBuf::as_path));
    if let Some(p) = &a.config {
        inputs.push(p.as_path());
    }
    write_manifest(
        &out_dir,
        &format!("analyze-{}", a.which.as_str()),
        loaded.as_ref().map(|l| l.hash_hex()),
        seed,
        &inputs,
        &outputs,
    )?;
    Ok(outputs)
}

pub fn cmd_describe(checkpoint: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    print!("{}", ckpt.describe());
    Ok(())
}

pub fn cmd_repro(ctx: &RunCtx) -> Result<(), CliError> {
    let cfg = ctx.cfg().clone();
    let mut all_outputs: Vec<PathBuf> = Vec::new();

    println!("[1/5] generating datasets");
    let data_files = cmd_gen_data(ctx)?;
    all_outputs.extend(data_files.clone());

    println!("[2/5] training on '{}'", cfg.dataset.source_id);
    let arts = cmd_train(ctx)?;
    all_outputs.push(arts.checkpoint.clone());
    all_outputs.push(arts.log.clone());

    println!("[3/5] estimating target statistics");
    let adapted_path = ctx.out_dir.join("adapted.adbn");
    let mut current = arts.checkpoint.clone();
    for (i, t) in cfg.dataset.targets.iter().enumerate() {
        let out = cmd_adapt(&AdaptArgs {
            checkpoint: current.clone(),
            data: ctx.data_file(&t.domain_id),
            domain_id: Some(t.domain_id.clone()),
            mode: cfg.adapt.estimation_mode.into(),
            batch_size: cfg.adapt.batch_size,
            batches: cfg.adapt.batches,
            seed: Some(ctx.seed),
            out: Some(adapted_path.clone()),
            // after the first target the file is this run's own output
            overwrite: ctx.overwrite || i > 0,
        })?;
        current = out;
    }
    all_outputs.push(adapted_path.clone());

    println!("[4/5] evaluating");
    let reports_dir = ctx.out_dir.join("reports");
    let src_file = ctx.data_file(&cfg.dataset.source_id);
    let src_report = reports_dir.join("eval_source.json");
    let src_plain = cmd_eval(&arts.checkpoint, &src_file, None, Some(&src_report))?;
    all_outputs.push(src_report);
    let src_via_adapted_report = reports_dir.join("eval_source_via_adapted.json");
    let src_via_adapted = cmd_eval(&adapted_path, &src_file, None, Some(&src_via_adapted_report))?;
    all_outputs.push(src_via_adapted_report);

    let mut rows: Vec<(String, f64, f64)> = vec![(
        cfg.dataset.source_id.clone(),
        src_plain.accuracy,
        src_via_adapted.accuracy,
    )];
    for t in &cfg.dataset.targets {
        let tgt_file = ctx.data_file(&t.domain_id);
        let base_path = reports_dir.join(format!("eval_{}_baseline.json", t.domain_id));
        let baseline = cmd_eval(&arts.checkpoint, &tgt_file, None, Some(&base_path))?;
        all_outputs.push(base_path);
        let adapted_report = reports_dir.join(format!("eval_{}_adapted.json", t.domain_id));
        let adapted = cmd_eval(&adapted_path, &tgt_file, None, Some(&adapted_report))?;
        all_outputs.push(adapted_report);
        rows.push((t.domain_id.clone(), baseline.accuracy, adapted.accuracy));
    }

    println!("[5/5] analysis reports");
    for kind in &cfg.analysis.run {
        match kind {
            AnalysisKind::Divergence => {
                for t in &cfg.dataset.targets {
                    let outs = cmd_analyze(&AnalyzeArgs {
                        which: AnalysisKind::Divergence,
                        checkpoint: adapted_path.clone(),
                        data: vec![src_file.clone(), ctx.data_file(&t.domain_id)],
                        config: Some(ctx.config_path.clone()),
                        seed: Some(ctx.seed),
                        out: Some(ctx.out_dir.join(format!("analysis/divergence-{}", t.domain_id))),
                    })?;
                    all_outputs.extend(outs);
                }
            }
            AnalysisKind::Pilot => {
                let mut data = vec![src_file.clone()];
                data.extend(cfg.dataset.targets.iter().map(|t| ctx.data_file(&t.domain_id)));
                let outs = cmd_analyze(&AnalyzeArgs {
                    which: AnalysisKind::Pilot,
                    checkpoint: adapted_path.clone(),
                    data,
                    config: Some(ctx.config_path.clone()),
                    seed: Some(ctx.seed),
                    out: Some(ctx.out_dir.join("analysis/pilot")),
                })?;
                all_outputs.extend(outs);
            }
            AnalysisKind::Sensitivity => {
                for t in &cfg.dataset.targets {
                    let outs = cmd_analyze(&AnalyzeArgs {
                        which: AnalysisKind::Sensitivity,
                        checkpoint: adapted_path.clone(),
                        data: vec![ctx.data_file(&t.domain_id)],
                        config: Some(ctx.config_path.clone()),
                        seed: Some(ctx.seed),
                        out: Some(ctx.out_dir.join(format!("analysis/sensitivity-{}", t.domain_id))),
                    })?;
                    all_outputs.extend(outs);
                }
            }
        }
    }

    // the headline table: write it before asserting on it, so a failing run
    // still leaves its numbers behind for inspection
    let table_path = ctx.out_dir.join("repro_table.csv");
    let mut text = ctx.report_header();
    text.push_str("domain,baseline_accuracy,adapted_accuracy,gain\n");
    for (d, b, a) in &rows {
        text.push_str(&format!("{d},{b},{a},{}\n", a - b));
    }
    write_report(&table_path, text)?;
    all_outputs.push(table_path);

    println!();
    println!("  {:<16} {:>10} {:>10} {:>8}", "domain", "baseline", "adapted", "gain");
    for (d, b, a) in &rows {
        println!("  {d:<16} {b:>10.4} {a:>10.4} {:>+8.4}", a - b);
    }
    println!();

    write_manifest(
        &ctx.out_dir,
        "repro",
        Some(ctx.loaded.hash_hex()),
        ctx.seed,
        &[&ctx.config_path],
        &all_outputs,
    )?;

    if src_via_adapted.accuracy != src_plain.accuracy {
        return Err(CliError::Assertion(format!(
            "source accuracy moved when evaluated through the adapted checkpoint: {} vs {}",
            src_plain.accuracy, src_via_adapted.accuracy
        )));
    }
    for (d, b, a) in rows.iter().skip(1) {
        if a <= b {
            return Err(CliError::Assertion(format!(
                "adaptation did not improve domain '{d}': baseline {b}, adapted {a}"
            )));
        }
    }
    println!("all run assertions passed");
    Ok(())
}
