//! Command implementations. Each writes human-readable progress to `out`
//! and returns a report the caller can check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pointssm_core::data::{
    load_checkpoint, parse_off_bytes, sample_mesh_surface, save_checkpoint, save_xyz,
    synthetic_split, Checkpoint, ShapeClass,
};
use pointssm_core::gradcheck::{suite, ModuleCheck};
use pointssm_core::model::{
    count_params, estimate_macs, prepare, MacReport, Model, ModelConfig, ParamReport, Prepared,
};
use pointssm_core::tensor::Fault;
use pointssm_core::train::{confusion, fit, predict, EpochMetrics, METRICS_HEADER};
use pointssm_core::{Error, PointCloud};

use crate::config::RunConfig;
use crate::dataset::{load_dir, load_split, write_dir, Split};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.hemb";
pub const CONFIG_FILE: &str = "config.txt";
pub const CONFUSION_FILE: &str = "confusion.csv";

fn prepare_all(cfg: &ModelConfig, clouds: &[PointCloud]) -> Result<Vec<Prepared>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if let Some(l) = c.label.filter(|&l| l >= cfg.num_classes) {
                bail!(
                    "cloud {i} has label {l} but the model has {} classes",
                    cfg.num_classes
                );
            }
            Ok(prepare(cfg, c)?)
        })
        .collect()
}

fn class_name(id: usize) -> String {
    ShapeClass::from_id(id).map_or_else(|_| format!("class{id}"), |c| c.name().to_string())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub config_path: PathBuf,
}

/// Trains from scratch and writes the resolved config, the per-epoch
/// metrics CSV and the final checkpoint into `cfg.out_dir`.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainReport> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_text())
        .with_context(|| format!("writing {}", config_path.display()))?;

    let train = prepare_all(&cfg.model, &load_split(&cfg.data, Split::Train)?)?;
    let test = match cfg.data.test_per_class {
        0 if cfg.data.test_data == crate::config::SYNTHETIC => Vec::new(),
        _ => prepare_all(&cfg.model, &load_split(&cfg.data, Split::Test)?)?,
    };
    let (model, mut store) = Model::init(&cfg.model)?;
    writeln!(
        out,
        "{} parameters, {} training and {} test clouds, {} epochs",
        store.numel(),
        train.len(),
        test.len(),
        cfg.train.epochs
    )?;
    let mut csv = format!("{METRICS_HEADER}\n");
    let metrics = fit(&model, &mut store, &cfg.train, &train, &test, |m| {
        csv.push_str(&m.csv_row());
        csv.push('\n');
        writeln!(
            out,
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  lr {:.3e}",
            m.epoch, m.train_loss, m.train_acc, m.test_acc, m.lr
        )
        .map_err(|e| Error::InvalidInput(format!("writing progress: {e}")))
    })?;
    let metrics_path = dir.join(METRICS_FILE);
    fs::write(&metrics_path, csv).with_context(|| format!("writing {}", metrics_path.display()))?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(
        &checkpoint_path,
        &Checkpoint::from_store(cfg.to_text(), &store),
    )?;
    writeln!(
        out,
        "wrote {}, {}, {}",
        config_path.display(),
        metrics_path.display(),
        checkpoint_path.display()
    )?;
    Ok(TrainReport {
        metrics,
        metrics_path,
        checkpoint_path,
        config_path,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub confusion_path: PathBuf,
}

/// Overall and per-class accuracy of a checkpoint, on `data` (a directory
/// with a manifest) or on the test split recorded in the checkpoint.
pub fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::from_text(&ckpt.config)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let (model, mut store) =
        Model::init(&cfg.model).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    ckpt.restore(&mut store)?;
    let clouds = match data {
        Some(dir) => load_dir(dir)?,
        None => load_split(&cfg.data, Split::Test)?,
    };
    let labels: Vec<usize> = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| c.label.with_context(|| format!("cloud {i} has no label")))
        .collect::<Result<_>>()?;
    let prepared = prepare_all(&cfg.model, &clouds)?;
    let pred = predict(&model, &store, &prepared)?;
    let k = cfg.model.num_classes;
    let m = confusion(&pred, &labels, k);
    let hits: usize = (0..k).map(|i| m[i][i]).sum();
    let accuracy = hits as f64 / labels.len() as f64;

    writeln!(
        out,
        "overall accuracy {accuracy:.4} ({hits}/{})",
        labels.len()
    )?;
    writeln!(
        out,
        "{:>5}  {:<10} {:>6} {:>7} {:>8}",
        "class", "name", "count", "correct", "accuracy"
    )?;
    for (i, row) in m.iter().enumerate() {
        let count: usize = row.iter().sum();
        let acc = if count == 0 {
            0.0
        } else {
            row[i] as f64 / count as f64
        };
        writeln!(
            out,
            "{i:>5}  {:<10} {count:>6} {:>7} {acc:>8.4}",
            class_name(i),
            row[i]
        )?;
    }

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let confusion_path = out_dir.join(CONFUSION_FILE);
    let mut w = csv::Writer::from_path(&confusion_path)?;
    w.write_record(std::iter::once("true".to_string()).chain((0..k).map(|j| j.to_string())))?;
    for (i, row) in m.iter().enumerate() {
        w.write_record(std::iter::once(i.to_string()).chain(row.iter().map(|c| c.to_string())))?;
    }
    w.flush()?;
    writeln!(out, "wrote {}", confusion_path.display())?;
    Ok(EvalReport {
        accuracy,
        confusion: m,
        confusion_path,
    })
}

/// Enhancer parameter delta bounds at the full-size setting.
pub const COFE_DELTA_RANGE: (i64, i64) = (25_000, 35_000);
/// Enhancer compute delta at the full-size setting, in G multiply-accumulates.
pub const COFE_MAC_TARGET: f64 = 0.09;

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub params: ParamReport,
    pub macs: MacReport,
    pub full_size: ParamReport,
    pub full_size_cofe_macs: f64,
    pub passed: bool,
}

/// Parameter and compute tables for `cfg`, plus the enhancer and
/// geometric-weight deltas at the full-size setting.
pub fn audit(cfg: &ModelConfig, out: &mut dyn Write) -> Result<AuditReport> {
    let params = count_params(cfg)?;
    let macs = estimate_macs(cfg);
    writeln!(out, "{params}\n\n{macs}\n")?;
    let full_size = count_params(&ModelConfig::full_size())?;
    let full_size_cofe_macs = estimate_macs(&ModelConfig::full_size()).cofe as f64 / 1e9;
    let (lo, hi) = COFE_DELTA_RANGE;
    let checks = [
        (
            format!("full-size cofe parameter delta {} in [{lo}, {hi}]", full_size.cofe_delta),
            (lo..=hi).contains(&full_size.cofe_delta),
        ),
        (
            format!("full-size geometric weight delta {} == 0", full_size.geo_delta),
            full_size.geo_delta == 0,
        ),
        (
            format!("full-size cofe compute delta {full_size_cofe_macs:.4} G within 50% of {COFE_MAC_TARGET} G"),
            (full_size_cofe_macs - COFE_MAC_TARGET).abs() <= 0.5 * COFE_MAC_TARGET,
        ),
        ("parameter traversals agree".to_string(), params.consistent() && full_size.consistent()),
    ];
    for (what, ok) in &checks {
        writeln!(out, "{} {what}", if *ok { "PASS" } else { "FAIL" })?;
    }
    Ok(AuditReport {
        params,
        macs,
        full_size,
        full_size_cofe_macs,
        passed: checks.iter().all(|c| c.1),
    })
}

/// Finite-difference checks of every module and the end-to-end toy model.
/// `inject_fault` swaps in a wrong sigmoid backward rule.
pub fn gradcheck(
    seed: u64,
    seeds: u64,
    inject_fault: bool,
    out: &mut dyn Write,
) -> Result<Vec<ModuleCheck>> {
    let fault = inject_fault.then_some(Fault::SigmoidBackward);
    let report = suite(seed, seeds, fault)?;
    writeln!(
        out,
        "{:<8} {:>12} {:>10}  result  worst leaf",
        "module", "rel. error", "threshold"
    )?;
    for m in &report {
        writeln!(
            out,
            "{:<8} {:>12.3e} {:>10.0e}  {:<6}  {}",
            m.module,
            m.worst,
            m.threshold,
            if m.passed() { "PASS" } else { "FAIL" },
            m.leaf
        )?;
    }
    Ok(report)
}

/// Writes `per_class` clouds of every synthetic class into `dir`.
pub fn synth(
    dir: &Path,
    per_class: usize,
    n_points: usize,
    seed: u64,
    split: Split,
    augment: bool,
    out: &mut dyn Write,
) -> Result<usize> {
    let clouds = synthetic_split(per_class, n_points, seed, split.index(), augment)?;
    let n = write_dir(dir, &clouds)?;
    writeln!(
        out,
        "wrote {n} clouds and {} to {}",
        crate::dataset::MANIFEST,
        dir.display()
    )?;
    Ok(n)
}

/// Samples `n` surface points of an OFF mesh into an XYZ file.
pub fn sample_off(
    input: &Path,
    n: usize,
    seed: u64,
    output: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let mesh = parse_off_bytes(&bytes).with_context(|| format!("parsing {}", input.display()))?;
    let cloud = sample_mesh_surface(&mesh, n, seed)?;
    save_xyz(output, &cloud)?;
    writeln!(
        out,
        "sampled {n} points from {} vertices and {} triangles into {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        output.display()
    )?;
    Ok(())
}
