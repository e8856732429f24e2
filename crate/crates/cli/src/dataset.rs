//! Labelled cloud collections: the synthetic splits or a directory of XYZ
//! files listed in `manifest.csv`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pointssm_core::data::{load_xyz, save_xyz, synthetic_split, ShapeClass};
use pointssm_core::PointCloud;

use crate::config::{DataConfig, SYNTHETIC};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

pub fn load_split(cfg: &DataConfig, split: Split) -> Result<Vec<PointCloud>> {
    let (source, per_class) = match split {
        Split::Train => (&cfg.train_data, cfg.train_per_class),
        Split::Test => (&cfg.test_data, cfg.test_per_class),
    };
    if source == SYNTHETIC {
        return Ok(synthetic_split(
            per_class,
            cfg.n_points,
            cfg.seed,
            split.index(),
            cfg.augment,
        )?);
    }
    load_dir(Path::new(source))
}

/// Clouds listed in `dir/manifest.csv` (`file,label,class`), labelled from
/// the manifest.
pub fn load_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", manifest.display(), i + 2))?;
        let (Some(file), Some(label)) = (row.get(0), row.get(1)) else {
            bail!("{}: row {} needs `file,label`", manifest.display(), i + 2);
        };
        let label: usize = label.parse().with_context(|| {
            format!(
                "{}: row {}: invalid label `{label}`",
                manifest.display(),
                i + 2
            )
        })?;
        let mut cloud = load_xyz(dir.join(file))?;
        cloud.label = Some(label);
        out.push(cloud);
    }
    if out.is_empty() {
        bail!("{} lists no clouds", manifest.display());
    }
    Ok(out)
}

/// Writes one XYZ file per cloud plus the manifest; returns the file count.
pub fn write_dir(dir: &Path, clouds: &[PointCloud]) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST))?;
    manifest.write_record(["file", "label", "class"])?;
    let mut counts = [0usize; ShapeClass::ALL.len()];
    for cloud in clouds {
        let label = cloud.label.context("cloud without a label")?;
        let class = ShapeClass::from_id(label)?;
        let name = format!("{}_{:04}.xyz", class.name(), counts[label]);
        counts[label] += 1;
        save_xyz(dir.join(&name), cloud)?;
        manifest.write_record([name.as_str(), &label.to_string(), class.name()])?;
    }
    manifest.flush()?;
    Ok(clouds.len())
}
