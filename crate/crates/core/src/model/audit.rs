//! Parameter and multiply-accumulate accounting.

use std::fmt;

use super::{Model, ModelConfig, ENCODER_HIDDEN, HEAD_HIDDEN};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub name: String,
    /// Count derived from the module structure.
    pub count: usize,
    /// Count summed over the stored tensors under this name prefix.
    pub stored: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
    /// Total with the feature enhancer minus total without it.
    pub cofe_delta: i64,
    /// Total with Gaussian geometric weights minus total without them.
    pub geo_delta: i64,
}

impl ParamReport {
    /// Both traversals agree row by row and the rows cover every tensor.
    pub fn consistent(&self) -> bool {
        self.rows.iter().all(|r| r.count == r.stored)
            && self.rows.iter().map(|r| r.count).sum::<usize>() == self.total
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in &self.rows {
            writeln!(f, "{:width$}  {:>12}", r.name, r.count)?;
        }
        writeln!(f, "{:width$}  {:>12}", "total", self.total)?;
        writeln!(
            f,
            "cofe delta: {} ({:.4}M)",
            self.cofe_delta,
            self.cofe_delta as f64 / 1e6
        )?;
        write!(f, "geometric weight delta: {}", self.geo_delta)
    }
}

fn stored_under(store: &ParamStore, prefix: &str) -> usize {
    let dotted = format!("{prefix}.");
    store
        .iter()
        .filter(|(n, _)| *n == prefix || n.starts_with(&dotted))
        .map(|(_, t)| t.numel())
        .sum()
}

fn rows(model: &Model, store: &ParamStore) -> Vec<ParamRow> {
    let mut out = Vec::new();
    let mut push = |name: String, count: usize| {
        let stored = stored_under(store, &name);
        out.push(ParamRow {
            name,
            count,
            stored,
        });
    };
    push("encoder".into(), model.encoder.num_params());
    push("cls_token".into(), model.cfg.dim);
    push("pos0".into(), model.pos0.num_params());
    for (i, b) in model.blocks.iter().enumerate() {
        let name = |s: &str| format!("blocks.{i}.{s}");
        push(name("pos"), b.pos.num_params());
        push(name("norm1"), b.norm1.num_params());
        push(name("lgp"), b.lgp.num_params());
        push(name("norm2"), b.norm2.num_params());
        let m = &b.bissm;
        push(name("bissm.in_proj"), m.in_proj.num_params());
        if let Some(c) = m.cofe {
            push(name("bissm.cofe"), c.num_params());
        }
        push(name("bissm.fwd"), m.fwd.num_params());
        if m.rev.a_log != m.fwd.a_log {
            push(name("bissm.rev"), m.rev.num_params());
        }
        push(name("bissm.out_proj"), m.out_proj.num_params());
    }
    push("norm".into(), model.norm.num_params());
    push("head".into(), model.head.num_params());
    out
}

fn total(cfg: &ModelConfig) -> Result<usize> {
    let (model, store) = Model::init(cfg)?;
    if model.num_params() != store.numel() {
        return Err(Error::InvalidInput(format!(
            "parameter traversals disagree: {} vs {}",
            model.num_params(),
            store.numel()
        )));
    }
    Ok(store.numel())
}

/// Per-module table plus the enhancer and geometric-weight deltas.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let (model, store) = Model::init(cfg)?;
    let rows = rows(&model, &store);
    let toggled = |f: fn(&mut ModelConfig, bool)| -> Result<i64> {
        let mut on = cfg.clone();
        f(&mut on, true);
        let mut off = cfg.clone();
        f(&mut off, false);
        Ok(total(&on)? as i64 - total(&off)? as i64)
    };
    Ok(ParamReport {
        rows,
        total: store.numel(),
        cofe_delta: toggled(|c, v| c.use_cofe = v)?,
        geo_delta: toggled(|c, v| c.use_geo_weights = v)?,
    })
}

/// Coarse multiply-accumulate counts for one forward pass. Matrix products
/// count one MAC per multiply-add; element-wise work counts one MAC per
/// element per operation.
#[derive(Debug, Clone, PartialEq)]
pub struct MacReport {
    pub rows: Vec<(String, u64)>,
    pub total: u64,
    pub cofe: u64,
}

impl fmt::Display for MacReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, macs) in &self.rows {
            writeln!(f, "{name:10}  {:>10.4} G", *macs as f64 / 1e9)?;
        }
        writeln!(f, "{:10}  {:>10.4} G", "total", self.total as f64 / 1e9)?;
        write!(f, "cofe delta: {:.4} G", self.cofe as f64 / 1e9)
    }
}

pub fn estimate_macs(cfg: &ModelConfig) -> MacReport {
    let [h1, h2] = ENCODER_HIDDEN.map(|v| v as u64);
    let (l, k, c, n) = (
        cfg.num_groups as u64,
        cfg.group_size as u64,
        cfg.dim as u64,
        cfg.ssm_state as u64,
    );
    let (g, depth, nb) = (
        cfg.cofe_groups as u64,
        cfg.depth as u64,
        cfg.lgp_neighbors as u64,
    );
    let t = l + 1;
    let encoder = l * k * (3 * h1 + h1 * h2 + h2 * c + c * c) + l * h2 * c;
    let pos = (depth + 1) * l * (3 * c + c * c);
    // Neighbour normalization, affine, weighting and softmax pooling.
    let lgp = depth * (l * 3 * c * c + l * nb * 2 * c * 8);
    let norms = depth * 2 * t * c * 5 + t * c * 5;
    let gate = if cfg.ssm_gate { c * c * t } else { 0 };
    let scan = 2 * n * c * t + c * c * t + 3 * c * n * t + gate;
    // Sharing reverse weights still runs both scans.
    let bissm = depth * (2 * c * c * t + 2 * scan);
    // Two group convolutions plus norm, compression and gating.
    let cofe = if cfg.use_cofe {
        depth * (4 * c * c * t / g + 12 * c * t)
    } else {
        0
    };
    let head_in = if cfg.head_pool { 2 * c } else { c };
    let head = head_in * HEAD_HIDDEN as u64
        + (HEAD_HIDDEN * HEAD_HIDDEN) as u64
        + (HEAD_HIDDEN * cfg.num_classes) as u64;
    let rows: Vec<(String, u64)> = [
        ("encoder", encoder),
        ("pos_embed", pos),
        ("lgp", lgp),
        ("norms", norms),
        ("bissm", bissm),
        ("cofe", cofe),
        ("head", head),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b))
    .collect();
    MacReport {
        total: rows.iter().map(|r| r.1).sum(),
        rows,
        cofe,
    }
}
