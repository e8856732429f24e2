//! Collaborative feature enhancer: a per-position sigmoid gate produced by
//! two parallel paths over channel groups and their cross interaction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform, Bound, ParamId, ParamStore, NORM_EPS};
use crate::tensor::{Tensor, Var};

/// `[B, C, L] → [B·g, C/g, L]`.
pub fn group_reshape<'t>(x: Var<'t>, groups: usize) -> Result<Var<'t>> {
    let [b, c, l] = dims(&x)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "{groups} groups do not divide {c} channels"
        )));
    }
    Ok(x.reshape(vec![b * groups, c / groups, l])?)
}

/// Inverse of [`group_reshape`].
pub fn group_unreshape<'t>(x: Var<'t>, batch: usize) -> Result<Var<'t>> {
    let [bg, cg, l] = dims(&x)?;
    if batch == 0 || bg % batch != 0 {
        return Err(Error::InvalidInput(format!(
            "{bg} grouped rows for batch {batch}"
        )));
    }
    Ok(x.reshape(vec![batch, cg * (bg / batch), l])?)
}

fn dims(x: &Var<'_>) -> Result<[usize; 3]> {
    match x.shape()[..] {
        [b, c, l] => Ok([b, c, l]),
        ref s => Err(Error::InvalidInput(format!(
            "expected [B, C, L], got {s:?}"
        ))),
    }
}

/// Softmax over `L` of the channel mean: `[G, c, L] → [G, 1, L]`.
pub fn compress<'t>(x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.mean(1, true)?.softmax(2)?)
}

/// `σ(φ(X₁)⊙mean_c(X₂) + φ(X₂)⊙mean_c(X₁))`, `[G, 1, L]`.
pub fn cross_interact<'t>(x1: Var<'t>, x2: Var<'t>) -> Result<Var<'t>> {
    let s12 = compress(x1)?.mul(x2.mean(1, true)?)?;
    let s21 = compress(x2)?.mul(x1.mean(1, true)?)?;
    Ok(s12.add(s21)?.sigmoid()?)
}

#[derive(Debug, Clone, Copy)]
pub struct Cofe {
    pub channels: usize,
    pub groups: usize,
    /// `[c, c, 1]` with `c = C/g`.
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// `[c, c, 3]`.
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
}

impl Cofe {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{groups} groups do not divide {channels} channels"
            )));
        }
        let c = channels / groups;
        let b1 = 1.0 / (c as f64).sqrt();
        let b3 = 1.0 / (3.0 * c as f64).sqrt();
        Ok(Self {
            channels,
            groups,
            gate_weight: store.add(format!("{name}.gate.weight"), uniform(rng, &[c, c, 1], b1)),
            gate_bias: store.add(format!("{name}.gate.bias"), Tensor::zeros([c, 1])),
            norm_gamma: store.add(format!("{name}.norm.gamma"), Tensor::ones([c, 1])),
            norm_beta: store.add(format!("{name}.norm.beta"), Tensor::zeros([c, 1])),
            conv_weight: store.add(format!("{name}.conv.weight"), uniform(rng, &[c, c, 3], b3)),
            conv_bias: store.add(format!("{name}.conv.bias"), Tensor::zeros([c, 1])),
        })
    }

    /// `GN(X′ ⊙ σ(W · mean_L(X′) + b))`, one normalization group per row.
    pub fn gated_norm_path<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let [g, c, l] = dims(&x)?;
        let gate = x
            .mean(2, true)?
            .conv1d(p[self.gate_weight])?
            .add(p[self.gate_bias])?
            .sigmoid()?;
        let flat = x.mul(gate)?.reshape(vec![g, c * l])?;
        let mean = flat.mean(1, true)?;
        let scale = flat.variance(1, true)?.add_scalar(NORM_EPS)?.sqrt()?;
        let normed = flat.sub(mean)?.div(scale)?.reshape(vec![g, c, l])?;
        Ok(normed.mul(p[self.norm_gamma])?.add(p[self.norm_beta])?)
    }

    /// Width-3 zero-padded convolution along `L`.
    pub fn conv_path<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv1d(p[self.conv_weight])?.add(p[self.conv_bias])?)
    }

    /// Gate `W: [B·g, 1, L]` for grouped input.
    pub fn gate<'t>(&self, p: &Bound<'t>, grouped: Var<'t>) -> Result<Var<'t>> {
        let x1 = self.gated_norm_path(p, grouped)?;
        let x2 = self.conv_path(p, grouped)?;
        cross_interact(x1, x2)
    }

    /// `x: [B, C, L]` or `[C, L]`; output has the input's shape.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let x3 = match shape[..] {
            [c, l] => x.reshape(vec![1, c, l])?,
            _ => x,
        };
        let batch = dims(&x3)?[0];
        if dims(&x3)?[1] != self.channels {
            return Err(Error::InvalidInput(format!(
                "cofe expects {} channels, got {shape:?}",
                self.channels
            )));
        }
        let grouped = group_reshape(x3, self.groups)?;
        let w = self.gate(p, grouped)?;
        let out = group_unreshape(grouped.mul(w)?, batch)?;
        Ok(out.reshape(shape)?)
    }

    pub fn num_params(&self) -> usize {
        let c = self.channels / self.groups;
        4 * c * c + 4 * c
    }
}
