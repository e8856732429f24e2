//! Bidirectional SSM block: input projection, optional feature enhancer,
//! a forward selective scan plus a second scan over the channel-flipped
//! features, merged by a linear map.

use rand::Rng;

use crate::cofe::Cofe;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore, PointwiseConv};
use crate::ssm::SelectiveSsm;
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BissmOptions {
    pub use_cofe: bool,
    pub gated: bool,
    pub share_weights: bool,
}

impl Default for BissmOptions {
    fn default() -> Self {
        Self {
            use_cofe: true,
            gated: true,
            share_weights: false,
        }
    }
}

/// Reverses axis `axis` (the channel axis).
pub fn channel_flip<'t>(x: Var<'t>, axis: usize) -> Result<Var<'t>> {
    let n = *x
        .shape()
        .get(axis)
        .ok_or_else(|| Error::InvalidInput(format!("no axis {axis} to flip")))?;
    let rev: Vec<usize> = (0..n).rev().collect();
    Ok(x.index_select(axis, &rev)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Bissm {
    pub dim: usize,
    pub in_proj: PointwiseConv,
    pub cofe: Option<Cofe>,
    pub fwd: SelectiveSsm,
    pub rev: SelectiveSsm,
    pub out_proj: PointwiseConv,
}

impl Bissm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        state: usize,
        groups: usize,
        opts: BissmOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_proj = PointwiseConv::new(store, &format!("{name}.in_proj"), dim, dim, rng);
        let cofe = match opts.use_cofe {
            true => Some(Cofe::new(store, &format!("{name}.cofe"), dim, groups, rng)?),
            false => None,
        };
        let fwd = SelectiveSsm::new(store, &format!("{name}.fwd"), dim, state, opts.gated, rng);
        let rev = match opts.share_weights {
            true => fwd,
            false => SelectiveSsm::new(store, &format!("{name}.rev"), dim, state, opts.gated, rng),
        };
        let out_proj = PointwiseConv::new(store, &format!("{name}.out_proj"), dim, dim, rng);
        Ok(Self {
            dim,
            in_proj,
            cofe,
            fwd,
            rev,
            out_proj,
        })
    }

    /// The enhanced features `F′` fed to both scans, `[C, L]`.
    pub fn features<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.in_proj.forward(p, x)?;
        match &self.cofe {
            Some(cofe) => cofe.forward(p, f),
            None => Ok(f),
        }
    }

    /// `x: [C, L]` (or `[B, C, L]`, processed item by item).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match x.shape()[..] {
            [c, _] if c == self.dim => {}
            [b, c, l] if c == self.dim => {
                let items = (0..b)
                    .map(|i| {
                        self.forward(p, x.narrow(0, i, 1)?.reshape(vec![c, l])?)?
                            .reshape(vec![1, c, l])
                            .map_err(Into::into)
                    })
                    .collect::<Result<Vec<_>>>()?;
                return Ok(Var::concat(&items, 0)?);
            }
            ref s => {
                return Err(Error::InvalidInput(format!(
                    "bissm expects {} channels, got {s:?}",
                    self.dim
                )))
            }
        }
        let f = self.features(p, x)?;
        let fwd = self.fwd.forward(p, f)?;
        let rev = channel_flip(self.rev.forward(p, channel_flip(f, 0)?)?, 0)?;
        self.out_proj.forward(p, fwd.add(rev)?)
    }

    /// Parameters owned by this block (a shared reverse scan counts once).
    pub fn num_params(&self) -> usize {
        let shared = self.fwd.a_log == self.rev.a_log;
        self.in_proj.num_params()
            + self.cofe.map_or(0, |c| c.num_params())
            + self.fwd.num_params()
            + if shared { 0 } else { self.rev.num_params() }
            + self.out_proj.num_params()
    }
}
