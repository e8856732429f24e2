//! Local geometric pooling over patch tokens.
//!
//! Each patch token aggregates the features of its nearest patch centers.
//! Offsets to those neighbours are normalized per (token, channel), paired
//! with the token's own features, scaled by fixed Gaussian weights computed
//! from scale-normalized center coordinates, pooled by a softmax-weighted
//! average and mapped back to the token width by a shared MLP.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, Point3, PointCloud};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const LGP_EPS: f64 = 1e-5;

/// Neighbourhoods among patch centers and their geometric weights. Depends
/// only on coordinates, so it is computed once per cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct LgpGeometry {
    /// Row-major `L × K` indices into the patch tokens.
    pub neighbors: Vec<usize>,
    /// `[L, K, 1]`.
    pub weights: Tensor,
    pub k: usize,
}

impl LgpGeometry {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Neighbourhoods are the `k` nearest centers of each center; weights
    /// are `exp(−‖p′ − c′‖)` on the normalized neighbourhood.
    pub fn from_centers(centers: &[Point3], k: usize) -> Result<Self> {
        if centers.len() < k {
            return Err(Error::Capacity {
                what: "lgp neighbourhood",
                requested: k,
                available: centers.len(),
            });
        }
        let cloud = PointCloud::new(centers.to_vec(), None)?;
        let all: Vec<usize> = (0..centers.len()).collect();
        let patches = geometry::knn(&cloud, &all, k)?;
        let mut weights = Vec::with_capacity(centers.len() * k);
        for (i, c) in centers.iter().enumerate() {
            let pts = patches.patch_points(i);
            let (mu, sigma) = geometry::patch_stats(pts);
            let norm = |p: &Point3| {
                [
                    (p[0] - mu[0]) / sigma,
                    (p[1] - mu[1]) / sigma,
                    (p[2] - mu[2]) / sigma,
                ]
            };
            let local: Vec<Point3> = pts.iter().map(norm).collect();
            weights.extend(geometry::gaussian_weights(&local, &norm(c)));
        }
        Self::new(patches.neighbor_idx, weights, k)
    }

    /// Explicit neighbourhoods and weights (`L × K` each).
    pub fn new(neighbors: Vec<usize>, weights: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0
            || !neighbors.len().is_multiple_of(k)
            || neighbors.len() != weights.len()
            || neighbors.is_empty()
        {
            return Err(Error::InvalidInput("lgp neighbourhood layout".into()));
        }
        let l = neighbors.len() / k;
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= l) {
            return Err(Error::InvalidInput(format!(
                "lgp neighbour {bad} out of range"
            )));
        }
        Ok(Self {
            neighbors,
            weights: Tensor::new([l, k, 1], weights)?,
            k,
        })
    }
}

/// `ΔF / sqrt(Var_K(ΔF) + ε)` with `ΔF = F_K − F_C`; `f_k: [L, K, C]`,
/// `f_c: [L, C]`.
pub fn normalize_relative_features<'t>(f_k: Var<'t>, f_c: Var<'t>) -> Result<Var<'t>> {
    let [l, _, c] = dims3(&f_k)?;
    let delta = f_k.sub(f_c.reshape(vec![l, 1, c])?)?;
    let scale = delta.variance(1, true)?.add_scalar(LGP_EPS)?.sqrt()?;
    Ok(delta.div(scale)?)
}

/// `Concat(F̃_K, F_C) ⊙ γ + β`, giving `[L, K, 2C]`.
pub fn propagate_affine<'t>(
    f_tilde: Var<'t>,
    f_c: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
) -> Result<Var<'t>> {
    let [l, k, c] = dims3(&f_tilde)?;
    let center = f_c.reshape(vec![l, 1, c])?.index_select(1, &vec![0; k])?;
    Ok(Var::concat(&[f_tilde, center], 2)?.mul(gamma)?.add(beta)?)
}

/// Scales every neighbour row by its weight (`weights: [L, K, 1]`).
pub fn couple_geometry<'t>(f_hat: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    Ok(f_hat.mul(weights)?)
}

/// `Σ_k F · softmax_k(F)` over axis 1: `[L, K, D] → [L, D]`.
pub fn softmax_aggregate<'t>(f: Var<'t>) -> Result<Var<'t>> {
    Ok(f.mul(f.softmax(1)?)?.sum(1, false)?)
}

fn dims3(v: &Var<'_>) -> Result<[usize; 3]> {
    match v.shape()[..] {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::InvalidInput(format!(
            "expected a rank-3 tensor, got {s:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Lgp {
    pub dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Lgp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            dim,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([2 * dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([2 * dim])),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), 2 * dim, dim, true, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), dim, dim, true, rng),
        }
    }

    /// `tokens: [L + 1, C]` with the class token in row 0. The class row of
    /// the result is zero, so a residual connection passes it unchanged.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tokens: Var<'t>,
        geom: &LgpGeometry,
    ) -> Result<Var<'t>> {
        let (rows, c) = match tokens.shape()[..] {
            [r, c] if c == self.dim && r >= 2 => (r, c),
            ref s => {
                return Err(Error::InvalidInput(format!(
                    "lgp tokens must be [L+1, {}], got {s:?}",
                    self.dim
                )))
            }
        };
        let l = rows - 1;
        if geom.len() != l {
            return Err(Error::InvalidInput(format!(
                "lgp geometry covers {} tokens, sequence has {l}",
                geom.len()
            )));
        }
        let tape = tokens.tape();
        let f_c = tokens.narrow(0, 1, l)?;
        let f_k = f_c
            .index_select(0, &geom.neighbors)?
            .reshape(vec![l, geom.k, c])?;
        let f_tilde = normalize_relative_features(f_k, f_c)?;
        let f_hat = propagate_affine(f_tilde, f_c, p[self.gamma], p[self.beta])?;
        let weighted = couple_geometry(f_hat, tape.constant(geom.weights.clone()))?;
        let pooled = softmax_aggregate(weighted)?;
        let hidden = self.mlp_in.forward(p, pooled)?.relu()?;
        let out = self.mlp_out.forward(p, hidden)?;
        let cls = tape.constant(Tensor::zeros([1, c]));
        Ok(Var::concat(&[cls, out], 0)?)
    }

    pub fn num_params(&self) -> usize {
        4 * self.dim + self.mlp_in.num_params() + self.mlp_out.num_params()
    }
}
