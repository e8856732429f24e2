//! End-to-end point-cloud classifier.
//!
//! A cloud is split into `L` patches of `K` points (FPS then KNN), every
//! patch is embedded by a two-stage max-pool point encoder, a class token is
//! prepended and the `L + 1` tokens run through `depth` encoder blocks
//! (local geometric pooling, then the bidirectional SSM). The class row of
//! the final normalized sequence, optionally joined by a max-pool over the
//! patch rows, feeds a three-layer MLP head.

mod audit;
mod config;

pub use audit::{count_params, estimate_macs, MacReport, ParamReport};
pub use config::{ModelConfig, MODEL_KEYS};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bissm::{Bissm, BissmOptions};
use crate::error::{Error, Result};
use crate::geometry::{self, Point3, PointCloud};
use crate::lgp::{Lgp, LgpGeometry};
use crate::nn::{uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const ENCODER_HIDDEN: [usize; 2] = [64, 128];
pub const HEAD_HIDDEN: usize = 256;

/// A cloud reduced to everything the network needs from its coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// `[L·K, 3]` patch points relative to their center, divided by the
    /// cloud's RMS radius.
    pub patch_input: Tensor,
    /// `[L, 3]` raw center coordinates.
    pub centers: Tensor,
    pub geometry: LgpGeometry,
    pub label: Option<usize>,
}

/// RMS distance of the points to their centroid (1 for a single location).
pub fn cloud_radius(points: &[Point3]) -> f64 {
    let n = points.len() as f64;
    let mut mu = [0.0; 3];
    for p in points {
        (0..3).for_each(|d| mu[d] += p[d] / n);
    }
    let r = (points.iter().map(|p| geometry::dist2(p, &mu)).sum::<f64>() / n).sqrt();
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// FPS + KNN patching, encoder input and LGP neighbourhoods for one cloud.
pub fn prepare(cfg: &ModelConfig, cloud: &PointCloud) -> Result<Prepared> {
    let need = cfg.num_groups.max(cfg.group_size);
    if cloud.len() < need {
        return Err(Error::Capacity {
            what: "point cloud",
            requested: need,
            available: cloud.len(),
        });
    }
    let patches = geometry::group(cloud, cfg.num_groups, cfg.group_size)?;
    let radius = cloud_radius(&cloud.points);
    let mut input = Vec::with_capacity(patches.neighbor_points.len() * 3);
    for (i, c) in patches.centers.iter().enumerate() {
        for p in patches.patch_points(i) {
            input.extend((0..3).map(|d| (p[d] - c[d]) / radius));
        }
    }
    let mut geom = LgpGeometry::from_centers(&patches.centers, cfg.lgp_neighbors)?;
    if !cfg.use_geo_weights {
        geom.weights = Tensor::ones(geom.weights.shape().to_vec());
    }
    Ok(Prepared {
        patch_input: Tensor::new([cfg.num_groups * cfg.group_size, 3], input)?,
        centers: Tensor::new(
            [cfg.num_groups, 3],
            patches.centers.iter().flatten().copied().collect(),
        )?,
        geometry: geom,
        label: cloud.label,
    })
}

/// Two-stage max-pool encoder. The second stage acts on
/// `concat(pooled, point)`; its weight `[256, C]` is applied as two row
/// blocks so the pooled half is computed once per patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchEncoder {
    pub first_a: Linear,
    pub first_b: Linear,
    pub second_a: Linear,
    pub second_b: Linear,
}

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let [h1, h2] = ENCODER_HIDDEN;
        Self {
            first_a: Linear::new(store, &format!("{name}.first.0"), 3, h1, true, rng),
            first_b: Linear::new(store, &format!("{name}.first.1"), h1, h2, true, rng),
            second_a: Linear::new(store, &format!("{name}.second.0"), 2 * h2, dim, true, rng),
            second_b: Linear::new(store, &format!("{name}.second.1"), dim, dim, true, rng),
        }
    }

    /// `points: [L·K, 3]` → `[L, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, points: Var<'t>, groups: usize) -> Result<Var<'t>> {
        let rows = points.shape()[0];
        if groups == 0 || !rows.is_multiple_of(groups) {
            return Err(Error::InvalidInput(format!(
                "{rows} points do not split into {groups} patches"
            )));
        }
        let k = rows / groups;
        let h2 = ENCODER_HIDDEN[1];
        let c = self.second_b.fan_out;
        let f = self.first_a.forward(p, points)?.relu()?;
        let f = self.first_b.forward(p, f)?;
        let pooled = f.reshape(vec![groups, k, h2])?.max(1, false)?;
        let w = p[self.second_a.weight];
        let global = pooled.matmul(w.narrow(0, 0, h2)?)?;
        let global = match self.second_a.bias {
            Some(b) => global.add(p[b])?,
            None => global,
        };
        let local = f
            .matmul(w.narrow(0, h2, h2)?)?
            .reshape(vec![groups, k, c])?;
        let h = local.add(global.reshape(vec![groups, 1, c])?)?.relu()?;
        let h = self.second_b.forward(p, h.reshape(vec![rows, c])?)?;
        Ok(h.reshape(vec![groups, k, c])?.max(1, false)?)
    }

    pub fn num_params(&self) -> usize {
        self.first_a.num_params()
            + self.first_b.num_params()
            + self.second_a.num_params()
            + self.second_b.num_params()
    }
}

/// Positional embedding for one layer: a learned class-row vector and a
/// two-layer MLP on center coordinates for the patch rows.
#[derive(Debug, Clone, Copy)]
pub struct PosEmbed {
    pub cls: ParamId,
    pub mlp_a: Linear,
    pub mlp_b: Linear,
}

impl PosEmbed {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            cls: store.add(format!("{name}.cls"), uniform(rng, &[1, dim], 0.02)),
            mlp_a: Linear::new(store, &format!("{name}.mlp.0"), 3, dim, true, rng),
            mlp_b: Linear::new(store, &format!("{name}.mlp.1"), dim, dim, true, rng),
        }
    }

    /// `centers: [L, 3]` → `[L + 1, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, centers: Var<'t>) -> Result<Var<'t>> {
        let h = self.mlp_a.forward(p, centers)?.relu()?;
        let pos = self.mlp_b.forward(p, h)?;
        Ok(Var::concat(&[p[self.cls], pos], 0)?)
    }

    pub fn num_params(&self) -> usize {
        self.mlp_a.fan_out + self.mlp_a.num_params() + self.mlp_b.num_params()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub pos: PosEmbed,
    pub norm1: LayerNorm,
    pub lgp: Lgp,
    pub norm2: LayerNorm,
    pub bissm: Bissm,
}

/// Residual-branch dropping during training; `None` runs deterministically.
pub struct DropPath<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl DropPath<'_> {
    fn apply<'t>(&mut self, branch: Var<'t>) -> Result<Option<Var<'t>>> {
        if self.rate <= 0.0 {
            return Ok(Some(branch));
        }
        if self.rate >= 1.0 || self.rng.gen::<f64>() < self.rate {
            return Ok(None);
        }
        Ok(Some(branch.scale(1.0 / (1.0 - self.rate))?))
    }
}

fn residual<'t>(z: Var<'t>, branch: Var<'t>, drop: &mut Option<DropPath<'_>>) -> Result<Var<'t>> {
    let kept = match drop {
        Some(d) => d.apply(branch)?,
        None => Some(branch),
    };
    match kept {
        Some(b) => Ok(z.add(b)?),
        None => Ok(z),
    }
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.dim;
        let opts = BissmOptions {
            use_cofe: cfg.use_cofe,
            gated: cfg.ssm_gate,
            share_weights: cfg.share_rev_weights,
        };
        Ok(Self {
            pos: PosEmbed::new(store, &format!("{name}.pos"), c, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            lgp: Lgp::new(store, &format!("{name}.lgp"), c, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            bissm: Bissm::new(
                store,
                &format!("{name}.bissm"),
                c,
                cfg.ssm_state,
                cfg.cofe_groups,
                opts,
                rng,
            )?,
        })
    }

    /// `z: [L + 1, C]`, `pos`: this layer's positional rows.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        pos: Var<'t>,
        geom: &LgpGeometry,
        drop: &mut Option<DropPath<'_>>,
    ) -> Result<Var<'t>> {
        let local = self
            .lgp
            .forward(p, self.norm1.forward(p, z.add(pos)?)?, geom)?;
        let z_hat = residual(z, local, drop)?;
        let seq = self.norm2.forward(p, z_hat)?.t()?;
        let mixed = self.bissm.forward(p, seq)?.t()?;
        residual(z_hat, mixed, drop)
    }

    pub fn num_params(&self) -> usize {
        self.pos.num_params()
            + self.norm1.num_params()
            + self.lgp.num_params()
            + self.norm2.num_params()
            + self.bissm.num_params()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, HEAD_HIDDEN, true, rng),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                HEAD_HIDDEN,
                HEAD_HIDDEN,
                true,
                rng,
            ),
            fc3: Linear::new(
                store,
                &format!("{name}.fc3"),
                HEAD_HIDDEN,
                classes,
                true,
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.relu()?;
        let h = self.fc2.forward(p, h)?.relu()?;
        self.fc3.forward(p, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params() + self.fc3.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: PatchEncoder,
    pub cls_token: ParamId,
    /// Positional embedding added to the initial sequence.
    pub pos0: PosEmbed,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub head: Head,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let encoder = PatchEncoder::new(store, "encoder", c, rng);
        let cls_token = store.add("cls_token", uniform(rng, &[1, c], 0.02));
        let pos0 = PosEmbed::new(store, "pos0", c, rng);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("blocks.{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "norm", c);
        let head_in = if cfg.head_pool { 2 * c } else { c };
        let head = Head::new(store, "head", head_in, cfg.num_classes, rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            cls_token,
            pos0,
            blocks,
            norm,
            head,
        })
    }

    /// Fresh parameters drawn from a ChaCha8 stream seeded with `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg, &mut rng)?;
        Ok((model, store))
    }

    /// `Z⁰`: class token and patch tokens plus the initial positional rows.
    pub fn token_sequence<'t>(
        &self,
        p: &Bound<'t>,
        patch_tokens: Var<'t>,
        centers: Var<'t>,
    ) -> Result<Var<'t>> {
        let z = Var::concat(&[p[self.cls_token], patch_tokens], 0)?;
        Ok(z.add(self.pos0.forward(p, centers)?)?)
    }

    /// Final encoder sequence `[L + 1, C]` before the last norm.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        x: &Prepared,
        drop: &mut Option<DropPath<'_>>,
    ) -> Result<Var<'t>> {
        let tape = p[self.cls_token].tape();
        let tokens =
            self.encoder
                .forward(p, tape.constant(x.patch_input.clone()), self.cfg.num_groups)?;
        let centers = tape.constant(x.centers.clone());
        let mut z = self.token_sequence(p, tokens, centers)?;
        for block in &self.blocks {
            let pos = block.pos.forward(p, centers)?;
            z = block.forward(p, z, pos, &x.geometry, drop)?;
        }
        Ok(z)
    }

    /// Head applied to a final sequence `[L + 1, C]`; returns `[classes]`.
    pub fn classify<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let z = self.norm.forward(p, z)?;
        let cls = z.narrow(0, 0, 1)?;
        let feat = match self.cfg.head_pool {
            true => {
                let rows = z.shape()[0];
                let pooled = z.narrow(0, 1, rows - 1)?.max(0, true)?;
                Var::concat(&[cls, pooled], 1)?
            }
            false => cls,
        };
        Ok(self
            .head
            .forward(p, feat)?
            .reshape(vec![self.cfg.num_classes])?)
    }

    /// Logits `[num_classes]`. Pass a [`DropPath`] to train with dropped
    /// residual branches.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: &Prepared,
        mut drop: Option<DropPath<'_>>,
    ) -> Result<Var<'t>> {
        let z = self.encode(p, x, &mut drop)?;
        self.classify(p, z)
    }

    /// Evaluation-mode logits for a raw cloud.
    pub fn predict(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Tensor> {
        let x = prepare(&self.cfg, cloud)?;
        let tape = crate::tensor::Tape::new();
        let p = store.bind_frozen(&tape);
        Ok(self.forward(&p, &x, None)?.value())
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + self.cfg.dim
            + self.pos0.num_params()
            + self
                .blocks
                .iter()
                .map(EncoderBlock::num_params)
                .sum::<usize>()
            + self.norm.num_params()
            + self.head.num_params()
    }
}
