//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward passes on fresh tapes, so it
//! is independent of every backward rule it audits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Fault, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per leaf; leaves at or below this size are probed
    /// exhaustively.
    pub max_coords: usize,
    /// Random directional derivatives per leaf, on top of the coordinates.
    pub directions: usize,
    /// Gradient norms below this floor are compared absolutely.
    pub floor: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 8,
            directions: 1,
            floor: 1e-6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeafError {
    pub name: String,
    pub rel_err: f64,
    pub probes: usize,
}

/// Worst relative error over a set of leaves.
pub fn worst(report: &[LeafError]) -> f64 {
    report.iter().map(|l| l.rel_err).fold(0.0, f64::max)
}

/// Compares the tape gradient of the scalar `loss` with central differences,
/// leaf by leaf. `loss` receives the leaves in the order given.
pub fn check<F>(
    leaves: &[(String, Tensor)],
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<Vec<LeafError>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = match cfg.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let vars: Vec<Var<'_>> = leaves.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = loss(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(v, (_, t))| {
            v.grad()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |which: usize, perturbed: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = leaves
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                tape.constant(if i == which {
                    perturbed.clone()
                } else {
                    t.clone()
                })
            })
            .collect();
        Ok(loss(&tape, &vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(leaves.len());
    for (li, (name, value)) in leaves.iter().enumerate() {
        let n = value.numel();
        let mut directions: Vec<Vec<f64>> = if n <= cfg.max_coords {
            (0..n).map(|i| unit(n, i)).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords)
                .into_iter()
                .map(|i| unit(n, i))
                .collect()
        };
        for _ in 0..cfg.directions {
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            directions.push(d.into_iter().map(|x| x / norm).collect());
        }
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for dir in &directions {
            let shifted = |sign: f64| {
                Tensor::from_fn(value.shape().to_vec(), |i| {
                    value.data()[i] + sign * cfg.step * dir[i]
                })
            };
            let numeric = (eval(li, shifted(1.0))? - eval(li, shifted(-1.0))?) / (2.0 * cfg.step);
            let exact: f64 = analytic[li]
                .data()
                .iter()
                .zip(dir)
                .map(|(g, d)| g * d)
                .sum();
            diff2 += (numeric - exact).powi(2);
            a2 += exact * exact;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(cfg.floor);
        report.push(LeafError {
            name: name.clone(),
            rel_err: diff2.sqrt() / scale,
            probes: directions.len(),
        });
    }
    Ok(report)
}

/// [`check`] over every parameter of `store` followed by extra `inputs`.
/// `loss` receives the parameters bound in store order and the inputs.
pub fn check_params<F>(
    store: &ParamStore,
    inputs: &[(String, Tensor)],
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<Vec<LeafError>>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = store.len();
    let leaves: Vec<(String, Tensor)> = store
        .iter()
        .map(|(k, t)| (k.to_string(), t.clone()))
        .chain(inputs.iter().cloned())
        .collect();
    check(
        &leaves,
        |tape, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            loss(tape, &bound, &v[n..])
        },
        cfg,
    )
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Random tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Worst error of one module across the seeds of a [`suite`] run.
#[derive(Debug, Clone)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub worst: f64,
    pub threshold: f64,
    /// Leaf with the worst error.
    pub leaf: String,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

pub const MODULE_THRESHOLD: f64 = 1e-4;
pub const END_TO_END_THRESHOLD: f64 = 1e-3;
pub const SUITE_MODULES: [&str; 6] = ["tensor", "ssm", "lgp", "cofe", "bissm", "model"];

fn shift_params(store: &mut ParamStore, rng: &mut impl Rng, amp: f64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let noisy = Tensor::from_fn(t.shape().to_vec(), |i| {
            t.data()[i] + rng.gen_range(-amp..amp)
        });
        store.set(id, noisy)?;
    }
    Ok(())
}

/// Weighted sum of `out` with fixed random cotangents.
fn weighted<'t>(out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(out.mul(out.tape().constant(w.clone()))?.sum_all()?)
}

fn module_seed(
    module: &'static str,
    seed: u64,
    base: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LeafError>> {
    use crate::bissm::{Bissm, BissmOptions};
    use crate::cofe::Cofe;
    use crate::lgp::{Lgp, LgpGeometry};
    use crate::model::{prepare, Model, ModelConfig};
    use crate::ssm::SelectiveSsm;

    let cfg = GradCheckConfig { seed, ..*base };
    let mut store = ParamStore::new();
    match module {
        "tensor" => {
            let leaves = vec![
                ("a".to_string(), random_tensor(rng, &[3, 4], 1.0)),
                ("b".to_string(), random_tensor(rng, &[4, 5], 1.0)),
            ];
            let w = random_tensor(rng, &[3, 5], 1.0);
            check(
                &leaves,
                |_, v| {
                    let h = v[0].matmul(v[1])?;
                    let mixed = h.sigmoid()?.add(h.softplus()?)?.mul(h.silu()?)?;
                    let stats = h
                        .log_softmax(1)?
                        .add(h.variance(1, true)?)?
                        .add(h.max(0, true)?)?;
                    weighted(mixed.add(stats)?.add(h.exp()?.scale(0.1)?)?, &w)
                },
                &cfg,
            )
        }
        "ssm" => {
            let (c, n, l) = (3, 4, 9);
            let layer = SelectiveSsm::new(&mut store, "ssm", c, n, true, rng);
            shift_params(&mut store, rng, 0.2)?;
            let x = random_tensor(rng, &[c, l], 1.0);
            let w = random_tensor(rng, &[c, l], 1.0);
            check_params(
                &store,
                &[("x".into(), x)],
                |_, p, v| weighted(layer.forward(p, v[0])?, &w),
                &cfg,
            )
        }
        "lgp" => {
            let (l, k, c) = (8, 4, 4);
            let lgp = Lgp::new(&mut store, "lgp", c, rng);
            shift_params(&mut store, rng, 0.2)?;
            let centers: Vec<crate::geometry::Point3> = (0..l)
                .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            let geom = LgpGeometry::from_centers(&centers, k)?;
            let x = random_tensor(rng, &[l + 1, c], 1.0);
            let w = random_tensor(rng, &[l + 1, c], 1.0);
            check_params(
                &store,
                &[("tokens".into(), x)],
                |_, p, v| weighted(lgp.forward(p, v[0], &geom)?, &w),
                &cfg,
            )
        }
        "cofe" => {
            let cofe = Cofe::new(&mut store, "cofe", 6, 2, rng)?;
            shift_params(&mut store, rng, 0.2)?;
            let x = random_tensor(rng, &[6, 5], 1.0);
            let w = random_tensor(rng, &[6, 5], 1.0);
            check_params(
                &store,
                &[("x".into(), x)],
                |_, p, v| weighted(cofe.forward(p, v[0])?, &w),
                &cfg,
            )
        }
        "bissm" => {
            let block = Bissm::new(&mut store, "bissm", 4, 3, 2, BissmOptions::default(), rng)?;
            shift_params(&mut store, rng, 0.2)?;
            let x = random_tensor(rng, &[4, 6], 1.0);
            let w = random_tensor(rng, &[4, 6], 1.0);
            check_params(
                &store,
                &[("x".into(), x)],
                |_, p, v| weighted(block.forward(p, v[0])?, &w),
                &cfg,
            )
        }
        "model" => {
            let mcfg = ModelConfig {
                seed,
                ..ModelConfig::toy()
            };
            let model = Model::new(&mut store, &mcfg, rng)?;
            shift_params(&mut store, rng, 0.05)?;
            let class = rng.gen_range(0..mcfg.num_classes);
            let cloud = crate::data::generate_synthetic(class, 64, seed, true)?;
            let x = prepare(&mcfg, &cloud)?;
            check_params(
                &store,
                &[],
                |_, p, _| crate::train::cross_entropy(model.forward(p, &x, None)?, class),
                &cfg,
            )
        }
        other => Err(crate::Error::InvalidInput(format!(
            "unknown gradcheck module `{other}`"
        ))),
    }
}

/// Finite-difference checks of every differentiable module and of the
/// end-to-end toy model, each over `seeds` consecutive seeds from `seed`.
pub fn suite(seed: u64, seeds: u64, fault: Option<Fault>) -> Result<Vec<ModuleCheck>> {
    let base = GradCheckConfig {
        fault,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(SUITE_MODULES.len());
    for module in SUITE_MODULES {
        let threshold = if module == "model" {
            END_TO_END_THRESHOLD
        } else {
            MODULE_THRESHOLD
        };
        let mut entry = ModuleCheck {
            module,
            worst: 0.0,
            threshold,
            leaf: String::new(),
        };
        for s in seed..seed + seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            for leaf in module_seed(module, s, &base, &mut rng)? {
                // NaN counts as a failure
                if !(leaf.rel_err <= entry.worst) {
                    entry.worst = if leaf.rel_err.is_nan() {
                        f64::INFINITY
                    } else {
                        leaf.rel_err
                    };
                    entry.leaf = format!("{} (seed {s})", leaf.name);
                }
            }
        }
        out.push(entry);
    }
    Ok(out)
}
