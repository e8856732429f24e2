//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the timed training run has
//! the machine to itself.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use pointssm_cli::commands;
use pointssm_cli::RunConfig;
use pointssm_core::bissm::{Bissm, BissmOptions};
use pointssm_core::cofe::Cofe;
use pointssm_core::data::{
    decode_checkpoint, encode_checkpoint, generate_synthetic, load_checkpoint, parse_off,
    parse_off_bytes, save_checkpoint, Checkpoint,
};
use pointssm_core::geometry::{normalize_patch, Point3};
use pointssm_core::gradcheck::{random_tensor, suite};
use pointssm_core::lgp::{Lgp, LgpGeometry};
use pointssm_core::model::{count_params, prepare, Model, ModelConfig};
use pointssm_core::nn::ParamStore;
use pointssm_core::ssm::{
    lti_conv_apply, lti_conv_kernel, recurrent_scan, zoh_discretize, LtiSystem, ScanParams,
    SERIES_THRESHOLD,
};
use pointssm_core::{Error, PointCloud, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ssm_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (c, n, l) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=16),
            rng.gen_range(1..=64),
        );
        let sys = LtiSystem::random(&mut rng, c, n);
        let x = random_tensor(&mut rng, &[c, l], 1.0);
        let scan = recurrent_scan(&x, ScanParams::Fixed(&sys)).unwrap();
        let kernel = lti_conv_kernel(ScanParams::Fixed(&sys), l).unwrap();
        let conv = lti_conv_apply(&x, &kernel, &sys.d).unwrap();
        worst = worst.max(scan.max_abs_diff(&conv));
    }
    let t = start.elapsed();
    (
        worst <= 1e-10 && t < Duration::from_secs(10),
        format!("50 systems, max-abs {worst:.2e} (<= 1e-10), {t:.2?} (< 10 s)"),
    )
}

fn zoh_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for &a in &[-0.01, -0.05, -0.5, -1.0, -2.0, -7.3, -16.0, -50.0] {
        for i in 0..=400 {
            let dt = 10f64.powf(-10.0 + 11.0 * i as f64 / 400.0);
            let step = zoh_discretize(&[a], &[1.0], &[1.0], &[dt]);
            let (ea, eg) = common::exact::zoh_exact(a, dt);
            let rel = |got: f64, want: f64| ((got - want) / want).abs().min((got - want).abs());
            worst = worst
                .max(rel(step.a_bar[0], ea))
                .max(rel(step.b_bar[0], eg));
        }
    }
    let mut jump: f64 = 0.0;
    for &a in &[-0.5, -1.0, -3.0, -20.0] {
        let dt = SERIES_THRESHOLD / -a;
        let (lo, hi) = (dt.next_down(), dt.next_up());
        let below = zoh_discretize(&[a], &[1.0], &[1.0], &[lo]);
        let above = zoh_discretize(&[a], &[1.0], &[1.0], &[hi]);
        jump = jump
            .max((below.a_bar[0] - above.a_bar[0]).abs())
            .max((below.b_bar[0] / lo - above.b_bar[0] / hi).abs());
    }
    (
        worst <= 1e-12 && jump < 1e-9,
        format!("Δ in [1e-10, 10]: error {worst:.2e} (<= 1e-12); switch jump {jump:.2e} (< 1e-9)"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = suite(0, 5, None).unwrap();
    let t = start.elapsed();
    let failed: Vec<_> = report
        .iter()
        .filter(|m| !m.passed())
        .map(|m| m.module)
        .collect();
    let summary: Vec<String> = report
        .iter()
        .map(|m| format!("{} {:.1e}", m.module, m.worst))
        .collect();
    (
        failed.is_empty() && t < Duration::from_secs(120),
        format!(
            "5 seeds, {}; failed [{}], {t:.2?} (< 2 min)",
            summary.join(", "),
            failed.join(", ")
        ),
    )
}

fn eval_lgp(lgp: &Lgp, store: &ParamStore, tokens: &Tensor, geom: &LgpGeometry) -> Tensor {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    lgp.forward(&p, tape.constant(tokens.clone()), geom)
        .unwrap()
        .value()
}

fn random_centers(rng: &mut impl Rng, l: usize, spread: f64) -> Vec<Point3> {
    (0..l)
        .map(|_| [0; 3].map(|_| rng.gen_range(-spread..spread)))
        .collect()
}

fn lgp_instance(seed: u64, c: usize) -> (ParamStore, Lgp) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lgp = Lgp::new(&mut store, "lgp", c, &mut rng);
    common::perturb(&mut store, &mut rng, 0.3);
    (store, lgp)
}

fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut a, mut b, mut c, mut d_mean, mut d_ms) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for seed in 0..5 {
        let (store, lgp) = lgp_instance(seed, 4);
        let centers = random_centers(&mut rng, 16, 5.0);
        let tokens = random_tensor(&mut rng, &[17, 4], 1.0);
        let geom = LgpGeometry::from_centers(&centers, 8).unwrap();
        let base = eval_lgp(&lgp, &store, &tokens, &geom);
        let shift = [0; 3].map(|_| rng.gen_range(-10.0..10.0));
        let s = rng.gen_range(0.2..5.0);
        let moved: Vec<Point3> = centers
            .iter()
            .map(|p| [0, 1, 2].map(|k| s * p[k] + shift[k]))
            .collect();
        let out = eval_lgp(
            &lgp,
            &store,
            &tokens,
            &LgpGeometry::from_centers(&moved, 8).unwrap(),
        );
        a = a.max(out.max_abs_diff(&base));

        let k = geom.k;
        let (mut nb, mut w) = (geom.neighbors.clone(), geom.weights.to_vec());
        for i in 0..16 {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let (on, ow) = (nb[i * k..][..k].to_vec(), w[i * k..][..k].to_vec());
            for (q, &p) in perm.iter().enumerate() {
                nb[i * k + q] = on[p];
                w[i * k + q] = ow[p];
            }
        }
        let out = eval_lgp(&lgp, &store, &tokens, &LgpGeometry::new(nb, w, k).unwrap());
        b = b.max(out.max_abs_diff(&base));
    }

    let cfg = ModelConfig {
        depth: 2,
        dim: 16,
        num_groups: 8,
        group_size: 8,
        lgp_neighbors: 4,
        cofe_groups: 4,
        ssm_state: 4,
        drop_path_rate: 0.0,
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::init(&cfg).unwrap();
    common::perturb(&mut store, &mut rng, 0.05);
    let logits = |cloud: &PointCloud| {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        model
            .forward(&p, &prepare(&cfg, cloud).unwrap(), None)
            .unwrap()
            .value()
    };
    for seed in 0..4 {
        let cloud = generate_synthetic(seed as usize, 128, seed, true).unwrap();
        let mut pts = cloud.points.clone();
        pts.shuffle(&mut rng);
        let shuffled = PointCloud::new(pts, cloud.label).unwrap();
        c = c.max(logits(&cloud).max_abs_diff(&logits(&shuffled)));
    }

    for _ in 0..20 {
        let n = rng.gen_range(4..32);
        let pts: Vec<Point3> = (0..n)
            .map(|_| [0; 3].map(|_| rng.gen_range(-3.0..3.0)))
            .collect();
        let out = normalize_patch(&pts);
        for k in 0..3 {
            d_mean = d_mean.max((out.iter().map(|p| p[k]).sum::<f64>() / n as f64).abs());
        }
        let ms = out
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        d_ms = d_ms.max((ms - 1.0).abs());
    }
    (
        a < 1e-6 && b < 1e-12 && c < 1e-9 && d_mean <= 1e-9 && d_ms <= 1e-4,
        format!(
            "(a) {a:.1e} < 1e-6, (b) {b:.1e} < 1e-12, (c) {c:.1e} < 1e-9, (d) centroid {d_mean:.1e} <= 1e-9, mean-square {d_ms:.1e} <= 1e-4"
        ),
    )
}

fn parameter_deltas() -> Outcome {
    let r = count_params(&ModelConfig::full_size()).unwrap();
    (
        (25_000..=35_000).contains(&r.cofe_delta) && r.geo_delta == 0,
        format!(
            "depth 12, C=384, g=16: cofe delta {} in [25000, 35000], geometric delta {} == 0",
            r.cofe_delta, r.geo_delta
        ),
    )
}

fn reference_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut lgp_worst, mut cofe_worst, mut bissm_worst) = (0f64, 0f64, 0f64);
    for seed in 0..10 {
        let (c, l, k) = (
            rng.gen_range(2..=8),
            rng.gen_range(4..=16),
            rng.gen_range(2..=4),
        );
        let (store, lgp) = lgp_instance(seed, c);
        let geom = LgpGeometry::from_centers(&random_centers(&mut rng, l, 1.0), k).unwrap();
        let tokens = random_tensor(&mut rng, &[l + 1, c], 1.0);
        let got = eval_lgp(&lgp, &store, &tokens, &geom);
        let want = common::reference::lgp(
            &store,
            "lgp",
            tokens.data(),
            c,
            &geom.neighbors,
            geom.weights.data(),
            k,
        );
        lgp_worst = lgp_worst.max(max_diff(got.data(), &want));

        let g = rng.gen_range(1..=3);
        let (b, c, l) = (
            rng.gen_range(1..=3),
            g * rng.gen_range(1..=4),
            rng.gen_range(1..=9),
        );
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(seed + 100);
        let cofe = Cofe::new(&mut store, "cofe", c, g, &mut init).unwrap();
        common::perturb(&mut store, &mut init, 0.3);
        let x = random_tensor(&mut rng, &[b, c, l], 2.0);
        let tape = Tape::new();
        let got = cofe
            .forward(&store.bind_frozen(&tape), tape.constant(x.clone()))
            .unwrap()
            .value();
        let want = common::reference::cofe(&store, "cofe", x.data(), b, c, l, g);
        cofe_worst = cofe_worst.max(max_diff(got.data(), &want));

        let c = g * rng.gen_range(1..=3);
        let (n, l) = (rng.gen_range(1..=5), rng.gen_range(1..=10));
        let opts = BissmOptions {
            gated: seed % 2 == 0,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let block = Bissm::new(&mut store, "bissm", c, n, g, opts, &mut init).unwrap();
        common::perturb(&mut store, &mut init, 0.2);
        let x = random_tensor(&mut rng, &[c, l], 1.0);
        let tape = Tape::new();
        let got = block
            .forward(&store.bind_frozen(&tape), tape.constant(x.clone()))
            .unwrap()
            .value();
        let want = common::reference::bissm(&store, "bissm", x.data(), c, l, g, "rev");
        bissm_worst = bissm_worst.max(max_diff(got.data(), &want));
    }
    let worst = lgp_worst.max(cofe_worst).max(bissm_worst);
    (
        worst <= 1e-12,
        format!("10 instances each: lgp {lgp_worst:.1e}, cofe {cofe_worst:.1e}, bissm {bissm_worst:.1e} (<= 1e-12)"),
    )
}

fn desk_training() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let mut cfg = RunConfig::from_text(&fs::read_to_string(&path).unwrap()).unwrap();
    let defaults = ModelConfig::default();
    let toy = (
        defaults.depth,
        defaults.dim,
        defaults.num_groups,
        defaults.group_size,
    );
    let recipe = (
        cfg.model.depth,
        cfg.model.dim,
        cfg.model.num_groups,
        cfg.model.group_size,
    );
    let dir = tempfile::tempdir().unwrap();
    let mut sink = Vec::new();

    cfg.out_dir = dir.path().join("a");
    let start = Instant::now();
    let report = commands::train(&cfg, &mut sink).unwrap();
    let t = start.elapsed();
    cfg.out_dir = dir.path().join("b");
    let rerun = commands::train(&cfg, &mut sink).unwrap();
    let same = fs::read(&report.metrics_path).unwrap() == fs::read(&rerun.metrics_path).unwrap();

    let last = report.metrics.last().unwrap();
    let epochs = report.metrics.len();
    (
        recipe == toy && recipe == (4, 64, 32, 16) && last.test_acc >= 0.9 && epochs <= 50 && t < Duration::from_secs(1800) && same,
        format!(
            "test OA {:.4} (>= 0.90) after {epochs} epochs (<= 50), {t:.0?} (< 30 min), rerun identical: {same}",
            last.test_acc
        ),
    )
}

const SPLIT: &str = "OFF\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";
const FUSED: &str = "OFF4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";
const QUADS: &str =
    "OFF\n# unit cube\n8 6 12\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 1 2 6 5\n4 2 3 7 6\n4 3 0 4 7\n";

fn mutate(rng: &mut impl Rng, base: &[u8]) -> Vec<u8> {
    const TOKENS: [&[u8]; 10] = [
        b"OFF",
        b"-1",
        b"99999999999999999999",
        b"nan",
        b"inf",
        b"\n",
        b"#",
        b" ",
        b"1e308",
        b"4",
    ];
    let mut out = base.to_vec();
    for _ in 0..rng.gen_range(1..6) {
        let at = rng.gen_range(0..=out.len());
        match rng.gen_range(0..5) {
            0 if !out.is_empty() => {
                let i = rng.gen_range(0..out.len());
                out[i] = rng.gen();
            }
            1 if at < out.len() => {
                let end = rng.gen_range(at..=out.len());
                out.drain(at..end);
            }
            2 => {
                let t = TOKENS[rng.gen_range(0..TOKENS.len())];
                out.splice(at..at, t.iter().copied());
            }
            3 if !out.is_empty() => {
                let i = rng.gen_range(0..out.len());
                let j = rng.gen_range(i..out.len());
                let chunk = out[i..=j].to_vec();
                out.splice(at..at, chunk);
            }
            _ => out.truncate(at),
        }
    }
    out
}

fn parser_robustness() -> Outcome {
    let golden = [(SPLIT, 4, 4), (FUSED, 4, 4), (QUADS, 8, 12)];
    let golden_ok = golden.iter().all(|&(text, v, f)| {
        parse_off(text).is_ok_and(|m| m.vertices.len() == v && m.faces.len() == f)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bases = [SPLIT.as_bytes(), FUSED.as_bytes(), QUADS.as_bytes()];
    let (mut crashes, mut invalid, mut parsed) = (0, 0, 0);
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..10_000 {
        let bytes = mutate(&mut rng, bases[i % bases.len()]);
        match catch_unwind(|| parse_off_bytes(&bytes)) {
            Err(_) => crashes += 1,
            Ok(Ok(m)) => {
                parsed += 1;
                if !m.faces.iter().flatten().all(|&v| v < m.vertices.len()) {
                    invalid += 1;
                }
            }
            Ok(Err(_)) => {}
        }
    }
    std::panic::set_hook(hook);
    (
        golden_ok && crashes == 0 && invalid == 0,
        format!(
            "golden split/fused/quad V,F ok: {golden_ok}; 10000 mutations: {crashes} crashes, {parsed} parsed, {invalid} out-of-range faces"
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identical = 0;
    let mut rejected = 0;
    let mut cases = 0;
    for i in 0..20 {
        let g = rng.gen_range(1..=4);
        let cfg = ModelConfig {
            depth: rng.gen_range(1..=3),
            dim: g * rng.gen_range(2..=6),
            num_groups: rng.gen_range(4..=12),
            group_size: rng.gen_range(4..=10),
            lgp_neighbors: rng.gen_range(1..=4),
            cofe_groups: g,
            ssm_state: rng.gen_range(1..=8),
            num_classes: rng.gen_range(2..=10),
            use_cofe: rng.gen(),
            head_pool: rng.gen(),
            seed: rng.gen(),
            ..ModelConfig::default()
        };
        let (_, store) = Model::init(&cfg).unwrap();
        let ckpt = Checkpoint::from_store(cfg.to_text(), &store);
        let path = dir.path().join(format!("m{i}.hemb"));
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let same = back.config == ckpt.config
            && back.tensors.len() == ckpt.tensors.len()
            && back
                .tensors
                .iter()
                .zip(&ckpt.tensors)
                .all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1));
        let bytes = fs::read(&path).unwrap();
        if same && encode_checkpoint(&back).unwrap() == bytes {
            identical += 1;
        }

        let mut bad = bytes.clone();
        bad[rng.gen_range(0..4)] ^= 1 << rng.gen_range(0..8);
        let mut attempts = vec![bad];
        for _ in 0..5 {
            attempts.push(bytes[..rng.gen_range(0..bytes.len())].to_vec());
        }
        for a in attempts {
            cases += 1;
            if matches!(decode_checkpoint(&a), Err(Error::Format(_))) {
                rejected += 1;
            }
        }
    }
    (
        identical == 20 && rejected == cases,
        format!("{identical}/20 models bitwise identical; {rejected}/{cases} corrupted-magic and truncated files rejected"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("SSM oracle equivalence", ssm_oracle),
        ("ZOH correctness", zoh_correctness),
        ("gradient suite", gradient_suite),
        ("invariance suite", invariances),
        ("parameter-delta reproduction", parameter_deltas),
        ("straight-line reference equivalence", reference_equivalence),
        ("desk-scale training", desk_training),
        ("parser robustness", parser_robustness),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            (
                false,
                format!(
                    "panicked: {:?}",
                    e.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                ),
            )
        });
        failures += usize::from(!pass);
        println!(
            "{} {id} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
