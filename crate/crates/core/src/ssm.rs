//! Diagonal state space models: zero-order-hold discretization, the
//! recurrent scan (fixed or input-selective parameters), the convolution
//! form of a time-invariant system, and a fused differentiable selective
//! scan for the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{CustomBackward, Tape, Tensor, Var};

/// Below this `|ΔA|` the input gain uses its series expansion.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Zero-order hold for one diagonal entry: returns `(Ā, g)` with
/// `Ā = exp(ΔA)` and `g = (exp(ΔA) − 1)/A`, so that `B̄ = g·B`.
#[inline]
pub fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    if z.abs() < SERIES_THRESHOLD {
        (z.exp(), delta * (1.0 + 0.5 * z))
    } else if z > -1.0 {
        // Ā ≥ e⁻¹ here, so 1 + (e^z − 1) keeps full relative precision.
        let em1 = z.exp_m1();
        (1.0 + em1, em1 / a)
    } else {
        (z.exp(), z.exp_m1() / a)
    }
}

/// Partial derivatives of the input gain `g(A, Δ)` from [`zoh`]:
/// `(∂g/∂Δ, ∂g/∂A)`.
#[inline]
fn zoh_gain_partials(a: f64, delta: f64, a_bar: f64, gain: f64) -> (f64, f64) {
    let z = delta * a;
    if z.abs() < SERIES_THRESHOLD {
        return (1.0 + z, 0.5 * delta * delta);
    }
    // ∂g/∂A = Δ² (z e^z − (e^z − 1)) / z²
    let h = if z.abs() < 1e-3 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (z * a_bar - gain * a) / (z * z)
    };
    (a_bar, delta * delta * h)
}

/// Discretized parameters of one time step, row-major `C × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

/// Discretizes `A` (`C × N`, negative) with per-channel steps `Δ` and a
/// shared input vector `B` (length `N`).
pub fn zoh_discretize(a: &[f64], b: &[f64], c: &[f64], delta: &[f64]) -> DiscreteStep {
    let n = b.len();
    assert_eq!(a.len(), delta.len() * n);
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (ch, &dt) in delta.iter().enumerate() {
        for s in 0..n {
            let (ab, g) = zoh(a[ch * n + s], dt);
            a_bar.push(ab);
            b_bar.push(g * b[s]);
        }
    }
    DiscreteStep {
        a_bar,
        b_bar,
        c: c.to_vec(),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Input-selective parameters. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub channels: usize,
    pub state: usize,
    /// `C × N`, strictly negative.
    pub a: Vec<f64>,
    /// `N × C`.
    pub w_b: Vec<f64>,
    /// `N × C`.
    pub w_c: Vec<f64>,
    /// `C × C`.
    pub w_delta: Vec<f64>,
    pub delta_bias: Vec<f64>,
    pub d: Vec<f64>,
}

/// `(B_k, C_k, Δ_k)` for one input column.
pub fn generate_selective_params(x: &[f64], p: &SsmParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, n) = (p.channels, p.state);
    assert_eq!(x.len(), c);
    let dot = |row: &[f64]| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    let b = (0..n).map(|s| dot(&p.w_b[s * c..][..c])).collect();
    let cc = (0..n).map(|s| dot(&p.w_c[s * c..][..c])).collect();
    let delta = (0..c)
        .map(|i| softplus(dot(&p.w_delta[i * c..][..c]) + p.delta_bias[i]))
        .collect();
    (b, cc, delta)
}

/// A time-invariant diagonal system: every channel is a single-input
/// single-output system with its own `N` states. Matrices are `C × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub channels: usize,
    pub state: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: Vec<f64>,
    pub d: Vec<f64>,
}

impl LtiSystem {
    /// `(Ā, B̄)`, each `C × N`.
    pub fn discretize(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.state;
        let mut a_bar = Vec::with_capacity(self.a.len());
        let mut b_bar = Vec::with_capacity(self.a.len());
        for i in 0..self.a.len() {
            let (ab, g) = zoh(self.a[i], self.delta[i / n]);
            a_bar.push(ab);
            b_bar.push(g * self.b[i]);
        }
        (a_bar, b_bar)
    }

    /// Random stable system with `A ∈ [-2, -0.05]` and `Δ ∈ [0.01, 1]`.
    pub fn random(rng: &mut impl Rng, channels: usize, state: usize) -> Self {
        let m = channels * state;
        Self {
            channels,
            state,
            a: (0..m).map(|_| -rng.gen_range(0.05..2.0)).collect(),
            b: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            delta: (0..channels).map(|_| rng.gen_range(0.01..1.0)).collect(),
            d: (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ScanParams<'a> {
    Fixed(&'a LtiSystem),
    Selective(&'a SsmParams),
}

fn check_input(x: &Tensor, channels: usize) -> Result<usize> {
    match x.shape() {
        &[c, l] if c == channels => Ok(l),
        s => Err(Error::InvalidInput(format!(
            "scan input must be [{channels}, L], got {s:?}"
        ))),
    }
}

/// Sequential scan from `h₀ = 0` over `x` (`C × L`).
pub fn recurrent_scan(x: &Tensor, params: ScanParams<'_>) -> Result<Tensor> {
    match params {
        ScanParams::Fixed(sys) => {
            let len = check_input(x, sys.channels)?;
            let n = sys.state;
            let (a_bar, b_bar) = sys.discretize();
            let mut y = vec![0.0; sys.channels * len];
            for ch in 0..sys.channels {
                let mut h = vec![0.0; n];
                for k in 0..len {
                    let xk = x.data()[ch * len + k];
                    let mut acc = sys.d[ch] * xk;
                    for s in 0..n {
                        let i = ch * n + s;
                        h[s] = a_bar[i] * h[s] + b_bar[i] * xk;
                        acc += sys.c[i] * h[s];
                    }
                    y[ch * len + k] = acc;
                }
            }
            Ok(Tensor::new([sys.channels, len], y)?)
        }
        ScanParams::Selective(p) => {
            let len = check_input(x, p.channels)?;
            let (c, n) = (p.channels, p.state);
            let mut b = vec![0.0; n * len];
            let mut cm = vec![0.0; n * len];
            let mut delta = vec![0.0; c * len];
            let mut col = vec![0.0; c];
            for k in 0..len {
                for ch in 0..c {
                    col[ch] = x.data()[ch * len + k];
                }
                let (bk, ck, dk) = generate_selective_params(&col, p);
                for s in 0..n {
                    b[s * len + k] = bk[s];
                    cm[s * len + k] = ck[s];
                }
                for ch in 0..c {
                    delta[ch * len + k] = dk[ch];
                }
            }
            let dims = ScanDims { c, n, len };
            let (y, _) = selective_scan_forward(dims, x.data(), &delta, &p.a, &b, &cm, &p.d, false);
            Ok(Tensor::new([c, len], y)?)
        }
    }
}

/// Convolution kernel `K̄_j = Σ_n C Ā^j B̄` of a fixed system, `C × len`.
pub fn lti_conv_kernel(params: ScanParams<'_>, len: usize) -> Result<Tensor> {
    let sys = match params {
        ScanParams::Fixed(sys) => sys,
        ScanParams::Selective(_) => {
            return Err(Error::InvalidInput(
                "a convolution kernel exists only for time-invariant parameters".into(),
            ))
        }
    };
    if len == 0 {
        return Err(Error::InvalidInput("kernel length must be positive".into()));
    }
    let n = sys.state;
    let (a_bar, b_bar) = sys.discretize();
    let mut k = vec![0.0; sys.channels * len];
    for ch in 0..sys.channels {
        for s in 0..n {
            let i = ch * n + s;
            let mut pow = 1.0;
            for j in 0..len {
                k[ch * len + j] += sys.c[i] * pow * b_bar[i];
                pow *= a_bar[i];
            }
        }
    }
    Ok(Tensor::new([sys.channels, len], k)?)
}

/// Causal convolution `y_k = Σ_{j≤k} K̄_{k−j} x_j + D x_k`.
pub fn lti_conv_apply(x: &Tensor, kernel: &Tensor, d: &[f64]) -> Result<Tensor> {
    if x.shape() != kernel.shape() || x.rank() != 2 || d.len() != x.shape()[0] {
        return Err(Error::InvalidInput(format!(
            "kernel {:?} and feedthrough of length {} do not match sequence {:?}",
            kernel.shape(),
            d.len(),
            x.shape()
        )));
    }
    let (c, len) = (x.shape()[0], x.shape()[1]);
    let (xd, kd) = (x.data(), kernel.data());
    let mut y = vec![0.0; c * len];
    for ch in 0..c {
        let xr = &xd[ch * len..][..len];
        let kr = &kd[ch * len..][..len];
        for k in 0..len {
            let mut acc = d[ch] * xr[k];
            for j in 0..=k {
                acc += kr[k - j] * xr[j];
            }
            y[ch * len + k] = acc;
        }
    }
    Ok(Tensor::new([c, len], y)?)
}

#[derive(Debug, Clone, Copy)]
struct ScanDims {
    c: usize,
    n: usize,
    len: usize,
}

/// Selective recurrence over precomputed per-step parameters. Layouts:
/// `x, delta: C×L`, `a: C×N`, `b, cm: N×L`, `d: C`. Optionally returns the
/// state history `C×N×L`.
#[allow(clippy::too_many_arguments)]
fn selective_scan_forward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    cm: &[f64],
    d: &[f64],
    keep_states: bool,
) -> (Vec<f64>, ScanCache) {
    let ScanDims { c, n, len } = dims;
    let mut y = vec![0.0; c * len];
    let size = if keep_states { c * n * len } else { 0 };
    let mut cache = ScanCache {
        states: vec![0.0; size],
        a_bar: vec![0.0; size],
        gain: vec![0.0; size],
    };
    let mut h = vec![0.0; n];
    for ch in 0..c {
        h.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..len {
            let xk = x[ch * len + k];
            let dt = delta[ch * len + k];
            let mut acc = d[ch] * xk;
            for s in 0..n {
                let (ab, g) = zoh(a[ch * n + s], dt);
                h[s] = ab * h[s] + g * b[s * len + k] * xk;
                acc += cm[s * len + k] * h[s];
                if keep_states {
                    let at = (ch * n + s) * len + k;
                    cache.states[at] = h[s];
                    cache.a_bar[at] = ab;
                    cache.gain[at] = g;
                }
            }
            y[ch * len + k] = acc;
        }
    }
    (y, cache)
}

/// Forward quantities reused by the backward pass, each `C×N×L`.
#[derive(Debug)]
struct ScanCache {
    states: Vec<f64>,
    a_bar: Vec<f64>,
    gain: Vec<f64>,
}

#[derive(Debug)]
struct SelectiveScanRule {
    dims: ScanDims,
    cache: ScanCache,
}

impl CustomBackward for SelectiveScanRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Vec<f64>> {
        let ScanDims { c, n, len } = self.dims;
        let [x, delta, a, b, cm, d] = [0, 1, 2, 3, 4, 5].map(|i| inputs[i].data());
        let mut gx = vec![0.0; c * len];
        let mut gdelta = vec![0.0; c * len];
        let mut ga = vec![0.0; c * n];
        let mut gb = vec![0.0; n * len];
        let mut gc = vec![0.0; n * len];
        let mut gd = vec![0.0; c];
        let mut gh = vec![0.0; n];
        for ch in 0..c {
            gh.iter_mut().for_each(|v| *v = 0.0);
            for k in (0..len).rev() {
                let i = ch * len + k;
                let (xk, dt, g_out) = (x[i], delta[i], gy[i]);
                gd[ch] += g_out * xk;
                gx[i] += g_out * d[ch];
                for s in 0..n {
                    let base = (ch * n + s) * len;
                    let hk = self.cache.states[base + k];
                    let hprev = if k > 0 {
                        self.cache.states[base + k - 1]
                    } else {
                        0.0
                    };
                    let av = a[ch * n + s];
                    let (ab, gain) = (self.cache.a_bar[base + k], self.cache.gain[base + k]);
                    let (dg_ddt, dg_da) = zoh_gain_partials(av, dt, ab, gain);
                    let bj = b[s * len + k];
                    let dh = gh[s] + g_out * cm[s * len + k];
                    gc[s * len + k] += g_out * hk;
                    let d_ab = dh * hprev;
                    let d_gain = dh * bj * xk;
                    gx[i] += dh * gain * bj;
                    gb[s * len + k] += dh * gain * xk;
                    gdelta[i] += d_ab * av * ab + d_gain * dg_ddt;
                    ga[ch * n + s] += d_ab * dt * ab + d_gain * dg_da;
                    gh[s] = dh * ab;
                }
            }
        }
        vec![gx, gdelta, ga, gb, gc, gd]
    }
}

/// Differentiable selective scan. Shapes: `x, delta: [C, L]`, `a: [C, N]`,
/// `b, c: [N, L]`, `d: [C]` (or `[C, 1]`). Returns `[C, L]`.
pub fn selective_scan<'t>(
    x: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let (xs, as_, bs) = (x.shape(), a.shape(), b.shape());
    let ok = xs.len() == 2
        && as_.len() == 2
        && delta.shape() == xs
        && as_[0] == xs[0]
        && bs == [as_[1], xs[1]]
        && c.shape() == bs
        && d.value().numel() == xs[0];
    if !ok {
        return Err(Error::InvalidInput(format!(
            "selective scan shapes x {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
            xs,
            delta.shape(),
            as_,
            bs,
            c.shape(),
            d.shape()
        )));
    }
    let dims = ScanDims {
        c: xs[0],
        n: as_[1],
        len: xs[1],
    };
    let (xv, dv, av, bv, cv, ddv) = (
        x.value(),
        delta.value(),
        a.value(),
        b.value(),
        c.value(),
        d.value(),
    );
    let (y, cache) = selective_scan_forward(
        dims,
        xv.data(),
        dv.data(),
        av.data(),
        bv.data(),
        cv.data(),
        ddv.data(),
        true,
    );
    let out = Tensor::new(xs.to_vec(), y)?;
    Ok(x.tape().custom(
        &[x, delta, a, b, c, d],
        out,
        Box::new(SelectiveScanRule { dims, cache }),
    )?)
}

/// Trainable selective SSM on channel-major sequences `[C, L]`, with an
/// optional SiLU gate branch.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveSsm {
    pub channels: usize,
    pub state: usize,
    /// `A = −exp(a_log)`, `[C, N]`.
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub d: ParamId,
    pub gate: Option<(ParamId, ParamId)>,
}

impl SelectiveSsm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state: usize,
        gated: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let a_log = Tensor::from_fn([channels, state], |i| ((i % state) as f64 + 1.0).ln());
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let delta_bias = Tensor::from_fn([channels, 1], |_| {
            inverse_softplus(rng.gen_range(lo..hi).exp())
        });
        let w_b = uniform(rng, &[state, channels], bound);
        let w_c = uniform(rng, &[state, channels], bound);
        let w_delta = uniform(rng, &[channels, channels], bound);
        let gate = gated.then(|| {
            (
                store.add(
                    format!("{name}.gate.weight"),
                    uniform(rng, &[channels, channels], bound),
                ),
                store.add(format!("{name}.gate.bias"), Tensor::zeros([channels, 1])),
            )
        });
        Self {
            channels,
            state,
            a_log: store.add(format!("{name}.a_log"), a_log),
            w_b: store.add(format!("{name}.w_b"), w_b),
            w_c: store.add(format!("{name}.w_c"), w_c),
            w_delta: store.add(format!("{name}.w_delta"), w_delta),
            delta_bias: store.add(format!("{name}.delta_bias"), delta_bias),
            d: store.add(format!("{name}.d"), Tensor::ones([channels, 1])),
            gate,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let a = p[self.a_log].exp()?.neg()?;
        let b = p[self.w_b].matmul(x)?;
        let c = p[self.w_c].matmul(x)?;
        let delta = p[self.w_delta]
            .matmul(x)?
            .add(p[self.delta_bias])?
            .softplus()?;
        let y = selective_scan(x, delta, a, b, c, p[self.d])?;
        match self.gate {
            Some((w, bias)) => Ok(p[w].matmul(x)?.add(p[bias])?.silu()?.mul(y)?),
            None => Ok(y),
        }
    }

    /// Plain parameters of the ungated scan, read from `store`.
    pub fn params(&self, store: &ParamStore) -> SsmParams {
        SsmParams {
            channels: self.channels,
            state: self.state,
            a: store
                .get(self.a_log)
                .data()
                .iter()
                .map(|v| -v.exp())
                .collect(),
            w_b: store.get(self.w_b).to_vec(),
            w_c: store.get(self.w_c).to_vec(),
            w_delta: store.get(self.w_delta).to_vec(),
            delta_bias: store.get(self.delta_bias).to_vec(),
            d: store.get(self.d).to_vec(),
        }
    }

    pub fn num_params(&self) -> usize {
        let (c, n) = (self.channels, self.state);
        3 * c * n + c * c + 2 * c + if self.gate.is_some() { c * c + c } else { 0 }
    }
}

/// Runs a [`SelectiveSsm`] forward without recording gradients.
pub fn eval_ssm(ssm: &SelectiveSsm, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    Ok(ssm.forward(&p, tape.constant(x.clone()))?.value())
}
