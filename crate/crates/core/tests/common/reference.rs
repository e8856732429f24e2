//! Scalar-loop transcriptions of the blocks, reading parameters by name.
//! Nothing here touches the tape.

use pointssm_core::nn::ParamStore;

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .data()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Local geometric pooling on `tokens` (`(L+1) × C`, row-major).
pub fn lgp(
    store: &ParamStore,
    name: &str,
    tokens: &[f64],
    c: usize,
    nb: &[usize],
    w: &[f64],
    k: usize,
) -> Vec<f64> {
    let l = tokens.len() / c - 1;
    let gamma = param(store, &format!("{name}.gamma"));
    let beta = param(store, &format!("{name}.beta"));
    let w1 = param(store, &format!("{name}.mlp_in.weight"));
    let b1 = param(store, &format!("{name}.mlp_in.bias"));
    let w2 = param(store, &format!("{name}.mlp_out.weight"));
    let b2 = param(store, &format!("{name}.mlp_out.bias"));
    let feat = |row: usize, ch: usize| tokens[(row + 1) * c + ch];
    let mut out = vec![0.0; (l + 1) * c];
    for i in 0..l {
        let mut agg = vec![0.0; 2 * c];
        for j in 0..2 * c {
            let mut vals = vec![0.0; k];
            if j < c {
                let delta: Vec<f64> = (0..k)
                    .map(|q| feat(nb[i * k + q], j) - feat(i, j))
                    .collect();
                let mean = delta.iter().sum::<f64>() / k as f64;
                let var = delta.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / k as f64;
                for q in 0..k {
                    vals[q] = delta[q] / (var + 1e-5).sqrt();
                }
            } else {
                for q in 0..k {
                    vals[q] = feat(i, j - c);
                }
            }
            for q in 0..k {
                vals[q] = (vals[q] * gamma[j] + beta[j]) * w[i * k + q];
            }
            let sm = softmax(&vals);
            agg[j] = (0..k).map(|q| vals[q] * sm[q]).sum();
        }
        let mut hidden = vec![0.0; c];
        for o in 0..c {
            let mut s = b1[o];
            for j in 0..2 * c {
                s += agg[j] * w1[j * c + o];
            }
            hidden[o] = s.max(0.0);
        }
        for o in 0..c {
            let mut s = b2[o];
            for j in 0..c {
                s += hidden[j] * w2[j * c + o];
            }
            out[(i + 1) * c + o] = s;
        }
    }
    out
}

/// Feature enhancer on `x` (`B × C × L`).
pub fn cofe(
    store: &ParamStore,
    name: &str,
    x: &[f64],
    b: usize,
    ch: usize,
    l: usize,
    g: usize,
) -> Vec<f64> {
    let c = ch / g;
    let wg = param(store, &format!("{name}.gate.weight"));
    let bg = param(store, &format!("{name}.gate.bias"));
    let gn_g = param(store, &format!("{name}.norm.gamma"));
    let gn_b = param(store, &format!("{name}.norm.beta"));
    let wc = param(store, &format!("{name}.conv.weight"));
    let bc = param(store, &format!("{name}.conv.bias"));
    let mut out = vec![0.0; b * ch * l];
    for bi in 0..b {
        for q in 0..g {
            let xg = |i: usize, t: usize| x[(bi * ch + q * c + i) * l + t];
            // gated normalization path
            let pooled: Vec<f64> = (0..c)
                .map(|j| (0..l).map(|t| xg(j, t)).sum::<f64>() / l as f64)
                .collect();
            let gate: Vec<f64> = (0..c)
                .map(|i| sigmoid(bg[i] + (0..c).map(|j| wg[i * c + j] * pooled[j]).sum::<f64>()))
                .collect();
            let mut y = vec![0.0; c * l];
            for i in 0..c {
                for t in 0..l {
                    y[i * l + t] = xg(i, t) * gate[i];
                }
            }
            let mean = y.iter().sum::<f64>() / (c * l) as f64;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (c * l) as f64;
            let mut x1 = vec![0.0; c * l];
            for i in 0..c {
                for t in 0..l {
                    x1[i * l + t] = (y[i * l + t] - mean) / (var + 1e-5).sqrt() * gn_g[i] + gn_b[i];
                }
            }
            // convolution path
            let mut x2 = vec![0.0; c * l];
            for i in 0..c {
                for t in 0..l {
                    let mut s = bc[i];
                    for j in 0..c {
                        for tap in 0..3 {
                            let pos = t as isize + tap as isize - 1;
                            if pos >= 0 && (pos as usize) < l {
                                s += wc[(i * c + j) * 3 + tap] * xg(j, pos as usize);
                            }
                        }
                    }
                    x2[i * l + t] = s;
                }
            }
            let m1: Vec<f64> = (0..l)
                .map(|t| (0..c).map(|i| x1[i * l + t]).sum::<f64>() / c as f64)
                .collect();
            let m2: Vec<f64> = (0..l)
                .map(|t| (0..c).map(|i| x2[i * l + t]).sum::<f64>() / c as f64)
                .collect();
            let phi1 = softmax(&m1);
            let phi2 = softmax(&m2);
            for t in 0..l {
                let w = sigmoid(phi1[t] * m2[t] + phi2[t] * m1[t]);
                for i in 0..c {
                    out[(bi * ch + q * c + i) * l + t] = xg(i, t) * w;
                }
            }
        }
    }
    out
}

/// `W[out, in] · x[in, L] + b`.
fn pointwise(store: &ParamStore, name: &str, x: &[f64], ch: usize, l: usize) -> Vec<f64> {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let mut y = vec![0.0; ch * l];
    for o in 0..ch {
        for t in 0..l {
            let mut s = b[o];
            for i in 0..ch {
                s += w[o * ch + i] * x[i * l + t];
            }
            y[o * l + t] = s;
        }
    }
    y
}

/// Selective scan branch (with its SiLU gate when present) on `x` (`C × L`).
pub fn ssm_branch(store: &ParamStore, name: &str, x: &[f64], ch: usize, l: usize) -> Vec<f64> {
    let a_log = param(store, &format!("{name}.a_log"));
    let n = a_log.len() / ch;
    let wb = param(store, &format!("{name}.w_b"));
    let wc = param(store, &format!("{name}.w_c"));
    let wd = param(store, &format!("{name}.w_delta"));
    let bd = param(store, &format!("{name}.delta_bias"));
    let d = param(store, &format!("{name}.d"));
    let col = |t: usize, w: &[f64], row: usize| {
        (0..ch).map(|i| w[row * ch + i] * x[i * l + t]).sum::<f64>()
    };
    let mut y = vec![0.0; ch * l];
    for c in 0..ch {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let dt = softplus(col(t, wd, c) + bd[c]);
            let xt = x[c * l + t];
            let mut out = d[c] * xt;
            for s in 0..n {
                let a = -a_log[c * n + s].exp();
                let a_bar = (dt * a).exp();
                let b_bar = ((dt * a).exp() - 1.0) / a * col(t, wb, s);
                h[s] = a_bar * h[s] + b_bar * xt;
                out += col(t, wc, s) * h[s];
            }
            y[c * l + t] = out;
        }
    }
    if store.by_name(&format!("{name}.gate.weight")).is_some() {
        let z = pointwise(store, &format!("{name}.gate"), x, ch, l);
        for (yv, zv) in y.iter_mut().zip(z) {
            *yv *= zv * sigmoid(zv);
        }
    }
    y
}

fn flip(x: &[f64], ch: usize, l: usize) -> Vec<f64> {
    let mut y = vec![0.0; ch * l];
    for c in 0..ch {
        for t in 0..l {
            y[(ch - 1 - c) * l + t] = x[c * l + t];
        }
    }
    y
}

/// Bidirectional block on `x` (`C × L`).
pub fn bissm(
    store: &ParamStore,
    name: &str,
    x: &[f64],
    ch: usize,
    l: usize,
    g: usize,
    rev: &str,
) -> Vec<f64> {
    let f = pointwise(store, &format!("{name}.in_proj"), x, ch, l);
    let f = if store.by_name(&format!("{name}.cofe.gate.weight")).is_some() {
        cofe(store, &format!("{name}.cofe"), &f, 1, ch, l, g)
    } else {
        f
    };
    let fwd = ssm_branch(store, &format!("{name}.fwd"), &f, ch, l);
    let back = flip(
        &ssm_branch(store, &format!("{name}.{rev}"), &flip(&f, ch, l), ch, l),
        ch,
        l,
    );
    let sum: Vec<f64> = fwd.iter().zip(&back).map(|(a, b)| a + b).collect();
    pointwise(store, &format!("{name}.out_proj"), &sum, ch, l)
}
