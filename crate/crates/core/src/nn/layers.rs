//! Differentiable building blocks. Every function records its ops on the
//! given tape and works for any batch size `N`; none of them mixes
//! statistics across samples.

use sonotag_tensor::{Scalar, Tape, Tensor, Var};

use super::params::Bound;
use crate::error::{Error, Result};

/// Weight standardisation: each output channel of `w` (leading axis) is
/// shifted to zero mean and divided by `√(σ² + eps²)`.
///
/// Squaring `eps` keeps the standardised variance within about `1e-8` of 1
/// for typical kernel scales while still guarding constant channels.
pub fn weight_standardize<T: Scalar>(tape: &Tape<T>, w: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(w);
    let Some(&out) = shape.first() else {
        return Err(Error::Model("weight_standardize needs a leading channel axis".into()));
    };
    let per = shape.iter().skip(1).product::<usize>();
    let flat = tape.reshape(w, &[out, per])?;
    let normed = tape.layer_norm(flat, eps * eps)?;
    Ok(tape.reshape(normed, &shape)?)
}

/// Group normalisation of `[N, C, ...]` without the affine step: each
/// `(sample, group)` block is brought to zero mean and unit variance.
pub fn group_norm_plain<T: Scalar>(tape: &Tape<T>, x: Var, groups: usize, eps: f64) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() < 2 {
        return Err(Error::Model(format!("group_norm needs [N, C, ...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Model(format!("{c} channels cannot be split into {groups} groups")));
    }
    let rest: usize = shape[2..].iter().product();
    let flat = tape.reshape(x, &[n * groups, c / groups * rest])?;
    let normed = tape.layer_norm(flat, eps)?;
    Ok(tape.reshape(normed, &shape)?)
}

/// Group normalisation followed by the per-channel affine `γ·x̂ + β`.
pub fn group_norm<T: Scalar>(tape: &Tape<T>, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x);
    let normed = group_norm_plain(tape, x, groups, eps)?;
    // [C] → [C, 1, ..., 1] so it broadcasts over the trailing axes
    let mut affine = vec![shape[1]];
    affine.extend(std::iter::repeat(1).take(shape.len() - 2));
    let g = tape.reshape(gamma, &affine)?;
    let b = tape.reshape(beta, &affine)?;
    Ok(tape.add(tape.mul(normed, g)?, b)?)
}

/// `x·W + b` over the last axis of `x`; leading axes are preserved.
pub fn linear<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x);
    let w_shape = tape.shape(w);
    let (&d_in, lead) = shape
        .split_last()
        .ok_or_else(|| Error::Model("linear on a rank-0 input".into()))?;
    if w_shape.len() != 2 || w_shape[0] != d_in {
        return Err(Error::Model(format!("linear: input {shape:?} against weight {w_shape:?}")));
    }
    let rows: usize = lead.iter().product();
    let flat = tape.reshape(x, &[rows, d_in])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add(y, b)?;
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(w_shape[1]);
    Ok(tape.reshape(y, &out_shape)?)
}

/// Layer norm over the last axis with a learned scale and shift.
pub fn layer_norm_affine<T: Scalar>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let normed = tape.layer_norm(x, eps)?;
    Ok(tape.add(tape.mul(normed, gamma)?, beta)?)
}

/// Time2Vec of a column of times `tau: [N, 1]`: coordinate 0 is
/// `ω₀τ + φ₀`, coordinates `i ≥ 1` are `sin(ωᵢτ + φᵢ)`. Output `[N, k]`.
pub fn time2vec<T: Scalar>(tape: &Tape<T>, tau: Var, omega: Var, phi: Var) -> Result<Var> {
    let k = tape.shape(omega).iter().product::<usize>();
    if k < 2 {
        return Err(Error::Model(format!("time2vec needs k ≥ 2, got {k}")));
    }
    let arg = tape.add(tape.mul(tau, omega)?, phi)?;
    let lin = tape.slice(arg, 1, 0, 1)?;
    let per = tape.sin(tape.slice(arg, 1, 1, k)?);
    Ok(tape.concat(&[lin, per], 1)?)
}

/// Plain evaluation of [`time2vec`] for one time value.
pub fn time2vec_values(tau: f64, omega: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    if omega.len() < 2 || omega.len() != phi.len() {
        return Err(Error::Model(format!(
            "time2vec needs k ≥ 2 matching omega/phi, got {} and {}",
            omega.len(),
            phi.len()
        )));
    }
    Ok(omega
        .iter()
        .zip(phi)
        .enumerate()
        .map(|(i, (&w, &p))| if i == 0 { w * tau + p } else { (w * tau + p).sin() })
        .collect())
}

/// `pe[t, 2i] = sin(t / 10000^{2i/d})`, `pe[t, 2i+1] = cos(…)`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = t as f64 / rate;
            data.push(T::of(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new([len, d], data).expect("shape matches data")
}

/// Handles of one post-LN transformer encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl EncoderWeights {
    /// Looks up `{prefix}.wq`, `{prefix}.bq`, … in a bound store.
    pub fn from_bound(p: &Bound, prefix: &str) -> Result<Self> {
        let g = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
            ln1_g: g("ln1.gamma")?,
            ln1_b: g("ln1.beta")?,
            ff1_w: g("ff1.weight")?,
            ff1_b: g("ff1.bias")?,
            ff2_w: g("ff2.weight")?,
            ff2_b: g("ff2.bias")?,
            ln2_g: g("ln2.gamma")?,
            ln2_b: g("ln2.beta")?,
        })
    }

    /// Parameter names and shapes of an encoder layer.
    pub fn shapes(prefix: &str, d: usize, d_ff: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for m in ["wq", "wk", "wv", "wo"] {
            v.push((format!("{prefix}.{m}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo", "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta", "ff2.bias"] {
            v.push((format!("{prefix}.{b}"), vec![d]));
        }
        v.push((format!("{prefix}.ff1.weight"), vec![d, d_ff]));
        v.push((format!("{prefix}.ff1.bias"), vec![d_ff]));
        v.push((format!("{prefix}.ff2.weight"), vec![d_ff, d]));
        v
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Multi-head self-attention with residual and layer norm, then a ReLU
/// feed-forward block with residual and layer norm.
///
/// `x` is `[N, T, d]`. Returns the output and the attention probabilities
/// `[N, heads, T, T]` (softmax over the last axis).
pub fn encoder_layer<T: Scalar>(tape: &Tape<T>, x: Var, w: &EncoderWeights, heads: usize) -> Result<(Var, Var)> {
    let shape = tape.shape(x);
    let &[n, t, d] = shape.as_slice() else {
        return Err(Error::Model(format!("encoder_layer expects [N, T, d], got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Model(format!("d_model {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[n, t, heads, dh])?;
        let v = tape.transpose(v, &[0, 2, 1, 3])?;
        Ok(tape.reshape(v, &[n * heads, t, dh])?)
    };
    let q = split(linear(tape, x, w.wq, Some(w.bq))?)?;
    let k = split(linear(tape, x, w.wk, Some(w.bk))?)?;
    let v = split(linear(tape, x, w.wv, Some(w.bv))?)?;
    let kt = tape.transpose(k, &[0, 2, 1])?;
    let scores = tape.scale(tape.matmul(q, kt)?, T::of(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, d])?;
    let attended = linear(tape, ctx, w.wo, Some(w.bo))?;
    let h = layer_norm_affine(tape, tape.add(x, attended)?, w.ln1_g, w.ln1_b, LN_EPS)?;
    let ff = tape.relu(linear(tape, h, w.ff1_w, Some(w.ff1_b))?);
    let ff = linear(tape, ff, w.ff2_w, Some(w.ff2_b))?;
    let out = layer_norm_affine(tape, tape.add(h, ff)?, w.ln2_g, w.ln2_b, LN_EPS)?;
    let attn = tape.reshape(attn, &[n, heads, t, t])?;
    Ok((out, attn))
}

/// Softmax-weighted average of the rows of `x: [N, T, d]` with learned
/// scores `x·w + b` (`w: [d, 1]`, `b: [1]`). Returns `[N, d]` and the
/// weights `[N, T]`.
pub fn attention_pool<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(x);
    let &[n, t, d] = shape.as_slice() else {
        return Err(Error::Model(format!("attention_pool expects [N, T, d], got {shape:?}")));
    };
    let scores = tape.reshape(linear(tape, x, w, Some(b))?, &[n, t])?;
    let weights = tape.softmax(scores, 1)?;
    let pooled = tape.matmul(tape.reshape(weights, &[n, 1, t])?, x)?;
    Ok((tape.reshape(pooled, &[n, d])?, weights))
}

/// Handles of one GRU direction (gate order r, z, n as in PyTorch).
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[input, 3H]`
    pub w_ih: Var,
    /// `[H, 3H]`
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl GruWeights {
    pub fn from_bound(p: &Bound, prefix: &str) -> Result<Self> {
        let g = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self {
            w_ih: g("w_ih")?,
            w_hh: g("w_hh")?,
            b_ih: g("b_ih")?,
            b_hh: g("b_hh")?,
        })
    }

    pub fn shapes(prefix: &str, input: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{prefix}.w_ih"), vec![input, 3 * hidden]),
            (format!("{prefix}.w_hh"), vec![hidden, 3 * hidden]),
            (format!("{prefix}.b_ih"), vec![3 * hidden]),
            (format!("{prefix}.b_hh"), vec![3 * hidden]),
        ]
    }
}

/// One GRU step from a precomputed input projection `gi = x·W_ih + b_ih`
/// (`[N, 3H]`) and the previous state `h: [N, H]`:
///
/// `r = σ(gi_r + gh_r)`, `z = σ(gi_z + gh_z)`, `n = tanh(gi_n + r ⊙ gh_n)`,
/// `h' = (1 − z) ⊙ n + z ⊙ h`, where `gh = h·W_hh + b_hh`.
pub fn gru_step<T: Scalar>(tape: &Tape<T>, gi: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let hidden = tape.shape(h)[1];
    let gh = tape.add(tape.matmul(h, w.w_hh)?, w.b_hh)?;
    let part = |v: Var, i: usize| tape.slice(v, 1, i * hidden, (i + 1) * hidden);
    let r = tape.sigmoid(tape.add(part(gi, 0)?, part(gh, 0)?)?);
    let z = tape.sigmoid(tape.add(part(gi, 1)?, part(gh, 1)?)?);
    let cand = tape.tanh(tape.add(part(gi, 2)?, tape.mul(r, part(gh, 2)?)?)?);
    // (1 − z)·n + z·h = n + z·(h − n)
    Ok(tape.add(cand, tape.mul(z, tape.sub(h, cand)?)?)?)
}

/// Runs one direction over `x: [N, T, input]` from a zero state and returns
/// the final state `[N, H]`.
pub fn gru_final_state<T: Scalar>(tape: &Tape<T>, x: Var, w: &GruWeights, reverse: bool) -> Result<Var> {
    let shape = tape.shape(x);
    let &[n, t, _] = shape.as_slice() else {
        return Err(Error::Model(format!("gru expects [N, T, input], got {shape:?}")));
    };
    let hidden = tape.shape(w.w_hh)[0];
    let gi_all = linear(tape, x, w.w_ih, Some(w.b_ih))?;
    let mut h = tape.constant(Tensor::zeros([n, hidden]));
    for step in 0..t {
        let s = if reverse { t - 1 - step } else { step };
        let gi = tape.reshape(tape.slice(gi_all, 1, s, s + 1)?, &[n, 3 * hidden])?;
        h = gru_step(tape, gi, h, w)?;
    }
    Ok(h)
}
