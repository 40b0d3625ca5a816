//! Euler-margin attention: channel sorting through a differentiable soft
//! permutation, decomposition of paired channels into amplitude and phase,
//! and attention scores modulated by learnable amplitude/phase factors.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Amplitude/phase halves of a feature after Euler decomposition.
/// Both arrays share the shape `(..., d/2)`.
#[derive(Clone, Copy)]
pub struct PolarPair {
    pub amplitude: Var,
    pub phase: Var,
}

/// Learnable per-head modulation scalars. Identity modulation is
/// `(delta1, delta2, bias) = (0, 1, 0)`.
#[derive(Clone, Copy)]
pub struct Modulation {
    /// Amplitude log-scale; products are scaled by `exp(2*delta1)`.
    pub delta1: Var,
    /// Phase-difference scale.
    pub delta2: Var,
    /// Phase bias.
    pub bias: Var,
}

impl Modulation {
    /// Identity modulation as fresh tape leaves.
    pub fn identity(tape: &Tape) -> Self {
        Modulation {
            delta1: tape.scalar(0.0),
            delta2: tape.scalar(1.0),
            bias: tape.scalar(0.0),
        }
    }
}

/// How channels are reordered before the Euler decomposition.
#[derive(Clone, Copy, Debug)]
pub enum SortMode {
    /// Temperature-controlled sorting relaxation; differentiable in the input.
    Soft { tau: f64 },
    /// Exact descending sort applied as a constant permutation
    /// (straight-through: gradients flow through the reordered values only).
    Hard,
}

/// Split even/odd channels of `v` (even last dimension) into amplitude
/// `sqrt(r^2+s^2)` and phase `atan2(s, r)`.
pub fn euler_decompose(tape: &Tape, v: Var) -> Result<PolarPair> {
    let shape = tape.shape(v);
    let d = *shape.last().ok_or_else(|| Error::Shape("empty shape".into()))?;
    if d % 2 != 0 {
        return Err(Error::Shape(format!("euler_decompose needs even channel count, got {d}")));
    }
    let r = tape.stride_slice_last(v, 0, 2);
    let s = tape.stride_slice_last(v, 1, 2);
    Ok(PolarPair { amplitude: tape.amplitude(r, s), phase: tape.atan2(s, r) })
}

/// Row-stochastic soft permutation matrices approximating a descending
/// sort of the last axis. Input `(m, n)` (or `(n,)`), output `(m, n, n)`;
/// `P·v` approaches `sort_desc(v)` as `tau -> 0`.
pub fn soft_sort_permutation(tape: &Tape, v: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau_sort must be positive, got {tau}")));
    }
    let value = tape.value(v);
    if value.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("soft_sort_permutation input".into()));
    }
    let shape = value.shape().to_vec();
    let n = *shape.last().unwrap();
    let m: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    let flat = tape.reshape(v, &[m, n]);
    Ok(tape.neural_sort(flat, tau))
}

/// Exact descending-sort permutation matrices for each row of `v` (m×n).
pub fn hard_sort_matrix(v: &ArrayD<f64>) -> ArrayD<f64> {
    let shape = v.shape();
    let n = *shape.last().unwrap();
    let m: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    let flat = v.view().into_shape_with_order((m, n)).unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[m, n, n]));
    for row in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| flat[[row, b]].partial_cmp(&flat[[row, a]]).unwrap());
        for (rank, &src) in order.iter().enumerate() {
            out[[row, rank, src]] = 1.0;
        }
    }
    out
}

/// Sort channels descending (softly or hard) and Euler-decompose the
/// reordered vector. Hard sorting pins every pair to `r >= s`, hence
/// phases in `[-3π/4, π/4]`.
pub fn margin_project(tape: &Tape, v: Var, mode: SortMode) -> Result<PolarPair> {
    let shape = tape.shape(v);
    let n = *shape.last().ok_or_else(|| Error::Shape("empty shape".into()))?;
    if n % 2 != 0 {
        return Err(Error::Shape(format!("margin_project needs even channel count, got {n}")));
    }
    let m: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    let flat = tape.reshape(v, &[m, n]);
    let perm = match mode {
        SortMode::Soft { tau } => soft_sort_permutation(tape, flat, tau)?,
        SortMode::Hard => tape.leaf(hard_sort_matrix(&tape.value(flat))),
    };
    let sorted = tape.reshape(tape.matmul(perm, tape.reshape(flat, &[m, n, 1])), &[m, n]);
    let restored = if shape.len() > 1 {
        tape.reshape(sorted, &shape)
    } else {
        tape.reshape(sorted, &[n])
    };
    euler_decompose(tape, restored)
}

/// Modulated attention scores
/// `score(i,j) = exp(2δ1) Σ_c Λq[i,c] Λk[j,c] cos(δ2(θq[i,c]-θk[j,c]) + b)`.
/// Accepts `(N, c)` pairs or batched `(B, N, c)` pairs.
pub fn modulated_score(
    tape: &Tape,
    q: &PolarPair,
    k: &PolarPair,
    m: &Modulation,
) -> Result<Var> {
    let qs = tape.shape(q.amplitude);
    let ks = tape.shape(k.amplitude);
    if qs.last() != ks.last() {
        return Err(Error::Shape(format!(
            "modulated_score half-dimension mismatch: {:?} vs {:?}",
            qs, ks
        )));
    }
    // cos(u - w) with u = δ2 θq + b, w = δ2 θk splits into two inner products
    let u = tape.add(tape.mul(q.phase, m.delta2), m.bias);
    let w = tape.mul(k.phase, m.delta2);
    let qc = tape.mul(q.amplitude, tape.cos(u));
    let qsin = tape.mul(q.amplitude, tape.sin(u));
    let kc = tape.mul(k.amplitude, tape.cos(w));
    let ksin = tape.mul(k.amplitude, tape.sin(w));
    let dot = tape.add(
        tape.matmul(qc, tape.transpose_last2(kc)),
        tape.matmul(qsin, tape.transpose_last2(ksin)),
    );
    let amp = tape.exp(tape.scale(m.delta1, 2.0));
    Ok(tape.mul(dot, amp))
}

/// Projection weights of one attention block, already bound to a tape.
#[derive(Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Full Euler-margin attention block over `x: (B, N, d)`: project q/k/v,
/// margin-project q and k per head, score via [`modulated_score`] scaled by
/// `1/sqrt(d_head)`, softmax, aggregate values, concatenate heads, add the
/// residual. `mods` supplies one [`Modulation`] per head.
///
/// With `euler = false` the block degrades to plain dot-product attention
/// on the same projections (the ablation baseline).
pub fn ema_attention_forward(
    tape: &Tape,
    x: Var,
    weights: &AttentionWeights,
    mods: &[Modulation],
    heads: usize,
    mode: SortMode,
    euler: bool,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attention input must be B×N×d, got {:?}", shape)));
    }
    let d = shape[2];
    if heads == 0 || d % (2 * heads) != 0 {
        return Err(Error::Shape(format!(
            "feature dim {d} not divisible by 2·heads ({heads} heads)"
        )));
    }
    if mods.len() != heads {
        return Err(Error::Shape(format!(
            "expected {heads} modulation sets, got {}",
            mods.len()
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(x, weights.w_q);
    let k = tape.matmul(x, weights.w_k);
    let v = tape.matmul(x, weights.w_v);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_last(q, h * dh, dh);
        let kh = tape.slice_last(k, h * dh, dh);
        let vh = tape.slice_last(v, h * dh, dh);
        let scores = if euler {
            let qp = margin_project(tape, qh, mode)?;
            let kp = margin_project(tape, kh, mode)?;
            modulated_score(tape, &qp, &kp, &mods[h])?
        } else {
            tape.matmul(qh, tape.transpose_last2(kh))
        };
        let attn = tape.softmax_last(tape.scale(scores, scale));
        head_outputs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat(2, &head_outputs);
    Ok(tape.add(x, merged))
}
