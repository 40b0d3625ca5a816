//! Graph matching adapter: confidence/entropy-guided node sampling,
//! per-domain class memory banks, synthesis of missing-class nodes, graph
//! self-attention with edge affinities, Sinkhorn-normalized open-set
//! matching, and the three-term graph loss.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::euler::AttentionWeights;
use crate::tape::{Tape, Var};

pub const IGNORE_ID: i64 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Positive,
    Negative,
    Prototype,
    Synthesized,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Positive => "positive",
            NodeKind::Negative => "negative",
            NodeKind::Prototype => "prototype",
            NodeKind::Synthesized => "synthesized",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeMeta {
    pub class_id: usize,
    pub domain: Domain,
    pub kind: NodeKind,
}

/// Ordered node features (n×d on the tape) plus per-node tags.
pub struct NodeSet {
    pub features: Var,
    pub meta: Vec<NodeMeta>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen: Vec<usize> = self.meta.iter().map(|m| m.class_id).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Per-pixel max-softmax confidence and Shannon entropy (natural log).
/// `logits` is (N, C); returns `(p, h)` of length N.
pub fn pixel_confidence_entropy(logits: &ArrayD<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits.ndim() != 2 {
        return Err(Error::Shape(format!(
            "pixel_confidence_entropy expects N×C logits, got {:?}",
            logits.shape()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pixel_confidence_entropy logits".into()));
    }
    let n = logits.shape()[0];
    let mut p = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for row in logits.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut pmax = 0.0f64;
        let mut ent = 0.0;
        for e in &exps {
            let q = e / z;
            pmax = pmax.max(q);
            if q > 0.0 {
                ent -= q * q.ln();
            }
        }
        p.push(pmax);
        h.push(ent);
    }
    Ok((p, h))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pixel indices and prototype recipe selected for one class.
#[derive(Clone, Debug)]
pub struct ClassSample {
    pub class_id: usize,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    /// Pixels whose mean feature defines the prototype. Empty means the
    /// prototype falls back to the global mean over all pixels.
    pub proto_pixels: Vec<usize>,
    /// Gaussian noise added to the prototype mean.
    pub noise: Vec<f64>,
}

fn class_mean(features: &ArrayD<f64>, indices: &[usize]) -> Vec<f64> {
    let d = features.shape()[1];
    let mut mean = vec![0.0; d];
    for &i in indices {
        for c in 0..d {
            mean[c] += features[[i, c]];
        }
    }
    for m in &mut mean {
        *m /= indices.len().max(1) as f64;
    }
    mean
}

fn truncate_nearest(
    features: &ArrayD<f64>,
    candidates: &[usize],
    center: &[f64],
    k: usize,
) -> Vec<usize> {
    let d = features.shape()[1];
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let dist: f64 = (0..d)
                .map(|c| {
                    let diff = features[[i, c]] - center[c];
                    diff * diff
                })
                .sum();
            (dist, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = scored.into_iter().take(k).map(|(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

fn gaussian_noise(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Sample positive/negative pixel nodes and a prototype recipe per base
/// class, guided by confidence and entropy medians over valid pixels.
pub fn sample_base_nodes(
    features: &ArrayD<f64>,
    labels: &[i64],
    p: &[f64],
    h: &[f64],
    num_base: usize,
    k: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ClassSample> {
    let valid: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != IGNORE_ID && labels[i] >= 0)
        .collect();
    if valid.is_empty() {
        return Vec::new();
    }
    let tau_p = median(&valid.iter().map(|&i| p[i]).collect::<Vec<_>>());
    let tau_e = median(&valid.iter().map(|&i| h[i]).collect::<Vec<_>>());
    let d = features.shape()[1];
    let mut out = Vec::new();
    for class in 0..num_base {
        let members: Vec<usize> = valid
            .iter()
            .cloned()
            .filter(|&i| labels[i] == class as i64)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean = class_mean(features, &members);
        let positive: Vec<usize> = members
            .iter()
            .cloned()
            .filter(|&i| p[i] > tau_p && h[i] < tau_e)
            .collect();
        let negative: Vec<usize> = members
            .iter()
            .cloned()
            .filter(|&i| p[i] <= tau_p && h[i] < tau_e)
            .collect();
        out.push(ClassSample {
            class_id: class,
            positive: truncate_nearest(features, &positive, &mean, k),
            negative: truncate_nearest(features, &negative, &mean, k),
            proto_pixels: members,
            noise: gaussian_noise(rng, d, noise_std),
        });
    }
    out
}

/// Sample candidate unknown-class nodes by splitting pixels at the median
/// entropy: low-entropy pixels are positives, high-entropy negatives.
pub fn sample_novel_nodes(
    features: &ArrayD<f64>,
    p: &[f64],
    h: &[f64],
    unknown_id: usize,
    k: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> ClassSample {
    let _ = p;
    let tau_m = median(h);
    let positive: Vec<usize> = (0..h.len()).filter(|&i| h[i] < tau_m).collect();
    let negative: Vec<usize> = (0..h.len()).filter(|&i| h[i] > tau_m).collect();
    let selected: Vec<usize> = positive.iter().chain(&negative).cloned().collect();
    let d = features.shape()[1];
    let mean = if selected.is_empty() {
        class_mean(features, &(0..features.shape()[0]).collect::<Vec<_>>())
    } else {
        class_mean(features, &selected)
    };
    ClassSample {
        class_id: unknown_id,
        positive: truncate_nearest(features, &positive, &mean, k),
        negative: truncate_nearest(features, &negative, &mean, k),
        proto_pixels: selected,
        noise: gaussian_noise(rng, d, noise_std),
    }
}

/// Per-class running mean and per-dimension std, updated by exponential
/// moving average.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankEntry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub updates: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryBank {
    pub dim: usize,
    pub decay: f64,
    pub entries: Vec<Option<BankEntry>>,
}

impl MemoryBank {
    pub fn new(num_classes: usize, dim: usize, decay: f64) -> Self {
        MemoryBank { dim, decay, entries: vec![None; num_classes] }
    }

    pub fn entry(&self, class: usize) -> Option<&BankEntry> {
        self.entries.get(class).and_then(|e| e.as_ref())
    }
}

/// EMA update `m <- (1-α)m + α·batch_mean` per class with a nonempty set;
/// the first update initializes the entry directly.
pub fn update_memory(
    bank: &mut MemoryBank,
    class_sets: &[(usize, Vec<Vec<f64>>)],
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha_mem out of [0,1]: {alpha}")));
    }
    for (class, feats) in class_sets {
        if feats.is_empty() {
            continue;
        }
        let d = bank.dim;
        let n = feats.len() as f64;
        let mut mean = vec![0.0; d];
        for f in feats {
            for c in 0..d {
                mean[c] += f[c];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for f in feats {
            for c in 0..d {
                let diff = f[c] - mean[c];
                std[c] += diff * diff;
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
        }
        match &mut bank.entries[*class] {
            Some(entry) => {
                for c in 0..d {
                    entry.mean[c] = (1.0 - alpha) * entry.mean[c] + alpha * mean[c];
                    entry.std[c] = (1.0 - alpha) * entry.std[c] + alpha * std[c];
                }
                entry.updates += 1;
            }
            slot @ None => {
                *slot = Some(BankEntry { mean, std, updates: 1 });
            }
        }
    }
    Ok(())
}

/// Recipe for one synthesized node: current-domain memory mean plus noise
/// scaled by the counterpart domain's running std.
#[derive(Clone, Debug)]
pub struct SynthesizedNode {
    pub class_id: usize,
    pub feature: Vec<f64>,
}

/// For every expected class missing from `present`, synthesize a node from
/// the memory banks. Classes unavailable in either bank are skipped and
/// counted.
pub fn complete_missing_classes(
    present: &[usize],
    expected: &[usize],
    bank_self: &MemoryBank,
    bank_other: &MemoryBank,
    rng: &mut ChaCha8Rng,
) -> (Vec<SynthesizedNode>, usize) {
    let mut synthesized = Vec::new();
    let mut skipped = 0usize;
    for &class in expected {
        if present.contains(&class) {
            continue;
        }
        match (bank_self.entry(class), bank_other.entry(class)) {
            (Some(own), Some(other)) => {
                let unit = gaussian_noise(rng, bank_self.dim, 1.0);
                let feature: Vec<f64> = own
                    .mean
                    .iter()
                    .zip(unit.iter().zip(&other.std))
                    .map(|(&m, (&g, &s))| m + g * s)
                    .collect();
                synthesized.push(SynthesizedNode { class_id: class, feature });
            }
            _ => skipped += 1,
        }
    }
    (synthesized, skipped)
}

/// Residual multi-head self-attention over the joint node set, plus the
/// edge affinity `ξ = dropout(softmax(S W_q (S W_k)ᵀ))` computed without
/// the `1/sqrt(d_k)` scale. `rng = None` means evaluation mode (no dropout).
pub fn graph_self_attention(
    tape: &Tape,
    features: Var,
    weights: &AttentionWeights,
    heads: usize,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "graph_self_attention expects nonempty n×d features, got {:?}",
            shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("feature dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = tape.matmul(features, weights.w_q);
    let k = tape.matmul(features, weights.w_k);
    let v = tape.matmul(features, weights.w_v);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_last(q, hd * dh, dh);
        let kh = tape.slice_last(k, hd * dh, dh);
        let vh = tape.slice_last(v, hd * dh, dh);
        let attn = tape.softmax_last(tape.scale(tape.matmul(qh, tape.transpose_last2(kh)), scale));
        head_outputs.push(tape.matmul(attn, vh));
    }
    let merged = if heads == 1 { head_outputs[0] } else { tape.concat(1, &head_outputs) };
    let updated = tape.add(features, merged);
    // edge affinity from the unscaled full product
    let mut xi = tape.softmax_last(tape.matmul(q, tape.transpose_last2(k)));
    if let Some(rng) = rng {
        if dropout > 0.0 {
            let keep = 1.0 - dropout;
            let mask = ArrayD::from_shape_fn(IxDyn(&[n, n]), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            xi = tape.mul(xi, tape.leaf(mask));
        }
    }
    Ok((updated, xi))
}

/// Learnable bilinear affinity `V_s W_φ V_tᵀ`.
pub fn affinity(tape: &Tape, v_s: Var, v_t: Var, w_phi: Var) -> Result<Var> {
    let ss = tape.shape(v_s);
    let ts = tape.shape(v_t);
    let ws = tape.shape(w_phi);
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] || ws != vec![ss[1], ss[1]] {
        return Err(Error::Shape(format!(
            "affinity shape mismatch: V_s {:?}, V_t {:?}, W_φ {:?}",
            ss, ts, ws
        )));
    }
    Ok(tape.matmul(tape.matmul(v_s, w_phi), tape.transpose_last2(v_t)))
}

/// Standardize the whole matrix to zero mean / unit variance, exponentiate,
/// then alternate column- and row-normalization for `iters` rounds, ending
/// on rows. Differentiable end to end (the loop is unrolled on the tape).
pub fn sinkhorn(tape: &Tape, raw: Var, iters: usize) -> Result<Var> {
    if iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs iters >= 1".into()));
    }
    let value = tape.value(raw);
    if value.ndim() != 2 {
        return Err(Error::Shape(format!("sinkhorn expects 2-D input, got {:?}", value.shape())));
    }
    if value.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sinkhorn input".into()));
    }
    // InstNorm: a constant matrix maps to zeros (eps guards the degenerate case)
    let mean = tape.mean_all(raw);
    let centered = tape.sub(raw, mean);
    let var = tape.mean_all(tape.square(centered));
    let std = tape.sqrt(tape.add_const(var, 1e-12));
    let mut k = tape.exp(tape.div(centered, std));
    for _ in 0..iters {
        let col_sums = tape.sum_axis_keep(k, 0);
        k = tape.div(k, col_sums);
        let row_sums = tape.sum_axis_keep(k, 1);
        k = tape.div(k, row_sums);
    }
    Ok(k)
}

/// Binary matching labels: `M_ij = 1` iff the class ids agree and neither
/// is the unknown id.
pub fn matching_labels(
    classes_s: &[usize],
    classes_t: &[usize],
    unknown_id: usize,
) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[classes_s.len(), classes_t.len()]), |ix| {
        let (cs, ct) = (classes_s[ix[0]], classes_t[ix[1]]);
        if cs == ct && cs != unknown_id && ct != unknown_id {
            1.0
        } else {
            0.0
        }
    })
}

/// Scalar breakdown of [`gma_loss`].
pub struct GmaLossBreakdown {
    pub total: Var,
    pub matching: f64,
    pub edge: f64,
    pub unknown: f64,
}

/// Three-term graph loss: squared matching error against `labels`, the L1
/// structural residual `‖ξ_s A − A ξ_t‖₁ / (n_s·n_t)`, and the known/unknown
/// cosine-separation penalty weighted by `beta`.
#[allow(clippy::too_many_arguments)]
pub fn gma_loss(
    tape: &Tape,
    a: Var,
    labels: &ArrayD<f64>,
    xi_s: Var,
    xi_t: Var,
    source_nodes: &NodeSet,
    target_nodes: &NodeSet,
    unknown_id: usize,
    beta: f64,
) -> Result<GmaLossBreakdown> {
    let ash = tape.shape(a);
    let (n_s, n_t) = (ash[0], ash[1]);
    if labels.shape() != [n_s, n_t] {
        return Err(Error::Shape(format!(
            "matching labels {:?} do not match A {:?}",
            labels.shape(),
            ash
        )));
    }
    if tape.shape(xi_s) != vec![n_s, n_s] || tape.shape(xi_t) != vec![n_t, n_t] {
        return Err(Error::Shape(format!(
            "edge affinity shapes {:?}/{:?} incompatible with A {n_s}×{n_t}",
            tape.shape(xi_s),
            tape.shape(xi_t)
        )));
    }
    let m = tape.leaf(labels.clone());
    let matching = tape.mean_all(tape.square(tape.sub(a, m)));
    let residual = tape.sub(tape.matmul(xi_s, a), tape.matmul(a, xi_t));
    let edge = tape.scale(tape.sum_all(tape.abs(residual)), 1.0 / (n_s * n_t) as f64);

    let mut unknown_term = tape.scalar(0.0);
    for nodes in [source_nodes, target_nodes] {
        let known: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes.meta[i].class_id != unknown_id)
            .collect();
        let unk: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes.meta[i].class_id == unknown_id)
            .collect();
        if known.is_empty() || unk.is_empty() {
            continue;
        }
        let norms = tape.sqrt(tape.add_const(
            tape.sum_axis_keep(tape.square(nodes.features), 1),
            1e-24,
        ));
        let unit = tape.div(nodes.features, norms);
        let vk = tape.gather_rows(unit, &known);
        let vu = tape.gather_rows(unit, &unk);
        let gram = tape.matmul(vk, tape.transpose_last2(vu));
        let term = tape.scale(
            tape.sum_all(tape.square(gram)),
            beta / (known.len() * unk.len()) as f64,
        );
        unknown_term = tape.add(unknown_term, term);
    }
    let total = tape.add(tape.add(matching, edge), unknown_term);
    Ok(GmaLossBreakdown {
        total,
        matching: tape.scalar_value(matching),
        edge: tape.scalar_value(edge),
        unknown: tape.scalar_value(unknown_term),
    })
}
