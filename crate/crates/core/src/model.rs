//! Segmentation model: a small strided-conv encoder, an upsampling fusion
//! decoder with two modulated-attention blocks over the 1/4-resolution
//! tokens, and a linear classifier head. Also hosts the self-training
//! utilities: pseudo-labeling, class-mix augmentation, the teacher EMA
//! update, and rare-class sampling weights.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::euler::{AttentionWeights, Modulation, SortMode, ema_attention_forward};
use crate::synthetic::IGNORE_ID;
use crate::tape::{Tape, Var};

/// Architecture hyperparameters (fixed per run, stored in checkpoints).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_base: usize,
    pub feat_dim: usize,
    pub heads: usize,
    pub tau_sort: f64,
    /// `false` degrades both attention blocks to plain dot-product
    /// attention (the ablation baseline).
    pub use_euler: bool,
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.num_base + 1
    }

    pub fn sort_mode(&self) -> SortMode {
        SortMode::Soft { tau: self.tau_sort }
    }
}

const STAGE_CHANNELS: [usize; 4] = [8, 16, 24, 32];

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bind every parameter onto a tape as a leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for one bound parameter set.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn he_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ArrayD<f64> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[out_c, in_c, k, k]), |_| normal(rng) * std)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn linear_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| normal(rng) * std)
}

/// Initialize all student parameters deterministically from `seed`.
/// Attention modulation scalars start at the identity (δ1=0, δ2=1, b=0).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    let d = cfg.feat_dim;
    if cfg.heads == 0 || d % (2 * cfg.heads) != 0 {
        return Err(Error::InvalidArgument(format!(
            "feat_dim {d} must be divisible by 2·heads ({})",
            cfg.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let c = STAGE_CHANNELS;
    p.insert("enc1.w", he_conv(&mut rng, c[0], 3, 3));
    p.insert("enc1.b", ArrayD::zeros(IxDyn(&[c[0]])));
    p.insert("enc2.w", he_conv(&mut rng, c[1], c[0], 3));
    p.insert("enc2.b", ArrayD::zeros(IxDyn(&[c[1]])));
    p.insert("enc3.w", he_conv(&mut rng, c[2], c[1], 3));
    p.insert("enc3.b", ArrayD::zeros(IxDyn(&[c[2]])));
    p.insert("enc4.w", he_conv(&mut rng, c[3], c[2], 3));
    p.insert("enc4.b", ArrayD::zeros(IxDyn(&[c[3]])));
    p.insert("dec3.w", he_conv(&mut rng, c[2], c[3] + c[2], 3));
    p.insert("dec3.b", ArrayD::zeros(IxDyn(&[c[2]])));
    p.insert("dec2.w", he_conv(&mut rng, d, c[2] + c[1], 3));
    p.insert("dec2.b", ArrayD::zeros(IxDyn(&[d])));
    let attn_std = 1.0 / (d as f64).sqrt();
    for blk in ["ema1", "ema2"] {
        p.insert(&format!("{blk}.wq"), linear_init(&mut rng, d, d, attn_std));
        p.insert(&format!("{blk}.wk"), linear_init(&mut rng, d, d, attn_std));
        p.insert(&format!("{blk}.wv"), linear_init(&mut rng, d, d, 0.1 * attn_std));
        for h in 0..cfg.heads {
            p.insert(&format!("{blk}.h{h}.d1"), ArrayD::zeros(IxDyn(&[1])));
            p.insert(&format!("{blk}.h{h}.d2"), ArrayD::from_elem(IxDyn(&[1]), 1.0));
            p.insert(&format!("{blk}.h{h}.b"), ArrayD::zeros(IxDyn(&[1])));
        }
    }
    p.insert("head.w", linear_init(&mut rng, d, cfg.num_classes(), attn_std));
    p.insert("head.b", ArrayD::zeros(IxDyn(&[cfg.num_classes()])));
    // graph matching adapter projections live with the student
    p.insert("graph.wq", linear_init(&mut rng, d, d, attn_std));
    p.insert("graph.wk", linear_init(&mut rng, d, d, attn_std));
    p.insert("graph.wv", linear_init(&mut rng, d, d, 0.1 * attn_std));
    p.insert("graph.wphi", linear_init(&mut rng, d, d, attn_std));
    Ok(p)
}

/// Whether a parameter belongs to the decoder/head group that trains with
/// the higher learning-rate multiplier.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("graph.")
}

fn conv_block(tape: &Tape, x: Var, bound: &BoundParams, name: &str, stride: usize) -> Var {
    tape.relu(tape.conv2d(x, bound.var(&format!("{name}.w")), bound.var(&format!("{name}.b")), stride, 1))
}

fn block_mods(bound: &BoundParams, blk: &str, heads: usize) -> Vec<Modulation> {
    (0..heads)
        .map(|h| Modulation {
            delta1: bound.var(&format!("{blk}.h{h}.d1")),
            delta2: bound.var(&format!("{blk}.h{h}.d2")),
            bias: bound.var(&format!("{blk}.h{h}.b")),
        })
        .collect()
}

/// Encoder + fusion decoder + the two attention blocks. Input is a
/// `(B, 3, H, W)` batch with `H`, `W` divisible by 16; output tokens are
/// `(B, H/4·W/4, d)`.
pub fn encode_decode(
    tape: &Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("expected (B,3,H,W) input, got {:?}", shape)));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!(
            "input size {h}x{w} must be divisible by 16"
        )));
    }
    let s1 = conv_block(tape, x, bound, "enc1", 2);
    let s2 = conv_block(tape, s1, bound, "enc2", 2);
    let s3 = conv_block(tape, s2, bound, "enc3", 2);
    let s4 = conv_block(tape, s3, bound, "enc4", 2);
    let u3 = tape.upsample2x(s4);
    let f3 = conv_block(tape, tape.concat(1, &[u3, s3]), bound, "dec3", 1);
    let u2 = tape.upsample2x(f3);
    let f2 = conv_block(tape, tape.concat(1, &[u2, s2]), bound, "dec2", 1);
    // (B, d, H/4, W/4) -> (B, N, d) tokens
    let (h4, w4) = (h / 4, w / 4);
    let mut tokens = tape.permute(tape.reshape(f2, &[b, cfg.feat_dim, h4 * w4]), &[0, 2, 1]);
    for blk in ["ema1", "ema2"] {
        let weights = AttentionWeights {
            w_q: bound.var(&format!("{blk}.wq")),
            w_k: bound.var(&format!("{blk}.wk")),
            w_v: bound.var(&format!("{blk}.wv")),
        };
        let mods = block_mods(bound, blk, cfg.heads);
        tokens = ema_attention_forward(
            tape,
            tokens,
            &weights,
            &mods,
            cfg.heads,
            cfg.sort_mode(),
            cfg.use_euler,
        )?;
    }
    Ok(tokens)
}

/// Per-token class logits `(B, N, C)`.
pub fn classify_tokens(tape: &Tape, bound: &BoundParams, tokens: Var) -> Var {
    tape.add(tape.matmul(tokens, bound.var("head.w")), bound.var("head.b"))
}

/// Full-resolution class logits `(B, C, H, W)` via 4× nearest upsampling
/// of the token logits.
pub fn classify(
    tape: &Tape,
    bound: &BoundParams,
    tokens: Var,
    h4: usize,
    w4: usize,
) -> Result<Var> {
    let tok_logits = classify_tokens(tape, bound, tokens);
    let shape = tape.shape(tok_logits);
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    if n != h4 * w4 {
        return Err(Error::Shape(format!(
            "token count {n} does not match {h4}x{w4} grid"
        )));
    }
    let grid = tape.permute(tape.reshape(tok_logits, &[b, h4, w4, c]), &[0, 3, 1, 2]);
    Ok(tape.upsample2x(tape.upsample2x(grid)))
}

/// Mean cross-entropy over all valid pixels of a `(B, C, H, W)` logit
/// volume against `(B, H, W)` integer targets (ignore id excluded).
pub fn segmentation_loss(tape: &Tape, logits: Var, targets: &[i64]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected (B,C,H,W) logits, got {:?}", shape)));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if targets.len() != b * h * w {
        return Err(Error::Shape(format!(
            "expected {} targets, got {}",
            b * h * w,
            targets.len()
        )));
    }
    let rows = tape.reshape(tape.permute(logits, &[0, 2, 3, 1]), &[b * h * w, c]);
    Ok(tape.cross_entropy(rows, targets))
}

/// One teacher pseudo-label map with its batch confidence weight.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    pub labels: Array2<i64>,
    /// Fraction of labelable (non-border) pixels that cleared the
    /// confidence threshold.
    pub weight: f64,
}

/// Distortion-prone border rows masked to ignore, as fractions of height.
pub const BORDER_TOP_FRAC: f64 = 15.0 / 512.0;
pub const BORDER_BOTTOM_FRAC: f64 = 120.0 / 512.0;

/// Teacher logits `(C, H, W)` to pseudo labels: per pixel, argmax over the
/// base classes if its softmax clears `threshold`, else the unknown id.
/// Border rows become ignore after the weight is computed.
pub fn pseudo_label(
    logits: &ArrayD<f64>,
    num_base: usize,
    threshold: f64,
) -> Result<PseudoLabel> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] <= num_base {
        return Err(Error::Shape(format!(
            "expected (C,H,W) logits with C > {num_base}, got {:?}",
            shape
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-label threshold {threshold} outside [0,1]"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let top = (h as f64 * BORDER_TOP_FRAC).round() as usize;
    let bottom = (h as f64 * BORDER_BOTTOM_FRAC).round() as usize;
    let mut labels = Array2::<i64>::zeros((h, w));
    let mut confident = 0usize;
    let mut labelable = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for ch in 0..c {
                maxv = maxv.max(logits[[ch, y, x]]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                denom += (logits[[ch, y, x]] - maxv).exp();
            }
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for ch in 0..num_base {
                let p = (logits[[ch, y, x]] - maxv).exp() / denom;
                if p > best_p {
                    best_p = p;
                    best = ch;
                }
            }
            let in_border = y < top || y >= h - bottom;
            if !in_border {
                labelable += 1;
            }
            if best_p >= threshold {
                labels[[y, x]] = best as i64;
                if !in_border {
                    confident += 1;
                }
            } else {
                labels[[y, x]] = num_base as i64;
            }
            if in_border {
                labels[[y, x]] = IGNORE_ID;
            }
        }
    }
    let weight = if labelable == 0 { 0.0 } else { confident as f64 / labelable as f64 };
    Ok(PseudoLabel { labels, weight })
}

/// Output of one class-mix operation.
#[derive(Clone, Debug)]
pub struct MixedSample {
    pub image: Array3<f64>,
    pub labels: Array2<i64>,
    /// true where the pixel came from the source image
    pub source_mask: Array2<bool>,
    /// true when the source crop had no valid classes to paste
    pub degenerate: bool,
}

/// Paste the pixels of a seeded half of the source classes over the target
/// crop (ClassMix-style augmentation). Images are `(3, H, W)`.
pub fn dacs_mix(
    src_img: &Array3<f64>,
    src_lbl: &Array2<i64>,
    tgt_img: &Array3<f64>,
    tgt_lbl: &Array2<i64>,
    seed: u64,
) -> Result<MixedSample> {
    if src_img.shape() != tgt_img.shape() || src_lbl.shape() != tgt_lbl.shape() {
        return Err(Error::Shape("class-mix inputs must share shapes".into()));
    }
    let (h, w) = (src_lbl.shape()[0], src_lbl.shape()[1]);
    let mut classes: Vec<i64> = Vec::new();
    for &v in src_lbl.iter() {
        if v != IGNORE_ID && !classes.contains(&v) {
            classes.push(v);
        }
    }
    classes.sort_unstable();
    if classes.is_empty() {
        return Ok(MixedSample {
            image: tgt_img.clone(),
            labels: tgt_lbl.clone(),
            source_mask: Array2::from_elem((h, w), false),
            degenerate: true,
        });
    }
    let take = classes.len().div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<i64> = rand::seq::index::sample(&mut rng, classes.len(), take)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut image = tgt_img.clone();
    let mut labels = tgt_lbl.clone();
    let mut source_mask = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if chosen.contains(&src_lbl[[y, x]]) {
                for ch in 0..3 {
                    image[[ch, y, x]] = src_img[[ch, y, x]];
                }
                labels[[y, x]] = src_lbl[[y, x]];
                source_mask[[y, x]] = true;
            }
        }
    }
    Ok(MixedSample { image, labels, source_mask, degenerate: false })
}

/// EMA update of the teacher toward the student:
/// `t ← α·t + (1−α)·s` for every parameter.
pub fn teacher_update(teacher: &mut Params, student: &Params, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("teacher alpha {alpha} outside [0,1]")));
    }
    if teacher.len() != student.len() {
        return Err(Error::Shape("teacher/student parameter sets differ".into()));
    }
    for ((tn, tv), (sn, sv)) in teacher.iter_mut().zip(student.iter()) {
        if tn != sn || tv.shape() != sv.shape() {
            return Err(Error::Shape(format!(
                "teacher/student parameter mismatch at {tn}/{sn}"
            )));
        }
        tv.zip_mut_with(sv, |t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

/// Image sampling weights favoring images that contain rare classes.
/// `per_image_counts[i][c]` is the pixel count of class `c` in image `i`;
/// a class counts as present when it covers at least `min_pixels` pixels.
pub fn rare_class_weights(
    per_image_counts: &[Vec<usize>],
    temperature: f64,
    min_pixels: usize,
) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if per_image_counts.is_empty() {
        return Ok(Vec::new());
    }
    let num_classes = per_image_counts[0].len();
    let mut totals = vec![0usize; num_classes];
    for counts in per_image_counts {
        if counts.len() != num_classes {
            return Err(Error::Shape("ragged per-image class counts".into()));
        }
        for (t, &c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let grand: usize = totals.iter().sum();
    if grand == 0 {
        return Ok(vec![1.0; per_image_counts.len()]);
    }
    let freqs: Vec<f64> = totals.iter().map(|&t| t as f64 / grand as f64).collect();
    let mut probs: Vec<f64> = freqs.iter().map(|f| (-f / temperature).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    let weights: Vec<f64> = per_image_counts
        .iter()
        .map(|counts| {
            counts
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c >= min_pixels)
                .map(|(cl, _)| probs[cl])
                .fold(0.0, f64::max)
        })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(vec![1.0; per_image_counts.len()]);
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn central_diff(f: impl Fn(f64) -> f64, step: f64) -> f64 {
        (f(step) - f(-step)) / (2.0 * step)
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_base: 5,
            feat_dim: 32,
            heads: 2,
            tau_sort: 0.1,
            use_euler: true,
        }
    }

    fn input(b: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[b, 3, h, w]), |_| rng.random::<f64>())
    }

    #[test]
    fn init_is_deterministic_and_identity_modulated() {
        let a = init_params(&cfg(), 42).unwrap();
        let b = init_params(&cfg(), 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg(), 43).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.get("ema1.h0.d1")[[0]], 0.0);
        assert_eq!(a.get("ema1.h0.d2")[[0]], 1.0);
        assert_eq!(a.get("ema2.h1.b")[[0]], 0.0);
    }

    #[test]
    fn forward_shapes_and_size_validation() {
        let cfg = cfg();
        let params = init_params(&cfg, 0).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(input(2, 32, 32, 1));
        let tokens = encode_decode(&tape, &bound, &cfg, x).unwrap();
        assert_eq!(tape.shape(tokens), vec![2, 64, 32]);
        let logits = classify(&tape, &bound, tokens, 8, 8).unwrap();
        assert_eq!(tape.shape(logits), vec![2, 6, 32, 32]);
        let bad = tape.leaf(input(1, 24, 32, 2));
        assert!(encode_decode(&tape, &bound, &cfg, bad).is_err());
    }

    #[test]
    fn batched_forward_matches_per_sample_forward() {
        let cfg = cfg();
        let params = init_params(&cfg, 5).unwrap();
        let batch = input(2, 32, 32, 9);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let both = encode_decode(&tape, &bound, &cfg, tape.leaf(batch.clone())).unwrap();
        let both_v = tape.value(both);
        for i in 0..2 {
            let single = batch
                .slice(ndarray::s![i..i + 1, .., .., ..])
                .to_owned()
                .into_dyn();
            let t2 = Tape::new();
            let b2 = params.bind(&t2);
            let one = encode_decode(&t2, &b2, &cfg, t2.leaf(single)).unwrap();
            let one_v = t2.value(one);
            for n in 0..64 {
                for c in 0..32 {
                    assert_abs_diff_eq!(
                        both_v[[i, n, c]],
                        one_v[[0, n, c]],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn segmentation_loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig { feat_dim: 8, heads: 1, ..cfg() };
        let params = init_params(&cfg, 3).unwrap();
        let x = input(1, 16, 16, 4);
        let targets: Vec<i64> = (0..256).map(|i| (i % 5) as i64).collect();
        for (name, idx) in [("head.w", 5usize), ("enc1.w", 0usize), ("ema1.wq", 3usize)] {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let tokens = encode_decode(&tape, &bound, &cfg, tape.leaf(x.clone())).unwrap();
            let logits = classify(&tape, &bound, tokens, 4, 4).unwrap();
            let loss = segmentation_loss(&tape, logits, &targets).unwrap();
            let grads = tape.backward(loss);
            let g = grads.wrt(bound.var(name)).unwrap();
            let analytic = g.as_slice().unwrap()[idx];
            let numeric = central_diff(
                |eps| {
                    let mut p2 = params.clone();
                    p2.get_mut(name).as_slice_mut().unwrap()[idx] += eps;
                    let t = Tape::new();
                    let b = p2.bind(&t);
                    let tok = encode_decode(&t, &b, &cfg, t.leaf(x.clone())).unwrap();
                    let lg = classify(&t, &b, tok, 4, 4).unwrap();
                    t.scalar_value(segmentation_loss(&t, lg, &targets).unwrap())
                },
                1e-5,
            );
            assert_abs_diff_eq!(analytic, numeric, epsilon = 1e-5);
        }
    }

    #[test]
    fn pseudo_label_thresholding_and_borders() {
        // 6 channels, 32x32; column 0 confident class 2, column 1 uniform
        let mut logits = ArrayD::zeros(IxDyn(&[6, 32, 32]));
        for y in 0..32 {
            logits[[2, y, 0]] = 10.0;
        }
        let pl = pseudo_label(&logits, 5, 0.6).unwrap();
        // rows: round(32·15/512)=1 top, round(32·120/512)=8 bottom
        assert_eq!(pl.labels[[0, 0]], IGNORE_ID);
        for y in 24..32 {
            assert_eq!(pl.labels[[y, 5]], IGNORE_ID);
        }
        assert_eq!(pl.labels[[5, 0]], 2);
        assert_eq!(pl.labels[[5, 1]], 5); // uniform softmax 1/6 < 0.6 -> unknown
        // weight: 1 confident column of 23 labelable rows out of 23*32
        assert_abs_diff_eq!(pl.weight, 1.0 / 32.0, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_label_threshold_zero_keeps_all_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = ArrayD::from_shape_fn(IxDyn(&[6, 32, 32]), |_| rng.random::<f64>());
        let pl = pseudo_label(&logits, 5, 0.0).unwrap();
        assert_abs_diff_eq!(pl.weight, 1.0);
        assert!(pl.labels.iter().all(|&v| v != 5));
    }

    #[test]
    fn dacs_mix_mask_is_consistent_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src_img = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f64>());
        let tgt_img = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f64>());
        let src_lbl = Array2::from_shape_fn((16, 16), |(y, _)| (y % 4) as i64);
        let tgt_lbl = Array2::from_elem((16, 16), 1i64);
        let mix = dacs_mix(&src_img, &src_lbl, &tgt_img, &tgt_lbl, 7).unwrap();
        assert!(!mix.degenerate);
        let mut chosen = std::collections::BTreeSet::new();
        for y in 0..16 {
            for x in 0..16 {
                if mix.source_mask[[y, x]] {
                    assert_eq!(mix.labels[[y, x]], src_lbl[[y, x]]);
                    assert_eq!(mix.image[[0, y, x]], src_img[[0, y, x]]);
                    chosen.insert(src_lbl[[y, x]]);
                } else {
                    assert_eq!(mix.labels[[y, x]], tgt_lbl[[y, x]]);
                    assert_eq!(mix.image[[0, y, x]], tgt_img[[0, y, x]]);
                }
            }
        }
        assert_eq!(chosen.len(), 2); // ceil(4/2)
        let again = dacs_mix(&src_img, &src_lbl, &tgt_img, &tgt_lbl, 7).unwrap();
        assert_eq!(mix.labels, again.labels);
    }

    #[test]
    fn dacs_mix_degenerates_on_all_ignore_source() {
        let src_img = Array3::zeros((3, 8, 8));
        let tgt_img = Array3::from_elem((3, 8, 8), 0.5);
        let src_lbl = Array2::from_elem((8, 8), IGNORE_ID);
        let tgt_lbl = Array2::from_elem((8, 8), 3i64);
        let mix = dacs_mix(&src_img, &src_lbl, &tgt_img, &tgt_lbl, 0).unwrap();
        assert!(mix.degenerate);
        assert_eq!(mix.labels, tgt_lbl);
        assert!(mix.source_mask.iter().all(|&m| !m));
    }

    #[test]
    fn teacher_update_matches_closed_form() {
        let cfg = ModelConfig { feat_dim: 8, heads: 1, ..cfg() };
        let student = init_params(&cfg, 1).unwrap();
        let mut teacher = init_params(&cfg, 2).unwrap();
        let t0 = teacher.clone();
        let alpha = 0.999f64;
        let n = 25;
        for _ in 0..n {
            teacher_update(&mut teacher, &student, alpha).unwrap();
        }
        let an = alpha.powi(n);
        for (name, tv) in teacher.iter() {
            let init = t0.get(name);
            let s = student.get(name);
            for ((&t, &i0), &sv) in tv.iter().zip(init.iter()).zip(s.iter()) {
                assert_abs_diff_eq!(t, an * i0 + (1.0 - an) * sv, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rare_class_weights_favor_the_rare_class() {
        // two images, two classes, 90/10 pixel split
        let counts = vec![vec![900, 0], vec![0, 100]];
        let w = rare_class_weights(&counts, 0.01, 1).unwrap();
        let total: f64 = w.iter().sum();
        assert!(w[1] / total > 0.999, "rare-class image weight too low: {w:?}");
        // equal frequencies -> uniform
        let eq = rare_class_weights(&[vec![50, 50], vec![50, 50]], 0.01, 1).unwrap();
        assert_abs_diff_eq!(eq[0], eq[1], epsilon = 1e-12);
        // huge temperature -> near uniform even when skewed
        let hot = rare_class_weights(&counts, 1e6, 1).unwrap();
        assert!((hot[0] - hot[1]).abs() < 1e-4);
        // min_pixels gates presence
        let gated = rare_class_weights(&vec![vec![900, 2], vec![0, 100]], 0.01, 10).unwrap();
        assert!(gated[1] > gated[0]);
    }
}
