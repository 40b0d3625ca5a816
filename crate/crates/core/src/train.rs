//! Self-training engine: configuration, the AdamW optimizer with a
//! warmup + polynomial-decay schedule, the five-phase adaptation step
//! (supervised source loss, teacher pseudo-labels, class-mix consistency,
//! graph matching), checkpointing, and the training driver.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{
    self, ClassSample, Domain, MemoryBank, NodeKind, NodeMeta, NodeSet, SynthesizedNode,
};
use crate::model::{self, BoundParams, ModelConfig, Params};
use crate::synthetic::Dataset;
use crate::tape::{Tape, Var};

/// Full run configuration. Every field can be overridden from a flat
/// `key = value` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub num_base: usize,
    pub feat_dim: usize,
    pub heads: usize,
    pub crop: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr: f64,
    pub decoder_lr_mult: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// weight of the graph matching loss in the total objective
    pub gamma: f64,
    /// weight of the known/unknown separation term inside the graph loss
    pub beta: f64,
    pub alpha_teacher: f64,
    pub alpha_mem: f64,
    pub tau_sort: f64,
    pub k_nearest: usize,
    pub sinkhorn_iters: usize,
    pub dropout: f64,
    pub pseudo_threshold: f64,
    /// prototype noise scale, as a fraction of the batch feature std
    pub noise_scale: f64,
    pub class_temp: f64,
    /// minimum pixels for class presence, referenced to a 512×512 crop
    pub min_pixels: usize,
    pub use_euler: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            num_base: 5,
            feat_dim: 32,
            heads: 2,
            crop: 32,
            batch_size: 2,
            total_steps: 40_000,
            warmup_steps: 1_500,
            lr: 6e-5,
            decoder_lr_mult: 10.0,
            weight_decay: 0.01,
            poly_power: 0.9,
            gamma: 0.1,
            beta: 0.1,
            alpha_teacher: 0.999,
            alpha_mem: 0.99,
            tau_sort: 0.1,
            k_nearest: 8,
            sinkhorn_iters: 20,
            dropout: 0.1,
            pseudo_threshold: 0.6,
            noise_scale: 0.1,
            class_temp: 0.01,
            min_pixels: 3000,
            use_euler: true,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro!(
            (seed, u64),
            (num_base, usize),
            (feat_dim, usize),
            (heads, usize),
            (crop, usize),
            (batch_size, usize),
            (total_steps, u64),
            (warmup_steps, u64),
            (lr, f64),
            (decoder_lr_mult, f64),
            (weight_decay, f64),
            (poly_power, f64),
            (gamma, f64),
            (beta, f64),
            (alpha_teacher, f64),
            (alpha_mem, f64),
            (tau_sort, f64),
            (k_nearest, usize),
            (sinkhorn_iters, usize),
            (dropout, f64),
            (pseudo_threshold, f64),
            (noise_scale, f64),
            (class_temp, f64),
            (min_pixels, usize),
            (use_euler, bool)
        );
    };
}

impl TrainConfig {
    /// Parse overrides in flat `key = value` form (`#` starts a comment).
    /// Unknown keys and malformed values are rejected.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! setter {
            ($(($field:ident, $ty:ty)),*) => {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!(
                                "invalid {} value `{value}`",
                                stringify!($field)
                            ))
                        })?;
                    })*
                    other => {
                        return Err(Error::Config(format!("unknown config key `{other}`")));
                    }
                }
            };
        }
        config_fields!(setter);
        Ok(())
    }

    /// Canonical `key = value` rendering used for hashing and diffing.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        macro_rules! render {
            ($(($field:ident, $ty:ty)),*) => {
                $(lines.push(format!("{} = {}", stringify!($field), self.$field));)*
            };
        }
        config_fields!(render);
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        format!("{digest:x}")
    }

    /// Names of fields whose values differ between two configurations.
    pub fn divergent_keys(&self, other: &TrainConfig) -> Vec<String> {
        let parse_map = |c: &TrainConfig| -> BTreeMap<String, String> {
            c.canonical()
                .lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        let (a, b) = (parse_map(self), parse_map(other));
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop % 16 != 0 {
            return Err(Error::Config(format!(
                "crop {} must be divisible by 16",
                self.crop
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold)
            || !(0.0..=1.0).contains(&self.dropout)
            || !(0.0..=1.0).contains(&self.alpha_teacher)
            || !(0.0..=1.0).contains(&self.alpha_mem)
        {
            return Err(Error::Config("rates and thresholds must lie in [0,1]".into()));
        }
        if self.lr <= 0.0 || self.tau_sort <= 0.0 || self.class_temp <= 0.0 {
            return Err(Error::Config("lr, tau_sort and class_temp must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_base: self.num_base,
            feat_dim: self.feat_dim,
            heads: self.heads,
            tau_sort: self.tau_sort,
            use_euler: self.use_euler,
        }
    }

    pub fn unknown_id(&self) -> usize {
        self.num_base
    }
}

/// Linear warmup to `lr`, then polynomial decay to zero over the
/// remaining steps (clamped at zero past `total_steps`).
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).clamp(0.0, 1.0);
    cfg.lr * (1.0 - t).powf(cfg.poly_power)
}

/// AdamW moment estimates, keyed like the parameter set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros = |p: &Params| -> BTreeMap<String, ArrayD<f64>> {
            p.iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect()
        };
        AdamState { m: zeros(params), v: zeros(params), t: 0 }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam update. `grads` may omit parameters
/// that did not participate in the step (their gradient is zero).
pub fn adamw_step(
    params: &mut Params,
    grads: &BTreeMap<String, ArrayD<f64>>,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    opt.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.t as i32);
    for (name, value) in params.iter_mut() {
        let zero = ArrayD::zeros(value.raw_dim());
        let g = grads.get(name).unwrap_or(&zero);
        if g.shape() != value.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
        }
        let lr_p = if model::is_decoder_param(name) { lr * cfg.decoder_lr_mult } else { lr };
        let m = opt.m.get_mut(name).expect("optimizer state aligned with params");
        let v = opt.v.get_mut(name).expect("optimizer state aligned with params");
        ndarray::Zip::from(value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *p -= lr_p * (update + cfg.weight_decay * *p);
            });
    }
    Ok(())
}

/// Everything that evolves during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub student: Params,
    pub teacher: Params,
    pub bank_source: MemoryBank,
    pub bank_target: MemoryBank,
    pub opt: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub consecutive_skips: u32,
}

pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    let mcfg = cfg.model_config();
    let student = model::init_params(&mcfg, cfg.seed)?;
    let teacher = student.clone();
    let classes = cfg.num_base + 1;
    Ok(TrainState {
        student,
        teacher,
        bank_source: MemoryBank::new(classes, cfg.feat_dim, cfg.alpha_mem),
        bank_target: MemoryBank::new(classes, cfg.feat_dim, cfg.alpha_mem),
        opt: AdamState::new(&model::init_params(&mcfg, cfg.seed)?),
        step: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
        consecutive_skips: 0,
    })
}

/// Per-step scalar diagnostics, one CSV row each.
#[derive(Clone, Debug, Default)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub seg_loss: f64,
    pub mix_loss: f64,
    pub match_loss: f64,
    pub edge_loss: f64,
    pub unknown_loss: f64,
    pub total_loss: f64,
    pub skipped: bool,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,lr,seg_loss,mix_loss,match_loss,edge_loss,unknown_loss,total_loss,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.step,
            self.lr,
            self.seg_loss,
            self.mix_loss,
            self.match_loss,
            self.edge_loss,
            self.unknown_loss,
            self.total_loss,
            self.skipped as u8
        )
    }
}

/// One cropped sample in model layout.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Array3<f64>,
    pub labels: Array2<i64>,
}

fn batch_images(samples: &[Sample]) -> ArrayD<f64> {
    let (c, h, w) = {
        let s = samples[0].image.shape();
        (s[0], s[1], s[2])
    };
    let mut out = ArrayD::zeros(IxDyn(&[samples.len(), c, h, w]));
    for (i, s) in samples.iter().enumerate() {
        out.slice_mut(ndarray::s![i, .., .., ..]).assign(&s.image);
    }
    out
}

fn flat_labels(samples: &[Sample]) -> Vec<i64> {
    samples
        .iter()
        .flat_map(|s| s.labels.iter().cloned())
        .collect()
}

/// Nearest-neighbor 4× label downsampling to the token grid (the center
/// pixel of each 4×4 cell).
fn token_labels(labels: &Array2<i64>) -> Vec<i64> {
    let (h, w) = (labels.shape()[0] / 4, labels.shape()[1] / 4);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(labels[[4 * y + 2, 4 * x + 2]]);
        }
    }
    out
}

fn feature_std(values: &ArrayD<f64>) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Assemble an on-tape node set from pixel samples and synthesized
/// features. Returns `None` when nothing was sampled.
fn build_node_set(
    tape: &Tape,
    flat_feats: Var,
    samples: &[ClassSample],
    synthesized: &[SynthesizedNode],
    domain: Domain,
) -> Option<NodeSet> {
    let d = tape.shape(flat_feats)[1];
    let mut parts: Vec<Var> = Vec::new();
    let mut meta: Vec<NodeMeta> = Vec::new();
    for s in samples {
        if !s.positive.is_empty() {
            parts.push(tape.gather_rows(flat_feats, &s.positive));
            meta.extend(s.positive.iter().map(|_| NodeMeta {
                class_id: s.class_id,
                domain,
                kind: NodeKind::Positive,
            }));
        }
        if !s.negative.is_empty() {
            parts.push(tape.gather_rows(flat_feats, &s.negative));
            meta.extend(s.negative.iter().map(|_| NodeMeta {
                class_id: s.class_id,
                domain,
                kind: NodeKind::Negative,
            }));
        }
        if !s.proto_pixels.is_empty() {
            let gathered = tape.gather_rows(flat_feats, &s.proto_pixels);
            let mean = tape.scale(
                tape.sum_axis_keep(gathered, 0),
                1.0 / s.proto_pixels.len() as f64,
            );
            let noise =
                tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, d]), s.noise.clone()).unwrap());
            parts.push(tape.add(mean, noise));
            meta.push(NodeMeta { class_id: s.class_id, domain, kind: NodeKind::Prototype });
        }
    }
    for s in synthesized {
        parts.push(tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, d]), s.feature.clone()).unwrap(),
        ));
        meta.push(NodeMeta { class_id: s.class_id, domain, kind: NodeKind::Synthesized });
    }
    if parts.is_empty() {
        return None;
    }
    let features = if parts.len() == 1 { parts[0] } else { tape.concat(0, &parts) };
    Some(NodeSet { features, meta })
}

fn memory_sets(
    flat_feats: &ArrayD<f64>,
    samples: &[ClassSample],
) -> Vec<(usize, Vec<Vec<f64>>)> {
    let d = flat_feats.shape()[1];
    samples
        .iter()
        .map(|s| {
            let feats: Vec<Vec<f64>> = s
                .positive
                .iter()
                .chain(&s.negative)
                .map(|&i| (0..d).map(|c| flat_feats[[i, c]]).collect())
                .collect();
            (s.class_id, feats)
        })
        .filter(|(_, f)| !f.is_empty())
        .collect()
}

/// Everything the graph matching adapter produces for one step.
pub struct GraphArtifacts {
    pub a: Var,
    pub labels: ArrayD<f64>,
    pub xi_s: Var,
    pub xi_t: Var,
    pub src_set: NodeSet,
    pub tgt_set: NodeSet,
    /// classes that could not be synthesized because a bank was empty
    pub skipped_classes: usize,
}

/// Sample nodes on both domains, complete missing classes from the memory
/// banks, run graph self-attention over the joint set, and produce the
/// Sinkhorn-normalized soft matching with its supervision labels.
///
/// In training mode the memory banks are updated and edge dropout is
/// active; evaluation mode leaves both untouched.
#[allow(clippy::too_many_arguments)]
pub fn build_graph(
    tape: &Tape,
    cfg: &TrainConfig,
    bound: &BoundParams,
    feats_s: Var,
    src_labels: &[i64],
    feats_t: Var,
    tgt_labels: &[i64],
    logits_s: &ArrayD<f64>,
    logits_t: &ArrayD<f64>,
    bank_source: &mut MemoryBank,
    bank_target: &mut MemoryBank,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Option<GraphArtifacts>> {
    let unknown = cfg.unknown_id();
    let expected: Vec<usize> = (0..=cfg.num_base).collect();

    let mut domain_sets: Vec<NodeSet> = Vec::new();
    for (feats, labels, logits, domain) in [
        (feats_s, src_labels, logits_s, Domain::Source),
        (feats_t, tgt_labels, logits_t, Domain::Target),
    ] {
        let values = tape.value(feats);
        let (p, h) = graph::pixel_confidence_entropy(logits)?;
        let noise_std = cfg.noise_scale * feature_std(&values);
        let mut samples = graph::sample_base_nodes(
            &values,
            labels,
            &p,
            &h,
            cfg.num_base,
            cfg.k_nearest,
            noise_std,
            rng,
        );
        samples.push(graph::sample_novel_nodes(
            &values,
            &p,
            &h,
            unknown,
            cfg.k_nearest,
            noise_std,
            rng,
        ));
        let (bank_self, bank_other) = match domain {
            Domain::Source => (&mut *bank_source, &*bank_target),
            Domain::Target => (&mut *bank_target, &*bank_source),
        };
        if training {
            graph::update_memory(bank_self, &memory_sets(&values, &samples), cfg.alpha_mem)?;
        }
        // only classes that actually materialize a node count as present
        let present: Vec<usize> = samples
            .iter()
            .filter(|s| {
                !s.positive.is_empty() || !s.negative.is_empty() || !s.proto_pixels.is_empty()
            })
            .map(|s| s.class_id)
            .collect();
        let (synth, _skipped) =
            graph::complete_missing_classes(&present, &expected, bank_self, bank_other, rng);
        match build_node_set(tape, feats, &samples, &synth, domain) {
            Some(set) => domain_sets.push(set),
            None => return Ok(None),
        }
    }
    let tgt_set = domain_sets.pop().unwrap();
    let src_set = domain_sets.pop().unwrap();
    let skipped_classes = (0..=cfg.num_base)
        .filter(|c| {
            !src_set.classes_present().contains(c) || !tgt_set.classes_present().contains(c)
        })
        .count();

    let weights = crate::euler::AttentionWeights {
        w_q: bound.var("graph.wq"),
        w_k: bound.var("graph.wk"),
        w_v: bound.var("graph.wv"),
    };
    let joint = tape.concat(0, &[src_set.features, tgt_set.features]);
    let dropout = if training { cfg.dropout } else { 0.0 };
    let (updated, _) =
        graph::graph_self_attention(tape, joint, &weights, 1, dropout, Some(rng))?;
    let n_s = src_set.len();
    let n_t = tgt_set.len();
    let v_s = tape.gather_rows(updated, &(0..n_s).collect::<Vec<_>>());
    let v_t = tape.gather_rows(updated, &(n_s..n_s + n_t).collect::<Vec<_>>());
    let (_, xi_s) = graph::graph_self_attention(tape, v_s, &weights, 1, dropout, Some(rng))?;
    let (_, xi_t) = graph::graph_self_attention(tape, v_t, &weights, 1, dropout, Some(rng))?;

    let raw = graph::affinity(tape, v_s, v_t, bound.var("graph.wphi"))?;
    let a = graph::sinkhorn(tape, raw, cfg.sinkhorn_iters)?;
    let classes_s: Vec<usize> = src_set.meta.iter().map(|m| m.class_id).collect();
    let classes_t: Vec<usize> = tgt_set.meta.iter().map(|m| m.class_id).collect();
    let labels = graph::matching_labels(&classes_s, &classes_t, unknown);

    let src_set = NodeSet { features: v_s, meta: src_set.meta };
    let tgt_set = NodeSet { features: v_t, meta: tgt_set.meta };
    Ok(Some(GraphArtifacts { a, labels, xi_s, xi_t, src_set, tgt_set, skipped_classes }))
}

fn forward_batch(
    tape: &Tape,
    bound: &BoundParams,
    mcfg: &ModelConfig,
    images: ArrayD<f64>,
) -> Result<(Var, Var)> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let tokens = model::encode_decode(tape, bound, mcfg, tape.leaf(images))?;
    let logits = model::classify(tape, bound, tokens, h / 4, w / 4)?;
    Ok((tokens, logits))
}

const MAX_CONSECUTIVE_SKIPS: u32 = 10;

/// One adaptation step over a source batch and a target batch. Non-finite
/// totals reject the step and leave the state untouched; more than
/// [`MAX_CONSECUTIVE_SKIPS`] rejections in a row abort the run.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    src: &[Sample],
    tgt: &[Sample],
) -> Result<StepMetrics> {
    if src.is_empty() || src.len() != tgt.len() {
        return Err(Error::InvalidArgument(
            "source and target batches must be nonempty and equally sized".into(),
        ));
    }
    let mcfg = cfg.model_config();
    let lr = lr_schedule(cfg, state.step);
    // snapshot the pieces a rejected step must restore
    let rng_snapshot = state.rng.clone();
    let bank_s_snapshot = state.bank_source.clone();
    let bank_t_snapshot = state.bank_target.clone();

    let (b, h, w) = (src.len(), src[0].image.shape()[1], src[0].image.shape()[2]);

    // phase 1: supervised source loss
    let tape = Tape::new();
    let bound = state.student.bind(&tape);
    let (src_tokens, src_logits) = forward_batch(&tape, &bound, &mcfg, batch_images(src))?;
    let seg_loss = model::segmentation_loss(&tape, src_logits, &flat_labels(src))?;

    // phase 2: teacher pseudo-labels on the target crops
    let teacher_tape = Tape::new();
    let teacher_bound = state.teacher.bind(&teacher_tape);
    let (_, t_logits) =
        forward_batch(&teacher_tape, &teacher_bound, &mcfg, batch_images(tgt))?;
    let t_vals = teacher_tape.value(t_logits);
    let mut pseudo: Vec<model::PseudoLabel> = Vec::with_capacity(b);
    for i in 0..b {
        let per = t_vals.slice(ndarray::s![i, .., .., ..]).to_owned().into_dyn();
        pseudo.push(model::pseudo_label(&per, cfg.num_base, cfg.pseudo_threshold)?);
    }

    // phase 3: class-mix consistency, weighted by pseudo-label confidence
    let mut mixed: Vec<Sample> = Vec::with_capacity(b);
    for i in 0..b {
        let mix_seed = state.rng.next_u64();
        let m = model::dacs_mix(
            &src[i].image,
            &src[i].labels,
            &tgt[i].image,
            &pseudo[i].labels,
            mix_seed,
        )?;
        mixed.push(Sample { image: m.image, labels: m.labels });
    }
    let (_, mix_logits) = forward_batch(&tape, &bound, &mcfg, batch_images(&mixed))?;
    let mix_rows = tape.reshape(
        tape.permute(mix_logits, &[0, 2, 3, 1]),
        &[b * h * w, cfg.num_base + 1],
    );
    let mut mix_loss = tape.scalar(0.0);
    for i in 0..b {
        let rows = tape.gather_rows(mix_rows, &(i * h * w..(i + 1) * h * w).collect::<Vec<_>>());
        let targets: Vec<i64> = mixed[i].labels.iter().cloned().collect();
        let ce = tape.cross_entropy(rows, &targets);
        mix_loss = tape.add(mix_loss, tape.scale(ce, pseudo[i].weight / b as f64));
    }

    // reject early when the dense losses are already non-finite — the
    // graph sampler cannot work with NaN confidence maps
    let seg_v = tape.scalar_value(seg_loss);
    let mix_v = tape.scalar_value(mix_loss);
    if !seg_v.is_finite() || !mix_v.is_finite() {
        state.rng = rng_snapshot;
        state.bank_source = bank_s_snapshot;
        state.bank_target = bank_t_snapshot;
        state.consecutive_skips += 1;
        state.step += 1;
        if state.consecutive_skips > MAX_CONSECUTIVE_SKIPS {
            return Err(Error::NonFinite(format!(
                "aborting: {} consecutive non-finite training steps",
                state.consecutive_skips
            )));
        }
        return Ok(StepMetrics {
            step: state.step - 1,
            lr,
            seg_loss: seg_v,
            mix_loss: mix_v,
            total_loss: f64::NAN,
            skipped: true,
            ..StepMetrics::default()
        });
    }

    // phase 4: graph matching between source and target node sets
    let (tgt_tokens, _) = forward_batch(&tape, &bound, &mcfg, batch_images(tgt))?;
    let d = cfg.feat_dim;
    let n_tok = (h / 4) * (w / 4);
    let flat_s = tape.reshape(src_tokens, &[b * n_tok, d]);
    let flat_t = tape.reshape(tgt_tokens, &[b * n_tok, d]);
    let src_tok_labels: Vec<i64> = src.iter().flat_map(|s| token_labels(&s.labels)).collect();
    let tgt_tok_labels: Vec<i64> = pseudo.iter().flat_map(|p| token_labels(&p.labels)).collect();
    let logits_s_tok = {
        let lg = model::classify_tokens(&tape, &bound, src_tokens);
        let v = tape.value(tape.reshape(lg, &[b * n_tok, cfg.num_base + 1]));
        (*v).clone()
    };
    let logits_t_tok = {
        let lg = model::classify_tokens(&tape, &bound, tgt_tokens);
        let v = tape.value(tape.reshape(lg, &[b * n_tok, cfg.num_base + 1]));
        (*v).clone()
    };
    let artifacts = build_graph(
        &tape,
        cfg,
        &bound,
        flat_s,
        &src_tok_labels,
        flat_t,
        &tgt_tok_labels,
        &logits_s_tok,
        &logits_t_tok,
        &mut state.bank_source,
        &mut state.bank_target,
        &mut state.rng,
        true,
    )?;

    let mut metrics = StepMetrics {
        step: state.step,
        lr,
        seg_loss: tape.scalar_value(seg_loss),
        mix_loss: tape.scalar_value(mix_loss),
        ..StepMetrics::default()
    };
    let mut total = tape.add(seg_loss, mix_loss);
    if let Some(art) = &artifacts {
        let breakdown = graph::gma_loss(
            &tape,
            art.a,
            &art.labels,
            art.xi_s,
            art.xi_t,
            &art.src_set,
            &art.tgt_set,
            cfg.unknown_id(),
            cfg.beta,
        )?;
        metrics.match_loss = breakdown.matching;
        metrics.edge_loss = breakdown.edge;
        metrics.unknown_loss = breakdown.unknown;
        total = tape.add(total, tape.scale(breakdown.total, cfg.gamma));
    }
    metrics.total_loss = tape.scalar_value(total);

    // phase 5: reject non-finite steps, otherwise update everything
    if !metrics.total_loss.is_finite() {
        state.rng = rng_snapshot;
        state.bank_source = bank_s_snapshot;
        state.bank_target = bank_t_snapshot;
        state.consecutive_skips += 1;
        metrics.skipped = true;
        state.step += 1;
        if state.consecutive_skips > MAX_CONSECUTIVE_SKIPS {
            return Err(Error::NonFinite(format!(
                "aborting: {} consecutive non-finite training steps",
                state.consecutive_skips
            )));
        }
        return Ok(metrics);
    }
    state.consecutive_skips = 0;
    let grads = tape.backward(total);
    let grad_map: BTreeMap<String, ArrayD<f64>> = bound
        .iter()
        .filter_map(|(name, &var)| grads.wrt(var).map(|g| (name.clone(), g.clone())))
        .collect();
    adamw_step(&mut state.student, &grad_map, &mut state.opt, cfg, lr)?;
    model::teacher_update(&mut state.teacher, &state.student, cfg.alpha_teacher)?;
    state.step += 1;
    Ok(metrics)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: TrainConfig,
    config_hash: String,
    state: TrainState,
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        state: state.clone(),
    };
    let bytes = bincode::serialize(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load a checkpoint, verifying the format version and that its stored
/// configuration matches `expected` (divergent keys are listed).
pub fn load_checkpoint(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint =
        bincode::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.config_hash != expected.hash() {
        let keys = ckpt.config.divergent_keys(expected);
        return Err(Error::Checkpoint(format!(
            "configuration mismatch on keys: {}",
            keys.join(", ")
        )));
    }
    Ok(ckpt.state)
}

/// Load the model configuration stored in a checkpoint without requiring
/// the full expected config.
pub fn load_checkpoint_config(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint =
        bincode::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok((ckpt.config, ckpt.state))
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut draw = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

pub fn hwc_to_chw(img: &crate::synthetic::ImageTensor) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.data[[y, x, c]])
}

fn class_pixel_counts(labels: &Array2<i64>, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &v in labels.iter() {
        if v >= 0 && (v as usize) < num_classes {
            counts[v as usize] += 1;
        }
    }
    counts
}

/// Graph matching artifacts evaluated once, as plain arrays.
pub struct GraphSnapshot {
    /// Sinkhorn-normalized soft matching, `n_s` rows by `n_t` columns.
    pub a: ArrayD<f64>,
    /// matching supervision labels, same shape as `a`
    pub m: ArrayD<f64>,
    /// source edge (attention) matrix, `n_s` by `n_s`
    pub xi_s: ArrayD<f64>,
    /// target edge (attention) matrix, `n_t` by `n_t`
    pub xi_t: ArrayD<f64>,
    pub src_meta: Vec<graph::NodeMeta>,
    pub tgt_meta: Vec<graph::NodeMeta>,
}

/// Run a single evaluation-mode forward over one source/target batch and
/// return the graph matching artifacts. Memory banks, the optimizer, and
/// the step counter are left untouched; `seed` drives only node sampling.
/// Returns `None` when a domain yields no usable nodes.
pub fn graph_snapshot(
    state: &TrainState,
    cfg: &TrainConfig,
    src: &[Sample],
    tgt: &[Sample],
    seed: u64,
) -> Result<Option<GraphSnapshot>> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidArgument(
            "source and target batches must be nonempty".into(),
        ));
    }
    let mcfg = cfg.model_config();
    let (h, w) = (src[0].image.shape()[1], src[0].image.shape()[2]);
    let tape = Tape::new();
    let bound = state.student.bind(&tape);
    let (src_tokens, _) = forward_batch(&tape, &bound, &mcfg, batch_images(src))?;
    let (tgt_tokens, _) = forward_batch(&tape, &bound, &mcfg, batch_images(tgt))?;

    // teacher pseudo-labels stand in for target annotations, as in training
    let teacher_tape = Tape::new();
    let teacher_bound = state.teacher.bind(&teacher_tape);
    let (_, t_logits) = forward_batch(&teacher_tape, &teacher_bound, &mcfg, batch_images(tgt))?;
    let t_vals = teacher_tape.value(t_logits);
    let mut tgt_tok_labels: Vec<i64> = Vec::new();
    for i in 0..tgt.len() {
        let per = t_vals.slice(ndarray::s![i, .., .., ..]).to_owned().into_dyn();
        let pl = model::pseudo_label(&per, cfg.num_base, cfg.pseudo_threshold)?;
        tgt_tok_labels.extend(token_labels(&pl.labels));
    }

    let d = cfg.feat_dim;
    let n_tok = (h / 4) * (w / 4);
    let flat_s = tape.reshape(src_tokens, &[src.len() * n_tok, d]);
    let flat_t = tape.reshape(tgt_tokens, &[tgt.len() * n_tok, d]);
    let src_tok_labels: Vec<i64> = src.iter().flat_map(|s| token_labels(&s.labels)).collect();
    let logits_s_tok = {
        let lg = model::classify_tokens(&tape, &bound, src_tokens);
        let v = tape.value(tape.reshape(lg, &[src.len() * n_tok, cfg.num_base + 1]));
        (*v).clone()
    };
    let logits_t_tok = {
        let lg = model::classify_tokens(&tape, &bound, tgt_tokens);
        let v = tape.value(tape.reshape(lg, &[tgt.len() * n_tok, cfg.num_base + 1]));
        (*v).clone()
    };
    let mut bank_s = state.bank_source.clone();
    let mut bank_t = state.bank_target.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let art = build_graph(
        &tape,
        cfg,
        &bound,
        flat_s,
        &src_tok_labels,
        flat_t,
        &tgt_tok_labels,
        &logits_s_tok,
        &logits_t_tok,
        &mut bank_s,
        &mut bank_t,
        &mut rng,
        false,
    )?;
    Ok(art.map(|art| GraphSnapshot {
        a: (*tape.value(art.a)).clone(),
        m: art.labels.clone(),
        xi_s: (*tape.value(art.xi_s)).clone(),
        xi_t: (*tape.value(art.xi_t)).clone(),
        src_meta: art.src_set.meta,
        tgt_meta: art.tgt_set.meta,
    }))
}

/// Full training driver: rare-class-weighted source sampling, uniform
/// target sampling, random crops, per-step CSV metrics, and a final
/// checkpoint under `out_dir`.
pub fn run_training(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    out_dir: &Path,
    mut state: TrainState,
) -> Result<TrainState> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let fresh = state.step == 0;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    if fresh {
        writeln!(log, "{}", StepMetrics::CSV_HEADER)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }

    // source image weights from rare-class statistics at full resolution
    let mut per_image = Vec::with_capacity(source.len());
    let mut image_cache: Vec<(Array3<f64>, Array2<i64>)> = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let (img, lbl) = source.get(i)?;
        per_image.push(class_pixel_counts(&lbl.data, cfg.num_base + 1));
        image_cache.push((hwc_to_chw(&img), lbl.data));
    }
    let (fh, fw) = (image_cache[0].1.shape()[0], image_cache[0].1.shape()[1]);
    let min_pixels =
        ((cfg.min_pixels as f64) * (fh * fw) as f64 / (512.0 * 512.0)).round().max(1.0) as usize;
    let weights = model::rare_class_weights(&per_image, cfg.class_temp, min_pixels)?;

    let mut target_cache: Vec<(Array3<f64>, Array2<i64>)> = Vec::with_capacity(target.len());
    for i in 0..target.len() {
        let (img, lbl) = target.get(i)?;
        target_cache.push((hwc_to_chw(&img), lbl.data));
    }

    while state.step < cfg.total_steps {
        let mut src_batch = Vec::with_capacity(cfg.batch_size);
        let mut tgt_batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let si = weighted_index(&weights, &mut state.rng);
            let crop_seed = state.rng.next_u64();
            src_batch.push(crop_sample(&image_cache[si], cfg.crop, crop_seed)?);
            let ti = state.rng.random_range(0..target_cache.len());
            let crop_seed = state.rng.next_u64();
            tgt_batch.push(crop_sample(&target_cache[ti], cfg.crop, crop_seed)?);
        }
        let metrics = train_step(&mut state, cfg, &src_batch, &tgt_batch)?;
        writeln!(log, "{}", metrics.csv_row())
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }
    save_checkpoint(&out_dir.join("checkpoint.bin"), &state, cfg)?;
    Ok(state)
}

/// Seeded random crop of a full-resolution (CHW image, label) pair.
pub fn crop_sample(full: &(Array3<f64>, Array2<i64>), crop: usize, seed: u64) -> Result<Sample> {
    let (img, lbl) = full;
    let (h, w) = (lbl.shape()[0], lbl.shape()[1]);
    if crop > h || crop > w {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} larger than image {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=h - crop);
    let ox = rng.random_range(0..=w - crop);
    Ok(Sample {
        image: img.slice(ndarray::s![.., oy..oy + crop, ox..ox + crop]).to_owned(),
        labels: lbl.slice(ndarray::s![oy..oy + crop, ox..ox + crop]).to_owned(),
    })
}
