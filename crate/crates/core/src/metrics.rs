//! Open-set evaluation: confusion accumulation, per-class IoU, the
//! Common/Private split and their harmonic mean, plus full-resolution
//! dataset evaluation and report serialization.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Params};
use crate::synthetic::{Dataset, IGNORE_ID};
use crate::tape::Tape;

/// Square confusion matrix over the `C_b + 1` evaluation classes;
/// `counts[[gt, pred]]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_base: usize,
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_base: usize) -> Self {
        let c = num_base + 1;
        ConfusionMatrix { num_base, counts: Array2::zeros((c, c)) }
    }

    pub fn num_classes(&self) -> usize {
        self.num_base + 1
    }

    /// Add one prediction/ground-truth pair; ignore pixels are excluded.
    pub fn accumulate(&mut self, pred: &Array2<i64>, gt: &Array2<i64>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} sizes differ",
                pred.shape(),
                gt.shape()
            )));
        }
        let c = self.num_classes() as i64;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_ID {
                continue;
            }
            if !(0..c).contains(&g) || !(0..c).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "class id outside evaluation label space: pred {p}, gt {g}"
                )));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }
}

/// Harmonic mean of the Common (base-class) and Private (unknown-class)
/// scores; zero when either side is zero.
pub fn h_score(common: f64, private: f64) -> f64 {
    if common <= 0.0 || private <= 0.0 {
        0.0
    } else {
        2.0 * common * private / (common + private)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// IoU per class in percent, keyed by class name in label-id order;
    /// `None` when the class never appears in either prediction or
    /// ground truth.
    pub per_class_iou: IndexMap<String, Option<f64>>,
    /// Mean base-class IoU (percent) over classes with a defined IoU.
    pub common: f64,
    /// Unknown-class IoU in percent (0 when undefined).
    pub private: f64,
    pub h_score: f64,
    pub pixels: u64,
    /// Training step the evaluated parameters were taken at.
    pub step: u64,
    /// Hash of the training configuration that produced the parameters.
    pub config_hash: String,
}

/// Reduce a confusion matrix to the open-set metrics.
pub fn compute_metrics(cm: &ConfusionMatrix, class_names: &[String]) -> Result<MetricsReport> {
    let c = cm.num_classes();
    if class_names.len() != c {
        return Err(Error::Shape(format!(
            "expected {c} class names, got {}",
            class_names.len()
        )));
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[[k, k]];
        let fp: u64 = (0..c).filter(|&g| g != k).map(|g| cm.counts[[g, k]]).sum();
        let fnegs: u64 = (0..c).filter(|&p| p != k).map(|p| cm.counts[[k, p]]).sum();
        let denom = tp + fp + fnegs;
        per_class.push(if denom == 0 {
            None
        } else {
            Some(100.0 * tp as f64 / denom as f64)
        });
    }
    let base: Vec<f64> = per_class[..cm.num_base].iter().flatten().cloned().collect();
    let common = if base.is_empty() {
        0.0
    } else {
        base.iter().sum::<f64>() / base.len() as f64
    };
    let private = per_class[cm.num_base].unwrap_or(0.0);
    Ok(MetricsReport {
        per_class_iou: class_names.iter().cloned().zip(per_class).collect(),
        common,
        private,
        h_score: h_score(common, private),
        pixels: cm.counts.iter().sum(),
        step: 0,
        config_hash: String::new(),
    })
}

/// Deterministic full-resolution prediction: per-pixel argmax over all
/// `C_b + 1` channels.
pub fn predict(params: &Params, cfg: &ModelConfig, image: &ArrayD<f64>) -> Result<Array2<i64>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected (3,H,W) image, got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let mut batch = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
    batch.slice_mut(ndarray::s![0, .., .., ..]).assign(image);
    let tokens = model::encode_decode(&tape, &bound, cfg, tape.leaf(batch))?;
    let logits = model::classify(&tape, &bound, tokens, h / 4, w / 4)?;
    let lv = tape.value(logits);
    let c = cfg.num_classes();
    let mut out = Array2::<i64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = lv[[0, ch, y, x]];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[[y, x]] = best as i64;
        }
    }
    Ok(out)
}

/// Evaluate a parameter set over every sample of a dataset split.
pub fn evaluate(params: &Params, cfg: &ModelConfig, dataset: &Dataset) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(cfg.num_base);
    for i in 0..dataset.len() {
        let (img, lbl) = dataset.get(i)?;
        // HWC -> CHW
        let (h, w) = (img.height(), img.width());
        let mut chw = ArrayD::zeros(IxDyn(&[3, h, w]));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    chw[[ch, y, x]] = img.data[[y, x, ch]];
                }
            }
        }
        let pred = predict(params, cfg, &chw)?;
        cm.accumulate(&pred, &lbl.data)?;
    }
    compute_metrics(&cm, &dataset.meta.class_names)
}

/// Persist a report as JSON plus a per-class CSV next to it.
pub fn write_report(report: &MetricsReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let mut csv = String::from("class,iou_percent\n");
    for (name, iou) in &report.per_class_iou {
        match iou {
            Some(v) => csv.push_str(&format!("{name},{v:.4}\n")),
            None => csv.push_str(&format!("{name},\n")),
        }
    }
    csv.push_str(&format!("common,{:.4}\n", report.common));
    csv.push_str(&format!("private,{:.4}\n", report.private));
    csv.push_str(&format!("h_score,{:.4}\n", report.h_score));
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(())
}
