//! Segmentation evaluation: per-class intersection-over-union and its
//! mean, computed from a pixel confusion matrix.
//!
//! Predictions are the argmax over the quarter-resolution logits (ties
//! break toward the lowest class id); reference labels are the
//! nearest-downsampled full-resolution maps. A class absent from both
//! the predictions and the labels contributes nothing to the mean —
//! otherwise every easy scene would hand out free perfect scores for
//! classes it never shows.

use crate::data::{downsample_labels, DataSpec, Sample};
use crate::model::SegModel;
use crate::tensor::Tensor;
use crate::{autodiff::Tape, Error, Result};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub num_classes: usize,
    /// Row-major `[label][prediction]` pixel counts.
    pub confusion: Vec<u64>,
    /// `None` = class absent from both sides (excluded from the mean).
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("iou_class_{c}={v:.6}\n")),
                None => out.push_str(&format!("iou_class_{c}=absent\n")),
            }
        }
        out.push_str(&format!("miou={:.6}\n", self.miou));
        out
    }
}

/// Class id per pixel from `[H, W, K]` logits; the first maximum wins.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u32>> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::dim(
            "argmax_classes",
            format!("expected [H, W, K] logits, got {shape:?}"),
        ));
    }
    let k = shape[2];
    let mut preds = Vec::with_capacity(shape[0] * shape[1]);
    for scores in logits.data().chunks(k) {
        let mut best = 0usize;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        preds.push(best as u32);
    }
    Ok(preds)
}

pub fn confusion_matrix(labels: &[u32], preds: &[u32], k: usize) -> Result<Vec<u64>> {
    if labels.len() != preds.len() {
        return Err(Error::dim(
            "confusion_matrix",
            format!("{} labels vs {} predictions", labels.len(), preds.len()),
        ));
    }
    let mut m = vec![0u64; k * k];
    for (&l, &p) in labels.iter().zip(preds) {
        if l as usize >= k || p as usize >= k {
            return Err(Error::Usage(format!(
                "class id out of range: label {l}, prediction {p}, num_classes {k}"
            )));
        }
        m[l as usize * k + p as usize] += 1;
    }
    Ok(m)
}

/// Per-class IoU = TP / (TP + FP + FN) and the mean over present classes.
pub fn iou_from_confusion(confusion: &[u64], k: usize) -> (Vec<Option<f64>>, f64) {
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut included = 0usize;
    for c in 0..k {
        let tp = confusion[c * k + c];
        let fn_: u64 = (0..k).map(|p| confusion[c * k + p]).sum::<u64>() - tp;
        let fp: u64 = (0..k).map(|l| confusion[l * k + c]).sum::<u64>() - tp;
        if tp + fp + fn_ == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            per_class.push(Some(iou));
            sum += iou;
            included += 1;
        }
    }
    let miou = if included == 0 { 0.0 } else { sum / included as f64 };
    (per_class, miou)
}

/// Evaluate a model over a set of samples, accumulating one confusion
/// matrix (so the result is independent of sample order).
pub fn evaluate(model: &SegModel<Tensor>, spec: &DataSpec, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".to_string()));
    }
    let config = &model.config;
    if config.num_classes != spec.num_classes {
        return Err(Error::Usage(format!(
            "model predicts {} classes but the dataset has {}",
            config.num_classes, spec.num_classes
        )));
    }
    if config.img_h != spec.img_h || config.img_w != spec.img_w {
        return Err(Error::Usage(format!(
            "model expects {}x{} images but the dataset is {}x{}",
            config.img_h, config.img_w, spec.img_h, spec.img_w
        )));
    }
    let k = config.num_classes;
    let (out_h, out_w) = config.stage_size(1);
    let mut confusion = vec![0u64; k * k];
    for sample in samples {
        let tape = Tape::new();
        let logits =
            model.bind(&tape).forward(tape.leaf(sample.image.clone()))?.value();
        let preds = argmax_classes(&logits)?;
        let labels =
            downsample_labels(&sample.labels, spec.img_h, spec.img_w, out_h, out_w)?;
        for (a, b) in confusion.iter_mut().zip(confusion_matrix(&labels, &preds, k)?) {
            *a += b;
        }
    }
    let (per_class_iou, miou) = iou_from_confusion(&confusion, k);
    Ok(EvalReport { num_classes: k, confusion, per_class_iou, miou })
}
