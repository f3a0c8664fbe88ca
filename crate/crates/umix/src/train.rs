//! Training loop: Adam on cross-entropy, one sample per step.
//!
//! Everything is a pure function of `(config, dataset spec, seed,
//! options)`: parameter init, the per-epoch sample order, and the data
//! itself all come from derived RNG streams, and evaluation consumes no
//! randomness. Resuming from a saved [`TrainState`] at an epoch boundary
//! therefore continues bit-identically with an uninterrupted run — the
//! property the resume tests pin down.
//!
//! Numerical failure is a first-class outcome, not a panic: parameters
//! are scanned for non-finite values before the first epoch and after
//! every optimizer step (naming the parameter), and a non-finite loss is
//! reported with the first offending tape node's layer label. Both paths
//! surface as [`Error::Numeric`], which the CLI maps to exit code 2.

use crate::autodiff::Tape;
use crate::checkpoint::{model_from_checkpoint, model_to_checkpoint, Checkpoint};
use crate::data::{downsample_labels, DataSpec, Sample, SyntheticDataset};
use crate::eval::{argmax_classes, confusion_matrix, evaluate, iou_from_confusion};
use crate::model::{ModelConfig, SegModel};
use crate::rng::shuffled_indices;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Fraction of the dataset held out as the validation split (the tail of
/// the sample list, so the split is independent of shuffling).
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// Constant learning rate.
    Fixed,
    /// Linear decay to zero over the planned step budget (polynomial
    /// schedule with power 1).
    Poly,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Total epoch budget, counted from epoch 0 even when resuming.
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Stop after the first epoch whose monitored mIoU (validation when a
    /// validation split exists, else training) reaches this value.
    pub target_miou: Option<f64>,
}

impl TrainOptions {
    pub fn new(epochs: usize, lr: f64) -> TrainOptions {
        TrainOptions { epochs, lr, schedule: LrSchedule::Fixed, target_miou: None }
    }
}

/// Model plus everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SegModel<Tensor>,
    /// First/second Adam moments, aligned with the parameter walk.
    pub opt_m: Vec<Tensor>,
    pub opt_v: Vec<Tensor>,
    /// Optimizer steps taken (samples seen).
    pub step: u64,
    /// Epochs fully completed.
    pub epoch: u64,
    /// Training seed; drives the per-epoch shuffle stream.
    pub seed: u64,
}

impl TrainState {
    pub fn fresh(config: &ModelConfig, seed: u64) -> Result<TrainState> {
        let model = SegModel::init(config, seed)?;
        let mut opt_m = Vec::new();
        model.visit(&mut |_, t| opt_m.push(Tensor::zeros(t.shape())));
        let opt_v = opt_m.clone();
        Ok(TrainState { model, opt_m, opt_v, step: 0, epoch: 0, seed })
    }

    /// Serialize as a checkpoint: parameters first, then `opt.*` tensors.
    ///
    /// `step`, `epoch` and `seed` ride along as f64 *bit patterns* (the
    /// checkpoint payload is bit-exact, so the u64s survive unharmed).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut extra = Vec::new();
        let mut names = Vec::new();
        self.model.visit(&mut |name, _| names.push(name.to_string()));
        for (name, m) in names.iter().zip(&self.opt_m) {
            extra.push((format!("opt.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.opt_v) {
            extra.push((format!("opt.v.{name}"), v.clone()));
        }
        extra.push(("opt.step".to_string(), Tensor::scalar(f64::from_bits(self.step))));
        extra.push(("opt.epoch".to_string(), Tensor::scalar(f64::from_bits(self.epoch))));
        extra.push(("opt.seed".to_string(), Tensor::scalar(f64::from_bits(self.seed))));
        model_to_checkpoint(&self.model, &extra)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
        let (model, extra) = model_from_checkpoint(ckpt)?;
        let find = |name: &str| -> Result<&Tensor> {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))
        };
        let scalar_bits = |name: &str| -> Result<u64> {
            Ok(find(name)?.data()[0].to_bits())
        };
        let mut opt_m = Vec::new();
        let mut opt_v = Vec::new();
        let mut missing = None;
        model.visit(&mut |name, t| {
            if missing.is_some() {
                return;
            }
            for (prefix, out) in [("opt.m.", &mut opt_m), ("opt.v.", &mut opt_v)] {
                match extra.iter().find(|(n, _)| *n == format!("{prefix}{name}")) {
                    Some((_, stored)) if stored.shape() == t.shape() => out.push(stored.clone()),
                    _ => missing = Some(format!("{prefix}{name}")),
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::Format(format!(
                "checkpoint has no optimizer tensor '{name}' (or its shape is wrong)"
            )));
        }
        Ok(TrainState {
            model,
            opt_m,
            opt_v,
            step: scalar_bits("opt.step")?,
            epoch: scalar_bits("opt.epoch")?,
            seed: scalar_bits("opt.seed")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    /// 0-based epoch index.
    pub epoch: u64,
    pub mean_loss: f64,
    /// Running training mIoU, accumulated from each step's logits.
    pub train_miou: f64,
    /// Validation mIoU; absent when the dataset is too small to split.
    pub val_miou: Option<f64>,
    /// Learning rate used for the epoch's first step.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn render(&self) -> String {
        let val = match self.val_miou {
            Some(v) => format!("{v:.6}"),
            None => "none".to_string(),
        };
        format!(
            "epoch={} loss={:.6} train_miou={:.6} val_miou={} lr={:.8}",
            self.epoch, self.mean_loss, self.train_miou, val, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochMetrics>,
    /// Set when `target_miou` was requested and reached.
    pub reached_target: bool,
}

impl TrainOutcome {
    /// The full metrics file: header, one line per epoch, summary.
    pub fn render_metrics(&self, spec: &DataSpec, options: &TrainOptions) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed={}\n", self.state.seed));
        out.push_str(&format!("dataset_seed={}\n", spec.seed));
        out.push_str(&format!("samples={}\n", spec.n));
        out.push_str(&format!("epoch_budget={}\n", options.epochs));
        out.push_str(&format!("lr={:.8}\n", options.lr));
        for m in &self.log {
            out.push_str(&m.render());
            out.push('\n');
        }
        if let Some(last) = self.log.last() {
            out.push_str(&format!("final_train_miou={:.6}\n", last.train_miou));
            if let Some(v) = last.val_miou {
                out.push_str(&format!("final_val_miou={v:.6}\n"));
            }
        }
        out.push_str(&format!("reached_target={}\n", self.reached_target));
        out.push_str(&format!("param_hash={:#018x}\n", param_hash(&self.state.model)));
        out
    }
}

/// FNV-1a over every parameter's f64 bits in walk order; pins down "these
/// two models are (not) the same parameters" in one number.
pub fn param_hash(model: &SegModel<Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    model.visit(&mut |_, t| {
        for &v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    });
    h
}

/// Split off the validation tail. Datasets of fewer than 5 samples train
/// on everything and report no validation score.
pub fn split<'a>(samples: &'a [Sample]) -> (&'a [Sample], &'a [Sample]) {
    let val = ((samples.len() as f64) * VAL_FRACTION) as usize;
    if val == 0 {
        return (samples, &[]);
    }
    samples.split_at(samples.len() - val)
}

/// Train a freshly initialized model.
pub fn train(
    config: &ModelConfig,
    seed: u64,
    dataset: &SyntheticDataset,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    resume(TrainState::fresh(config, seed)?, dataset, options)
}

/// Continue training until the epoch budget (or the target) is reached.
pub fn resume(
    mut state: TrainState,
    dataset: &SyntheticDataset,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let config = state.model.config.clone();
    let spec = &dataset.spec;
    if config.num_classes != spec.num_classes
        || config.img_h != spec.img_h
        || config.img_w != spec.img_w
    {
        return Err(Error::Usage(format!(
            "model ({}x{}, {} classes) does not fit the dataset ({}x{}, {} classes)",
            config.img_h, config.img_w, config.num_classes, spec.img_h, spec.img_w,
            spec.num_classes
        )));
    }
    if dataset.samples.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".to_string()));
    }
    if !options.lr.is_finite() || options.lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be >= 0, got {}", options.lr)));
    }
    let (train_samples, val_samples) = split(&dataset.samples);
    let (out_h, out_w) = config.stage_size(1);
    let k = config.num_classes;
    let total_steps = (options.epochs * train_samples.len()) as u64;

    check_params_finite(&state.model, "before training")?;

    let mut log = Vec::new();
    let mut reached_target = false;
    while state.epoch < options.epochs as u64 && !reached_target {
        let order = shuffled_indices(train_samples.len(), state.seed, state.epoch);
        let mut loss_sum = 0.0;
        let mut confusion = vec![0u64; k * k];
        let mut epoch_lr = None;
        for idx in order {
            let lr = match options.schedule {
                LrSchedule::Fixed => options.lr,
                LrSchedule::Poly => {
                    options.lr * (1.0 - state.step as f64 / total_steps.max(1) as f64)
                }
            };
            epoch_lr.get_or_insert(lr);
            let sample = &train_samples[idx];
            let labels = downsample_labels(&sample.labels, spec.img_h, spec.img_w, out_h, out_w)?;

            let tape = Tape::new();
            let bound = state.model.bind(&tape);
            let logits = bound.forward(tape.leaf(sample.image.clone()))?;
            let flat = logits.reshape(&[out_h * out_w, k])?;
            let loss = flat.cross_entropy(&labels)?;
            let loss_value = loss.value().data()[0];
            if !loss_value.is_finite() {
                let at = tape
                    .first_non_finite()
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "loss (no tape node is non-finite)".to_string());
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {}: first occurrence in {at}",
                    state.step
                )));
            }
            loss_sum += loss_value;
            for (a, b) in confusion
                .iter_mut()
                .zip(confusion_matrix(&labels, &argmax_classes(&logits.value())?, k)?)
            {
                *a += b;
            }

            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(state.opt_m.len());
            bound.visit(&mut |name, var| {
                grads.push(var.grad().unwrap_or_else(|| {
                    // Every parameter feeds the loss; a missing gradient is
                    // a wiring bug, not a runtime condition.
                    panic!("parameter {name} received no gradient")
                }));
            });
            state.step += 1;
            adam_step(&mut state, &grads, lr);
            check_params_finite(&state.model, &format!("after step {}", state.step))?;
        }

        let (_, train_miou) = iou_from_confusion(&confusion, k);
        let val_miou = if val_samples.is_empty() {
            None
        } else {
            Some(evaluate(&state.model, spec, val_samples)?.miou)
        };
        state.epoch += 1;
        let metrics = EpochMetrics {
            epoch: state.epoch - 1,
            mean_loss: loss_sum / train_samples.len() as f64,
            train_miou,
            val_miou,
            lr: epoch_lr.unwrap_or(options.lr),
        };
        log.push(metrics);
        if let Some(target) = options.target_miou {
            let monitored = val_miou.unwrap_or(train_miou);
            if monitored >= target {
                reached_target = true;
            }
        }
    }
    Ok(TrainOutcome { state, log, reached_target })
}

fn adam_step(state: &mut TrainState, grads: &[Tensor], lr: f64) {
    let t = state.step as f64; // already incremented: 1-based
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let mut i = 0;
    let (opt_m, opt_v) = (&mut state.opt_m, &mut state.opt_v);
    state.model.visit_mut(&mut |_, p| {
        let g = grads[i].data();
        let m = opt_m[i].data_mut();
        let v = opt_v[i].data_mut();
        let p = p.data_mut();
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        i += 1;
    });
}

/// Error out (naming the parameter) if any parameter is non-finite.
fn check_params_finite(model: &SegModel<Tensor>, when: &str) -> Result<()> {
    let mut bad = None;
    model.visit(&mut |name, t| {
        if bad.is_none() && !t.is_finite() {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::Numeric(format!(
            "parameter '{name}' became non-finite {when}"
        ))),
        None => Ok(()),
    }
}
