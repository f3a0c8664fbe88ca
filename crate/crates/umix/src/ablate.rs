//! The four-arm decoder ablation: every combination of attention
//! mechanism (cross-attention against the finest encoder feature vs
//! mix-attention over the pooled multi-stage bundle) and lateral query
//! propagation (encoder-only kv sources vs decoder outputs flowing back
//! in). Arms share seeds, data, and budget, so the comparison isolates
//! the decoder wiring.

use crate::analysis::count_model;
use crate::data::SyntheticDataset;
use crate::eval::evaluate;
use crate::model::{AttentionVariant, ModelConfig};
use crate::train::{split, train, TrainOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationArm {
    pub label: &'static str,
    pub variant: AttentionVariant,
    pub propagate: bool,
}

/// Arm order: plain baseline first, full method last.
pub const ARMS: [AblationArm; 4] = [
    AblationArm {
        label: "cross-attention",
        variant: AttentionVariant::CrossLowest,
        propagate: false,
    },
    AblationArm { label: "mix-attention", variant: AttentionVariant::Mix, propagate: false },
    AblationArm {
        label: "cross-attention+unet",
        variant: AttentionVariant::CrossLowest,
        propagate: true,
    },
    AblationArm { label: "mix-attention+unet", variant: AttentionVariant::Mix, propagate: true },
];

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub label: &'static str,
    /// Final mIoU per seed, in the seed order given.
    pub per_seed: Vec<f64>,
    pub mean_miou: f64,
    pub params: u64,
    pub flops: u64,
}

impl AblationArm {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut config = base.clone();
        config.attention_variant = self.variant;
        config.propagate = self.propagate;
        config.plus_midpoint = false;
        config
    }
}

/// Train every arm under every seed; mIoU is measured on the validation
/// split (or the whole dataset when it is too small to split).
pub fn run_ablation(
    base: &ModelConfig,
    dataset: &SyntheticDataset,
    seeds: &[u64],
    options: &TrainOptions,
) -> Result<Vec<ArmResult>> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".to_string()));
    }
    let mut results = Vec::with_capacity(ARMS.len());
    for arm in &ARMS {
        let config = arm.apply(base);
        let report = count_model(&config)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = train(&config, seed, dataset, options)?;
            let (train_samples, val_samples) = split(&dataset.samples);
            let eval_on = if val_samples.is_empty() { train_samples } else { val_samples };
            per_seed.push(evaluate(&outcome.state.model, &dataset.spec, eval_on)?.miou);
        }
        let mean_miou = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        results.push(ArmResult {
            label: arm.label,
            per_seed,
            mean_miou,
            params: report.total_params(),
            flops: report.total_flops(),
        });
    }
    Ok(results)
}

/// Plain-text comparison table, one row per arm.
pub fn render_table(results: &[ArmResult]) -> String {
    let label_w = results.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:label_w$}  {:>9}  {:>12}  {:>16}  per-seed\n",
        "arm", "mean_miou", "params", "flops"
    );
    for r in results {
        let seeds = r
            .per_seed
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:label_w$}  {:>9.4}  {:>12}  {:>16}  {}\n",
            r.label, r.mean_miou, r.params, r.flops, seeds
        ));
    }
    out
}
