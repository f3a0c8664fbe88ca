//! Analytic parameter and FLOP accounting.
//!
//! Costs are computed from the configuration alone — no model is built —
//! using the same [`kv_plan`] the decoder executes, so the cost model and
//! the computation it describes cannot drift apart. Parameter totals are
//! cross-checked against the real model's parameter walk in the tests.
//!
//! FLOP conventions (counted per element unless stated):
//! - matmul `[M,K]x[K,P]`: `2*M*K*P` (multiply + add);
//! - bias and residual adds: 1;
//! - layer norm: 8 (mean, variance, normalize, scale-shift);
//! - softmax: 5 (max scan, shift, exp, sum, divide);
//! - GELU (tanh form): 16;
//! - average pooling: 1 per *input* element plus 1 per output (divide);
//! - bilinear upsample: 8 per *output* element (four taps, three lerps);
//! - space-to-channel and reshapes: 0 (data movement only).

use crate::model::config::ModelConfig;
use crate::model::decoder::kv_plan;
use crate::model::encoder::ENCODER_BLOCK_RATIO;
use crate::Result;

pub const FLOPS_PER_NORM_ELEM: u64 = 8;
pub const FLOPS_PER_SOFTMAX_ELEM: u64 = 5;
pub const FLOPS_PER_GELU_ELEM: u64 = 16;
pub const FLOPS_PER_UPSAMPLE_OUT_ELEM: u64 = 8;

/// Cost of one block of work, labeled like the parameter walk labels its
/// tensors (`encoder.stage1.merge`, `decoder.stage2.attention`, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Sum of FLOPs over entries whose name starts with `prefix`.
    pub fn group_flops(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.flops).sum()
    }

    pub fn group_params(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.params).sum()
    }

    /// Plain-text table, one row per entry plus a total line.
    pub fn render(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:width$}  {:>14}  {:>16}\n", "layer", "params", "flops");
        for e in &self.entries {
            out.push_str(&format!("{:width$}  {:>14}  {:>16}\n", e.name, e.params, e.flops));
        }
        out.push_str(&format!(
            "{:width$}  {:>14}  {:>16}\n",
            "total",
            self.total_params(),
            self.total_flops()
        ));
        out
    }
}

fn linear_params(c_in: u64, c_out: u64) -> u64 {
    c_in * c_out + c_out
}

/// Matmul + bias for a `[rows, c_in] -> [rows, c_out]` linear.
fn linear_flops(rows: u64, c_in: u64, c_out: u64) -> u64 {
    2 * rows * c_in * c_out + rows * c_out
}

fn norm_params(c: u64) -> u64 {
    2 * c
}

fn norm_flops(rows: u64, c: u64) -> u64 {
    FLOPS_PER_NORM_ELEM * rows * c
}

/// Full analytic cost breakdown for one forward pass of the configured
/// model on its configured input size.
pub fn count_model(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let n = config.num_stages;
    let mut entries = Vec::new();

    // Encoder ladder.
    let mut c_prev: u64 = 3;
    for j in 1..=n {
        let (h, w) = config.stage_size(j);
        let (rows, c) = ((h * w) as u64, config.channels[j - 1] as u64);
        let factor: u64 = if j == 1 { 4 } else { 2 };
        let merged_c = c_prev * factor * factor;
        entries.push(CostEntry {
            name: format!("encoder.stage{j}.merge"),
            params: linear_params(merged_c, c),
            flops: linear_flops(rows, merged_c, c),
        });
        let hidden = c * ENCODER_BLOCK_RATIO as u64;
        let block_params = norm_params(c) + linear_params(c, hidden) + linear_params(hidden, c);
        let block_flops = norm_flops(rows, c)
            + linear_flops(rows, c, hidden)
            + FLOPS_PER_GELU_ELEM * rows * hidden
            + linear_flops(rows, hidden, c)
            + rows * c; // residual
        let depth = config.depths[j - 1] as u64;
        entries.push(CostEntry {
            name: format!("encoder.stage{j}.blocks"),
            params: depth * block_params,
            flops: depth * block_flops,
        });
        c_prev = c;
    }

    // Decoder stages.
    for i in 1..=n {
        let plan = kv_plan(config, i)?;
        let query_stage = n - i + 1;
        let (hq, wq) = config.stage_size(query_stage);
        let l_q = (hq * wq) as u64;
        let c_q = config.channels[query_stage - 1] as u64;
        let l_kv = plan[0].rows(config) as u64;
        let c_kv: u64 = plan.iter().map(|s| s.channels(config) as u64).sum();

        // Key/value assembly: pooling, per-source linears, kv norm.
        let mut kv_params = norm_params(c_kv);
        let mut kv_flops = norm_flops(l_kv, c_kv);
        for s in &plan {
            let (h, w) = config.stage_size(s.stage);
            let c = s.channels(config) as u64;
            if s.pool > 1 {
                let in_elems = (h * w) as u64 * c;
                let out_elems = l_kv * c;
                kv_flops += in_elems + out_elems;
            }
            if s.reduce {
                kv_params += linear_params(c, c);
                kv_flops += linear_flops(l_kv, c, c);
            }
        }
        entries.push(CostEntry {
            name: format!("decoder.stage{i}.kv"),
            params: kv_params,
            flops: kv_flops,
        });

        // Attention: query norm, projections, scores, softmax, context,
        // output projection, residual, post-norm.
        let heads = config.heads[query_stage - 1] as u64;
        let attn_params = norm_params(c_q)
            + linear_params(c_q, c_q) // wq
            + 2 * linear_params(c_kv, c_q) // wk, wv
            + linear_params(c_q, c_q) // wo
            + norm_params(c_q);
        let scores = l_q * l_kv;
        let attn_flops = norm_flops(l_q, c_q)
            + linear_flops(l_q, c_q, c_q)
            + 2 * linear_flops(l_kv, c_kv, c_q)
            + 2 * scores * c_q // q.k^T over all heads (c_q = heads*head_dim)
            + scores * heads // scale
            + FLOPS_PER_SOFTMAX_ELEM * scores * heads
            + 2 * scores * c_q // attn.v
            + linear_flops(l_q, c_q, c_q)
            + l_q * c_q // residual
            + norm_flops(l_q, c_q);
        entries.push(CostEntry {
            name: format!("decoder.stage{i}.attention"),
            params: attn_params,
            flops: attn_flops,
        });

        let hidden = c_q * config.ffn_ratio as u64;
        entries.push(CostEntry {
            name: format!("decoder.stage{i}.ffn"),
            params: linear_params(c_q, hidden) + linear_params(hidden, c_q),
            flops: linear_flops(l_q, c_q, hidden)
                + FLOPS_PER_GELU_ELEM * l_q * hidden
                + linear_flops(l_q, hidden, c_q)
                + l_q * c_q, // residual
        });
    }

    // Segmentation head.
    let (h1, w1) = config.stage_size(1);
    let rows1 = (h1 * w1) as u64;
    let upsample_flops: u64 = (2..=n)
        .map(|j| FLOPS_PER_UPSAMPLE_OUT_ELEM * rows1 * config.channels[j - 1] as u64)
        .sum();
    entries.push(CostEntry {
        name: "head.upsample".to_string(),
        params: 0,
        flops: upsample_flops,
    });
    let fused: u64 = config.channels.iter().map(|&c| c as u64).sum();
    let embed = config.head_embed_dim as u64;
    let k = config.num_classes as u64;
    entries.push(CostEntry {
        name: "head.mlp".to_string(),
        params: linear_params(fused, embed) + linear_params(embed, k),
        flops: linear_flops(rows1, fused, embed)
            + FLOPS_PER_GELU_ELEM * rows1 * embed
            + linear_flops(rows1, embed, k),
    });

    Ok(CostReport { entries })
}
