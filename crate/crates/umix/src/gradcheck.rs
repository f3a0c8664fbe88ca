//! Finite-difference verification of the backward pass, at three
//! granularities:
//!
//! - `ops`: each tape primitive in isolation, against a weighted-sum loss
//!   (plain sums would let softmax-style row constraints cancel gradients
//!   to zero and hide bugs)
//! - `stage`: one full decoder stage — pooling, channel reduction,
//!   concatenation, attention, norms, FFN, both residuals — checking
//!   gradients for its input features *and* its parameters
//! - `model`: the entire network under the configuration given, every
//!   parameter plus the input image, through a cross-entropy loss
//!
//! The op and stage groups run on small fixed shapes and take the
//! tolerance as-is. The full model composes hundreds of ops, so its
//! tolerance is relaxed by [`MODEL_TOL_FACTOR`]; its cost also scales
//! with parameter count, so point it at a small configuration.

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{FeatureMap, ModelConfig, SegModel};
use crate::nn::LAYER_NORM_EPS;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The full-model group accepts `tol * MODEL_TOL_FACTOR`.
pub const MODEL_TOL_FACTOR: f64 = 100.0;

/// Results for one granularity.
#[derive(Debug)]
pub struct GroupResult {
    pub group: &'static str,
    pub checks: Vec<(String, GradCheckReport)>,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, r)| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|(_, r)| r.max_rel_err()).fold(0.0, f64::max)
    }

    /// One line per check; per-leaf detail only for failures.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (name, report) in &self.checks {
            let status = if report.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{status:4} {label:<28} max_rel_err {err:.3e} (tol {tol:.1e})",
                label = format!("{}/{}", self.group, name),
                err = report.max_rel_err(),
                tol = report.tol,
            );
            if !report.passed() {
                s.push_str(&report.render());
            }
        }
        s
    }
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("gradcheck input shape")
}

/// Every tape primitive against central differences.
pub fn run_ops(seed: u64, tol: f64) -> Result<GroupResult> {
    let mut r = stream(seed, 101);
    let opts = GradCheckOptions { eps: 1e-5, tol };
    let mut checks: Vec<(String, GradCheckReport)> = Vec::new();

    // Fixed weight tensors make every loss a generic linear functional of
    // the op output, so no gradient direction can cancel away.
    let w23 = random_tensor(&mut r, &[2, 3], 1.5);
    let w34 = random_tensor(&mut r, &[3, 4], 1.5);
    let w32 = random_tensor(&mut r, &[3, 2], 1.5);
    let w35 = random_tensor(&mut r, &[3, 5], 1.5);
    let w232 = random_tensor(&mut r, &[2, 3, 2], 1.5);
    let w462 = random_tensor(&mut r, &[4, 6, 2], 1.5);
    let w332 = random_tensor(&mut r, &[3, 3, 2], 1.5);
    let w2212 = random_tensor(&mut r, &[2, 2, 12], 1.5);
    let w225 = random_tensor(&mut r, &[2, 2, 5], 1.5);
    let w46 = random_tensor(&mut r, &[4, 6], 1.5);

    let a23 = random_tensor(&mut r, &[2, 3], 1.5);
    let b23 = random_tensor(&mut r, &[2, 3], 1.5);
    checks.push((
        "add".to_string(),
        grad_check(
            |t, v| v[0].add(v[1])?.mul(t.leaf(w23.clone()))?.sum(),
            &[("a", a23.clone()), ("b", b23.clone())],
            &opts,
        )?,
    ));
    checks.push((
        "mul".to_string(),
        grad_check(
            |t, v| v[0].mul(v[1])?.mul(t.leaf(w23.clone()))?.sum(),
            &[("a", a23.clone()), ("b", b23.clone())],
            &opts,
        )?,
    ));
    checks.push((
        "scale".to_string(),
        grad_check(
            |t, v| v[0].scale(-1.7)?.mul(t.leaf(w23.clone()))?.sum(),
            &[("a", a23.clone())],
            &opts,
        )?,
    ));
    checks.push((
        "add_bias".to_string(),
        grad_check(
            |t, v| v[0].add_bias(v[1])?.mul(t.leaf(w34.clone()))?.sum(),
            &[("x", random_tensor(&mut r, &[3, 4], 1.5)), ("bias", random_tensor(&mut r, &[4], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "matmul".to_string(),
        grad_check(
            |t, v| v[0].matmul(v[1])?.mul(t.leaf(w32.clone()))?.sum(),
            &[("a", random_tensor(&mut r, &[3, 4], 1.5)), ("b", random_tensor(&mut r, &[4, 2], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "transpose_2d".to_string(),
        grad_check(
            |t, v| v[0].transpose_2d()?.mul(t.leaf(w23.clone()))?.sum(),
            &[("a", random_tensor(&mut r, &[3, 2], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "reshape".to_string(),
        grad_check(
            |t, v| v[0].reshape(&[3, 4])?.mul(t.leaf(w34.clone()))?.sum(),
            &[("a", random_tensor(&mut r, &[2, 6], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "softmax_rows".to_string(),
        grad_check(
            |t, v| v[0].softmax_rows()?.mul(t.leaf(w35.clone()))?.sum(),
            &[("logits", random_tensor(&mut r, &[3, 5], 2.0))],
            &opts,
        )?,
    ));
    checks.push((
        "avg_pool".to_string(),
        grad_check(
            |t, v| v[0].avg_pool(2, 2)?.mul(t.leaf(w232.clone()))?.sum(),
            &[("x", random_tensor(&mut r, &[4, 6, 2], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "bilinear_upsample".to_string(),
        grad_check(
            |t, v| v[0].bilinear_upsample(4, 6)?.mul(t.leaf(w462.clone()))?.sum(),
            &[("x", random_tensor(&mut r, &[2, 3, 2], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "slice_channels".to_string(),
        grad_check(
            |t, v| v[0].slice_channels(1, 2)?.mul(t.leaf(w332.clone()))?.sum(),
            &[("x", random_tensor(&mut r, &[3, 3, 4], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "space_to_channel".to_string(),
        grad_check(
            |t, v| v[0].space_to_channel(2)?.mul(t.leaf(w2212.clone()))?.sum(),
            &[("x", random_tensor(&mut r, &[4, 4, 3], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "concat_channels".to_string(),
        grad_check(
            |t, v| t.concat_channels(&[v[0], v[1]])?.mul(t.leaf(w225.clone()))?.sum(),
            &[("a", random_tensor(&mut r, &[2, 2, 2], 1.5)), ("b", random_tensor(&mut r, &[2, 2, 3], 1.5))],
            &opts,
        )?,
    ));
    checks.push((
        "layer_norm".to_string(),
        grad_check(
            |t, v| {
                v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)?.mul(t.leaf(w46.clone()))?.sum()
            },
            &[
                ("x", random_tensor(&mut r, &[4, 6], 1.5)),
                ("gamma", random_tensor(&mut r, &[6], 1.5)),
                ("beta", random_tensor(&mut r, &[6], 1.5)),
            ],
            &opts,
        )?,
    ));
    checks.push((
        "gelu".to_string(),
        grad_check(
            |t, v| v[0].gelu()?.mul(t.leaf(w34.clone()))?.sum(),
            &[("x", random_tensor(&mut r, &[3, 4], 2.0))],
            &opts,
        )?,
    ));
    checks.push((
        "sum".to_string(),
        grad_check(
            |_t, v| v[0].sum()?.scale(1.3),
            &[("x", random_tensor(&mut r, &[2, 5], 1.5))],
            &opts,
        )?,
    ));
    let ce_labels: Vec<u32> = vec![2, 0, 3, crate::autodiff::IGNORE_LABEL, 1, 2];
    checks.push((
        "cross_entropy".to_string(),
        grad_check(
            |_t, v| v[0].cross_entropy(&ce_labels),
            &[("logits", random_tensor(&mut r, &[6, 4], 2.0))],
            &opts,
        )?,
    ));

    Ok(GroupResult { group: "ops", checks })
}

fn stage_config() -> Result<ModelConfig> {
    ModelConfig::parse(
        "num_stages = 2\nimg_h = 16\nimg_w = 16\nchannels = 4,8\nnum_classes = 3\n\
         head_embed_dim = 8\nffn_ratio = 1\ndepths = 1,1",
    )
}

/// One decoder stage end to end: input features and every stage
/// parameter checked in a single composed graph.
pub fn run_stage(seed: u64, tol: f64) -> Result<GroupResult> {
    let config = stage_config()?;
    let model = SegModel::init(&config, seed)?;
    let mut r = stream(seed, 102);
    let e1 = random_tensor(&mut r, &[4, 4, 4], 0.8);
    let e2 = random_tensor(&mut r, &[2, 2, 8], 0.8);
    let w = random_tensor(&mut r, &[4, 8], 1.0);

    let mut names = vec!["E_1".to_string(), "E_2".to_string()];
    let mut tensors = vec![e1, e2];
    model.visit(&mut |name, t| {
        if name.starts_with("decoder.stage1.") {
            names.push(name.to_string());
            tensors.push(t.clone());
        }
    });
    let inputs: Vec<(&str, Tensor)> =
        names.iter().map(|n| n.as_str()).zip(tensors.iter().cloned()).collect();

    let report = grad_check(
        |tape, vars| {
            let mut bound = model.bind(tape);
            let mut i = 2;
            bound.visit_mut(&mut |name, v| {
                if name.starts_with("decoder.stage1.") {
                    *v = vars[i];
                    i += 1;
                }
            });
            let enc =
                vec![FeatureMap::encoder(vars[0], 1), FeatureMap::encoder(vars[1], 2)];
            let out = bound.decoder.stages[0].forward(&config, &enc, &[], None)?;
            out.data.reshape(&[4, 8])?.mul(tape.leaf(w.clone()))?.sum()
        },
        &inputs,
        &GradCheckOptions { eps: 1e-5, tol },
    )?;
    Ok(GroupResult { group: "stage", checks: vec![("decoder_stage".to_string(), report)] })
}

/// The whole network under `config`: cross-entropy loss on a fixed label
/// pattern, differentiated with respect to the image and every
/// parameter. Cost grows with both parameter count and forward cost —
/// meant for small configurations.
pub fn run_model(config: &ModelConfig, seed: u64, tol: f64) -> Result<GroupResult> {
    config.validate()?;
    let model = SegModel::init(config, seed)?;
    let (out_h, out_w) = config.stage_size(1);
    let k = config.num_classes;
    let labels: Vec<u32> = (0..out_h * out_w).map(|i| (i % k) as u32).collect();

    let mut r = stream(seed, 103);
    let mut names = vec!["image".to_string()];
    let mut tensors = vec![random_tensor(&mut r, &[config.img_h, config.img_w, 3], 0.8)];
    model.visit(&mut |name, t| {
        names.push(name.to_string());
        tensors.push(t.clone());
    });
    let inputs: Vec<(&str, Tensor)> =
        names.iter().map(|n| n.as_str()).zip(tensors.iter().cloned()).collect();

    let report = grad_check(
        |tape, vars| {
            let mut bound = model.bind(tape);
            let mut i = 1;
            bound.visit_mut(&mut |_, v| {
                *v = vars[i];
                i += 1;
            });
            let logits = bound.forward(vars[0])?;
            logits.reshape(&[out_h * out_w, k])?.cross_entropy(&labels)
        },
        &inputs,
        &GradCheckOptions { eps: 1e-5, tol },
    )?;
    Ok(GroupResult { group: "model", checks: vec![("full_model".to_string(), report)] })
}

/// All three groups. The op and stage groups use fixed small setups at
/// `tol`; the model group runs the configuration given at
/// `tol * MODEL_TOL_FACTOR`.
pub fn run(config: &ModelConfig, seed: u64, tol: f64) -> Result<Vec<GroupResult>> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::Usage(format!("gradcheck tol must be positive, got {tol}")));
    }
    Ok(vec![
        run_ops(seed, tol)?,
        run_stage(seed, tol)?,
        run_model(config, seed, tol * MODEL_TOL_FACTOR)?,
    ])
}

/// Ok if every check in every group passed; otherwise a numerical error
/// naming the failures (the CLI maps this to exit code 2).
pub fn verdict(groups: &[GroupResult]) -> Result<()> {
    let failing: Vec<String> = groups
        .iter()
        .flat_map(|g| {
            g.checks.iter().filter(|(_, r)| !r.passed()).map(|(name, r)| {
                format!(
                    "{}/{} (max_rel_err {:.3e}, tol {:.1e})",
                    g.group,
                    name,
                    r.max_rel_err(),
                    r.tol
                )
            })
        })
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failing.join(", "))))
    }
}
