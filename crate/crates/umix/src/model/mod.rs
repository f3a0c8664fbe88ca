//! The full segmentation model: encoder ladder, mix-attention decoder,
//! and segmentation head, assembled behind one parameter-walking API.
//!
//! [`SegModel`] is generic over parameter storage like the layers it is
//! built from: `SegModel<Tensor>` is the persistent model the optimizer
//! updates and checkpoints serialize; [`SegModel::bind`] produces a
//! `SegModel<Var>` whose forward pass records onto a tape. Because
//! [`SegModel::visit`] is generic too, the two walk their parameters in
//! exactly the same order under exactly the same names — that single
//! ordering defines the optimizer state layout, the checkpoint layout,
//! and the gradient read-back.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod feature;
pub mod head;

pub use config::{AttentionVariant, ModelConfig};
pub use decoder::{kv_channels, kv_plan, Decoder, DecoderStage, KvSource};
pub use encoder::StubEncoder;
pub use feature::{select_feature_set, FeatureMap, FeatureOrigin};
pub use head::SegmentationHead;

use crate::autodiff::{Tape, Var};
use crate::rng;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
pub struct SegModel<T> {
    pub config: ModelConfig,
    pub encoder: StubEncoder<T>,
    pub decoder: Decoder<T>,
    pub head: SegmentationHead<T>,
}

/// Everything one forward pass produces, for tests and diagnostics that
/// need to look inside (or perturb) the feature ladder.
pub struct ForwardTrace<'t> {
    pub encoder: Vec<FeatureMap<Var<'t>>>,
    pub midpoint: Option<FeatureMap<Var<'t>>>,
    pub decoder: Vec<FeatureMap<Var<'t>>>,
    pub logits: Var<'t>,
}

impl SegModel<Tensor> {
    /// Build a fresh model. All parameters draw from a stream derived from
    /// `seed`; midpoint-branch parameters use a second stream so toggling
    /// the plus variant does not re-randomize what both variants share.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<SegModel<Tensor>> {
        config.validate()?;
        let mut main = rng::stream(seed, rng::tags::INIT);
        let mut midpoint = rng::stream(seed, rng::tags::INIT_MIDPOINT);
        Ok(SegModel {
            config: config.clone(),
            encoder: StubEncoder::init(config, &mut main),
            decoder: Decoder::init(config, &mut main, &mut midpoint)?,
            head: SegmentationHead::init(config, &mut main),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> SegModel<Var<'t>> {
        SegModel {
            config: self.config.clone(),
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            head: self.head.bind(tape),
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

impl<T> SegModel<T> {
    /// Walk every parameter in canonical order. The closure receives a
    /// stable dotted name (`decoder.stage2.attn.wk.weight`, ...) and the
    /// parameter itself.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        for (idx, stage) in self.encoder.stages.iter().enumerate() {
            let j = idx + 1;
            f(&format!("encoder.stage{j}.merge.weight"), &stage.merge.weight);
            f(&format!("encoder.stage{j}.merge.bias"), &stage.merge.bias);
            for (b, block) in stage.blocks.iter().enumerate() {
                let p = format!("encoder.stage{j}.block{b}");
                f(&format!("{p}.norm.gamma"), &block.norm.gamma);
                f(&format!("{p}.norm.beta"), &block.norm.beta);
                f(&format!("{p}.fc1.weight"), &block.fc1.weight);
                f(&format!("{p}.fc1.bias"), &block.fc1.bias);
                f(&format!("{p}.fc2.weight"), &block.fc2.weight);
                f(&format!("{p}.fc2.bias"), &block.fc2.bias);
            }
        }
        for stage in &self.decoder.stages {
            let p = format!("decoder.stage{}", stage.stage_i);
            f(&format!("{p}.norm_q.gamma"), &stage.norm_q.gamma);
            f(&format!("{p}.norm_q.beta"), &stage.norm_q.beta);
            f(&format!("{p}.norm_kv.gamma"), &stage.norm_kv.gamma);
            f(&format!("{p}.norm_kv.beta"), &stage.norm_kv.beta);
            for (k, reduce) in stage.reduces.iter().enumerate() {
                if let Some(lin) = reduce {
                    f(&format!("{p}.reduce{k}.weight"), &lin.weight);
                    f(&format!("{p}.reduce{k}.bias"), &lin.bias);
                }
            }
            for (name, lin) in [
                ("wq", &stage.attention.wq),
                ("wk", &stage.attention.wk),
                ("wv", &stage.attention.wv),
                ("wo", &stage.attention.wo),
            ] {
                f(&format!("{p}.attn.{name}.weight"), &lin.weight);
                f(&format!("{p}.attn.{name}.bias"), &lin.bias);
            }
            f(&format!("{p}.norm_post.gamma"), &stage.norm_post.gamma);
            f(&format!("{p}.norm_post.beta"), &stage.norm_post.beta);
            f(&format!("{p}.ffn.fc1.weight"), &stage.ffn.fc1.weight);
            f(&format!("{p}.ffn.fc1.bias"), &stage.ffn.fc1.bias);
            f(&format!("{p}.ffn.fc2.weight"), &stage.ffn.fc2.weight);
            f(&format!("{p}.ffn.fc2.bias"), &stage.ffn.fc2.bias);
        }
        f("head.fc1.weight", &self.head.fc1.weight);
        f("head.fc1.bias", &self.head.fc1.bias);
        f("head.fc2.weight", &self.head.fc2.weight);
        f("head.fc2.bias", &self.head.fc2.bias);
    }

    /// Mutable walk; same order and names as [`SegModel::visit`] (the test
    /// suite holds the two in lockstep).
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        for (idx, stage) in self.encoder.stages.iter_mut().enumerate() {
            let j = idx + 1;
            f(&format!("encoder.stage{j}.merge.weight"), &mut stage.merge.weight);
            f(&format!("encoder.stage{j}.merge.bias"), &mut stage.merge.bias);
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("encoder.stage{j}.block{b}");
                f(&format!("{p}.norm.gamma"), &mut block.norm.gamma);
                f(&format!("{p}.norm.beta"), &mut block.norm.beta);
                f(&format!("{p}.fc1.weight"), &mut block.fc1.weight);
                f(&format!("{p}.fc1.bias"), &mut block.fc1.bias);
                f(&format!("{p}.fc2.weight"), &mut block.fc2.weight);
                f(&format!("{p}.fc2.bias"), &mut block.fc2.bias);
            }
        }
        for stage in self.decoder.stages.iter_mut() {
            let p = format!("decoder.stage{}", stage.stage_i);
            f(&format!("{p}.norm_q.gamma"), &mut stage.norm_q.gamma);
            f(&format!("{p}.norm_q.beta"), &mut stage.norm_q.beta);
            f(&format!("{p}.norm_kv.gamma"), &mut stage.norm_kv.gamma);
            f(&format!("{p}.norm_kv.beta"), &mut stage.norm_kv.beta);
            for (k, reduce) in stage.reduces.iter_mut().enumerate() {
                if let Some(lin) = reduce {
                    f(&format!("{p}.reduce{k}.weight"), &mut lin.weight);
                    f(&format!("{p}.reduce{k}.bias"), &mut lin.bias);
                }
            }
            for (name, lin) in [
                ("wq", &mut stage.attention.wq),
                ("wk", &mut stage.attention.wk),
                ("wv", &mut stage.attention.wv),
                ("wo", &mut stage.attention.wo),
            ] {
                f(&format!("{p}.attn.{name}.weight"), &mut lin.weight);
                f(&format!("{p}.attn.{name}.bias"), &mut lin.bias);
            }
            f(&format!("{p}.norm_post.gamma"), &mut stage.norm_post.gamma);
            f(&format!("{p}.norm_post.beta"), &mut stage.norm_post.beta);
            f(&format!("{p}.ffn.fc1.weight"), &mut stage.ffn.fc1.weight);
            f(&format!("{p}.ffn.fc1.bias"), &mut stage.ffn.fc1.bias);
            f(&format!("{p}.ffn.fc2.weight"), &mut stage.ffn.fc2.weight);
            f(&format!("{p}.ffn.fc2.bias"), &mut stage.ffn.fc2.bias);
        }
        f("head.fc1.weight", &mut self.head.fc1.weight);
        f("head.fc1.bias", &mut self.head.fc1.bias);
        f("head.fc2.weight", &mut self.head.fc2.weight);
        f("head.fc2.bias", &mut self.head.fc2.bias);
    }
}

impl<'t> SegModel<Var<'t>> {
    /// Full forward pass; `img` is a `[H, W, 3]` leaf on the same tape.
    /// Returns `[H/4, W/4, K]` logits.
    pub fn forward(&self, img: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_trace(img)?.logits)
    }

    /// Forward pass keeping every intermediate feature map.
    pub fn forward_trace(&self, img: Var<'t>) -> Result<ForwardTrace<'t>> {
        let (enc, midpoint) = self.encoder.forward(&self.config, img)?;
        let dec = self.decoder.forward(&self.config, &enc, midpoint.as_ref())?;
        let logits = self.head.forward(&self.config, &dec)?;
        Ok(ForwardTrace { encoder: enc, midpoint, decoder: dec, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_logits(config: &ModelConfig, seed: u64, img_seed: u64) -> Tensor {
        let model = SegModel::init(config, seed).unwrap();
        let mut r = rng::stream(img_seed, 50);
        let img = Tensor::new(
            &[config.img_h, config.img_w, 3],
            rng::trunc_normal_vec(&mut r, config.img_h * config.img_w * 3, 0.5),
        )
        .unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        bound.forward(tape.leaf(img)).unwrap().value()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = ModelConfig::toy();
        let a = SegModel::init(&config, 11).unwrap();
        let b = SegModel::init(&config, 11).unwrap();
        let c = SegModel::init(&config, 12).unwrap();
        let flatten = |m: &SegModel<Tensor>| {
            let mut all = Vec::new();
            m.visit(&mut |_, t| all.extend_from_slice(t.data()));
            all
        };
        assert_eq!(flatten(&a), flatten(&b));
        assert_ne!(flatten(&a), flatten(&c));
    }

    #[test]
    fn plus_toggle_keeps_encoder_parameters_identical() {
        let mut config = ModelConfig::toy();
        let base = SegModel::init(&config, 5).unwrap();
        config.plus_midpoint = true;
        let plus = SegModel::init(&config, 5).unwrap();
        let enc = |m: &SegModel<Tensor>| {
            let mut v = Vec::new();
            m.visit(&mut |name, t| {
                if name.starts_with("encoder.") {
                    v.extend_from_slice(t.data());
                }
            });
            v
        };
        assert_eq!(enc(&base), enc(&plus));
        // And the plus model has strictly more parameters: the midpoint
        // reduce linears plus wider key/value projections.
        assert!(plus.num_params() > base.num_params());
    }

    #[test]
    fn visit_and_visit_mut_agree_and_names_are_unique() {
        let config = ModelConfig::toy();
        let mut model = SegModel::init(&config, 3).unwrap();
        let mut names = Vec::new();
        model.visit(&mut |name, _| names.push(name.to_string()));
        let mut names_mut = Vec::new();
        model.visit_mut(&mut |name, _| names_mut.push(name.to_string()));
        assert_eq!(names, names_mut);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "parameter names must be unique");
        // Spot-check the canonical naming scheme.
        assert!(names.contains(&"encoder.stage1.merge.weight".to_string()));
        assert!(names.contains(&"encoder.stage3.block1.fc2.bias".to_string()));
        assert!(names.contains(&"decoder.stage2.attn.wk.weight".to_string()));
        assert!(names.contains(&"decoder.stage4.ffn.fc2.bias".to_string()));
        assert!(names.contains(&"head.fc2.bias".to_string()));
    }

    #[test]
    fn visit_mut_edits_reach_the_model() {
        let config = ModelConfig::toy();
        let mut model = SegModel::init(&config, 3).unwrap();
        model.visit_mut(&mut |name, t| {
            if name == "head.fc2.bias" {
                t.data_mut()[0] = 42.0;
            }
        });
        assert_eq!(model.head.fc2.bias.data()[0], 42.0);
    }

    #[test]
    fn forward_produces_quarter_resolution_logits() {
        let config = ModelConfig::toy();
        let logits = forward_logits(&config, 1, 2);
        assert_eq!(logits.shape(), &[16, 16, 4]);
        assert!(logits.is_finite());
    }

    #[test]
    fn forward_works_under_every_variant() {
        for (variant, propagate, plus) in [
            (AttentionVariant::Mix, true, false),
            (AttentionVariant::Mix, true, true),
            (AttentionVariant::Mix, false, false),
            (AttentionVariant::CrossLowest, false, false),
            (AttentionVariant::CrossLowest, true, false),
            (AttentionVariant::SelfAttention, true, false),
        ] {
            let mut config = ModelConfig::toy();
            config.attention_variant = variant;
            config.propagate = propagate;
            config.plus_midpoint = plus;
            let logits = forward_logits(&config, 1, 2);
            assert_eq!(logits.shape(), &[16, 16, 4], "{variant:?}");
            assert!(logits.is_finite(), "{variant:?}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = ModelConfig::toy();
        let a = forward_logits(&config, 9, 4);
        let b = forward_logits(&config, 9, 4);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn variants_actually_change_the_output() {
        let mut config = ModelConfig::toy();
        let mix = forward_logits(&config, 9, 4);
        config.attention_variant = AttentionVariant::SelfAttention;
        let se = forward_logits(&config, 9, 4);
        assert!(mix.max_abs_diff(&se) > 1e-9);
    }

    #[test]
    fn trace_exposes_the_whole_ladder() {
        let config = ModelConfig::toy();
        let model = SegModel::init(&config, 1).unwrap();
        let mut r = rng::stream(2, 50);
        let img = Tensor::new(&[64, 64, 3], rng::trunc_normal_vec(&mut r, 64 * 64 * 3, 0.5))
            .unwrap();
        let tape = Tape::new();
        let trace = model.bind(&tape).forward_trace(tape.leaf(img)).unwrap();
        assert_eq!(trace.encoder.len(), 4);
        assert_eq!(trace.decoder.len(), 4);
        assert!(trace.midpoint.is_some());
        // Decoder outputs appear coarsest-first and mirror their query shapes.
        let stages: Vec<usize> = trace.decoder.iter().map(|f| f.stage).collect();
        assert_eq!(stages, vec![4, 3, 2, 1]);
        for f in &trace.decoder {
            let (h, w) = config.stage_size(f.stage);
            assert_eq!(f.data.shape(), vec![h, w, config.channels[f.stage - 1]]);
        }
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        // A small 2-stage config keeps this fast while still covering both
        // a reduce linear and the no-reduce coarsest source.
        let config = ModelConfig::parse(
            "num_stages = 2\nimg_h = 16\nimg_w = 16\nchannels = 4,8\nnum_classes = 3\n\
             head_embed_dim = 8\nffn_ratio = 1\ndepths = 1,1",
        )
        .unwrap();
        let model = SegModel::init(&config, 21).unwrap();
        let mut r = rng::stream(2, 50);
        let img =
            Tensor::new(&[16, 16, 3], rng::trunc_normal_vec(&mut r, 16 * 16 * 3, 0.5)).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let logits = bound.forward(tape.leaf(img)).unwrap();
        tape.backward(logits.sum().unwrap()).unwrap();
        bound.visit(&mut |name, var| {
            let g = var.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(
                g.data().iter().all(|v| v.is_finite()),
                "non-finite grad in {name}"
            );
        });
    }
}
