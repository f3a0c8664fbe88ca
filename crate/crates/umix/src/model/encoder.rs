//! Shape-faithful encoder stub.
//!
//! Produces the hierarchical ladder E_1..E_N (stage j at H/2^(j+1) x
//! W/2^(j+1) x C_j) from an `[H, W, 3]` image. Each stage is a
//! non-overlapping patch merge — space-to-channel folding followed by a
//! linear projection — and a few pre-norm residual MLP blocks. Stage 1
//! reduces 4x, later stages 2x, which is exactly what yields the /4, /8,
//! /16, /32 resolution ladder.
//!
//! Stage 3 additionally exposes its midpoint: the feature after the first
//! half (rounded up) of its blocks. The plus-variant decoder taps it as an
//! extra key/value source.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::model::config::ModelConfig;
use crate::model::feature::{FeatureMap, FeatureOrigin};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::Tensor;
use crate::Result;

/// Hidden expansion inside encoder residual blocks. The stub only needs
/// enough capacity for toy training; 2x keeps it light.
pub const ENCODER_BLOCK_RATIO: usize = 2;

/// Pre-norm residual MLP: `x + fc2(gelu(fc1(norm(x))))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl EncoderBlock<Tensor> {
    fn init(c: usize, rng: &mut ChaCha8Rng) -> EncoderBlock<Tensor> {
        EncoderBlock {
            norm: LayerNorm::init(c),
            fc1: Linear::init(c, c * ENCODER_BLOCK_RATIO, rng),
            fc2: Linear::init(c * ENCODER_BLOCK_RATIO, c, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EncoderBlock<Var<'t>> {
        EncoderBlock {
            norm: self.norm.bind(tape),
            fc1: self.fc1.bind(tape),
            fc2: self.fc2.bind(tape),
        }
    }
}

impl<'t> EncoderBlock<Var<'t>> {
    fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc2.forward(self.fc1.forward(self.norm.forward(x)?)?.gelu()?)?;
        x.add(h)
    }
}

/// One ladder rung: patch merge + residual blocks.
#[derive(Debug, Clone)]
pub struct EncoderStage<T> {
    /// Spatial reduction factor of the patch merge (4 for stage 1, else 2).
    pub factor: usize,
    pub merge: Linear<T>,
    pub blocks: Vec<EncoderBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct StubEncoder<T> {
    pub stages: Vec<EncoderStage<T>>,
}

impl StubEncoder<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> StubEncoder<Tensor> {
        let mut stages = Vec::with_capacity(config.num_stages);
        let mut c_prev = 3;
        for j in 1..=config.num_stages {
            let factor = if j == 1 { 4 } else { 2 };
            let c = config.channels[j - 1];
            let merge = Linear::init(c_prev * factor * factor, c, rng);
            let blocks =
                (0..config.depths[j - 1]).map(|_| EncoderBlock::init(c, rng)).collect();
            stages.push(EncoderStage { factor, merge, blocks });
            c_prev = c;
        }
        StubEncoder { stages }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> StubEncoder<Var<'t>> {
        StubEncoder {
            stages: self
                .stages
                .iter()
                .map(|s| EncoderStage {
                    factor: s.factor,
                    merge: s.merge.bind(tape),
                    blocks: s.blocks.iter().map(|b| b.bind(tape)).collect(),
                })
                .collect(),
        }
    }
}

impl<'t> StubEncoder<Var<'t>> {
    /// Run the ladder. Returns (E_1..E_N, stage-3 midpoint when N >= 3).
    pub fn forward(
        &self,
        config: &ModelConfig,
        img: Var<'t>,
    ) -> Result<(Vec<FeatureMap<Var<'t>>>, Option<FeatureMap<Var<'t>>>)> {
        let img_shape = img.shape();
        if img_shape != [config.img_h, config.img_w, 3] {
            return Err(crate::Error::Config(format!(
                "encoder expects a [{}, {}, 3] image, got {:?}",
                config.img_h, config.img_w, img_shape
            )));
        }
        let mut features = Vec::with_capacity(self.stages.len());
        let mut midpoint = None;
        let mut spatial = img;
        for (idx, stage) in self.stages.iter().enumerate() {
            let j = idx + 1;
            let (h, w) = config.stage_size(j);
            let c = config.channels[idx];
            let merged = spatial.space_to_channel(stage.factor)?;
            let mut x = stage
                .merge
                .forward(merged.reshape(&[h * w, merged.shape()[2]])?)?
                .with_label(&format!("encoder.stage{j}.merge"));
            let half = stage.blocks.len().div_ceil(2);
            for (b, block) in stage.blocks.iter().enumerate() {
                x = block.forward(x)?.with_label(&format!("encoder.stage{j}.block{b}"));
                if j == 3 && b + 1 == half {
                    midpoint = Some(FeatureMap {
                        data: x.reshape(&[h, w, c])?,
                        stage: 3,
                        origin: FeatureOrigin::EncoderMidpoint,
                    });
                }
            }
            // A blockless stage 3 still has a midpoint: the merge output.
            if j == 3 && stage.blocks.is_empty() {
                midpoint = Some(FeatureMap {
                    data: x.reshape(&[h, w, c])?,
                    stage: 3,
                    origin: FeatureOrigin::EncoderMidpoint,
                });
            }
            spatial = x.reshape(&[h, w, c])?;
            features.push(FeatureMap::encoder(spatial, j));
        }
        Ok((features, midpoint))
    }
}
