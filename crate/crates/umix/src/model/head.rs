//! Segmentation head: fuse every decoder output at the finest decoder
//! resolution and map the fused features to per-class logits.
//!
//! All decoder outputs except the finest are bilinearly upsampled to the
//! stage-1 size (H/4 x W/4), concatenated channel-wise in ladder-stage
//! order (finest first), and pushed through a two-layer MLP with a GELU
//! in between. The output is a `[H/4, W/4, K]` logit map.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::model::config::ModelConfig;
use crate::model::feature::{FeatureMap, FeatureOrigin};
use crate::nn::Linear;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SegmentationHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl SegmentationHead<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> SegmentationHead<Tensor> {
        let fused: usize = config.channels.iter().sum();
        SegmentationHead {
            fc1: Linear::init(fused, config.head_embed_dim, rng),
            fc2: Linear::init(config.head_embed_dim, config.num_classes, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> SegmentationHead<Var<'t>> {
        SegmentationHead { fc1: self.fc1.bind(tape), fc2: self.fc2.bind(tape) }
    }
}

impl<'t> SegmentationHead<Var<'t>> {
    /// `decoded` may arrive in any order; it must contain exactly one
    /// decoder feature per ladder stage.
    pub fn forward(
        &self,
        config: &ModelConfig,
        decoded: &[FeatureMap<Var<'t>>],
    ) -> Result<Var<'t>> {
        let n = config.num_stages;
        let (h1, w1) = config.stage_size(1);
        let mut parts = Vec::with_capacity(n);
        for j in 1..=n {
            let f = decoded
                .iter()
                .find(|f| f.stage == j && f.origin == FeatureOrigin::Decoder)
                .ok_or_else(|| {
                    Error::Usage(format!("segmentation head needs decoder output D_{j}"))
                })?;
            let up = if j == 1 { f.data } else { f.data.bilinear_upsample(h1, w1)? };
            let c = config.channels[j - 1];
            parts.push(up.reshape(&[h1 * w1, c])?);
        }
        let fused = parts[0].tape().concat_channels(&parts)?;
        let hidden = self.fc1.forward(fused)?.gelu()?;
        let logits = self.fc2.forward(hidden)?.with_label("head.logits");
        logits.reshape(&[h1, w1, config.num_classes])
    }
}
