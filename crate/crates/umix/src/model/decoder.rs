//! The U-shaped mix-attention decoder.
//!
//! Stage i (i = 1..N) queries the lateral encoder feature E_{N-i+1} and
//! emits D_{N-i+1} with exactly that feature's shape. Its keys and values
//! come from a per-stage *kv plan*: the ordered list of source features,
//! each pooled down to a common resolution and passed through a
//! channel-preserving linear before everything concatenates channel-wise
//! into one `[L_kv, sum C]` matrix.
//!
//! The plan is where the attention variants and the ablation arms differ,
//! so it is computed by one function — [`kv_plan`] — consumed by parameter
//! initialization, the forward pass, *and* the analytic FLOP model. The
//! three can therefore never drift apart.
//!
//! Plan shapes per variant:
//! - **mix** (the architecture): all N ladder stages, encoder features
//!   progressively replaced by decoder outputs as they become available
//!   (when propagation is on); every source pooled to the stage-N
//!   resolution; sources below stage N get a linear, stage N joins
//!   untouched. With `plus_midpoint`, the encoder stage-3 midpoint slots in
//!   between the stage N-1 and stage N entries.
//! - **cross-lowest** (baseline): the single source E_1 at its native
//!   resolution. With propagation, stage 1 reads E_N and stage i >= 2 reads
//!   the immediately preceding decoder output, pooled to stage-N
//!   resolution.
//! - **self**: the query feature itself, untouched.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::model::config::{AttentionVariant, ModelConfig};
use crate::model::feature::{select_feature_set, FeatureMap, FeatureOrigin};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One key/value source feeding a decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvSource {
    pub origin: FeatureOrigin,
    /// Ladder stage the feature lives at (midpoint: 3).
    pub stage: usize,
    /// Non-overlapping average-pool ratio applied before flattening (1 =
    /// no pooling).
    pub pool: usize,
    /// Whether a channel-preserving linear follows the pooling.
    pub reduce: bool,
}

impl KvSource {
    pub fn channels(&self, config: &ModelConfig) -> usize {
        config.channels[self.stage - 1]
    }

    /// Sequence length this source contributes after pooling/flattening.
    pub fn rows(&self, config: &ModelConfig) -> usize {
        let (h, w) = config.stage_size(self.stage);
        (h / self.pool) * (w / self.pool)
    }
}

/// The ordered key/value sources for decoder stage `stage_i` under the
/// configured attention variant. See the module docs for the exact rules.
pub fn kv_plan(config: &ModelConfig, stage_i: usize) -> Result<Vec<KvSource>> {
    let n = config.num_stages;
    if stage_i == 0 || stage_i > n {
        return Err(Error::Usage(format!(
            "decoder stage {stage_i} out of range for {n} stages"
        )));
    }
    let query_stage = n - stage_i + 1;
    let plan = match config.attention_variant {
        AttentionVariant::Mix => {
            let mut plan: Vec<KvSource> = (1..=n)
                .map(|j| {
                    let origin = if config.propagate && j > query_stage {
                        FeatureOrigin::Decoder
                    } else {
                        FeatureOrigin::Encoder
                    };
                    KvSource { origin, stage: j, pool: config.pool_ratio(j), reduce: j < n }
                })
                .collect();
            if config.plus_midpoint {
                plan.insert(
                    n - 1,
                    KvSource {
                        origin: FeatureOrigin::EncoderMidpoint,
                        stage: 3,
                        pool: config.pool_ratio(3),
                        reduce: true,
                    },
                );
            }
            plan
        }
        AttentionVariant::CrossLowest => {
            if !config.propagate {
                // The plain baseline: decode every stage against E_1 at its
                // native resolution.
                vec![KvSource { origin: FeatureOrigin::Encoder, stage: 1, pool: 1, reduce: true }]
            } else if stage_i == 1 {
                vec![KvSource { origin: FeatureOrigin::Encoder, stage: n, pool: 1, reduce: true }]
            } else {
                // The previous stage's output, pooled to the coarsest size.
                let j = n - stage_i + 2;
                vec![KvSource {
                    origin: FeatureOrigin::Decoder,
                    stage: j,
                    pool: config.pool_ratio(j),
                    reduce: true,
                }]
            }
        }
        AttentionVariant::SelfAttention => {
            vec![KvSource {
                origin: FeatureOrigin::Encoder,
                stage: query_stage,
                pool: 1,
                reduce: false,
            }]
        }
    };
    debug_assert!(
        plan.windows(2).all(|w| w[0].rows(config) == w[1].rows(config)),
        "kv sources must agree on sequence length after pooling"
    );
    Ok(plan)
}

/// Total key/value channel width for a stage (the attention C_kv).
pub fn kv_channels(config: &ModelConfig, stage_i: usize) -> Result<usize> {
    Ok(kv_plan(config, stage_i)?.iter().map(|s| s.channels(config)).sum())
}

/// One decoder stage: three norms, mix-attention, per-source reduce
/// linears, and the FFN.
#[derive(Debug, Clone)]
pub struct DecoderStage<T> {
    /// 1-based decoder stage index i.
    pub stage_i: usize,
    /// Ladder stage of the query feature and the output: N-i+1.
    pub query_stage: usize,
    pub norm_q: LayerNorm<T>,
    pub norm_kv: LayerNorm<T>,
    pub norm_post: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    /// Parallel to the kv plan; `Some` exactly where the plan says
    /// `reduce`.
    pub reduces: Vec<Option<Linear<T>>>,
    pub ffn: FeedForward<T>,
}

impl DecoderStage<Tensor> {
    fn init(
        config: &ModelConfig,
        stage_i: usize,
        rng: &mut ChaCha8Rng,
        midpoint_rng: &mut ChaCha8Rng,
    ) -> Result<DecoderStage<Tensor>> {
        let plan = kv_plan(config, stage_i)?;
        let query_stage = config.num_stages - stage_i + 1;
        let c_q = config.channels[query_stage - 1];
        let c_kv: usize = plan.iter().map(|s| s.channels(config)).sum();
        let reduces = plan
            .iter()
            .map(|s| {
                s.reduce.then(|| {
                    let c = s.channels(config);
                    // Midpoint layers draw from their own stream so the
                    // shared parameters are bit-identical with the plus
                    // variant on or off.
                    if s.origin == FeatureOrigin::EncoderMidpoint {
                        Linear::init(c, c, midpoint_rng)
                    } else {
                        Linear::init(c, c, rng)
                    }
                })
            })
            .collect();
        Ok(DecoderStage {
            stage_i,
            query_stage,
            norm_q: LayerNorm::init(c_q),
            norm_kv: LayerNorm::init(c_kv),
            norm_post: LayerNorm::init(c_q),
            attention: MultiHeadAttention::init(c_q, c_kv, config.heads[query_stage - 1], rng)?,
            reduces,
            ffn: FeedForward::init(c_q, config.ffn_ratio, rng),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> DecoderStage<Var<'t>> {
        DecoderStage {
            stage_i: self.stage_i,
            query_stage: self.query_stage,
            norm_q: self.norm_q.bind(tape),
            norm_kv: self.norm_kv.bind(tape),
            norm_post: self.norm_post.bind(tape),
            attention: self.attention.bind(tape),
            reduces: self.reduces.iter().map(|r| r.as_ref().map(|l| l.bind(tape))).collect(),
            ffn: self.ffn.bind(tape),
        }
    }
}

impl<'t> DecoderStage<Var<'t>> {
    /// Pool, flatten, project and concatenate this stage's kv sources.
    pub fn assemble_kv(
        &self,
        config: &ModelConfig,
        encoder: &[FeatureMap<Var<'t>>],
        decoder_so_far: &[FeatureMap<Var<'t>>],
        midpoint: Option<&FeatureMap<Var<'t>>>,
    ) -> Result<Var<'t>> {
        let plan = kv_plan(config, self.stage_i)?;
        let mut parts = Vec::with_capacity(plan.len());
        for (source, reduce) in plan.iter().zip(&self.reduces) {
            let feature = match source.origin {
                FeatureOrigin::Encoder => encoder
                    .iter()
                    .find(|f| f.stage == source.stage && f.origin == FeatureOrigin::Encoder)
                    .ok_or_else(|| {
                        Error::Usage(format!("encoder ladder is missing E_{}", source.stage))
                    })?,
                FeatureOrigin::Decoder => decoder_so_far
                    .iter()
                    .find(|f| f.stage == source.stage && f.origin == FeatureOrigin::Decoder)
                    .ok_or_else(|| {
                        Error::Usage(format!(
                            "decoder stage {} needs D_{}, which has not been produced yet",
                            self.stage_i, source.stage
                        ))
                    })?,
                FeatureOrigin::EncoderMidpoint => midpoint.ok_or_else(|| {
                    Error::Config(
                        "plus_midpoint is enabled but no midpoint feature was provided"
                            .to_string(),
                    )
                })?,
            };
            check_feature_shape(config, feature)?;
            let mut x = feature.data;
            if source.pool > 1 {
                x = x.avg_pool(source.pool, source.pool)?;
            }
            let shape = x.shape();
            x = x.reshape(&[shape[0] * shape[1], shape[2]])?;
            if let Some(lin) = reduce {
                x = lin.forward(x)?;
            }
            parts.push(x);
        }
        let kv = if parts.len() == 1 {
            parts[0]
        } else {
            parts[0].tape().concat_channels(&parts)?
        };
        Ok(kv.with_label(&format!("decoder.stage{}.kv", self.stage_i)))
    }

    /// Full stage: attention over normalized inputs with a query residual,
    /// post-norm, FFN with residual; output mirrors the query shape.
    pub fn forward(
        &self,
        config: &ModelConfig,
        encoder: &[FeatureMap<Var<'t>>],
        decoder_so_far: &[FeatureMap<Var<'t>>],
        midpoint: Option<&FeatureMap<Var<'t>>>,
    ) -> Result<FeatureMap<Var<'t>>> {
        let query = encoder
            .iter()
            .find(|f| f.stage == self.query_stage && f.origin == FeatureOrigin::Encoder)
            .ok_or_else(|| {
                Error::Usage(format!("encoder ladder is missing E_{}", self.query_stage))
            })?;
        check_feature_shape(config, query)?;
        let (h, w) = config.stage_size(self.query_stage);
        let c_q = config.channels[self.query_stage - 1];
        let i = self.stage_i;

        let kv = self.assemble_kv(config, encoder, decoder_so_far, midpoint)?;
        let x_q = query.data.reshape(&[h * w, c_q])?;
        let nq = self.norm_q.forward(x_q)?;
        let nkv = self.norm_kv.forward(kv)?;
        let att = self
            .attention
            .forward(nq, nkv)?
            .with_label(&format!("decoder.stage{i}.attention"));
        let a = self.norm_post.forward(att.add(nq)?)?;
        let out = self
            .ffn
            .forward(a)?
            .add(a)?
            .with_label(&format!("decoder.stage{i}.ffn"));
        Ok(FeatureMap::decoder(out.reshape(&[h, w, c_q])?, self.query_stage))
    }
}

/// The full stage sequence.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub stages: Vec<DecoderStage<T>>,
}

impl Decoder<Tensor> {
    pub fn init(
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
        midpoint_rng: &mut ChaCha8Rng,
    ) -> Result<Decoder<Tensor>> {
        let stages = (1..=config.num_stages)
            .map(|i| DecoderStage::init(config, i, rng, midpoint_rng))
            .collect::<Result<_>>()?;
        Ok(Decoder { stages })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Decoder<Var<'t>> {
        Decoder { stages: self.stages.iter().map(|s| s.bind(tape)).collect() }
    }
}

impl<'t> Decoder<Var<'t>> {
    /// Run all stages in order; returns D_N..D_1 in emission order.
    pub fn forward(
        &self,
        config: &ModelConfig,
        encoder: &[FeatureMap<Var<'t>>],
        midpoint: Option<&FeatureMap<Var<'t>>>,
    ) -> Result<Vec<FeatureMap<Var<'t>>>> {
        let mut produced: Vec<FeatureMap<Var<'t>>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            // The mix variant's source bookkeeping must match the piecewise
            // selection rule; assert the wiring agrees while running.
            if config.attention_variant == AttentionVariant::Mix && config.propagate {
                debug_assert!(
                    select_feature_set(encoder, &produced, stage.stage_i).is_ok(),
                    "stage {} ran before its kv dependencies existed",
                    stage.stage_i
                );
            }
            let d = stage.forward(config, encoder, &produced, midpoint)?;
            produced.push(d);
        }
        Ok(produced)
    }
}

/// Shape check for any feature entering the decoder: resolution and
/// channels must sit exactly on the configured ladder for its stage.
fn check_feature_shape(config: &ModelConfig, f: &FeatureMap<Var<'_>>) -> Result<()> {
    let (h, w) = config.stage_size(f.stage);
    let c = config.channels[f.stage - 1];
    let got = f.data.shape();
    if got != [h, w, c] {
        return Err(Error::Dim {
            op: "decoder".to_string(),
            detail: format!(
                "stage-{} feature has shape {got:?}, expected [{h}, {w}, {c}] ({:?} origin)",
                f.stage, f.origin
            ),
        });
    }
    Ok(())
}
