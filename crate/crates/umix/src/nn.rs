//! Neural network layers, generic over their parameter storage.
//!
//! Every layer is a plain struct `Layer<T>` where `T` is either [`Tensor`]
//! (the persistent model, what the optimizer updates and checkpoints
//! serialize) or [`Var`] (the same layer bound onto a tape for one
//! differentiable forward pass). [`SegModel::bind`]-style plumbing walks the
//! two shapes in lockstep via [`visit`]/[`visit_mut`]-style methods here, so
//! parameter order is defined once per layer and shared by the optimizer,
//! the checkpoint format, and the tape.
//!
//! [`SegModel::bind`]: crate::model::SegModel::bind

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::rng::trunc_normal_vec;
use crate::tensor::Tensor;
use crate::Result;

/// Epsilon inside every layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Fully connected layer: `y = x W + b`, weight `[C_in, C_out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    /// Truncated-normal weights with sigma = 1/sqrt(C_in), zero bias.
    pub fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Linear<Tensor> {
        let sigma = 1.0 / (c_in as f64).sqrt();
        let weight = Tensor::new(&[c_in, c_out], trunc_normal_vec(rng, c_in * c_out, sigma))
            .expect("init shape/data agree");
        Linear { weight, bias: Tensor::zeros(&[c_out]) }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Linear<Var<'t>> {
        Linear { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }
}

impl<'t> Linear<Var<'t>> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add_bias(self.bias)
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNorm<Tensor> {
    pub fn init(c: usize) -> LayerNorm<Tensor> {
        LayerNorm { gamma: Tensor::full(&[c], 1.0), beta: Tensor::zeros(&[c]) }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> LayerNorm<Var<'t>> {
        LayerNorm { gamma: tape.leaf(self.gamma.clone()), beta: tape.leaf(self.beta.clone()) }
    }
}

impl<'t> LayerNorm<Var<'t>> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// Two-layer MLP with GELU in between; the channel-mixing half of each
/// decoder stage. Hidden width = `ratio * c`.
#[derive(Debug, Clone)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl FeedForward<Tensor> {
    pub fn init(c: usize, ratio: usize, rng: &mut ChaCha8Rng) -> FeedForward<Tensor> {
        FeedForward {
            fc1: Linear::init(c, c * ratio, rng),
            fc2: Linear::init(c * ratio, c, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> FeedForward<Var<'t>> {
        FeedForward { fc1: self.fc1.bind(tape), fc2: self.fc2.bind(tape) }
    }
}

impl<'t> FeedForward<Var<'t>> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from a `[L_q, C_q]` feature, keys and values from a
/// `[L_kv, C_kv]` feature (the two may differ in both length and width).
/// Internally each of the `h` heads works in `d_k = C_q / h` dimensions;
/// the per-head outputs concatenate back to `C_q` before the output
/// projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub num_heads: usize,
    pub head_dim: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

/// Default head count for a query width: one head per 32 channels, floored,
/// never zero.
pub fn default_num_heads(c_q: usize) -> usize {
    (c_q / 32).max(1)
}

impl MultiHeadAttention<Tensor> {
    pub fn init(
        c_q: usize,
        c_kv: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> crate::Result<MultiHeadAttention<Tensor>> {
        if num_heads == 0 || c_q % num_heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention heads ({num_heads}) must divide the query width ({c_q})"
            )));
        }
        let head_dim = c_q / num_heads;
        Ok(MultiHeadAttention {
            num_heads,
            head_dim,
            wq: Linear::init(c_q, num_heads * head_dim, rng),
            wk: Linear::init(c_kv, num_heads * head_dim, rng),
            wv: Linear::init(c_kv, num_heads * head_dim, rng),
            wo: Linear::init(num_heads * head_dim, c_q, rng),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> MultiHeadAttention<Var<'t>> {
        MultiHeadAttention {
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            wq: self.wq.bind(tape),
            wk: self.wk.bind(tape),
            wv: self.wv.bind(tape),
            wo: self.wo.bind(tape),
        }
    }
}

impl<'t> MultiHeadAttention<Var<'t>> {
    pub fn forward(&self, x_q: Var<'t>, x_kv: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(x_q, x_kv)?.0)
    }

    /// Forward pass that also returns each head's attention matrix
    /// (`[L_q, L_kv]`, rows already softmaxed). The invariant tests read
    /// these directly.
    pub fn forward_with_weights(
        &self,
        x_q: Var<'t>,
        x_kv: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let q = self.wq.forward(x_q)?;
        let k = self.wk.forward(x_kv)?;
        let v = self.wv.forward(x_kv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let off = h * self.head_dim;
            let qh = q.slice_channels(off, self.head_dim)?;
            let kh = k.slice_channels(off, self.head_dim)?;
            let vh = v.slice_channels(off, self.head_dim)?;
            let attn = qh.matmul(kh.transpose_2d()?)?.scale(scale)?.softmax_rows()?;
            outputs.push(attn.matmul(vh)?);
            weights.push(attn);
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            x_q.tape().concat_channels(&outputs)?
        };
        Ok((self.wo.forward(merged)?, weights))
    }
}
