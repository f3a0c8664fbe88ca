//! Dense row-major f64 tensors of rank 1 to 4.
//!
//! Shapes follow the channels-last convention used throughout the crate:
//! `[C]`, `[N, C]`, `[H, W, C]`, `[B, H, W, C]`. A `[H, W, C]` map flattens
//! to `[H*W, C]` without moving any data, which is why every linear layer
//! here can work on rank-2 views of spatial features.
//!
//! All operations return fresh tensors; nothing aliases. In debug builds
//! every op asserts its result is finite, so NaN as soon as it appears,
//! not three layers later.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and matching data buffer.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim(
                "new",
                format!("rank must be 1..=4, got shape {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {expect} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: shape/data agree by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: shape/data agree by construction")
    }

    /// Rank-1 single-element tensor, the shape losses live in.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn checked(self, op: &str) -> Tensor {
        debug_assert!(self.is_finite(), "{op}: produced a non-finite value");
        self
    }

    /// Matrix product `[M, K] x [K, P] -> [M, P]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let ([m, k], [k2, p]) = (two_dims("matmul", self)?, two_dims("matmul", rhs)?);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let mut out = vec![0.0; m * p];
        // k-innermost-but-one loop order keeps the rhs rows contiguous.
        for i in 0..m {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[kk * p..(kk + 1) * p];
                let dst = &mut out[i * p..(i + 1) * p];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, p], data: out }.checked("matmul"))
    }

    /// `[M, N] -> [N, M]`.
    pub fn transpose_2d(&self) -> Result<Tensor> {
        let [m, n] = two_dims("transpose_2d", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() || new_shape.is_empty() || new_shape.len() > 4 {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {new_shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape: new_shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("mul", rhs, |a, b| a * b)
    }

    fn zip_with(&self, op: &str, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::dim(
                op,
                format!("shapes disagree: {:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data }.checked(op))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|&x| x * factor).collect();
        Tensor { shape: self.shape.clone(), data }.checked("scale")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Add a `[C]` bias to every row of a `[L, C]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let [_, c] = two_dims("add_bias", self)?;
        if bias.shape != [c] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match row width of {:?}", bias.shape, self.shape),
            ));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (d, &b) in row.iter_mut().zip(&bias.data) {
                *d += b;
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out }.checked("add_bias"))
    }

    /// Row-wise softmax of a `[L, C]` matrix, computed with the max-shift
    /// trick so large logits cannot overflow.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let [_, c] = two_dims("softmax_rows", self)?;
        if c == 0 {
            return Err(Error::dim("softmax_rows", "zero-width rows".to_string()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out }.checked("softmax_rows"))
    }

    /// Non-overlapping average pooling of a `[H, W, C]` map. The kernel must
    /// equal the stride and divide both spatial dims; anything else is a
    /// configuration error, not a silently-padded approximation.
    pub fn avg_pool(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let [h, w, c] = three_dims("avg_pool", self)?;
        if kernel == 0 || kernel != stride {
            return Err(Error::Config(format!(
                "avg_pool requires kernel == stride >= 1, got kernel {kernel}, stride {stride}"
            )));
        }
        if h % kernel != 0 || w % kernel != 0 {
            return Err(Error::Config(format!(
                "avg_pool kernel {kernel} does not divide spatial dims of {:?}",
                self.shape
            )));
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let inv = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let src = ((y * kernel + dy) * w + (x * kernel + dx)) * c;
                        let dst = (y * ow + x) * c;
                        for ch in 0..c {
                            out[dst + ch] += self.data[src + ch];
                        }
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        Ok(Tensor { shape: vec![oh, ow, c], data: out }.checked("avg_pool"))
    }

    /// Bilinear upsampling of a `[H, W, C]` map to `[out_h, out_w, C]`.
    ///
    /// Half-pixel (align_corners = false) sampling: a destination index `i`
    /// reads from `src = (i + 0.5) * in/out - 0.5`, clamped to the borders.
    /// Only upsampling is supported; `out >= in` is required per axis.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [h, w, c] = three_dims("bilinear_upsample", self)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config(format!(
                "bilinear_upsample target {out_h}x{out_w} has a zero dim"
            )));
        }
        if out_h < h || out_w < w {
            return Err(Error::Config(format!(
                "bilinear_upsample only upsamples: {:?} -> {out_h}x{out_w} shrinks an axis",
                self.shape
            )));
        }
        let mut out = vec![0.0; out_h * out_w * c];
        let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|i| src_coord(i, h, out_h)).collect();
        let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|i| src_coord(i, w, out_w)).collect();
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let dst = (oy * out_w + ox) * c;
                let i00 = (y0 * w + x0) * c;
                let i01 = (y0 * w + x1) * c;
                let i10 = (y1 * w + x0) * c;
                let i11 = (y1 * w + x1) * c;
                for ch in 0..c {
                    let top = self.data[i00 + ch] * (1.0 - fx) + self.data[i01 + ch] * fx;
                    let bot = self.data[i10 + ch] * (1.0 - fx) + self.data[i11 + ch] * fx;
                    out[dst + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(Tensor { shape: vec![out_h, out_w, c], data: out }.checked("bilinear_upsample"))
    }

    /// Concatenate along the channel (last) axis. All inputs must share rank
    /// (2 or 3) and every leading dimension.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = *parts.first().ok_or_else(|| {
            Error::dim("concat_channels", "no tensors to concatenate".to_string())
        })?;
        let rank = first.rank();
        if rank != 2 && rank != 3 {
            return Err(Error::dim(
                "concat_channels",
                format!("supports rank 2 or 3, got {:?}", first.shape),
            ));
        }
        let lead = &first.shape[..rank - 1];
        let mut total_c = 0;
        for (i, t) in parts.iter().enumerate() {
            if t.rank() != rank || &t.shape[..rank - 1] != lead {
                return Err(Error::dim(
                    "concat_channels",
                    format!(
                        "input {i} has shape {:?}, incompatible with first input {:?}",
                        t.shape, first.shape
                    ),
                ));
            }
            total_c += t.shape[rank - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for t in parts {
                let c = t.shape[rank - 1];
                out.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_c);
        Ok(Tensor { shape, data: out })
    }

    /// Take channels `[start, start + len)` from a rank-2 or rank-3 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.rank();
        if rank != 2 && rank != 3 {
            return Err(Error::dim(
                "slice_channels",
                format!("supports rank 2 or 3, got {:?}", self.shape),
            ));
        }
        let c = self.shape[rank - 1];
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_channels",
                format!("range {start}..{} out of bounds for {:?}", start + len, self.shape),
            ));
        }
        let rows: usize = self.shape[..rank - 1].iter().product();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape[..rank - 1].to_vec();
        shape.push(len);
        Ok(Tensor { shape, data: out })
    }

    /// Fold `factor x factor` spatial blocks into channels:
    /// `[H, W, C] -> [H/f, W/f, C * f^2]`. Within an output pixel the blocks
    /// are laid out row-major `(dy, dx)`, each carrying its C channels.
    pub fn space_to_channel(&self, factor: usize) -> Result<Tensor> {
        let [h, w, c] = three_dims("space_to_channel", self)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "space_to_channel factor {factor} does not divide spatial dims of {:?}",
                self.shape
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let oc = c * factor * factor;
        let mut out = vec![0.0; oh * ow * oc];
        for y in 0..oh {
            for x in 0..ow {
                let dst = (y * ow + x) * oc;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = ((y * factor + dy) * w + (x * factor + dx)) * c;
                        let off = dst + (dy * factor + dx) * c;
                        out[off..off + c].copy_from_slice(&self.data[src..src + c]);
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![oh, ow, oc], data: out })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; the workhorse of every
    /// oracle comparison in the test suite.
    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape, "max_abs_diff: shapes disagree");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Source sampling position for one output index of a bilinear upsample:
/// `(low index, high index, fraction toward high)`. Shared with the autodiff
/// backward pass, which scatters gradients through the same weights.
pub(crate) fn src_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

fn two_dims(op: &str, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape[..] {
        [a, b] => Ok([a, b]),
        _ => Err(Error::dim(op, format!("expected rank 2, got {:?}", t.shape))),
    }
}

fn three_dims(op: &str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::dim(op, format!("expected rank 3, got {:?}", t.shape))),
    }
}

/// GELU with the tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu`] (differentiating the tanh approximation itself).
pub fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;
