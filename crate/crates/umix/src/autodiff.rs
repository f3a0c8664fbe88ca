//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node; [`Var`] is a copyable
//! handle (tape reference + node id). Running [`Tape::backward`] on a scalar
//! loss walks the nodes in reverse, accumulating gradients into per-node
//! slots, so a value used twice receives the sum of both downstream
//! contributions.
//!
//! The tape is single-shot: one backward pass per tape. Training builds a
//! fresh tape per step, which keeps lifetimes trivial and makes "stale
//! gradient" bugs unrepresentable.
//!
//! [`grad_check`] closes the loop: it compares every analytic gradient
//! against central finite differences on freshly built tapes.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Label value for pixels excluded from the cross-entropy loss and its
/// gradient (e.g. targets produced by downsampling an unlabeled border).
pub const IGNORE_LABEL: u32 = u32::MAX;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias { x: usize, bias: usize },
    Matmul(usize, usize),
    Transpose2d(usize),
    Reshape(usize),
    SoftmaxRows(usize),
    AvgPool { x: usize, kernel: usize },
    BilinearUpsample(usize),
    ConcatChannels(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    SpaceToChannel { x: usize, factor: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Gelu(usize),
    Sum(usize),
    CrossEntropy { logits: usize, labels: Rc<Vec<u32>> },
    /// Test-only op whose backward pass is deliberately wrong; exists so the
    /// gradient checker can be shown to catch a broken derivative.
    #[cfg(test)]
    GeluBrokenGrad(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Matmul(..) => "matmul",
            Op::Transpose2d(..) => "transpose_2d",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::AvgPool { .. } => "avg_pool",
            Op::BilinearUpsample(..) => "bilinear_upsample",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::SpaceToChannel { .. } => "space_to_channel",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            #[cfg(test)]
            Op::GeluBrokenGrad(..) => "gelu_broken_grad",
        }
    }
}

/// Handle to a value on a tape. Cheap to copy; all arithmetic goes through
/// methods that record onto the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Where the first non-finite value on a tape appeared, for diagnostics.
#[derive(Debug)]
pub struct NonFiniteReport {
    pub node: usize,
    pub op: &'static str,
    /// The nearest label at or before the offending node, if any was set.
    pub label: Option<String>,
}

impl std::fmt::Display for NonFiniteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.label {
            Some(l) => write!(f, "first non-finite value in op '{}' (node {}) near layer '{l}'", self.op, self.node),
            None => write!(f, "first non-finite value in op '{}' (node {})", self.op, self.node),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Record an input value (parameter or data). Leaves are where gradients
    /// are read back after [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, label: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Concatenate several vars along the channel axis.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_channels of zero vars".to_string()));
        }
        for p in parts {
            self.check_same_tape(*p)?;
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat_channels(&tensors)?
        };
        Ok(self.push(value, Op::ConcatChannels(parts.iter().map(|p| p.id).collect())))
    }

    fn check_same_tape(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Usage(
                "variables from different tapes cannot be combined".to_string(),
            ))
        }
    }

    /// Reverse pass from a scalar loss. Each tape supports exactly one
    /// backward; re-running on the same tape is a usage error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_same_tape(loss)?;
        if self.backward_done.get() {
            return Err(Error::Usage(
                "backward already ran on this tape; build a new tape per step".to_string(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.shape() != [1] {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss of shape [1], got {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    // Keep the gradient for read-back.
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::Mul(a, b) => {
                    let da = g.mul(&nodes[*b].value)?;
                    let db = g.mul(&nodes[*a].value)?;
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Scale(a, f) => accumulate(&mut grads[*a], g.scale(*f)),
                Op::AddBias { x, bias } => {
                    let c = nodes[*bias].value.len();
                    let mut db = Tensor::zeros(&[c]);
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[*x], g);
                    accumulate(&mut grads[*bias], db);
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul(&nodes[*b].value.transpose_2d()?)?;
                    let db = nodes[*a].value.transpose_2d()?.matmul(&g)?;
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Transpose2d(a) => accumulate(&mut grads[*a], g.transpose_2d()?),
                Op::Reshape(a) => {
                    accumulate(&mut grads[*a], g.reshape(nodes[*a].value.shape())?)
                }
                Op::SoftmaxRows(a) => {
                    // ds = s (g - <g, s>) per row, with s this node's output.
                    let s = &node.value;
                    let c = s.shape()[1];
                    let mut dx = Tensor::zeros(s.shape());
                    for ((drow, srow), grow) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(s.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for ((d, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                            *d = sv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::AvgPool { x, kernel } => {
                    let shape = nodes[*x].value.shape();
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    let k = *kernel;
                    let inv = 1.0 / (k * k) as f64;
                    let ow = w / k;
                    let mut dx = Tensor::zeros(shape);
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((y / k) * ow + xx / k) * c;
                            let dst = (y * w + xx) * c;
                            for ch in 0..c {
                                dx.data_mut()[dst + ch] = g.data()[src + ch] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::BilinearUpsample(a) => {
                    let in_shape = nodes[*a].value.shape();
                    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
                    let (oh, ow) = (g.shape()[0], g.shape()[1]);
                    let mut dx = Tensor::zeros(in_shape);
                    for oy in 0..oh {
                        let (y0, y1, fy) = tensor::src_coord(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1, fx) = tensor::src_coord(ox, w, ow);
                            let gsrc = (oy * ow + ox) * c;
                            for ch in 0..c {
                                let gv = g.data()[gsrc + ch];
                                let d = dx.data_mut();
                                d[(y0 * w + x0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                                d[(y0 * w + x1) * c + ch] += gv * (1.0 - fy) * fx;
                                d[(y1 * w + x0) * c + ch] += gv * fy * (1.0 - fx);
                                d[(y1 * w + x1) * c + ch] += gv * fy * fx;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::ConcatChannels(parts) => {
                    let rank = g.rank();
                    let mut start = 0;
                    for p in parts {
                        let c = nodes[*p].value.shape()[rank - 1];
                        accumulate(&mut grads[*p], g.slice_channels(start, c)?);
                        start += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let in_shape = nodes[*x].value.shape();
                    let rank = in_shape.len();
                    let c_in = in_shape[rank - 1];
                    let c_out = g.shape()[rank - 1];
                    let rows: usize = in_shape[..rank - 1].iter().product();
                    let mut dx = Tensor::zeros(in_shape);
                    for r in 0..rows {
                        let src = &g.data()[r * c_out..(r + 1) * c_out];
                        let dst = &mut dx.data_mut()[r * c_in + start..r * c_in + start + c_out];
                        dst.copy_from_slice(src);
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::SpaceToChannel { x, factor } => {
                    let in_shape = nodes[*x].value.shape();
                    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
                    let f = *factor;
                    let (oh, ow, oc) = (h / f, w / f, c * f * f);
                    let mut dx = Tensor::zeros(in_shape);
                    for y in 0..oh {
                        for xx in 0..ow {
                            let src = (y * ow + xx) * oc;
                            for dy in 0..f {
                                for dxp in 0..f {
                                    let dst = ((y * f + dy) * w + (xx * f + dxp)) * c;
                                    let off = src + (dy * f + dxp) * c;
                                    dx.data_mut()[dst..dst + c]
                                        .copy_from_slice(&g.data()[off..off + c]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &nodes[*x].value;
                    let gv = &nodes[*gamma].value;
                    let c = xv.shape()[1];
                    let rows = xv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    for r in 0..rows {
                        let xr = &xv.data()[r * c..(r + 1) * c];
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let mean: f64 = xr.iter().sum::<f64>() / c as f64;
                        let var: f64 =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                        // d xhat = g * gamma; then the two projection terms
                        // remove the mean and the xhat component.
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gv.data()).map(|(&gg, &ga)| gg * ga).collect();
                        let m1: f64 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2: f64 =
                            dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / c as f64;
                        for i in 0..c {
                            dx.data_mut()[r * c + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                            dgamma.data_mut()[i] += gr[i] * xhat[i];
                            dbeta.data_mut()[i] += gr[i];
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*gamma], dgamma);
                    accumulate(&mut grads[*beta], dbeta);
                }
                Op::Gelu(a) => {
                    let dx = nodes[*a].value.map(tensor::gelu_prime).mul(&g)?;
                    accumulate(&mut grads[*a], dx);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[*a], Tensor::full(nodes[*a].value.shape(), g.data()[0]));
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = &nodes[*logits].value;
                    let (rows, k) = (lv.shape()[0], lv.shape()[1]);
                    let included = labels.iter().filter(|&&l| l != IGNORE_LABEL).count() as f64;
                    let gs = g.data()[0] / included;
                    let mut dl = Tensor::zeros(lv.shape());
                    for r in 0..rows {
                        let y = labels[r];
                        if y == IGNORE_LABEL {
                            continue;
                        }
                        let row = &lv.data()[r * k..(r + 1) * k];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for i in 0..k {
                            let p = (row[i] - max).exp() / sum;
                            let hot = if i as u32 == y { 1.0 } else { 0.0 };
                            dl.data_mut()[r * k + i] = gs * (p - hot);
                        }
                    }
                    accumulate(&mut grads[*logits], dl);
                }
                #[cfg(test)]
                Op::GeluBrokenGrad(a) => {
                    // Deliberately wrong: uses cos(x) instead of gelu'(x).
                    let dx = nodes[*a].value.map(f64::cos).mul(&g)?;
                    accumulate(&mut grads[*a], dx);
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Scan node values in creation order for the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<NonFiniteReport> {
        let nodes = self.nodes.borrow();
        let bad = nodes.iter().position(|n| !n.value.is_finite())?;
        let label = nodes[..=bad]
            .iter()
            .rev()
            .find_map(|n| n.label.clone());
        Some(NonFiniteReport { node: bad, op: nodes[bad].op.name(), label })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    *slot = Some(match slot.take() {
        None => delta,
        Some(t) => t.add(&delta).expect("gradient contributions share a shape"),
    });
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable lives on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Gradient accumulated for this node, if backward ran and the node
    /// participated in the loss.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grads.borrow().get(self.id).and_then(|g| g.clone())
    }

    /// Attach a diagnostic label; reported by non-finite scans.
    pub fn with_label(self, label: &str) -> Var<'t> {
        self.tape.nodes.borrow_mut()[self.id].label = Some(label.to_string());
        self
    }

    fn unary(self, value: Result<Tensor>, op: impl FnOnce(usize) -> Op) -> Result<Var<'t>> {
        Ok(self.tape.push(value?, op(self.id)))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        value: Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.tape.check_same_tape(rhs)?;
        Ok(self.tape.push(value?, op(self.id, rhs.id)))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = { let n = self.tape.nodes.borrow(); n[self.id].value.add(&n[rhs.id].value) };
        self.binary(rhs, v, Op::Add)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = { let n = self.tape.nodes.borrow(); n[self.id].value.mul(&n[rhs.id].value) };
        self.binary(rhs, v, Op::Mul)
    }

    pub fn scale(self, f: f64) -> Result<Var<'t>> {
        let v = Ok(self.tape.nodes.borrow()[self.id].value.scale(f));
        self.unary(v, |x| Op::Scale(x, f))
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let v = { let n = self.tape.nodes.borrow(); n[self.id].value.add_bias(&n[bias.id].value) };
        self.binary(bias, v, |x, b| Op::AddBias { x, bias: b })
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = { let n = self.tape.nodes.borrow(); n[self.id].value.matmul(&n[rhs.id].value) };
        self.binary(rhs, v, Op::Matmul)
    }

    pub fn transpose_2d(self) -> Result<Var<'t>> {
        let v = self.tape.nodes.borrow()[self.id].value.transpose_2d();
        self.unary(v, Op::Transpose2d)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.tape.nodes.borrow()[self.id].value.reshape(shape);
        self.unary(v, Op::Reshape)
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let v = self.tape.nodes.borrow()[self.id].value.softmax_rows();
        self.unary(v, Op::SoftmaxRows)
    }

    pub fn avg_pool(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        if kernel != stride {
            return Err(Error::Config(format!(
                "avg_pool requires kernel == stride, got kernel {kernel}, stride {stride}"
            )));
        }
        let v = self.tape.nodes.borrow()[self.id].value.avg_pool(kernel, stride);
        self.unary(v, |x| Op::AvgPool { x, kernel })
    }

    pub fn bilinear_upsample(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let v = self.tape.nodes.borrow()[self.id].value.bilinear_upsample(out_h, out_w);
        self.unary(v, Op::BilinearUpsample)
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.tape.nodes.borrow()[self.id].value.slice_channels(start, len);
        self.unary(v, |x| Op::SliceChannels { x, start })
    }

    pub fn space_to_channel(self, factor: usize) -> Result<Var<'t>> {
        let v = self.tape.nodes.borrow()[self.id].value.space_to_channel(factor);
        self.unary(v, |x| Op::SpaceToChannel { x, factor })
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape.check_same_tape(gamma)?;
        self.tape.check_same_tape(beta)?;
        let value = {
            let n = self.tape.nodes.borrow();
            let x = &n[self.id].value;
            let ga = &n[gamma.id].value;
            let be = &n[beta.id].value;
            layer_norm_forward(x, ga, be, eps)
        }?;
        Ok(self.tape.push(
            value,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
        ))
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        let v = Ok(self.tape.nodes.borrow()[self.id].value.map(tensor::gelu));
        self.unary(v, Op::Gelu)
    }

    /// Sum all elements into a scalar `[1]`.
    pub fn sum(self) -> Result<Var<'t>> {
        let v = Ok(Tensor::scalar(self.tape.nodes.borrow()[self.id].value.sum()));
        self.unary(v, Op::Sum)
    }

    /// Mean cross-entropy between `[L, K]` logits and `L` class labels.
    /// Rows labeled [`IGNORE_LABEL`] contribute neither loss nor gradient.
    pub fn cross_entropy(self, labels: &[u32]) -> Result<Var<'t>> {
        let value = {
            let n = self.tape.nodes.borrow();
            cross_entropy_forward(&n[self.id].value, labels)
        }?;
        Ok(self.tape.push(
            value,
            Op::CrossEntropy { logits: self.id, labels: Rc::new(labels.to_vec()) },
        ))
    }

    /// Test-only: gelu forward with a broken backward.
    #[cfg(test)]
    pub fn gelu_broken_grad(self) -> Result<Var<'t>> {
        let v = Ok(self.tape.nodes.borrow()[self.id].value.map(tensor::gelu));
        self.unary(v, Op::GeluBrokenGrad)
    }
}

/// Row-wise layer normalization of `[L, C]`: per row, subtract the mean,
/// divide by sqrt(population variance + eps), then scale/shift by `[C]`
/// gamma and beta.
fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(
            "layer_norm",
            format!("expected rank 2 input, got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} do not match row width of {:?}",
                gamma.shape(),
                beta.shape(),
                x.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean: f64 = row.iter().sum::<f64>() / c as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.data().iter().zip(beta.data())) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

fn cross_entropy_forward(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "cross_entropy",
            format!("expected rank 2 logits, got {:?}", logits.shape()),
        ));
    }
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != rows {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {rows} logit rows", labels.len()),
        ));
    }
    let mut total = 0.0;
    let mut included = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        if y as usize >= k {
            return Err(Error::Usage(format!(
                "label {y} at row {r} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        // -log softmax(y) = logsumexp - x_y, computed without forming
        // probabilities so extreme logits stay finite.
        total += (max + logsum) - row[y as usize];
        included += 1;
    }
    if included == 0 {
        return Err(Error::Usage(
            "cross_entropy: every label is the ignore marker".to_string(),
        ));
    }
    Ok(Tensor::scalar(total / included as f64))
}

/// Options for [`grad_check`]. `eps` is the half-width of the central
/// difference; `tol` the maximum accepted relative error.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, tol: 1e-6 }
    }
}

/// Worst-case comparison for one checked input tensor.
#[derive(Debug)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index, analytic value and numeric value at the worst
    /// element, for error messages worth reading.
    pub worst: (usize, f64, f64),
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    /// One line per leaf, the format the CLI prints.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for l in &self.leaves {
            let status = if l.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "  {status:4} {name:<40} max_rel_err {err:.3e}",
                name = l.name,
                err = l.max_rel_err
            );
        }
        s
    }
}

/// Denominator floor for the relative-error ratio. It doubles as an absolute
/// tolerance for gradients that are *exactly* zero by structure — e.g. the
/// key-projection bias in softmax attention, which shifts every score in a
/// row uniformly and therefore cannot move the output. For such elements the
/// analytic gradient is a clean zero while the central difference returns
/// pure rounding noise, `O(ulp(loss) / eps)` ~ 1e-10; the floor must sit far
/// enough above that noise that `noise / floor <= tol`, while staying small
/// enough that a genuinely dropped gradient (absolute size above
/// `tol * floor`) is still caught.
pub const GRAD_CHECK_ZERO_FLOOR: f64 = 1e-2;

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the scalar loss from the given leaves on the given
/// tape; it runs once for the analytic pass and twice per input element for
/// the numeric pass, always on a fresh tape. The relative error uses
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_ZERO_FLOOR)` so structurally zero
/// gradients compare by absolute finite-difference noise instead of an
/// exploding ratio.
pub fn grad_check<F>(
    build: F,
    inputs: &[(&str, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(opts.eps > 1e-7 && opts.eps < 1e-3) {
        return Err(Error::Usage(format!(
            "grad_check eps must lie in (1e-7, 1e-3), got {}",
            opts.eps
        )));
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    if loss.shape() != [1] {
        return Err(Error::Usage(format!(
            "grad_check loss must be a scalar [1], got {:?}",
            loss.shape()
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, t))| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    // Numeric pass: two fresh forward evaluations per input element.
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&tape, &vars)?;
        Ok(loss.value().data()[0])
    };
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();

    let mut leaves = Vec::new();
    for (li, (name, t)) in inputs.iter().enumerate() {
        let mut max_rel = 0.0;
        let mut worst = (0, 0.0, 0.0);
        for e in 0..t.len() {
            let mut plus = base.clone();
            plus[li].data_mut()[e] += opts.eps;
            let mut minus = base.clone();
            minus[li].data_mut()[e] -= opts.eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * opts.eps);
            let a = analytic[li].data()[e];
            let rel =
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_ZERO_FLOOR);
            if rel >= max_rel {
                max_rel = rel;
                worst = (e, a, numeric);
            }
        }
        leaves.push(LeafReport { name: name.to_string(), max_rel_err: max_rel, worst });
    }
    Ok(GradCheckReport { leaves, tol: opts.tol })
}
