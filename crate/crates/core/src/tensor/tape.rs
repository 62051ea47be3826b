use super::conv::{self, Geometry};
use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, T> {
    /// Normalize with the biased per-channel statistics of the input itself.
    Batch,
    /// Normalize with externally supplied mean and (biased) variance.
    Fixed { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    ConvTranspose { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Elu(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    WeightedBce { probs: Var, targets: Vec<T>, alpha: T },
    AddN(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Gather(Vec<(Var, usize)>),
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: bool,
}

/// Records forward operations and replays them in reverse to compute gradients.
///
/// A tape is single-owner. Gradients are only retained for leaves created with
/// `requires_grad`; they accumulate across repeated [`Tape::backward`] calls.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    feature_bytes: usize,
    param_bytes: usize,
    peak_backward_bytes: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn spatial(shape: &[usize]) -> Result<[usize; 3]> {
    match shape.len() {
        4 => Ok([shape[1], shape[2], shape[3]]),
        5 => Ok([shape[2], shape[3], shape[4]]),
        _ => dim_err(format!("expected [C,D,H,W] or [B,C,D,H,W], got {shape:?}")),
    }
}

// (batch, channels) of a 4D or 5D volume tensor
fn batch_channels(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 5 {
        (shape[0], shape[1])
    } else {
        (1, shape[0])
    }
}

fn volume_shape(batched: bool, batch: usize, channels: usize, side: [usize; 3]) -> Vec<usize> {
    let mut s = Vec::with_capacity(5);
    if batched {
        s.push(batch);
    }
    s.push(channels);
    s.extend_from_slice(&side);
    s
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), feature_bytes: 0, param_bytes: 0, peak_backward_bytes: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        let bytes = value.len() * T::BYTES;
        if param {
            self.param_bytes += bytes;
        } else {
            self.feature_bytes += bytes;
        }
        self.nodes.push(Node { value, op, requires_grad, param });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, false, "constant")
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, false, "leaf")
    }

    /// Trainable parameter. Counted separately from feature memory.
    pub fn parameter(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, true, "parameter")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Bytes held by non-parameter values recorded so far.
    pub fn feature_bytes(&self) -> usize {
        self.feature_bytes
    }

    /// Highest total of values plus live gradient buffers seen so far.
    pub fn peak_bytes(&self) -> usize {
        (self.feature_bytes + self.param_bytes).max(self.peak_backward_bytes)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (g, cout, batched) = self.conv_geometry(x, w, b, stride, padding)?;
        let out = conv::conv_forward(self.value(x).data(), &g, self.value(w).data(), self.value(b).data());
        let shape = volume_shape(batched, g.batch, cout, g.out);
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(shape, out)?, Op::Conv { x, w, b, stride, padding }, rg, false, "conv3d")
    }

    fn conv_geometry(&self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<(Geometry, usize, bool)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let side = spatial(xs)?;
        let (batch, cin) = batch_channels(xs);
        if ws.len() != 5 || ws[1] != cin || ws[2] != ws[3] || ws[3] != ws[4] {
            return dim_err(format!("conv3d weight {ws:?} incompatible with input {xs:?}"));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.shape(b) != [cout] {
            return dim_err(format!("conv3d bias {:?} for {cout} output channels", self.shape(b)));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv::conv_out_side(side[a], k, stride, padding)
                .ok_or_else(|| Error::Dimension(format!("conv3d kernel {k} does not fit input {xs:?}")))?;
        }
        let g = Geometry { batch, channels: cin, image: side, out, kernel: k, stride, padding };
        Ok((g, cout, xs.len() == 5))
    }

    /// Transposed 3D convolution; weight is `[C_in, C_out, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (g, batched) = self.conv_transpose_geometry(x, w, b, stride, padding)?;
        let out = conv::conv_transpose_forward(self.value(x).data(), &g, self.value(w).data(), self.value(b).data());
        let shape = volume_shape(batched, g.batch, g.channels, g.image);
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::new(shape, out)?,
            Op::ConvTranspose { x, w, b, stride, padding },
            rg,
            false,
            "conv_transpose3d",
        )
    }

    fn conv_transpose_geometry(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<(Geometry, bool)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let side = spatial(xs)?;
        let (batch, cin) = batch_channels(xs);
        if ws.len() != 5 || ws[0] != cin || ws[2] != ws[3] || ws[3] != ws[4] {
            return dim_err(format!("conv_transpose3d weight {ws:?} incompatible with input {xs:?}"));
        }
        let (cout, k) = (ws[1], ws[2]);
        if self.shape(b) != [cout] {
            return dim_err(format!("conv_transpose3d bias {:?} for {cout} channels", self.shape(b)));
        }
        let mut image = [0; 3];
        for a in 0..3 {
            image[a] = conv::conv_transpose_out_side(side[a], k, stride, padding)
                .ok_or_else(|| Error::Dimension(format!("bad transposed conv geometry for {xs:?}")))?;
            if conv::conv_out_side(image[a], k, stride, padding) != Some(side[a]) {
                return dim_err(format!("transposed conv geometry for {xs:?} is not invertible"));
            }
        }
        let g = Geometry { batch, channels: cout, image, out: side, kernel: k, stride, padding };
        Ok((g, xs.len() == 5))
    }

    /// Per-channel normalization over every axis except dim 1 (channels).
    /// Returns the output and, for [`BnStats::Batch`], the biased batch mean and variance.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return dim_err(format!("batch_norm needs [B, C, ...], got {xs:?}"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let positions: usize = xs[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return dim_err("batch_norm gamma/beta length differs from channel count");
        }
        let xd = self.value(x).data();
        let count = T::from_usize(batch * positions).unwrap();
        let eps = T::lit(eps);
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let mut mean = conv::channel_sums(xd, batch, channels, positions);
                mean.iter_mut().for_each(|m| *m = *m / count);
                let mut var = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let m = mean[c];
                        var[c] += xd[(b * channels + c) * positions..][..positions]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / count);
                (mean, var, true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return dim_err("batch_norm fixed statistics have wrong length");
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * positions;
                for i in off..off + positions {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            rg,
            false,
            "batch_norm",
        )?;
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// `max(0,x) + min(0, e^x - 1)`
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| elu(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Elu(x), rg, false, "elu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, false, "sigmoid")
    }

    /// Affine map `x W^T + b` for `x` of shape `[d_in]` or `[B, d_in]`, `W` of shape `[d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, din) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => return dim_err(format!("linear input must be 1D or 2D, got {xs:?}")),
        };
        if ws.len() != 2 || ws[1] != din || self.shape(b) != [ws[0]] {
            return dim_err(format!("linear weight {ws:?} / bias {:?} vs input {xs:?}", self.shape(b)));
        }
        let dout = ws[0];
        let mut out = vec![T::zero(); batch * dout];
        T::gemm(batch, din, dout, self.value(x).data(), false, self.value(w).data(), true, T::zero(), &mut out);
        let bias = self.value(b).data();
        out.chunks_mut(dout).for_each(|row| row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv));
        let shape = if xs.len() == 1 { vec![dout] } else { vec![batch, dout] };
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg, false, "linear")
    }

    /// Summed `-log softmax(logits)[target]` over rows of `[B, C]` (or a single `[C]`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let classes = *ls.last().unwrap();
        let rows = self.value(logits).len() / classes;
        if ls.len() > 2 || rows != targets.len() {
            return dim_err(format!("{} targets for logits of shape {ls:?}", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!("target {t} out of {classes} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); data.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * classes..].iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
            loss += sum.ln() + max - row[t];
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, probs, targets: targets.to_vec() },
            rg,
            false,
            "softmax_cross_entropy",
        )
    }

    /// Summed `-alpha t log(o) - (1-t) log(1-o)` over all elements of `probs`.
    pub fn weighted_bce(&mut self, probs: Var, targets: &[T], alpha: f64) -> Result<Var> {
        let p = self.value(probs).data();
        if p.len() != targets.len() {
            return dim_err(format!("{} targets for {} outputs", targets.len(), p.len()));
        }
        let alpha = T::lit(alpha);
        let (lo, hi) = bce_clamp::<T>();
        let loss: T = p
            .iter()
            .zip(targets)
            .map(|(&o, &t)| {
                let o = o.max(lo).min(hi);
                -(alpha * t * o.ln() + (T::one() - t) * (T::one() - o).ln())
            })
            .sum();
        let rg = self.rg(&[probs]);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedBce { probs, targets: targets.to_vec(), alpha },
            rg,
            false,
            "weighted_bce",
        )
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::EmptyInput("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = self.value(first).data().to_vec();
        for &v in &xs[1..] {
            if self.shape(v) != shape.as_slice() {
                return dim_err(format!("add_n shape {:?} vs {shape:?}", self.shape(v)));
            }
            acc.iter_mut().zip(self.value(v).data()).for_each(|(a, &b)| *a += b);
        }
        let rg = self.rg(xs);
        self.push(Tensor::new(shape, acc)?, Op::AddN(xs.to_vec()), rg, false, "add_n")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("mul operands differ in shape");
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, false, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * f).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, f), rg, false, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, false, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, false, "reshape")
    }

    /// Stacks item `i` (along dim 0) of each source into a new batch.
    /// All items must share a shape.
    pub fn gather(&mut self, items: &[(Var, usize)]) -> Result<Var> {
        let &(v0, _) = items.first().ok_or_else(|| Error::EmptyInput("gather of nothing".into()))?;
        let item_shape = self.shape(v0)[1..].to_vec();
        let item_len: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(item_len * items.len());
        for &(v, i) in items {
            let s = self.shape(v);
            if s[1..] != item_shape[..] || i >= s[0] {
                return dim_err(format!("gather item {i} of {s:?} vs item shape {item_shape:?}"));
            }
            data.extend_from_slice(&self.value(v).data()[i * item_len..(i + 1) * item_len]);
        }
        let mut shape = vec![items.len()];
        shape.extend(item_shape);
        let vars: Vec<Var> = items.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::new(shape, data)?, Op::Gather(items.to_vec()), rg, false, "gather")
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return dim_err("dropout mask length mismatch");
        }
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg, false, "dropout")
    }

    /// Reverse pass from a scalar. Gradients of `requires_grad` leaves are
    /// added to whatever earlier passes left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut tmp: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        tmp[loss.0] = Some(vec![T::one()]);
        let base = self.feature_bytes + self.param_bytes;
        let mut live = T::BYTES;
        for i in (0..n).rev() {
            let Some(g) = tmp[i].take() else { continue };
            live -= g.len() * T::BYTES;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            for (v, dv) in self.backward_op(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut tmp[v.0] {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, &b)| *a += b),
                    slot @ None => {
                        live += dv.len() * T::BYTES;
                        *slot = Some(dv);
                    }
                }
            }
            self.peak_backward_bytes = self.peak_backward_bytes.max(base + live);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, stride, padding } => {
                let (geo, cout, _) = self.conv_geometry(x, w, b, stride, padding).expect("validated in forward");
                let gr = conv::conv_backward(self.value(x).data(), &geo, self.value(w).data(), cout, g, self.needs(x));
                if let Some(dx) = gr.dx {
                    out.push((x, dx));
                }
                out.push((w, gr.dw));
                out.push((b, gr.db));
            }
            &Op::ConvTranspose { x, w, b, stride, padding } => {
                let (geo, _) = self.conv_transpose_geometry(x, w, b, stride, padding).expect("validated in forward");
                let gr =
                    conv::conv_transpose_backward(self.value(x).data(), &geo, self.value(w).data(), g, self.needs(x));
                if let Some(dx) = gr.dx {
                    out.push((x, dx));
                }
                out.push((w, gr.dw));
                out.push((b, gr.db));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.shape(*x);
                let (batch, channels) = (shape[0], shape[1]);
                let positions: usize = shape[2..].iter().product();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * positions;
                        for j in off..off + positions {
                            dgamma[c] += g[j] * xhat[j];
                            dbeta[c] += g[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(batch * positions).unwrap();
                    for bi in 0..batch {
                        for c in 0..channels {
                            let off = (bi * channels + c) * positions;
                            let scale = gm[c] * inv_std[c];
                            for j in off..off + positions {
                                dx[j] = if *batch_stats {
                                    scale * (g[j] - dbeta[c] / m - xhat[j] * dgamma[c] / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(g).map(|(&v, &gi)| if v > T::zero() { gi } else { gi * v.exp() }).collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(g).map(|(&s, &gi)| gi * s * (T::one() - s)).collect();
                out.push((*x, dx));
            }
            &Op::Linear { x, w, b } => {
                let ws = self.shape(w);
                let (dout, din) = (ws[0], ws[1]);
                let batch = g.len() / dout;
                if self.needs(x) {
                    let mut dx = vec![T::zero(); batch * din];
                    T::gemm(batch, dout, din, g, false, self.value(w).data(), false, T::zero(), &mut dx);
                    out.push((x, dx));
                }
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, batch, din, g, true, self.value(x).data(), false, T::zero(), &mut dw);
                out.push((w, dw));
                let mut db = vec![T::zero(); dout];
                g.chunks(dout).for_each(|row| db.iter_mut().zip(row).for_each(|(d, &r)| *d += r));
                out.push((b, db));
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                let classes = probs.len() / targets.len();
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * classes + t] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= g[0]);
                out.push((*logits, d));
            }
            Op::WeightedBce { probs, targets, alpha } => {
                let (lo, hi) = bce_clamp::<T>();
                let p = self.value(*probs).data();
                let d = p
                    .iter()
                    .zip(targets)
                    .map(|(&o, &t)| {
                        let o = o.max(lo).min(hi);
                        g[0] * (-*alpha * t / o + (T::one() - t) / (T::one() - o))
                    })
                    .collect();
                out.push((*probs, d));
            }
            Op::AddN(xs) => {
                for &x in xs {
                    out.push((x, g.to_vec()));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                out.push((a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                out.push((b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
            }
            &Op::Scale(x, f) => out.push((x, g.iter().map(|&v| v * f).collect())),
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Gather(items) => {
                let item_len = g.len() / items.len();
                let mut per_source: Vec<(Var, Vec<T>)> = Vec::new();
                for (k, &(v, idx)) in items.iter().enumerate() {
                    if !self.needs(v) {
                        continue;
                    }
                    let slot = match per_source.iter().position(|(s, _)| *s == v) {
                        Some(p) => p,
                        None => {
                            per_source.push((v, vec![T::zero(); self.value(v).len()]));
                            per_source.len() - 1
                        }
                    };
                    let d = &mut per_source[slot].1[idx * item_len..(idx + 1) * item_len];
                    d.iter_mut().zip(&g[k * item_len..(k + 1) * item_len]).for_each(|(a, &b)| *a += b);
                }
                out.extend(per_source);
            }
            Op::Dropout { x, mask } => out.push((*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())),
        }
        out
    }

    pub fn is_parameter(&self, v: Var) -> bool {
        self.nodes[v.0].param
    }
}

fn bce_clamp<T: Real>() -> (T, T) {
    let eps = if T::BYTES == 4 { T::lit(1e-7) } else { T::lit(1e-12) };
    (eps, T::one() - eps)
}
