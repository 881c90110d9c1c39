//! Tape of tensor operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it from the loss back to index 0.

use super::kernels::{col2im, im2col, Window};
use super::{AutodiffError, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied inside the cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize },
    Relu(Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: T },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    SelectChannel { input: Var, channel: usize },
    SoftDice { probs: Var, target: Vec<T>, num: T, den: T },
    CrossEntropy { probs: Var, labels: Vec<usize>, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Concat { .. } => "concat_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax_channels",
            Op::SelectChannel { .. } => "select_channel",
            Op::SoftDice { .. } => "soft_dice",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use compute graph; build it, call [`Graph::backward`], read gradients.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<(), AutodiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Adds `src` into the gradient buffer of `v`, allocating it on first use.
fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], len: usize, v: Var, src: &[T]) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    for (g, &s) in slot.iter_mut().zip(src) {
        *g = *g + s;
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated d(loss)/d(v) after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn emit(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        check_finite(name, value.data())?;
        let requires_grad = self.any_grad(inputs);
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    /// Cross-correlation of `input` [N,C,H,W] with `kernel` [F,C,kh,kw].
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let [f, kc, kh, kw] = self.value(kernel).dims4(OP)?;
        if kc != c {
            return Err(shape_err(OP, format!("kernel expects {kc} channels, input has {c}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(shape_err(OP, format!("bias {:?} for {f} filters", self.value(b).shape())));
            }
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument("conv2d stride must be at least 1".into()));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err(OP, format!("{h}x{w} input, {kh}x{kw} kernel, stride {stride}, pad {pad} is not integral")));
        }
        let g = Window { channels: c, height: h, width: w, kh, kw, stride, pad, out_h: (ph - kh) / stride + 1, out_w: (pw - kw) / stride + 1 };
        let (rows, plane) = (g.rows(), g.cols());
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); n * f * plane];
        let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
        for s in 0..n {
            let image = &x[s * c * h * w..(s + 1) * c * h * w];
            let cols_ref: &[T] = if pointwise {
                image
            } else {
                im2col(image, &g, &mut cols);
                &cols
            };
            let out_s = &mut out[s * f * plane..(s + 1) * f * plane];
            T::gemm(f, rows, plane, k, rows, 1, cols_ref, plane, 1, out_s, plane, 1, false);
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (fi, chunk) in out_s.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + bv[fi]);
                }
            }
        }
        let value = Tensor::new(vec![n, f, g.out_h, g.out_w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.emit(OP, value, Op::Conv2d { input, kernel, bias, stride, pad }, &inputs)
    }

    /// Transposed convolution with `kernel` [C,F,kh,kw] and no padding.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        const OP: &str = "conv_transpose2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let [kc, f, kh, kw] = self.value(kernel).dims4(OP)?;
        if kc != c {
            return Err(shape_err(OP, format!("kernel expects {kc} channels, input has {c}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(shape_err(OP, format!("bias {:?} for {f} filters", self.value(b).shape())));
            }
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument("conv_transpose2d stride must be at least 1".into()));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let g = Window { channels: f, height: oh, width: ow, kh, kw, stride, pad: 0, out_h: h, out_w: w };
        let (rows, plane) = (g.rows(), h * w);

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); n * f * oh * ow];
        let mut cols = vec![T::zero(); rows * plane];
        for s in 0..n {
            let image = &x[s * c * plane..(s + 1) * c * plane];
            // cols = Kᵀ · x, with K viewed as [C, F·kh·kw].
            T::gemm(rows, c, plane, k, 1, rows, image, plane, 1, &mut cols, plane, 1, false);
            let out_s = &mut out[s * f * oh * ow..(s + 1) * f * oh * ow];
            col2im(&cols, &g, out_s);
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (fi, chunk) in out_s.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + bv[fi]);
                }
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.emit(OP, value, Op::ConvTranspose2d { input, kernel, bias, stride }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.emit("relu", value, Op::Relu(x), &[x])
    }

    /// 2×2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "max_pool2d";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(OP, format!("{h}x{w} is not divisible by the 2x2 window")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for idx in [base + 2 * i * w + 2 * j + 1, base + (2 * i + 1) * w + 2 * j, base + (2 * i + 1) * w + 2 * j + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.emit(OP, value, Op::MaxPool2d { input: x, argmax }, &[x])
    }

    /// Channel-wise concatenation of two [N,C,H,W] tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(OP, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&da[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&db[s * pb..(s + 1) * pb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.emit(OP, value, Op::Concat { a, b }, &[a, b])
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var, AutodiffError> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.emit(op, value, node, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var, AutodiffError> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.emit("affine", value, Op::Affine { input: x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let total = self.value(x).data().iter().copied().sum();
        self.emit("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let src = self.value(x);
        if src.numel() == 0 {
            return Err(shape_err("mean", "mean of an empty tensor".into()));
        }
        let total: T = src.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::of(src.numel() as f64));
        self.emit("mean", value, Op::Mean(x), &[x])
    }

    /// Softmax across the channel axis at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "softmax_channels";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let at = |ch: usize| base + ch * plane + p;
                let max = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (src[at(ch)] - max).exp();
                    out[at(ch)] = e;
                    total = total + e;
                }
                for ch in 0..c {
                    out[at(ch)] = out[at(ch)] / total;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.emit(OP, value, Op::Softmax(x), &[x])
    }

    /// Extracts one channel as an [N,1,H,W] tensor.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var, AutodiffError> {
        const OP: &str = "select_channel";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if channel >= c {
            return Err(shape_err(OP, format!("channel {channel} of {c}")));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            let start = (s * c + channel) * plane;
            out.extend_from_slice(&src[start..start + plane]);
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        self.emit(OP, value, Op::SelectChannel { input: x, channel }, &[x])
    }

    /// Smoothed sum-of-squares dice: `(2Σpg + ε) / (Σp² + Σg² + ε)`.
    pub fn soft_dice(&mut self, probs: Var, target: &[T], smooth_eps: T) -> Result<Var, AutodiffError> {
        const OP: &str = "soft_dice";
        let p = self.value(probs).data();
        if p.len() != target.len() {
            return Err(shape_err(OP, format!("{} predictions vs {} targets", p.len(), target.len())));
        }
        let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
        for (&pi, &gi) in p.iter().zip(target) {
            inter = inter + pi * gi;
            sp = sp + pi * pi;
            sg = sg + gi * gi;
        }
        let two = T::of(2.0);
        let num = two * inter + smooth_eps;
        let den = sp + sg + smooth_eps;
        let value = Tensor::scalar(num / den);
        self.emit(OP, value, Op::SoftDice { probs, target: target.to_vec(), num, den }, &[probs])
    }

    /// Pixel-mean weighted cross-entropy of probabilities `probs` [N,C,H,W]
    /// against integer `labels` (one per pixel, N·H·W in order).
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], class_weights: &[T]) -> Result<Var, AutodiffError> {
        const OP: &str = "cross_entropy";
        let [n, c, h, w] = self.value(probs).dims4(OP)?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(shape_err(OP, format!("{} labels for {} pixels", labels.len(), n * plane)));
        }
        if class_weights.len() != c {
            return Err(shape_err(OP, format!("{} class weights for {c} classes", class_weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes: c });
        }
        let q = self.value(probs).data();
        let floor = T::of(LOG_FLOOR);
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let (s, p) = (i / plane, i % plane);
            let qv = q[(s * c + label) * plane + p].max(floor);
            total = total - class_weights[label] * qv.ln();
        }
        let value = Tensor::scalar(total / T::of(labels.len() as f64));
        self.emit(OP, value, Op::CrossEntropy { probs, labels: labels.to_vec(), weights: class_weights.to_vec() }, &[probs])
    }

    /// Reverse sweep from a scalar loss; gradients accumulate across multiple uses.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 || !loss_value.shape().is_empty() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            check_finite(self.nodes[i].op.name(), &dy)?;
            self.propagate(i, &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dy: &[T]) -> Result<(), AutodiffError> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();
        let node = &nodes[i];

        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, bias, stride, pad } => {
                let xt = &nodes[input.0].value;
                let kt = &nodes[kernel.0].value;
                let [n, c, h, w] = xt.dims4("conv2d")?;
                let [f, _, kh, kw] = kt.dims4("conv2d")?;
                let [_, _, out_h, out_w] = node.value.dims4("conv2d")?;
                let g = Window { channels: c, height: h, width: w, kh, kw, stride, pad, out_h, out_w };
                let (rows, plane) = (g.rows(), g.cols());
                let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
                let (x, k) = (xt.data(), kt.data());

                if let Some(b) = bias.filter(|&b| wants(b)) {
                    let db = grad_buf(grads, len(b), b);
                    for s in 0..n {
                        for (fi, chunk) in dy[s * f * plane..(s + 1) * f * plane].chunks(plane).enumerate() {
                            db[fi] = db[fi] + chunk.iter().copied().sum();
                        }
                    }
                }
                if wants(kernel) {
                    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
                    let dk = grad_buf(grads, len(kernel), kernel);
                    for s in 0..n {
                        let image = &x[s * c * h * w..(s + 1) * c * h * w];
                        let cols_ref: &[T] = if pointwise {
                            image
                        } else {
                            im2col(image, &g, &mut cols);
                            &cols
                        };
                        let dy_s = &dy[s * f * plane..(s + 1) * f * plane];
                        // dK += dY · colsᵀ
                        T::gemm(f, plane, rows, dy_s, plane, 1, cols_ref, 1, plane, dk, rows, 1, true);
                    }
                }
                if wants(input) {
                    let mut dcols = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
                    let dx = grad_buf(grads, len(input), input);
                    for s in 0..n {
                        let dy_s = &dy[s * f * plane..(s + 1) * f * plane];
                        let dx_s = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                        if pointwise {
                            T::gemm(rows, f, plane, k, 1, rows, dy_s, plane, 1, dx_s, plane, 1, true);
                        } else {
                            // dcols = Kᵀ · dY
                            T::gemm(rows, f, plane, k, 1, rows, dy_s, plane, 1, &mut dcols, plane, 1, false);
                            col2im(&dcols, &g, dx_s);
                        }
                    }
                }
            }
            &Op::ConvTranspose2d { input, kernel, bias, stride } => {
                let xt = &nodes[input.0].value;
                let kt = &nodes[kernel.0].value;
                let [n, c, h, w] = xt.dims4("conv_transpose2d")?;
                let [_, f, kh, kw] = kt.dims4("conv_transpose2d")?;
                let [_, _, oh, ow] = node.value.dims4("conv_transpose2d")?;
                let g = Window { channels: f, height: oh, width: ow, kh, kw, stride, pad: 0, out_h: h, out_w: w };
                let (rows, plane, out_plane) = (g.rows(), h * w, oh * ow);
                let (x, k) = (xt.data(), kt.data());

                if let Some(b) = bias.filter(|&b| wants(b)) {
                    let db = grad_buf(grads, len(b), b);
                    for s in 0..n {
                        for (fi, chunk) in dy[s * f * out_plane..(s + 1) * f * out_plane].chunks(out_plane).enumerate() {
                            db[fi] = db[fi] + chunk.iter().copied().sum();
                        }
                    }
                }
                if wants(kernel) || wants(input) {
                    let mut dcols = vec![T::zero(); rows * plane];
                    for s in 0..n {
                        im2col(&dy[s * f * out_plane..(s + 1) * f * out_plane], &g, &mut dcols);
                        if wants(kernel) {
                            // dK[C, F·kh·kw] += x · dcolsᵀ
                            let dk = grad_buf(grads, len(kernel), kernel);
                            let image = &x[s * c * plane..(s + 1) * c * plane];
                            T::gemm(c, plane, rows, image, plane, 1, &dcols, 1, plane, dk, rows, 1, true);
                        }
                        if wants(input) {
                            let dx = grad_buf(grads, len(input), input);
                            let dx_s = &mut dx[s * c * plane..(s + 1) * c * plane];
                            T::gemm(c, rows, plane, k, rows, 1, &dcols, plane, 1, dx_s, plane, 1, true);
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let xv = nodes[x.0].value.data();
                    let dx = grad_buf(grads, len(x), x);
                    for ((g, &v), &d) in dx.iter_mut().zip(xv).zip(dy) {
                        if v > T::zero() {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if wants(*input) {
                    let dx = grad_buf(grads, len(*input), *input);
                    for (&idx, &d) in argmax.iter().zip(dy) {
                        dx[idx] = dx[idx] + d;
                    }
                }
            }
            &Op::Concat { a, b } => {
                let [n, ca, h, w] = nodes[a.0].value.dims4("concat_channels")?;
                let cb = nodes[b.0].value.shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                for s in 0..n {
                    let chunk = &dy[s * (pa + pb)..(s + 1) * (pa + pb)];
                    if wants(a) {
                        let da = grad_buf(grads, len(a), a);
                        for (g, &d) in da[s * pa..(s + 1) * pa].iter_mut().zip(&chunk[..pa]) {
                            *g = *g + d;
                        }
                    }
                    if wants(b) {
                        let db = grad_buf(grads, len(b), b);
                        for (g, &d) in db[s * pb..(s + 1) * pb].iter_mut().zip(&chunk[pa..]) {
                            *g = *g + d;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, len(a), a, dy);
                }
                if wants(b) {
                    accumulate(grads, len(b), b, dy);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, len(a), a, dy);
                }
                if wants(b) {
                    let neg: Vec<T> = dy.iter().map(|&d| -d).collect();
                    accumulate(grads, len(b), b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(a) {
                    let contrib: Vec<T> = dy.iter().zip(vb).map(|(&d, &y)| d * y).collect();
                    accumulate(grads, len(a), a, &contrib);
                }
                if wants(b) {
                    let contrib: Vec<T> = dy.iter().zip(va).map(|(&d, &x)| d * x).collect();
                    accumulate(grads, len(b), b, &contrib);
                }
            }
            &Op::Affine { input, scale } => {
                if wants(input) {
                    let contrib: Vec<T> = dy.iter().map(|&d| d * scale).collect();
                    accumulate(grads, len(input), input, &contrib);
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    let d = dy[0];
                    grad_buf(grads, len(x), x).iter_mut().for_each(|g| *g = *g + d);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let d = dy[0] / T::of(len(x) as f64);
                    grad_buf(grads, len(x), x).iter_mut().for_each(|g| *g = *g + d);
                }
            }
            &Op::Softmax(x) => {
                if wants(x) {
                    let [n, c, h, w] = node.value.dims4("softmax_channels")?;
                    let plane = h * w;
                    let y = node.value.data();
                    let dx = grad_buf(grads, len(x), x);
                    for s in 0..n {
                        let base = s * c * plane;
                        for p in 0..plane {
                            let dot = (0..c).map(|ch| y[base + ch * plane + p] * dy[base + ch * plane + p]).fold(T::zero(), |a, b| a + b);
                            for ch in 0..c {
                                let at = base + ch * plane + p;
                                dx[at] = dx[at] + y[at] * (dy[at] - dot);
                            }
                        }
                    }
                }
            }
            &Op::SelectChannel { input, channel } => {
                if wants(input) {
                    let [n, c, h, w] = nodes[input.0].value.dims4("select_channel")?;
                    let plane = h * w;
                    let dx = grad_buf(grads, len(input), input);
                    for s in 0..n {
                        let start = (s * c + channel) * plane;
                        for (g, &d) in dx[start..start + plane].iter_mut().zip(&dy[s * plane..(s + 1) * plane]) {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::SoftDice { probs, target, num, den } => {
                if wants(*probs) {
                    let p = nodes[probs.0].value.data();
                    let two = T::of(2.0);
                    let scale = dy[0] / (*den * *den);
                    let dx = grad_buf(grads, len(*probs), *probs);
                    for ((g, &pi), &gi) in dx.iter_mut().zip(p).zip(target) {
                        *g = *g + scale * (two * gi * *den - two * pi * *num);
                    }
                }
            }
            Op::CrossEntropy { probs, labels, weights } => {
                if wants(*probs) {
                    let [_, c, h, w] = nodes[probs.0].value.dims4("cross_entropy")?;
                    let plane = h * w;
                    let q = nodes[probs.0].value.data();
                    let floor = T::of(LOG_FLOOR);
                    let scale = dy[0] / T::of(labels.len() as f64);
                    let dx = grad_buf(grads, len(*probs), *probs);
                    for (i, &label) in labels.iter().enumerate() {
                        let at = ((i / plane) * c + label) * plane + i % plane;
                        if q[at] > floor {
                            dx[at] = dx[at] - scale * weights[label] / q[at];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
