//! Tape recording forward values and the information needed to replay them
//! backwards.
//!
//! Every op appends one node. `backward` walks the tape in reverse, so the
//! order of node creation is the topological order.

use crate::error::{Result, TapeError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable op. The forward value is computed by the
/// caller and passed to [`Graph::custom`]; only the vector-Jacobian product
/// lives here.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` for inputs it does not
    /// differentiate into).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        cols: Vec<T>,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Normalize {
        x: Var,
        inv_std: Vec<T>,
        span: usize,
    },
    Concat(Vec<Var>),
    AddChannelwise {
        x: Var,
        v: Var,
    },
    MulRows {
        a: Var,
        row: Var,
    },
    AddRows {
        a: Var,
        row: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that never records backward information. Parameters bound to
    /// it do not require gradients and no im2col buffers are kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Records a node whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Stride-1 2D convolution. `x: (N, Ci, H, W)`, `w: (Co, Ci, kh, kw)`,
    /// optional bias `(Co)`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != ci {
            return Err(TapeError::Shape(format!(
                "conv2d: input has {ci} channels, kernel expects {wci}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TapeError::Shape("conv2d: kernel larger than padded input".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(TapeError::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{co}]",
                    self.shape(b)
                )));
            }
        }
        let ho = h + 2 * pad - kh + 1;
        let wo = wd + 2 * pad - kw + 1;
        let kdim = ci * kh * kw;
        let p = ho * wo;
        let direct = kh == 1 && kw == 1 && pad == 0;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let keep_cols = rg && self.record && self.requires_grad(w) && !direct;

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * co * p];
        let mut cols = if keep_cols {
            vec![T::zero(); n * kdim * p]
        } else {
            Vec::new()
        };
        let mut scratch = if direct || keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); kdim * p]
        };
        for s in 0..n {
            let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
            let col: &[T] = if direct {
                xs
            } else {
                let buf = if keep_cols {
                    &mut cols[s * kdim * p..(s + 1) * kdim * p]
                } else {
                    &mut scratch[..]
                };
                im2col(xs, ci, h, wd, kh, kw, pad, ho, wo, buf);
                buf
            };
            gemm(
                co,
                kdim,
                p,
                wv,
                false,
                col,
                false,
                T::zero(),
                &mut out[s * co * p..(s + 1) * co * p],
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for c in 0..co {
                    let bias = bv[c];
                    for o in &mut out[(s * co + c) * p..(s * co + c + 1) * p] {
                        *o += bias;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, co, ho, wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, pad, cols }, rg))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
    /// upsampling). `x: (N, Ci, H, W)`, `w: (Ci, Co, 2, 2)`, bias `(Co)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wci, co, k0, k1) = self.value(w).dims4()?;
        if wci != ci || k0 != 2 || k1 != 2 {
            return Err(TapeError::Shape(format!(
                "conv_transpose2x2: kernel {:?} does not match {ci} input channels",
                self.shape(w)
            )));
        }
        let hw = h * wd;
        let (h2, w2) = (2 * h, 2 * wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut tmp = vec![T::zero(); co * 4 * hw];
        let mut out = vec![T::zero(); n * co * h2 * w2];
        let bv = b.map(|b| self.value(b).data());
        for s in 0..n {
            let xs = &xv[s * ci * hw..(s + 1) * ci * hw];
            gemm(co * 4, ci, hw, wv, true, xs, false, T::zero(), &mut tmp);
            let os = &mut out[s * co * h2 * w2..(s + 1) * co * h2 * w2];
            for c in 0..co {
                let bias = bv.map_or(T::zero(), |b| b[c]);
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &tmp[(c * 4 + a * 2 + bb) * hw..(c * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            let orow = &mut os[(c * h2 + 2 * i + a) * w2..(c * h2 + 2 * i + a + 1) * w2];
                            for j in 0..wd {
                                orow[2 * j + bb] = row[i * wd + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let out = Tensor::from_vec(&[n, co, h2, w2], out)?;
        Ok(self.push(out, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TapeError::Shape(format!(
                "max_pool2x2: spatial size {h}x{w} is not even"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let argmax = if rg && self.record { argmax } else { Vec::new() };
        Ok(self.push(out, Op::MaxPool2x2 { x, argmax }, rg))
    }

    /// Per-(sample, channel) normalization over the spatial plane, without
    /// affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.normalize_spans(x, h * w, eps)
    }

    /// Per-sample normalization over all channels and pixels, without affine
    /// parameters. Channel-specific offsets survive it, unlike
    /// [`Graph::instance_norm`].
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        self.normalize_spans(x, c * h * w, eps)
    }

    fn normalize_spans(&mut self, x: Var, span: usize, eps: T) -> Result<Var> {
        let inv_len = T::one() / T::from_usize(span).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / span);
        for (src, dst) in xv.chunks(span).zip(out.chunks_mut(span)) {
            let mean = src.iter().copied().sum::<T>() * inv_len;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.any_grad(&[x]);
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(out, Op::Normalize { x, inv_std, span }, rg))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (n, c, h, w) = self.value(p).dims4()?;
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(TapeError::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            total_c += c;
        }
        let (n, _, h, w) = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = self.any_grad(parts);
        let out = Tensor::from_vec(&[n, total_c, h, w], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// `x (N, C, H, W) + v (N, C)` with `v` broadcast over the spatial plane.
    pub fn add_channelwise(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(v) != [n, c] {
            return Err(TapeError::Shape(format!(
                "add_channelwise: offset {:?} does not match feature {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for (plane, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let off = vv[plane];
            for o in chunk {
                *o += off;
            }
        }
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(out, Op::AddChannelwise { x, v }, rg))
    }

    fn check_rows(&self, a: Var, row: Var, what: &str) -> Result<(usize, usize)> {
        let (n, c) = self.value(a).dims2()?;
        if self.shape(row) != [c] {
            return Err(TapeError::Shape(format!(
                "{what}: row {:?} does not match {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        Ok((n, c))
    }

    /// `a (N, C) * row (C)` broadcast over rows.
    pub fn mul_rows(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.check_rows(a, row, "mul_rows")?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * r[i % c])
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::MulRows { a, row }, rg))
    }

    /// `a (N, C) + row (C)` broadcast over rows.
    pub fn add_rows(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.check_rows(a, row, "add_rows")?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % c])
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRows { a, row }, rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `x (N, I) * w (O, I)^T + b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i {
            return Err(TapeError::Shape(format!(
                "linear: input width {i}, weight expects {wi}"
            )));
        }
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TapeError::Shape(format!("linear: bias {:?}", self.shape(b))));
            }
            let bv = self.value(b).data();
            for (k, v) in out.iter_mut().enumerate() {
                *v += bv[k % o];
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let out = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel()).unwrap());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Reverse pass from a single-element node. Only gradients of leaves are
    /// retained in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TapeError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip_map(g, self.value(*b), |g, y| g * y);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = zip_map(g, self.value(*a), |g, x| g * x);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |g, y| g * y * (T::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d { x, w, b, pad, cols } => self.conv2d_backward(*x, *w, *b, *pad, cols, g, grads)?,
            Op::ConvTranspose2x2 { x, w, b } => self.conv_t_backward(*x, *w, *b, g, grads)?,
            Op::MaxPool2x2 { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dd[idx as usize] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Normalize { x, inv_std, span } => {
                let span = *span;
                let inv_len = T::one() / T::from_usize(span).unwrap();
                let mut d = Tensor::zeros(self.shape(*x));
                let y = node.value.data();
                for (k, dx) in d.data_mut().chunks_mut(span).enumerate() {
                    let gs = &g.data()[k * span..(k + 1) * span];
                    let ys = &y[k * span..(k + 1) * span];
                    let mean_g = gs.iter().copied().sum::<T>() * inv_len;
                    let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_len;
                    let is = inv_std[k];
                    for i in 0..span {
                        dx[i] = is * (gs[i] - mean_g - ys[i] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = node.value.dims4()?;
                let hw = h * w;
                let total_c = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[n, c, h, w], d)?);
                    }
                    offset += c;
                }
            }
            Op::AddChannelwise { x, v } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*v) {
                    let (n, c, h, w) = g.dims4()?;
                    let data = g.data().chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, *v, Tensor::from_vec(&[n, c], data)?);
                }
            }
            Op::MulRows { a, row } => {
                let (_, c) = g.dims2()?;
                if self.wants(*a) {
                    let r = self.value(*row).data();
                    let data = g.data().iter().enumerate().map(|(i, &gv)| gv * r[i % c]).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), data)?);
                }
                if self.wants(*row) {
                    let av = self.value(*a).data();
                    let mut d = vec![T::zero(); c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        d[i % c] += gv * av[i];
                    }
                    self.accumulate(grads, *row, Tensor::from_vec(&[c], d)?);
                }
            }
            Op::AddRows { a, row } => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let (_, c) = g.dims2()?;
                    let mut d = vec![T::zero(); c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        d[i % c] += gv;
                    }
                    self.accumulate(grads, *row, Tensor::from_vec(&[c], d)?);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut d = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], d)?);
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                if self.wants(*x) {
                    let mut d = vec![T::zero(); n * i];
                    gemm(
                        n,
                        o,
                        i,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        T::zero(),
                        &mut d,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, i], d)?);
                }
                if self.wants(*w) {
                    let mut d = vec![T::zero(); o * i];
                    gemm(o, n, i, g.data(), true, self.value(*x).data(), false, T::zero(), &mut d);
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, i], d)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut d = vec![T::zero(); o];
                        for (k, &gv) in g.data().iter().enumerate() {
                            d[k % o] += gv;
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], d)?);
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let numel = self.value(*a).numel();
                let gv = g.item() / T::from_usize(numel).unwrap();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&values, &node.value, g);
                if ds.len() != inputs.len() {
                    return Err(TapeError::Shape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        ds.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        if d.shape() != self.shape(v) {
                            return Err(TapeError::Shape(format!(
                                "custom op {}: gradient {:?} for input {:?}",
                                op.name(),
                                d.shape(),
                                self.shape(v)
                            )));
                        }
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        cols: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, _, kh, kw) = self.value(w).dims4()?;
        let (_, _, ho, wo) = g.dims4()?;
        let p = ho * wo;
        let kdim = ci * kh * kw;
        let direct = kh == 1 && kw == 1 && pad == 0;
        let gd = g.data();

        if let Some(b) = b {
            if self.wants(b) {
                let mut d = vec![T::zero(); co];
                for s in 0..n {
                    for (c, dc) in d.iter_mut().enumerate() {
                        *dc += gd[(s * co + c) * p..(s * co + c + 1) * p].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_vec(&[co], d)?);
            }
        }
        if self.wants(w) {
            let mut dw = vec![T::zero(); co * kdim];
            let xv = self.value(x).data();
            for s in 0..n {
                let col = if direct {
                    &xv[s * ci * h * wd..(s + 1) * ci * h * wd]
                } else {
                    &cols[s * kdim * p..(s + 1) * kdim * p]
                };
                gemm(
                    co,
                    p,
                    kdim,
                    &gd[s * co * p..(s + 1) * co * p],
                    false,
                    col,
                    true,
                    T::one(),
                    &mut dw,
                );
            }
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw)?);
        }
        if self.wants(x) {
            let wv = self.value(w).data();
            let mut dx = vec![T::zero(); n * ci * h * wd];
            let mut dcol = if direct { Vec::new() } else { vec![T::zero(); kdim * p] };
            for s in 0..n {
                let gs = &gd[s * co * p..(s + 1) * co * p];
                let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                if direct {
                    gemm(kdim, co, p, wv, true, gs, false, T::zero(), dxs);
                } else {
                    gemm(kdim, co, p, wv, true, gs, false, T::zero(), &mut dcol);
                    col2im(&dcol, ci, h, wd, kh, kw, pad, ho, wo, dxs);
                }
            }
            self.accumulate(grads, x, Tensor::from_vec(&[n, ci, h, wd], dx)?);
        }
        Ok(())
    }

    fn conv_t_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let co = self.shape(w)[1];
        let hw = h * wd;
        let (h2, w2) = (2 * h, 2 * wd);
        let gd = g.data();
        // gather the output gradient back into (Co*4, H*W) layout per sample
        let mut gathered = vec![T::zero(); n * co * 4 * hw];
        for s in 0..n {
            let gs = &gd[s * co * h2 * w2..(s + 1) * co * h2 * w2];
            let ts = &mut gathered[s * co * 4 * hw..(s + 1) * co * 4 * hw];
            for c in 0..co {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut ts[(c * 4 + a * 2 + bb) * hw..(c * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            let grow = &gs[(c * h2 + 2 * i + a) * w2..(c * h2 + 2 * i + a + 1) * w2];
                            for j in 0..wd {
                                row[i * wd + j] = grow[2 * j + bb];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut d = vec![T::zero(); co];
                for s in 0..n {
                    for (c, dc) in d.iter_mut().enumerate() {
                        let start = (s * co + c) * h2 * w2;
                        *dc += gd[start..start + h2 * w2].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_vec(&[co], d)?);
            }
        }
        if self.wants(w) {
            let xv = self.value(x).data();
            let mut dw = vec![T::zero(); ci * co * 4];
            for s in 0..n {
                gemm(
                    ci,
                    hw,
                    co * 4,
                    &xv[s * ci * hw..(s + 1) * ci * hw],
                    false,
                    &gathered[s * co * 4 * hw..(s + 1) * co * 4 * hw],
                    true,
                    T::one(),
                    &mut dw,
                );
            }
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw)?);
        }
        if self.wants(x) {
            let wv = self.value(w).data();
            let mut dx = vec![T::zero(); n * ci * hw];
            for s in 0..n {
                gemm(
                    ci,
                    co * 4,
                    hw,
                    wv,
                    false,
                    &gathered[s * co * 4 * hw..(s + 1) * co * 4 * hw],
                    false,
                    T::zero(),
                    &mut dx[s * ci * hw..(s + 1) * ci * hw],
                );
            }
            self.accumulate(grads, x, Tensor::from_vec(&[n, ci, h, wd], dx)?);
        }
        Ok(())
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shapes agree")
}

/// Output columns `ox` for which `ox + k - pad` lands inside `[0, len)`.
fn valid_span(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let p = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            let (ylo, yhi) = valid_span(ki, pad, h, ho);
            for kj in 0..kw {
                let (xlo, xhi) = valid_span(kj, pad, w, wo);
                let r = (c * kh + ki) * kw + kj;
                let row = &mut out[r * p..(r + 1) * p];
                row[..ylo * wo].fill(T::zero());
                row[yhi * wo..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy + ki - pad;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if xhi > xlo {
                        let src = &x[(c * h + iy) * w + xlo + kj - pad..(c * h + iy) * w + xhi + kj - pad];
                        dst[xlo..xhi].copy_from_slice(src);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            let (ylo, yhi) = valid_span(ki, pad, h, ho);
            for kj in 0..kw {
                let (xlo, xhi) = valid_span(kj, pad, w, wo);
                if xhi <= xlo {
                    continue;
                }
                let r = (c * kh + ki) * kw + kj;
                let row = &cols[r * p..(r + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy + ki - pad;
                    let start = (c * h + iy) * w + xlo + kj - pad;
                    let dst = &mut dx[start..start + (xhi - xlo)];
                    for (d, &s) in dst.iter_mut().zip(&row[oy * wo + xlo..oy * wo + xhi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
