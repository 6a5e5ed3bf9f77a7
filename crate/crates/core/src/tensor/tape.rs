use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{self, ConvGeom};
use super::{Real, Shape, Tensor};
use crate::error::{OffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-supplied elementwise op:
/// `(input, gout) -> gin`.
pub type BackwardFn = dyn Fn(&[f64], &[f64]) -> Vec<f64>;

enum Op {
    Leaf,
    Fixed3x3 {
        x: Var,
        kernel: [[f64; 3]; 3],
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddN {
        parts: Vec<Var>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Elementwise {
        x: Var,
        backward: Box<BackwardFn>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Fixed3x3 { x, .. }
            | Op::Relu { x }
            | Op::MaxPool2 { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Elementwise { x, .. } => vec![*x],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Concat { parts } | Op::AddN { parts } => parts.clone(),
            Op::Sub { a, b } => vec![*a, *b],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Fixed3x3 { .. } => "conv2d_fixed3x3",
            Op::Conv { geom, .. } if geom.k == 1 => "conv1x1",
            Op::Conv { .. } => "conv3x3",
            Op::Relu { .. } => "relu",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Concat { .. } => "concat_channels",
            Op::Sub { .. } => "sub",
            Op::AddN { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Linear { .. } => "linear",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Sum { .. } => "sum",
            Op::Elementwise { .. } => "elementwise",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order because
/// an op can only reference nodes that already exist. A tape and its `Var`s
/// belong to one thread at a time.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present after a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Inputs of the op that produced `v` (empty for leaves).
    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Hash of every ReLU sign mask and pooling argmax on the tape. Two
    /// forward passes with equal hashes took the same piecewise-linear branch.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > T::ZERO).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_f64(&mut self, shape: Shape, data: Vec<f64>, op: Op) -> Var {
        let data = data.into_iter().map(T::from_f64).collect();
        let value = Tensor::from_vec(shape, data).expect("kernel produced a consistent shape");
        self.push(value, op)
    }

    fn f64_of(&self, v: Var) -> Vec<f64> {
        self.value(v).to_f64_vec()
    }

    /// Per-channel 3×3 cross-correlation with a constant kernel, stride 1.
    /// Out-of-range taps replicate the edge pixel, so any image that is
    /// constant along the kernel's derivative axis maps to exactly zero.
    /// Only `x` receives a gradient.
    pub fn conv2d_fixed3x3(&mut self, x: Var, kernel: &[[f64; 3]; 3]) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(OffError::shape(format!("conv2d_fixed3x3 on empty tensor {s}")));
        }
        let out = conv::depthwise3x3_forward(self.value(x).data(), s.n * s.c, s.h, s.w, kernel);
        Ok(self.push_f64(s, out, Op::Fixed3x3 { x, kernel: *kernel }))
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if !(stride == 1 || stride == 2) {
            return Err(OffError::config(format!("stride must be 1 or 2, got {stride}")));
        }
        if xs.h == 0 || xs.w == 0 {
            return Err(OffError::shape(format!("convolution input {xs} is empty")));
        }
        if ws.h != k || ws.w != k {
            return Err(OffError::shape(format!("expected {k}x{k} weights, got {ws}")));
        }
        if ws.c != xs.c {
            return Err(OffError::shape(format!(
                "weights {ws} expect {} input channels, input {xs} has {}",
                ws.c, xs.c
            )));
        }
        if bs != Shape::new(ws.n, 1, 1, 1) {
            return Err(OffError::shape(format!("bias {bs} does not match weights {ws}")));
        }
        let geom = ConvGeom::new(xs.c, ws.n, xs.h, xs.w, k, stride);
        let out = conv::conv_forward(
            self.value(x).data(),
            xs.n,
            &geom,
            &self.f64_of(w),
            &self.f64_of(b),
        );
        let shape = Shape::new(xs.n, geom.cout, geom.ho, geom.wo);
        Ok(self.push_f64(shape, out, Op::Conv { x, w, b, geom }))
    }

    /// 1×1 convolution. `w` is `[Cout, Cin, 1, 1]`, `b` is `[Cout, 1, 1, 1]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv(x, w, b, 1, 1)
    }

    /// 1×1 convolution sampling every `stride`-th pixel (projection shortcut).
    pub fn conv1x1_strided(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.conv(x, w, b, 1, stride)
    }

    /// 3×3 convolution with zero padding 1. Stride 2 halves extents, rounding up.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.conv(x, w, b, 3, stride)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::ZERO { a } else { T::ZERO }).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Relu { x })
    }

    /// 2×2 max pooling, stride 2. A trailing odd row or column is dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h < 2 || s.w < 2 {
            return Err(OffError::shape(format!("maxpool2 needs H, W >= 2, got {s}")));
        }
        let (ho, wo) = (s.h / 2, s.w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s.n * s.c {
            let base = plane * s.h * s.w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        // strict comparison: the first maximum in scan order wins
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(s.n, s.c, ho, wo), out).expect("pool shape");
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// Spatial mean per channel, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(OffError::shape(format!("global_avg_pool on {s}")));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(s.plane())
            .map(|p| p.iter().map(|v| v.to_f64()).sum::<f64>() / s.plane() as f64)
            .collect();
        Ok(self.push_f64(Shape::matrix(s.n, s.c), out, Op::GlobalAvgPool { x }))
    }

    /// Concatenation along channels, preserving part order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(
            *parts
                .first()
                .ok_or_else(|| OffError::arg("concat_channels needs at least one part"))?,
        );
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(OffError::shape(format!("cannot concatenate {s} with {first}")));
            }
            channels += s.c;
        }
        let shape = Shape::new(first.n, channels, first.h, first.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape().c * first.plane();
                data.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        let value = Tensor::from_vec(shape, data).expect("concat shape");
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(OffError::shape(format!("sub of {sa} and {sb}")));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.to_f64() - y.to_f64())
            .collect();
        Ok(self.push_f64(sa, out, Op::Sub { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of same-shape tensors, accumulated in part order.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(
            *parts
                .first()
                .ok_or_else(|| OffError::arg("add needs at least one operand"))?,
        );
        let mut acc = vec![0.0f64; shape.numel()];
        for &p in parts {
            if self.shape(p) != shape {
                return Err(OffError::shape(format!("add of {} and {shape}", self.shape(p))));
            }
            for (a, v) in acc.iter_mut().zip(self.value(p).data()) {
                *a += v.to_f64();
            }
        }
        Ok(self.push_f64(
            shape,
            acc,
            Op::AddN {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v.to_f64() * factor).collect();
        self.push_f64(s, out, Op::Scale { x, factor })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push_f64(Shape::scalar(), vec![total], Op::Sum { x })
    }

    /// Affine map `[N, D] -> [N, K]` with `w: [K, D, 1, 1]` and `b: [K, 1, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 {
            return Err(OffError::shape(format!("linear expects matrices, got {xs} and {ws}")));
        }
        if ws.c != xs.c {
            return Err(OffError::shape(format!(
                "linear weights {ws} expect D={}, input has D={}",
                ws.c, xs.c
            )));
        }
        if bs != Shape::new(ws.n, 1, 1, 1) {
            return Err(OffError::shape(format!("bias {bs} does not match weights {ws}")));
        }
        let (n, d, k) = (xs.n, xs.c, ws.n);
        let (xv, wv, bv) = (self.f64_of(x), self.f64_of(w), self.f64_of(b));
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            for j in 0..k {
                let wr = &wv[j * d..(j + 1) * d];
                out[i * k + j] = bv[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(self.push_f64(Shape::matrix(n, k), out, Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy over the batch. Returns the scalar loss node
    /// and the class probabilities.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let s = self.shape(logits);
        if s.h != 1 || s.w != 1 || s.c == 0 {
            return Err(OffError::shape(format!("softmax_xent expects [N, C] logits, got {s}")));
        }
        if labels.len() != s.n {
            return Err(OffError::shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                s.n
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= s.c) {
            return Err(OffError::InvalidLabel {
                label,
                classes: s.c,
            });
        }
        let z = self.f64_of(logits);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (i, (row, prow)) in z.chunks(s.c).zip(probs.chunks_mut(s.c)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            loss -= row[labels[i]] - max - denom.ln();
        }
        loss /= s.n as f64;
        let probs_t = Tensor::from_vec(s, probs.iter().map(|&p| T::from_f64(p)).collect())
            .expect("probs shape");
        let v = self.push_f64(
            Shape::scalar(),
            vec![loss],
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        );
        Ok((v, probs_t))
    }

    /// Elementwise map with a caller-supplied derivative. The backward rule is
    /// trusted, which makes this the hook for testing the gradient checker.
    pub fn elementwise(
        &mut self,
        x: Var,
        forward: impl Fn(f64) -> f64,
        backward: Box<BackwardFn>,
    ) -> Var {
        let s = self.shape(x);
        let out = self.value(x).data().iter().map(|v| forward(v.to_f64())).collect();
        self.push_f64(s, out, Op::Elementwise { x, backward })
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to whatever is
    /// already stored, so call [`Tape::zero_grad`] between independent passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(OffError::shape(format!("backward needs a scalar loss, got {s}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.op_backward(idx, &gout) {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            // Put it back so the accumulation pass below sees it.
            grads[idx] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let (true, Some(g)) = (node.requires_grad, g) else {
                continue;
            };
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a = T::from_f64(a.to_f64() + b)),
                slot => {
                    let data = g.into_iter().map(T::from_f64).collect();
                    *slot = Some(Tensor::from_vec(node.value.shape(), data).expect("grad shape"));
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, idx: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return vec![];
        }
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Fixed3x3 { x, kernel } => {
                let s = self.shape(*x);
                out.push((
                    *x,
                    conv::depthwise3x3_backward(gout, s.n * s.c, s.h, s.w, kernel),
                ));
            }
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x).n;
                let grads = conv::conv_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    &self.f64_of(*w),
                    gout,
                    self.wants(*x),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    out.push((*w, grads.dw));
                }
                if self.wants(*b) {
                    out.push((*b, grads.db));
                }
            }
            Op::Relu { x } => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > T::ZERO { *g } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut g = vec![0.0; self.shape(*x).numel()];
                for (&src, &go) in argmax.iter().zip(gout) {
                    g[src] += go;
                }
                out.push((*x, g));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let inv = 1.0 / s.plane() as f64;
                let mut g = Vec::with_capacity(s.numel());
                for go in gout {
                    g.extend(std::iter::repeat_n(go * inv, s.plane()));
                }
                out.push((*x, g));
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(s.n * c * plane);
                        for n in 0..s.n {
                            let start = (n * s.c + offset) * plane;
                            g.extend_from_slice(&gout[start..start + c * plane]);
                        }
                        out.push((p, g));
                    }
                    offset += c;
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    out.push((*a, gout.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, gout.iter().map(|g| -g).collect()));
                }
            }
            Op::AddN { parts } => {
                for &p in parts {
                    if self.wants(p) {
                        out.push((p, gout.to_vec()));
                    }
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, gout.iter().map(|g| g * factor).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![gout[0]; self.shape(*x).numel()]));
            }
            Op::Linear { x, w, b } => {
                let (n, d, k) = (self.shape(*x).n, self.shape(*x).c, self.shape(*w).n);
                if self.wants(*x) {
                    let wv = self.f64_of(*w);
                    let mut g = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..k {
                            let go = gout[i * k + j];
                            for t in 0..d {
                                g[i * d + t] += go * wv[j * d + t];
                            }
                        }
                    }
                    out.push((*x, g));
                }
                if self.wants(*w) {
                    let xv = self.f64_of(*x);
                    let mut g = vec![0.0; k * d];
                    for i in 0..n {
                        for j in 0..k {
                            let go = gout[i * k + j];
                            for t in 0..d {
                                g[j * d + t] += go * xv[i * d + t];
                            }
                        }
                    }
                    out.push((*w, g));
                }
                if self.wants(*b) {
                    let mut g = vec![0.0; k];
                    for i in 0..n {
                        for j in 0..k {
                            g[j] += gout[i * k + j];
                        }
                    }
                    out.push((*b, g));
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(*logits);
                let scale = gout[0] / s.n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * s.c + l] -= scale;
                }
                out.push((*logits, g));
            }
            Op::Elementwise { x, backward } => {
                out.push((*x, backward(&self.f64_of(*x), gout)));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_of_negative_relu_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 2, 2, 2), -0.5f32), true);
        let y = tape.relu(x);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 1)), true);
        assert!(matches!(tape.backward(x), Err(OffError::InvalidShape(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0f32), true);
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
        tape.zero_grad();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn maxpool_examples_and_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let thin = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 4)), false);
        assert!(tape.maxpool2(thin).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_occurrence() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0f32), true);
        let y = tape.maxpool2(x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_odd_tail() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f32>::zeros(Shape::new(1, 1, 5, 3)), false);
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 2, 1));
    }

    #[test]
    fn global_avg_pool_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 5.0, 7.0]), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let c = tape.leaf(Tensor::full(Shape::new(2, 3, 3, 5), 1.5f32), false);
        let y = tape.global_avg_pool(c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn concat_preserves_order_and_offsets() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]), true);
        let b = tape.leaf(t(Shape::new(1, 2, 1, 2), &[3.0, 4.0, 5.0, 6.0]), true);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), Shape::new(1, 3, 1, 2));
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let single = tape.concat_channels(&[b]).unwrap();
        assert_eq!(tape.value(single), tape.value(b));
        let wrong = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), false);
        assert!(tape.concat_channels(&[a, wrong]).is_err());
    }

    #[test]
    fn sub_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(Shape::new(1, 2, 2, 2), 7.0f32), false);
        let b = tape.leaf(Tensor::full(Shape::new(1, 2, 2, 2), 2.0f32), false);
        let d = tape.sub(a, b).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 5.0));
        let z = tape.sub(a, a).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let other = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), false);
        assert!(tape.sub(a, other).is_err());
    }

    #[test]
    fn conv1x1_identity_and_channel_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[3.0, -4.0]), false);
        let w = tape.leaf(t(Shape::new(1, 1, 1, 1), &[1.0]), false);
        let b = tape.leaf(t(Shape::new(1, 1, 1, 1), &[0.0]), false);
        let y = tape.conv1x1(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.leaf(t(Shape::new(1, 2, 1, 1), &[3.0, 4.0]), false);
        let w = tape.leaf(t(Shape::new(1, 2, 1, 1), &[1.0, 1.0]), false);
        let y = tape.conv1x1(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);

        let w3 = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)), false);
        assert!(matches!(tape.conv1x1(x, w3, b), Err(OffError::InvalidShape(_))));
    }

    #[test]
    fn conv3x3_delta_and_ones() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(Shape::new(1, 1, 4, 5), |_, _, y, x| (y * 5 + x) as f32);
        let x = tape.leaf(img, false);
        let mut delta = Tensor::zeros(Shape::new(1, 1, 3, 3));
        delta.set(0, 0, 1, 1, 1.0f32);
        let w = tape.leaf(delta, false);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)), false);
        let y = tape.conv3x3(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.leaf(Tensor::full(Shape::new(1, 1, 5, 5), 1.0f32), false);
        let w1 = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32), false);
        let y = tape.conv3x3(ones, w1, b, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0, 2, 2), 9.0);
        assert_eq!(v.at(0, 0, 0, 0), 4.0);
        assert_eq!(v.at(0, 0, 0, 2), 6.0);

        let y2 = tape.conv3x3(ones, w1, b, 2).unwrap();
        assert_eq!(tape.shape(y2), Shape::new(1, 1, 3, 3));
        assert!(matches!(tape.conv3x3(ones, w1, b, 3), Err(OffError::Config(_))));
    }

    #[test]
    fn linear_identity_and_zero_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::matrix(2, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let eye = tape.leaf(t(Shape::new(2, 2, 1, 1), &[1.0, 0.0, 0.0, 1.0]), false);
        let zb = tape.leaf(Tensor::zeros(Shape::new(2, 1, 1, 1)), false);
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zw = tape.leaf(Tensor::zeros(Shape::new(2, 2, 1, 1)), false);
        let b = tape.leaf(t(Shape::new(2, 1, 1, 1), &[0.5, -1.5]), false);
        let y = tape.linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

        let bad = tape.leaf(Tensor::zeros(Shape::new(2, 3, 1, 1)), false);
        assert!(tape.linear(x, bad, zb).is_err());
    }

    #[test]
    fn softmax_xent_examples() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::full(Shape::matrix(1, 8), 0.3), false);
        let (l, probs) = tape.softmax_xent(z, &[5]).unwrap();
        assert!((tape.value(l).data()[0] as f64 - 8f64.ln()).abs() < 1e-6);
        assert!((probs.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);

        let z = tape.leaf(t(Shape::matrix(1, 2), &[1000.0, 0.0]), false);
        let (l, _) = tape.softmax_xent(z, &[0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-6);

        let z = tape.leaf(t(Shape::matrix(1, 2), &[2.0, 0.0]), false);
        let (l, _) = tape.softmax_xent(z, &[0]).unwrap();
        // ln(1 + e^-2)
        assert!((tape.value(l).data()[0] - 0.126_928_01).abs() < 1e-6);

        assert!(matches!(
            tape.softmax_xent(z, &[2]),
            Err(OffError::InvalidLabel { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn grads_only_reach_requires_grad_leaves() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0), false);
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 0.5), true);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)), true);
        let y = tape.conv3x3(x, w, b, 1).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0]);
        // every output pixel of a 2x2 image sees 4 in-bounds taps
        assert_eq!(tape.grad(w).unwrap().data().iter().sum::<f64>(), 16.0);
    }
}
