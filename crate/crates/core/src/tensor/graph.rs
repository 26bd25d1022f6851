use std::collections::HashMap;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{gemm, Real, Tensor};
use crate::error::{PdseError, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Sum,
    Mean,
    Reshape,
    MatMul,
    Linear,
    Conv2d,
    DeformConv2d,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    Upsample2x,
    Concat,
    BatchNorm,
    FocalLoss,
    SmoothL1,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DeformConv2d {
        x: Var,
        off: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        geom: PoolGeom,
    },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    FocalLoss {
        x: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        alpha: T,
        gamma: T,
        norm: T,
    },
    SmoothL1 {
        x: Var,
        target: Vec<T>,
        mask: Vec<T>,
        beta: T,
        norm: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::DeformConv2d { .. } => OpKind::DeformConv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::Concat(_) => OpKind::Concat,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Record of executed operations. Nodes are appended in execution order, so the
/// node list is already a topological order for the reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    training: bool,
    consumed: bool,
    kink_margin: f64,
    fault: Option<OpKind>,
    bn_updates: Vec<BnUpdate<T>>,
    param_vars: HashMap<ParamId, Var>,
}

pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.by_node.get(n))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(p, n)| self.by_node.get(n).map(|g| (*p, g)))
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(PdseError::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(PdseError::shape(op, a, b)),
        })
        .collect()
}

/// Flat source index in a (possibly broadcast) operand for every output element.
fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if input[d] == 1 { 0 } else { s };
        s *= input[d];
    }
    let numel: usize = out.iter().product();
    let mut idx = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-element sigmoid focal loss and its derivative w.r.t. the logit.
pub(crate) fn focal_term(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-x).exp());
    if target > 0.5 {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

pub(crate) fn smooth_l1_term(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

impl<T: Real> Graph<T> {
    /// `training` selects batch statistics (and running-stat updates) in batch norm.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            consumed: false,
            kink_margin: f64::INFINITY,
            fault: None,
            bn_updates: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance, over the recorded forward pass, between an
    /// intermediate quantity and a point where some op is not differentiable
    /// (ReLU at 0, max-pool ties, bilinear lattice lines, smooth-L1 branch).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Test hook: negate the gradient rule of one op kind during backward.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn note_margin(&mut self, m: f64) {
        self.kink_margin = self.kink_margin.min(m);
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(PdseError::NonFinite { op: name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a)
            | Op::Upsample2x(a) => vec![*a],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::DeformConv2d { x, off, w, b, .. } => {
                let mut v = vec![*x, *off, *w];
                v.extend(b);
                v
            }
            Op::MaxPool2d { x, .. } | Op::AvgPool2d { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::FocalLoss { x, .. } | Op::SmoothL1 { x, .. } => vec![*x],
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests share one node, so a
    /// parameter used at several pyramid levels accumulates a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] requests for `id` return `var`, so a
    /// block's parameters can be fed from ordinary leaves.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.param_vars.insert(id, var);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        self.push(op, value, name)
    }

    /// Elementwise sum with size-1 broadcasting on either operand (equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with size-1 broadcasting on either operand (equal rank).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::c(factor);
        let value = self.value(a).map(|v| v * f);
        self.push(Op::Scale(a, f), value, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let m = self
            .value(a)
            .data()
            .iter()
            .map(|v| v.f64().abs())
            .fold(f64::INFINITY, f64::min);
        self.note_margin(m);
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(Op::Relu(a), value, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(a), value, "sigmoid")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::c(t.numel() as f64);
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), value, "reshape")
    }

    /// `[M, K] @ [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(PdseError::shape("matmul", sa, sb)),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// Fully connected layer: `x [N, In]`, `w [Out, In]`, `b [Out]` -> `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (n, i, o) = match (sx, sw) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => return Err(PdseError::shape("linear", sx, sw)),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(PdseError::shape("linear", sw, self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let value = Tensor::new(&[n, o], out)?;
        self.push(Op::Linear { x, w, b }, value, "linear")
    }

    /// 2D convolution, NCHW input, `[O, I, k, k]` weight, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new("conv2d", self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(PdseError::shape("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push(Op::Conv2d { x, w, b, geom }, value, "conv2d")
    }

    /// Deformable convolution: tap `t` at output `p` samples the input at
    /// `p·stride − pad + g_t + (off[2t], off[2t+1])` by bilinear interpolation.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        off: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new("deform_conv2d", self.shape(x), self.shape(w), stride, pad)?;
        let want = [geom.n, 2 * geom.k * geom.k, geom.ho, geom.wo];
        if self.shape(off) != want {
            return Err(PdseError::invalid(
                "deform_conv2d",
                format!(
                    "offset map must be {want:?} ({} channels), got {:?}",
                    2 * geom.k * geom.k,
                    self.shape(off)
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(PdseError::shape("deform_conv2d", self.shape(w), self.shape(b)));
            }
        }
        let (out, margin) = kernels::deform_conv2d_forward(
            self.value(x).data(),
            self.value(off).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.note_margin(margin);
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push(Op::DeformConv2d { x, off, w, b, geom }, value, "deform_conv2d")
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let geom = PoolGeom::new("max_pool2d", &s, k, stride, pad)?;
        let (out, argmax, margin) = kernels::maxpool_forward(self.value(x).data(), &geom);
        self.note_margin(margin);
        let value = Tensor::new(&[s[0], s[1], geom.ho, geom.wo], out)?;
        self.push(Op::MaxPool2d { x, argmax }, value, "max_pool2d")
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let geom = PoolGeom::new("avg_pool2d", &s, k, stride, pad)?;
        let out = kernels::avgpool_forward(self.value(x).data(), &geom);
        let value = Tensor::new(&[s[0], s[1], geom.ho, geom.wo], out)?;
        self.push(Op::AvgPool2d { x, geom }, value, "avg_pool2d")
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` channel means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = T::one() / T::c((h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        self.push(Op::GlobalAvgPool(x), value, "global_avg_pool")
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.push(Op::Upsample2x(x), value, "upsample2x")
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| PdseError::invalid("concat", "no inputs"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (nn, c, hh, ww) = self.value(v).dims4()?;
            if (nn, hh, ww) != (n, h, w) {
                return Err(PdseError::shape("concat", self.shape(*first), self.shape(v)));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[1] * h * w;
                out.extend_from_slice(&t.data()[s * len..(s + 1) * len]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        self.push(Op::Concat(xs.to_vec()), value, "concat")
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode batch statistics are used and, when `running` is
    /// given, a [`BnUpdate`] is queued. In eval mode the stored running
    /// statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        running: Option<(ParamId, ParamId)>,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(PdseError::shape("batch_norm", self.shape(x), self.shape(v)));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(PdseError::shape("batch_norm", self.shape(x), running_mean.shape()));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xv = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = if self.training {
            (0..c)
                .map(|ch| {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        let o = (s_i * c + ch) * plane;
                        s += xv[o..o + plane].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for s_i in 0..n {
                        let o = (s_i * c + ch) * plane;
                        ss += xv[o..o + plane].iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
                    }
                    (mu, ss / m)
                })
                .unzip()
        } else {
            (
                running_mean.data().iter().map(|v| v.f64()).collect(),
                running_var.data().iter().map(|v| v.f64()).collect(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::c(1.0 / (v + eps).sqrt())).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let o = (s_i * c + ch) * plane;
                let mu = T::c(mean[ch]);
                for i in o..o + plane {
                    let xh = (xv[i] - mu) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let batch_stats = self.training;
        if batch_stats {
            if let Some((mean_id, var_id)) = running {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.bn_updates.push(BnUpdate {
                    mean_id,
                    var_id,
                    batch_mean: mean.iter().map(|&v| T::c(v)).collect(),
                    batch_var: var.iter().map(|&v| T::c(v * unbias)).collect(),
                });
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            value,
            "batch_norm",
        )
    }

    /// Sigmoid focal loss summed over elements with nonzero `weights`, divided
    /// by `normalizer`. `targets` hold 0/1 per element.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        weights: &Tensor<T>,
        alpha: f64,
        gamma: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if targets.shape() != s || weights.shape() != s {
            return Err(PdseError::shape("focal_loss", &s, targets.shape()));
        }
        if !(normalizer > 0.0) {
            return Err(PdseError::invalid("focal_loss", "normalizer must be positive"));
        }
        let mut total = 0.0;
        for ((x, t), w) in self.value(logits).data().iter().zip(targets.data()).zip(weights.data()) {
            if w.f64() != 0.0 {
                total += w.f64() * focal_term(x.f64(), t.f64(), alpha, gamma).0;
            }
        }
        let value = Tensor::scalar(T::c(total / normalizer));
        self.push(
            Op::FocalLoss {
                x: logits,
                targets: targets.data().to_vec(),
                weights: weights.data().to_vec(),
                alpha: T::c(alpha),
                gamma: T::c(gamma),
                norm: T::c(normalizer),
            },
            value,
            "focal_loss",
        )
    }

    /// Smooth-L1 over elements where `mask` is nonzero, divided by `normalizer`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        mask: &Tensor<T>,
        beta: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if target.shape() != s || mask.shape() != s {
            return Err(PdseError::shape("smooth_l1", &s, target.shape()));
        }
        if !(normalizer > 0.0) || !(beta > 0.0) {
            return Err(PdseError::invalid("smooth_l1", "beta and normalizer must be positive"));
        }
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        for ((p, t), m) in self.value(pred).data().iter().zip(target.data()).zip(mask.data()) {
            if m.f64() != 0.0 {
                let d = p.f64() - t.f64();
                margin = margin.min((d.abs() - beta).abs());
                total += m.f64() * smooth_l1_term(d, beta).0;
            }
        }
        self.note_margin(margin);
        let value = Tensor::scalar(T::c(total / normalizer));
        self.push(
            Op::SmoothL1 {
                x: pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                beta: T::c(beta),
                norm: T::c(normalizer),
            },
            value,
            "smooth_l1",
        )
    }

    /// Reverse sweep from a single-element `loss`. Every leaf that requires a
    /// gradient receives one (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(PdseError::Backward("graph already consumed by a previous backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(PdseError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut by_node = HashMap::new();
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(id) = node.param {
                    params.push((id, i));
                }
                by_node.insert(i, g);
                continue;
            }
            let mut contribs = self.vjp(i, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, t) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && !by_node.contains_key(&i) {
                by_node.insert(i, Tensor::zeros(node.value.shape()));
                if let Some(id) = node.param {
                    params.push((id, i));
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { by_node, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_broadcast(&self, v: Var, out_shape: &[usize], g: Vec<T>) -> Result<Tensor<T>> {
        let shape = self.shape(v);
        if shape == out_shape {
            return Tensor::new(shape, g);
        }
        let idx = broadcast_index(out_shape, shape);
        let mut acc = vec![T::zero(); self.value(v).numel()];
        for (i, gv) in idx.into_iter().zip(g) {
            acc[i] += gv;
        }
        Tensor::new(shape, acc)
    }

    /// Gradient contributions of node `i` to its inputs.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.needs(*a) {
                    res.push((*a, self.reduce_broadcast(*a, out_shape, gd.to_vec())?));
                }
                if self.needs(*b) {
                    let gb = if neg { gd.iter().map(|&v| -v).collect() } else { gd.to_vec() };
                    res.push((*b, self.reduce_broadcast(*b, out_shape, gb)?));
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ia, ib) = if sa == sb {
                    ((0..gd.len()).collect::<Vec<_>>(), (0..gd.len()).collect::<Vec<_>>())
                } else {
                    (broadcast_index(out_shape, sa), broadcast_index(out_shape, sb))
                };
                if self.needs(*a) {
                    let ga = gd.iter().zip(&ib).map(|(&gv, &j)| gv * vb[j]).collect();
                    res.push((*a, self.reduce_broadcast(*a, out_shape, ga)?));
                }
                if self.needs(*b) {
                    let gb = gd.iter().zip(&ia).map(|(&gv, &j)| gv * va[j]).collect();
                    res.push((*b, self.reduce_broadcast(*b, out_shape, gb)?));
                }
            }
            Op::Scale(a, f) => {
                res.push((*a, g.map(|v| v * *f)));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((*a, Tensor::new(out_shape, d)?));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                res.push((*a, Tensor::new(out_shape, d)?));
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).numel();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    T::one() / T::c(n as f64)
                } else {
                    T::one()
                };
                res.push((*a, Tensor::full(self.shape(*a), gd[0] * scale)));
            }
            Op::Reshape(a) => {
                res.push((*a, g.clone().reshape(self.shape(*a))?));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut ga, false);
                    res.push((*a, Tensor::new(&[m, k], ga)?));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut gb, false);
                    res.push((*b, Tensor::new(&[k, n], gb)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * inp];
                    gemm(n, o, inp, gd, false, self.value(*w).data(), false, &mut gx, false);
                    res.push((*x, Tensor::new(&[n, inp], gx)?));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); o * inp];
                    gemm(o, n, inp, gd, true, self.value(*x).data(), false, &mut gw, false);
                    res.push((*w, Tensor::new(&[o, inp], gw)?));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in gd.chunks(o) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        res.push((*b, Tensor::new(&[o], gb)?));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_b = b.map(|b| self.needs(b)).unwrap_or(false);
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    need_b,
                );
                if let Some(dx) = cg.dx {
                    res.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if let Some(dw) = cg.dw {
                    res.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    res.push((*b, Tensor::new(&[geom.o], db)?));
                }
            }
            Op::DeformConv2d { x, off, w, b, geom } => {
                let need_b = b.map(|b| self.needs(b)).unwrap_or(false);
                let dg = kernels::deform_conv2d_backward(
                    self.value(*x).data(),
                    self.value(*off).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    self.needs(*x),
                    self.needs(*off),
                    self.needs(*w),
                    need_b,
                );
                if let Some(dx) = dg.dx {
                    res.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if let Some(doff) = dg.doff {
                    res.push((*off, Tensor::new(self.shape(*off), doff)?));
                }
                if let Some(dw) = dg.dw {
                    res.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
                if let (Some(b), Some(db)) = (b, dg.db) {
                    res.push((*b, Tensor::new(&[geom.o], db)?));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&j, &gv) in argmax.iter().zip(gd) {
                    if j != usize::MAX {
                        dx[j] += gv;
                    }
                }
                res.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::AvgPool2d { x, geom } => {
                let dx = kernels::avgpool_backward(gd, geom);
                res.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let inv = T::one() / T::c((h * w) as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                res.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::upsample2x_backward(gd, n * c, h, w);
                res.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = node.value.dims4()?;
                let mut c0 = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(n * c * h * w);
                        for s in 0..n {
                            let start = (s * total_c + c0) * h * w;
                            dv.extend_from_slice(&gd[start..start + c * h * w]);
                        }
                        res.push((v, Tensor::new(self.shape(v), dv)?));
                    }
                    c0 += c;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let m = T::c((n * plane) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let o = (s * c + ch) * plane;
                        for i in o..o + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let o = (s * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for i in o..o + plane {
                                dx[i] = if *batch_stats {
                                    k / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    res.push((*x, Tensor::new(&[n, c, h, w], dx)?));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, Tensor::new(&[c], dgamma)?));
                }
                if self.needs(*beta) {
                    res.push((*beta, Tensor::new(&[c], dbeta)?));
                }
            }
            Op::FocalLoss {
                x,
                targets,
                weights,
                alpha,
                gamma,
                norm,
            } => {
                let scale = gd[0].f64() / norm.f64();
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((xx, t), w)| {
                        if w.f64() == 0.0 {
                            T::zero()
                        } else {
                            let gx = focal_term(xx.f64(), t.f64(), alpha.f64(), gamma.f64()).1;
                            T::c(scale * w.f64() * gx)
                        }
                    })
                    .collect();
                res.push((*x, Tensor::new(self.shape(*x), d)?));
            }
            Op::SmoothL1 {
                x,
                target,
                mask,
                beta,
                norm,
            } => {
                let scale = gd[0].f64() / norm.f64();
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((p, t), m)| {
                        if m.f64() == 0.0 {
                            T::zero()
                        } else {
                            let gx = smooth_l1_term(p.f64() - t.f64(), beta.f64()).1;
                            T::c(scale * m.f64() * gx)
                        }
                    })
                    .collect();
                res.push((*x, Tensor::new(self.shape(*x), d)?));
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let p = g.leaf(t(&[2], &[5.0, 6.0]), true);
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(PdseError::Backward(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(PdseError::Backward(_))));
    }

    #[test]
    fn sigmoid_and_pooling_values() {
        let mut g = Graph::<f64>::new(true);
        let z = g.leaf(t(&[1], &[0.0]), false);
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let m = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = g.global_avg_pool(m).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let u = g.upsample2x(m).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let mp = g.max_pool2d(m, 2, 2, 0).unwrap();
        assert_eq!(g.value(mp).data(), &[4.0]);
        let ap = g.avg_pool2d(m, 2, 2, 0).unwrap();
        assert_eq!(g.value(ap).data(), &[2.5]);
    }

    #[test]
    fn conv_counts_overlapping_taps() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.at4(0, 0, 1, 1), 9.0);
        assert_eq!(v.at4(0, 0, 0, 0), 4.0);
        assert_eq!(v.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::<f64>::new(true);
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 4]), false);
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
        let w5 = g.leaf(Tensor::zeros(&[1, 2, 5, 5]), false);
        let tiny = g.leaf(Tensor::zeros(&[1, 2, 1, 1]), false);
        assert!(g.conv2d(tiny, w5, None, 1, 0).is_err());
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let s = g.leaf(t(&[1, 2, 1, 1], &[10.0, 100.0]), true);
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 300.0, 400.0]);
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[10.0, 10.0, 100.0, 100.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(t(&[1], &[f64::MAX]), false);
        assert!(matches!(g.scale(x, 10.0), Err(PdseError::NonFinite { .. })));
    }
}
