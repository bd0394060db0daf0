//! Graph evaluation: an eager evaluator for inference and a reverse-mode tape
//! for training. Network code is written once against [`Ops`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels;
use crate::nn::Param;
use crate::tensor::Tensor;

/// The operator set shared by the eager evaluator and the tape.
pub trait Ops {
    type V: Clone;

    fn constant(&self, t: Tensor) -> Self::V;
    /// A network parameter. Whether it is differentiated is up to the evaluator.
    fn param(&self, p: &Param) -> Self::V;
    fn value(&self, v: &Self::V) -> Arc<Tensor>;

    fn conv2d(
        &self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
    ) -> Self::V;
    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d(
        &self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self::V;
    fn reflect_pad(&self, x: &Self::V, pad: usize) -> Self::V;
    fn instance_norm(&self, x: &Self::V, gamma: Option<&Self::V>, beta: Option<&Self::V>)
        -> Self::V;
    /// `x * scale[c] + shift[c]` with constant per-channel coefficients.
    fn channel_affine(&self, x: &Self::V, scale: &[f64], shift: &[f64]) -> Self::V;
    fn max_pool2d(&self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Self::V;
    fn unit_normalize_channels(&self, x: &Self::V) -> Self::V;
    fn concat_channels(&self, parts: &[Self::V]) -> Self::V;
    fn repeat_channels(&self, x: &Self::V, times: usize) -> Self::V;
    fn sum_channels(&self, x: &Self::V) -> Self::V;
    fn global_avg_pool(&self, x: &Self::V) -> Self::V;

    fn relu(&self, x: &Self::V) -> Self::V;
    fn leaky_relu(&self, x: &Self::V, slope: f64) -> Self::V;
    fn tanh(&self, x: &Self::V) -> Self::V;
    fn sigmoid(&self, x: &Self::V) -> Self::V;
    fn abs(&self, x: &Self::V) -> Self::V;
    fn square(&self, x: &Self::V) -> Self::V;
    fn scale(&self, x: &Self::V, s: f64) -> Self::V;
    fn shift(&self, x: &Self::V, s: f64) -> Self::V;
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Mean over all elements, as a scalar.
    fn mean(&self, x: &Self::V) -> Self::V;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn item(&self, v: &Self::V) -> f64 {
        self.value(v).item()
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn concat(parts: &[&Tensor]) -> (Tensor, Vec<usize>) {
    let (n, _, h, w) = parts[0].dims4();
    let chans: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (pn, pc, ph, pw) = p.dims4();
            assert!(
                pn == n && ph == h && pw == w,
                "concat: incompatible shapes {:?} and {:?}",
                parts[0].shape(),
                p.shape()
            );
            pc
        })
        .collect();
    let total: usize = chans.iter().sum();
    let m = h * w;
    let mut out = Vec::with_capacity(n * total * m);
    for i in 0..n {
        for (p, &c) in parts.iter().zip(&chans) {
            out.extend_from_slice(&p.data()[i * c * m..(i + 1) * c * m]);
        }
    }
    (Tensor::new(vec![n, total, h, w], out), chans)
}

fn repeat_channels(x: &Tensor, times: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = c * h * w;
    let mut out = Vec::with_capacity(n * plane * times);
    for i in 0..n {
        for _ in 0..times {
            out.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
        }
    }
    Tensor::new(vec![n, c * times, h, w], out)
}

fn sum_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let m = h * w;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * m;
            for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(&x.data()[off..off + m]) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let m = h * w;
    let out = x
        .data()
        .chunks(m)
        .map(|p| p.iter().sum::<f64>() / m as f64)
        .collect();
    Tensor::new(vec![n, c, 1, 1], out)
}

fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let (_, c, h, w) = x.dims4();
    assert_eq!(scale.len(), c);
    assert_eq!(shift.len(), c);
    let m = h * w;
    let mut out = x.data().to_vec();
    for (p, plane) in out.chunks_mut(m).enumerate() {
        let ch = p % c;
        for v in plane {
            *v = *v * scale[ch] + shift[ch];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Forward-only evaluation; intermediates are dropped as soon as possible.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Arc<Tensor>;

    fn constant(&self, t: Tensor) -> Self::V {
        Arc::new(t)
    }

    fn param(&self, p: &Param) -> Self::V {
        p.shared()
    }

    fn value(&self, v: &Self::V) -> Arc<Tensor> {
        v.clone()
    }

    fn conv2d(
        &self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
    ) -> Self::V {
        Arc::new(kernels::conv2d(x, w, b.map(|b| &**b), stride, pad))
    }

    fn conv_transpose2d(
        &self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self::V {
        Arc::new(kernels::conv_transpose2d(
            x,
            w,
            b.map(|b| &**b),
            stride,
            pad,
            out_pad,
        ))
    }

    fn reflect_pad(&self, x: &Self::V, pad: usize) -> Self::V {
        Arc::new(kernels::reflect_pad(x, pad))
    }

    fn instance_norm(
        &self,
        x: &Self::V,
        gamma: Option<&Self::V>,
        beta: Option<&Self::V>,
    ) -> Self::V {
        Arc::new(kernels::instance_norm(x, gamma.map(|g| &**g), beta.map(|b| &**b)).0)
    }

    fn channel_affine(&self, x: &Self::V, scale: &[f64], shift: &[f64]) -> Self::V {
        Arc::new(channel_affine(x, scale, shift))
    }

    fn max_pool2d(&self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Self::V {
        Arc::new(kernels::max_pool2d(x, k, stride, pad).0)
    }

    fn unit_normalize_channels(&self, x: &Self::V) -> Self::V {
        Arc::new(kernels::unit_normalize_channels(x).0)
    }

    fn concat_channels(&self, parts: &[Self::V]) -> Self::V {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &**p).collect();
        Arc::new(concat(&refs).0)
    }

    fn repeat_channels(&self, x: &Self::V, times: usize) -> Self::V {
        Arc::new(repeat_channels(x, times))
    }

    fn sum_channels(&self, x: &Self::V) -> Self::V {
        Arc::new(sum_channels(x))
    }

    fn global_avg_pool(&self, x: &Self::V) -> Self::V {
        Arc::new(global_avg_pool(x))
    }

    fn relu(&self, x: &Self::V) -> Self::V {
        Arc::new(unary(x, |v| v.max(0.0)))
    }

    fn leaky_relu(&self, x: &Self::V, slope: f64) -> Self::V {
        Arc::new(unary(x, |v| if v > 0.0 { v } else { slope * v }))
    }

    fn tanh(&self, x: &Self::V) -> Self::V {
        Arc::new(unary(x, f64::tanh))
    }

    fn sigmoid(&self, x: &Self::V) -> Self::V {
        Arc::new(unary(x, sigmoid))
    }

    fn abs(&self, x: &Self::V) -> Self::V {
        Arc::new(unary(x, f64::abs))
    }

    fn square(&self, x: &Self::V) -> Self::V {
        Arc::new(unary(x, |v| v * v))
    }

    fn scale(&self, x: &Self::V, s: f64) -> Self::V {
        Arc::new(unary(x, |v| v * s))
    }

    fn shift(&self, x: &Self::V, s: f64) -> Self::V {
        Arc::new(unary(x, |v| v + s))
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Arc::new(a.zip_map(b, |x, y| x + y))
    }

    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Arc::new(a.zip_map(b, |x, y| x - y))
    }

    fn mean(&self, x: &Self::V) -> Self::V {
        Arc::new(Tensor::scalar(x.mean()))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    ReflectPad {
        x: usize,
        pad: usize,
    },
    InstanceNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: usize,
        scale: Vec<f64>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    UnitNormalize {
        x: usize,
        norms: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        chans: Vec<usize>,
    },
    Repeat {
        x: usize,
        times: usize,
    },
    SumChannels {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Square {
        x: usize,
    },
    Scale {
        x: usize,
        s: f64,
    },
    Shift {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mean {
        x: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Parameters whose names start with one of the trainable prefixes become
/// differentiable leaves (one leaf per name, shared across uses); every other
/// parameter is inserted as a constant.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<HashMap<String, usize>>,
    trainable: Vec<String>,
}

impl Tape {
    pub fn new<S: AsRef<str>>(trainable_prefixes: &[S]) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(HashMap::new()),
            trainable: trainable_prefixes
                .iter()
                .map(|s| s.as_ref().to_string())
                .collect(),
        }
    }

    /// A differentiable input that is not a named parameter.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(Arc::new(t), Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: usize) -> Arc<Tensor> {
        self.nodes.borrow()[v].value.clone()
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes.borrow()[v].requires_grad
    }

    fn unary_op(&self, x: &Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.val(x.0).map(f);
        self.push(Arc::new(out), op, self.rg(x.0))
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            grads,
            bindings: self.bindings.borrow().clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    let v = |i: usize| &*nodes[i].value;
    let out = &*nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (dx, dw, db) = kernels::conv2d_backward(
                v(x),
                v(w),
                g,
                stride,
                pad,
                kernels::Wanted {
                    input: rg(x),
                    weight: rg(w),
                    bias: b.is_some_and(rg),
                },
            );
            if let Some(d) = dx {
                accumulate(grads, x, d);
            }
            if let Some(d) = dw {
                accumulate(grads, w, d);
            }
            if let (Some(d), Some(b)) = (db, b) {
                accumulate(grads, b, d);
            }
        }
        &Op::ConvTranspose2d {
            x,
            w,
            b,
            stride,
            pad,
            out_pad,
        } => {
            let (dx, dw, db) = kernels::conv_transpose2d_backward(
                v(x),
                v(w),
                g,
                stride,
                pad,
                out_pad,
                kernels::Wanted {
                    input: rg(x),
                    weight: rg(w),
                    bias: b.is_some_and(rg),
                },
            );
            if let Some(d) = dx {
                accumulate(grads, x, d);
            }
            if let Some(d) = dw {
                accumulate(grads, w, d);
            }
            if let (Some(d), Some(b)) = (db, b) {
                accumulate(grads, b, d);
            }
        }
        &Op::ReflectPad { x, pad } => {
            if rg(x) {
                let (_, _, h, w) = v(x).dims4();
                accumulate(grads, x, kernels::reflect_pad_backward(g, pad, h, w));
            }
        }
        Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gm = gamma.map(&v);
            let (dx, dgamma, dbeta) = kernels::instance_norm_backward(g, xhat, inv_std, gm);
            if rg(*x) {
                accumulate(grads, *x, dx);
            }
            if let Some(gi) = gamma.filter(|&i| rg(i)) {
                accumulate(grads, gi, dgamma);
            }
            if let Some(bi) = beta.filter(|&i| rg(i)) {
                accumulate(grads, bi, dbeta);
            }
        }
        Op::ChannelAffine { x, scale } => {
            if rg(*x) {
                let zeros = vec![0.0; scale.len()];
                accumulate(grads, *x, channel_affine(g, scale, &zeros));
            }
        }
        Op::MaxPool { x, argmax } => {
            if rg(*x) {
                accumulate(
                    grads,
                    *x,
                    kernels::max_pool2d_backward(g, argmax, v(*x).shape()),
                );
            }
        }
        Op::UnitNormalize { x, norms } => {
            if rg(*x) {
                accumulate(
                    grads,
                    *x,
                    kernels::unit_normalize_channels_backward(v(*x), norms, g),
                );
            }
        }
        Op::Concat { parts, chans } => {
            let (n, total, h, w) = g.dims4();
            let m = h * w;
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(chans) {
                if rg(p) {
                    let mut d = Vec::with_capacity(n * c * m);
                    for i in 0..n {
                        let start = (i * total + offset) * m;
                        d.extend_from_slice(&g.data()[start..start + c * m]);
                    }
                    accumulate(grads, p, Tensor::new(vec![n, c, h, w], d));
                }
                offset += c;
            }
        }
        &Op::Repeat { x, times } => {
            if rg(x) {
                let (n, c, h, w) = v(x).dims4();
                let plane = c * h * w;
                let mut d = vec![0.0; n * plane];
                for i in 0..n {
                    for t in 0..times {
                        let src = &g.data()[(i * times + t) * plane..(i * times + t + 1) * plane];
                        for (o, s) in d[i * plane..(i + 1) * plane].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(vec![n, c, h, w], d));
            }
        }
        &Op::SumChannels { x } => {
            if rg(x) {
                let (n, c, h, w) = v(x).dims4();
                let m = h * w;
                let mut d = Vec::with_capacity(n * c * m);
                for i in 0..n {
                    for _ in 0..c {
                        d.extend_from_slice(&g.data()[i * m..(i + 1) * m]);
                    }
                }
                accumulate(grads, x, Tensor::new(vec![n, c, h, w], d));
            }
        }
        &Op::GlobalAvgPool { x } => {
            if rg(x) {
                let (n, c, h, w) = v(x).dims4();
                let m = h * w;
                let mut d = Vec::with_capacity(n * c * m);
                for gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / m as f64, m));
                }
                accumulate(grads, x, Tensor::new(vec![n, c, h, w], d));
            }
        }
        &Op::Relu { x } => {
            if rg(x) {
                accumulate(grads, x, v(x).zip_map(g, |a, gv| if a > 0.0 { gv } else { 0.0 }));
            }
        }
        &Op::LeakyRelu { x, slope } => {
            if rg(x) {
                accumulate(
                    grads,
                    x,
                    v(x).zip_map(g, |a, gv| if a > 0.0 { gv } else { slope * gv }),
                );
            }
        }
        &Op::Tanh { x } => {
            if rg(x) {
                accumulate(grads, x, out.zip_map(g, |y, gv| gv * (1.0 - y * y)));
            }
        }
        &Op::Sigmoid { x } => {
            if rg(x) {
                accumulate(grads, x, out.zip_map(g, |y, gv| gv * y * (1.0 - y)));
            }
        }
        &Op::Abs { x } => {
            if rg(x) {
                accumulate(
                    grads,
                    x,
                    v(x).zip_map(g, |a, gv| {
                        if a > 0.0 {
                            gv
                        } else if a < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
        }
        &Op::Square { x } => {
            if rg(x) {
                accumulate(grads, x, v(x).zip_map(g, |a, gv| 2.0 * a * gv));
            }
        }
        &Op::Scale { x, s } => {
            if rg(x) {
                accumulate(grads, x, g.map(|gv| gv * s));
            }
        }
        &Op::Shift { x } => {
            if rg(x) {
                accumulate(grads, x, g.clone());
            }
        }
        &Op::Add { a, b } => {
            if rg(a) {
                accumulate(grads, a, g.clone());
            }
            if rg(b) {
                accumulate(grads, b, g.clone());
            }
        }
        &Op::Sub { a, b } => {
            if rg(a) {
                accumulate(grads, a, g.clone());
            }
            if rg(b) {
                accumulate(grads, b, g.map(|gv| -gv));
            }
        }
        &Op::Mean { x } => {
            if rg(x) {
                let shape = v(x).shape().to_vec();
                let n = v(x).numel() as f64;
                accumulate(grads, x, Tensor::full(shape, g.item() / n));
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient of a recorded node, if any flowed into it.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a trainable parameter by name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.bindings
            .get(name)
            .and_then(|&id| self.grads[id].as_ref())
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push(Arc::new(t), Op::Leaf, false)
    }

    fn param(&self, p: &Param) -> Var {
        if !self.is_trainable(p.name()) {
            return self.push(p.shared(), Op::Leaf, false);
        }
        if let Some(&id) = self.bindings.borrow().get(p.name()) {
            return Var(id);
        }
        let v = self.push(p.shared(), Op::Leaf, true);
        self.bindings.borrow_mut().insert(p.name().to_string(), v.0);
        v
    }

    fn value(&self, v: &Var) -> Arc<Tensor> {
        self.val(v.0)
    }

    fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Var {
        let bv = b.map(|b| self.val(b.0));
        let out = kernels::conv2d(&self.val(x.0), &self.val(w.0), bv.as_deref(), stride, pad);
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        self.push(
            Arc::new(out),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            rg,
        )
    }

    fn conv_transpose2d(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let bv = b.map(|b| self.val(b.0));
        let out = kernels::conv_transpose2d(
            &self.val(x.0),
            &self.val(w.0),
            bv.as_deref(),
            stride,
            pad,
            out_pad,
        );
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        self.push(
            Arc::new(out),
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
                out_pad,
            },
            rg,
        )
    }

    fn reflect_pad(&self, x: &Var, pad: usize) -> Var {
        let out = kernels::reflect_pad(&self.val(x.0), pad);
        self.push(Arc::new(out), Op::ReflectPad { x: x.0, pad }, self.rg(x.0))
    }

    fn instance_norm(&self, x: &Var, gamma: Option<&Var>, beta: Option<&Var>) -> Var {
        let gv = gamma.map(|g| self.val(g.0));
        let bv = beta.map(|b| self.val(b.0));
        let (out, xhat, inv_std) =
            kernels::instance_norm(&self.val(x.0), gv.as_deref(), bv.as_deref());
        let rg = self.rg(x.0)
            || gamma.is_some_and(|g| self.rg(g.0))
            || beta.is_some_and(|b| self.rg(b.0));
        self.push(
            Arc::new(out),
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.map(|g| g.0),
                beta: beta.map(|b| b.0),
                xhat,
                inv_std,
            },
            rg,
        )
    }

    fn channel_affine(&self, x: &Var, scale: &[f64], shift: &[f64]) -> Var {
        let out = channel_affine(&self.val(x.0), scale, shift);
        self.push(
            Arc::new(out),
            Op::ChannelAffine {
                x: x.0,
                scale: scale.to_vec(),
            },
            self.rg(x.0),
        )
    }

    fn max_pool2d(&self, x: &Var, k: usize, stride: usize, pad: usize) -> Var {
        let (out, argmax) = kernels::max_pool2d(&self.val(x.0), k, stride, pad);
        self.push(Arc::new(out), Op::MaxPool { x: x.0, argmax }, self.rg(x.0))
    }

    fn unit_normalize_channels(&self, x: &Var) -> Var {
        let (out, norms) = kernels::unit_normalize_channels(&self.val(x.0));
        self.push(Arc::new(out), Op::UnitNormalize { x: x.0, norms }, self.rg(x.0))
    }

    fn concat_channels(&self, parts: &[Var]) -> Var {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| self.val(p.0)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| &**v).collect();
        let (out, chans) = concat(&refs);
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            Arc::new(out),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                chans,
            },
            rg,
        )
    }

    fn repeat_channels(&self, x: &Var, times: usize) -> Var {
        let out = repeat_channels(&self.val(x.0), times);
        self.push(Arc::new(out), Op::Repeat { x: x.0, times }, self.rg(x.0))
    }

    fn sum_channels(&self, x: &Var) -> Var {
        let out = sum_channels(&self.val(x.0));
        self.push(Arc::new(out), Op::SumChannels { x: x.0 }, self.rg(x.0))
    }

    fn global_avg_pool(&self, x: &Var) -> Var {
        let out = global_avg_pool(&self.val(x.0));
        self.push(Arc::new(out), Op::GlobalAvgPool { x: x.0 }, self.rg(x.0))
    }

    fn relu(&self, x: &Var) -> Var {
        self.unary_op(x, Op::Relu { x: x.0 }, |v| v.max(0.0))
    }

    fn leaky_relu(&self, x: &Var, slope: f64) -> Var {
        self.unary_op(x, Op::LeakyRelu { x: x.0, slope }, |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    fn tanh(&self, x: &Var) -> Var {
        self.unary_op(x, Op::Tanh { x: x.0 }, f64::tanh)
    }

    fn sigmoid(&self, x: &Var) -> Var {
        self.unary_op(x, Op::Sigmoid { x: x.0 }, sigmoid)
    }

    fn abs(&self, x: &Var) -> Var {
        self.unary_op(x, Op::Abs { x: x.0 }, f64::abs)
    }

    fn square(&self, x: &Var) -> Var {
        self.unary_op(x, Op::Square { x: x.0 }, |v| v * v)
    }

    fn scale(&self, x: &Var, s: f64) -> Var {
        self.unary_op(x, Op::Scale { x: x.0, s }, |v| v * s)
    }

    fn shift(&self, x: &Var, s: f64) -> Var {
        self.unary_op(x, Op::Shift { x: x.0 }, |v| v + s)
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        let out = self.val(a.0).zip_map(&self.val(b.0), |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Arc::new(out), Op::Add { a: a.0, b: b.0 }, rg)
    }

    fn sub(&self, a: &Var, b: &Var) -> Var {
        let out = self.val(a.0).zip_map(&self.val(b.0), |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Arc::new(out), Op::Sub { a: a.0, b: b.0 }, rg)
    }

    fn mean(&self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(x.0).mean());
        self.push(Arc::new(out), Op::Mean { x: x.0 }, self.rg(x.0))
    }
}
