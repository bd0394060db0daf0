//! Parameters and the basic layers shared by every network.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Ops;
use crate::tensor::Tensor;

/// Named learnable array. Names are globally unique within a training run
/// (`G.enc.0.weight`, `D_X.head.bias`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.value.shape(),
            "shape change for parameter {}",
            self.name
        );
        self.value = Arc::new(value);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Role of a parameter, used by weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    /// Running statistics of a frozen batch normalization.
    NormStat,
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p, _| n += p.numel());
        n
    }

    fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.visit(&mut |p, _| out.push(p.clone()));
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p, _| out.push(p.name().to_string()));
        out
    }

    /// Replaces the value of the parameter called `name`. Returns whether it existed.
    fn set_param(&mut self, name: &str, value: Tensor) -> bool {
        let mut value = Some(value);
        self.visit_mut(&mut |p, _| {
            if p.name() == name {
                if let Some(v) = value.take() {
                    p.set(v);
                }
            }
        });
        value.is_none()
    }
}

/// Convolution with zero padding. Weight layout O×C×k×k.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::zeros(vec![c_out, c_in, kernel, kernel]),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(vec![c_out]))),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[2]
    }

    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        let w = ops.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ops.param(b));
        ops.conv2d(x, &w, b.as_ref(), self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        f(&self.weight, ParamRole::ConvWeight);
        if let Some(b) = &self.bias {
            f(b, ParamRole::ConvBias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        f(&mut self.weight, ParamRole::ConvWeight);
        if let Some(b) = &mut self.bias {
            f(b, ParamRole::ConvBias);
        }
    }
}

/// Transposed convolution. Weight layout Cin×Cout×k×k.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::zeros(vec![c_in, c_out, kernel, kernel]),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(vec![c_out]))),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        let w = ops.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ops.param(b));
        ops.conv_transpose2d(
            x,
            &w,
            b.as_ref(),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        f(&self.weight, ParamRole::ConvWeight);
        if let Some(b) = &self.bias {
            f(b, ParamRole::ConvBias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        f(&mut self.weight, ParamRole::ConvWeight);
        if let Some(b) = &mut self.bias {
            f(b, ParamRole::ConvBias);
        }
    }
}

/// Instance normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub scale: Param,
    pub shift: Param,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            scale: Param::new(format!("{name}.weight"), Tensor::full(vec![channels], 1.0)),
            shift: Param::new(format!("{name}.bias"), Tensor::zeros(vec![channels])),
        }
    }

    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        let g = ops.param(&self.scale);
        let b = ops.param(&self.shift);
        ops.instance_norm(x, Some(&g), Some(&b))
    }
}

impl Module for InstanceNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        f(&self.scale, ParamRole::NormScale);
        f(&self.shift, ParamRole::NormShift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        f(&mut self.scale, ParamRole::NormScale);
        f(&mut self.shift, ParamRole::NormShift);
    }
}

/// Gaussian initialization: conv weights ~ N(0, std²), normalization scales
/// ~ N(1, std²), biases and normalization shifts zero.
pub fn init_normal<M: Module + ?Sized, R: Rng + ?Sized>(net: &mut M, std: f64, rng: &mut R) {
    let weights = Normal::new(0.0, std).expect("finite std");
    let scales = Normal::new(1.0, std).expect("finite std");
    net.visit_mut(&mut |p, role| {
        let t = p.value_mut();
        match role {
            ParamRole::ConvWeight => t.data_mut().iter_mut().for_each(|v| *v = weights.sample(rng)),
            ParamRole::NormScale => t.data_mut().iter_mut().for_each(|v| *v = scales.sample(rng)),
            ParamRole::ConvBias | ParamRole::NormShift => t.data_mut().fill(0.0),
            ParamRole::NormStat => {}
        }
    });
}
