//! Patch discriminator producing an unnormalized score map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::kernels::conv_out;
use crate::nn::{init_normal, Conv2d, InstanceNorm, Module, Param, ParamRole};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.2;
const BUILD_SEED: u64 = 0x6469_7363;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "leaky_relu" => Ok(Self::LeakyRelu),
            other => Err(format!("unknown activation `{other}` (relu, leaky_relu)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub n_down_layers: usize,
    pub kernel_size: usize,
    pub activation: Activation,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_down_layers: 4,
            kernel_size: 4,
            activation: Activation::Relu,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_down_layers == 0 {
            return Err(Error::InvalidSpec(
                "discriminator needs at least one channel and one downsampling layer".into(),
            ));
        }
        if self.kernel_size < 2 {
            return Err(Error::InvalidSpec(format!(
                "discriminator kernel must be at least 2, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Output channels of downsampling layer `i`: doubles per layer, capped at 8× base.
    pub fn layer_channels(&self, i: usize) -> usize {
        self.base_channels * (1usize << i.min(3))
    }

    /// Score-map side for an input side, or `None` if the input is too small.
    pub fn score_size(&self, side: usize) -> Option<usize> {
        let mut s = side;
        for _ in 0..self.n_down_layers {
            s = conv_out(s, self.kernel_size, 2, 1)?;
        }
        conv_out(s, self.kernel_size, 1, 1)
    }

    /// Smallest input side that yields a non-empty score map.
    pub fn min_input_size(&self) -> usize {
        (1..).find(|&s| self.score_size(s).is_some()).unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
pub struct DownLayer {
    pub conv: Conv2d,
    pub norm: Option<InstanceNorm>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    name: String,
    spec: DiscriminatorSpec,
    pub layers: Vec<DownLayer>,
    pub head: Conv2d,
}

/// Builds `n_down_layers` stride-2 convolutions (no normalization on the
/// first) and a stride-1 convolution to a single score channel.
pub fn build_discriminator(spec: &DiscriminatorSpec, name: &str) -> Result<Discriminator> {
    spec.validate()?;
    let k = spec.kernel_size;
    let layers = (0..spec.n_down_layers)
        .map(|i| {
            let cin = if i == 0 { 3 } else { spec.layer_channels(i - 1) };
            let cout = spec.layer_channels(i);
            let first = i == 0;
            DownLayer {
                conv: Conv2d::new(&format!("{name}.down{i}"), cin, cout, k, 2, 1, first),
                norm: (!first).then(|| InstanceNorm::new(&format!("{name}.down{i}_norm"), cout)),
            }
        })
        .collect();
    let last = spec.layer_channels(spec.n_down_layers - 1);
    let mut net = Discriminator {
        name: name.to_string(),
        spec: spec.clone(),
        layers,
        head: Conv2d::new(&format!("{name}.head"), last, 1, k, 1, 1, true),
    };
    init_normal(&mut net, 0.02, &mut ChaCha8Rng::seed_from_u64(BUILD_SEED));
    Ok(net)
}

impl Discriminator {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn topology_id(&self) -> String {
        let s = &self.spec;
        format!(
            "patch_discriminator(c{},n{},k{},{:?})",
            s.base_channels, s.n_down_layers, s.kernel_size, s.activation
        )
        .to_lowercase()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::InvalidInput(format!(
                "discriminator input must be N×3×H×W, got {shape:?}"
            )));
        };
        if *c != 3 {
            return Err(Error::InvalidInput(format!(
                "discriminator input must have 3 channels, got {c}"
            )));
        }
        if self.spec.score_size(*h).is_none() || self.spec.score_size(*w).is_none() {
            return Err(Error::InvalidInput(format!(
                "discriminator input {h}×{w} is too small; minimum side is {}",
                self.spec.min_input_size()
            )));
        }
        Ok(())
    }

    fn activate<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        match self.spec.activation {
            Activation::Relu => ops.relu(x),
            Activation::LeakyRelu => ops.leaky_relu(x, LEAKY_SLOPE),
        }
    }

    /// N×1×H'×W' map of unbounded real scores.
    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> Result<O::V> {
        self.check_input(&ops.shape(x))?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.conv.forward(ops, &h);
            if let Some(n) = &l.norm {
                h = n.forward(ops, &h);
            }
            h = self.activate(ops, &h);
        }
        Ok(self.head.forward(ops, &h))
    }

    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let e = Eager;
        Ok((*self.forward(&e, &e.constant(x.clone()))?).clone())
    }
}

impl Module for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        for l in &self.layers {
            l.conv.visit(f);
            if let Some(n) = &l.norm {
                n.visit(f);
            }
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        for l in &mut self.layers {
            l.conv.visit_mut(f);
            if let Some(n) = &mut l.norm {
                n.visit_mut(f);
            }
        }
        self.head.visit_mut(f);
    }
}
