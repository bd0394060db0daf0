//! The two asymmetric generators.
//!
//! Both share a ResNet-style encoder/decoder: a 7×7 stem, two stride-2
//! downsampling convolutions, an intermediate transformer stage and two
//! stride-2 transposed convolutions followed by a 7×7 projection to RGB and
//! `tanh`. The relaxed generator (Y→X) uses six residual blocks in the middle;
//! the strict generator (X→Y) uses two residual blocks followed by a
//! dense-fusion block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::nn::{init_normal, Conv2d, ConvTranspose2d, InstanceNorm, Module, Param, ParamRole};
use crate::tensor::Tensor;

/// Seed of the provisional initialization applied at build time.
const BUILD_SEED: u64 = 0x6e65_7473;
const BUILD_STD: f64 = 0.02;

/// Published size of the full model (both generators and both
/// discriminators), used as a reference when reporting counts.
pub const REFERENCE_TOTAL_PARAMETERS: usize = 32_050_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub n_residual_blocks_f: usize,
    pub n_residual_blocks_g: usize,
    pub dense_layers: usize,
    pub dense_growth: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_residual_blocks_f: 6,
            n_residual_blocks_g: 2,
            dense_layers: 4,
            dense_growth: 448,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base_channels", self.base_channels),
            ("n_residual_blocks_f", self.n_residual_blocks_f),
            ("n_residual_blocks_g", self.n_residual_blocks_g),
            ("dense_layers", self.dense_layers),
            ("dense_growth", self.dense_growth),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be at least 1")));
            }
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "base_channels must be even, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Channel width of the intermediate stage.
    pub fn trunk_channels(&self) -> usize {
        self.base_channels * 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Encoder, residual blocks, decoder.
    Residual,
    /// Encoder, residual blocks, dense-fusion block, decoder.
    DenseFusion,
}

/// `x + IN(conv(pad(ReLU(IN(conv(pad(x)))))))`, 3×3 convolutions with
/// reflection padding.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
}

impl ResidualBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 0, false),
            norm1: InstanceNorm::new(&format!("{name}.norm1"), channels),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, 1, 0, false),
            norm2: InstanceNorm::new(&format!("{name}.norm2"), channels),
        }
    }

    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        let h = self.conv1.forward(ops, &ops.reflect_pad(x, 1));
        let h = ops.relu(&self.norm1.forward(ops, &h));
        let h = self.conv2.forward(ops, &ops.reflect_pad(&h, 1));
        let h = self.norm2.forward(ops, &h);
        ops.add(x, &h)
    }
}

impl Module for ResidualBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        self.conv1.visit(f);
        self.norm1.visit(f);
        self.conv2.visit(f);
        self.norm2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        self.conv1.visit_mut(f);
        self.norm1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// One densely connected layer: reflection pad, 3×3 conv, IN, ReLU.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

/// Dense block followed by a 1×1 fusion convolution back to the trunk width.
///
/// Layer `i` sees the block input concatenated with the outputs of layers
/// `0..i`. The fusion layer sees the block input and every layer output, and
/// its normalized result is added to the block input.
#[derive(Clone, Debug)]
pub struct DenseFusionBlock {
    pub layers: Vec<DenseLayer>,
    pub fusion: Conv2d,
    pub fusion_norm: InstanceNorm,
}

impl DenseFusionBlock {
    pub fn new(name: &str, channels: usize, n_layers: usize, growth: usize) -> Self {
        let layers = (0..n_layers)
            .map(|i| DenseLayer {
                conv: Conv2d::new(
                    &format!("{name}.dense{i}.conv"),
                    channels + i * growth,
                    growth,
                    3,
                    1,
                    0,
                    false,
                ),
                norm: InstanceNorm::new(&format!("{name}.dense{i}.norm"), growth),
            })
            .collect();
        Self {
            layers,
            fusion: Conv2d::new(
                &format!("{name}.fusion"),
                channels + n_layers * growth,
                channels,
                1,
                1,
                0,
                false,
            ),
            fusion_norm: InstanceNorm::new(&format!("{name}.fusion_norm"), channels),
        }
    }

    /// Concatenation of the block input and every dense layer output.
    pub fn fusion_input<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        let mut feats = vec![x.clone()];
        for layer in &self.layers {
            let inp = if feats.len() == 1 {
                x.clone()
            } else {
                ops.concat_channels(&feats)
            };
            let h = layer.conv.forward(ops, &ops.reflect_pad(&inp, 1));
            feats.push(ops.relu(&layer.norm.forward(ops, &h)));
        }
        ops.concat_channels(&feats)
    }

    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> O::V {
        let fused = self.fusion.forward(ops, &self.fusion_input(ops, x));
        ops.add(x, &self.fusion_norm.forward(ops, &fused))
    }
}

impl Module for DenseFusionBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        for l in &self.layers {
            l.conv.visit(f);
            l.norm.visit(f);
        }
        self.fusion.visit(f);
        self.fusion_norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        for l in &mut self.layers {
            l.conv.visit_mut(f);
            l.norm.visit_mut(f);
        }
        self.fusion.visit_mut(f);
        self.fusion_norm.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    name: String,
    kind: GeneratorKind,
    spec: GeneratorSpec,
    pub stem: Conv2d,
    pub stem_norm: InstanceNorm,
    pub down: Vec<(Conv2d, InstanceNorm)>,
    pub blocks: Vec<ResidualBlock>,
    pub dense: Option<DenseFusionBlock>,
    pub up: Vec<(ConvTranspose2d, InstanceNorm)>,
    pub head: Conv2d,
}

/// Relaxed generator (Y→X): encoder, `n_residual_blocks_f` residual blocks, decoder.
pub fn build_residual_generator(spec: &GeneratorSpec, name: &str) -> Result<Generator> {
    Generator::build(spec, name, GeneratorKind::Residual)
}

/// Strict generator (X→Y): encoder, `n_residual_blocks_g` residual blocks, one
/// dense-fusion block, decoder.
pub fn build_dense_fusion_generator(spec: &GeneratorSpec, name: &str) -> Result<Generator> {
    Generator::build(spec, name, GeneratorKind::DenseFusion)
}

impl Generator {
    pub fn build(spec: &GeneratorSpec, name: &str, kind: GeneratorKind) -> Result<Self> {
        spec.validate()?;
        let c = spec.base_channels;
        let trunk = spec.trunk_channels();
        let n_blocks = match kind {
            GeneratorKind::Residual => spec.n_residual_blocks_f,
            GeneratorKind::DenseFusion => spec.n_residual_blocks_g,
        };
        let mut net = Self {
            name: name.to_string(),
            kind,
            spec: spec.clone(),
            stem: Conv2d::new(&format!("{name}.stem"), 3, c, 7, 1, 0, false),
            stem_norm: InstanceNorm::new(&format!("{name}.stem_norm"), c),
            down: (0..2)
                .map(|i| {
                    let cin = c << i;
                    (
                        Conv2d::new(&format!("{name}.down{i}"), cin, cin * 2, 3, 2, 1, false),
                        InstanceNorm::new(&format!("{name}.down{i}_norm"), cin * 2),
                    )
                })
                .collect(),
            blocks: (0..n_blocks)
                .map(|i| ResidualBlock::new(&format!("{name}.res{i}"), trunk))
                .collect(),
            dense: (kind == GeneratorKind::DenseFusion).then(|| {
                DenseFusionBlock::new(
                    &format!("{name}.dense_fusion"),
                    trunk,
                    spec.dense_layers,
                    spec.dense_growth,
                )
            }),
            up: (0..2)
                .map(|i| {
                    let cin = trunk >> i;
                    (
                        ConvTranspose2d::new(
                            &format!("{name}.up{i}"),
                            cin,
                            cin / 2,
                            3,
                            2,
                            1,
                            1,
                            false,
                        ),
                        InstanceNorm::new(&format!("{name}.up{i}_norm"), cin / 2),
                    )
                })
                .collect(),
            head: Conv2d::new(&format!("{name}.head"), c, 3, 7, 1, 0, true),
        };
        init_normal(&mut net, BUILD_STD, &mut ChaCha8Rng::seed_from_u64(BUILD_SEED));
        Ok(net)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn topology_id(&self) -> String {
        let s = &self.spec;
        match self.kind {
            GeneratorKind::Residual => {
                format!("residual_generator(c{},r{})", s.base_channels, s.n_residual_blocks_f)
            }
            GeneratorKind::DenseFusion => format!(
                "dense_fusion_generator(c{},r{},d{}x{})",
                s.base_channels, s.n_residual_blocks_g, s.dense_layers, s.dense_growth
            ),
        }
    }

    /// Checks the N×3×H×W input contract.
    pub fn check_input(shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::InvalidInput(format!(
                "generator input must be N×3×H×W, got {shape:?}"
            )));
        };
        if *c != 3 {
            return Err(Error::InvalidInput(format!(
                "generator input must have 3 channels, got {c}"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "generator input height and width must be divisible by 4, got {h}×{w}"
            )));
        }
        if *h < 8 || *w < 8 {
            return Err(Error::InvalidInput(format!(
                "generator input must be at least 8×8, got {h}×{w}"
            )));
        }
        Ok(())
    }

    /// Output of the intermediate stage (before the decoder).
    pub fn encode<O: Ops>(&self, ops: &O, x: &O::V) -> Result<O::V> {
        Self::check_input(&ops.shape(x))?;
        let h = self.stem.forward(ops, &ops.reflect_pad(x, 3));
        let mut h = ops.relu(&self.stem_norm.forward(ops, &h));
        for (conv, norm) in &self.down {
            h = ops.relu(&norm.forward(ops, &conv.forward(ops, &h)));
        }
        for b in &self.blocks {
            h = b.forward(ops, &h);
        }
        Ok(h)
    }

    pub fn forward<O: Ops>(&self, ops: &O, x: &O::V) -> Result<O::V> {
        let mut h = self.encode(ops, x)?;
        if let Some(d) = &self.dense {
            h = d.forward(ops, &h);
        }
        for (conv, norm) in &self.up {
            h = ops.relu(&norm.forward(ops, &conv.forward(ops, &h)));
        }
        let h = self.head.forward(ops, &ops.reflect_pad(&h, 3));
        Ok(ops.tanh(&h))
    }

    /// Inference on a batch (or a single C×H×W image).
    pub fn generate(&self, x: &Tensor) -> Result<Tensor> {
        let x = if x.shape().len() == 3 {
            x.clone().reshape([vec![1], x.shape().to_vec()].concat())
        } else {
            x.clone()
        };
        let e = Eager;
        let out = self.forward(&e, &e.constant(x))?;
        Ok((*out).clone())
    }
}

/// Single-image convenience over [`Generator::forward`].
pub fn forward_generate(net: &Generator, x: &Tensor) -> Result<Tensor> {
    net.generate(x)
}

/// Exact number of learnable scalars.
pub fn count_parameters(net: &dyn Module) -> usize {
    net.parameter_count()
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamRole)) {
        self.stem.visit(f);
        self.stem_norm.visit(f);
        for (c, n) in &self.down {
            c.visit(f);
            n.visit(f);
        }
        for b in &self.blocks {
            b.visit(f);
        }
        if let Some(d) = &self.dense {
            d.visit(f);
        }
        for (c, n) in &self.up {
            c.visit(f);
            n.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamRole)) {
        self.stem.visit_mut(f);
        self.stem_norm.visit_mut(f);
        for (c, n) in &mut self.down {
            c.visit_mut(f);
            n.visit_mut(f);
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        if let Some(d) = &mut self.dense {
            d.visit_mut(f);
        }
        for (c, n) in &mut self.up {
            c.visit_mut(f);
            n.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
