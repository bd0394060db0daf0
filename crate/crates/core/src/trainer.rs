//! Adversarial optimization: one generator update and one discriminator
//! update per sampled unpaired batch, with checkpointing and per-epoch logs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Eager, Gradients, Ops, Tape};
use crate::backends::Backend;
use crate::config::Config;
use crate::data::{
    denormalize, load_domain_folder, load_test_images, Domain, RngState, SamplerState, Split,
    UnpairedSampler,
};
use crate::discriminator::{build_discriminator, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{build_dense_fusion_generator, build_residual_generator, Generator};
use crate::losses::{
    generator_objective, lsgan_d_loss, Backends, GeneratorPass, IdentityFeed, LossConfig,
    LossReport,
};
use crate::nn::{init_normal, Module};
use crate::tensor::Tensor;
use crate::ARTIFACT_VERSION;

/// Parameter-name prefixes of the four networks.
pub const G_NAME: &str = "G";
pub const F_NAME: &str = "F";
pub const DX_NAME: &str = "D_X";
pub const DY_NAME: &str = "D_Y";

const ADAM_EPS: f64 = 1e-8;
const BUFFER_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    None,
    /// Constant for the first half of the epochs, then linear towards zero.
    LinearAfterHalf,
}

impl FromStr for LrDecay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "linear_after_half" => Ok(Self::LinearAfterHalf),
            other => Err(format!("unknown lr schedule `{other}` (none, linear_after_half)")),
        }
    }
}

impl fmt::Display for LrDecay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::LinearAfterHalf => "linear_after_half",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    GThenD,
    DThenG,
}

impl FromStr for UpdateOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "g_then_d" => Ok(Self::GThenD),
            "d_then_g" => Ok(Self::DThenG),
            other => Err(format!("unknown update order `{other}` (g_then_d, d_then_g)")),
        }
    }
}

impl fmt::Display for UpdateOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GThenD => "g_then_d",
            Self::DThenG => "d_then_g",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub init_std: f64,
    /// Fake-image history per domain; 0 passes the current fakes through.
    pub buffer_size: usize,
    pub lr_decay: LrDecay,
    pub update_order: UpdateOrder,
    /// Epoch interval between checkpoints; the final epoch is always saved.
    pub checkpoint_every: usize,
    pub sample_every: usize,
    /// Test images per domain in each sample grid.
    pub sample_count: usize,
    /// Steps per epoch; 0 means one pass over the larger domain.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 1,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            init_std: 0.02,
            buffer_size: 50,
            lr_decay: LrDecay::None,
            update_order: UpdateOrder::GThenD,
            checkpoint_every: 10,
            sample_every: 10,
            sample_count: 4,
            steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.checkpoint_every == 0 || self.sample_every == 0 {
            return Err("checkpoint_every and sample_every must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            LrDecay::None => self.lr,
            LrDecay::LinearAfterHalf => {
                let half = self.epochs / 2;
                let decay_epochs = (self.epochs - half) as f64;
                let past = epoch.saturating_sub(half) as f64;
                self.lr * (1.0 - past / (decay_epochs + 1.0))
            }
        }
    }
}

/// Adam with per-parameter moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    /// One update of every parameter of `nets` that has a gradient.
    pub fn apply(
        &mut self,
        nets: &mut [&mut dyn Module],
        grads: &Gradients,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for net in nets.iter_mut() {
            net.visit_mut(&mut |p, _| {
                let Some(g) = grads.param(p.name()) else {
                    return;
                };
                let m = self
                    .m
                    .entry(p.name().to_string())
                    .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                let v = self
                    .v
                    .entry(p.name().to_string())
                    .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                let w = p.value_mut();
                for (((w, m), v), g) in w
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            });
        }
    }
}

/// History of generated images shown to a discriminator.
///
/// While filling, every fake is stored and returned. Once full, each incoming
/// fake is, with probability ½, swapped for a uniformly chosen stored one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageBuffer {
    pub capacity: usize,
    pub images: Vec<Tensor>,
}

impl ImageBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    /// Batch to show the discriminator in place of `fakes` (N×C×H×W).
    pub fn query<R: Rng + ?Sized>(&mut self, fakes: &Tensor, rng: &mut R) -> Tensor {
        if self.capacity == 0 {
            return fakes.clone();
        }
        let n = fakes.shape()[0];
        let out: Vec<Tensor> = (0..n)
            .map(|i| {
                let img = fakes.sample(i);
                if self.images.len() < self.capacity {
                    self.images.push(img.clone());
                    img
                } else if rng.random::<f64>() < 0.5 {
                    let j = rng.random_range(0..self.capacity);
                    std::mem::replace(&mut self.images[j], img)
                } else {
                    img
                }
            })
            .collect();
        Tensor::stack(&out)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// X→Y, with the dense-fusion block.
    pub g: Generator,
    /// Y→X.
    pub f: Generator,
    /// Judges domain X.
    pub d_x: Discriminator,
    /// Judges domain Y.
    pub d_y: Discriminator,
    pub opt_gen: Adam,
    pub opt_dx: Adam,
    pub opt_dy: Adam,
    /// Generated X images (outputs of F).
    pub buffer_x: ImageBuffer,
    /// Generated Y images (outputs of G).
    pub buffer_y: ImageBuffer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Builds and initializes all four networks from the seed.
    pub fn new(cfg: &Config) -> Result<Self> {
        let mut g = build_dense_fusion_generator(&cfg.generator, G_NAME)?;
        let mut f = build_residual_generator(&cfg.generator, F_NAME)?;
        let mut d_x = build_discriminator(&cfg.discriminator, DX_NAME)?;
        let mut d_y = build_discriminator(&cfg.discriminator, DY_NAME)?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let std = cfg.train.init_std;
        init_normal(&mut g, std, &mut init);
        init_normal(&mut f, std, &mut init);
        init_normal(&mut d_x, std, &mut init);
        init_normal(&mut d_y, std, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(BUFFER_STREAM);
        Ok(Self {
            g,
            f,
            d_x,
            d_y,
            opt_gen: Adam::default(),
            opt_dx: Adam::default(),
            opt_dy: Adam::default(),
            buffer_x: ImageBuffer::new(cfg.train.buffer_size),
            buffer_y: ImageBuffer::new(cfg.train.buffer_size),
            epoch: 0,
            iteration: 0,
            rng,
        })
    }

    pub fn networks(&self) -> [&dyn Module; 4] {
        [&self.g, &self.f, &self.d_x, &self.d_y]
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().map(|n| n.parameter_count()).sum()
    }

    /// Every parameter of the four networks, by name.
    pub fn named_params(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for net in self.networks() {
            net.visit(&mut |p, _| {
                out.insert(p.name().to_string(), p.value().clone());
            });
        }
        out
    }
}

/// Hyper-parameters of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepConfig<'a> {
    pub loss: &'a LossConfig,
    pub train: &'a TrainConfig,
    pub lr: f64,
}

fn term_error(term: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("loss term `{term}`: {what}")),
        other => other,
    }
}

/// Generator update; returns the report and the detached translations
/// `(G(x), F(y))`.
fn generator_step(
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    backends: &Backends<'_>,
    sc: &StepConfig<'_>,
) -> Result<(LossReport, Tensor, Tensor)> {
    let tape = Tape::new(&[format!("{G_NAME}."), format!("{F_NAME}.")]);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let g_x = state.g.forward(&tape, &xv)?;
    let f_y = state.f.forward(&tape, &yv)?;
    let rec_x = state.f.forward(&tape, &g_x)?;
    let rec_y = state.g.forward(&tape, &f_y)?;
    let identity = if sc.loss.use_identity {
        let (f_in, g_in) = match sc.loss.identity_feed {
            IdentityFeed::Equation => (&xv, &yv),
            IdentityFeed::InputDomain => (&yv, &xv),
        };
        Some((
            (f_in, state.f.forward(&tape, f_in)?),
            (g_in, state.g.forward(&tape, g_in)?),
        ))
    } else {
        None
    };
    let score_g_x = state.d_y.forward(&tape, &g_x)?;
    let score_f_y = state.d_x.forward(&tape, &f_y)?;
    let pass = GeneratorPass {
        x: &xv,
        y: &yv,
        g_x: &g_x,
        f_y: &f_y,
        rec_x: &rec_x,
        rec_y: &rec_y,
        id_f: identity.as_ref().map(|(a, _)| (a.0, &a.1)),
        id_g: identity.as_ref().map(|(_, b)| (b.0, &b.1)),
        score_g_x: &score_g_x,
        score_f_y: &score_f_y,
    };
    let (total, report) = generator_objective(&tape, &pass, backends, sc.loss)?;
    let grads = tape.backward(&total);
    let fake_y = (*tape.value(&g_x)).clone();
    let fake_x = (*tape.value(&f_y)).clone();
    drop(tape);
    let t = sc.train;
    state.opt_gen.apply(
        &mut [&mut state.g, &mut state.f],
        &grads,
        sc.lr,
        t.adam_beta1,
        t.adam_beta2,
    );
    Ok((report, fake_y, fake_x))
}

/// One least-squares discriminator update; returns its loss.
fn discriminator_update(
    net: &mut Discriminator,
    opt: &mut Adam,
    real: &Tensor,
    fake: &Tensor,
    term: &str,
    sc: &StepConfig<'_>,
) -> Result<f64> {
    let tape = Tape::new(&[format!("{}.", net.name())]);
    let real_score = net.forward(&tape, &tape.constant(real.clone()))?;
    let fake_score = net.forward(&tape, &tape.constant(fake.clone()))?;
    let loss = lsgan_d_loss(&tape, &real_score, &fake_score).map_err(|e| term_error(term, e))?;
    let value = tape.item(&loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss term `{term}` ({value})")));
    }
    let grads = tape.backward(&loss);
    drop(tape);
    opt.apply(&mut [net], &grads, sc.lr, sc.train.adam_beta1, sc.train.adam_beta2);
    Ok(value)
}

fn discriminator_step(
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    fake_y: &Tensor,
    fake_x: &Tensor,
    sc: &StepConfig<'_>,
) -> Result<(f64, f64)> {
    let shown_y = state.buffer_y.query(fake_y, &mut state.rng);
    let shown_x = state.buffer_x.query(fake_x, &mut state.rng);
    let d_y = discriminator_update(&mut state.d_y, &mut state.opt_dy, y, &shown_y, "d_y", sc)?;
    let d_x = discriminator_update(&mut state.d_x, &mut state.opt_dx, x, &shown_x, "d_x", sc)?;
    Ok((d_x, d_y))
}

/// One alternation of generator and discriminator updates on an unpaired
/// batch. The state is left untouched if any term is non-finite.
pub fn training_step(
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    backends: &Backends<'_>,
    sc: &StepConfig<'_>,
) -> Result<LossReport> {
    let mut next = state.clone();
    let report = match sc.train.update_order {
        UpdateOrder::GThenD => {
            let (mut report, fake_y, fake_x) = generator_step(&mut next, x, y, backends, sc)?;
            let (d_x, d_y) = discriminator_step(&mut next, x, y, &fake_y, &fake_x, sc)?;
            report.d_x = d_x;
            report.d_y = d_y;
            report
        }
        UpdateOrder::DThenG => {
            let e = Eager;
            let fake_y = (*next.g.forward(&e, &e.constant(x.clone()))?).clone();
            let fake_x = (*next.f.forward(&e, &e.constant(y.clone()))?).clone();
            let (d_x, d_y) = discriminator_step(&mut next, x, y, &fake_y, &fake_x, sc)?;
            let (mut report, _, _) = generator_step(&mut next, x, y, backends, sc)?;
            report.d_x = d_x;
            report.d_y = d_y;
            report
        }
    };
    report.check_finite()?;
    next.iteration += 1;
    *state = next;
    Ok(report)
}

// ---- checkpoints ----

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_TENSORS: &str = "tensors.bin";
pub const CHECKPOINT_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub artifact_version: u32,
    pub epoch: usize,
    pub iteration: u64,
    pub config_digest: String,
    pub seed: u64,
    pub parameter_counts: BTreeMap<String, usize>,
    pub topology: BTreeMap<String, String>,
    pub adam_steps: [u64; 3],
    pub buffer_lengths: [usize; 2],
    pub rng: RngState,
    pub sampler: Option<SamplerState>,
    pub tensors: Vec<TensorEntry>,
    pub tensors_sha256: String,
    /// sha256 of this manifest serialized with an empty checksum.
    pub checksum: String,
}

impl CheckpointManifest {
    fn compute_checksum(&self) -> Result<String> {
        let mut m = self.clone();
        m.checksum.clear();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&m)?)))
    }
}

/// How strictly a checkpoint must match the expected configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Accept a different artifact version or config digest.
    pub allow_mismatch: bool,
}

fn checkpoint_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = state.named_params().into_iter().collect();
    for (tag, opt) in [("gen", &state.opt_gen), ("dx", &state.opt_dx), ("dy", &state.opt_dy)] {
        for (k, t) in &opt.m {
            out.push((format!("adam.{tag}.m.{k}"), t.clone()));
        }
        for (k, t) in &opt.v {
            out.push((format!("adam.{tag}.v.{k}"), t.clone()));
        }
    }
    for (tag, buf) in [("x", &state.buffer_x), ("y", &state.buffer_y)] {
        for (i, t) in buf.images.iter().enumerate() {
            out.push((format!("buffer.{tag}.{i}"), t.clone()));
        }
    }
    out
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// Writes a checkpoint directory atomically (written aside, then renamed).
pub fn save_checkpoint(
    state: &TrainState,
    cfg: &Config,
    sampler: Option<&SamplerState>,
    dir: &Path,
) -> Result<()> {
    let tensors = checkpoint_tensors(state);
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest = CheckpointManifest {
        artifact_version: ARTIFACT_VERSION,
        epoch: state.epoch,
        iteration: state.iteration,
        config_digest: cfg.digest(),
        seed: cfg.train.seed,
        parameter_counts: [
            (G_NAME, state.g.parameter_count()),
            (F_NAME, state.f.parameter_count()),
            (DX_NAME, state.d_x.parameter_count()),
            (DY_NAME, state.d_y.parameter_count()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
        topology: [
            (G_NAME, state.g.topology_id()),
            (F_NAME, state.f.topology_id()),
            (DX_NAME, state.d_x.topology_id()),
            (DY_NAME, state.d_y.topology_id()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
        adam_steps: [state.opt_gen.step, state.opt_dx.step, state.opt_dy.step],
        buffer_lengths: [state.buffer_x.images.len(), state.buffer_y.images.len()],
        rng: RngState::capture(&state.rng),
        sampler: sampler.cloned(),
        tensors: entries,
        tensors_sha256: hex::encode(Sha256::digest(&bytes)),
        checksum: String::new(),
    };
    manifest.checksum = manifest.compute_checksum()?;

    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.partial",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint")
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(CHECKPOINT_TENSORS), &bytes)?;
    fs::write(tmp.join(CHECKPOINT_CONFIG), cfg.to_text())?;
    fs::write(
        tmp.join(CHECKPOINT_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// A checkpoint as read from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    /// The configuration the checkpoint was trained with.
    pub config: Config,
    pub manifest: CheckpointManifest,
}

fn ck_err(dir: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads only and verifies the manifest.
pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| ck_err(dir, format!("cannot read {}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| ck_err(dir, format!("malformed manifest: {e}")))?;
    if manifest.compute_checksum()? != manifest.checksum {
        return Err(ck_err(dir, "manifest checksum mismatch (file was modified)"));
    }
    Ok(manifest)
}

/// Loads a checkpoint. With `expected`, the artifact version and config
/// digest must match unless `opts.allow_mismatch` is set.
pub fn load_checkpoint(dir: &Path, expected: Option<&Config>, opts: LoadOptions) -> Result<Checkpoint> {
    let manifest = read_checkpoint_manifest(dir)?;
    if manifest.artifact_version != ARTIFACT_VERSION && !opts.allow_mismatch {
        return Err(ck_err(
            dir,
            format!(
                "artifact version {} does not match this build ({ARTIFACT_VERSION})",
                manifest.artifact_version
            ),
        ));
    }
    let cfg_text = fs::read_to_string(dir.join(CHECKPOINT_CONFIG))
        .map_err(|e| ck_err(dir, format!("cannot read config snapshot: {e}")))?;
    let config = Config::from_text(&cfg_text)?;
    if config.digest() != manifest.config_digest {
        return Err(ck_err(dir, "config snapshot does not match the manifest digest"));
    }
    if let Some(exp) = expected {
        if exp.digest() != manifest.config_digest && !opts.allow_mismatch {
            return Err(ck_err(
                dir,
                format!(
                    "config digest {} differs from the current config {}",
                    manifest.config_digest,
                    exp.digest()
                ),
            ));
        }
    }
    let bytes = fs::read(dir.join(CHECKPOINT_TENSORS))
        .map_err(|e| ck_err(dir, format!("cannot read tensors: {e}")))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.tensors_sha256 {
        return Err(ck_err(dir, "tensor file checksum mismatch"));
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let range = e.offset * 8..(e.offset + n) * 8;
        let raw = bytes
            .get(range)
            .ok_or_else(|| ck_err(dir, format!("tensor `{}` runs past the end of the file", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data));
    }

    let mut state = TrainState::new(&config)?;
    let mut missing = Vec::new();
    for net in [
        &mut state.g as &mut dyn Module,
        &mut state.f,
        &mut state.d_x,
        &mut state.d_y,
    ] {
        net.visit_mut(&mut |p, _| match tensors.remove(p.name()) {
            Some(t) if t.shape() == p.value().shape() => p.set(t),
            _ => missing.push(p.name().to_string()),
        });
    }
    if !missing.is_empty() {
        return Err(ck_err(
            dir,
            format!("missing or misshapen parameters: {}", missing.join(", ")),
        ));
    }
    for (tag, opt, step) in [
        ("gen", &mut state.opt_gen, manifest.adam_steps[0]),
        ("dx", &mut state.opt_dx, manifest.adam_steps[1]),
        ("dy", &mut state.opt_dy, manifest.adam_steps[2]),
    ] {
        opt.step = step;
        let (pm, pv) = (format!("adam.{tag}.m."), format!("adam.{tag}.v."));
        for (k, t) in &tensors {
            if let Some(name) = k.strip_prefix(&pm) {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&pv) {
                opt.v.insert(name.to_string(), t.clone());
            }
        }
    }
    for (tag, buf, len) in [
        ("x", &mut state.buffer_x, manifest.buffer_lengths[0]),
        ("y", &mut state.buffer_y, manifest.buffer_lengths[1]),
    ] {
        buf.images = (0..len)
            .map(|i| {
                tensors
                    .get(&format!("buffer.{tag}.{i}"))
                    .cloned()
                    .ok_or_else(|| ck_err(dir, format!("missing buffer image {tag}.{i}")))
            })
            .collect::<Result<_>>()?;
    }
    state.epoch = manifest.epoch;
    state.iteration = manifest.iteration;
    state.rng = manifest.rng.restore();
    Ok(Checkpoint {
        state,
        config,
        manifest,
    })
}

/// Most recent `checkpoints/epoch_NNN` of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<(usize, PathBuf)> = fs::read_dir(run_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix("epoch_")?.parse().ok()?;
            Some((n, e.path()))
        })
        .collect();
    dirs.sort();
    dirs.pop().map(|(_, p)| p)
}

// ---- run directory ----

pub const LOSSES_FILE: &str = "losses.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

pub fn losses_header() -> String {
    let mut h = vec!["epoch"];
    h.extend(LossReport::FIELDS);
    h.push("wall_time_s");
    h.join(",")
}

/// One row of the per-epoch loss file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean: LossReport,
    pub wall_time_s: f64,
}

impl EpochRow {
    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.epoch.to_string()];
        cols.extend(self.mean.values().iter().map(|v| format!("{v:e}")));
        cols.push(format!("{:.3}", self.wall_time_s));
        cols.join(",")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed loss row `{line}`"));
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != LossReport::FIELDS.len() + 2 {
            return Err(bad());
        }
        let nums: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok(Self {
            epoch: cols[0].parse().map_err(|_| bad())?,
            mean: LossReport {
                d_x: nums[0],
                d_y: nums[1],
                g_adv: nums[2],
                f_adv: nums[3],
                feature: nums[4],
                semantic: nums[5],
                dual: nums[6],
                identity: nums[7],
                total: nums[8],
            },
            wall_time_s: nums[9],
        })
    }
}

/// Rows of a run's loss file (header skipped).
pub fn read_losses(run_dir: &Path) -> Result<Vec<EpochRow>> {
    let text = fs::read_to_string(run_dir.join(LOSSES_FILE))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(EpochRow::parse).collect()
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut sums = [0.0; 9];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    let m = sums.map(|s| s / n);
    LossReport {
        d_x: m[0],
        d_y: m[1],
        g_adv: m[2],
        f_adv: m[3],
        feature: m[4],
        semantic: m[5],
        dual: m[6],
        identity: m[7],
        total: m[8],
    }
}

/// Rows of `source | translated | reconstructed`, one per test image.
pub fn sample_grid(state: &TrainState, xs: &[Tensor], ys: &[Tensor]) -> Result<RgbImage> {
    let mut rows: Vec<[Tensor; 3]> = Vec::new();
    for (imgs, there, back) in [(xs, &state.g, &state.f), (ys, &state.f, &state.g)] {
        for img in imgs {
            let src = img.clone().reshape([vec![1], img.shape().to_vec()].concat());
            let t = there.generate(&src)?;
            let r = back.generate(&t)?;
            rows.push([src, t, r]);
        }
    }
    let (_, _, h, w) = rows
        .first()
        .map(|r| r[0].dims4())
        .ok_or_else(|| Error::InvalidInput("no sample images".into()))?;
    let mut grid = RgbImage::new(3 * w as u32, (rows.len() * h) as u32);
    for (i, row) in rows.iter().enumerate() {
        for (j, t) in row.iter().enumerate() {
            let (img, _) = denormalize(&t.sample(0));
            image::imageops::replace(&mut grid, &img, (j * w) as i64, (i * h) as i64);
        }
    }
    Ok(grid)
}

/// Resolved backend trio owned for the duration of a run.
pub struct BackendSet {
    pub feature: Backend,
    pub edge: Backend,
    pub distance: Backend,
}

impl BackendSet {
    pub fn load(cfg: &Config) -> Result<Self> {
        Ok(Self {
            feature: Backend::load(cfg.feature.kind, cfg.feature.path.as_deref())?,
            edge: Backend::load(cfg.edge.kind, cfg.edge.path.as_deref())?,
            distance: Backend::load(cfg.distance.kind, cfg.distance.path.as_deref())?,
        })
    }

    pub fn borrow(&self) -> Backends<'_> {
        Backends {
            feature: &self.feature,
            edge: &self.edge,
            distance: &self.distance,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    pub load: LoadOptions,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub epochs_completed: usize,
    pub rows: Vec<EpochRow>,
}

/// Full training run into `cfg.run_dir()`.
pub fn train(cfg: &Config, opts: &TrainOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let (x_dir, y_dir) = cfg.require_data_dirs()?;
    let xs = load_domain_folder(&x_dir, Domain::X, Split::Train)?;
    let ys = load_domain_folder(&y_dir, Domain::Y, Split::Train)?;
    let test_dir = |dir: &Option<PathBuf>, fallback: &Path| {
        dir.clone().filter(|p| p.is_dir()).unwrap_or_else(|| fallback.to_path_buf())
    };
    let x_test = load_domain_folder(&test_dir(&cfg.data.x_test_dir, &x_dir), Domain::X, Split::Test)?;
    let y_test = load_domain_folder(&test_dir(&cfg.data.y_test_dir, &y_dir), Domain::Y, Split::Test)?;
    let backends = BackendSet::load(cfg)?;
    let run_dir = cfg.run_dir();
    train_with(cfg, opts, (xs, ys), (x_test, y_test), &backends, &run_dir)
}

/// [`train`] with datasets and backends supplied by the caller.
pub fn train_with(
    cfg: &Config,
    opts: &TrainOptions,
    (xs, ys): (crate::data::DomainDataset, crate::data::DomainDataset),
    (x_test, y_test): (crate::data::DomainDataset, crate::data::DomainDataset),
    backends: &BackendSet,
    run_dir: &Path,
) -> Result<RunSummary> {
    let t = &cfg.train;
    let mut sampler = UnpairedSampler::new(xs, ys, cfg.data.preprocess.clone(), t.seed, cfg.data.workers)?;
    let mut state = match &opts.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, Some(cfg), opts.load)?;
            if let Some(s) = &ck.manifest.sampler {
                sampler.restore(s)?;
            }
            ck.state
        }
        None => TrainState::new(cfg)?,
    };
    fs::create_dir_all(run_dir.join("samples"))?;
    fs::write(run_dir.join(CONFIG_SNAPSHOT), cfg.to_text())?;

    // Keep only rows of epochs the state has completed.
    let mut rows: Vec<EpochRow> = if opts.resume.is_some() {
        read_losses(run_dir)
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.epoch <= state.epoch)
            .collect()
    } else {
        Vec::new()
    };
    let write_losses = |rows: &[EpochRow]| -> Result<()> {
        let mut f = fs::File::create(run_dir.join(LOSSES_FILE))?;
        writeln!(f, "{}", losses_header())?;
        for r in rows {
            writeln!(f, "{}", r.to_csv())?;
        }
        Ok(())
    };
    write_losses(&rows)?;

    let n_samples = t.sample_count;
    let sample_x = load_test_images(&x_test, &cfg.data.preprocess, n_samples)?;
    let sample_y = load_test_images(&y_test, &cfg.data.preprocess, n_samples)?;
    let steps = if t.steps_per_epoch > 0 {
        t.steps_per_epoch
    } else {
        sampler.epoch_len().div_ceil(t.batch_size)
    };
    let bk = backends.borrow();
    while state.epoch < t.epochs {
        let started = Instant::now();
        let sc = StepConfig {
            loss: &cfg.loss,
            train: t,
            lr: t.lr_at(state.epoch),
        };
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (x, y) = sampler.next_batch(t.batch_size)?;
            let report = training_step(&mut state, &x, &y, &bk, &sc).map_err(|e| {
                log::error!(
                    "aborting at epoch {} iteration {}: {e}; last checkpoint left intact",
                    state.epoch + 1,
                    state.iteration + 1
                );
                e
            })?;
            log::debug!("iteration {}: {report:?}", state.iteration);
            reports.push(report);
        }
        state.epoch += 1;
        let row = EpochRow {
            epoch: state.epoch,
            mean: mean_report(&reports),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{}: total {:.4} d_x {:.4} d_y {:.4}",
            state.epoch,
            t.epochs,
            row.mean.total,
            row.mean.d_x,
            row.mean.d_y
        );
        rows.push(row);
        write_losses(&rows)?;
        let last = state.epoch == t.epochs;
        if state.epoch % t.sample_every == 0 || last {
            let grid = sample_grid(&state, &sample_x, &sample_y)?;
            let path = run_dir.join("samples").join(format!("epoch_{:03}.png", state.epoch));
            grid.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        if state.epoch % t.checkpoint_every == 0 || last {
            save_checkpoint(
                &state,
                cfg,
                Some(&sampler.state()),
                &checkpoint_dir(run_dir, state.epoch),
            )?;
        }
    }
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        epochs_completed: state.epoch,
        rows,
    })
}

/// Configurations of a one-key sweep, each with its own run name.
pub fn sweep_configs(base: &Config, key: &str, values: &[String]) -> Result<Vec<Config>> {
    if !Config::has_key(key) {
        return Err(Error::Config {
            location: "sweep".into(),
            key: key.into(),
            msg: "unknown key".into(),
        });
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.apply_overrides(&[format!("{key}={v}")])?;
            if values.len() > 1 {
                c.run_name = format!("{}_{}={}", base.run_name, key, v);
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Variant configurations for the four loss ablations.
pub fn ablation_configs(base: &Config) -> Vec<(crate::losses::Ablation, Config)> {
    crate::losses::Ablation::ALL
        .iter()
        .map(|&a| {
            let mut c = base.clone();
            c.loss = a.apply(&base.loss);
            c.run_name = format!("{}_{}", base.run_name, a.name());
            (a, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendKind;
    use crate::discriminator::DiscriminatorSpec;
    use crate::generator::GeneratorSpec;

    pub(crate) fn toy_config() -> Config {
        let mut c = Config::default().with_stub_backends();
        c.generator = GeneratorSpec {
            base_channels: 4,
            n_residual_blocks_f: 1,
            n_residual_blocks_g: 1,
            dense_layers: 2,
            dense_growth: 4,
        };
        c.discriminator = DiscriminatorSpec {
            base_channels: 4,
            n_down_layers: 2,
            ..DiscriminatorSpec::default()
        };
        c.train.seed = 3;
        c.train.buffer_size = 2;
        c
    }

    fn stub_backends() -> BackendSet {
        BackendSet {
            feature: Backend::load(BackendKind::StubFeature, None).unwrap(),
            edge: Backend::load(BackendKind::StubEdge, None).unwrap(),
            distance: Backend::load(BackendKind::StubDistance, None).unwrap(),
        }
    }

    fn batch(seed: f64) -> Tensor {
        Tensor::new(
            vec![1, 3, 16, 16],
            (0..768).map(|i| (i as f64 * 0.13 + seed).sin() * 0.9).collect(),
        )
    }

    fn step(state: &mut TrainState, cfg: &Config, b: &BackendSet, k: usize) -> LossReport {
        let sc = StepConfig {
            loss: &cfg.loss,
            train: &cfg.train,
            lr: cfg.train.lr,
        };
        training_step(state, &batch(k as f64), &batch(10.0 + k as f64), &b.borrow(), &sc).unwrap()
    }

    #[test]
    fn init_statistics_at_scale() {
        // Law of large numbers: mean within 3·σ/√n, std within 1%, n ≥ 10⁶.
        let cfg = Config::default();
        let state_g = {
            let mut g = build_dense_fusion_generator(&cfg.generator, "G").unwrap();
            init_normal(&mut g, 0.02, &mut ChaCha8Rng::seed_from_u64(9));
            g
        };
        let mut w = Vec::new();
        state_g.visit(&mut |p, role| {
            if role == crate::nn::ParamRole::ConvWeight {
                w.extend_from_slice(p.value().data());
            }
        });
        assert!(w.len() >= 1_000_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * 0.02 / 1000.0, "mean {mean}");
        assert!((std - 0.02).abs() < 0.0002, "std {std}");
    }

    #[test]
    fn init_is_seeded() {
        let cfg = toy_config();
        let a = TrainState::new(&cfg).unwrap().named_params();
        let b = TrainState::new(&cfg).unwrap().named_params();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.train.seed = 4;
        assert_ne!(a, TrainState::new(&other).unwrap().named_params());
    }

    #[test]
    fn lr_schedule() {
        let mut t = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(9), t.lr);
        t.lr_decay = LrDecay::LinearAfterHalf;
        assert_eq!(t.lr_at(4), t.lr);
        assert!((t.lr_at(5) - t.lr).abs() < 1e-18);
        assert!((t.lr_at(9) - t.lr * (1.0 - 4.0 / 6.0)).abs() < 1e-18);
        assert!(t.lr_at(9) > 0.0);
    }

    #[test]
    fn buffer_pass_through_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b0 = ImageBuffer::new(0);
        let f = batch(1.0);
        assert_eq!(b0.query(&f, &mut rng), f);
        assert!(b0.images.is_empty());
        let mut b = ImageBuffer::new(3);
        let mut swapped = 0;
        for k in 0..200 {
            let f = batch(k as f64);
            let out = b.query(&f, &mut rng);
            assert!(b.images.len() <= 3);
            if k < 3 {
                assert_eq!(out, f);
            } else if out != f {
                swapped += 1;
            }
        }
        // Swap probability ½ over 197 draws.
        assert!((60..140).contains(&swapped), "{swapped}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let tape = Tape::new(&["c."]);
        let mut conv = crate::nn::Conv2d::new("c", 1, 1, 1, 1, 0, false);
        conv.weight.set(Tensor::new(vec![1, 1, 1, 1], vec![0.5]));
        let out = conv.forward(&tape, &tape.constant(Tensor::full(vec![1, 1, 2, 2], 2.0)));
        let loss = tape.mean(&out);
        let grads = tape.backward(&loss);
        drop(tape);
        let mut opt = Adam::default();
        opt.apply(&mut [&mut conv], &grads, 0.1, 0.5, 0.999);
        // Bias-corrected first step is lr·sign(grad) up to eps.
        assert!((conv.weight.value().item() - 0.4).abs() < 1e-7);
    }

    #[test]
    fn zero_weights_leave_generators_unchanged() {
        let mut cfg = toy_config();
        cfg.loss.weights = crate::losses::LossWeights {
            lambda_gan: 0.0,
            lambda_dual: 0.0,
            lambda_id: 0.0,
            mu: 0.0,
        };
        let b = stub_backends();
        let mut s = TrainState::new(&cfg).unwrap();
        let before = s.named_params();
        step(&mut s, &cfg, &b, 0);
        let after = s.named_params();
        for (k, v) in &before {
            if k.starts_with("G.") || k.starts_with("F.") {
                assert_eq!(v, &after[k], "{k}");
            }
        }
    }

    #[test]
    fn updates_touch_only_their_networks() {
        let cfg = toy_config();
        let b = stub_backends();
        let mut s = TrainState::new(&cfg).unwrap();
        let sc = StepConfig {
            loss: &cfg.loss,
            train: &cfg.train,
            lr: cfg.train.lr,
        };
        let before = s.named_params();
        let (_, fy, fx) = generator_step(&mut s, &batch(0.0), &batch(1.0), &b.borrow(), &sc).unwrap();
        let mid = s.named_params();
        for (k, v) in &before {
            let is_d = k.starts_with("D_");
            assert_eq!(is_d, v == &mid[k], "generator step on {k}");
        }
        discriminator_step(&mut s, &batch(0.0), &batch(1.0), &fy, &fx, &sc).unwrap();
        let after = s.named_params();
        for (k, v) in &mid {
            let is_d = k.starts_with("D_");
            assert_eq!(is_d, v != &after[k], "discriminator step on {k}");
        }
    }

    #[test]
    fn steps_are_deterministic_and_backends_frozen() {
        let cfg = toy_config();
        let b = stub_backends();
        let frozen: Vec<_> = [&b.feature, &b.edge, &b.distance].iter().map(|x| x.params()).collect();
        let run = || {
            let mut s = TrainState::new(&cfg).unwrap();
            (0..3).map(|k| step(&mut s, &cfg, &b, k)).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        for r in &a {
            assert!(r.decomposition_error(&cfg.loss.weights) < 1e-12);
        }
        let after: Vec<_> = [&b.feature, &b.edge, &b.distance].iter().map(|x| x.params()).collect();
        assert_eq!(frozen, after);
    }

    #[test]
    fn update_order_variants_differ_only_in_order() {
        let mut cfg = toy_config();
        cfg.train.update_order = UpdateOrder::DThenG;
        let b = stub_backends();
        let mut s = TrainState::new(&cfg).unwrap();
        let r = step(&mut s, &cfg, &b, 0);
        assert!(r.d_x > 0.0 && r.d_y > 0.0);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn non_finite_input_names_term_and_keeps_state() {
        let cfg = toy_config();
        let b = stub_backends();
        let mut s = TrainState::new(&cfg).unwrap();
        let before = s.named_params();
        let mut x = batch(0.0);
        x.data_mut()[0] = f64::NAN;
        let sc = StepConfig {
            loss: &cfg.loss,
            train: &cfg.train,
            lr: cfg.train.lr,
        };
        let err = training_step(&mut s, &x, &batch(1.0), &b.borrow(), &sc).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(before, s.named_params());
        assert_eq!(s.iteration, 0);
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let cfg = toy_config();
        let b = stub_backends();
        let mut s = TrainState::new(&cfg).unwrap();
        step(&mut s, &cfg, &b, 0);
        step(&mut s, &cfg, &b, 1);
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&s, &cfg, None, &ck).unwrap();
        let loaded = load_checkpoint(&ck, Some(&cfg), LoadOptions::default()).unwrap();
        assert_eq!(loaded.state.named_params(), s.named_params());
        assert_eq!(loaded.state.opt_gen, s.opt_gen);
        assert_eq!(loaded.state.buffer_y, s.buffer_y);
        let probe = batch(5.0);
        assert_eq!(
            loaded.state.g.generate(&probe).unwrap(),
            s.g.generate(&probe).unwrap()
        );
        // Continuing from either state gives identical reports.
        let mut a = s.clone();
        let mut c = loaded.state.clone();
        assert_eq!(step(&mut a, &cfg, &b, 2), step(&mut c, &cfg, &b, 2));

        let mut other = cfg.clone();
        other.loss.weights.mu = 3.0;
        assert!(load_checkpoint(&ck, Some(&other), LoadOptions::default()).is_err());
        assert!(load_checkpoint(&ck, Some(&other), LoadOptions { allow_mismatch: true }).is_ok());

        let path = ck.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"epoch\": 0", "\"epoch\": 7", 1)).unwrap();
        let err = load_checkpoint(&ck, None, LoadOptions { allow_mismatch: true }).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn sweep_and_ablation_configs() {
        let cfg = toy_config();
        let vals: Vec<String> = ["20", "5", "1", "0.1"].map(String::from).to_vec();
        let runs = sweep_configs(&cfg, "loss.mu", &vals).unwrap();
        let mus: Vec<f64> = runs.iter().map(|c| c.loss.weights.mu).collect();
        assert_eq!(mus, vec![20.0, 5.0, 1.0, 0.1]);
        assert!(runs.iter().all(|c| c.train.seed == cfg.train.seed));
        let names: std::collections::HashSet<_> = runs.iter().map(|c| c.run_name.clone()).collect();
        assert_eq!(names.len(), 4);
        assert!(sweep_configs(&cfg, "loss.nope", &vals).is_err());
        let single = sweep_configs(&cfg, "loss.mu", &vals[..1]).unwrap();
        assert_eq!(single[0].run_name, cfg.run_name);

        let ab = ablation_configs(&cfg);
        assert_eq!(ab.len(), 4);
        let only = &ab[0].1.loss;
        assert!(!only.use_feature && !only.use_semantic && !only.use_identity);
    }
}
