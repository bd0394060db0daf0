//! Flat key/value run configuration.
//!
//! Files are TOML with scalar values only. Nested tables flatten to dotted
//! keys (`model.discriminator.base_channels`). Command-line overrides use the same dotted keys and win over the
//! file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backends::BackendKind;
use crate::data::PreprocessConfig;
use crate::discriminator::{Activation, DiscriminatorSpec};
use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::losses::{IdentityFeed, LossConfig, LossWeights};
use crate::trainer::{LrDecay, TrainConfig, UpdateOrder};

pub const RUN_ROOT_ENV: &str = "ASYMGAN_RUN_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub x_dir: Option<PathBuf>,
    pub y_dir: Option<PathBuf>,
    pub x_test_dir: Option<PathBuf>,
    pub y_test_dir: Option<PathBuf>,
    pub preprocess: PreprocessConfig,
    pub workers: usize,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub feature: BackendSpec,
    pub edge: BackendSpec,
    pub distance: BackendSpec,
    pub run_root: PathBuf,
    pub run_name: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig {
                x_dir: None,
                y_dir: None,
                x_test_dir: None,
                y_test_dir: None,
                preprocess: PreprocessConfig::default(),
                workers: 1,
            },
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            feature: BackendSpec {
                kind: BackendKind::Vgg16Relu33,
                path: None,
            },
            edge: BackendSpec {
                kind: BackendKind::Dexined,
                path: None,
            },
            distance: BackendSpec {
                kind: BackendKind::Lpips,
                path: None,
            },
            run_root: PathBuf::from("runs"),
            run_name: "run".into(),
        }
    }
}

/// Hex sha256 over `key=value\n` lines in the given order.
pub fn digest_lines(entries: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    hex::encode(h.finalize())
}

/// Where a key/value pair came from, for diagnostics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
    Environment,
}

impl Origin {
    fn describe(&self) -> String {
        match self {
            Origin::Line(n) => format!("line {n}"),
            Origin::Override => "command-line override".into(),
            Origin::Environment => format!("environment variable {RUN_ROOT_ENV}"),
        }
    }
}

fn cfg_err(origin: &Origin, key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        location: origin.describe(),
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn line_of(text: &str, span: Option<std::ops::Range<usize>>) -> usize {
    span.map(|r| text[..r.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0)
}

fn scalar_text(v: &toml_edit::Value) -> Result<String, String> {
    use toml_edit::Value;
    match v {
        Value::String(s) => Ok(s.value().clone()),
        Value::Integer(i) => Ok(i.value().to_string()),
        Value::Float(f) => Ok(f.value().to_string()),
        Value::Boolean(b) => Ok(b.value().to_string()),
        _ => Err("expected a string, number or boolean".into()),
    }
}

fn flatten(
    text: &str,
    prefix: &str,
    table: &dyn toml_edit::TableLike,
    out: &mut Vec<(String, String, Origin)>,
) -> Result<()> {
    for (k, item) in table.iter() {
        let key = if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        };
        if let Some(sub) = item.as_table_like() {
            flatten(text, &key, sub, out)?;
            continue;
        }
        let origin = Origin::Line(line_of(text, item.span()));
        let value = item
            .as_value()
            .ok_or_else(|| cfg_err(&origin, &key, "arrays of tables are not supported"))
            .and_then(|v| scalar_text(v).map_err(|m| cfg_err(&origin, &key, m)))?;
        out.push((key, value, origin));
    }
    Ok(())
}

/// Raw `(key, value, origin)` triples with dotted keys.
pub fn parse_text(text: &str) -> Result<Vec<(String, String, Origin)>> {
    let doc = toml_edit::Document::parse(text).map_err(|e| {
        let line = line_of(text, e.span());
        // Syntax errors carry no key; report the one written on that line.
        let key = text
            .lines()
            .nth(line.saturating_sub(1))
            .and_then(|l| l.split_once('='))
            .map(|(k, _)| k.trim().to_string())
            .unwrap_or_default();
        Error::Config {
            location: Origin::Line(line).describe(),
            key,
            msg: e.message().trim().to_string(),
        }
    })?;
    let mut out = Vec::new();
    flatten(text, "", doc.as_table(), &mut out)?;
    out.sort_by_key(|(_, _, o)| match o {
        Origin::Line(n) => *n,
        _ => 0,
    });
    Ok(out)
}

/// Parses `key=value` (a leading `--` is accepted). Values need no quoting.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let s = s.trim_start_matches("--");
    let (k, v) = s.split_once('=').ok_or_else(|| {
        cfg_err(&Origin::Override, s, "overrides must look like --section.key=value")
    })?;
    let v = v.trim();
    let v = v
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .unwrap_or(v);
    Ok((k.trim().to_string(), v.to_string()))
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}` is not a valid number: {e}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean (true, false)")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    /// Every recognized key.
    pub fn keys() -> Vec<String> {
        Config::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn has_key(key: &str) -> bool {
        Self::keys().iter().any(|k| k == key)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let p = &mut self.data.preprocess;
        let g = &mut self.generator;
        let d = &mut self.discriminator;
        let w = &mut self.loss.weights;
        let t = &mut self.train;
        match key {
            "seed" => self.train.seed = num(v)?,
            "data.x_dir" => self.data.x_dir = opt_path(v),
            "data.y_dir" => self.data.y_dir = opt_path(v),
            "data.x_test_dir" => self.data.x_test_dir = opt_path(v),
            "data.y_test_dir" => self.data.y_test_dir = opt_path(v),
            "data.base_size" => p.base_size = num(v)?,
            "data.expand_size" => p.expand_size = num(v)?,
            "data.crop_size" => p.crop_size = num(v)?,
            "data.hflip_prob" => p.hflip_prob = num(v)?,
            "data.workers" => self.data.workers = num(v)?,
            "model.base_channels" => g.base_channels = num(v)?,
            "model.n_residual_blocks_f" => g.n_residual_blocks_f = num(v)?,
            "model.n_residual_blocks_g" => g.n_residual_blocks_g = num(v)?,
            "model.dense_layers" => g.dense_layers = num(v)?,
            "model.dense_growth" => g.dense_growth = num(v)?,
            "model.discriminator.base_channels" => d.base_channels = num(v)?,
            "model.discriminator.n_down_layers" => d.n_down_layers = num(v)?,
            "model.discriminator.kernel_size" => d.kernel_size = num(v)?,
            "model.discriminator.activation" => d.activation = v.parse::<Activation>()?,
            "loss.lambda_gan" => w.lambda_gan = num(v)?,
            "loss.lambda_dual" => w.lambda_dual = num(v)?,
            "loss.lambda_id" => w.lambda_id = num(v)?,
            "loss.mu" => w.mu = num(v)?,
            "loss.use_feature" => self.loss.use_feature = boolean(v)?,
            "loss.use_semantic" => self.loss.use_semantic = boolean(v)?,
            "loss.use_identity" => self.loss.use_identity = boolean(v)?,
            "loss.identity_feed" => self.loss.identity_feed = v.parse::<IdentityFeed>()?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.lr" => t.lr = num(v)?,
            "train.adam_beta1" => t.adam_beta1 = num(v)?,
            "train.adam_beta2" => t.adam_beta2 = num(v)?,
            "train.init_std" => t.init_std = num(v)?,
            "train.buffer_size" => t.buffer_size = num(v)?,
            "train.lr_decay" => t.lr_decay = v.parse::<LrDecay>()?,
            "train.update_order" => t.update_order = v.parse::<UpdateOrder>()?,
            "train.checkpoint_every" => t.checkpoint_every = num(v)?,
            "train.sample_every" => t.sample_every = num(v)?,
            "train.sample_count" => t.sample_count = num(v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = num(v)?,
            "backends.feature.kind" => self.feature.kind = v.parse()?,
            "backends.feature.path" => self.feature.path = opt_path(v),
            "backends.edge.kind" => self.edge.kind = v.parse()?,
            "backends.edge.path" => self.edge.path = opt_path(v),
            "backends.distance.kind" => self.distance.kind = v.parse()?,
            "backends.distance.path" => self.distance.path = opt_path(v),
            "run.root" => self.run_root = PathBuf::from(v),
            "run.name" => self.run_name = v.to_string(),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Canonical `(key, value)` pairs, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let p = &self.data.preprocess;
        let g = &self.generator;
        let d = &self.discriminator;
        let w = &self.loss.weights;
        let t = &self.train;
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("seed", self.train.seed.to_string());
        m.insert("data.x_dir", path_str(&self.data.x_dir));
        m.insert("data.y_dir", path_str(&self.data.y_dir));
        m.insert("data.x_test_dir", path_str(&self.data.x_test_dir));
        m.insert("data.y_test_dir", path_str(&self.data.y_test_dir));
        m.insert("data.base_size", p.base_size.to_string());
        m.insert("data.expand_size", p.expand_size.to_string());
        m.insert("data.crop_size", p.crop_size.to_string());
        m.insert("data.hflip_prob", p.hflip_prob.to_string());
        m.insert("data.workers", self.data.workers.to_string());
        m.insert("model.base_channels", g.base_channels.to_string());
        m.insert("model.n_residual_blocks_f", g.n_residual_blocks_f.to_string());
        m.insert("model.n_residual_blocks_g", g.n_residual_blocks_g.to_string());
        m.insert("model.dense_layers", g.dense_layers.to_string());
        m.insert("model.dense_growth", g.dense_growth.to_string());
        m.insert("model.discriminator.base_channels", d.base_channels.to_string());
        m.insert("model.discriminator.n_down_layers", d.n_down_layers.to_string());
        m.insert("model.discriminator.kernel_size", d.kernel_size.to_string());
        m.insert(
            "model.discriminator.activation",
            match d.activation {
                Activation::Relu => "relu",
                Activation::LeakyRelu => "leaky_relu",
            }
            .into(),
        );
        m.insert("loss.lambda_gan", w.lambda_gan.to_string());
        m.insert("loss.lambda_dual", w.lambda_dual.to_string());
        m.insert("loss.lambda_id", w.lambda_id.to_string());
        m.insert("loss.mu", w.mu.to_string());
        m.insert("loss.use_feature", self.loss.use_feature.to_string());
        m.insert("loss.use_semantic", self.loss.use_semantic.to_string());
        m.insert("loss.use_identity", self.loss.use_identity.to_string());
        m.insert(
            "loss.identity_feed",
            match self.loss.identity_feed {
                IdentityFeed::Equation => "equation",
                IdentityFeed::InputDomain => "input_domain",
            }
            .into(),
        );
        m.insert("train.epochs", t.epochs.to_string());
        m.insert("train.batch_size", t.batch_size.to_string());
        m.insert("train.lr", t.lr.to_string());
        m.insert("train.adam_beta1", t.adam_beta1.to_string());
        m.insert("train.adam_beta2", t.adam_beta2.to_string());
        m.insert("train.init_std", t.init_std.to_string());
        m.insert("train.buffer_size", t.buffer_size.to_string());
        m.insert("train.lr_decay", t.lr_decay.to_string());
        m.insert("train.update_order", t.update_order.to_string());
        m.insert("train.checkpoint_every", t.checkpoint_every.to_string());
        m.insert("train.sample_every", t.sample_every.to_string());
        m.insert("train.sample_count", t.sample_count.to_string());
        m.insert("train.steps_per_epoch", t.steps_per_epoch.to_string());
        for (role, spec) in [
            ("feature", &self.feature),
            ("edge", &self.edge),
            ("distance", &self.distance),
        ] {
            m.insert(
                match role {
                    "feature" => "backends.feature.kind",
                    "edge" => "backends.edge.kind",
                    _ => "backends.distance.kind",
                },
                spec.kind.to_string(),
            );
            m.insert(
                match role {
                    "feature" => "backends.feature.path",
                    "edge" => "backends.edge.path",
                    _ => "backends.distance.path",
                },
                path_str(&spec.path),
            );
        }
        m.insert("run.root", self.run_root.display().to_string());
        m.insert("run.name", self.run_name.clone());
        m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn apply(&mut self, key: &str, value: &str, origin: &Origin) -> Result<()> {
        self.set(key, value).map_err(|m| cfg_err(origin, key, m))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (k, v, origin) in parse_text(text)? {
            cfg.apply(&k, &v, &origin)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// File, then environment run-root, then overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        let mut cfg = Config::default();
        for (k, v, origin) in parse_text(&text)? {
            cfg.apply(&k, &v, &origin)?;
        }
        if let Ok(root) = std::env::var(RUN_ROOT_ENV) {
            cfg.apply("run.root", &root, &Origin::Environment)?;
        }
        cfg.apply_overrides(overrides)?;
        // Relative data and weight paths are taken relative to the config file.
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = parse_override(o)?;
            self.apply(&k, &v, &Origin::Override)?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.data.x_dir);
        fix(&mut self.data.y_dir);
        fix(&mut self.data.x_test_dir);
        fix(&mut self.data.y_test_dir);
        fix(&mut self.feature.path);
        fix(&mut self.edge.path);
        fix(&mut self.distance.path);
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let resolved = |key: &str, msg: String| Error::Config {
            location: "resolved config".into(),
            key: key.into(),
            msg,
        };
        self.data
            .preprocess
            .validate()
            .map_err(|m| resolved("data", m))?;
        self.generator
            .validate()
            .map_err(|e| resolved("model", e.to_string()))?;
        self.discriminator
            .validate()
            .map_err(|e| resolved("model.discriminator", e.to_string()))?;
        self.loss.weights.validate().map_err(|m| resolved("loss", m))?;
        self.train.validate().map_err(|m| resolved("train", m))?;
        for (key, spec, role) in [
            ("backends.feature.kind", &self.feature, crate::backends::BackendRole::Feature),
            ("backends.edge.kind", &self.edge, crate::backends::BackendRole::Edge),
            ("backends.distance.kind", &self.distance, crate::backends::BackendRole::Distance),
        ] {
            if spec.kind.role() != role {
                return Err(resolved(
                    key,
                    format!("`{}` is not a {role} backend", spec.kind),
                ));
            }
        }
        Ok(())
    }

    /// Checks that the training folders exist, naming the offending key.
    pub fn require_data_dirs(&self) -> Result<(PathBuf, PathBuf)> {
        let check = |key: &str, p: &Option<PathBuf>| -> Result<PathBuf> {
            match p {
                None => Err(Error::Config {
                    location: "resolved config".into(),
                    key: key.into(),
                    msg: "not set".into(),
                }),
                Some(p) if !p.is_dir() => Err(Error::Config {
                    location: "resolved config".into(),
                    key: key.into(),
                    msg: format!("directory {} does not exist", p.display()),
                }),
                Some(p) => Ok(p.clone()),
            }
        };
        Ok((check("data.x_dir", &self.data.x_dir)?, check("data.y_dir", &self.data.y_dir)?))
    }

    /// Snapshot text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let numeric = v.parse::<f64>().is_ok() || v == "true" || v == "false";
            if numeric {
                s.push_str(&format!("{k} = {v}\n"));
            } else {
                s.push_str(&format!("{k} = \"{v}\"\n"));
            }
        }
        s
    }

    /// sha256 over the sorted canonical `key=value` lines.
    pub fn digest(&self) -> String {
        digest_lines(&self.entries())
    }

    /// Every stub backend, as used for offline runs.
    pub fn with_stub_backends(mut self) -> Self {
        for spec in [&mut self.feature, &mut self.edge, &mut self.distance] {
            spec.kind = BackendKind::stub_for(spec.kind.role());
            spec.path = None;
        }
        self
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(&self.run_name)
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss.weights
    }
}
