//! Objective terms. Every expectation is realized as a mean over batch and
//! elements, so weights do not depend on resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::Ops;
use crate::backends::Backend;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_dual: f64,
    pub lambda_id: f64,
    /// Weight of the semantic term inside the dual term.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_dual: 10.0,
            lambda_id: 5.0,
            mu: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_dual", self.lambda_dual),
            ("lambda_id", self.lambda_id),
            ("mu", self.mu),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Which generator receives which image in the identity term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityFeed {
    /// F(x) vs x and G(y) vs y: each generator sees an image from its own
    /// output domain's counterpart as written in the objective.
    Equation,
    /// F(y) vs y and G(x) vs x: the alternative prose reading.
    InputDomain,
}

impl std::str::FromStr for IdentityFeed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "equation" => Ok(Self::Equation),
            "input_domain" => Ok(Self::InputDomain),
            other => Err(format!("unknown identity feed `{other}` (equation, input_domain)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub use_feature: bool,
    pub use_semantic: bool,
    pub use_identity: bool,
    pub identity_feed: IdentityFeed,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_feature: true,
            use_semantic: true,
            use_identity: true,
            identity_feed: IdentityFeed::Equation,
        }
    }
}

/// The four ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    OnlyAdversarial,
    NoIdentity,
    NoSemantic,
    NoFeature,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Self::OnlyAdversarial,
        Self::NoIdentity,
        Self::NoSemantic,
        Self::NoFeature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OnlyAdversarial => "only_lsgan",
            Self::NoIdentity => "no_identity",
            Self::NoSemantic => "no_semantic",
            Self::NoFeature => "no_feature",
        }
    }

    pub fn apply(self, cfg: &LossConfig) -> LossConfig {
        let mut c = *cfg;
        match self {
            Self::OnlyAdversarial => {
                c.use_feature = false;
                c.use_semantic = false;
                c.use_identity = false;
            }
            Self::NoIdentity => c.use_identity = false,
            Self::NoSemantic => c.use_semantic = false,
            Self::NoFeature => c.use_feature = false,
        }
        c
    }
}

/// Scalar values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_x: f64,
    pub d_y: f64,
    pub g_adv: f64,
    pub f_adv: f64,
    pub feature: f64,
    pub semantic: f64,
    pub dual: f64,
    pub identity: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 9] = [
        "d_x", "d_y", "g_adv", "f_adv", "feature", "semantic", "dual", "identity", "total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.d_x,
            self.d_y,
            self.g_adv,
            self.f_adv,
            self.feature,
            self.semantic,
            self.dual,
            self.identity,
            self.total,
        ]
    }

    /// Error naming the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        match Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!("loss term `{name}` ({v})"))),
            None => Ok(()),
        }
    }

    /// Largest relative deviation of the dual and total decompositions.
    pub fn decomposition_error(&self, w: &LossWeights) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        let dual = self.feature + w.mu * self.semantic;
        let total = total_objective(self.g_adv + self.f_adv, self.dual, self.identity, w);
        if self.dual == dual && self.total == total {
            return 0.0;
        }
        rel(self.dual, dual).max(rel(self.total, total))
    }
}

fn ensure_finite<O: Ops>(ops: &O, v: &O::V, what: &str) -> Result<()> {
    if ops.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_same_shape<O: Ops>(ops: &O, a: &O::V, b: &O::V, what: &str) -> Result<()> {
    let (sa, sb) = (ops.shape(a), ops.shape(b));
    if sa == sb {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")))
    }
}

fn mean_abs_diff<O: Ops>(ops: &O, a: &O::V, b: &O::V) -> O::V {
    ops.mean(&ops.abs(&ops.sub(a, b)))
}

/// `½·mean((real − 1)²) + ½·mean(fake²)`.
pub fn lsgan_d_loss<O: Ops>(ops: &O, real: &O::V, fake: &O::V) -> Result<O::V> {
    ensure_finite(ops, real, "real discriminator scores")?;
    ensure_finite(ops, fake, "fake discriminator scores")?;
    let r = ops.mean(&ops.square(&ops.shift(real, -1.0)));
    let f = ops.mean(&ops.square(fake));
    Ok(ops.scale(&ops.add(&r, &f), 0.5))
}

/// `½·mean((fake − 1)²)`.
pub fn lsgan_g_loss<O: Ops>(ops: &O, fake: &O::V) -> Result<O::V> {
    ensure_finite(ops, fake, "fake discriminator scores")?;
    Ok(ops.scale(&ops.mean(&ops.square(&ops.shift(fake, -1.0))), 0.5))
}

/// Mean absolute feature difference between each image and its cycle
/// reconstruction, summed over both domains.
pub fn feature_loss<O: Ops>(
    ops: &O,
    feat: &Backend,
    x: &O::V,
    rec_x: &O::V,
    y: &O::V,
    rec_y: &O::V,
) -> Result<O::V> {
    ensure_same_shape(ops, x, rec_x, "feature term, x vs reconstruction")?;
    ensure_same_shape(ops, y, rec_y, "feature term, y vs reconstruction")?;
    let tx = mean_abs_diff(ops, &feat.features(ops, x)?, &feat.features(ops, rec_x)?);
    let ty = mean_abs_diff(ops, &feat.features(ops, y)?, &feat.features(ops, rec_y)?);
    Ok(ops.add(&tx, &ty))
}

/// Maps edge probabilities in [0, 1] to the [-1, 1] image range the distance
/// expects.
fn edges_as_image<O: Ops>(ops: &O, edge: &Backend, x: &O::V) -> Result<O::V> {
    Ok(ops.shift(&ops.scale(&edge.edges(ops, x)?, 2.0), -1.0))
}

/// Perceptual distance between the edge maps of each input and its translation.
pub fn semantic_loss<O: Ops>(
    ops: &O,
    edge: &Backend,
    dist: &Backend,
    x: &O::V,
    g_x: &O::V,
    y: &O::V,
    f_y: &O::V,
) -> Result<O::V> {
    ensure_same_shape(ops, x, g_x, "semantic term, x vs translation")?;
    ensure_same_shape(ops, y, f_y, "semantic term, y vs translation")?;
    let ex = edges_as_image(ops, edge, x)?;
    let egx = edges_as_image(ops, edge, g_x)?;
    let ey = edges_as_image(ops, edge, y)?;
    let efy = edges_as_image(ops, edge, f_y)?;
    let tx = dist.distance(ops, &ex, &egx)?;
    let ty = dist.distance(ops, &ey, &efy)?;
    Ok(ops.add(&tx, &ty))
}

/// `feature + mu·semantic`.
pub fn dual_loss(feature: f64, semantic: f64, mu: f64) -> f64 {
    feature + semantic * mu
}

fn dual_loss_op<O: Ops>(ops: &O, feature: &O::V, semantic: &O::V, mu: f64) -> O::V {
    ops.add(feature, &ops.scale(semantic, mu))
}

/// `mean|F(x) − x| + mean|G(y) − y|`.
pub fn identity_loss<O: Ops>(
    ops: &O,
    x: &O::V,
    f_of_x: &O::V,
    y: &O::V,
    g_of_y: &O::V,
) -> Result<O::V> {
    ensure_same_shape(ops, x, f_of_x, "identity term, x")?;
    ensure_same_shape(ops, y, g_of_y, "identity term, y")?;
    Ok(ops.add(&mean_abs_diff(ops, f_of_x, x), &mean_abs_diff(ops, g_of_y, y)))
}

/// Generator objective from its components; discriminator terms excluded.
pub fn total_objective(adversarial: f64, dual: f64, identity: f64, w: &LossWeights) -> f64 {
    adversarial * w.lambda_gan + dual * w.lambda_dual + identity * w.lambda_id
}

fn total_objective_op<O: Ops>(ops: &O, adv: &O::V, dual: &O::V, id: &O::V, w: &LossWeights) -> O::V {
    let t = ops.add(&ops.scale(adv, w.lambda_gan), &ops.scale(dual, w.lambda_dual));
    ops.add(&t, &ops.scale(id, w.lambda_id))
}

/// Images of one generator forward pass.
pub struct GeneratorPass<'a, V> {
    pub x: &'a V,
    pub y: &'a V,
    pub g_x: &'a V,
    pub f_y: &'a V,
    pub rec_x: &'a V,
    pub rec_y: &'a V,
    /// Identity images: (input, generator output) pairs for F and G.
    pub id_f: Option<(&'a V, &'a V)>,
    pub id_g: Option<(&'a V, &'a V)>,
    /// Discriminator scores of the translations.
    pub score_g_x: &'a V,
    pub score_f_y: &'a V,
}

pub struct Backends<'a> {
    pub feature: &'a Backend,
    pub edge: &'a Backend,
    pub distance: &'a Backend,
}

/// Builds the generator objective. Disabled terms are exact zeros and their
/// backends are never evaluated. Returns the total and the report (with the
/// discriminator fields left at zero).
pub fn generator_objective<O: Ops>(
    ops: &O,
    pass: &GeneratorPass<'_, O::V>,
    backends: &Backends<'_>,
    cfg: &LossConfig,
) -> Result<(O::V, LossReport)> {
    let zero = || ops.constant(crate::Tensor::scalar(0.0));
    let w = &cfg.weights;
    let g_adv = lsgan_g_loss(ops, pass.score_g_x)?;
    let f_adv = lsgan_g_loss(ops, pass.score_f_y)?;
    let feature = if cfg.use_feature {
        feature_loss(ops, backends.feature, pass.x, pass.rec_x, pass.y, pass.rec_y)?
    } else {
        zero()
    };
    let semantic = if cfg.use_semantic {
        semantic_loss(
            ops,
            backends.edge,
            backends.distance,
            pass.x,
            pass.g_x,
            pass.y,
            pass.f_y,
        )?
    } else {
        zero()
    };
    let identity = match (cfg.use_identity, pass.id_f, pass.id_g) {
        (true, Some((fi, fo)), Some((gi, go))) => identity_loss(ops, fi, fo, gi, go)?,
        (true, _, _) => {
            return Err(Error::InvalidInput(
                "identity term enabled but identity images were not supplied".into(),
            ))
        }
        (false, _, _) => zero(),
    };
    let dual = dual_loss_op(ops, &feature, &semantic, w.mu);
    let adv = ops.add(&g_adv, &f_adv);
    let total = total_objective_op(ops, &adv, &dual, &identity, w);
    let report = LossReport {
        g_adv: ops.item(&g_adv),
        f_adv: ops.item(&f_adv),
        feature: ops.item(&feature),
        semantic: ops.item(&semantic),
        dual: ops.item(&dual),
        identity: ops.item(&identity),
        total: ops.item(&total),
        ..LossReport::default()
    };
    report.check_finite()?;
    Ok((total, report))
}
