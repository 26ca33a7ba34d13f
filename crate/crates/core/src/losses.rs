//! Training objectives.
//!
//! All losses are built on a [`Graph`] so they differentiate through whatever
//! produced their inputs. Discriminator maps are probability tensors of any
//! (matching) shape; patch sets are pairs of `N x d` embedding matrices whose
//! rows are L2-normalized.

use std::str::FromStr;

use crate::substrate::{Graph, NodeId, Tensor, TensorError};
use crate::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NceVariant {
    PatchNce,
    MoNceHard,
    MoNceEasy,
    SenceMpa,
    SenceMiou,
}

impl NceVariant {
    pub const ALL: [NceVariant; 5] = [
        NceVariant::PatchNce,
        NceVariant::MoNceHard,
        NceVariant::MoNceEasy,
        NceVariant::SenceMpa,
        NceVariant::SenceMiou,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NceVariant::PatchNce => "patchnce",
            NceVariant::MoNceHard => "monce_hard",
            NceVariant::MoNceEasy => "monce_easy",
            NceVariant::SenceMpa => "sence_mpa",
            NceVariant::SenceMiou => "sence_miou",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn needs_segmaps(self) -> bool {
        matches!(self, NceVariant::SenceMpa | NceVariant::SenceMiou)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeomVariant {
    None,
    Ptl,
    Tps,
}

impl GeomVariant {
    pub const ALL: [GeomVariant; 3] = [GeomVariant::None, GeomVariant::Ptl, GeomVariant::Tps];

    pub fn name(self) -> &'static str {
        match self {
            GeomVariant::None => "none",
            GeomVariant::Ptl => "ptl",
            GeomVariant::Tps => "tps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Which embeddings serve as negatives for an anchor.
///
/// `Clear` compares generated-image anchors `z_i` against clear-image patches
/// `x_j`; `Generated` uses clear anchors against generated patches. The
/// positive pair is the same either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeSource {
    Clear,
    Generated,
}

impl NegativeSource {
    pub fn name(self) -> &'static str {
        match self {
            NegativeSource::Clear => "clear",
            NegativeSource::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clear" => Some(NegativeSource::Clear),
            "generated" => Some(NegativeSource::Generated),
            _ => None,
        }
    }
}

macro_rules! from_str_via_parse {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::parse(s).ok_or_else(|| Error::Config(format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

from_str_via_parse!(NceVariant, "nce variant");
from_str_via_parse!(GeomVariant, "geometric loss");
from_str_via_parse!(NegativeSource, "negative source");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Heavier weight on negatives more similar to the anchor.
    Hard,
    /// Heavier weight on negatives less similar to the anchor.
    Easy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    pub q: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub nce_variant: NceVariant,
    pub geom_variant: GeomVariant,
    pub negatives: NegativeSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            beta: 1.0,
            q: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            nce_variant: NceVariant::SenceMpa,
            geom_variant: GeomVariant::Tps,
            negatives: NegativeSource::Clear,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )))
            }
        };
        positive("tau", self.tau)?;
        positive("beta", self.beta)?;
        non_negative("q", self.q)?;
        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)?;
        non_negative("lambda3", self.lambda3)
    }
}

fn same_shape(g: &Graph, op: &'static str, ids: &[NodeId]) -> Result<()> {
    let first = g.shape(ids[0]);
    for id in &ids[1..] {
        if g.shape(*id) != first {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: first.to_vec(),
                rhs: g.shape(*id).to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

// ---- discriminator-space geometry ----

/// Triangular probability similarity:
/// `mean(|dx - dz| + |dy - dz| - |dx - dy|)`.
///
/// Evaluated as the identical quantity `2 * dist(dz, [min(dx,dy), max(dx,dy)])`
/// per element, which is exactly zero whenever `dz` lies between the endpoints.
pub fn tps_loss(g: &mut Graph, dx: NodeId, dy: NodeId, dz: NodeId) -> Result<NodeId> {
    same_shape(g, "tps_loss", &[dx, dy, dz])?;
    let hi = g.maximum(dx, dy)?;
    let lo = g.minimum(dx, dy)?;
    let above = g.sub(dz, hi)?;
    let above = g.relu(above)?;
    let below = g.sub(lo, dz)?;
    let below = g.relu(below)?;
    let slack = g.add(above, below)?;
    let mean = g.mean_all(slack)?;
    Ok(g.scale(mean, 2.0)?)
}

/// Distance from flattened `dz` to the infinite line through `dx` and `dy`,
/// divided by `sqrt(numel)`.
pub fn ptl_loss(g: &mut Graph, dx: NodeId, dy: NodeId, dz: NodeId) -> Result<NodeId> {
    same_shape(g, "ptl_loss", &[dx, dy, dz])?;
    let n = g.value(dz).numel();
    if g.value(dx).data() == g.value(dy).data() {
        return Err(Error::Invalid(
            "ptl_loss: endpoints coincide, line is undefined".into(),
        ));
    }
    let dir = g.sub(dy, dx)?;
    let off = g.sub(dz, dx)?;
    let dd = g.mul(dir, dir)?;
    let dd = g.sum_all(dd)?;
    let od = g.mul(off, dir)?;
    let od = g.sum_all(od)?;
    let t = g.div(od, dd)?;
    let proj = g.mul(t, dir)?;
    let resid = g.sub(off, proj)?;
    let sq = g.mul(resid, resid)?;
    let sq = g.sum_all(sq)?;
    let dist = g.pow(sq, 0.5)?;
    Ok(g.scale(dist, 1.0 / (n as f64).sqrt())?)
}

// ---- adversarial ----

fn neg_mean_log(g: &mut Graph, p: NodeId, complement: bool) -> Result<NodeId> {
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let c = if complement {
        g.affine(c, -1.0, 1.0)?
    } else {
        c
    };
    let l = g.log(c)?;
    let m = g.mean_all(l)?;
    Ok(g.neg(m)?)
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn discriminator_loss(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let real = neg_mean_log(g, d_real, false)?;
    let fake = neg_mean_log(g, d_fake, true)?;
    Ok(g.add(real, fake)?)
}

/// Non-saturating generator loss `-mean(log d_fake)`.
pub fn generator_adv_loss(g: &mut Graph, d_fake: NodeId) -> Result<NodeId> {
    neg_mean_log(g, d_fake, false)
}

/// Binary cross-entropy adversarial pair `(L_D, L_G)`.
pub fn gan_losses(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> Result<(NodeId, NodeId)> {
    Ok((
        discriminator_loss(g, d_real, d_fake)?,
        generator_adv_loss(g, d_fake)?,
    ))
}

// ---- contrastive family ----

/// Aligned anchor / positive embeddings (`N x d`, unit rows).
#[derive(Clone, Copy, Debug)]
pub struct PatchSet {
    /// Embeddings of the generated image.
    pub anchors: NodeId,
    /// Embeddings of the clear image at the same locations.
    pub positives: NodeId,
}

impl PatchSet {
    pub fn new(g: &Graph, anchors: NodeId, positives: NodeId) -> Result<Self> {
        let (a, p) = (g.shape(anchors), g.shape(positives));
        if a.len() != 2 || a != p {
            return Err(TensorError::ShapeMismatch {
                op: "patch_set",
                lhs: a.to_vec(),
                rhs: p.to_vec(),
            }
            .into());
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.anchors)[0]
    }

    /// `N x N` similarity matrix; the diagonal holds positive pairs and row
    /// `i` off the diagonal holds anchor `i`'s negatives.
    pub fn similarities(&self, g: &mut Graph, negatives: NegativeSource) -> Result<NodeId> {
        let (anchor, other) = match negatives {
            NegativeSource::Clear => (self.anchors, self.positives),
            NegativeSource::Generated => (self.positives, self.anchors),
        };
        let t = g.transpose(other)?;
        Ok(g.matmul(anchor, t)?)
    }
}

fn check_patch_count(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "contrastive loss needs at least 2 patches, got {n}"
        )));
    }
    Ok(())
}

fn diagonal_indices(n: usize) -> Vec<usize> {
    (0..n).map(|i| i * n + i).collect()
}

fn off_diagonal_indices(n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| i * n + j))
        .collect()
}

/// Split an `N x N` similarity matrix into positives (`N`) and negatives
/// (`N x (N-1)`, row `i` in ascending column order).
fn split_similarities(g: &mut Graph, sims: NodeId) -> Result<(NodeId, NodeId)> {
    let shape = g.shape(sims).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Invalid(format!(
            "similarity matrix must be square, got {shape:?}"
        )));
    }
    let n = shape[0];
    check_patch_count(n)?;
    let flat = g.reshape(sims, &[n * n])?;
    let pos = g.gather(flat, 0, &diagonal_indices(n))?;
    let neg = g.gather(flat, 0, &off_diagonal_indices(n))?;
    let neg = g.reshape(neg, &[n, n - 1])?;
    Ok((pos, neg))
}

/// `sum_i [log(e^{s_ii/tau} + push_i) - s_ii/tau]` where `push_i` is either
/// the plain negative sum or `q (N-1) sum_j w_ij e^{s_ij/tau}`.
fn nce_from_parts(
    g: &mut Graph,
    pos: NodeId,
    neg: NodeId,
    weights: Option<(NodeId, f64)>,
    tau: f64,
) -> Result<NodeId> {
    let n = g.shape(neg)[0];
    let pos_logit = g.scale(pos, 1.0 / tau)?;
    let pos_exp = g.exp(pos_logit)?;
    let neg_logit = g.scale(neg, 1.0 / tau)?;
    let neg_exp = g.exp(neg_logit)?;
    let push = match weights {
        None => g.sum(neg_exp, 1)?,
        Some((w, q)) => {
            let weighted = g.mul(w, neg_exp)?;
            let s = g.sum(weighted, 1)?;
            g.scale(s, q * (n - 1) as f64)?
        }
    };
    let denom = g.add(pos_exp, push)?;
    let log_denom = g.log(denom)?;
    let per_anchor = g.sub(log_denom, pos_logit)?;
    Ok(g.sum_all(per_anchor)?)
}

/// Patchwise InfoNCE over aligned patches.
pub fn patch_nce(
    g: &mut Graph,
    ps: &PatchSet,
    tau: f64,
    negatives: NegativeSource,
) -> Result<NodeId> {
    check_patch_count(ps.len(g))?;
    let sims = ps.similarities(g, negatives)?;
    patch_nce_from_similarities(g, sims, tau)
}

pub fn patch_nce_from_similarities(g: &mut Graph, sims: NodeId, tau: f64) -> Result<NodeId> {
    let (pos, neg) = split_similarities(g, sims)?;
    nce_from_parts(g, pos, neg, None, tau)
}

/// Per-anchor softmax over its negatives of `s/beta` (hard) or
/// `(1 - s)/beta` (easy). Input `N x N`, output `N x (N-1)`.
pub fn monce_weights(g: &mut Graph, sims: NodeId, mode: WeightMode, beta: f64) -> Result<NodeId> {
    let (_, neg) = split_similarities(g, sims)?;
    weights_from_negatives(g, neg, mode, beta)
}

fn weights_from_negatives(
    g: &mut Graph,
    neg: NodeId,
    mode: WeightMode,
    beta: f64,
) -> Result<NodeId> {
    let logits = match mode {
        WeightMode::Hard => g.affine(neg, 1.0 / beta, 0.0)?,
        WeightMode::Easy => g.affine(neg, -1.0 / beta, 1.0 / beta)?,
    };
    Ok(g.softmax(logits, 1)?)
}

/// NCE with negatives reweighted by similarity.
pub fn monce_loss(
    g: &mut Graph,
    ps: &PatchSet,
    tau: f64,
    beta: f64,
    q: f64,
    mode: WeightMode,
    negatives: NegativeSource,
) -> Result<NodeId> {
    check_patch_count(ps.len(g))?;
    let sims = ps.similarities(g, negatives)?;
    monce_from_similarities(g, sims, tau, beta, q, mode)
}

pub fn monce_from_similarities(
    g: &mut Graph,
    sims: NodeId,
    tau: f64,
    beta: f64,
    q: f64,
    mode: WeightMode,
) -> Result<NodeId> {
    let (pos, neg) = split_similarities(g, sims)?;
    let w = weights_from_negatives(g, neg, mode, beta)?;
    nce_from_parts(g, pos, neg, Some((w, q)), tau)
}

/// Semantic contrastive force `(1 - mpa) * sim + mpa * (1 - sim)`.
pub fn sence_force(sim: f64, mpa: f64) -> f64 {
    (1.0 - mpa) * sim + mpa * (1.0 - sim)
}

fn check_mpa(mpa: f64) -> Result<()> {
    if (0.0..=1.0).contains(&mpa) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "semantic score {mpa} outside [0, 1]"
        )))
    }
}

/// Negative weights driven by the semantic force: softmax over `F / beta`.
/// `mpa` is a constant; gradients flow only through the similarities.
pub fn sence_weights(g: &mut Graph, sims: NodeId, mpa: f64, beta: f64) -> Result<NodeId> {
    check_mpa(mpa)?;
    let (_, neg) = split_similarities(g, sims)?;
    sence_weights_from_negatives(g, neg, mpa, beta)
}

fn sence_weights_from_negatives(g: &mut Graph, neg: NodeId, mpa: f64, beta: f64) -> Result<NodeId> {
    // F = (1 - 2 mpa) sim + mpa, folded with the 1/beta scale
    let logits = g.affine(neg, (1.0 - 2.0 * mpa) / beta, mpa / beta)?;
    Ok(g.softmax(logits, 1)?)
}

/// Semantic NCE: negative weights interpolate between the hard and easy
/// regimes according to the pair's semantic score.
pub fn sence_loss(
    g: &mut Graph,
    ps: &PatchSet,
    mpa: f64,
    tau: f64,
    beta: f64,
    q: f64,
    negatives: NegativeSource,
) -> Result<NodeId> {
    check_patch_count(ps.len(g))?;
    let sims = ps.similarities(g, negatives)?;
    sence_from_similarities(g, sims, mpa, tau, beta, q)
}

pub fn sence_from_similarities(
    g: &mut Graph,
    sims: NodeId,
    mpa: f64,
    tau: f64,
    beta: f64,
    q: f64,
) -> Result<NodeId> {
    check_mpa(mpa)?;
    let (pos, neg) = split_similarities(g, sims)?;
    let w = sence_weights_from_negatives(g, neg, mpa, beta)?;
    nce_from_parts(g, pos, neg, Some((w, q)), tau)
}

/// Dispatch to the configured NCE. `semantic` is the pair's mPA or mIoU,
/// required only by the SeNCE variants.
pub fn nce_loss(
    g: &mut Graph,
    ps: &PatchSet,
    cfg: &LossConfig,
    semantic: Option<f64>,
) -> Result<NodeId> {
    match cfg.nce_variant {
        NceVariant::PatchNce => patch_nce(g, ps, cfg.tau, cfg.negatives),
        NceVariant::MoNceHard => monce_loss(
            g,
            ps,
            cfg.tau,
            cfg.beta,
            cfg.q,
            WeightMode::Hard,
            cfg.negatives,
        ),
        NceVariant::MoNceEasy => monce_loss(
            g,
            ps,
            cfg.tau,
            cfg.beta,
            cfg.q,
            WeightMode::Easy,
            cfg.negatives,
        ),
        NceVariant::SenceMpa | NceVariant::SenceMiou => {
            let s = semantic.ok_or_else(|| {
                Error::Invalid(format!("{} needs a semantic score", cfg.nce_variant.name()))
            })?;
            sence_loss(g, ps, s, cfg.tau, cfg.beta, cfg.q, cfg.negatives)
        }
    }
}

/// Geometric regularizer selected by the config, or `None` when disabled.
pub fn geom_loss(
    g: &mut Graph,
    cfg: &LossConfig,
    dx: NodeId,
    dy: NodeId,
    dz: NodeId,
) -> Result<Option<NodeId>> {
    Ok(match cfg.geom_variant {
        GeomVariant::None => None,
        GeomVariant::Tps => Some(tps_loss(g, dx, dy, dz)?),
        GeomVariant::Ptl => Some(ptl_loss(g, dx, dy, dz)?),
    })
}

/// Terms of the generator objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub gan: Option<NodeId>,
    pub nce: Option<NodeId>,
    pub geom: Option<NodeId>,
}

/// `lambda1 * L_GAN + lambda2 * L_NCE + lambda3 * L_geom`; the geometric
/// term is absent entirely when `geom_variant` is `None`.
pub fn composite_objective(g: &mut Graph, parts: &LossParts, cfg: &LossConfig) -> Result<NodeId> {
    let gan = parts
        .gan
        .ok_or_else(|| Error::Invalid("objective is missing the adversarial term".into()))?;
    let nce = parts
        .nce
        .ok_or_else(|| Error::Invalid("objective is missing the contrastive term".into()))?;
    let a = g.scale(gan, cfg.lambda1)?;
    let b = g.scale(nce, cfg.lambda2)?;
    let mut total = g.add(a, b)?;
    if cfg.geom_variant != GeomVariant::None {
        let geom = parts.geom.ok_or_else(|| {
            Error::Invalid(format!(
                "objective is missing the {} term",
                cfg.geom_variant.name()
            ))
        })?;
        let c = g.scale(geom, cfg.lambda3)?;
        total = g.add(total, c)?;
    }
    Ok(total)
}

/// Convenience: build a [`PatchSet`] from plain matrices on a fresh graph.
pub fn patch_set_from(
    g: &mut Graph,
    anchors: Tensor,
    positives: Tensor,
    track: bool,
) -> Result<PatchSet> {
    let a = g.leaf(anchors, track)?;
    let p = g.leaf(positives, track)?;
    PatchSet::new(g, a, p)
}

#[cfg(test)]
mod tests;
