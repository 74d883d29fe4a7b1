//! Supervision: cosine-scaled logits with a learnable scale, decoupled
//! anchor losses (shared or separate anchors), cosine-distance knowledge
//! distillation, and the cross-entropy / BCE / CosFace baselines.
//!
//! The anchored losses compare each logit against a fixed reference `k`
//! instead of against the other logits:
//!
//! ```text
//! l_pos = -log( e^{z_t} / (e^{z_t} + e^{k+}) ) = softplus(k+ - z_t)
//! l_neg = -log( e^{k-} / (sum_{j!=t} e^{z_j} + e^{k-}) )
//!       = logsumexp([z_j (j!=t), k-]) - k-
//! ```
//!
//! Both are computed in log space so they survive scaled cosines up to
//! `|z| ~ 30`. With a single class the negative sum is empty and `l_neg`
//! is exactly zero.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ClassId;
use crate::error::{DrlError, Result};
use crate::graph::{Graph, Val};
use crate::param::Param;
use crate::rng::rng_for;
use crate::tensor::Tensor;

const SCALE_INIT: f64 = 10.0;

/// Cosine classifier head: one weight column per current-stage class and a
/// learnable scale kept positive by parameterizing `s = exp(rho)`.
#[derive(Debug)]
pub struct LogitHead {
    pub w: Param,
    pub rho: Param,
    pub classes: Vec<ClassId>,
}

impl LogitHead {
    pub fn new(name_prefix: &str, embed_dim: usize, classes: Vec<ClassId>, seed: u64) -> Self {
        let mut rng: ChaCha8Rng = rng_for(seed, "head-init", 0);
        let w = Param::glorot(format!("{name_prefix}.w"), embed_dim, classes.len(), &mut rng);
        let rho = Param::new(
            format!("{name_prefix}.rho"),
            Tensor::scalar(SCALE_INIT.ln()),
            false,
        );
        LogitHead { w, rho, classes }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.rho.clone()]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn scale(&self) -> f64 {
        self.rho.value_clone().item().exp()
    }

    fn check_nondegenerate(&self, feature: &Tensor) -> Result<()> {
        if feature.l2_norm() == 0.0 {
            return Err(DrlError::DegenerateInput {
                op: "compute_logits",
                detail: "zero-norm feature".into(),
            });
        }
        let w = self.w.value_clone();
        let (d, c) = (w.rows(), w.cols());
        for j in 0..c {
            let norm2: f64 = (0..d).map(|i| w.data()[i * c + j].powi(2)).sum();
            if norm2 == 0.0 {
                return Err(DrlError::DegenerateInput {
                    op: "compute_logits",
                    detail: format!("zero-norm weight column {j}"),
                });
            }
        }
        Ok(())
    }
}

/// Graph handles produced by the head: scaled logits, raw cosines, and the
/// scale itself (CosFace consumes the cosines directly).
pub struct HeadOutputs {
    pub z: Val,
    pub cos: Val,
    pub s: Val,
}

/// `z_i = s * cos(w_i, feature)` on the tape.
pub fn head_graph(g: &mut Graph, feature: Val, head: &LogitHead) -> Result<HeadOutputs> {
    head.check_nondegenerate(g.value(feature))?;
    let d = g.value(feature).numel();
    let w = g.param(&head.w);
    let wt = g.transpose(w)?;
    let fcol = g.reshape(feature, vec![d, 1])?;
    let dots = g.matmul(wt, fcol)?;
    let dots = g.reshape(dots, vec![head.num_classes()])?;

    let w_sq = g.mul(w, w)?;
    let w_norm2 = g.col_sums(w_sq)?;
    let w_norm = g.sqrt(w_norm2)?;
    let f_sq = g.mul(feature, feature)?;
    let f_norm2 = g.sum(f_sq)?;
    let f_norm = g.sqrt(f_norm2)?;

    let denom = g.bscale(w_norm, f_norm)?;
    let cos = g.div(dots, denom)?;
    let rho = g.param(&head.rho);
    let s = g.exp(rho)?;
    let z = g.bscale(cos, s)?;
    Ok(HeadOutputs { z, cos, s })
}

/// Plain-value logits for inspection and tests.
pub fn compute_logits(feature: &Tensor, head: &LogitHead) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(feature.clone());
    let out = head_graph(&mut g, f, head)?;
    Ok(g.value(out.z).clone())
}

/// Anchor configuration. `k` is the shared anchor; setting `k_plus` /
/// `k_minus` switches to the separate-anchor margin variant, which must
/// keep `k_plus - k_minus >= 0`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DasConfig {
    pub k: f64,
    pub k_plus: Option<f64>,
    pub k_minus: Option<f64>,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
}

impl Default for DasConfig {
    fn default() -> Self {
        DasConfig {
            k: 1.0,
            k_plus: None,
            k_minus: None,
            lambda_pos: 3.0,
            lambda_neg: 1.0,
        }
    }
}

impl DasConfig {
    /// Resolved `(k_plus, k_minus)` pair.
    pub fn anchors(&self) -> Result<(f64, f64)> {
        let kp = self.k_plus.unwrap_or(self.k);
        let km = self.k_minus.unwrap_or(self.k);
        if kp - km < 0.0 {
            return Err(DrlError::Config(format!(
                "anchor margin k_plus - k_minus must be nonnegative, got {} - {}",
                kp, km
            )));
        }
        Ok((kp, km))
    }
}

/// Positive and negative anchored terms for a single-label target.
pub fn das_terms_graph(
    g: &mut Graph,
    z: Val,
    target: usize,
    k_plus: f64,
    k_minus: f64,
) -> Result<(Val, Val)> {
    let n = g.value(z).numel();
    if target >= n {
        return Err(DrlError::Config(format!(
            "target {target} out of range for {n} classes"
        )));
    }
    let zt = g.elem(z, target)?;
    let neg_zt = g.scale(zt, -1.0)?;
    let arg = g.add_const(neg_zt, k_plus)?;
    let l_pos = g.softplus(arg)?;

    let l_neg = if n == 1 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let rest = g.drop_elem(z, target)?;
        let anchor = g.constant(Tensor::scalar(k_minus));
        let cat = g.concat(&[rest, anchor])?;
        let lse = g.logsumexp(cat)?;
        g.add_const(lse, -k_minus)?
    };
    Ok((l_pos, l_neg))
}

/// Multi-label positive term: `-sum_i y_i log p_i^pos`, one anchored
/// sigmoid per labelled class. The negative term treats every unlabelled
/// class as a negative.
pub fn das_terms_multi_graph(
    g: &mut Graph,
    z: Val,
    labels: &[bool],
    k_plus: f64,
    k_minus: f64,
) -> Result<(Val, Val)> {
    let n = g.value(z).numel();
    if labels.len() != n {
        return Err(DrlError::Config(format!(
            "label mask length {} does not match {} classes",
            labels.len(),
            n
        )));
    }
    let neg_z = g.scale(z, -1.0)?;
    let args = g.add_const(neg_z, k_plus)?;
    let sp = g.softplus(args)?;
    let mask = g.constant(Tensor::vector(
        labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let masked = g.mul(sp, mask)?;
    let l_pos = g.sum(masked)?;

    let negatives: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    let l_neg = if negatives.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut parts = Vec::with_capacity(negatives.len() + 1);
        for &i in &negatives {
            parts.push(g.elem(z, i)?);
        }
        parts.push(g.constant(Tensor::scalar(k_minus)));
        let cat = g.concat(&parts)?;
        let lse = g.logsumexp(cat)?;
        g.add_const(lse, -k_minus)?
    };
    Ok((l_pos, l_neg))
}

/// Plain-value anchored terms.
pub fn das_loss(z: &Tensor, target: usize, cfg: &DasConfig) -> Result<(f64, f64)> {
    let (kp, km) = cfg.anchors()?;
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let (lp, ln) = das_terms_graph(&mut g, zv, target, kp, km)?;
    Ok((g.value(lp).item(), g.value(ln).item()))
}

/// `1 - cos(f_new, f_ptm)`. The reference feature enters as a constant, so
/// gradient flows only into `f_new`.
pub fn kd_graph(g: &mut Graph, f_new: Val, f_ptm: &Tensor) -> Result<Val> {
    let ptm_norm = f_ptm.l2_norm();
    if ptm_norm == 0.0 || g.value(f_new).l2_norm() == 0.0 {
        return Err(DrlError::DegenerateInput {
            op: "kd_loss",
            detail: "zero-norm feature".into(),
        });
    }
    let ptm = g.constant(f_ptm.clone());
    let prod = g.mul(f_new, ptm)?;
    let dot = g.sum(prod)?;
    let f_sq = g.mul(f_new, f_new)?;
    let f_norm2 = g.sum(f_sq)?;
    let f_norm = g.sqrt(f_norm2)?;
    let denom = g.scale(f_norm, ptm_norm)?;
    let cos = g.div(dot, denom)?;
    let neg = g.scale(cos, -1.0)?;
    g.add_const(neg, 1.0)
}

pub fn kd_loss(f_new: &Tensor, f_ptm: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(f_new.clone());
    let l = kd_graph(&mut g, f, f_ptm)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Das,
    Ce,
    Bce,
    Cosface,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::Das => "das",
            LossKind::Ce => "ce",
            LossKind::Bce => "bce",
            LossKind::Cosface => "cosface",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for LossKind {
    type Err = DrlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "das" => Ok(LossKind::Das),
            "ce" => Ok(LossKind::Ce),
            "bce" => Ok(LossKind::Bce),
            "cosface" => Ok(LossKind::Cosface),
            other => Err(DrlError::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Cross-entropy on the tape: `logsumexp(z) - z_target`.
pub fn ce_graph(g: &mut Graph, z: Val, target: usize) -> Result<Val> {
    let lse = g.logsumexp(z)?;
    let zt = g.elem(z, target)?;
    g.sub(lse, zt)
}

/// Mean over classes of per-class sigmoid cross-entropy against the
/// one-hot target.
pub fn bce_graph(g: &mut Graph, z: Val, target: usize) -> Result<Val> {
    let n = g.value(z).numel();
    let neg_z = g.scale(z, -1.0)?;
    let sp_pos = g.softplus(neg_z)?; // -log sigmoid(z_i)
    let sp_neg = g.softplus(z)?; // -log (1 - sigmoid(z_i))
    let mut y = vec![0.0; n];
    y[target] = 1.0;
    let yv = g.constant(Tensor::vector(y.clone()));
    let inv = g.constant(Tensor::vector(y.iter().map(|v| 1.0 - v).collect()));
    let pos_part = g.mul(yv, sp_pos)?;
    let neg_part = g.mul(inv, sp_neg)?;
    let per_class = g.add(pos_part, neg_part)?;
    g.mean(per_class)
}

/// Cross-entropy over `s * (cos_i - m * [i == target])`.
pub fn cosface_graph(
    g: &mut Graph,
    cos: Val,
    s: Val,
    target: usize,
    margin: f64,
) -> Result<Val> {
    let n = g.value(cos).numel();
    let mut mvec = vec![0.0; n];
    mvec[target] = margin;
    let m = g.constant(Tensor::vector(mvec));
    let adjusted = g.sub(cos, m)?;
    let z = g.bscale(adjusted, s)?;
    ce_graph(g, z, target)
}

/// Input to [`baseline_loss`]: CE and BCE consume logits; CosFace consumes
/// raw cosines plus the scale.
pub enum BaselineInput<'a> {
    Logits(&'a Tensor),
    Cosines { cos: &'a Tensor, s: f64 },
}

/// Plain-value baseline losses.
pub fn baseline_loss(kind: LossKind, input: BaselineInput<'_>, target: usize) -> Result<f64> {
    let mut g = Graph::new();
    match (kind, input) {
        (LossKind::Ce, BaselineInput::Logits(z)) => {
            let zv = g.constant(z.clone());
            let l = ce_graph(&mut g, zv, target)?;
            Ok(g.value(l).item())
        }
        (LossKind::Bce, BaselineInput::Logits(z)) => {
            let zv = g.constant(z.clone());
            let l = bce_graph(&mut g, zv, target)?;
            Ok(g.value(l).item())
        }
        (LossKind::Cosface, BaselineInput::Cosines { cos, s }) => {
            let cv = g.constant(cos.clone());
            let sv = g.constant(Tensor::scalar(s));
            let l = cosface_graph(&mut g, cv, sv, target, COSFACE_MARGIN_DEFAULT)?;
            Ok(g.value(l).item())
        }
        (LossKind::Das, _) => Err(DrlError::Config(
            "das is not a baseline loss; use das_loss".into(),
        )),
        _ => Err(DrlError::Config(
            "baseline input kind does not match the requested loss".into(),
        )),
    }
}

pub const COSFACE_MARGIN_DEFAULT: f64 = 0.35;

/// Loss weighting and kind for one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionConfig {
    pub kind: LossKind,
    pub das: DasConfig,
    /// Distillation weight.
    pub alpha: f64,
    pub cosface_margin: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            kind: LossKind::Das,
            das: DasConfig::default(),
            alpha: 0.5,
            cosface_margin: COSFACE_MARGIN_DEFAULT,
        }
    }
}

/// Per-batch loss scalars. `total` is always composed in one fixed order:
/// `(lambda_pos * l_pos) + (lambda_neg * l_neg) + (alpha * l_kd)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_kd: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
}

impl LossBreakdown {
    pub fn compose(
        l_pos: f64,
        l_neg: f64,
        l_kd: f64,
        lambda_pos: f64,
        lambda_neg: f64,
        alpha: f64,
    ) -> Self {
        let total = (lambda_pos * l_pos) + (lambda_neg * l_neg) + (alpha * l_kd);
        LossBreakdown {
            l_pos,
            l_neg,
            l_kd,
            total,
            alpha,
            lambda_pos,
            lambda_neg,
        }
    }
}

/// Tape handles for one sample's loss terms.
pub struct SampleLoss {
    pub total: Val,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_kd: f64,
}

/// Builds the configured loss for one sample on the tape. For the anchored
/// loss the positive/negative split is native; for the baselines the whole
/// classification term is carried in the `l_pos` slot with weight one.
pub fn sample_loss_graph(
    g: &mut Graph,
    feature: Val,
    f_ptm: &Tensor,
    head: &LogitHead,
    target: usize,
    sup: &SupervisionConfig,
) -> Result<SampleLoss> {
    let outs = head_graph(g, feature, head)?;
    let (class_term, weights): (Val, (f64, f64)) = match sup.kind {
        LossKind::Das => {
            let (kp, km) = sup.das.anchors()?;
            let (lp, ln) = das_terms_graph(g, outs.z, target, kp, km)?;
            let lp_w = g.scale(lp, sup.das.lambda_pos)?;
            let ln_w = g.scale(ln, sup.das.lambda_neg)?;
            let das = g.add(lp_w, ln_w)?;
            let kd = kd_graph(g, feature, f_ptm)?;
            let kd_w = g.scale(kd, sup.alpha)?;
            let total = g.add(das, kd_w)?;
            return Ok(SampleLoss {
                total,
                l_pos: g.value(lp).item(),
                l_neg: g.value(ln).item(),
                l_kd: g.value(kd).item(),
            });
        }
        LossKind::Ce => (ce_graph(g, outs.z, target)?, (1.0, 0.0)),
        LossKind::Bce => (bce_graph(g, outs.z, target)?, (1.0, 0.0)),
        LossKind::Cosface => (
            cosface_graph(g, outs.cos, outs.s, target, sup.cosface_margin)?,
            (1.0, 0.0),
        ),
    };
    let _ = weights;
    let kd = kd_graph(g, feature, f_ptm)?;
    let kd_w = g.scale(kd, sup.alpha)?;
    let total = g.add(class_term, kd_w)?;
    Ok(SampleLoss {
        total,
        l_pos: g.value(class_term).item(),
        l_neg: 0.0,
        l_kd: g.value(kd).item(),
    })
}

/// One item of a feature-level batch.
pub struct BatchItem {
    pub feature: Tensor,
    pub ptm_feature: Tensor,
    pub target: usize,
}

/// Batch-mean total loss with its breakdown. Errors on an empty batch.
pub fn total_loss(batch: &[BatchItem], head: &LogitHead, sup: &SupervisionConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(DrlError::Config("total_loss on an empty batch".into()));
    }
    let (mut sp, mut sn, mut sk) = (0.0, 0.0, 0.0);
    for item in batch {
        let mut g = Graph::new();
        let f = g.constant(item.feature.clone());
        let sample = sample_loss_graph(&mut g, f, &item.ptm_feature, head, item.target, sup)?;
        sp += sample.l_pos;
        sn += sample.l_neg;
        sk += sample.l_kd;
    }
    let n = batch.len() as f64;
    let (lp, ln) = effective_lambdas(sup);
    Ok(LossBreakdown::compose(
        sp / n,
        sn / n,
        sk / n,
        lp,
        ln,
        sup.alpha,
    ))
}

/// The weights actually applied to the `l_pos` / `l_neg` slots: the
/// configured anchors for the anchored loss, `(1, 0)` for baselines.
pub fn effective_lambdas(sup: &SupervisionConfig) -> (f64, f64) {
    match sup.kind {
        LossKind::Das => (sup.das.lambda_pos, sup.das.lambda_neg),
        _ => (1.0, 0.0),
    }
}
