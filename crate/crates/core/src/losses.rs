//! Training objectives. All reductions are means.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pseudo::PseudoLabelMap;
use crate::sam::{BoundSam, SamModule};
use crate::segnet::{BoundParams, SegNet};
use crate::tensor::Tensor;

pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Which module output the logits are pulled toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttForm {
    /// `‖z − z″‖₁`
    ZVsSkip,
    /// `‖z − z′‖₁`
    ZVsAttended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttDomains {
    Both,
    TargetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttMetric {
    L1,
    Kl,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub form: AttForm,
    pub domains: AttDomains,
    pub metric: AttMetric,
    pub lambda: f64,
}

impl LossConfig {
    /// `z`-vs-`z″` on both domains.
    pub fn skip_profile() -> Self {
        Self {
            form: AttForm::ZVsSkip,
            domains: AttDomains::Both,
            metric: AttMetric::L1,
            lambda: DEFAULT_LAMBDA,
        }
    }

    /// `z`-vs-`z′` on the target domain only.
    pub fn target_profile() -> Self {
        Self {
            form: AttForm::ZVsAttended,
            domains: AttDomains::TargetOnly,
            metric: AttMetric::L1,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::skip_profile()
    }
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $kw),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: {})"),
                        s,
                        [$($kw),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(AttForm { ZVsSkip => "z-zpp", ZVsAttended => "z-zp" });
keyword_enum!(AttDomains { Both => "both", TargetOnly => "target" });
keyword_enum!(AttMetric { L1 => "l1", Kl => "kl", Cosine => "cosine" });

/// Mean cross-entropy of `C×H×W` probabilities against dense labels.
pub fn ce_source(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    masked_ce(g, probs, &labels)
}

/// Mean cross-entropy over pseudo-labelled pixels; zero when none are labelled.
pub fn ce_target(g: &mut Graph, probs: Var, pseudo: &PseudoLabelMap) -> Result<Var> {
    masked_ce(g, probs, &pseudo.as_options())
}

fn masked_ce(g: &mut Graph, probs: Var, labels: &[Option<usize>]) -> Result<Var> {
    let shape = g.value(probs).shape();
    if shape.len() != 3 || shape[1] * shape[2] != labels.len() {
        return Err(Error::Dimension(format!(
            "cross-entropy: probabilities {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let logp = g.log(probs, LOG_EPS);
    let picked = g.pick_mean(logp, labels)?;
    Ok(g.mul_scalar(picked, -1.0))
}

/// Distance between flattened logits `z` and a detached reference of the
/// same `hw×C` shape.
pub fn att_loss(g: &mut Graph, z: Var, reference: Var, metric: AttMetric) -> Result<Var> {
    let (sz, sr) = (g.value(z).shape(), g.value(reference).shape());
    if sz != sr || sz.len() != 2 {
        return Err(Error::Dimension(format!(
            "att_loss: shapes {sz:?} and {sr:?}"
        )));
    }
    match metric {
        AttMetric::L1 => {
            let d = g.sub(z, reference)?;
            Ok(g.abs_mean(d))
        }
        AttMetric::Kl => {
            let q = g.softmax(reference, 1)?;
            let log_q = g.log(q, LOG_EPS);
            let p = g.softmax(z, 1)?;
            let log_p = g.log(p, LOG_EPS);
            let diff = g.sub(log_q, log_p)?;
            let terms = g.mul(q, diff)?;
            let rows = g.row_sum(terms)?;
            Ok(g.mean(rows))
        }
        AttMetric::Cosine => {
            let prod = g.mul(z, reference)?;
            let dots = g.row_sum(prod)?;
            let nz = g.row_l2_norm(z)?;
            let nr = g.row_l2_norm(reference)?;
            let denom = g.mul(nz, nr)?;
            let denom = g.add_scalar(denom, LOG_EPS);
            let cos = g.div(dots, denom)?;
            let m = g.mean(cos);
            let neg = g.mul_scalar(m, -1.0);
            Ok(g.add_scalar(neg, 1.0))
        }
    }
}

/// `C×h×w` logits to `hw×C`, inside the graph.
pub fn flatten_logits(g: &mut Graph, z: Var) -> Result<Var> {
    let [c, h, w] = g.value(z).dims3()?;
    let r = g.reshape(z, &[c, h * w])?;
    g.transpose(r)
}

/// Self-attention loss for one image: the frozen module is applied to `z`,
/// its output detached, and `z` pulled toward it.
pub fn sam_att_loss(
    g: &mut Graph,
    sam: &SamModule,
    bound: &BoundSam,
    z: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let flat = flatten_logits(g, z)?;
    let out = sam.attend(g, bound, flat)?;
    let target = match cfg.form {
        AttForm::ZVsSkip => out.skip,
        AttForm::ZVsAttended => out.attended,
    };
    let reference = g.detach(target);
    att_loss(g, flat, reference, cfg.metric)
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub seg_source: Var,
    pub seg_target: Option<Var>,
    pub att_source: Option<Var>,
    pub att_target: Option<Var>,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossValues {
            total: g.value(self.total).item(),
            seg_source: g.value(self.seg_source).item(),
            seg_target: v(self.seg_target),
            att: v(self.att_source) + v(self.att_target),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub seg_source: f64,
    pub seg_target: f64,
    /// Unweighted sum of the self-attention terms.
    pub att: f64,
}

pub struct SourceBatch<'a> {
    pub image: &'a Tensor,
    pub labels: &'a [usize],
}

pub struct TargetBatch<'a> {
    pub image: &'a Tensor,
    pub pseudo: &'a PseudoLabelMap,
}

/// Self-attention guidance for [`total_loss`].
pub struct AttGuide<'a> {
    pub sam: &'a SamModule,
    pub bound: &'a BoundSam,
    pub cfg: &'a LossConfig,
}

/// Assembles `L_seg^S [+ L_seg^T] [+ λ L_att^S] [+ λ L_att^T]`.
pub fn total_loss(
    g: &mut Graph,
    net: &SegNet,
    params: &BoundParams,
    source: &SourceBatch<'_>,
    target: Option<&TargetBatch<'_>>,
    guide: Option<&AttGuide<'_>>,
) -> Result<LossTerms> {
    let (h, w) = (source.image.shape()[1], source.image.shape()[2]);
    let xs = g.constant(source.image.clone());
    let zs = net.forward_logits(g, params, xs)?;
    let ps = net.probs_from_logits(g, zs, h, w)?;
    let seg_source = ce_source(g, ps, source.labels)?;
    let mut total = seg_source;

    let mut zt = None;
    let mut seg_target = None;
    if let Some(t) = target {
        let (ht, wt) = (t.image.shape()[1], t.image.shape()[2]);
        let x = g.constant(t.image.clone());
        let z = net.forward_logits(g, params, x)?;
        let p = net.probs_from_logits(g, z, ht, wt)?;
        let l = ce_target(g, p, t.pseudo)?;
        total = g.add(total, l)?;
        zt = Some(z);
        seg_target = Some(l);
    }

    let (mut att_source, mut att_target) = (None, None);
    if let Some(guide) = guide {
        guide.cfg.validate()?;
        if guide.cfg.domains == AttDomains::Both {
            let l = sam_att_loss(g, guide.sam, guide.bound, zs, guide.cfg)?;
            let scaled = g.mul_scalar(l, guide.cfg.lambda);
            total = g.add(total, scaled)?;
            att_source = Some(l);
        }
        if let Some(z) = zt {
            let l = sam_att_loss(g, guide.sam, guide.bound, z, guide.cfg)?;
            let scaled = g.mul_scalar(l, guide.cfg.lambda);
            total = g.add(total, scaled)?;
            att_target = Some(l);
        }
    }

    Ok(LossTerms {
        total,
        seg_source,
        seg_target,
        att_source,
        att_target,
    })
}
