//! Training objectives.
//!
//! Every function here appends nodes to a [`Graph`]; the resulting
//! [`Objective`] keeps one handle per named term so that a step can report
//! the values and differentiate the weighted total in one pass.
//!
//! Norm conventions: the L1 term is a per-element mean absolute difference;
//! pixel L2 terms are per-sample root-mean-square differences averaged over
//! the batch; feature terms are per-sample Euclidean norms divided by the
//! per-sample volume `V_i` of the encoder layer, averaged over the batch.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::{EncoderOutput, ModelVariant, Scene, SeparationVars, SeparatorModel};

/// Clamp applied to discriminator scores before taking logarithms.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

/// Named term values and their weighted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// `Σ weight·value`, recomputed from the terms.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    /// First non-finite term, or a non-finite total.
    pub fn check_finite(&self) -> Result<()> {
        if let Some(t) = self.terms.iter().find(|t| !t.value.is_finite()) {
            return Err(Error::NonFiniteLoss {
                term: t.name.into(),
            });
        }
        if !self.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: String::from("total"),
            });
        }
        Ok(())
    }
}

/// Weighted sum of named scalar nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    terms: Vec<(&'static str, Var, f64)>,
    total: Var,
}

impl Objective {
    pub fn new(g: &mut Graph, terms: Vec<(&'static str, Var, f64)>) -> Result<Self> {
        let scaled = terms
            .iter()
            .map(|&(_, v, w)| if w == 1.0 { v } else { g.scale(v, w) })
            .collect::<Vec<_>>();
        let total = g.sum_all(&scaled)?;
        Ok(Self { terms, total })
    }

    pub fn total(&self) -> Var {
        self.total
    }

    pub fn term(&self, name: &str) -> Option<Var> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1)
    }

    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            terms: self
                .terms
                .iter()
                .map(|&(name, v, weight)| LossTerm {
                    name,
                    value: g.scalar(v),
                    weight,
                })
                .collect(),
            total: g.scalar(self.total),
        }
    }
}

/// `−mean ln(real) − mean ln(1 − fake)`.
pub fn gan_d_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let a = g.mean_log(real, false, SCORE_EPS);
    let b = g.mean_log(fake, true, SCORE_EPS);
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Non-saturating generator loss `−mean ln(fake)`.
pub fn gan_g_loss(g: &mut Graph, fake: Var) -> Var {
    let a = g.mean_log(fake, false, SCORE_EPS);
    g.scale(a, -1.0)
}

/// Mean absolute difference.
pub fn l1_term(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(g.mean_abs(d))
}

/// Per-sample root-mean-square difference, averaged over the batch.
pub fn l2_term(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let per = g.value(d).numel() / g.value(d).batch();
    let norms = g.sample_norms(d);
    let m = g.mean(norms);
    Ok(g.scale(m, 1.0 / libm::sqrt(per as f64)))
}

/// Per-sample `‖a − b‖₂ / V` with `V` the per-sample element count,
/// averaged over the batch.
pub fn feature_term(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let per = g.value(d).numel() / g.value(d).batch();
    let norms = g.sample_norms(d);
    let m = g.mean(norms);
    Ok(g.scale(m, 1.0 / per as f64))
}

/// Content loss over the five encoder layers. `y_enc` holds the features of
/// the observed image; `t`, `r`, `t_hat` and `r_hat` are encoded here.
#[allow(clippy::too_many_arguments)]
pub fn content_loss(
    g: &mut Graph,
    model: &SeparatorModel,
    y_enc: &EncoderOutput,
    t: Var,
    r: Var,
    t_hat: Var,
    r_hat: Var,
    w_y: Var,
) -> Result<Var> {
    let ft = model.encode(g, t)?;
    let fr = model.encode(g, r)?;
    let fth = model.encode(g, t_hat)?;
    let frh = model.encode(g, r_hat)?;
    let w_r = g.one_minus(w_y);
    let mut terms = Vec::with_capacity(15);
    for i in 0..5 {
        let wt = g.scale_samples(fth.features[i], w_y)?;
        let wr = g.scale_samples(frh.features[i], w_r)?;
        let mix = g.add(wt, wr)?;
        terms.push(feature_term(g, y_enc.features[i], mix)?);
        terms.push(feature_term(g, ft.features[i], fth.features[i])?);
        terms.push(feature_term(g, fr.features[i], frh.features[i])?);
    }
    g.sum_all(&terms)
}

fn require_supervised(model: &SeparatorModel) -> Result<()> {
    if model.variant() == ModelVariant::Mask {
        return Err(Error::WrongVariant {
            what: "supervised loss",
            variant: model.variant().name(),
        });
    }
    Ok(())
}

fn require_mask(model: &SeparatorModel) -> Result<()> {
    if model.variant() != ModelVariant::Mask {
        return Err(Error::WrongVariant {
            what: "weak loss",
            variant: model.variant().name(),
        });
    }
    Ok(())
}

/// Generator objective for B1/B2/B3 with conditional discriminators.
///
/// Terms: `adv_t`, `adv_r`, `l1_t`, `l1_r`, then `l1_y` (B2, B3) and
/// `content` (B3).
pub fn loss_supervised(
    g: &mut Graph,
    model: &SeparatorModel,
    out: &SeparationVars,
    y: Var,
    t: Var,
    r: Var,
    weights: LossWeights,
) -> Result<Objective> {
    require_supervised(model)?;
    let st = model.discriminate(g, Scene::T, out.t_hat, Some(y))?;
    let sr = model.discriminate(g, Scene::R, out.r_hat, Some(y))?;
    let mut terms = Vec::with_capacity(6);
    terms.push(("adv_t", gan_g_loss(g, st), 1.0));
    terms.push(("adv_r", gan_g_loss(g, sr), 1.0));
    terms.push(("l1_t", l1_term(g, t, out.t_hat)?, weights.lambda1));
    terms.push(("l1_r", l1_term(g, r, out.r_hat)?, weights.lambda1));
    if let Some(y_hat) = out.y_hat {
        terms.push(("l1_y", l1_term(g, y, y_hat)?, weights.lambda1));
    }
    if let Some(w_y) = out.w_y {
        let c = content_loss(g, model, &out.encoder, t, r, out.t_hat, out.r_hat, w_y)?;
        terms.push(("content", c, weights.lambda2));
    }
    Objective::new(g, terms)
}

/// Discriminator objective for B1/B2/B3: real pairs `(y, t)`, `(y, r)`
/// against fakes `(y, t_hat)`, `(y, r_hat)`. Terms `d_t`, `d_r`.
pub fn loss_discriminator_supervised(
    g: &mut Graph,
    model: &SeparatorModel,
    y: Var,
    t: Var,
    r: Var,
    t_hat: Var,
    r_hat: Var,
) -> Result<Objective> {
    require_supervised(model)?;
    let terms = [(Scene::T, "d_t", t, t_hat), (Scene::R, "d_r", r, r_hat)]
        .into_iter()
        .map(|(scene, name, real, fake)| {
            let sr = model.discriminate(g, scene, real, Some(y))?;
            let sf = model.discriminate(g, scene, fake, Some(y))?;
            Ok((name, gan_d_loss(g, sr, sf)?, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Objective::new(g, terms)
}

/// Generator objective for the mask variant. Only `y` and the model's
/// outputs enter; no paired ground truth exists.
///
/// Terms: `adv_t`, `adv_r`, `l2_y`, `l2_mt`, `l2_mr` (λ1), `feat_mt`,
/// `feat_mr` (λ2).
pub fn loss_weak(
    g: &mut Graph,
    model: &SeparatorModel,
    out: &SeparationVars,
    y: Var,
    weights: LossWeights,
) -> Result<Objective> {
    require_mask(model)?;
    let (Some(y_hat), Some(mask), Some(g_mt), Some(g_mr)) =
        (out.y_hat, out.mask, out.g_mt, out.g_mr)
    else {
        return Err(Error::WrongVariant {
            what: "mask outputs",
            variant: model.variant().name(),
        });
    };
    let st = model.discriminate(g, Scene::T, out.t_hat, None)?;
    let sr = model.discriminate(g, Scene::R, out.r_hat, None)?;
    let inv = g.one_minus(mask);
    let my = g.mul_mask(y, mask)?;
    let iy = g.mul_mask(y, inv)?;

    let f_my = model.encode(g, my)?;
    let f_mt = model.encode(g, g_mt)?;
    let f_iy = model.encode(g, iy)?;
    let f_mr = model.encode(g, g_mr)?;
    let mut feat_mt = Vec::with_capacity(5);
    let mut feat_mr = Vec::with_capacity(5);
    for i in 0..5 {
        feat_mt.push(feature_term(g, f_my.features[i], f_mt.features[i])?);
        feat_mr.push(feature_term(g, f_iy.features[i], f_mr.features[i])?);
    }
    let feat_mt = g.sum_all(&feat_mt)?;
    let feat_mr = g.sum_all(&feat_mr)?;

    let terms = alloc::vec![
        ("adv_t", gan_g_loss(g, st), 1.0),
        ("adv_r", gan_g_loss(g, sr), 1.0),
        ("l2_y", l2_term(g, y, y_hat)?, weights.lambda1),
        ("l2_mt", l2_term(g, my, g_mt)?, weights.lambda1),
        ("l2_mr", l2_term(g, iy, g_mr)?, weights.lambda1),
        ("feat_mt", feat_mt, weights.lambda2),
        ("feat_mr", feat_mr, weights.lambda2),
    ];
    Objective::new(g, terms)
}

/// Discriminator objective for the mask variant: unconditional, with
/// category images `t_real`, `r_real` as the real side. Terms `d_t`, `d_r`.
pub fn loss_discriminator_weak(
    g: &mut Graph,
    model: &SeparatorModel,
    t_real: Var,
    r_real: Var,
    t_hat: Var,
    r_hat: Var,
) -> Result<Objective> {
    require_mask(model)?;
    let terms = [
        (Scene::T, "d_t", t_real, t_hat),
        (Scene::R, "d_r", r_real, r_hat),
    ]
    .into_iter()
    .map(|(scene, name, real, fake)| {
        let sr = model.discriminate(g, scene, real, None)?;
        let sf = model.discriminate(g, scene, fake, None)?;
        Ok((name, gan_d_loss(g, sr, sf)?, 1.0))
    })
    .collect::<Result<Vec<_>>>()?;
    Objective::new(g, terms)
}
