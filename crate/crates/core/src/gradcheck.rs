//! Central finite-difference validation of analytic parameter gradients.
//!
//! Checks run on a reduced model (widths ÷8, 32×32 inputs, batch 2) with
//! batch statistics in every batch-norm layer. The training initialization
//! (std 0.02) shrinks activations by roughly a factor five per thin layer,
//! so deep features sit near 1e-5 and any finite step is a large relative
//! perturbation; the checked model therefore redraws its convolution
//! weights with the variance-preserving std `sqrt(2 / fan_in)`. The relative error of a
//! coordinate is `|a − n| / max(|a|, |n|, floor)` where `a` is analytic,
//! `n` numeric and `floor = 1e-6·max(1, |loss|)` absorbs rounding noise on
//! coordinates whose gradient is essentially zero.
//!
//! Rectifier and absolute-value kinks make the loss piecewise smooth, and
//! batch normalization over very few values can make it sharply curved; in
//! both cases a fixed step corrupts the difference quotient. A coordinate
//! whose error exceeds a tenth of the tolerance at step `h` is measured
//! again at `h/10` and `h/100`, keeping the smallest error: such artifacts shrink with the
//! step, while a wrong analytic gradient stays wrong at every step.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{BnMode, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    content_loss, gan_g_loss, l1_term, loss_discriminator_supervised, loss_discriminator_weak,
    loss_supervised, loss_weak, LossWeights,
};
use crate::networks::{Layer, LayerOp, ModelConfig, ModelVariant, Scene, SeparatorModel};
use crate::params::ParamId;
use crate::rng::RandomState;
use crate::tensor::Tensor;

pub const GRADCHECK_WIDTH_DIVISOR: usize = 8;
pub const GRADCHECK_IMAGE_SIZE: usize = 32;
pub const GRADCHECK_BATCH: usize = 2;
pub const GRADCHECK_COORDS: usize = 64;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossKind {
    /// Discriminator objective, wrt discriminator parameters.
    GanD,
    /// Generator adversarial terms alone.
    GanG,
    /// L1 terms of both scenes.
    L1,
    /// Content loss (B3).
    Content,
    /// Full supervised objective (B1, B2, B3).
    Supervised,
    /// Full weakly-supervised objective (mask).
    Weak,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        Self::GanD,
        Self::GanG,
        Self::L1,
        Self::Content,
        Self::Supervised,
        Self::Weak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GanD => "gan_d",
            Self::GanG => "gan_g",
            Self::L1 => "l1",
            Self::Content => "content",
            Self::Supervised => "supervised",
            Self::Weak => "weak",
        }
    }

    pub fn applies_to(self, variant: ModelVariant) -> bool {
        match self {
            Self::GanD | Self::GanG | Self::L1 => true,
            Self::Content => variant == ModelVariant::B3,
            Self::Supervised => variant != ModelVariant::Mask,
            Self::Weak => variant == ModelVariant::Mask,
        }
    }

    pub fn for_variant(variant: ModelVariant) -> Vec<LossKind> {
        Self::ALL
            .into_iter()
            .filter(|k| k.applies_to(variant))
            .collect()
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown loss kind `{s}`")))
    }
}

/// Largest disagreement found at one coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub coords: usize,
    pub loss: f64,
    pub max_rel_err: f64,
    pub worst: Option<CoordError>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.rel_tol
    }
}

/// Compares the analytic gradient of `loss` against central differences on
/// `coords` distinct scalars drawn uniformly from the storages in `params`.
/// The model is restored bitwise afterwards.
pub fn finite_difference_check<F>(
    model: &mut SeparatorModel,
    params: &BTreeSet<ParamId>,
    coords: usize,
    step: f64,
    rel_tol: f64,
    rng: &mut RandomState,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &SeparatorModel) -> Result<Var>,
{
    let mut g = Graph::new(
        params.clone(),
        BnMode::Batch {
            update_running: false,
        },
    );
    let l = loss(&mut g, model)?;
    let value = g.scalar(l);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: String::from("gradcheck"),
        });
    }
    let grads = g.param_grads(&g.backward(l)?);
    drop(g);

    let ids: Vec<ParamId> = params.iter().copied().collect();
    let sizes: Vec<usize> = ids
        .iter()
        .map(|&id| model.params().get(id).numel())
        .collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Empty("gradient-check parameter set"));
    }
    let mut picked = BTreeSet::new();
    while picked.len() < coords.min(total) {
        picked.insert(rng.index(total));
    }

    let floor = 1e-6 * value.abs().max(1.0);
    let eval = |model: &SeparatorModel| -> Result<f64> {
        let mut g = Graph::new(
            BTreeSet::new(),
            BnMode::Batch {
                update_running: false,
            },
        );
        let l = loss(&mut g, model)?;
        Ok(g.scalar(l))
    };
    let mut worst: Option<CoordError> = None;
    for flat in picked {
        let (mut slot, mut index) = (0, flat);
        while index >= sizes[slot] {
            index -= sizes[slot];
            slot += 1;
        }
        let id = ids[slot];
        let analytic = grads[&id].data()[index];
        let mut central = |h: f64| -> Result<f64> {
            let original = model.params().get(id).data()[index];
            model.params_mut().get_mut(id).data_mut()[index] = original + h;
            let plus = eval(model);
            model.params_mut().get_mut(id).data_mut()[index] = original - h;
            let minus = eval(model);
            model.params_mut().get_mut(id).data_mut()[index] = original;
            Ok((plus? - minus?) / (2.0 * h))
        };
        let rel = |numeric: f64| {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
        };
        let mut numeric = central(step)?;
        let mut rel_err = rel(numeric);
        for shrink in [10.0, 100.0] {
            if rel_err < 0.1 * rel_tol {
                break;
            }
            let retry = central(step / shrink)?;
            if rel(retry) < rel_err {
                numeric = retry;
                rel_err = rel(retry);
            }
        }
        if worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
            worst = Some(CoordError {
                param: model.params().name(id).into(),
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    Ok(GradCheckReport {
        label: String::new(),
        coords: coords.min(total),
        loss: value,
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        worst,
        rel_tol,
    })
}

/// Redraws every convolution weight with std `sqrt(2 / fan_in)`, where a
/// stride-½ layer's fan-in counts the taps reaching one output pixel.
pub fn variance_preserving_weights(model: &mut SeparatorModel, rng: &mut RandomState) {
    let mut layers: Vec<Layer> = model.encoder_layers().to_vec();
    for branch in model.variant().branches() {
        layers.extend_from_slice(model.decoder_layers(*branch).unwrap_or_default());
    }
    for scene in [Scene::T, Scene::R] {
        layers.extend_from_slice(model.discriminator_layers(scene));
    }
    let mut seen = BTreeSet::new();
    for layer in layers {
        if !seen.insert(layer.weight) {
            continue;
        }
        let spec = layer.spec;
        let taps = spec.kernel * spec.kernel;
        let fan_in = match spec.op {
            LayerOp::Conv => spec.in_channels * taps,
            LayerOp::FConv => (spec.in_channels * taps / 4).max(1),
        };
        let std = libm::sqrt(2.0 / fan_in as f64);
        for w in model.params_mut().get_mut(layer.weight).data_mut() {
            *w = rng.normal(std);
        }
    }
}

fn random_batch(rng: &mut RandomState) -> Tensor {
    let s = GRADCHECK_IMAGE_SIZE;
    let shape = [GRADCHECK_BATCH, 3, s, s];
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform())
        .collect();
    Tensor::new(&shape, data).expect("shape")
}

/// Gradient check of one loss on the reduced model of `variant`.
pub fn grad_check(
    variant: ModelVariant,
    kind: LossKind,
    rel_tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !kind.applies_to(variant) {
        return Err(Error::WrongVariant {
            what: kind.name(),
            variant: variant.name(),
        });
    }
    let mut rng = RandomState::new(seed);
    let config = ModelConfig::reduced(variant, GRADCHECK_WIDTH_DIVISOR, GRADCHECK_IMAGE_SIZE);
    let mut model = SeparatorModel::new(config, &mut rng)?;
    variance_preserving_weights(&mut model, &mut rng);
    let t = random_batch(&mut rng);
    let r = random_batch(&mut rng);
    let fake_t = random_batch(&mut rng);
    let fake_r = random_batch(&mut rng);
    let y_data = t
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| 0.6 * a + 0.4 * b)
        .collect();
    let y = Tensor::new(t.shape(), y_data)?;
    let weights = LossWeights::default();
    let conditional = variant.conditional_discriminators();

    let params = match kind {
        LossKind::GanD => model.discriminator_params(),
        _ => model.generator_params(),
    };
    let loss = |g: &mut Graph, m: &SeparatorModel| -> Result<Var> {
        let yv = g.constant(y.clone());
        let tv = g.constant(t.clone());
        let rv = g.constant(r.clone());
        if kind == LossKind::GanD {
            let ft = g.constant(fake_t.clone());
            let fr = g.constant(fake_r.clone());
            let obj = if conditional {
                loss_discriminator_supervised(g, m, yv, tv, rv, ft, fr)?
            } else {
                loss_discriminator_weak(g, m, tv, rv, ft, fr)?
            };
            return Ok(obj.total());
        }
        let out = m.forward(g, yv)?;
        match kind {
            LossKind::GanG => {
                let cond = conditional.then_some(yv);
                let st = m.discriminate(g, Scene::T, out.t_hat, cond)?;
                let sr = m.discriminate(g, Scene::R, out.r_hat, cond)?;
                let a = gan_g_loss(g, st);
                let b = gan_g_loss(g, sr);
                g.add(a, b)
            }
            LossKind::L1 => {
                let a = l1_term(g, tv, out.t_hat)?;
                let b = l1_term(g, rv, out.r_hat)?;
                g.add(a, b)
            }
            LossKind::Content => {
                let w_y = out.w_y.ok_or(Error::WrongVariant {
                    what: "ratio head",
                    variant: variant.name(),
                })?;
                content_loss(g, m, &out.encoder, tv, rv, out.t_hat, out.r_hat, w_y)
            }
            LossKind::Supervised => Ok(loss_supervised(g, m, &out, yv, tv, rv, weights)?.total()),
            LossKind::Weak => Ok(loss_weak(g, m, &out, yv, weights)?.total()),
            LossKind::GanD => unreachable!(),
        }
    };
    let mut report = finite_difference_check(
        &mut model,
        &params,
        GRADCHECK_COORDS,
        GRADCHECK_STEP,
        rel_tol,
        &mut rng,
        loss,
    )?;
    report.label = format!("{}/{}", variant.name(), kind.name());
    Ok(report)
}
