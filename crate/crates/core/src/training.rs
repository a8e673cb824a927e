//! Alternating adversarial optimization.
//!
//! Random streams: model initialization uses `RandomState::new(seed)`; the
//! half split uses stream [`SPLIT_STREAM`]; the batch of step `k` (counting
//! from 0) uses stream `k + 1`. A batch is therefore a pure function of
//! `(config, data, step)` and can be rebuilt after resuming.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{BnMode, Graph};
use crate::error::{invalid, Error, Result};
use crate::imaging::{Image, TRAIN_SIZE};
use crate::losses::{
    loss_discriminator_supervised, loss_discriminator_weak, loss_supervised, loss_weak, LossReport,
    LossWeights, Objective,
};
use crate::networks::{ModelConfig, ModelVariant, SeparationVars, SeparatorModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamId;
use crate::rng::RandomState;
use crate::synthesis::{
    build_batch, build_weak_batch, ensure_kinds_fit, prepare, Augment, KindSet, TrainingPair,
};
use crate::tensor::Tensor;

/// Stream index reserved for the weak-supervision half split.
pub const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    Weak,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::Weak => "weak",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "supervised" => Ok(Self::Supervised),
            "weak" => Ok(Self::Weak),
            _ => Err(invalid(format!("unknown training mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub mode: TrainMode,
    pub kinds: KindSet,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub width_divisor: usize,
    pub image_size: usize,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            variant: ModelVariant::B3,
            mode: TrainMode::Supervised,
            kinds: KindSet::all(),
            steps: 1000,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 100,
            width_divisor: 1,
            image_size: TRAIN_SIZE,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.variant) {
            (TrainMode::Supervised, ModelVariant::Mask) => {
                return Err(invalid("supervised training needs variant b1, b2 or b3"))
            }
            (TrainMode::Weak, v) if v != ModelVariant::Mask => {
                return Err(invalid("weak training needs variant mask"))
            }
            _ => {}
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.kinds.is_empty() {
            return Err(Error::Empty("synthesis model set"));
        }
        let finite = [
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.weights.lambda1,
            self.weights.lambda2,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(
                "rates, betas and loss weights must be finite and non-negative",
            ));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(invalid("betas must be below 1"));
        }
        ensure_kinds_fit(self.kinds, self.image_size)?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            width_divisor: self.width_divisor,
            image_size: self.image_size,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn augment(&self) -> Augment {
        Augment {
            out_size: self.image_size,
            flip: self.flip,
        }
    }
}

/// Everything a run needs to continue: parameters, optimizer moments, step
/// counter and random state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: SeparatorModel,
    pub optimizer: Adam,
    pub step: u64,
    pub rng: RandomState,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomState::new(config.seed);
        let model = SeparatorModel::new(config.model_config(), &mut rng)?;
        let optimizer = Adam::new(config.adam(), model.params());
        Ok(Self {
            model,
            optimizer,
            step: 0,
            rng,
        })
    }
}

/// Seeded shuffle, then alternate: shuffled positions 0, 2, 4, … form the
/// first half, 1, 3, 5, … the second. An odd count gives the first half
/// the extra element.
pub fn split_halves<T: Clone>(items: &[T], rng: &mut RandomState) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(invalid(format!(
            "splitting needs at least 2 items, got {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.index(i + 1);
        order.swap(i, j);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (pos, &idx) in order.iter().enumerate() {
        if pos % 2 == 0 { &mut a } else { &mut b }.push(items[idx].clone());
    }
    Ok((a, b))
}

/// Observed images and the two scene batches for one step. In weak mode
/// `t` and `r` are category images unrelated to `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub y: Tensor,
    pub t: Tensor,
    pub r: Tensor,
}

impl StepBatch {
    pub fn from_pairs(pairs: &[TrainingPair]) -> Result<Self> {
        let collect =
            |f: fn(&TrainingPair) -> &Image| pairs.iter().map(f).cloned().collect::<Vec<_>>();
        Ok(Self {
            y: Tensor::from_images(&collect(|p| &p.y))?,
            t: Tensor::from_images(&collect(|p| &p.t))?,
            r: Tensor::from_images(&collect(|p| &p.r))?,
        })
    }
}

/// Source images arranged for the configured mode.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainingData {
    Supervised {
        t: Vec<Image>,
        r: Vec<Image>,
    },
    /// `*_synth` halves feed synthesis, `*_real` halves feed discriminators.
    Weak {
        t_synth: Vec<Image>,
        r_synth: Vec<Image>,
        t_real: Vec<Image>,
        r_real: Vec<Image>,
    },
}

impl TrainingData {
    /// Prepares every image to the working size and, in weak mode, splits
    /// each category into halves.
    pub fn new(config: &TrainConfig, t: &[Image], r: &[Image]) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::Empty("transmission image set"));
        }
        if r.is_empty() {
            return Err(Error::Empty("reflection image set"));
        }
        let t = t.iter().map(prepare).collect::<Result<Vec<_>>>()?;
        let r = r.iter().map(prepare).collect::<Result<Vec<_>>>()?;
        Ok(match config.mode {
            TrainMode::Supervised => Self::Supervised { t, r },
            TrainMode::Weak => {
                let mut rng = RandomState::derive(config.seed, SPLIT_STREAM);
                let (t_synth, t_real) = split_halves(&t, &mut rng)?;
                let (r_synth, r_real) = split_halves(&r, &mut rng)?;
                Self::Weak {
                    t_synth,
                    r_synth,
                    t_real,
                    r_real,
                }
            }
        })
    }

    pub fn batch(&self, config: &TrainConfig, step: u64) -> Result<StepBatch> {
        let mut rng = RandomState::derive(config.seed, step + 1);
        let pairs = match self {
            Self::Supervised { t, r } => build_batch(
                t,
                r,
                config.kinds,
                config.batch_size,
                config.augment(),
                &mut rng,
            )?,
            Self::Weak {
                t_synth,
                r_synth,
                t_real,
                r_real,
            } => build_weak_batch(
                t_synth,
                r_synth,
                t_real,
                r_real,
                config.kinds,
                config.batch_size,
                config.augment(),
                &mut rng,
            )?,
        };
        StepBatch::from_pairs(&pairs)
    }
}

/// Loss values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Step index this report belongs to (before the counter advanced).
    pub step: u64,
    pub discriminator: LossReport,
    pub generator: LossReport,
}

/// Generator parameters updated at `step`. The mask variant alternates:
/// even steps train everything except the mask branch's own layers, odd
/// steps train only those.
pub fn generator_trainable(model: &SeparatorModel, step: u64) -> BTreeSet<ParamId> {
    let all = model.generator_params();
    if model.variant() != ModelVariant::Mask {
        return all;
    }
    let mask = model.mask_params();
    if step.is_multiple_of(2) {
        all.difference(&mask).copied().collect()
    } else {
        mask
    }
}

/// Generator objective for the model's variant. `t` and `r` are consumed
/// only by the supervised variants.
pub fn generator_objective(
    g: &mut Graph,
    model: &SeparatorModel,
    out: &SeparationVars,
    batch: (
        crate::autograd::Var,
        crate::autograd::Var,
        crate::autograd::Var,
    ),
    weights: LossWeights,
) -> Result<Objective> {
    let (y, t, r) = batch;
    if model.variant() == ModelVariant::Mask {
        loss_weak(g, model, out, y, weights)
    } else {
        loss_supervised(g, model, out, y, t, r, weights)
    }
}

/// One discriminator update on detached generator outputs, then one
/// generator update against the refreshed discriminators. Batch-norm layers
/// use batch statistics and fold them into the running averages.
///
/// A non-finite discriminator loss aborts before any update; a non-finite
/// generator loss aborts after the discriminator update.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &StepBatch,
) -> Result<StepReport> {
    let step = state.step;
    let model = &state.model;
    let g_train = generator_trainable(model, step);
    let mut gg = Graph::new(
        g_train,
        BnMode::Batch {
            update_running: true,
        },
    );
    let y = gg.constant(batch.y.clone());
    let t = gg.constant(batch.t.clone());
    let r = gg.constant(batch.r.clone());
    let out = model.forward(&mut gg, y)?;

    let mut dg = Graph::new(
        model.discriminator_params(),
        BnMode::Batch {
            update_running: true,
        },
    );
    let dy = dg.constant(batch.y.clone());
    let dt = dg.constant(batch.t.clone());
    let dr = dg.constant(batch.r.clone());
    let t_fake = dg.constant(gg.value(out.t_hat).clone());
    let r_fake = dg.constant(gg.value(out.r_hat).clone());
    let d_obj = if model.variant() == ModelVariant::Mask {
        loss_discriminator_weak(&mut dg, model, dt, dr, t_fake, r_fake)?
    } else {
        loss_discriminator_supervised(&mut dg, model, dy, dt, dr, t_fake, r_fake)?
    };
    let d_report = d_obj.report(&dg);
    d_report.check_finite()?;
    let d_grads = dg.param_grads(&dg.backward(d_obj.total())?);
    state.optimizer.step(state.model.params_mut(), &d_grads)?;
    let d_updates = dg.take_bn_updates();
    state.model.apply_bn_updates(&d_updates);

    let model = &state.model;
    let g_obj = generator_objective(&mut gg, model, &out, (y, t, r), config.weights)?;
    let g_report = g_obj.report(&gg);
    g_report.check_finite()?;
    let g_grads = gg.param_grads(&gg.backward(g_obj.total())?);
    let disc_slots = model.discriminator_bn_slots();
    let g_updates: Vec<_> = gg
        .take_bn_updates()
        .into_iter()
        .filter(|u| !disc_slots.contains(&u.slot))
        .collect();
    state.optimizer.step(state.model.params_mut(), &g_grads)?;
    state.model.apply_bn_updates(&g_updates);

    state.step += 1;
    Ok(StepReport {
        step,
        discriminator: d_report,
        generator: g_report,
    })
}
