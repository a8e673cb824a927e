//! Separator architectures: shared encoder, generation branches, the
//! content-ratio head and the two discriminators.
//!
//! | variant | branches      | extras                          | discriminators |
//! |---------|---------------|---------------------------------|----------------|
//! | `B1`    | T, R          |                                 | conditional    |
//! | `B2`    | T, R, Y       | shared decoder trunk            | conditional    |
//! | `B3`    | T, R, Y       | shared trunk, ratio head `w_y`  | conditional    |
//! | `Mask`  | T, R, Y, M    | shared trunk, masked products   | unconditional  |

mod layers;

pub use layers::{
    decoder_specs, discriminator_specs, encoder_specs, encoder_widths, Activation, LayerOp,
    LayerSpec, Stride, LEAKY_SLOPE, SHARED_DECODER_LAYERS,
};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{BnMode, BnUpdate, Graph, Var};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::imaging::{Image, TRAIN_SIZE};
use crate::params::{ParamId, ParamStore};
use crate::rng::RandomState;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Running-average momentum for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelVariant {
    B1,
    B2,
    B3,
    Mask,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::B1, Self::B2, Self::B3, Self::Mask];

    pub fn name(self) -> &'static str {
        match self {
            Self::B1 => "b1",
            Self::B2 => "b2",
            Self::B3 => "b3",
            Self::Mask => "mask",
        }
    }

    pub fn branches(self) -> &'static [Branch] {
        match self {
            Self::B1 => &[Branch::T, Branch::R],
            Self::B2 | Self::B3 => &[Branch::T, Branch::R, Branch::Y],
            Self::Mask => &[Branch::T, Branch::R, Branch::Y, Branch::M],
        }
    }

    pub fn has_branch(self, branch: Branch) -> bool {
        self.branches().contains(&branch)
    }

    pub fn shares_trunk(self) -> bool {
        self != Self::B1
    }

    pub fn has_ratio_head(self) -> bool {
        self == Self::B3
    }

    /// Supervised variants condition their discriminators on `y`.
    pub fn conditional_discriminators(self) -> bool {
        self != Self::Mask
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    T,
    R,
    Y,
    M,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::T => "dec_t",
            Self::R => "dec_r",
            Self::Y => "dec_y",
            Self::M => "dec_m",
        }
    }

    pub fn out_channels(self) -> usize {
        if self == Self::M {
            1
        } else {
            3
        }
    }
}

/// Discriminator selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scene {
    T,
    R,
}

impl Scene {
    fn prefix(self) -> &'static str {
        match self {
            Self::T => "disc_t",
            Self::R => "disc_r",
        }
    }
}

/// Architecture size. The standard model has full widths at 128×128; reduced
/// models divide every width by `width_divisor` and may use smaller inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub width_divisor: usize,
    pub image_size: usize,
}

impl ModelConfig {
    pub fn standard(variant: ModelVariant) -> Self {
        Self {
            variant,
            width_divisor: 1,
            image_size: TRAIN_SIZE,
        }
    }

    pub fn reduced(variant: ModelVariant, width_divisor: usize, image_size: usize) -> Self {
        Self {
            variant,
            width_divisor,
            image_size,
        }
    }

    /// Input side must be a multiple of 32 (five stride-2 halvings).
    pub fn validate(&self) -> Result<()> {
        if self.width_divisor == 0
            || !self.width_divisor.is_power_of_two()
            || self.width_divisor > 32
        {
            return Err(invalid(format!(
                "width divisor {} must be a power of two ≤ 32",
                self.width_divisor
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(invalid(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Spatial side of the bottleneck and discriminator score map.
    pub fn score_side(&self) -> usize {
        self.image_size / 32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BnLayer>,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorModel {
    config: ModelConfig,
    params: ParamStore,
    bn: Vec<BnStats>,
    encoder: Vec<Layer>,
    decoders: BTreeMap<Branch, Vec<Layer>>,
    ratio: Option<(ParamId, ParamId)>,
    discriminators: BTreeMap<Scene, Vec<Layer>>,
}

/// Encoder activations `f_1..f_5` and the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderOutput {
    pub features: [Var; 5],
    pub bottleneck: Var,
}

/// Graph handles for every output of one separation forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeparationVars {
    pub encoder: EncoderOutput,
    pub t_hat: Var,
    pub r_hat: Var,
    pub y_hat: Option<Var>,
    pub mask: Option<Var>,
    pub w_y: Option<Var>,
    /// `mask ⊗ t_hat`
    pub g_mt: Option<Var>,
    /// `(1 − mask) ⊗ r_hat`
    pub g_mr: Option<Var>,
}

/// Tensor outputs of [`SeparatorModel::separate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Separation {
    pub t_hat: Tensor,
    pub r_hat: Tensor,
    pub y_hat: Option<Tensor>,
    pub mask: Option<Tensor>,
    pub w_y: Option<Tensor>,
    pub g_mt: Option<Tensor>,
    pub g_mr: Option<Tensor>,
}

struct Builder<'a> {
    params: ParamStore,
    bn: Vec<BnStats>,
    rng: &'a mut RandomState,
}

impl Builder<'_> {
    fn layer(&mut self, prefix: &str, spec: LayerSpec) -> Layer {
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| self.rng.normal(INIT_STD)).collect();
        let weight = self.params.add(
            &format!("{prefix}.weight"),
            Tensor::new(&shape, w).expect("shape"),
        );
        let bias = spec.has_bias().then(|| {
            self.params.add(
                &format!("{prefix}.bias"),
                Tensor::zeros(&[spec.out_channels]),
            )
        });
        let bn = spec.batch_norm.then(|| {
            let c = spec.out_channels;
            let gamma = self
                .params
                .add(&format!("{prefix}.bn.gamma"), Tensor::full(&[c], 1.0));
            let beta = self
                .params
                .add(&format!("{prefix}.bn.beta"), Tensor::zeros(&[c]));
            self.bn.push(BnStats {
                name: format!("{prefix}.bn"),
                mean: vec![0.0; c],
                var: vec![1.0; c],
            });
            BnLayer {
                gamma,
                beta,
                slot: self.bn.len() - 1,
            }
        });
        Layer {
            spec,
            weight,
            bias,
            bn,
        }
    }

    fn alias_layer(&mut self, prefix: &str, canonical_prefix: &str, source: &Layer) -> Layer {
        self.params.alias(
            &format!("{prefix}.weight"),
            &format!("{canonical_prefix}.weight"),
        );
        if source.bias.is_some() {
            self.params.alias(
                &format!("{prefix}.bias"),
                &format!("{canonical_prefix}.bias"),
            );
        }
        if source.bn.is_some() {
            self.params.alias(
                &format!("{prefix}.bn.gamma"),
                &format!("{canonical_prefix}.bn.gamma"),
            );
            self.params.alias(
                &format!("{prefix}.bn.beta"),
                &format!("{canonical_prefix}.bn.beta"),
            );
        }
        *source
    }
}

impl SeparatorModel {
    /// Gaussian(0, 0.02) weights, zero biases, unit/zero batch-norm affine,
    /// and the variant's sharing map. Parameters are drawn in construction
    /// order: encoder, decoders (T, R, Y, M), ratio head, discriminators.
    pub fn new(config: ModelConfig, rng: &mut RandomState) -> Result<Self> {
        config.validate()?;
        let variant = config.variant;
        let div = config.width_divisor;
        let mut b = Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            rng,
        };

        let encoder = encoder_specs(div)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| b.layer(&format!("enc.conv{}", i + 1), spec))
            .collect();

        let mut decoders = BTreeMap::new();
        let mut trunk: Option<Vec<Layer>> = None;
        for &branch in variant.branches() {
            let specs = decoder_specs(div, branch.out_channels());
            let mut layers = Vec::with_capacity(specs.len());
            for (i, spec) in specs.into_iter().enumerate() {
                let prefix = format!("{}.l{}", branch.prefix(), i + 1);
                let layer = match &trunk {
                    Some(shared) if i < SHARED_DECODER_LAYERS => {
                        let canonical = format!("{}.l{}", Branch::T.prefix(), i + 1);
                        b.alias_layer(&prefix, &canonical, &shared[i])
                    }
                    _ => b.layer(&prefix, spec),
                };
                layers.push(layer);
            }
            if variant.shares_trunk() && trunk.is_none() {
                trunk = Some(layers[..SHARED_DECODER_LAYERS].to_vec());
            }
            decoders.insert(branch, layers);
        }

        let ratio = variant.has_ratio_head().then(|| {
            let (_, head) = encoder_widths(div);
            let w = (0..head).map(|_| b.rng.normal(INIT_STD)).collect();
            let w = b
                .params
                .add("ratio.weight", Tensor::new(&[1, head], w).expect("shape"));
            let bias = b.params.add("ratio.bias", Tensor::zeros(&[1]));
            (w, bias)
        });

        let mut discriminators = BTreeMap::new();
        for scene in [Scene::T, Scene::R] {
            let layers = discriminator_specs(div, variant.conditional_discriminators())
                .into_iter()
                .enumerate()
                .map(|(i, spec)| b.layer(&format!("{}.conv{}", scene.prefix(), i + 1), spec))
                .collect();
            discriminators.insert(scene, layers);
        }

        let Builder { params, bn, .. } = b;
        Ok(Self {
            config,
            params,
            bn,
            encoder,
            decoders,
            ratio,
            discriminators,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats] {
        &mut self.bn
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn decoder_layers(&self, branch: Branch) -> Option<&[Layer]> {
        self.decoders.get(&branch).map(Vec::as_slice)
    }

    pub fn discriminator_layers(&self, scene: Scene) -> &[Layer] {
        &self.discriminators[&scene]
    }

    pub fn ratio_params(&self) -> Option<(ParamId, ParamId)> {
        self.ratio
    }

    /// Number of distinct trainable scalars (aliases counted once).
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn layer_ids(layers: &[Layer], out: &mut BTreeSet<ParamId>) {
        for l in layers {
            out.insert(l.weight);
            out.extend(l.bias);
            if let Some(bn) = l.bn {
                out.insert(bn.gamma);
                out.insert(bn.beta);
            }
        }
    }

    pub fn encoder_params(&self) -> BTreeSet<ParamId> {
        let mut s = BTreeSet::new();
        Self::layer_ids(&self.encoder, &mut s);
        s
    }

    pub fn branch_params(&self, branch: Branch) -> BTreeSet<ParamId> {
        let mut s = BTreeSet::new();
        if let Some(layers) = self.decoders.get(&branch) {
            Self::layer_ids(layers, &mut s);
        }
        s
    }

    pub fn discriminator_params(&self) -> BTreeSet<ParamId> {
        let mut s = BTreeSet::new();
        for layers in self.discriminators.values() {
            Self::layer_ids(layers, &mut s);
        }
        s
    }

    /// Encoder, every decoder branch and the ratio head.
    pub fn generator_params(&self) -> BTreeSet<ParamId> {
        let mut s = self.encoder_params();
        for layers in self.decoders.values() {
            Self::layer_ids(layers, &mut s);
        }
        if let Some((w, b)) = self.ratio {
            s.insert(w);
            s.insert(b);
        }
        s
    }

    /// Parameters owned by the mask branch alone (its non-shared layers).
    pub fn mask_params(&self) -> BTreeSet<ParamId> {
        let mut own = self.branch_params(Branch::M);
        for branch in [Branch::T, Branch::R, Branch::Y] {
            for id in self.branch_params(branch) {
                own.remove(&id);
            }
        }
        own
    }

    /// Batch-norm slots owned by the discriminators.
    pub fn discriminator_bn_slots(&self) -> BTreeSet<usize> {
        self.discriminators
            .values()
            .flatten()
            .filter_map(|l| l.bn.map(|b| b.slot))
            .collect()
    }

    pub(crate) fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let stats = &mut self.bn[u.slot];
            for (m, b) in stats.mean.iter_mut().zip(&u.mean) {
                *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
            }
            for (v, b) in stats.var.iter_mut().zip(&u.var) {
                *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    // ---- forward ----------------------------------------------------------

    fn apply_layer(&self, g: &mut Graph, layer: &Layer, x: Var) -> Result<Var> {
        let w = g.param(&self.params, layer.weight);
        let b = layer.bias.map(|id| g.param(&self.params, id));
        let mut h = match layer.spec.op {
            LayerOp::Conv => {
                let stride = if layer.spec.stride == Stride::Two {
                    2
                } else {
                    1
                };
                g.conv2d(x, w, b, stride, layer.spec.pad)?
            }
            LayerOp::FConv => g.conv_transpose2d(x, w, b, 2, layer.spec.pad)?,
        };
        if let Some(bn) = layer.bn {
            let gamma = g.param(&self.params, bn.gamma);
            let beta = g.param(&self.params, bn.beta);
            h = match g.bn_mode() {
                BnMode::Batch { update_running } => {
                    let (out, mean, var) = g.batch_norm(h, gamma, beta)?;
                    if update_running {
                        g.record_bn_update(BnUpdate {
                            slot: bn.slot,
                            mean,
                            var,
                        });
                    }
                    out
                }
                BnMode::Frozen => {
                    let stats = &self.bn[bn.slot];
                    g.scale_shift(h, gamma, beta, &stats.mean, &stats.var)?
                }
            };
        }
        Ok(match layer.spec.activation {
            Activation::LeakyRelu => g.leaky_relu(h, LEAKY_SLOPE),
            Activation::Relu => g.relu(h),
            Activation::Sigmoid => g.sigmoid(h),
            Activation::None => h,
        })
    }

    fn check_images(&self, g: &Graph, x: Var, channels: usize) -> Result<usize> {
        let s = self.config.image_size;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != channels || shape[2] != s || shape[3] != s {
            return Err(shape_mismatch(("N", channels, s, s), shape));
        }
        Ok(shape[0])
    }

    /// Runs the encoder on an N×3×S×S batch.
    pub fn encode(&self, g: &mut Graph, y: Var) -> Result<EncoderOutput> {
        self.check_images(g, y, 3)?;
        g.count_encoder_pass();
        let mut h = y;
        let mut features = [y; 5];
        for (i, layer) in self.encoder.iter().enumerate() {
            h = self.apply_layer(g, layer, h)?;
            if i < 5 {
                features[i] = h;
            }
        }
        Ok(EncoderOutput {
            features,
            bottleneck: h,
        })
    }

    fn decoder(&self, branch: Branch) -> Result<&[Layer]> {
        self.decoders
            .get(&branch)
            .map(Vec::as_slice)
            .ok_or(Error::WrongVariant {
                what: "decoder branch",
                variant: self.variant().name(),
            })
    }

    /// Runs decoder layers `range` starting from `h`, concatenating the
    /// matching encoder feature before layers 3–6.
    fn run_decoder(
        &self,
        g: &mut Graph,
        layers: &[Layer],
        range: core::ops::Range<usize>,
        enc: &EncoderOutput,
        mut h: Var,
    ) -> Result<Var> {
        for i in range {
            if i >= 2 {
                // layer 3 takes f_4, layer 4 f_3, layer 5 f_2, layer 6 f_1
                h = g.concat(h, enc.features[5 - i])?;
            }
            h = self.apply_layer(g, &layers[i], h)?;
        }
        Ok(h)
    }

    /// Full decoder pass of one generation branch.
    pub fn decode(&self, g: &mut Graph, branch: Branch, enc: &EncoderOutput) -> Result<Var> {
        let layers = self.decoder(branch)?;
        self.run_decoder(g, layers, 0..layers.len(), enc, enc.bottleneck)
    }

    /// Content ratio `w_y ∈ (0, 1)` per sample, shape N×1: global average
    /// pool of the bottleneck, affine map, sigmoid.
    pub fn ratio_head(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Var> {
        let (w, b) = self.ratio.ok_or(Error::WrongVariant {
            what: "ratio head",
            variant: self.variant().name(),
        })?;
        let pooled = g.global_avg_pool(enc.bottleneck);
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let z = g.linear(pooled, w, b)?;
        Ok(g.sigmoid(z))
    }

    /// Patch scores in `(0, 1)`, shape N×1×(S/32)×(S/32). Supervised
    /// variants require `cond` (the observed image); the mask variant
    /// rejects it.
    pub fn discriminate(
        &self,
        g: &mut Graph,
        scene: Scene,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let n = self.check_images(g, x, 3)?;
        let input = match (self.variant().conditional_discriminators(), cond) {
            (true, Some(c)) => {
                if self.check_images(g, c, 3)? != n {
                    return Err(shape_mismatch(n, g.shape(c)));
                }
                g.concat(c, x)?
            }
            (false, None) => x,
            (true, None) => {
                return Err(invalid(
                    "conditional discriminator needs the observed image",
                ))
            }
            (false, Some(_)) => {
                return Err(invalid("unconditional discriminator takes no condition"))
            }
        };
        let mut h = input;
        for layer in &self.discriminators[&scene] {
            h = self.apply_layer(g, layer, h)?;
        }
        Ok(h)
    }

    /// One encoder pass, then every active branch. Branches with a shared
    /// trunk evaluate it once.
    pub fn forward(&self, g: &mut Graph, y: Var) -> Result<SeparationVars> {
        let enc = self.encode(g, y)?;
        let variant = self.variant();
        let mut outputs = BTreeMap::new();
        if variant.shares_trunk() {
            let trunk_layers = self.decoder(Branch::T)?;
            let trunk = self.run_decoder(
                g,
                trunk_layers,
                0..SHARED_DECODER_LAYERS,
                &enc,
                enc.bottleneck,
            )?;
            for &branch in variant.branches() {
                let layers = self.decoder(branch)?;
                let out =
                    self.run_decoder(g, layers, SHARED_DECODER_LAYERS..layers.len(), &enc, trunk)?;
                outputs.insert(branch, out);
            }
        } else {
            for &branch in variant.branches() {
                outputs.insert(branch, self.decode(g, branch, &enc)?);
            }
        }
        let t_hat = outputs[&Branch::T];
        let r_hat = outputs[&Branch::R];
        let mask = outputs.get(&Branch::M).copied();
        let (g_mt, g_mr) = match mask {
            Some(m) => {
                let inv = g.one_minus(m);
                (Some(g.mul_mask(t_hat, m)?), Some(g.mul_mask(r_hat, inv)?))
            }
            None => (None, None),
        };
        let w_y = if variant.has_ratio_head() {
            Some(self.ratio_head(g, &enc)?)
        } else {
            None
        };
        Ok(SeparationVars {
            encoder: enc,
            t_hat,
            r_hat,
            y_hat: outputs.get(&Branch::Y).copied(),
            mask,
            w_y,
            g_mt,
            g_mr,
        })
    }

    /// Inference with frozen batch-norm statistics.
    pub fn separate_tensor(&self, y: &Tensor) -> Result<Separation> {
        let mut g = Graph::inference();
        let yv = g.constant(y.clone());
        let out = self.forward(&mut g, yv)?;
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(Separation {
            t_hat: g.value(out.t_hat).clone(),
            r_hat: g.value(out.r_hat).clone(),
            y_hat: get(out.y_hat),
            mask: get(out.mask),
            w_y: get(out.w_y),
            g_mt: get(out.g_mt),
            g_mr: get(out.g_mr),
        })
    }

    pub fn separate(&self, images: &[Image]) -> Result<Separation> {
        self.separate_tensor(&Tensor::from_images(images)?)
    }

    /// Expected `(name, shape)` of every canonical parameter, in storage order.
    pub fn param_table(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .ids()
            .map(|id| {
                (
                    self.params.name(id).into(),
                    self.params.get(id).shape().to_vec(),
                )
            })
            .collect()
    }
}
