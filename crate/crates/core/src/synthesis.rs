//! Observed-image synthesis from transmitted/reflected scene pairs, and the
//! augmentation pipeline that turns source images into training pairs.
//!
//! Five models are supported:
//!
//! * linear: `y = w·t + (1−w)·r`
//! * blur: `y = w·t + (1−w)·(k_b * r)` with a Gaussian `k_b`
//! * ghost: `y = w·t + (1−w)·(k_g * r) / max(k_g * r)` with a two-pulse `k_g`
//! * clip / clip without blur: `t + r'` with the mean overflow subtracted,
//!   then clamped into `[0, 1]`. This is an approximation of the clipping
//!   model in the reflection-removal literature; the overflow is averaged
//!   globally over every element that exceeds 1.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::imaging::{
    clip01, conv2d_same, crop_resize, flip_lr, gaussian_kernel, resize_bilinear, sample_crop,
    Image, Kernel, PREPARED_SIZE, TRAIN_SIZE,
};
use crate::rng::RandomState;

pub const W_RANGE: (f64, f64) = (0.5, 0.7);
pub const SIGMA_RANGE: (f64, f64) = (2.0, 5.0);
pub const GHOST_SHIFT_RANGE: (i64, i64) = (4, 16);
pub const GHOST_ALPHA_RANGE: (f64, f64) = (0.4, 0.8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SynthModelKind {
    Linear,
    Blur,
    Ghost,
    Clip,
    ClipNoBlur,
}

impl SynthModelKind {
    pub const ALL: [SynthModelKind; 5] = [
        Self::Linear,
        Self::Blur,
        Self::Ghost,
        Self::Clip,
        Self::ClipNoBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Blur => "blur",
            Self::Ghost => "ghost",
            Self::Clip => "clip",
            Self::ClipNoBlur => "clip_noblur",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for SynthModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(alloc::format!("unknown synthesis model `{s}`")))
    }
}

/// Set of synthesis models; iteration follows [`SynthModelKind::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct KindSet(u8);

impl KindSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        Self::ALL_BITS
    }

    const ALL_BITS: KindSet = KindSet(0b1_1111);

    pub fn single(kind: SynthModelKind) -> Self {
        Self(kind.bit())
    }

    pub fn insert(&mut self, kind: SynthModelKind) {
        self.0 |= kind.bit();
    }

    pub fn contains(self, kind: SynthModelKind) -> bool {
        self.0 & kind.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = SynthModelKind> {
        SynthModelKind::ALL
            .into_iter()
            .filter(move |k| self.contains(*k))
    }

    /// Parses a comma-separated list such as `linear,blur`, or `all`.
    pub fn parse_list(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::all());
        }
        let mut set = Self::empty();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set.insert(part.parse()?);
        }
        if set.is_empty() {
            return Err(Error::Empty("synthesis model set"));
        }
        Ok(set)
    }
}

impl FromIterator<SynthModelKind> for KindSet {
    fn from_iter<I: IntoIterator<Item = SynthModelKind>>(iter: I) -> Self {
        let mut set = Self::empty();
        for k in iter {
            set.insert(k);
        }
        set
    }
}

impl fmt::Display for KindSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, k) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(k.name())?;
        }
        Ok(())
    }
}

/// Parameters for one synthesized observation. Every field is always
/// sampled; fields a model does not use are carried along and ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub kind: SynthModelKind,
    /// Transmission weight.
    pub w: f64,
    /// Blur standard deviation in pixels.
    pub sigma: f64,
    pub ghost_dx: i64,
    pub ghost_dy: i64,
    /// Attenuation of the shifted ghost pulse.
    pub ghost_alpha: f64,
}

impl SynthParams {
    /// Whether every field lies inside its sampling range.
    pub fn in_range(&self) -> bool {
        (W_RANGE.0..=W_RANGE.1).contains(&self.w)
            && (SIGMA_RANGE.0..=SIGMA_RANGE.1).contains(&self.sigma)
            && (GHOST_SHIFT_RANGE.0..=GHOST_SHIFT_RANGE.1).contains(&self.ghost_dx)
            && (GHOST_SHIFT_RANGE.0..=GHOST_SHIFT_RANGE.1).contains(&self.ghost_dy)
            && (GHOST_ALPHA_RANGE.0..=GHOST_ALPHA_RANGE.1).contains(&self.ghost_alpha)
    }
}

/// One synthesized observation with its source scenes. `params` is `None`
/// for weakly-supervised samples, whose `t` and `r` are unrelated images of
/// the two categories.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub y: Image,
    pub t: Image,
    pub r: Image,
    pub params: Option<SynthParams>,
    /// Indices of the source images mixed into `y` within the pools passed
    /// to the batch builder (the synthesis pools in weak mode).
    pub source: (usize, usize),
}

/// Kind uniform over `kinds`, then every field uniform over its range. The
/// draw order is fixed so the stream consumption does not depend on the kind.
pub fn sample_params(kinds: KindSet, rng: &mut RandomState) -> Result<SynthParams> {
    if kinds.is_empty() {
        return Err(Error::Empty("synthesis model set"));
    }
    let pick = rng.index(kinds.len());
    let kind = kinds.iter().nth(pick).expect("index below set size");
    let w = rng.uniform_in(W_RANGE.0, W_RANGE.1);
    let sigma = rng.uniform_in(SIGMA_RANGE.0, SIGMA_RANGE.1);
    let ghost_dx = rng.int_in(GHOST_SHIFT_RANGE.0, GHOST_SHIFT_RANGE.1);
    let ghost_dy = rng.int_in(GHOST_SHIFT_RANGE.0, GHOST_SHIFT_RANGE.1);
    let ghost_alpha = rng.uniform_in(GHOST_ALPHA_RANGE.0, GHOST_ALPHA_RANGE.1);
    Ok(SynthParams {
        kind,
        w,
        sigma,
        ghost_dx,
        ghost_dy,
        ghost_alpha,
    })
}

/// Two-pulse ghost kernel: weight 1 at the anchor and `ghost_alpha` at
/// offset `(ghost_dy, ghost_dx)`. Not normalized.
pub fn ghost_kernel(p: &SynthParams) -> Result<Kernel> {
    if p.kind != SynthModelKind::Ghost {
        return Err(invalid(alloc::format!(
            "ghost kernel requested for {} model",
            p.kind
        )));
    }
    if p.ghost_dx < 0 || p.ghost_dy < 0 {
        return Err(invalid("ghost shift must be non-negative"));
    }
    let (dy, dx) = (p.ghost_dy as usize, p.ghost_dx as usize);
    let (h, w) = (2 * dy + 1, 2 * dx + 1);
    let mut weights = vec![0.0; h * w];
    weights[dy * w + dx] = 1.0;
    weights[(2 * dy) * w + 2 * dx] += p.ghost_alpha;
    Kernel::new(h, w, weights)
}

fn blend(t: &Image, r: &Image, w: f64) -> Result<Image> {
    t.zip_with(r, |a, b| w * a + (1.0 - w) * b)
}

pub fn synth_linear(t: &Image, r: &Image, p: &SynthParams) -> Result<Image> {
    blend(t, r, p.w)
}

pub fn synth_blur(t: &Image, r: &Image, p: &SynthParams) -> Result<Image> {
    t.ensure_same_shape(r)?;
    let blurred = conv2d_same(r, &gaussian_kernel(p.sigma)?)?;
    blend(t, &blurred, p.w)
}

/// Ghosted reflection divided by its global maximum, as used by
/// [`synth_ghost`] before blending.
pub fn ghost_term(r: &Image, p: &SynthParams) -> Result<Image> {
    let ghosted = conv2d_same(r, &ghost_kernel(p)?)?;
    let peak = ghosted.max();
    if !(peak > 0.0) {
        return Err(Error::ZeroDivision(
            "ghosted reflection has no positive maximum",
        ));
    }
    Ok(ghosted.map(|v| v / peak))
}

pub fn synth_ghost(t: &Image, r: &Image, p: &SynthParams) -> Result<Image> {
    t.ensure_same_shape(r)?;
    blend(t, &ghost_term(r, p)?, p.w)
}

pub fn synth_clip(t: &Image, r: &Image, p: &SynthParams, with_blur: bool) -> Result<Image> {
    t.ensure_same_shape(r)?;
    let reflected = if with_blur {
        conv2d_same(r, &gaussian_kernel(p.sigma)?)?
    } else {
        r.clone()
    };
    let raw = t.zip_with(&reflected, |a, b| a + b)?;
    let (overflow, count) = raw
        .data()
        .iter()
        .filter(|&&v| v > 1.0)
        .fold((0.0, 0usize), |(s, n), &v| (s + (v - 1.0), n + 1));
    let shift = if count > 0 {
        overflow / count as f64
    } else {
        0.0
    };
    clip01(&raw.map(|v| v - shift))
}

/// Dispatches on `p.kind`.
pub fn synthesize(t: &Image, r: &Image, p: &SynthParams) -> Result<Image> {
    match p.kind {
        SynthModelKind::Linear => synth_linear(t, r, p),
        SynthModelKind::Blur => synth_blur(t, r, p),
        SynthModelKind::Ghost => synth_ghost(t, r, p),
        SynthModelKind::Clip => synth_clip(t, r, p, true),
        SynthModelKind::ClipNoBlur => synth_clip(t, r, p, false),
    }
}

/// Rejects kind sets whose kernels cannot fit inside `side`×`side` images.
/// Ghost kernels reach `2·16+1 = 33` pixels.
pub fn ensure_kinds_fit(kinds: KindSet, side: usize) -> Result<()> {
    let ghost_side = 2 * GHOST_SHIFT_RANGE.1 as usize + 1;
    if kinds.contains(SynthModelKind::Ghost) && side <= ghost_side {
        return Err(invalid(alloc::format!(
            "ghost synthesis needs images larger than {ghost_side}x{ghost_side}, got {side}"
        )));
    }
    Ok(())
}

/// Augmentation settings for [`build_batch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub out_size: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            out_size: TRAIN_SIZE,
            flip: true,
        }
    }
}

/// Resizes to the 256×256 working size (no-op when already there).
pub fn prepare(img: &Image) -> Result<Image> {
    resize_bilinear(&img.to_rgb(), PREPARED_SIZE, PREPARED_SIZE)
}

/// resize 256 → random crop → resize `out_size` → optional left-right flip.
pub fn augment(img: &Image, aug: Augment, rng: &mut RandomState) -> Result<Image> {
    let prepared = prepare(img)?;
    let window = sample_crop(rng);
    let patch = crop_resize(&prepared, window, aug.out_size)?;
    Ok(if aug.flip {
        flip_lr(&patch, rng)
    } else {
        patch
    })
}

/// Builds `n` supervised pairs. Pair `i` draws everything (source indices,
/// augmentation, parameters) from its own stream derived from one base seed
/// taken from `rng`, so pairs can be produced in any order.
pub fn build_batch(
    t_source: &[Image],
    r_source: &[Image],
    kinds: KindSet,
    n: usize,
    aug: Augment,
    rng: &mut RandomState,
) -> Result<Vec<TrainingPair>> {
    if t_source.is_empty() {
        return Err(Error::Empty("transmission image set"));
    }
    if r_source.is_empty() {
        return Err(Error::Empty("reflection image set"));
    }
    if n == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if kinds.is_empty() {
        return Err(Error::Empty("synthesis model set"));
    }
    let base = rng.next_u64();
    (0..n)
        .map(|i| {
            build_pair(
                t_source,
                r_source,
                kinds,
                aug,
                &mut RandomState::derive(base, i as u64),
            )
        })
        .collect()
}

/// Pair `i` of [`build_batch`] with base seed `b` is
/// `build_pair(…, &mut RandomState::derive(b, i))`.
pub fn build_pair(
    t_source: &[Image],
    r_source: &[Image],
    kinds: KindSet,
    aug: Augment,
    rng: &mut RandomState,
) -> Result<TrainingPair> {
    let source = (rng.index(t_source.len()), rng.index(r_source.len()));
    let t = augment(&t_source[source.0], aug, rng)?;
    let r = augment(&r_source[source.1], aug, rng)?;
    let params = sample_params(kinds, rng)?;
    let y = synthesize(&t, &r, &params)?;
    Ok(TrainingPair {
        y,
        t,
        r,
        params: Some(params),
        source,
    })
}

/// Weakly-supervised batch: `y` is synthesized from `(t_synth, r_synth)`,
/// while the stored `t` and `r` are independent augmented draws from the
/// disjoint `t_real`/`r_real` pools. The scenes mixed into `y` are dropped.
pub fn build_weak_batch(
    t_synth: &[Image],
    r_synth: &[Image],
    t_real: &[Image],
    r_real: &[Image],
    kinds: KindSet,
    n: usize,
    aug: Augment,
    rng: &mut RandomState,
) -> Result<Vec<TrainingPair>> {
    if t_real.is_empty() || r_real.is_empty() {
        return Err(Error::Empty("real image pool"));
    }
    let mixed = build_batch(t_synth, r_synth, kinds, n, aug, rng)?;
    let base = rng.next_u64();
    mixed
        .into_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut pair_rng = RandomState::derive(base, i as u64);
            let t = augment(&t_real[pair_rng.index(t_real.len())], aug, &mut pair_rng)?;
            let r = augment(&r_real[pair_rng.index(r_real.len())], aug, &mut pair_rng)?;
            Ok(TrainingPair {
                y: pair.y,
                t,
                r,
                params: None,
                source: pair.source,
            })
        })
        .collect()
}
