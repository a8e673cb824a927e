//! PSNR/SSIM grids over synthesized held-out pairs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::imaging::{psnr, ssim};
use crate::networks::SeparatorModel;
use crate::rng::RandomState;
use crate::synthesis::{build_batch, Augment, KindSet, SynthModelKind, TrainingPair};

/// Images separated per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 8;

/// Anything that maps observed images to `(t_hat, r_hat)` estimates.
pub trait Separator {
    fn separate_images(&self, y: &[Image]) -> Result<(Vec<Image>, Vec<Image>)>;
}

impl Separator for SeparatorModel {
    fn separate_images(&self, y: &[Image]) -> Result<(Vec<Image>, Vec<Image>)> {
        let mut t = Vec::with_capacity(y.len());
        let mut r = Vec::with_capacity(y.len());
        for chunk in y.chunks(EVAL_CHUNK) {
            let out = self.separate(chunk)?;
            t.extend(out.t_hat.to_images()?);
            r.extend(out.r_hat.to_images()?);
        }
        Ok((t, r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Transmission,
    Reflection,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Self::Transmission => "transmission",
            Self::Reflection => "reflection",
        }
    }
}

/// Mean and population standard deviation of the finite values of a cell;
/// infinite values (identical images under PSNR) are counted separately.
/// A cell whose values are all infinite reports a mean of `+inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub finite: usize,
    pub infinite: usize,
}

impl CellStats {
    /// Values are sorted before summation, so the result does not depend
    /// on their order.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("metric values"));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::NonFinite {
                index: values
                    .iter()
                    .position(|v| v.is_nan() || *v == f64::NEG_INFINITY)
                    .unwrap_or(0),
            });
        }
        let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let infinite = values.len() - finite.len();
        if finite.is_empty() {
            return Ok(Self {
                mean: f64::INFINITY,
                std: 0.0,
                finite: 0,
                infinite,
            });
        }
        finite.sort_by(f64::total_cmp);
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = finite.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let std = libm::sqrt(dev.iter().sum::<f64>() / n);
        Ok(Self {
            mean,
            std,
            finite: finite.len(),
            infinite,
        })
    }

    pub fn count(&self) -> usize {
        self.finite + self.infinite
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub kind: SynthModelKind,
    pub target: Target,
    pub psnr: CellStats,
    pub ssim: CellStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub rows: Vec<EvalRow>,
    pub n_images: usize,
}

/// Metric values of one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    pub psnr_t: f64,
    pub ssim_t: f64,
    pub psnr_r: f64,
    pub ssim_r: f64,
}

/// Separates every pair and scores `(t, t_hat)` and `(r, r_hat)`.
pub fn score_pairs<S: Separator + ?Sized>(
    separator: &S,
    pairs: &[TrainingPair],
) -> Result<Vec<PairScores>> {
    let y: Vec<Image> = pairs.iter().map(|p| p.y.clone()).collect();
    let (t_hat, r_hat) = separator.separate_images(&y)?;
    if t_hat.len() != pairs.len() || r_hat.len() != pairs.len() {
        return Err(crate::error::shape_mismatch(
            pairs.len(),
            (t_hat.len(), r_hat.len()),
        ));
    }
    pairs
        .iter()
        .zip(t_hat.iter().zip(&r_hat))
        .map(|(p, (th, rh))| {
            Ok(PairScores {
                psnr_t: psnr(&p.t, th)?,
                ssim_t: ssim(&p.t, th)?,
                psnr_r: psnr(&p.r, rh)?,
                ssim_r: ssim(&p.r, rh)?,
            })
        })
        .collect()
}

/// Two rows (transmission, reflection) for one synthesis kind.
pub fn grid_rows(kind: SynthModelKind, scores: &[PairScores]) -> Result<[EvalRow; 2]> {
    let col = |f: fn(&PairScores) -> f64| {
        CellStats::from_values(&scores.iter().map(f).collect::<Vec<_>>())
    };
    Ok([
        EvalRow {
            kind,
            target: Target::Transmission,
            psnr: col(|s| s.psnr_t)?,
            ssim: col(|s| s.ssim_t)?,
        },
        EvalRow {
            kind,
            target: Target::Reflection,
            psnr: col(|s| s.psnr_r)?,
            ssim: col(|s| s.ssim_r)?,
        },
    ])
}

/// Held-out pairs of one kind: `n` pairs from the training pipeline with the
/// kind fixed, drawn from stream `kind index` of `seed`.
pub fn eval_pairs(
    t_pool: &[Image],
    r_pool: &[Image],
    kind: SynthModelKind,
    n: usize,
    seed: u64,
    aug: Augment,
) -> Result<Vec<TrainingPair>> {
    let index = SynthModelKind::ALL
        .iter()
        .position(|k| *k == kind)
        .unwrap_or(0) as u64;
    build_batch(
        t_pool,
        r_pool,
        KindSet::single(kind),
        n,
        aug,
        &mut RandomState::derive(seed, index),
    )
}

/// Scores `n` held-out pairs per kind in `kinds`.
pub fn evaluate<S: Separator + ?Sized>(
    separator: &S,
    t_pool: &[Image],
    r_pool: &[Image],
    kinds: KindSet,
    n: usize,
    seed: u64,
    aug: Augment,
) -> Result<EvalGrid> {
    if kinds.is_empty() {
        return Err(Error::Empty("synthesis model set"));
    }
    let mut rows = Vec::with_capacity(2 * kinds.len());
    for kind in kinds.iter() {
        let pairs = eval_pairs(t_pool, r_pool, kind, n, seed, aug)?;
        rows.extend(grid_rows(kind, &score_pairs(separator, &pairs)?)?);
    }
    Ok(EvalGrid { rows, n_images: n })
}

fn cell(value: f64) -> String {
    if value.is_infinite() {
        String::from("inf")
    } else {
        format!("{value:.4}")
    }
}

impl EvalGrid {
    /// One line per row:
    /// `kind target psnr_mean psnr_std ssim_mean ssim_std n psnr_inf`.
    pub fn to_tsv(&self) -> String {
        let mut s =
            String::from("kind\ttarget\tpsnr_mean\tpsnr_std\tssim_mean\tssim_std\tn\tpsnr_inf\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.kind,
                r.target.name(),
                cell(r.psnr.mean),
                cell(r.psnr.std),
                cell(r.ssim.mean),
                cell(r.ssim.std),
                r.psnr.count(),
                r.psnr.infinite
            );
        }
        s
    }

    /// Aligned plain-text table with `mean ± std` cells and a footnote
    /// counting infinite PSNR values left out of the statistics.
    pub fn to_table(&self) -> String {
        let header = ["model", "scene", "PSNR (dB)", "SSIM"];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                let mark = if r.psnr.infinite > 0 { "*" } else { "" };
                [
                    String::from(r.kind.name()),
                    String::from(r.target.name()),
                    format!("{} ± {}{mark}", cell(r.psnr.mean), cell(r.psnr.std)),
                    format!("{} ± {}", cell(r.ssim.mean), cell(r.ssim.std)),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: [&str; 4]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, header);
        let rule = widths.map(|w| "-".repeat(w));
        line(&mut s, [&rule[0], &rule[1], &rule[2], &rule[3]]);
        for row in &body {
            line(&mut s, [&row[0], &row[1], &row[2], &row[3]]);
        }
        let _ = writeln!(s, "n = {} images per cell", self.n_images);
        let inf: usize = self.rows.iter().map(|r| r.psnr.infinite).sum();
        if inf > 0 {
            let _ = writeln!(
                s,
                "* {inf} infinite PSNR value(s) (exact reconstruction) excluded from mean ± std"
            );
        }
        s
    }
}
