//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! When `REFLECTSEP_SEED` is set it replaces `--seed` (and the `seed` key of
//! a training config).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use reflectsep_core::evaluation::{eval_pairs, evaluate, EVAL_CHUNK};
use reflectsep_core::gradcheck::{grad_check, LossKind};
use reflectsep_core::imaging::{resize_bilinear, Image, TRAIN_SIZE};
use reflectsep_core::networks::ModelVariant;
use reflectsep_core::synthesis::{ensure_kinds_fit, Augment, KindSet};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::corpus::{export_corpus, Pool};
use crate::error::{Error, ExitStatus, Result};
use crate::fit::fit;
use crate::io::{create_dir, list_images, load_dir, load_image, save_image};
use crate::panels::dump_panels;

pub const SEED_ENV: &str = "REFLECTSEP_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "reflectsep",
    version,
    about = "Single-image reflection separation with adversarial networks",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.\n\
                  REFLECTSEP_SEED, when set, replaces --seed and the seed of a training config."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a corpus of (y, t, r) pairs with a manifest
    Synth(SynthArgs),
    /// Train a separator from a config file
    Train(TrainArgs),
    /// Separate arbitrary images with a trained checkpoint
    Separate(SeparateArgs),
    /// Score a checkpoint on held-out synthesized pairs
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of transmission-scene images
    #[arg(long)]
    pub t_dir: PathBuf,
    /// Directory of reflection-scene images
    #[arg(long)]
    pub r_dir: PathBuf,
    /// Comma-separated synthesis models, or "all"
    #[arg(long, default_value = "all")]
    pub kinds: String,
    /// Number of pairs
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Master seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Side of the synthesized images
    #[arg(long, default_value_t = TRAIN_SIZE)]
    pub size: usize,
    /// Disable random left-right flips
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    /// Checkpoint to load
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to load
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Held-out transmission-scene images (never used in training)
    #[arg(long)]
    pub t_dir: PathBuf,
    /// Held-out reflection-scene images (never used in training)
    #[arg(long)]
    pub r_dir: PathBuf,
    /// Comma-separated synthesis models, or "all"
    #[arg(long, default_value = "all")]
    pub kinds: String,
    /// Pairs per synthesis model
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    /// Master seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for eval.tsv, eval.txt and panels
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Panels to write per synthesis model (needs --out)
    #[arg(long, default_value_t = 0)]
    pub panels: usize,
    /// Disable random left-right flips
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Model variant: b1, b2, b3 or mask
    #[arg(long)]
    pub variant: String,
    /// Loss to check, or "all" for every loss of the variant
    #[arg(long, default_value = "all")]
    pub loss: String,
    /// Maximum relative error
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Master seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `REFLECTSEP_SEED` when set, else `flag`.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(Error::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn kinds(list: &str, side: usize) -> Result<KindSet> {
    let usage = |e: reflectsep_core::Error| Error::Usage(e.to_string());
    let kinds = KindSet::parse_list(list).map_err(usage)?;
    ensure_kinds_fit(kinds, side).map_err(usage)?;
    Ok(kinds)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let kinds = kinds(&a.kinds, a.size)?;
    let (t_files, t) = load_dir(&a.t_dir)?;
    let (r_files, r) = load_dir(&a.r_dir)?;
    let aug = Augment {
        out_size: a.size,
        flip: !a.no_flip,
    };
    export_corpus(
        &Pool::new(t_files, &t)?,
        &Pool::new(r_files, &r)?,
        kinds,
        a.n,
        effective_seed(a.seed)?,
        aug,
        &a.out,
    )?;
    println!("wrote {} pairs to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    run.train.seed = effective_seed(run.train.seed)?;
    let outcome = fit(&run)?;
    let last = outcome.checkpoints.last().expect("final checkpoint");
    println!(
        "trained to step {}; final checkpoint {}",
        outcome.state.step,
        last.display()
    );
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Input files of `separate`, each resized to the model's working size.
pub fn separate_inputs(input: &Path, size: usize) -> Result<Vec<(String, Image)>> {
    let files = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    files
        .iter()
        .map(|f| Ok((stem(f), resize_bilinear(&load_image(f)?, size, size)?)))
        .collect()
}

fn cmd_separate(a: &SeparateArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let model = state.model;
    let inputs = separate_inputs(&a.input, model.config().image_size)?;
    create_dir(&a.out)?;
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let ys: Vec<Image> = chunk.iter().map(|(_, img)| img.clone()).collect();
        let sep = model.separate(&ys)?;
        let mut outputs = vec![("t", sep.t_hat.to_images()?), ("r", sep.r_hat.to_images()?)];
        for (tag, t) in [("mask", &sep.mask), ("gmt", &sep.g_mt), ("gmr", &sep.g_mr)] {
            if let Some(t) = t {
                outputs.push((tag, t.to_images()?));
            }
        }
        for (j, (name, _)) in chunk.iter().enumerate() {
            for (tag, imgs) in &outputs {
                save_image(&imgs[j], &a.out.join(format!("{name}_{tag}.png")))?;
            }
        }
    }
    println!(
        "separated {} image(s) into {}",
        inputs.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    if a.panels > 0 && a.out.is_none() {
        return Err(Error::Usage("--panels needs --out".into()));
    }
    let seed = effective_seed(a.seed)?;
    let model = load_checkpoint(&a.ckpt)?.model;
    let kinds = kinds(&a.kinds, model.config().image_size)?;
    let (_, t) = load_dir(&a.t_dir)?;
    let (_, r) = load_dir(&a.r_dir)?;
    let aug = Augment {
        out_size: model.config().image_size,
        flip: !a.no_flip,
    };
    let grid = evaluate(&model, &t, &r, kinds, a.n, seed, aug)?;
    let table = grid.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        for (name, text) in [("eval.tsv", grid.to_tsv()), ("eval.txt", table)] {
            let path = out.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if a.panels > 0 {
            for kind in kinds.iter() {
                let pairs = eval_pairs(&t, &r, kind, a.panels.min(a.n), seed, aug)?;
                dump_panels(&model, &pairs, &out.join("panels").join(kind.name()))?;
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let variant: ModelVariant = a
        .variant
        .parse()
        .map_err(|e: reflectsep_core::Error| Error::Usage(e.to_string()))?;
    let losses = if a.loss.eq_ignore_ascii_case("all") {
        LossKind::for_variant(variant)
    } else {
        vec![a
            .loss
            .parse()
            .map_err(|e: reflectsep_core::Error| Error::Usage(e.to_string()))?]
    };
    if let Some(k) = losses.iter().find(|k| !k.applies_to(variant)) {
        return Err(Error::Usage(format!(
            "loss {k} does not apply to variant {variant}"
        )));
    }
    let seed = effective_seed(a.seed)?;
    let mut worst = 0.0f64;
    for kind in losses {
        let report = grad_check(variant, kind, a.tol, seed)?;
        println!("{}\tmax_rel_err\t{:.3e}", report.label, report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    println!("max_rel_err\t{worst:.3e}");
    if worst < a.tol {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "max relative error {worst:.3e} is not below {:.3e}",
            a.tol
        )))
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args` (program name first), runs the command and reports errors
/// on stderr.
pub fn run<I, T>(args: I) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitStatus::Usage
            } else {
                ExitStatus::Success
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_status()
        }
    }
}
