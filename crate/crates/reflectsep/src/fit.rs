//! Training runs: data loading, the step loop, logging and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use reflectsep_core::imaging::Image;
use reflectsep_core::losses::LossReport;
use reflectsep_core::training::{train_step, StepReport, TrainState, TrainingData};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{create_dir, load_dir};

pub const LOG_FILE: &str = "train.log";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.ckpt"))
}

/// Result of [`fit`].
#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    /// Checkpoints written by this run, in order; the last is the final state.
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
}

fn names(report: &LossReport) -> impl Iterator<Item = &str> {
    report.terms.iter().map(|t| t.name)
}

/// `step`, the discriminator terms, the generator terms, then the generator total.
pub fn log_header(report: &StepReport) -> String {
    let cols: Vec<&str> = std::iter::once("step")
        .chain(names(&report.discriminator))
        .chain(names(&report.generator))
        .collect();
    format!("{}\ttotal", cols.join("\t"))
}

pub fn log_row(report: &StepReport) -> String {
    let mut row = report.step.to_string();
    for term in report
        .discriminator
        .terms
        .iter()
        .chain(&report.generator.terms)
    {
        row.push('\t');
        row.push_str(&term.value.to_string());
    }
    row.push('\t');
    row.push_str(&report.generator.total.to_string());
    row
}

/// Keeps the header and the rows of steps before `step`.
fn truncate_log(path: &Path, step: u64) -> Result<Option<String>> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return Ok(None);
    };
    let mut kept = format!("{header}\n");
    for line in lines {
        let row_step: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
        if row_step.is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(Some(kept))
}

fn initial_state(run: &RunConfig) -> Result<TrainState> {
    let Some(path) = &run.resume else {
        return Ok(TrainState::new(&run.train)?);
    };
    let mut state = load_checkpoint(path)?;
    let found = state.model.config();
    let expected = run.train.model_config();
    if found != expected {
        return Err(Error::Mismatch {
            what: "model",
            expected: format!(
                "{} ÷{} at {}px",
                expected.variant, expected.width_divisor, expected.image_size
            ),
            found: format!(
                "{} ÷{} at {}px",
                found.variant, found.width_divisor, found.image_size
            ),
        });
    }
    if state.step > run.train.steps {
        return Err(Error::Usage(format!(
            "checkpoint is at step {}, beyond steps = {}",
            state.step, run.train.steps
        )));
    }
    state.optimizer.set_config(run.train.adam());
    Ok(state)
}

/// Runs the configured number of steps on in-memory images.
pub fn fit_images(run: &RunConfig, t: &[Image], r: &[Image]) -> Result<FitOutcome> {
    let cfg = &run.train;
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let mut state = initial_state(run)?;
    let data = TrainingData::new(cfg, t, r)?;
    create_dir(&run.out_dir)?;

    let log_path = run.out_dir.join(LOG_FILE);
    let previous = if run.resume.is_some() {
        truncate_log(&log_path, state.step)?
    } else {
        None
    };
    let has_header = previous.is_some();
    fs::write(&log_path, previous.unwrap_or_default()).map_err(|e| Error::io(&log_path, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_line =
        |line: String| writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e));

    let mut checkpoints = Vec::new();
    let mut last_saved = None;
    let mut header_written = has_header;
    while state.step < cfg.steps {
        let batch = data.batch(cfg, state.step)?;
        let report = train_step(&mut state, cfg, &batch)?;
        if !header_written {
            write_line(log_header(&report))?;
            header_written = true;
        }
        write_line(log_row(&report))?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(&run.out_dir, state.step);
            save_checkpoint(&state, &path)?;
            checkpoints.push(path);
            last_saved = Some(state.step);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if last_saved != Some(state.step) {
        let path = checkpoint_path(&run.out_dir, state.step);
        save_checkpoint(&state, &path)?;
        checkpoints.push(path);
    }
    Ok(FitOutcome {
        state,
        checkpoints,
        log: log_path,
    })
}

/// Loads both image directories, then [`fit_images`].
pub fn fit(run: &RunConfig) -> Result<FitOutcome> {
    let (_, t) = load_dir(&run.t_dir)?;
    let (_, r) = load_dir(&run.r_dir)?;
    fit_images(run, &t, &r)
}
