#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reflectsep::config::RunConfig;
use reflectsep::io::save_image;
use reflectsep_core::imaging::Image;
use reflectsep_core::networks::ModelVariant;
use reflectsep_core::rng::RandomState;
use reflectsep_core::synthesis::KindSet;
use reflectsep_core::training::{TrainConfig, TrainMode};

/// Smooth random scene: a few oriented sinusoids per channel.
pub fn scene(side: usize, seed: u64) -> Image {
    let mut rng = RandomState::new(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.uniform_in(-0.3, 0.3),
                rng.uniform_in(-0.3, 0.3),
                rng.uniform_in(0.0, 6.3),
                rng.uniform_in(0.05, 0.15),
            ]
        })
        .collect();
    Image::from_fn(side, side, 3, |y, x, c| {
        let v: f64 = waves[3 * c..3 * c + 3]
            .iter()
            .map(|[a, b, p, amp]| amp * (a * x as f64 + b * y as f64 + p).sin())
            .sum();
        (0.5 + v).clamp(0.0, 1.0)
    })
}

/// Writes `n` scenes named `img_000.png`… into `dir`.
pub fn write_scenes(dir: &Path, n: usize, side: usize, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_image(
            &scene(side, seed * 1000 + i as u64),
            &dir.join(format!("img_{i:03}.png")),
        )
        .unwrap();
    }
    dir.to_path_buf()
}

/// Two scene categories under `root/t` and `root/r`.
pub fn corpus(root: &Path, n: usize) -> (PathBuf, PathBuf) {
    (
        write_scenes(&root.join("t"), n, 40, 1),
        write_scenes(&root.join("r"), n, 40, 2),
    )
}

/// Reduced supervised run writing to `root/out`.
pub fn small_run(root: &Path, variant: ModelVariant, steps: u64, every: u64) -> RunConfig {
    let (t_dir, r_dir) = corpus(root, 4);
    let mode = if variant == ModelVariant::Mask {
        TrainMode::Weak
    } else {
        TrainMode::Supervised
    };
    RunConfig {
        train: TrainConfig {
            variant,
            mode,
            kinds: KindSet::parse_list("linear,blur,clip,clip_noblur").unwrap(),
            steps,
            batch_size: 2,
            seed: 5,
            checkpoint_every: every,
            width_divisor: 8,
            image_size: 32,
            ..TrainConfig::default()
        },
        t_dir,
        r_dir,
        out_dir: root.join("out"),
        resume: None,
    }
}

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reflectsep"));
    cmd.env_remove("REFLECTSEP_SEED");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}
