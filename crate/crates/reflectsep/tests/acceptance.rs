//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Arguments that do not start with `-` filter
//! criteria by substring.

mod common;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use reflectsep::checkpoint::load_checkpoint;
use reflectsep::config::RunConfig;
use reflectsep::fit::{checkpoint_path, fit, log_header, log_row, LOG_FILE};
use reflectsep_core::autograd::{BnMode, Graph};
use reflectsep_core::gradcheck::{grad_check, LossKind, GRADCHECK_COORDS};
use reflectsep_core::imaging::{psnr, ssim, Image};
use reflectsep_core::losses::loss_discriminator_weak;
use reflectsep_core::networks::{Branch, ModelConfig, ModelVariant, Scene, SeparatorModel};
use reflectsep_core::rng::RandomState;
use reflectsep_core::synthesis::*;
use reflectsep_core::tensor::Tensor;
use reflectsep_core::training::*;
use tempfile::tempdir;

/// Result of one criterion: pass flag and a short measurement summary.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(checks: &[(bool, String)]) -> Verdict {
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, d)| d.as_str())
        .collect();
    let detail = if failed.is_empty() {
        checks
            .iter()
            .map(|(_, d)| d.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    } else {
        format!("failed: {}", failed.join("; "))
    };
    Verdict {
        pass: failed.is_empty(),
        detail,
    }
}

fn noise(side: usize, rng: &mut RandomState) -> Image {
    Image::from_fn(side, side, 3, |_, _, _| rng.uniform())
}

const SYNTH_PAIRS: usize = 100;
const SYNTH_BUDGET: Duration = Duration::from_secs(30);

fn synthesis_validity() -> Verdict {
    let start = Instant::now();
    let mut out_of_range = 0usize;
    let mut linear_mismatch = 0usize;
    let mut checked = 0usize;
    for kind in SynthModelKind::ALL {
        for i in 0..SYNTH_PAIRS {
            let mut rng = RandomState::derive(17, i as u64);
            let (t, r) = (noise(64, &mut rng), noise(64, &mut rng));
            let mut p = sample_params(KindSet::single(kind), &mut rng).unwrap();
            let y = synthesize(&t, &r, &p).unwrap();
            out_of_range += y
                .data()
                .iter()
                .filter(|v| !(0.0..=1.0).contains(*v))
                .count();
            checked += y.data().len();
            if kind == SynthModelKind::Linear {
                p.w = 1.0;
                if synth_linear(&t, &r, &p).unwrap() != t {
                    linear_mismatch += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(&[
        (
            out_of_range == 0,
            format!("{out_of_range} of {checked} pixels outside [0,1] over 5x{SYNTH_PAIRS} pairs"),
        ),
        (
            linear_mismatch == 0,
            format!("w=1 linear differs from t in {linear_mismatch}/{SYNTH_PAIRS} pairs"),
        ),
        (
            elapsed < SYNTH_BUDGET,
            format!("{:.1}s (limit 30s)", elapsed.as_secs_f64()),
        ),
    ])
}

fn parameter_regime() -> Verdict {
    let mut rng = RandomState::new(2024);
    let samples: Vec<SynthParams> = (0..10_000)
        .map(|_| sample_params(KindSet::all(), &mut rng).unwrap())
        .collect();
    let mean_w = samples.iter().map(|p| p.w).sum::<f64>() / samples.len() as f64;
    let inside = samples.iter().all(|p| {
        (0.5..=0.7).contains(&p.w)
            && (2.0..=5.0).contains(&p.sigma)
            && (4..=16).contains(&p.ghost_dx)
            && (4..=16).contains(&p.ghost_dy)
            && (0.4..=0.8).contains(&p.ghost_alpha)
            && p.in_range()
    });
    let kinds: BTreeSet<&str> = samples.iter().map(|p| p.kind.name()).collect();
    verdict(&[
        (
            (0.594..=0.606).contains(&mean_w),
            format!("mean w = {mean_w:.5} (target [0.594, 0.606])"),
        ),
        (
            inside,
            "all 10^4 samples inside w∈[0.5,0.7], σ∈[2,5], shift∈[4,16], α∈[0.4,0.8]".into(),
        ),
        (
            kinds.len() == 5,
            format!("{} model kinds drawn", kinds.len()),
        ),
    ])
}

fn naive_psnr(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..a.channels() {
                let d = a.get(y, x, c) - b.get(y, x, c);
                sum += d * d;
            }
        }
    }
    let mse = sum / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Direct 2-D Gaussian window, two-pass moments, valid positions only.
fn naive_ssim(a: &Image, b: &Image) -> f64 {
    const K: usize = 11;
    let mut window = [[0.0; K]; K];
    let mut total = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *w = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *w;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for c in 0..a.channels() {
        for y0 in 0..=a.height() - K {
            for x0 in 0..=a.width() - K {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let w = window[i][j] / total;
                        ma += w * a.get(y0 + i, x0 + j, c);
                        mb += w * b.get(y0 + i, x0 + j, c);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let w = window[i][j] / total;
                        let (da, db) =
                            (a.get(y0 + i, x0 + j, c) - ma, b.get(y0 + i, x0 + j, c) - mb);
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = RandomState::new(99);
    let (mut psnr_err, mut ssim_err) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let a = noise(32, &mut rng);
        let amp = 0.05 * (i % 5 + 1) as f64;
        let b = Image::from_fn(32, 32, 3, |y, x, c| {
            (a.get(y, x, c) + rng.uniform_in(-amp, amp)).clamp(0.0, 1.0)
        });
        let b = if i % 4 == 3 { noise(32, &mut rng) } else { b };
        psnr_err = psnr_err.max((psnr(&a, &b).unwrap() - naive_psnr(&a, &b)).abs());
        ssim_err = ssim_err.max((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs());
    }
    let base = noise(32, &mut rng);
    let lowered = Image::from_fn(32, 32, 3, |y, x, c| base.get(y, x, c) * 0.9);
    let shifted = Image::from_fn(32, 32, 3, |y, x, c| lowered.get(y, x, c) + 0.1);
    let uniform_err = (psnr(&lowered, &shifted).unwrap() - 20.0).abs().max(
        (psnr(
            &Image::filled(32, 32, 3, 0.3),
            &Image::filled(32, 32, 3, 0.4),
        )
        .unwrap()
            - 20.0)
            .abs(),
    );
    verdict(&[
        (
            psnr_err < 1e-6,
            format!("PSNR max |lib − naive| = {psnr_err:.1e}"),
        ),
        (
            ssim_err < 1e-6,
            format!("SSIM max |lib − naive| = {ssim_err:.1e}"),
        ),
        (
            uniform_err < 1e-9,
            format!("uniform 0.1 difference: |PSNR − 20| = {uniform_err:.1e}"),
        ),
    ])
}

const GOLDEN_COUNTS: [(ModelVariant, usize); 4] = [
    (ModelVariant::B1, 15_845_512),
    (ModelVariant::B2, 13_051_659),
    (ModelVariant::B3, 13_051_788),
    (ModelVariant::Mask, 13_560_652),
];

fn random_batch(n: usize, side: usize, rng: &mut RandomState) -> Tensor {
    let len = n * 3 * side * side;
    Tensor::new(
        &[n, 3, side, side],
        (0..len).map(|_| rng.uniform()).collect(),
    )
    .unwrap()
}

/// Shape mismatches of one full-size variant at batch `n`.
fn shape_errors(model: &SeparatorModel, n: usize, rng: &mut RandomState) -> Vec<String> {
    let variant = model.variant();
    let mut errors = Vec::new();
    let mut expect = |what: String, got: &[usize], want: &[usize]| {
        if got != want {
            errors.push(format!(
                "{variant} {what} at batch {n}: {got:?} != {want:?}"
            ));
        }
    };
    let y = random_batch(n, 128, rng);
    let mut g = Graph::inference();
    let yv = g.constant(y.clone());
    let enc = model.encode(&mut g, yv).unwrap();
    for (i, (c, s)) in [(32, 64), (64, 32), (128, 16), (256, 8), (256, 4)]
        .into_iter()
        .enumerate()
    {
        expect(
            format!("f{}", i + 1),
            g.shape(enc.features[i]),
            &[n, c, s, s],
        );
    }
    expect(
        "bottleneck".into(),
        g.shape(enc.bottleneck),
        &[n, 128, 4, 4],
    );
    for &branch in variant.branches() {
        let out = model.decode(&mut g, branch, &enc).unwrap();
        expect(
            format!("decode {branch:?}"),
            g.shape(out),
            &[n, branch.out_channels(), 128, 128],
        );
    }
    let cond = variant.conditional_discriminators().then_some(yv);
    for scene in [Scene::T, Scene::R] {
        let d = model.discriminate(&mut g, scene, yv, cond).unwrap();
        expect(format!("discriminate {scene:?}"), g.shape(d), &[n, 1, 4, 4]);
    }
    let sep = model.separate_tensor(&y).unwrap();
    let image = [n, 3, 128, 128];
    expect("t_hat".into(), sep.t_hat.shape(), &image);
    expect("r_hat".into(), sep.r_hat.shape(), &image);
    let optional = [
        (
            "y_hat",
            sep.y_hat.as_ref(),
            variant != ModelVariant::B1,
            vec![n, 3, 128, 128],
        ),
        (
            "mask",
            sep.mask.as_ref(),
            variant == ModelVariant::Mask,
            vec![n, 1, 128, 128],
        ),
        (
            "G_mt",
            sep.g_mt.as_ref(),
            variant == ModelVariant::Mask,
            vec![n, 3, 128, 128],
        ),
        (
            "G_mr",
            sep.g_mr.as_ref(),
            variant == ModelVariant::Mask,
            vec![n, 3, 128, 128],
        ),
        (
            "w_y",
            sep.w_y.as_ref(),
            variant == ModelVariant::B3,
            vec![n, 1],
        ),
    ];
    for (name, tensor, present, shape) in optional {
        match (tensor, present) {
            (Some(t), true) => expect(name.into(), t.shape(), &shape),
            (None, false) => {}
            (t, _) => expect(
                format!("{name} presence"),
                &[usize::from(t.is_some())],
                &[usize::from(present)],
            ),
        }
    }
    errors
}

/// Alias names still resolve to their canonical storage, and that storage moved.
fn sharing_survives_training(variant: ModelVariant) -> Result<usize, String> {
    let cfg = TrainConfig {
        variant,
        mode: if variant == ModelVariant::Mask {
            TrainMode::Weak
        } else {
            TrainMode::Supervised
        },
        kinds: KindSet::parse_list("linear,blur,clip").unwrap(),
        batch_size: 2,
        width_divisor: 8,
        image_size: 32,
        seed: 8,
        ..TrainConfig::default()
    };
    let pool: Vec<Image> = (0..4).map(|i| common::scene(48, 300 + i)).collect();
    let data = TrainingData::new(&cfg, &pool, &pool).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let before = state.model.params().clone();
    let aliases = before.aliases().to_vec();
    let resolves = |s: &TrainState| {
        aliases
            .iter()
            .all(|(a, c)| s.model.params().id(a) == s.model.params().id(c))
    };
    if !resolves(&state) {
        return Err(format!("{variant}: aliases differ before training"));
    }
    for k in 0..10 {
        train_step(&mut state, &cfg, &data.batch(&cfg, k).unwrap()).map_err(|e| e.to_string())?;
    }
    let after = state.model.params();
    if !resolves(&state) || after.len() != before.len() {
        return Err(format!("{variant}: sharing map changed during training"));
    }
    for (alias, canonical) in &aliases {
        if after.by_name(alias) != after.by_name(canonical)
            || after.by_name(canonical) == before.by_name(canonical)
        {
            return Err(format!(
                "{variant}: {alias} diverged from {canonical} or never trained"
            ));
        }
    }
    Ok(aliases.len())
}

fn architecture() -> Verdict {
    let mut checks = Vec::new();
    let mut rng = RandomState::new(5);
    let mut shape_failures = Vec::new();
    for (variant, golden) in GOLDEN_COUNTS {
        let model =
            SeparatorModel::new(ModelConfig::standard(variant), &mut RandomState::new(0)).unwrap();
        let count = model.param_count();
        checks.push((
            count == golden,
            format!("{variant} {count} params (golden {golden})"),
        ));
        for n in [1, 4] {
            shape_failures.extend(shape_errors(&model, n, &mut rng));
        }
    }
    checks.push((
        shape_failures.is_empty(),
        if shape_failures.is_empty() {
            "all shapes match at batch 1 and 4".into()
        } else {
            shape_failures.join(", ")
        },
    ));
    for variant in [ModelVariant::B2, ModelVariant::B3, ModelVariant::Mask] {
        match sharing_survives_training(variant) {
            Ok(n) => checks.push((
                n > 0,
                format!("{variant}: {n} aliased names share storage after 10 steps"),
            )),
            Err(e) => checks.push((false, e)),
        }
    }
    let b1 = SeparatorModel::new(
        ModelConfig::reduced(ModelVariant::B1, 8, 32),
        &mut RandomState::new(0),
    )
    .unwrap();
    let t = b1.decoder_layers(Branch::T).unwrap();
    let r = b1.decoder_layers(Branch::R).unwrap();
    let separate =
        b1.params().aliases().is_empty() && t.iter().zip(r).all(|(a, b)| a.weight != b.weight);
    checks.push((separate, "B1 decoders share nothing".into()));
    verdict(&checks)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut runs = 0;
    for variant in ModelVariant::ALL {
        for kind in LossKind::for_variant(variant) {
            let report = grad_check(variant, kind, 1e-3, 0).unwrap();
            runs += 1;
            if report.coords != GRADCHECK_COORDS || !report.passed() {
                failures.push(format!("{} {:.2e}", report.label, report.max_rel_err));
            }
            if report.max_rel_err >= worst.0 {
                worst = (report.max_rel_err, report.label.clone());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(&[
        (
            failures.is_empty(),
            format!(
                "{runs} checks x {GRADCHECK_COORDS} coords, worst {:.2e} ({}) {}",
                worst.0,
                worst.1,
                failures.join(", ")
            ),
        ),
        (
            elapsed < Duration::from_secs(300),
            format!("{:.1}s (limit 300s)", elapsed.as_secs_f64()),
        ),
    ])
}

const OVERFIT_STEPS: u64 = 2000;

fn overfit() -> Verdict {
    let start = Instant::now();
    let cfg = TrainConfig {
        variant: ModelVariant::B3,
        mode: TrainMode::Supervised,
        kinds: KindSet::single(SynthModelKind::Linear),
        steps: OVERFIT_STEPS,
        batch_size: 4,
        width_divisor: 2,
        image_size: 64,
        seed: 11,
        ..TrainConfig::default()
    };
    let t_pool: Vec<Image> = (0..4).map(|i| common::scene(96, 500 + i)).collect();
    let r_pool: Vec<Image> = (0..4).map(|i| common::scene(96, 600 + i)).collect();
    let pairs = build_batch(
        &t_pool,
        &r_pool,
        cfg.kinds,
        4,
        cfg.augment(),
        &mut RandomState::new(12),
    )
    .unwrap();
    let batch = StepBatch::from_pairs(&pairs).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let dir = tempdir().unwrap();
    let mut log = String::new();
    for _ in 0..OVERFIT_STEPS {
        let report = train_step(&mut state, &cfg, &batch).unwrap();
        if report.step == 0 {
            writeln!(log, "{}", log_header(&report)).unwrap();
        }
        writeln!(log, "{}", log_row(&report)).unwrap();
    }
    let sep = state.model.separate_tensor(&batch.y).unwrap();
    let t_hat = sep.t_hat.to_images().unwrap();
    let mean_psnr = pairs
        .iter()
        .zip(&t_hat)
        .map(|(p, th)| psnr(&p.t, th).unwrap())
        .sum::<f64>()
        / 4.0;
    // Loss of the trained model at step 2000, from a throwaway step.
    let final_report = train_step(&mut state.clone(), &cfg, &batch).unwrap();
    writeln!(log, "{}", log_row(&final_report)).unwrap();
    let log_path = dir.path().join(LOG_FILE);
    std::fs::write(&log_path, &log).unwrap();

    let text = std::fs::read_to_string(&log_path).unwrap();
    let total_at = |step: u64| -> f64 {
        let row = text
            .lines()
            .skip(1)
            .find(|l| l.split('\t').next() == Some(&step.to_string()))
            .unwrap();
        row.rsplit('\t').next().unwrap().parse().unwrap()
    };
    let (first, last) = (total_at(0), total_at(OVERFIT_STEPS));
    let elapsed = start.elapsed();
    verdict(&[
        (
            mean_psnr >= 25.0,
            format!(
                "mean PSNR(t, t_hat) = {mean_psnr:.2} dB after {OVERFIT_STEPS} steps (need ≥ 25)"
            ),
        ),
        (
            last <= 0.5 * first,
            format!(
                "total {first:.3} → {last:.3} ({:.1}% drop, need ≥ 50%)",
                100.0 * (1.0 - last / first)
            ),
        ),
        (
            elapsed < Duration::from_secs(1200),
            format!("{:.0}s (limit 1200s)", elapsed.as_secs_f64()),
        ),
    ])
}

const WEAK_STEPS: u64 = 500;

fn weak_supervision() -> Verdict {
    let dir = tempdir().unwrap();
    let t_dir = common::write_scenes(&dir.path().join("cafe"), 20, 64, 41);
    let r_dir = common::write_scenes(&dir.path().join("street"), 20, 64, 42);
    let run = RunConfig {
        train: TrainConfig {
            variant: ModelVariant::Mask,
            mode: TrainMode::Weak,
            kinds: KindSet::all(),
            steps: WEAK_STEPS,
            batch_size: 4,
            width_divisor: 8,
            image_size: 64,
            seed: 21,
            checkpoint_every: 0,
            ..TrainConfig::default()
        },
        t_dir,
        r_dir,
        out_dir: dir.path().join("run"),
        resume: None,
    };
    let outcome = match fit(&run) {
        Ok(o) => o,
        Err(e) => return verdict(&[(false, format!("training failed: {e}"))]),
    };
    let log = std::fs::read_to_string(&outcome.log).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    let finite = rows.iter().all(|r| {
        r.split('\t')
            .skip(1)
            .all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
    });

    let cfg = &run.train;
    let (_, t_imgs) = reflectsep::io::load_dir(&run.t_dir).unwrap();
    let (_, r_imgs) = reflectsep::io::load_dir(&run.r_dir).unwrap();
    let data = TrainingData::new(cfg, &t_imgs, &r_imgs).unwrap();
    let TrainingData::Weak {
        t_synth,
        r_synth,
        t_real,
        r_real,
    } = &data
    else {
        unreachable!()
    };
    let disjoint =
        t_synth.iter().all(|i| !t_real.contains(i)) && r_synth.iter().all(|i| !r_real.contains(i));

    let model = &outcome.state.model;
    let mut audit_ok = true;
    let mut mask_ok = true;
    for k in [0, 1, WEAK_STEPS - 1, 4242] {
        let batch = data.batch(cfg, k).unwrap();
        let poisoned = Tensor::full(batch.t.shape(), 1e6);
        let mut totals = Vec::new();
        for (t, r) in [(&batch.t, &batch.r), (&poisoned, &poisoned)] {
            let mut g = Graph::new(
                model.generator_params(),
                BnMode::Batch {
                    update_running: false,
                },
            );
            let (y, tv, rv) = (
                g.constant(batch.y.clone()),
                g.constant(t.clone()),
                g.constant(r.clone()),
            );
            let out = model.forward(&mut g, y).unwrap();
            let obj = generator_objective(&mut g, model, &out, (y, tv, rv), cfg.weights).unwrap();
            audit_ok &= !g.depends_on(obj.total(), tv) && !g.depends_on(obj.total(), rv);
            totals.push(obj.report(&g).total);
        }
        audit_ok &= totals[0] == totals[1];

        let mut g = Graph::new(
            model.discriminator_params(),
            BnMode::Batch {
                update_running: false,
            },
        );
        let (y, t, r) = (
            g.constant(batch.y.clone()),
            g.constant(batch.t.clone()),
            g.constant(batch.r.clone()),
        );
        let out = model.forward(&mut g, y).unwrap();
        let (th, rh) = (g.detach(out.t_hat), g.detach(out.r_hat));
        let obj = loss_discriminator_weak(&mut g, model, t, r, th, rh).unwrap();
        let (dt, dr) = (obj.term("d_t").unwrap(), obj.term("d_r").unwrap());
        audit_ok &= g.depends_on(dt, t)
            && !g.depends_on(dt, r)
            && g.depends_on(dr, r)
            && !g.depends_on(dr, t);

        let sep = model.separate_tensor(&batch.y).unwrap();
        mask_ok &= sep
            .mask
            .unwrap()
            .data()
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
    }
    verdict(&[
        (
            rows.len() == WEAK_STEPS as usize && finite,
            format!("{} logged steps, all terms finite = {finite}", rows.len()),
        ),
        (
            disjoint,
            "synthesis and discriminator halves disjoint".into(),
        ),
        (
            audit_ok,
            "generator objective ignores scene batches; D_t/D_r read only their own real scenes"
                .into(),
        ),
        (mask_ok, "mask within [0,1] on 4 batches".into()),
    ])
}

fn write_config(root: &Path, steps: u64, every: u64, resume: Option<&Path>) -> std::path::PathBuf {
    let (t, r) = common::corpus(root, 5);
    let mut text = format!(
        "variant = b3\nkinds = linear,blur,clip,clip_noblur\nsteps = {steps}\nbatch_size = 2\nwidth_divisor = 8\n\
         image_size = 32\ncheckpoint_every = {every}\nseed = 31\nt_dir = {}\nr_dir = {}\nout_dir = out\n",
        t.display(),
        r.display()
    );
    if let Some(p) = resume {
        writeln!(text, "resume = {}", p.display()).unwrap();
    }
    let path = root.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_cli(config: &Path) -> bool {
    common::bin()
        .args(["train", "--config", config.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .success()
}

fn determinism() -> Verdict {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ok = train_cli(&write_config(&a, 6, 3, None)) && train_cli(&write_config(&b, 6, 3, None));
    let same_files = ["ckpt_000003.ckpt", "ckpt_000006.ckpt", "train.log"]
        .iter()
        .all(|f| {
            std::fs::read(a.join("out").join(f)).ok() == std::fs::read(b.join("out").join(f)).ok()
        });

    let c = dir.path().join("c");
    let resumed_ok = train_cli(&write_config(
        &c,
        6,
        3,
        Some(&checkpoint_path(&a.join("out"), 3)),
    ));
    let final_a = std::fs::read(checkpoint_path(&a.join("out"), 6)).unwrap_or_default();
    let final_c = std::fs::read(checkpoint_path(&c.join("out"), 6)).unwrap_or_default();
    let params_equal = load_checkpoint(&checkpoint_path(&c.join("out"), 6))
        .map(|s| {
            s.model.params()
                == load_checkpoint(&checkpoint_path(&a.join("out"), 6))
                    .unwrap()
                    .model
                    .params()
        })
        .unwrap_or(false);
    verdict(&[
        (
            ok && same_files,
            "two cmd_train runs: checkpoints and log bitwise identical".into(),
        ),
        (
            resumed_ok && params_equal && !final_a.is_empty() && final_a == final_c,
            "resume at step 3 → step 6 equals uninterrupted run bitwise".into(),
        ),
    ])
}

fn half_split() -> Verdict {
    let names: Vec<String> = (0..178).map(|i| format!("cafe_{i:03}.jpg")).collect();
    let split = |seed| split_halves(&names, &mut RandomState::derive(seed, SPLIT_STREAM)).unwrap();
    let (a, b) = split(7);
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    let union: BTreeSet<&String> = sa.union(&sb).copied().collect();
    let stable = (0..5).all(|_| split(7) == (a.clone(), b.clone()));
    let seeded = split(8) != (a.clone(), b.clone());
    verdict(&[
        (
            a.len() == 89 && b.len() == 89,
            format!("sizes {}/{}", a.len(), b.len()),
        ),
        (
            sa.is_disjoint(&sb) && union.len() == 178,
            "disjoint, union is the full set".into(),
        ),
        (
            stable && seeded,
            "identical across reruns, differs across seeds".into(),
        ),
    ])
}

type Criterion = (&'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 9] = [
    ("synthesis validity", synthesis_validity),
    ("parameter regime", parameter_regime),
    ("metric oracles", metric_oracles),
    ("architecture shapes", architecture),
    ("gradient suite", gradient_suite),
    ("optimization smoke", overfit),
    ("weak supervision", weak_supervision),
    ("determinism", determinism),
    ("half split", half_split),
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, criterion) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|_| Verdict {
            pass: false,
            detail: "panicked".into(),
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {name}: {} [{:.1}s]",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
