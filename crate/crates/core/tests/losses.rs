//! Loss functions against direct reimplementations that read tensor data
//! and never touch the autograd graph's loss ops.

use proptest::prelude::*;
use reflectsep_core::autograd::{Graph, Var};
use reflectsep_core::error::Error;
use reflectsep_core::losses::*;
use reflectsep_core::networks::{ModelConfig, ModelVariant, Scene, SeparatorModel};
use reflectsep_core::rng::RandomState;
use reflectsep_core::tensor::Tensor;

const S: usize = 32;
const N: usize = 2;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut RandomState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

fn reduced(variant: ModelVariant, seed: u64) -> SeparatorModel {
    SeparatorModel::new(
        ModelConfig::reduced(variant, 8, S),
        &mut RandomState::new(seed),
    )
    .unwrap()
}

fn oracle_mean_log(v: &[f64], complement: bool) -> f64 {
    let c = |x: f64| x.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    v.iter()
        .map(|&x| {
            if complement {
                (1.0 - c(x)).ln()
            } else {
                c(x).ln()
            }
        })
        .sum::<f64>()
        / v.len() as f64
}

fn oracle_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Per-sample Euclidean norms of `a − b` divided by `scale(V)`, averaged.
fn oracle_norm(a: &Tensor, b: &Tensor, scale: fn(f64) -> f64) -> f64 {
    let n = a.batch();
    let per = a.numel() / n;
    (0..n)
        .map(|s| {
            let sq: f64 = (0..per)
                .map(|k| (a.data()[s * per + k] - b.data()[s * per + k]).powi(2))
                .sum();
            sq.sqrt() / scale(per as f64)
        })
        .sum::<f64>()
        / n as f64
}

fn feature_oracle(a: &Tensor, b: &Tensor) -> f64 {
    oracle_norm(a, b, |v| v)
}

fn rms_oracle(a: &Tensor, b: &Tensor) -> f64 {
    oracle_norm(a, b, f64::sqrt)
}

/// Encoder features computed on a fresh graph.
fn features(model: &SeparatorModel, x: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let enc = model.encode(&mut g, v).unwrap();
    enc.features.iter().map(|&f| g.value(f).clone()).collect()
}

fn scores(model: &SeparatorModel, scene: Scene, x: &Tensor, cond: Option<&Tensor>) -> Vec<f64> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let cv = cond.map(|c| g.constant(c.clone()));
    let s = model.discriminate(&mut g, scene, xv, cv).unwrap();
    g.value(s).data().to_vec()
}

fn scale_rows(x: &Tensor, w: &[f64]) -> Tensor {
    let per = x.numel() / x.batch();
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * w[i / per])
            .collect(),
    )
    .unwrap()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
    .unwrap()
}

fn mask_mul(x: &Tensor, m: &Tensor, invert: bool) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let data = (0..n * c * hw)
        .map(|i| {
            let mv = m.data()[(i / (c * hw)) * hw + i % hw];
            x.data()[i] * if invert { 1.0 - mv } else { mv }
        })
        .collect();
    Tensor::new(&[n, c, h, w], data).unwrap()
}

fn content_oracle(
    model: &SeparatorModel,
    y: &Tensor,
    t: &Tensor,
    r: &Tensor,
    th: &Tensor,
    rh: &Tensor,
    w: &[f64],
) -> f64 {
    let (fy, ft, fr, fth, frh) = (
        features(model, y),
        features(model, t),
        features(model, r),
        features(model, th),
        features(model, rh),
    );
    let wr: Vec<f64> = w.iter().map(|v| 1.0 - v).collect();
    (0..5)
        .map(|i| {
            let mix = add(&scale_rows(&fth[i], w), &scale_rows(&frh[i], &wr));
            feature_oracle(&fy[i], &mix)
                + feature_oracle(&ft[i], &fth[i])
                + feature_oracle(&fr[i], &frh[i])
        })
        .sum()
}

struct Fixture {
    y: Tensor,
    t: Tensor,
    r: Tensor,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = RandomState::new(seed);
    let t = random(&[N, 3, S, S], 0.0, 1.0, &mut rng);
    let r = random(&[N, 3, S, S], 0.0, 1.0, &mut rng);
    let y = Tensor::new(
        t.shape(),
        t.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| 0.6 * a + 0.4 * b)
            .collect(),
    )
    .unwrap();
    Fixture { y, t, r }
}

#[test]
fn gan_losses_match_direct_formula() {
    let mut rng = RandomState::new(1);
    let real = random(&[3, 1, 4, 4], 0.0, 1.0, &mut rng);
    let fake = random(&[3, 1, 4, 4], 0.0, 1.0, &mut rng);
    let mut g = Graph::inference();
    let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
    let d = gan_d_loss(&mut g, rv, fv).unwrap();
    let expected = -oracle_mean_log(real.data(), false) - oracle_mean_log(fake.data(), true);
    assert!((g.scalar(d) - expected).abs() < 1e-9);
    let gl = gan_g_loss(&mut g, fv);
    assert!((g.scalar(gl) + oracle_mean_log(fake.data(), false)).abs() < 1e-9);
}

#[test]
fn perfect_scores_give_near_zero_losses() {
    let mut g = Graph::inference();
    let real = g.constant(Tensor::full(&[2, 1, 4, 4], 1.0 - SCORE_EPS));
    let fake = g.constant(Tensor::full(&[2, 1, 4, 4], SCORE_EPS));
    let d = gan_d_loss(&mut g, real, fake).unwrap();
    assert!(g.scalar(d) < 1e-6);
    let gl = gan_g_loss(&mut g, real);
    assert!(g.scalar(gl) < 1e-6);
}

#[test]
fn discriminator_loss_falls_as_real_scores_rise() {
    let mut g = Graph::inference();
    let fake = g.constant(Tensor::full(&[1, 1, 4, 4], 0.4));
    let lo = g.constant(Tensor::full(&[1, 1, 4, 4], 0.3));
    let hi = g.constant(Tensor::full(&[1, 1, 4, 4], 0.6));
    let a = gan_d_loss(&mut g, lo, fake).unwrap();
    let b = gan_d_loss(&mut g, hi, fake).unwrap();
    assert!(g.scalar(b) < g.scalar(a));
}

#[test]
fn l1_matches_direct_formula_and_rejects_mismatch() {
    let mut rng = RandomState::new(2);
    let a = random(&[2, 3, 5, 5], 0.0, 1.0, &mut rng);
    let b = random(&[2, 3, 5, 5], 0.0, 1.0, &mut rng);
    let mut g = Graph::inference();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = l1_term(&mut g, av, bv).unwrap();
    assert!((g.scalar(l) - oracle_l1(a.data(), b.data())).abs() < 1e-9);
    let same = l1_term(&mut g, av, av).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    let odd = g.constant(Tensor::zeros(&[2, 3, 5, 4]));
    assert!(matches!(
        l1_term(&mut g, av, odd),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn norm_terms_match_direct_formula() {
    let mut rng = RandomState::new(3);
    let a = random(&[3, 4, 6, 6], -1.0, 1.0, &mut rng);
    let b = random(&[3, 4, 6, 6], -1.0, 1.0, &mut rng);
    let mut g = Graph::inference();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let f = feature_term(&mut g, av, bv).unwrap();
    let l2 = l2_term(&mut g, av, bv).unwrap();
    assert!((g.scalar(f) - feature_oracle(&a, &b)).abs() < 1e-12);
    assert!((g.scalar(l2) - rms_oracle(&a, &b)).abs() < 1e-12);
}

#[test]
fn content_loss_matches_dual_implementation() {
    let model = reduced(ModelVariant::B3, 4);
    let fx = fixture(5);
    let mut rng = RandomState::new(6);
    let th = random(&[N, 3, S, S], 0.0, 1.0, &mut rng);
    let rh = random(&[N, 3, S, S], 0.0, 1.0, &mut rng);
    let w = [0.3, 0.65];
    let mut g = Graph::inference();
    let [y, t, r, thv, rhv] = [&fx.y, &fx.t, &fx.r, &th, &rh].map(|x| g.constant(x.clone()));
    let wv = g.constant(Tensor::new(&[N, 1], w.to_vec()).unwrap());
    let enc = model.encode(&mut g, y).unwrap();
    let c = content_loss(&mut g, &model, &enc, t, r, thv, rhv, wv).unwrap();
    let expected = content_oracle(&model, &fx.y, &fx.t, &fx.r, &th, &rh, &w);
    assert!(
        (g.scalar(c) - expected).abs() < 1e-6 * expected.max(1.0),
        "{} vs {expected}",
        g.scalar(c)
    );
    assert!(g.scalar(c) > 0.0);
}

#[test]
fn content_loss_vanishes_for_identical_scenes() {
    let model = reduced(ModelVariant::B3, 7);
    let x = fixture(8).t;
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let wv = g.constant(Tensor::new(&[N, 1], vec![0.2, 0.9]).unwrap());
    let enc = model.encode(&mut g, xv).unwrap();
    let c = content_loss(&mut g, &model, &enc, xv, xv, xv, xv, wv).unwrap();
    assert!(g.scalar(c).abs() < 1e-12);
}

/// Runs the full supervised objective on inference graphs and the oracle side by side.
fn supervised_pair(variant: ModelVariant, weights: LossWeights) -> (LossReport, f64) {
    let model = reduced(variant, 9);
    let fx = fixture(10);
    let mut g = Graph::inference();
    let [y, t, r] = [&fx.y, &fx.t, &fx.r].map(|x| g.constant(x.clone()));
    let out = model.forward(&mut g, y).unwrap();
    let obj = loss_supervised(&mut g, &model, &out, y, t, r, weights).unwrap();
    let report = obj.report(&g);

    let th = g.value(out.t_hat).clone();
    let rh = g.value(out.r_hat).clone();
    let mut total = -oracle_mean_log(&scores(&model, Scene::T, &th, Some(&fx.y)), false)
        - oracle_mean_log(&scores(&model, Scene::R, &rh, Some(&fx.y)), false)
        + weights.lambda1 * (oracle_l1(fx.t.data(), th.data()) + oracle_l1(fx.r.data(), rh.data()));
    if let Some(yh) = out.y_hat {
        total += weights.lambda1 * oracle_l1(fx.y.data(), g.value(yh).data());
    }
    if let Some(w) = out.w_y {
        let w = g.value(w).data().to_vec();
        total += weights.lambda2 * content_oracle(&model, &fx.y, &fx.t, &fx.r, &th, &rh, &w);
    }
    (report, total)
}

#[test]
fn supervised_objective_matches_oracle_per_variant() {
    for variant in [ModelVariant::B1, ModelVariant::B2, ModelVariant::B3] {
        let (report, oracle) = supervised_pair(variant, LossWeights::default());
        assert!(
            (report.total - oracle).abs() < 1e-6 * oracle.max(1.0),
            "{variant}: {} vs {oracle}",
            report.total
        );
        assert!((report.total - report.weighted_sum()).abs() < 1e-6);
        let names: Vec<_> = report.terms.iter().map(|t| t.name).collect();
        let expected: &[&str] = match variant {
            ModelVariant::B1 => &["adv_t", "adv_r", "l1_t", "l1_r"],
            ModelVariant::B2 => &["adv_t", "adv_r", "l1_t", "l1_r", "l1_y"],
            _ => &["adv_t", "adv_r", "l1_t", "l1_r", "l1_y", "content"],
        };
        assert_eq!(names, expected);
    }
}

#[test]
fn supervised_b3_golden_value() {
    let (report, oracle) = supervised_pair(ModelVariant::B3, LossWeights::default());
    const GOLDEN: f64 = B3_GOLDEN;
    assert!((oracle - GOLDEN).abs() < 1e-6, "oracle {oracle:.12}");
    assert!(
        (report.total - GOLDEN).abs() < 1e-6,
        "report {:.12}",
        report.total
    );
}

#[test]
fn zero_weights_leave_adversarial_terms() {
    let (report, _) = supervised_pair(
        ModelVariant::B3,
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        },
    );
    let adv = report.get("adv_t").unwrap() + report.get("adv_r").unwrap();
    assert!((report.total - adv).abs() < 1e-12);
}

/// Zeroes the discriminator head so every score is exactly 0.5.
fn neutral_discriminators(model: &mut SeparatorModel) {
    for scene in ["disc_t", "disc_r"] {
        for p in ["weight", "bias"] {
            let name = format!("{scene}.conv6.{p}");
            let shape = model.params().by_name(&name).unwrap().shape().to_vec();
            model
                .params_mut()
                .set_by_name(&name, Tensor::zeros(&shape))
                .unwrap();
        }
    }
}

#[test]
fn perfect_b2_generators_cost_two_log_two() {
    let mut model = reduced(ModelVariant::B2, 11);
    neutral_discriminators(&mut model);
    let fx = fixture(12);
    let mut g = Graph::inference();
    let [y, t, r] = [&fx.y, &fx.t, &fx.r].map(|x| g.constant(x.clone()));
    let mut out = model.forward(&mut g, y).unwrap();
    out.t_hat = t;
    out.r_hat = r;
    out.y_hat = Some(y);
    let report = loss_supervised(&mut g, &model, &out, y, t, r, LossWeights::default())
        .unwrap()
        .report(&g);
    assert!((report.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn supervised_rejects_mask_and_weak_rejects_supervised() {
    let fx = fixture(13);
    let mask = reduced(ModelVariant::Mask, 0);
    let mut g = Graph::inference();
    let [y, t, r] = [&fx.y, &fx.t, &fx.r].map(|x| g.constant(x.clone()));
    let out = mask.forward(&mut g, y).unwrap();
    assert!(matches!(
        loss_supervised(&mut g, &mask, &out, y, t, r, LossWeights::default()),
        Err(Error::WrongVariant { .. })
    ));
    // parameters are cached by id, so each model gets its own graph
    let b3 = reduced(ModelVariant::B3, 0);
    let mut g = Graph::inference();
    let y = g.constant(fx.y.clone());
    let out = b3.forward(&mut g, y).unwrap();
    assert!(matches!(
        loss_weak(&mut g, &b3, &out, y, LossWeights::default()),
        Err(Error::WrongVariant { .. })
    ));
}

fn weak_pair(model: &SeparatorModel, y: &Tensor) -> (LossReport, f64) {
    let w = LossWeights::default();
    let mut g = Graph::inference();
    let yv = g.constant(y.clone());
    let out = model.forward(&mut g, yv).unwrap();
    let report = loss_weak(&mut g, model, &out, yv, w).unwrap().report(&g);
    let val = |v: Option<Var>| g.value(v.unwrap()).clone();
    let (th, rh, yh, m) = (
        g.value(out.t_hat).clone(),
        g.value(out.r_hat).clone(),
        val(out.y_hat),
        val(out.mask),
    );
    let (gmt, gmr) = (mask_mul(&th, &m, false), mask_mul(&rh, &m, true));
    let (my, iy) = (mask_mul(y, &m, false), mask_mul(y, &m, true));
    let (f_my, f_mt, f_iy, f_mr) = (
        features(model, &my),
        features(model, &gmt),
        features(model, &iy),
        features(model, &gmr),
    );
    let feat: f64 = (0..5)
        .map(|i| feature_oracle(&f_my[i], &f_mt[i]) + feature_oracle(&f_iy[i], &f_mr[i]))
        .sum();
    let total = -oracle_mean_log(&scores(model, Scene::T, &th, None), false)
        - oracle_mean_log(&scores(model, Scene::R, &rh, None), false)
        + w.lambda1 * (rms_oracle(y, &yh) + rms_oracle(&my, &gmt) + rms_oracle(&iy, &gmr))
        + w.lambda2 * feat;
    (report, total)
}

#[test]
fn weak_objective_matches_oracle_and_golden() {
    let model = reduced(ModelVariant::Mask, 14);
    let (report, oracle) = weak_pair(&model, &fixture(15).y);
    assert!(
        (report.total - oracle).abs() < 1e-6 * oracle.max(1.0),
        "{} vs {oracle}",
        report.total
    );
    const GOLDEN: f64 = WEAK_GOLDEN;
    assert!((oracle - GOLDEN).abs() < 1e-6, "oracle {oracle:.12}");
    let names: Vec<_> = report.terms.iter().map(|t| t.name).collect();
    assert_eq!(
        names,
        ["adv_t", "adv_r", "l2_y", "l2_mt", "l2_mr", "feat_mt", "feat_mr"]
    );
}

#[test]
fn identity_mask_with_identity_transmission_zeroes_masked_term() {
    let model = reduced(ModelVariant::Mask, 16);
    let y = fixture(17).y;
    let mut g = Graph::inference();
    let yv = g.constant(y);
    let mut out = model.forward(&mut g, yv).unwrap();
    let ones = g.constant(Tensor::full(&[N, 1, S, S], 1.0));
    out.mask = Some(ones);
    out.t_hat = yv;
    out.g_mt = Some(g.mul_mask(yv, ones).unwrap());
    let report = loss_weak(&mut g, &model, &out, yv, LossWeights::default())
        .unwrap()
        .report(&g);
    assert_eq!(report.get("l2_mt"), Some(0.0));
    assert_eq!(report.get("feat_mt"), Some(0.0));
}

#[test]
fn report_total_is_weighted_sum_for_weak() {
    let model = reduced(ModelVariant::Mask, 18);
    let (report, _) = weak_pair(&model, &fixture(19).y);
    assert!((report.total - report.weighted_sum()).abs() < 1e-6);
    assert!(report.check_finite().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basic_losses_are_non_negative_and_finite(
        a in prop::collection::vec(0.0f64..=1.0, 32),
        b in prop::collection::vec(0.0f64..=1.0, 32),
    ) {
        let mut g = Graph::inference();
        let at = g.constant(Tensor::new(&[2, 1, 4, 4], a).unwrap());
        let bt = g.constant(Tensor::new(&[2, 1, 4, 4], b).unwrap());
        let losses = [
            gan_d_loss(&mut g, at, bt).unwrap(),
            gan_g_loss(&mut g, bt),
            l1_term(&mut g, at, bt).unwrap(),
            l2_term(&mut g, at, bt).unwrap(),
            feature_term(&mut g, at, bt).unwrap(),
        ];
        for l in losses {
            let v = g.scalar(l);
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        let ab = l1_term(&mut g, at, bt).unwrap();
        let ba = l1_term(&mut g, bt, at).unwrap();
        prop_assert_eq!(g.scalar(ab), g.scalar(ba));
    }
}

// Recorded from the oracle side of the dual implementations above.
const B3_GOLDEN: f64 = 69.062071186344;
const WEAK_GOLDEN: f64 = 43.091975808487;
