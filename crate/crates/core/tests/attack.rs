use std::sync::OnceLock;

use nlcen::attack::*;
use nlcen::data::{batch_tensor, synth_generate, Image, Mask, SampleRecord, Split, SyntheticConfig};
use nlcen::segnet::is_base_param;
use nlcen::train::{train, TrainConfig, TrainMode};
use nlcen::{ModelConfig, Nlcen, Result, Variant};
use nlcen_tensor::{ParamStore, Tensor};

#[test]
fn iteration_schedule_follows_closed_form() {
    assert_eq!(iteration_count(16.0), 20);
    assert_eq!(iteration_count(32.0), 36);
    assert_eq!(iteration_count(0.5), 1);
    for eps in PAPER_INTENSITIES {
        let expect = (eps + 4.0).min((1.25 * eps).ceil()).ceil().max(1.0) as usize;
        assert_eq!(iteration_count(eps), expect, "{eps}");
    }
    let table: Vec<usize> = PAPER_INTENSITIES.iter().map(|&e| iteration_count(e)).collect();
    assert_eq!(table, [1, 2, 3, 5, 8, 10, 13, 15, 18, 20, 22, 24, 26, 28, 30, 32, 34, 36]);
}

#[test]
fn target_is_inverted_ground_truth() {
    let zeros = Mask::new(2, 2, vec![0; 4]).unwrap();
    assert_eq!(target_mask(&zeros).data, [1; 4]);
    let checker = Mask::new(2, 3, vec![0, 1, 0, 1, 0, 1]).unwrap();
    assert_eq!(target_mask(&checker).data, [1, 0, 1, 0, 1, 0]);
    assert_eq!(target_mask(&target_mask(&checker)), checker);
}

fn px(v: f64) -> Tensor {
    Tensor::new([1, 1, 1, 1], vec![v]).unwrap()
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let x = Tensor::from_fn([1, 1, 2, 2], |i| 10.0 * i as f64);
    let next = fgsm_step(&x, &Tensor::zeros([1, 1, 2, 2]), &x, &AttackConfig::new(4.0)).unwrap();
    assert_eq!(next, x);
}

#[test]
fn steps_are_clipped_to_the_ball() {
    let cfg = AttackConfig::new(2.0);
    let orig = px(100.0);
    let mut x = fgsm_step(&orig, &px(0.3), &orig, &cfg).unwrap();
    assert_eq!(x.data(), &[99.0]);
    for _ in 0..4 {
        x = fgsm_step(&x, &px(0.3), &orig, &cfg).unwrap();
    }
    assert_eq!(x.data(), &[98.0]);
}

#[test]
fn steps_are_clipped_to_the_pixel_range() {
    let cfg = AttackConfig::new(8.0);
    let x = Tensor::new([1, 1, 1, 2], vec![0.5, 254.5]).unwrap();
    let g = Tensor::new([1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
    assert_eq!(fgsm_step(&x, &g, &x, &cfg).unwrap().data(), &[0.0, 255.0]);
}

/// Per-pixel quadratic loss `Σ (x − c)²` with a fixed prediction.
struct Quadratic(f64);

impl AttackTarget for Quadratic {
    fn loss_grad(&self, x: &Tensor, _: &Mask) -> Result<Tensor> {
        Ok(x.map(|v| 2.0 * (v - self.0)))
    }

    fn predict(&self, x: &Tensor) -> Result<Mask> {
        let s = x.shape();
        Mask::new(s[2], s[3], vec![0; s[2] * s[3]])
    }
}

fn one_pixel(v: u8) -> (Image, Mask) {
    (Image::new(1, 1, 1, vec![v]).unwrap(), Mask::new(1, 1, vec![1]).unwrap())
}

#[test]
fn quadratic_descent_matches_hand_simulation() {
    let (im, gt) = one_pixel(100);
    // ε = 2 → 3 steps: 101, 102, then held at the ball boundary.
    let mut cfg = AttackConfig::new(2.0);
    assert_eq!(cfg.steps(), 3);
    let adv = generate_adversarial(&Quadratic(103.5), &im, &gt, &cfg).unwrap();
    assert_eq!(adv.perturbed.data(), &[102.0]);
    // Minimum inside the ball: reach it, then sign(0) = 0 keeps it there.
    let adv = generate_adversarial(&Quadratic(101.0), &im, &gt, &cfg).unwrap();
    assert_eq!(adv.perturbed.data(), &[101.0]);
    // Step-by-step trace for ε = 6 (8 steps) towards c = 97.2.
    cfg = AttackConfig::new(6.0);
    let mut trace = Vec::new();
    for n in 1..=8 {
        cfg.iterations = Some(n);
        trace.push(generate_adversarial(&Quadratic(97.2), &im, &gt, &cfg).unwrap().perturbed.data()[0]);
    }
    assert_eq!(trace, [99.0, 98.0, 97.0, 98.0, 97.0, 98.0, 97.0, 98.0]);
}

/// A model whose loss does not depend on the input.
struct Constant;

impl AttackTarget for Constant {
    fn loss_grad(&self, x: &Tensor, _: &Mask) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape().to_vec()))
    }

    fn predict(&self, x: &Tensor) -> Result<Mask> {
        Quadratic(0.0).predict(x)
    }
}

#[test]
fn constant_model_is_not_perturbed() {
    let (im, gt) = one_pixel(17);
    let adv = generate_adversarial(&Constant, &im, &gt, &AttackConfig::new(16.0)).unwrap();
    assert_eq!(adv.perturbed, adv.original);
    assert_eq!(adv.iterations, 20);
}

struct Exploding;

impl AttackTarget for Exploding {
    fn loss_grad(&self, x: &Tensor, _: &Mask) -> Result<Tensor> {
        Ok(x.map(|v| if v < 99.5 { f64::NAN } else { 1.0 }))
    }

    fn predict(&self, x: &Tensor) -> Result<Mask> {
        Quadratic(0.0).predict(x)
    }
}

#[test]
fn non_finite_gradient_reports_the_iteration() {
    let (im, gt) = one_pixel(100);
    let err = generate_adversarial(&Exploding, &im, &gt, &AttackConfig::new(4.0)).unwrap_err();
    assert!(matches!(err, nlcen::Error::NonFiniteGradient(1)), "{err}");
}

#[test]
fn invalid_intensity_is_rejected() {
    let (im, gt) = one_pixel(100);
    assert!(generate_adversarial(&Constant, &im, &gt, &AttackConfig::new(0.0)).is_err());
    assert!(generate_adversarial(&Constant, &im, &gt, &AttackConfig { alpha: -1.0, ..AttackConfig::new(1.0) }).is_err());
}

struct Toy {
    net: Nlcen,
    params: ParamStore,
    test: Vec<SampleRecord>,
}

/// A small no-NLCE model trained briefly on 32×32 lung-like data.
fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let data = synth_generate(&SyntheticConfig { count: 100, side: 32, seed: 3, ..Default::default() }).unwrap();
        let train_set: Vec<_> = data.iter().filter(|s| s.split == Split::Train).cloned().collect();
        let test = data.iter().filter(|s| s.split == Split::Test).take(8).cloned().collect();
        let net = Nlcen::new(ModelConfig { input_hw: 32, variant: Variant::NoNlce, ..ModelConfig::default() }).unwrap();
        let mut params = net.init(3).unwrap();
        let cfg = TrainConfig { epochs: 8, ..TrainConfig::default() };
        train(&net, &mut params, &train_set, &cfg, TrainMode::All).unwrap();
        Toy { net, params, test }
    })
}

#[test]
fn vanishing_budget_keeps_the_image() {
    let t = toy();
    let s = &t.test[0];
    let adv = generate_adversarial(&Segmenter::new(&t.net, &t.params), &s.image, &s.mask, &AttackConfig::new(1e-9)).unwrap();
    // One ulp of slack at pixel magnitude.
    assert!(adv.linf() <= 1e-9 + 255.0 * f64::EPSILON, "{}", adv.linf());
    assert!(adv.linf() > 0.0);
}

#[test]
fn samples_stay_in_ball_and_range_for_every_intensity() {
    let t = toy();
    let model = Segmenter::new(&t.net, &t.params);
    let s = &t.test[1];
    for eps in PAPER_INTENSITIES {
        let adv = generate_adversarial(&model, &s.image, &s.mask, &AttackConfig::new(eps)).unwrap();
        assert!(adv.linf() <= eps + 1e-9, "{eps}");
        assert!(adv.perturbed.data().iter().all(|v| (0.0..=255.0).contains(v)));
        assert_eq!(adv.iterations, iteration_count(eps));
        assert_eq!(adv.target, target_mask(&s.mask));
    }
}

#[test]
fn one_iteration_is_one_step() {
    let t = toy();
    let model = Segmenter::new(&t.net, &t.params);
    let s = &t.test[2];
    let cfg = AttackConfig { iterations: Some(1), ..AttackConfig::new(8.0) };
    let adv = generate_adversarial(&model, &s.image, &s.mask, &cfg).unwrap();
    let x0 = batch_tensor(&[&s.image]).unwrap();
    let grad = model.loss_grad(&x0, &target_mask(&s.mask)).unwrap();
    assert_eq!(adv.perturbed, fgsm_step(&x0, &grad, &x0, &cfg).unwrap());
}

#[test]
fn attacks_leave_parameters_alone() {
    let t = toy();
    let before = t.params.checksum(|_| true);
    let s = &t.test[3];
    generate_adversarial(&Segmenter::new(&t.net, &t.params), &s.image, &s.mask, &AttackConfig::new(4.0)).unwrap();
    sweep(&Segmenter::new(&t.net, &t.params), &t.test[..2], &[2.0], 1.0).unwrap();
    assert_eq!(t.params.checksum(|_| true), before);
    assert_eq!(t.params.checksum(is_base_param), t.params.checksum(|_| true));
}

#[test]
fn attack_lowers_dice_on_the_toy_model() {
    let t = toy();
    let rows = sweep(&Segmenter::new(&t.net, &t.params), &t.test, &[2.0, 8.0, 16.0], 1.0).unwrap();
    eprintln!("{}", sweep_csv(&rows));
    assert!(rows[2].dic < rows[0].dic, "{rows:?}");
    assert!(rows[3].dic <= rows[1].dic, "{rows:?}");
}

#[test]
fn sweep_rows_follow_the_intensity_list() {
    let t = toy();
    let model = Segmenter::new(&t.net, &t.params);
    let clean = sweep(&model, &t.test[..2], &[], 1.0).unwrap();
    assert_eq!(clean.len(), 1);
    assert_eq!((clean[0].epsilon, clean[0].n_images), (0.0, 2));
    let dup = sweep(&model, &t.test[..2], &[4.0, 4.0], 1.0).unwrap();
    assert_eq!(dup[1], dup[2]);
    assert_eq!(dup[0], clean[0]);
    let full = sweep(&model, &t.test[..1], &PAPER_INTENSITIES, 1.0).unwrap();
    assert_eq!(full.len(), 19);
    assert!(sweep(&model, &[], &[1.0], 1.0).is_err());
}

#[test]
fn sweep_csv_format() {
    let rows = [SweepRow { epsilon: 0.5, dic: 0.9, jsc: 2.0 / 3.0, n_images: 50 }];
    assert_eq!(sweep_csv(&rows), "epsilon,dic,jsc,n_images\n0.500000,0.900000,0.666667,50\n");
}
