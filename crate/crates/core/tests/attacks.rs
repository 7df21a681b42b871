mod common;

use common::{images, rng, tiny_cnn, tiny_vit};
use dadl::attacks::{
    fast_at, n_fgsm, pgd, pgd_eval, project, run_attack, sample_targets, AttackConfig, AttackInit, Differentiable,
    ModelView, NormBall,
};
use dadl::model::{AdapterSpec, Mode, Model, NormKind, Phase};
use dadl::numerics::Tensor;
use dadl::{Error, Result};
use proptest::prelude::*;

const EPS: f64 = 4.0 / 255.0;

/// Softmax regression `z = x·W + b` with a hand-derived input gradient.
struct Linear {
    w: Vec<f64>, // [d, c]
    b: Vec<f64>,
    d: usize,
    c: usize,
}

impl Linear {
    fn random(d: usize, c: usize, seed: u64) -> Self {
        let w = Tensor::uniform(&[d * c], -3.0, 3.0, &mut rng(seed)).into_data();
        let b = Tensor::uniform(&[c], -1.0, 1.0, &mut rng(seed + 1)).into_data();
        Self { w, b, d, c }
    }

    fn probs(&self, row: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = (0..self.c)
            .map(|j| self.b[j] + (0..self.d).map(|i| row[i] * self.w[i * self.c + j]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn loss(&self, x: &Tensor, labels: &[usize]) -> f64 {
        x.data().chunks(self.d).zip(labels).map(|(row, &y)| -self.probs(row)[y].ln()).sum()
    }
}

impl Differentiable for Linear {
    fn num_classes(&self) -> usize {
        self.c
    }

    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Vec::with_capacity(x.numel());
        for (row, &y) in x.data().chunks(self.d).zip(labels) {
            let mut p = self.probs(row);
            p[y] -= 1.0;
            g.extend((0..self.d).map(|i| (0..self.c).map(|j| p[j] * self.w[i * self.c + j]).sum::<f64>()));
        }
        Ok((self.loss(x, labels), Tensor::new(x.shape().to_vec(), g)?))
    }
}

/// Same logits for every input.
struct Constant(usize);

impl Differentiable for Constant {
    fn num_classes(&self) -> usize {
        self.0
    }

    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        Ok((labels.len() as f64 * (self.0 as f64).ln(), Tensor::zeros(x.shape())))
    }
}

struct Poisoned;

impl Differentiable for Poisoned {
    fn num_classes(&self) -> usize {
        2
    }

    fn loss_and_input_grad(&self, x: &Tensor, _: &[usize]) -> Result<(f64, Tensor)> {
        Ok((0.0, Tensor::full(x.shape(), f64::NAN)))
    }
}

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

fn per_example_l2(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    let per = a.numel() / n;
    a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .collect()
}

fn in_unit_box(x: &Tensor) -> bool {
    x.data().iter().all(|v| (0.0..=1.0).contains(v))
}

#[test]
fn project_examples() {
    let x = Tensor::full(&[1, 2, 2, 1], 0.5);
    let mut d = Tensor::zeros(x.shape());
    d.data_mut()[0] = 0.1;
    let p = project(&d, &x, &AttackConfig::pgd(EPS, 1, EPS));
    assert!((p.data()[0] - 4.0 / 255.0).abs() < 1e-15);
    assert!((p.data()[0] - 0.01569).abs() < 1e-5);

    let inside = Tensor::from_slice(x.shape(), &[0.01, -0.01, 0.0, 0.005]).unwrap();
    assert_eq!(project(&inside, &x, &AttackConfig::pgd(EPS, 1, EPS)), inside);

    let cfg = AttackConfig::pgd_l2(0.3, 4);
    let dir = Tensor::from_slice(x.shape(), &[0.3, -0.1, 0.2, 0.15]).unwrap();
    let d2 = dir.map(|v| v * 2.0 * 0.3 / dir.norm());
    assert!((project(&d2, &x, &cfg).norm() - 0.3).abs() < 1e-12);
}

#[test]
fn project_clips_to_unit_box() {
    let x = Tensor::from_slice(&[1, 1, 2, 1], &[0.995, 0.002]).unwrap();
    let d = Tensor::from_slice(x.shape(), &[0.01, -0.01]).unwrap();
    let p = project(&d, &x, &AttackConfig::pgd(EPS, 1, EPS));
    assert!((p.data()[0] - 0.005).abs() < 1e-12);
    assert!((p.data()[1] + 0.002).abs() < 1e-12);
}

#[test]
fn one_step_from_zero_is_fgsm() {
    let f = Linear::random(6, 3, 4);
    let x = Tensor::uniform(&[5, 6], 0.0, 1.0, &mut rng(9));
    let y = [0, 1, 2, 0, 1];
    let step = 0.03;
    let adv = run_attack(&f, &x, &y, &AttackConfig::pgd(0.05, 1, step)).unwrap();
    let (_, g) = f.loss_and_input_grad(&x, &y).unwrap();
    for ((a, xi), gi) in adv.data().iter().zip(x.data()).zip(g.data()) {
        let s = if *gi > 0.0 { 1.0 } else if *gi < 0.0 { -1.0 } else { 0.0 };
        assert!((a - (xi + step * s).clamp(0.0, 1.0)).abs() < 1e-15);
    }
}

#[test]
fn binary_linear_model_matches_closed_form_optimum() {
    // logits [0, x1 - x2]: the loss-maximizing ℓ∞ perturbation is a corner.
    let f = Linear { w: vec![0.0, 1.0, 0.0, -1.0], b: vec![0.0, 0.0], d: 2, c: 2 };
    let x = Tensor::from_slice(&[2, 2], &[0.5, 0.5, 0.3, 0.6]).unwrap();
    let y = [0, 1];
    let adv = run_attack(&f, &x, &y, &AttackConfig::pgd(0.1, 10, 0.025)).unwrap();
    let want = [0.6, 0.4, 0.2, 0.7];
    for (a, w) in adv.data().iter().zip(want) {
        assert!((a - w).abs() < 1e-12, "{:?}", adv.data());
    }
    // No feasible point does better: check every corner of the box.
    let best = f.loss(&adv, &y);
    for mask in 0..16u32 {
        let corner: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + if mask >> i & 1 == 1 { 0.1 } else { -0.1 })
            .collect();
        assert!(f.loss(&Tensor::new(vec![2, 2], corner).unwrap(), &y) <= best + 1e-12);
    }
}

#[test]
fn pgd2_projection_activates_and_holds() {
    let f = Linear::random(16, 4, 1);
    let x = Tensor::uniform(&[32, 16], 0.0, 1.0, &mut rng(2));
    let y: Vec<usize> = (0..32).map(|i| i % 4).collect();
    let cfg = AttackConfig::pgd2(EPS);
    assert!(cfg.steps as f64 * cfg.step_size > EPS);
    assert!((cfg.step_size - 2.5 / 255.0).abs() < 1e-15);
    let adv = run_attack(&f, &x, &y, &cfg).unwrap();
    assert!(linf(&adv, &x) <= EPS + 1e-9);
    // Interior pixels with nonzero gradient end exactly on the boundary.
    let hits = adv.data().iter().zip(x.data()).filter(|(a, b)| ((*a - *b).abs() - EPS).abs() < 1e-12).count();
    assert!(hits > adv.numel() / 2);
}

#[test]
fn preset_step_sizes() {
    assert!((AttackConfig::pgd5(EPS).step_size - 1.0 / 255.0).abs() < 1e-15);
    assert!((AttackConfig::fast_at(EPS).step_size - 5.0 / 255.0).abs() < 1e-15);
    let n = AttackConfig::n_fgsm(EPS);
    assert!((n.step_size - 6.0 / 255.0).abs() < 1e-15);
    assert_eq!(n.init, AttackInit::UniformRadius(8.0 / 255.0));
    assert!((n.linf_reach() - 14.0 / 255.0).abs() < 1e-15);
    assert_eq!(AttackConfig::pgd40(EPS).steps, 40);
    assert_eq!(AttackConfig::preset("targeted_pgd5", EPS).unwrap(), AttackConfig::pgd5(EPS).targeted());
    assert_eq!(AttackConfig::preset("l2_pgd10", 0.5).unwrap().norm, NormBall::L2);
    assert!(matches!(AttackConfig::preset("autoattack", EPS), Err(Error::Config(_))));
}

#[test]
fn zero_gradient_models() {
    let x = Tensor::uniform(&[8, 3, 3, 1], 0.0, 1.0, &mut rng(3));
    let y = vec![1; 8];
    for cfg in [AttackConfig::pgd40(EPS), AttackConfig::pgd2(EPS), AttackConfig::fgsm(EPS)] {
        assert_eq!(run_attack(&Constant(3), &x, &y, &cfg).unwrap(), x);
    }
    for cfg in [AttackConfig::fast_at(EPS).with_seed(5), AttackConfig::n_fgsm(EPS).with_seed(5)] {
        let r = match cfg.init {
            AttackInit::UniformInBall => cfg.epsilon,
            AttackInit::UniformRadius(r) => r,
            AttackInit::Zero => unreachable!(),
        };
        let init = Tensor::uniform(x.shape(), -r, r, &mut rng(5));
        let want = x.lincomb(1.0, &init, 1.0).unwrap().map(|v| v.clamp(0.0, 1.0));
        let got = run_attack(&Constant(3), &x, &y, &cfg).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);
    }
}

#[test]
fn non_finite_gradient_is_a_numeric_error() {
    let x = Tensor::full(&[1, 2], 0.5);
    for cfg in [AttackConfig::pgd2(EPS), AttackConfig::pgd40(EPS), AttackConfig::n_fgsm(EPS)] {
        assert!(matches!(run_attack(&Poisoned, &x, &[0], &cfg), Err(Error::Numeric(_))));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let x = Tensor::full(&[1, 2], 0.5);
    let f = Constant(2);
    let mut cfg = AttackConfig::pgd2(EPS);
    cfg.steps = 0;
    assert!(matches!(run_attack(&f, &x, &[0], &cfg), Err(Error::Config(_))));
    let cfg = AttackConfig::pgd(-0.1, 2, 0.01);
    assert!(matches!(run_attack(&f, &x, &[0], &cfg), Err(Error::Config(_))));
    let cfg = AttackConfig::pgd(EPS, 2, 0.0);
    assert!(matches!(run_attack(&f, &x, &[0], &cfg), Err(Error::Config(_))));
    assert!(matches!(run_attack(&f, &x, &[0, 1], &AttackConfig::pgd2(EPS)), Err(Error::Dimension(_))));
}

#[test]
fn targets_exclude_the_label_and_cover_the_rest() {
    let labels: Vec<usize> = (0..4000).map(|i| i % 5).collect();
    let t = sample_targets(&labels, 5, &mut rng(11));
    let mut counts = [[0usize; 5]; 5];
    for (&y, &k) in labels.iter().zip(&t) {
        assert_ne!(y, k);
        counts[y][k] += 1;
    }
    for (y, row) in counts.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if k != y {
                assert!((150..=250).contains(&c), "{:?}", counts);
            }
        }
    }
}

#[test]
fn targeted_attack_lowers_target_loss() {
    let f = Linear::random(10, 4, 21);
    let x = Tensor::uniform(&[64, 10], 0.0, 1.0, &mut rng(22));
    let y: Vec<usize> = (0..64).map(|i| i % 4).collect();
    let cfg = AttackConfig::pgd(0.05, 5, 0.02).targeted().with_seed(3);
    let targets = sample_targets(&y, 4, &mut rng(3));
    let adv = run_attack(&f, &x, &y, &cfg).unwrap();
    assert!(f.loss(&adv, &targets) < f.loss(&x, &targets));
    assert!(linf(&adv, &x) <= 0.05 + 1e-9);
}

#[test]
fn pgd40_is_at_least_as_strong_as_pgd2_on_linear_models() {
    let f = Linear::random(12, 3, 31);
    let x = Tensor::uniform(&[128, 12], 0.0, 1.0, &mut rng(32));
    let y: Vec<usize> = (0..128).map(|i| i % 3).collect();
    let a2 = run_attack(&f, &x, &y, &AttackConfig::pgd2(EPS)).unwrap();
    let a40 = run_attack(&f, &x, &y, &AttackConfig::pgd40(EPS)).unwrap();
    assert!(f.loss(&a40, &y) >= f.loss(&a2, &y) - 1e-9);
    assert!(linf(&a40, &x) <= EPS + 1e-9);
}

#[test]
fn stochastic_starts_are_seeded() {
    let f = Linear::random(8, 3, 41);
    let x = Tensor::uniform(&[4, 8], 0.0, 1.0, &mut rng(42));
    let y = [0, 1, 2, 0];
    for base in [AttackConfig::fast_at(EPS), AttackConfig::n_fgsm(EPS), AttackConfig::pgd_l2(0.5, 3)] {
        let mut cfg = base.with_seed(7);
        cfg.init = if cfg.init == AttackInit::Zero { AttackInit::UniformInBall } else { cfg.init };
        let a = run_attack(&f, &x, &y, &cfg).unwrap();
        assert_eq!(a, run_attack(&f, &x, &y, &cfg).unwrap());
        assert_ne!(a, run_attack(&f, &x, &y, &cfg.clone().with_seed(8)).unwrap());
    }
}

#[test]
fn model_input_gradient_matches_finite_differences() {
    for cfg in [tiny_vit(AdapterSpec::NormParams), tiny_cnn(NormKind::BatchNorm, AdapterSpec::BnDualStats)] {
        let (model, store) = Model::build(cfg.clone(), 3).unwrap();
        let x = images(2, &cfg, 4);
        let view = ModelView::new(&model, &store, Mode::Robust);
        let y = [0, 2];
        let (_, g) = view.loss_and_input_grad(&x, &y).unwrap();
        let h = 1e-5;
        for i in (0..x.numel()).step_by(7) {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            let num = (view.loss_and_input_grad(&up, &y).unwrap().0 - view.loss_and_input_grad(&down, &y).unwrap().0)
                / (2.0 * h);
            let a = g.data()[i];
            assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()) + 1e-9, "{} vs {}", a, num);
        }
    }
}

#[test]
fn model_attacks_are_feasible_and_leave_parameters_alone() {
    let cfg = tiny_vit(AdapterSpec::NormParams);
    let (model, store) = Model::build(cfg.clone(), 5).unwrap();
    let before = store.clone();
    let x = images(6, &cfg, 6);
    let y = [0, 1, 2, 0, 1, 2];
    let outs = [
        pgd(&model, &store, Mode::Robust, &x, &y, &AttackConfig::pgd2(EPS)).unwrap(),
        pgd_eval(&model, &store, Mode::Clean, &x, &y, EPS).unwrap(),
        fast_at(&model, &store, Mode::Soup(0.5), &x, &y, EPS, 1).unwrap(),
    ];
    for adv in &outs {
        assert!(linf(adv, &x) <= EPS + 1e-9);
        assert!(in_unit_box(adv));
    }
    let nf = n_fgsm(&model, &store, Mode::Robust, &x, &y, EPS, 2).unwrap();
    assert!(linf(&nf, &x) <= 14.0 / 255.0 + 1e-9);
    assert!(in_unit_box(&nf));
    assert_eq!(store, before);
    assert!(matches!(
        pgd(&model, &store, Mode::Robust, &x, &y, &AttackConfig::pgd40(EPS)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn train_phase_view_discards_batch_statistics() {
    let cfg = tiny_cnn(NormKind::BatchNorm, AdapterSpec::BnDualStats);
    let (model, store) = Model::build(cfg.clone(), 8).unwrap();
    let before = store.clone();
    let x = images(4, &cfg, 9);
    let view = ModelView::new(&model, &store, Mode::Robust).with_phase(Phase::Train);
    let adv = run_attack(&view, &x, &[0, 1, 2, 0], &AttackConfig::pgd2(EPS)).unwrap();
    assert!(linf(&adv, &x) <= EPS + 1e-9);
    assert_eq!(store, before);
}

fn linear_case() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..12, 2usize..6, 1usize..6)
}

fn setup(seed: u64, d: usize, c: usize, n: usize) -> (Linear, Tensor, Vec<usize>) {
    let f = Linear::random(d, c, seed);
    // Some pixels sit on the box edges so that clipping is exercised.
    let x = Tensor::uniform(&[n, d], -0.2, 1.2, &mut rng(seed ^ 1)).map(|v| v.clamp(0.0, 1.0));
    let y = (0..n).map(|i| (seed as usize + i) % c).collect();
    (f, x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn linf_attacks_are_feasible((seed, d, c, n) in linear_case(), eps in 1e-3f64..0.3) {
        let (f, x, y) = setup(seed, d, c, n);
        for cfg in [
            AttackConfig::pgd2(eps),
            AttackConfig::pgd5(eps),
            AttackConfig::pgd40(eps),
            AttackConfig::fast_at(eps).with_seed(seed),
            AttackConfig::pgd2(eps).targeted().with_seed(seed),
        ] {
            let adv = run_attack(&f, &x, &y, &cfg).unwrap();
            prop_assert!(linf(&adv, &x) <= eps + 1e-9);
            prop_assert!(in_unit_box(&adv));
        }
    }

    #[test]
    fn n_fgsm_stays_within_its_reach((seed, d, c, n) in linear_case(), eps in 1e-3f64..0.3) {
        let (f, x, y) = setup(seed, d, c, n);
        let cfg = AttackConfig::n_fgsm(eps).with_seed(seed);
        let adv = run_attack(&f, &x, &y, &cfg).unwrap();
        prop_assert!(linf(&adv, &x) <= 3.5 * eps + 1e-9);
        prop_assert!(in_unit_box(&adv));
    }

    #[test]
    fn l2_attacks_are_feasible((seed, d, c, n) in linear_case(), eps in 1e-3f64..1.0, steps in 1usize..6) {
        let (f, x, y) = setup(seed, d, c, n);
        let mut cfg = AttackConfig::pgd_l2(eps, steps).with_seed(seed);
        let adv = run_attack(&f, &x, &y, &cfg).unwrap();
        prop_assert!(per_example_l2(&adv, &x).iter().all(|&r| r <= eps + 1e-9));
        cfg.init = AttackInit::UniformInBall;
        let adv = run_attack(&f, &x, &y, &cfg).unwrap();
        prop_assert!(per_example_l2(&adv, &x).iter().all(|&r| r <= eps + 1e-9));
        prop_assert!(in_unit_box(&adv));
    }

    #[test]
    fn signed_ascent_never_lowers_linear_loss((seed, d, c, n) in linear_case(), eps in 1e-3f64..0.3) {
        let (f, x, y) = setup(seed, d, c, n);
        let clean = f.loss(&x, &y);
        for cfg in [AttackConfig::fgsm(eps), AttackConfig::pgd2(eps), AttackConfig::pgd5(eps)] {
            prop_assert!(f.loss(&run_attack(&f, &x, &y, &cfg).unwrap(), &y) >= clean - 1e-12);
        }
        // Random starts: the step never loses ground relative to the start.
        for cfg in [AttackConfig::fast_at(eps).with_seed(seed), AttackConfig::n_fgsm(eps).with_seed(seed)] {
            let r = match cfg.init {
                AttackInit::UniformRadius(r) => r,
                _ => cfg.epsilon,
            };
            let init = Tensor::uniform(x.shape(), -r, r, &mut rng(seed));
            let start = project(&init, &x, &cfg);
            let start_loss = f.loss(&x.lincomb(1.0, &start, 1.0).unwrap(), &y);
            prop_assert!(f.loss(&run_attack(&f, &x, &y, &cfg).unwrap(), &y) >= start_loss - 1e-12);
        }
    }
}
