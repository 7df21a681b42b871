mod common;

use common::{tiny_cnn, tiny_vit};
use dadl::attacks::AttackConfig;
use dadl::data::{synth_shapes, CorruptionKind, CorruptionSpec, Dataset};
use dadl::eval::{
    accuracy, alpha_pareto, argmax_rows, default_shift_specs, embedder_filters, filter_pca, netpbm, pareto_front,
    rescale_u8, robust_accuracy, shift_suite, write_filter_images, ParetoRow,
};
use dadl::model::{AdapterSpec, Mode, Model, ModelConfig, NormKind, ParamStore};
use dadl::numerics::Tensor;
use dadl::train::{train, TrainConfig};
use dadl::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn zeroed(store: &ParamStore) -> ParamStore {
    store.zip_map(store, |a, _| Tensor::zeros(a.shape())).unwrap()
}

#[test]
fn argmax_ties_go_to_the_lowest_index() {
    let t = Tensor::from_slice(&[3, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, -1.0, -1.0, -1.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
}

#[test]
fn constant_logits_score_the_first_class_share() {
    let cfg = ModelConfig { num_classes: 10, ..tiny_vit(AdapterSpec::ClsToken) };
    let (model, store) = Model::build(cfg, 1).unwrap();
    let ds = synth_shapes(200, 8, 10, 2).unwrap();
    assert_eq!(accuracy(&model, &zeroed(&store), &ds, Mode::Clean).unwrap(), 0.1);
}

#[test]
fn memorized_labels_score_one_and_shuffling_changes_nothing() {
    let cfg = tiny_vit(AdapterSpec::NormParams);
    let (model, store) = Model::build(cfg, 3).unwrap();
    let base = synth_shapes(300, 8, 3, 4).unwrap();
    let pred = argmax_rows(&model.logits(&store, &base.images, Mode::Clean).unwrap());
    let memo = Dataset::new(base.images.clone(), pred, "memo", 3).unwrap();
    assert_eq!(accuracy(&model, &store, &memo, Mode::Clean).unwrap(), 1.0);
    assert_eq!(accuracy(&model, &store, &memo, Mode::Soup(1.0)).unwrap(), 1.0);

    let a = accuracy(&model, &store, &base, Mode::Robust).unwrap();
    let mut order: Vec<usize> = (0..base.len()).rev().collect();
    order.rotate_left(17);
    let shuffled = base.subset(&order).unwrap();
    assert_eq!(accuracy(&model, &store, &shuffled, Mode::Robust).unwrap(), a);
}

#[test]
fn robust_accuracy_examples() {
    let cfg = tiny_cnn(NormKind::GroupNorm(2), AdapterSpec::NormParams);
    let (model, store) = Model::build(cfg, 5).unwrap();
    let ds = synth_shapes(120, 8, 3, 6).unwrap();
    let clean = accuracy(&model, &store, &ds, Mode::Robust).unwrap();
    let zero = AttackConfig::pgd(0.0, 3, 0.01);
    assert_eq!(robust_accuracy(&model, &store, &ds, Mode::Robust, &zero).unwrap(), clean);
    for attack in [AttackConfig::pgd2(0.1), AttackConfig::pgd40(0.1), AttackConfig::n_fgsm(0.1)] {
        assert!(robust_accuracy(&model, &store, &ds, Mode::Robust, &attack).unwrap() <= clean);
    }
}

#[test]
fn untrained_models_sit_near_chance() {
    let cfg = ModelConfig { num_classes: 10, ..tiny_vit(AdapterSpec::ClsToken) };
    let ds = synth_shapes(400, 8, 10, 7).unwrap();
    for seed in 0..3 {
        let (model, store) = Model::build(cfg.clone(), seed).unwrap();
        let c = accuracy(&model, &store, &ds, Mode::Clean).unwrap();
        let r = robust_accuracy(&model, &store, &ds, Mode::Clean, &AttackConfig::pgd2(4.0 / 255.0)).unwrap();
        assert!((c - 0.1).abs() <= 0.05, "clean {c}");
        assert!((r - 0.1).abs() <= 0.05, "robust {r}");
    }
}

#[test]
fn shift_suite_columns_and_mean() {
    let cfg = tiny_vit(AdapterSpec::ClsToken);
    let (model, store) = Model::build(cfg, 8).unwrap();
    let ds = synth_shapes(60, 8, 3, 9).unwrap();
    let mut specs = default_shift_specs(3);
    specs.push(CorruptionSpec::new(CorruptionKind::Identity, 0, 0));
    let row = shift_suite(&model, &store, &ds, &specs, Mode::Clean).unwrap();
    assert_eq!(row.shift_accs.len(), 10);
    assert_eq!(row.shift_accs["identity"], row.clean_acc);
    let mean = row.shift_accs.values().sum::<f64>() / 10.0;
    assert!((row.mean_acc - mean).abs() < 1e-15);
    let lo = row.shift_accs.values().cloned().fold(1.0, f64::min);
    let hi = row.shift_accs.values().cloned().fold(0.0, f64::max);
    assert!(lo <= row.mean_acc && row.mean_acc <= hi);
    assert!(matches!(shift_suite(&model, &store, &ds, &[], Mode::Clean), Err(Error::Contract(_))));
}

fn quick_train_cfg(alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        epochs: 6,
        warmup_epochs: 1,
        batch_size: 16,
        base_lr: 1e-2,
        monitor_samples: 0,
        attack: AttackConfig::pgd2(0.1),
        seed: 3,
        ..Default::default()
    }
}

fn shapes_cnn() -> ModelConfig {
    ModelConfig { width: 6, depth: 2, num_classes: 4, image_size: 12, ..ModelConfig::cnn_micro() }
        .with_norm(NormKind::GroupNorm(2))
        .with_adapter(AdapterSpec::NormParams)
}

#[test]
fn noise_accuracy_falls_with_severity_on_a_trained_model() {
    let cfg = shapes_cnn();
    let (model, store) = Model::build(cfg, 10).unwrap();
    let data = synth_shapes(256, 12, 4, 11).unwrap();
    let (store, _) = train(&model, store, &data, &quick_train_cfg(1.0)).unwrap();
    let test = synth_shapes(200, 12, 4, 12).unwrap();
    let specs: Vec<_> = (1..=5).map(|s| CorruptionSpec::new(CorruptionKind::GaussianNoise, s, 13)).collect();
    let row = shift_suite(&model, &store, &test, &specs, Mode::Clean).unwrap();
    assert!(row.clean_acc > 0.5, "model did not learn: {}", row.clean_acc);
    let accs: Vec<f64> = (1..=5).map(|s| row.shift_accs[&format!("gaussian_noise_{s}")]).collect();
    for w in accs.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "{accs:?}");
    }
}

#[test]
fn alpha_sweep_rows_are_reproducible() {
    let data = synth_shapes(96, 12, 4, 14).unwrap();
    let test = synth_shapes(64, 12, 4, 15).unwrap();
    let build = |seed| Model::build(shapes_cnn(), seed);
    let attack = AttackConfig::pgd(0.1, 5, 0.05);
    let cfg = quick_train_cfg(0.5);
    let rows = alpha_pareto(build, &data, &test, &[0.0, 1.0], &cfg, &attack).unwrap();
    assert_eq!(rows, alpha_pareto(build, &data, &test, &[0.0, 1.0], &cfg, &attack).unwrap());

    let (model, store) = build(cfg.seed).unwrap();
    let (adv_only, _) = train(&model, store, &data, &quick_train_cfg(0.0)).unwrap();
    assert_eq!(rows[0].clean_acc, accuracy(&model, &adv_only, &test, Mode::Clean).unwrap());
    assert_eq!(rows[0].robust_acc, robust_accuracy(&model, &adv_only, &test, Mode::Robust, &attack).unwrap());
}

#[test]
fn pareto_front_marks_undominated_rows() {
    let row = |alpha, c, r| ParetoRow { alpha, clean_acc: c, robust_acc: r };
    let rows = [row(0.0, 0.6, 0.4), row(0.2, 0.7, 0.35), row(0.5, 0.65, 0.3), row(1.0, 0.8, 0.0), row(0.8, 0.8, 0.0)];
    assert_eq!(pareto_front(&rows), vec![true, true, false, true, true]);
}

fn svd_rank(filters: &Tensor) -> usize {
    let (n, p) = (filters.shape()[0], filters.shape()[1]);
    let mut x = DMatrix::from_row_slice(n, p, filters.data());
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            x[(i, j)] -= mean;
        }
    }
    let sv = x.svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|s| **s > top * 1e-6).count()
}

fn check_pca(filters: &Tensor, shape: [usize; 3]) {
    let pca = filter_pca(filters, 28, shape).unwrap();
    let k = pca.components.len();
    assert_eq!(k, 28.min(svd_rank(filters)));
    for i in 0..k {
        assert!((pca.components[i].norm() - 1.0).abs() < 1e-9);
        for j in 0..i {
            assert!(pca.components[i].dot(&pca.components[j]).abs() < 1e-5);
        }
    }
    for w in pca.explained_variance.windows(2) {
        assert!(w[1] <= w[0]);
    }
    for img in &pca.images {
        assert_eq!(*img.iter().min().unwrap(), 0);
        assert_eq!(*img.iter().max().unwrap(), 255);
    }
}

#[test]
fn filter_pca_properties() {
    // Full rank: many filters of 49 coordinates.
    check_pca(&Tensor::trunc_normal(&[120, 49], 1.0, &mut common::rng(1)), [7, 7, 1]);
    // Rank-deficient: five filters leave four directions after centering.
    let few = Tensor::trunc_normal(&[5, 27], 1.0, &mut common::rng(2));
    check_pca(&few, [3, 3, 3]);
    assert_eq!(filter_pca(&few, 28, [3, 3, 3]).unwrap().components.len(), 4);
    // Filters from a real embedder.
    let cfg = ModelConfig { width: 40, patch_size: 4, patch_stride: 4, ..ModelConfig::vit_micro() };
    let (model, store) = Model::build(cfg, 3).unwrap();
    let (f, shape) = embedder_filters(&model, &store, Mode::Clean).unwrap();
    assert_eq!(f.shape(), [40, 16]);
    check_pca(&f, shape);
    assert!(matches!(filter_pca(&f, 28, [3, 3, 1]), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn pca_holds_for_random_filter_banks(n in 2usize..60, p in 2usize..30, seed in any::<u64>()) {
        let f = Tensor::trunc_normal(&[n, p], 1.0, &mut common::rng(seed));
        check_pca(&f, [1, p, 1]);
    }
}

#[test]
fn netpbm_outputs() {
    assert_eq!(rescale_u8(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    assert_eq!(rescale_u8(&[2.0, 2.0]), vec![0, 0]);
    let pgm = netpbm(&[0, 255, 7, 9], [2, 2, 1]).unwrap();
    assert_eq!(&pgm[..11], b"P5\n2 2\n255\n");
    assert_eq!(&pgm[11..], &[0, 255, 7, 9]);
    assert!(netpbm(&[0; 12], [2, 2, 3]).unwrap().starts_with(b"P6\n2 2\n255\n"));
    assert!(matches!(netpbm(&[0; 8], [2, 2, 2]), Err(Error::Contract(_))));

    let pca = filter_pca(&Tensor::trunc_normal(&[30, 9], 1.0, &mut common::rng(4)), 28, [3, 3, 1]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_filter_images(dir.path(), &pca).unwrap();
    assert_eq!(paths.len(), 9);
    let csv = std::fs::read_to_string(dir.path().join("variance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
}
