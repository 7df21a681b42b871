mod common;

use std::collections::BTreeMap;

use common::{images, tiny_cnn, tiny_vit};
use dadl::attacks::{run_attack, AttackConfig, ModelView};
use dadl::data::{batches, synth_shapes, Batch};
use dadl::model::{AdapterSpec, Branch, BranchKey, Mode, Model, NormKind, ParamKey, ParamStore, Phase};
use dadl::numerics::{Tape, Tensor};
use dadl::train::{
    adamw_update, co_training_step, decode, ema_update, encode, load_checkpoint, lr_at, quantize, save_checkpoint,
    term_gradients, train, train_from, AdamW, AdamWState, Checkpoint, CheckpointMeta, LrSchedule, TrainConfig,
    TrainState,
};
use dadl::Error;
use proptest::prelude::*;

fn scalar_store(name: &str, value: f64) -> ParamStore {
    let mut s = ParamStore::new(AdapterSpec::None);
    s.shared.insert(name.into(), Tensor::scalar(value));
    s
}

fn one_grad(name: &str, g: f64) -> BTreeMap<ParamKey, Tensor> {
    BTreeMap::from([(ParamKey::Shared(name.into()), Tensor::scalar(g))])
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let mut s = scalar_store("block0.mlp.fc1.weight", 0.7);
    let before = s.clone();
    let mut st = AdamWState::new();
    for _ in 0..5 {
        adamw_update(&mut s, &one_grad("block0.mlp.fc1.weight", 0.0), &mut st, 0.1, 0.0, &AdamW::default()).unwrap();
    }
    assert_eq!(s, before);
}

#[test]
fn adamw_matches_hand_computed_updates() {
    // Step 1 with g = 1: m = 0.1, v = 0.05, both corrections are exact and
    // the update is lr / (1 + eps).
    let mut s = scalar_store("w", 2.0);
    let mut st = AdamWState::new();
    let hp = AdamW::default();
    adamw_update(&mut s, &one_grad("w", 1.0), &mut st, 0.1, 0.0, &hp).unwrap();
    let want = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!((s.shared["w"].item() - want).abs() < 1e-12);

    // Step 2 with g = -3, by the moment recurrences written out.
    adamw_update(&mut s, &one_grad("w", -3.0), &mut st, 0.1, 0.0, &hp).unwrap();
    let m = 0.9 * 0.1 + 0.1 * -3.0;
    let v: f64 = 0.95 * 0.05 + 0.05 * 9.0;
    let m_hat = m / (1.0 - 0.81);
    let v_hat = v / (1.0 - 0.9025);
    let want2 = want - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((s.shared["w"].item() - want2).abs() < 1e-12);
    assert_eq!(st.step, 2);
}

#[test]
fn weight_decay_follows_the_exclusion_rule() {
    let names = ["block0.ln1.scale", "final_ln.offset", "cls_token", "pos_embed", "norm1.scale", "head.weight"];
    let mut s = ParamStore::new(AdapterSpec::None);
    for n in names {
        s.shared.insert(n.into(), Tensor::scalar(1.0));
    }
    let grads: BTreeMap<_, _> = names.iter().map(|n| (ParamKey::Shared((*n).into()), Tensor::scalar(0.0))).collect();
    adamw_update(&mut s, &grads, &mut AdamWState::new(), 0.1, 0.5, &AdamW::default()).unwrap();
    for n in &names[..5] {
        assert_eq!(s.shared[*n].item(), 1.0, "{n}");
    }
    assert!((s.shared["head.weight"].item() - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
}

#[test]
fn adamw_rejects_unknown_or_misshaped_gradients() {
    let mut s = scalar_store("w", 1.0);
    let mut st = AdamWState::new();
    let bad = one_grad("nope", 1.0);
    assert!(matches!(adamw_update(&mut s, &bad, &mut st, 0.1, 0.0, &AdamW::default()), Err(Error::Contract(_))));
    let shaped = BTreeMap::from([(ParamKey::Shared("w".into()), Tensor::zeros(&[2]))]);
    assert!(matches!(adamw_update(&mut s, &shaped, &mut st, 0.1, 0.0, &AdamW::default()), Err(Error::Dimension(_))));
    assert_eq!(st.step, 0);
}

#[test]
fn schedule_examples() {
    let s = LrSchedule { base_lr: 0.4, warmup_steps: 10, total_steps: 110 };
    assert_eq!(lr_at(0, &s), 0.0);
    assert!((lr_at(5, &s) - 0.2).abs() < 1e-15);
    assert_eq!(lr_at(10, &s), 0.4);
    assert!((lr_at(60, &s) - 0.2).abs() < 1e-12);
    assert!(lr_at(110, &s).abs() < 1e-15);
    assert!(lr_at(500, &s).abs() < 1e-15);
    // Closed form at a quarter of the decay.
    let q = 0.4 * (1.0 + (std::f64::consts::PI / 4.0).cos()) / 2.0;
    assert!((lr_at(35, &s) - q).abs() < 1e-12);
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_non_negative(base in 1e-5f64..1.0, warm in 0u64..50, span in 1u64..500) {
        let s = LrSchedule { base_lr: base, warmup_steps: warm, total_steps: warm + span };
        let mut prev = lr_at(0, &s);
        for t in 0..=s.total_steps {
            let v = lr_at(t, &s);
            prop_assert!(v >= 0.0 && v <= base * (1.0 + 1e-12));
            // Largest slope of either piece bounds the jump between steps.
            let slope = if warm > 0 { base / warm as f64 } else { 0.0 }.max(base * std::f64::consts::PI / 2.0 / span as f64);
            prop_assert!((v - prev).abs() <= slope * (1.0 + 1e-9) + 1e-15);
            prev = v;
        }
    }
}

#[test]
fn ema_examples() {
    let cur = scalar_store("w", 1.0);
    let mut ema = scalar_store("w", 0.0);
    for _ in 0..3 {
        ema_update(&mut ema, &cur, 0.5).unwrap();
    }
    assert!((ema.shared["w"].item() - 0.875).abs() < 1e-15);

    let (_, a) = Model::build(tiny_vit(AdapterSpec::ClsToken), 1).unwrap();
    let (_, b) = Model::build(tiny_vit(AdapterSpec::ClsToken), 2).unwrap();
    let mut e = a.clone();
    ema_update(&mut e, &b, 1.0).unwrap();
    assert_eq!(e, a);
    ema_update(&mut e, &b, 0.0).unwrap();
    assert_eq!(e, b);

    let (_, other) = Model::build(tiny_vit(AdapterSpec::NormParams), 1).unwrap();
    assert!(matches!(ema_update(&mut e, &other, 0.5), Err(Error::Contract(_))));
}

fn checkpoint_of(adapter: AdapterSpec, seed: u64) -> (Model, Checkpoint) {
    let cfg = match adapter {
        AdapterSpec::BnDualStats | AdapterSpec::BnDualParams => tiny_cnn(NormKind::BatchNorm, adapter),
        _ => tiny_vit(adapter),
    };
    let (model, store) = Model::build(cfg.clone(), seed).unwrap();
    let ckpt = Checkpoint { meta: CheckpointMeta::new(cfg), store, ema: None, optimizer: None };
    (model, ckpt)
}

#[test]
fn checkpoint_round_trip_is_bit_exact_at_32_bits() {
    for adapter in AdapterSpec::ALL {
        let (_, ckpt) = checkpoint_of(adapter, 3);
        let back = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(back.store, quantize(&ckpt.store), "{adapter}");
        assert_eq!(back.meta, ckpt.meta);
        // A second pass reproduces the same bytes.
        assert_eq!(encode(&back).unwrap(), encode(&decode(&encode(&back).unwrap()).unwrap()).unwrap());
    }
}

#[test]
fn checkpoint_keeps_ema_and_optimizer_state() {
    let (model, ckpt) = checkpoint_of(AdapterSpec::ClsToken, 4);
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, batch_size: 4, monitor_samples: 0, ema_momentum: Some(0.9), ..Default::default() };
    let data = synth_shapes(8, 8, 3, 1).unwrap();
    let state = train_from(&model, TrainState::new(ckpt.store, &cfg), &data, None, &cfg, |_, _| Ok(())).unwrap();
    let saved = state.to_checkpoint(&model, &cfg);
    let back = decode(&encode(&saved).unwrap()).unwrap();
    assert_eq!(back.ema, saved.ema.as_ref().map(quantize));
    let opt = back.optimizer.unwrap();
    assert_eq!(opt.step, 2);
    assert_eq!(opt.m.keys().collect::<Vec<_>>(), saved.optimizer.as_ref().unwrap().m.keys().collect::<Vec<_>>());
    assert_eq!(back.meta.train, Some(cfg));
    assert_eq!(back.meta.step, 2);
    assert_eq!(back.meta.metrics.len(), 1);
}

#[test]
fn cls_token_checkpoint_reloads_one_dual_pair() {
    let (_, ckpt) = checkpoint_of(AdapterSpec::ClsToken, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.store.dual.len(), 1);
    assert!(back.store.dual.contains_key("cls_token"));
    assert_eq!(back.store.adapter, AdapterSpec::ClsToken);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let (_, ckpt) = checkpoint_of(AdapterSpec::NormParams, 6);
    let bytes = encode(&ckpt).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    match decode(&flipped) {
        Err(Error::Format(m)) => assert!(m.contains("CRC"), "{m}"),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    match decode(&version) {
        Err(Error::Format(m)) => assert!(m.contains("version"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn term_gradients_isolate_the_other_branch() {
    let cases = [
        tiny_vit(AdapterSpec::ClsToken),
        tiny_vit(AdapterSpec::NormParams),
        tiny_vit(AdapterSpec::Embedder),
        tiny_vit(AdapterSpec::PosEmbedding),
        tiny_cnn(NormKind::BatchNorm, AdapterSpec::BnDualParams),
        tiny_cnn(NormKind::LayerNorm, AdapterSpec::NormParams),
        tiny_cnn(NormKind::GroupNorm(2), AdapterSpec::Embedder),
    ];
    for (i, cfg) in cases.into_iter().enumerate() {
        let (model, store) = Model::build(cfg.clone(), i as u64).unwrap();
        let x = images(4, &cfg, 10 + i as u64);
        let y = [0, 1, 2, 1];
        for (branch, other) in [(Branch::Clean, BranchKey::Robust), (Branch::Robust, BranchKey::Clean)] {
            let t = term_gradients(&model, &store, &x, &y, branch, 0.1).unwrap();
            let mut own = 0.0;
            for (k, g) in &t.grads {
                if let ParamKey::Dual(_, b) = k {
                    if *b == other {
                        assert!(g.data().iter().all(|v| *v == 0.0), "{:?} leaks into {:?}", branch, k);
                    } else {
                        own += g.norm();
                    }
                }
            }
            assert!(own > 0.0, "case {i}: {branch:?} adapters get no gradient");
        }
    }
}

fn batch_of(ds: &dadl::data::Dataset) -> Batch {
    batches(ds, ds.len(), None).unwrap().next().unwrap()
}

#[test]
fn alpha_endpoints_freeze_the_unused_adapter() {
    let cfg = tiny_vit(AdapterSpec::NormParams);
    let (model, init) = Model::build(cfg, 7).unwrap();
    let batch = batch_of(&synth_shapes(6, 8, 3, 2).unwrap());
    for (alpha, frozen) in [(1.0, BranchKey::Robust), (0.0, BranchKey::Clean)] {
        let tc = TrainConfig { alpha, ..Default::default() };
        let mut store = init.clone();
        let mut opt = AdamWState::new();
        let stats = co_training_step(&model, &mut store, &mut opt, &batch, &tc, 0.05, 1).unwrap();
        assert_eq!(stats.loss_clean.is_some(), alpha > 0.0);
        assert_eq!(stats.loss_adv.is_some(), alpha < 1.0);
        let frozen_norm = if frozen == BranchKey::Robust { stats.grad_norms.adv } else { stats.grad_norms.clean };
        assert_eq!(frozen_norm, 0.0);
        for (k, t) in store.params() {
            let moved = init.get(&k).unwrap() != t;
            match &k {
                ParamKey::Dual(_, b) if *b == frozen => assert!(!moved, "{k:?} moved at alpha {alpha}"),
                _ => assert!(moved, "{k:?} did not move at alpha {alpha}"),
            }
        }
    }
}

#[test]
fn fully_shared_step_matches_single_tape_reference() {
    let cfg = tiny_vit(AdapterSpec::None);
    let (model, init) = Model::build(cfg, 8).unwrap();
    let batch = batch_of(&synth_shapes(5, 8, 3, 3).unwrap());
    let tc = TrainConfig { alpha: 0.3, attack: AttackConfig::pgd2(0.05), ..Default::default() };
    let mut store = init.clone();
    let mut opt = AdamWState::new();
    co_training_step(&model, &mut store, &mut opt, &batch, &tc, 0.01, 99).unwrap();

    // Reference: both terms on one tape over a single parameter set.
    let view = ModelView::new(&model, &init, Mode::Robust).with_phase(Phase::Train);
    let x_adv = run_attack(&view, &batch.x, &batch.y, &tc.attack.clone().with_seed(99)).unwrap();
    let mut tape = Tape::new();
    let binding = model.bind_training(&mut tape, &init);
    let ctx = model.ctx(&init, Mode::Clean, Phase::Train);
    let xc = tape.constant(batch.x.clone());
    let xa = tape.constant(x_adv);
    let lc = model.forward(&mut tape, xc, &binding.clean, &ctx).unwrap().logits;
    let la = model.forward(&mut tape, xa, &binding.clean, &ctx).unwrap().logits;
    let lc = tape.cross_entropy(lc, &batch.y, 0.1).unwrap();
    let la = tape.cross_entropy(la, &batch.y, 0.1).unwrap();
    let lc = tape.scale(lc, 0.3).unwrap();
    let la = tape.scale(la, 0.7).unwrap();
    let total = tape.add(lc, la).unwrap();
    let mut g = tape.backward(total).unwrap();
    let grads: BTreeMap<_, _> = binding.leaves.iter().map(|(k, v)| (k.clone(), g.take(*v).unwrap())).collect();
    let mut reference = init.clone();
    adamw_update(&mut reference, &grads, &mut AdamWState::new(), 0.01, tc.weight_decay, &AdamW::default()).unwrap();
    for ((k, a), (_, b)) in store.params().zip(reference.params()) {
        assert!(a.max_abs_diff(b) < 1e-12, "{k:?}");
    }
}

#[test]
fn attack_generation_leaves_parameters_alone() {
    let cfg = tiny_cnn(NormKind::BatchNorm, AdapterSpec::BnDualParams);
    let (model, init) = Model::build(cfg, 9).unwrap();
    let batch = batch_of(&synth_shapes(6, 8, 3, 4).unwrap());
    let tc = TrainConfig { alpha: 0.0, weight_decay: 0.0, attack: AttackConfig::pgd5(0.1), ..Default::default() };
    let mut store = init.clone();
    let mut opt = AdamWState::new();
    co_training_step(&model, &mut store, &mut opt, &batch, &tc, 0.0, 3).unwrap();
    for (k, t) in store.params() {
        assert_eq!(init.get(&k).unwrap(), t, "{k:?}");
    }
    assert_eq!(opt.step, 1);
}

#[test]
fn diverging_training_is_a_numeric_error() {
    let (model, store) = Model::build(tiny_vit(AdapterSpec::ClsToken), 10).unwrap();
    let data = synth_shapes(8, 8, 3, 5).unwrap();
    let tc = TrainConfig { base_lr: 1e200, epochs: 3, warmup_epochs: 0, batch_size: 4, monitor_samples: 0, ..Default::default() };
    assert!(matches!(train(&model, store, &data, &tc), Err(Error::Numeric(_))));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (model, store) = Model::build(tiny_vit(AdapterSpec::ClsToken), 11).unwrap();
    let data = synth_shapes(8, 8, 3, 6).unwrap();
    let tc = TrainConfig { epochs: 0, warmup_epochs: 0, ..Default::default() };
    let (out, hist) = train(&model, store.clone(), &data, &tc).unwrap();
    assert_eq!(out, store);
    assert!(hist.is_empty());
}

#[test]
fn nominal_training_leaves_the_adversarial_token_at_init() {
    let (model, store) = Model::build(tiny_vit(AdapterSpec::ClsToken), 12).unwrap();
    let data = synth_shapes(16, 8, 3, 7).unwrap();
    let tc = TrainConfig { alpha: 1.0, epochs: 2, warmup_epochs: 0, batch_size: 4, monitor_samples: 4, ..Default::default() };
    let (out, hist) = train(&model, store.clone(), &data, &tc).unwrap();
    assert_eq!(out.dual["cls_token"].adv, store.dual["cls_token"].adv);
    assert_ne!(out.dual["cls_token"].clean, store.dual["cls_token"].clean);
    assert!(hist.iter().all(|h| h.loss_adv.is_none() && h.acc_robust_mode_pgd.is_some()));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = tiny_cnn(NormKind::BatchNorm, AdapterSpec::BnDualStats);
    let (model, store) = Model::build(cfg, 13).unwrap();
    let data = synth_shapes(24, 8, 3, 8).unwrap();
    let tc = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 6,
        augment: true,
        ema_momentum: Some(0.5),
        monitor_samples: 6,
        attack: AttackConfig::fast_at(0.05),
        ..Default::default()
    };
    let full = train_from(&model, TrainState::new(store.clone(), &tc), &data, None, &tc, |_, _| Ok(())).unwrap();
    let again = train_from(&model, TrainState::new(store.clone(), &tc), &data, None, &tc, |_, _| Ok(())).unwrap();
    assert_eq!(full, again);

    let mut half: Option<TrainState> = None;
    let stop = |s: &TrainState, _: &_| {
        if s.epoch == 2 {
            half = Some(s.clone());
            return Err(Error::Config("stop".into()));
        }
        Ok(())
    };
    let _ = train_from(&model, TrainState::new(store, &tc), &data, None, &tc, stop);
    let half = half.unwrap();
    assert_eq!(half.step, 8);
    let resumed = train_from(&model, half.clone(), &data, None, &tc, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, full);

    // Through a 32-bit checkpoint the step counter and log carry on.
    let ckpt = decode(&encode(&half.to_checkpoint(&model, &tc)).unwrap()).unwrap();
    let from_disk = train_from(&model, TrainState::from_checkpoint(ckpt), &data, None, &tc, |_, _| Ok(())).unwrap();
    assert_eq!(from_disk.step, full.step);
    assert_eq!(from_disk.history.len(), 4);
    assert_eq!(from_disk.history[..2], full.history[..2]);
}

#[test]
fn micro_vit_training_loss_decreases_every_epoch() {
    let cfg = dadl::model::ModelConfig { width: 16, depth: 1, heads: 2, num_classes: 4, image_size: 16, patch_size: 4, patch_stride: 4, ..dadl::model::ModelConfig::vit_micro() }
        .with_adapter(AdapterSpec::ClsToken);
    let (model, store) = Model::build(cfg, 14).unwrap();
    let data = synth_shapes(128, 16, 4, 9).unwrap();
    let tc = TrainConfig { alpha: 1.0, epochs: 5, warmup_epochs: 1, batch_size: 16, base_lr: 3e-3, monitor_samples: 0, ..Default::default() };
    let (_, hist) = train(&model, store, &data, &tc).unwrap();
    let losses: Vec<f64> = hist.iter().map(|h| h.loss_clean.unwrap()).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn invalid_train_configs() {
    for tc in [
        TrainConfig { alpha: 1.5, ..Default::default() },
        TrainConfig { epochs: 3, warmup_epochs: 3, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { label_smoothing: 1.0, ..Default::default() },
        TrainConfig { ema_momentum: Some(2.0), ..Default::default() },
    ] {
        assert!(matches!(tc.validate(), Err(Error::Config(_))), "{tc:?}");
    }
}
