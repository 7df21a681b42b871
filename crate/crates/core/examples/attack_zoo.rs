//! Runs every attack preset against a nominally trained micro CNN and reports
//! accuracy under attack together with the size of the perturbations.
//!
//! Usage: `cargo run --example attack_zoo [EPSILON]`, e.g. `8/255`.

use dadl::attacks::{run_attack, AttackConfig, ModelView, NormBall};
use dadl::data::synth_shapes;
use dadl::eval::{accuracy, argmax_rows};
use dadl::model::{Mode, Model, ModelConfig};
use dadl::numerics::Tensor;
use dadl::train::{train, TrainConfig};

fn max_norms(x: &Tensor, x_adv: &Tensor) -> (f64, f64) {
    let per = x.numel() / x.shape()[0];
    let diff: Vec<f64> = x_adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    diff.chunks(per).fold((0.0, 0.0), |(li, l2), row| {
        let inf = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let two = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        (li.max(inf), l2.max(two))
    })
}

fn main() -> dadl::Result<()> {
    let cfg = ModelConfig { width: 8, image_size: 16, num_classes: 4, ..ModelConfig::cnn_micro() };
    let train_set = synth_shapes(256, 16, 4, 1)?;
    let test_set = synth_shapes(100, 16, 4, 2)?;
    let tc = TrainConfig { alpha: 1.0, epochs: 5, warmup_epochs: 0, batch_size: 32, base_lr: 1e-2, monitor_samples: 0, ..TrainConfig::default() };
    let (model, store) = Model::build(cfg, 0)?;
    let (store, _) = train(&model, store, &train_set, &tc)?;
    println!("clean accuracy {:.3}\n", accuracy(&model, &store, &test_set, Mode::Clean)?);

    // the synthetic shapes survive 8/255 untouched, so the default radius is larger
    let eps: f64 = std::env::args().nth(1).map_or(Ok(0.15), |a| dadl::cli::parse_float(&a))?;
    let view = ModelView::new(&model, &store, Mode::Clean);
    println!("{:<18} {:>8} {:>10} {:>10}", "attack", "acc", "max linf", "max l2");
    for name in ["fgsm", "pgd2", "pgd5", "pgd40", "fast_at", "n_fgsm", "targeted_pgd5", "l2_pgd10"] {
        let radius = if name.starts_with("l2") { 16.0 * eps } else { eps };
        let attack = AttackConfig::preset(name, radius)?;
        let x_adv = run_attack(&view, &test_set.images, &test_set.labels, &attack)?;
        let pred = argmax_rows(&model.logits(&store, &x_adv, Mode::Clean)?);
        let acc = pred.iter().zip(&test_set.labels).filter(|(p, y)| p == y).count() as f64 / test_set.len() as f64;
        let (li, l2) = max_norms(&test_set.images, &x_adv);
        let bound = match attack.norm {
            NormBall::Linf if attack.project => format!("(ε = {radius:.4})"),
            NormBall::Linf => "(unprojected)".into(),
            NormBall::L2 => format!("(ℓ2 radius {radius})"),
        };
        println!("{name:<18} {acc:>8.3} {li:>10.4} {l2:>10.4}  {bound}");
    }
    Ok(())
}
