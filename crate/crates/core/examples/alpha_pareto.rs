//! Sweeps the co-training weight α and marks the Pareto-optimal settings.

use dadl::attacks::AttackConfig;
use dadl::data::synth_shapes;
use dadl::eval::{alpha_pareto, pareto_front};
use dadl::model::{AdapterSpec, Model, ModelConfig};
use dadl::train::TrainConfig;

fn main() -> dadl::Result<()> {
    let cfg = ModelConfig { width: 8, image_size: 16, num_classes: 4, ..ModelConfig::cnn_micro() }.with_adapter(AdapterSpec::BnDualStats);
    let train_set = synth_shapes(256, 16, 4, 1)?;
    let eval_set = synth_shapes(100, 16, 4, 2)?;
    let eps = 8.0 / 255.0;
    let tc = TrainConfig { epochs: 4, warmup_epochs: 0, batch_size: 32, base_lr: 1e-2, attack: AttackConfig::pgd2(eps), monitor_samples: 0, ..TrainConfig::default() };
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows = alpha_pareto(|seed| Model::build(cfg.clone(), seed), &train_set, &eval_set, &alphas, &tc, &AttackConfig::pgd5(eps))?;
    let front = pareto_front(&rows);
    println!("alpha  clean  robust  pareto");
    for (r, on) in rows.iter().zip(front) {
        println!("{:<6} {:.3}  {:.3}   {}", r.alpha, r.clean_acc, r.robust_acc, if on { "*" } else { "" });
    }
    Ok(())
}
