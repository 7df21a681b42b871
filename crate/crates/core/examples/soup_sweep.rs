//! Interpolates the dual class tokens of a co-trained micro ViT and compares
//! the weight soup with an ensemble of the two branches.

use dadl::attacks::AttackConfig;
use dadl::data::synth_shapes;
use dadl::eval::argmax_rows;
use dadl::model::{AdapterSpec, Model, ModelConfig};
use dadl::soup::{combo_grid, ensemble_predict, rows_to_csv, soup_sweep, token_cosine};
use dadl::train::{train, TrainConfig};

fn main() -> dadl::Result<()> {
    let cfg = ModelConfig { width: 16, depth: 2, heads: 2, patch_size: 4, patch_stride: 4, image_size: 16, num_classes: 4, ..ModelConfig::vit_micro() }
        .with_adapter(AdapterSpec::ClsToken);
    let train_set = synth_shapes(384, 16, 4, 1)?;
    let test_set = synth_shapes(120, 16, 4, 2)?;
    let eps = 8.0 / 255.0;
    let tc = TrainConfig { epochs: 5, warmup_epochs: 1, batch_size: 32, base_lr: 1e-2, attack: AttackConfig::pgd2(eps), monitor_samples: 0, ..TrainConfig::default() };
    let (model, store) = Model::build(cfg, 0)?;
    let (store, _) = train(&model, store, &train_set, &tc)?;
    println!("cosine(clean token, adv token) = {:.4}\n", token_cosine(&store)?);

    let betas = [-0.05, 0.0, 0.25, 0.5, 0.75, 1.0, 1.05];
    let rows = soup_sweep(&model, &store, &test_set, &betas, Some(&AttackConfig::pgd5(eps)))?;
    println!("weight soup, PGD-5 at 8/255:\n{}", rows_to_csv(&rows));

    println!("soup vs ensemble agreement on clean inputs:");
    for beta in [0.25, 0.5, 0.75] {
        let soup = argmax_rows(&dadl::soup::soup_forward(&model, &store, &test_set.images, beta)?);
        let ens = argmax_rows(&ensemble_predict(&model, &store, &test_set.images, beta)?);
        let agree = soup.iter().zip(&ens).filter(|(a, b)| a == b).count();
        println!("  β = {beta}: {agree}/{} predictions agree", test_set.len());
    }

    let grid = combo_grid(&model, &store, &test_set, &[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0], None)?;
    println!("\nclean accuracy of β1·clean + β2·adv:\n{}", rows_to_csv(&grid.rows()));
    Ok(())
}
