#![allow(dead_code)]

use dadl::numerics::{Tape, Tensor, Var};
use dadl::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::trunc_normal(shape, 1.0, &mut rng(seed))
}

/// Independent central-difference oracle: returns the worst relative error
/// between tape gradients and `(f(x+h) - f(x-h)) / 2h` over every coordinate
/// of every input.
pub fn fd_max_rel_error<F>(f: F, xs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let h = 1e-5;
    let value = |inputs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs).unwrap();
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let loss = f(&mut t, &vs).unwrap();
    let grads = t.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (k, v) in vs.iter().enumerate() {
        let g = grads.get(*v).unwrap();
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = value(&probe);
            probe[k].data_mut()[i] = orig - h;
            let down = value(&probe);
            probe[k].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

/// Projects any tensor to a scalar with fixed random weights so that every
/// output coordinate carries a distinct gradient.
pub fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = randn(t.shape(x), seed ^ 0xA5A5);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum(p)
}

use dadl::model::{AdapterSpec, ModelConfig, NormKind};

/// 8x8 single-channel ViT small enough for per-parameter finite differences.
pub fn tiny_vit(adapter: AdapterSpec) -> ModelConfig {
    ModelConfig {
        width: 8,
        depth: 1,
        heads: 2,
        patch_size: 4,
        patch_stride: 2,
        num_classes: 3,
        image_size: 8,
        ..ModelConfig::vit_micro()
    }
    .with_adapter(adapter)
}

pub fn tiny_cnn(norm: NormKind, adapter: AdapterSpec) -> ModelConfig {
    ModelConfig { width: 4, depth: 2, num_classes: 3, image_size: 8, ..ModelConfig::cnn_micro() }
        .with_norm(norm)
        .with_adapter(adapter)
}

pub fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
    let s = cfg.image_size;
    Tensor::uniform(&[n, s, s, cfg.channels], 0.0, 1.0, &mut rng(seed))
}
