use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over consecutive slices of a (possibly shuffled) index order.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Splits a dataset into batches; the last one may be smaller.
///
/// With a seed the order is a seeded permutation, otherwise dataset order.
/// Callers wanting a fresh order each epoch mix the epoch into the seed.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        bail!(Contract, "batch size must be at least 1");
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches { ds, order, batch_size, pos: 0 })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let x = self.ds.images.gather_rows(&indices).expect("indices come from the dataset");
        let y = indices.iter().map(|&i| self.ds.labels[i]).collect();
        Some(Batch { x, y, indices })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

const CROP_PAD: i64 = 2;

/// Random horizontal flip and random crop from a zero-padded copy
/// (2 pixels each side), per image.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Tensor {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let img_len = h * w * c;
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(-CROP_PAD..=CROP_PAD) as isize;
        let dx = rng.random_range(-CROP_PAD..=CROP_PAD) as isize;
        let src = &x.data()[i * img_len..(i + 1) * img_len];
        let dst = &mut out[i * img_len..(i + 1) * img_len];
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w {
                let sx0 = xx as isize + dx;
                if sx0 < 0 || sx0 >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - sx0 as usize } else { sx0 as usize };
                let from = (sy as usize * w + sx) * c;
                dst[(y * w + xx) * c..(y * w + xx + 1) * c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}
