use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{bail, Result};
use crate::model::{Arch, Mode, Model, ParamStore};
use crate::numerics::Tensor;

/// Principal components of a filter bank, largest variance first.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterPca {
    /// Unit-norm components, each shaped like one filter.
    pub components: Vec<Tensor>,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Components min-max rescaled to `0..=255`.
    pub images: Vec<Vec<u8>>,
    pub patch_shape: [usize; 3],
}

/// First-layer filters as rows `[filters, kh·kw·c]`.
pub fn embedder_filters(model: &Model, store: &ParamStore, mode: Mode) -> Result<(Tensor, [usize; 3])> {
    let cfg = model.config();
    let (name, k) = match cfg.arch {
        Arch::VitMicro => ("embed.weight", cfg.patch_size),
        Arch::CnnMicro => ("conv0.weight", 3),
    };
    let resolved = store.resolve(mode);
    let w = resolved.get(name).ok_or_else(|| crate::Error::Contract(format!("store has no `{name}`")))?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = w.data()[i * cols + j];
        }
    }
    Ok((Tensor::new(vec![cols, rows], t)?, [k, k, cfg.channels]))
}

/// Standardizes each filter coordinate across filters, then diagonalizes
/// the covariance. Returns at most `min(num_components, rank)` components.
pub fn filter_pca(filters: &Tensor, num_components: usize, patch_shape: [usize; 3]) -> Result<FilterPca> {
    if filters.rank() != 2 {
        bail!(Dimension, "filters must be a matrix, got {:?}", filters.shape());
    }
    let (n, p) = (filters.shape()[0], filters.shape()[1]);
    if patch_shape.iter().product::<usize>() != p {
        bail!(Dimension, "patch shape {:?} does not hold {} values", patch_shape, p);
    }
    if n < 2 {
        bail!(Contract, "PCA needs at least two filters");
    }
    let mut x = DMatrix::from_row_slice(n, p, filters.data());
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (n - 1) as f64).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    let k = num_components.min(rank);
    if k < num_components {
        log::warn!("filter matrix has rank {rank}; returning {k} of {num_components} components");
    }
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    let mut images = Vec::with_capacity(k);
    for &i in &order[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        if v.iter().find(|a| a.abs() > 1e-12).is_some_and(|a| *a < 0.0) {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        images.push(rescale_u8(&v));
        components.push(Tensor::new(patch_shape.to_vec(), v)?);
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    let explained_ratio = explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(FilterPca { components, explained_variance, explained_ratio, images, patch_shape })
}

/// Min-max rescaling to `0..=255`; a constant input maps to zeros.
pub fn rescale_u8(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; v.len()];
    }
    v.iter().map(|a| ((a - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary PGM (one channel) or PPM (three channels).
pub fn netpbm(pixels: &[u8], shape: [usize; 3]) -> Result<Vec<u8>> {
    let [h, w, c] = shape;
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => bail!(Contract, "netpbm holds 1 or 3 channels, got {}", c),
    };
    if pixels.len() != h * w * c {
        bail!(Dimension, "{} pixels for a {}x{}x{} image", pixels.len(), h, w, c);
    }
    let mut out = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes `pc00.pgm`… (or `.ppm`) and `variance.csv` into `dir`; returns the image paths.
pub fn write_filter_images(dir: &Path, pca: &FilterPca) -> Result<Vec<std::path::PathBuf>> {
    let ext = if pca.patch_shape[2] == 3 { "ppm" } else { "pgm" };
    let mut paths = Vec::new();
    for (i, img) in pca.images.iter().enumerate() {
        let path = dir.join(format!("pc{i:02}.{ext}"));
        crate::io::write_atomic(&path, &netpbm(img, pca.patch_shape)?)?;
        paths.push(path);
    }
    let mut csv = String::from("component,variance,ratio\n");
    for (i, (v, r)) in pca.explained_variance.iter().zip(&pca.explained_ratio).enumerate() {
        let _ = writeln!(csv, "{i},{v},{r}");
    }
    crate::io::write_atomic(&dir.join("variance.csv"), csv.as_bytes())?;
    Ok(paths)
}
