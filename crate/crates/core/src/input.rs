//! Layer-0 maps: raw color, per-patch whitened color, and gray gradients.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CknError, Result};
use crate::image::Patch;
use crate::map::FeatureMap;

/// Eigenvalues below this are floored before the whitening scales are inverted.
pub const WHITEN_EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputType {
    Raw,
    /// Color sub-patches of the given side, centered and whitened.
    White { subpatch: usize },
    Grad,
}

impl InputType {
    pub fn tag(&self) -> u32 {
        match self {
            InputType::Raw => 0,
            InputType::White { .. } => 1,
            InputType::Grad => 2,
        }
    }

    /// Inverse of [`InputType::tag`]; `subpatch` is used only for white input.
    pub fn from_tag(tag: u32, subpatch: usize) -> Option<Self> {
        match tag {
            0 => Some(InputType::Raw),
            1 => Some(InputType::White { subpatch }),
            2 => Some(InputType::Grad),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputType::Raw => "raw",
            InputType::White { .. } => "white",
            InputType::Grad => "grad",
        }
    }

    /// Channel count of the layer-0 map.
    pub fn map_channels(&self) -> usize {
        match self {
            InputType::Raw | InputType::White { .. } => 3,
            InputType::Grad => 2,
        }
    }

    /// Builds the layer-0 map for a patch.
    pub fn input_map(&self, patch: &Patch) -> Result<FeatureMap> {
        match self {
            InputType::Raw | InputType::White { .. } => to_raw_map(patch),
            InputType::Grad => Ok(to_grad_map(patch)),
        }
    }
}

/// Raw RGB values of a color patch.
pub fn to_raw_map(patch: &Patch) -> Result<FeatureMap> {
    if patch.pixels.channels() != 3 {
        return Err(CknError::InvalidArgument(
            "raw input channel requires an RGB patch".into(),
        ));
    }
    Ok(FeatureMap::from_image(&patch.pixels))
}

/// Two-channel `(G_x, G_y)` map of the gray patch: centered differences in
/// the interior, one-sided differences on the border.
pub fn to_grad_map(patch: &Patch) -> FeatureMap {
    let img = &patch.pixels;
    let (w, h) = (img.width(), img.height());
    let gray: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| img.gray_at(x, y))
        .collect();
    let at = |x: usize, y: usize| gray[y * w + x];
    let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;

    let mut data = Vec::with_capacity(w * h * 2);
    for y in 0..h {
        for x in 0..w {
            let gx = match (x, w) {
                (_, 1) => 0.0,
                (0, _) => diff(at(0, y), at(1, y), 1),
                (x, w) if x == w - 1 => diff(at(x - 1, y), at(x, y), 1),
                (x, _) => diff(at(x - 1, y), at(x + 1, y), 2),
            };
            let gy = match (y, h) {
                (_, 1) => 0.0,
                (0, _) => diff(at(x, 0), at(x, 1), 1),
                (y, h) if y == h - 1 => diff(at(x, y - 1), at(x, y), 1),
                (y, _) => diff(at(x, y - 1), at(x, y + 1), 2),
            };
            data.push(gx);
            data.push(gy);
        }
    }
    FeatureMap::new(w, h, 2, data).expect("gradient of a valid patch is finite")
}

/// Subtracts the per-channel mean of a (row, column, channel) sub-patch.
pub fn remove_mean_color(subpatch: &mut [f64], channels: usize) {
    let pixels = subpatch.len() / channels;
    for c in 0..channels {
        let mean = subpatch.iter().skip(c).step_by(channels).sum::<f64>() / pixels as f64;
        subpatch
            .iter_mut()
            .skip(c)
            .step_by(channels)
            .for_each(|v| *v -= mean);
    }
}

/// Centering plus PCA whitening of color sub-patches.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenModel {
    pub remove_mean_color: bool,
    pub subpatch: usize,
    pub channels: usize,
    /// Column-major `dim x dim` orthonormal basis, one eigenvector per column.
    pub basis: Vec<f64>,
    /// Per-direction scale, `1 / sqrt(max(eigenvalue, floor))`.
    pub scales: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

impl WhitenModel {
    pub fn dim(&self) -> usize {
        self.subpatch * self.subpatch * self.channels
    }

    pub fn identity(subpatch: usize, channels: usize) -> Self {
        let dim = subpatch * subpatch * channels;
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        WhitenModel {
            remove_mean_color: true,
            subpatch,
            channels,
            basis,
            scales: vec![1.0; dim],
            eigenvalues: vec![0.0; dim],
        }
    }

    /// Centers (if enabled) and whitens one raw sub-patch vector.
    pub fn transform(&self, subpatch: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let mut centered = subpatch.to_vec();
        if self.remove_mean_color {
            remove_mean_color(&mut centered, self.channels);
        }
        (0..dim)
            .map(|k| {
                let col = &self.basis[k * dim..(k + 1) * dim];
                self.scales[k] * col.iter().zip(&centered).map(|(b, v)| b * v).sum::<f64>()
            })
            .collect()
    }
}

/// Fits the whitening transform on every sub-patch of `map`.
pub fn whiten_fit(map: &FeatureMap, subpatch: usize) -> Result<WhitenModel> {
    if subpatch < 2 {
        return Err(CknError::InvalidArgument(format!(
            "whitening sub-patch side must be >= 2, got {subpatch}"
        )));
    }
    let channels = map.channels();
    let dim = subpatch * subpatch * channels;
    let (gw, gh) = map.subpatch_grid(subpatch).ok_or_else(|| {
        CknError::InvalidArgument("map smaller than the whitening sub-patch".into())
    })?;
    let n = gw * gh;
    if n < dim {
        return Err(CknError::NotEnoughSamples {
            needed: dim,
            got: n,
        });
    }

    let mut rows = Vec::with_capacity(n * dim);
    let mut buf = vec![0.0; dim];
    for y in 0..gh {
        for x in 0..gw {
            map.subpatch_into(x, y, subpatch, &mut buf);
            remove_mean_color(&mut buf, channels);
            rows.extend_from_slice(&buf);
        }
    }
    let mut mean = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for row in rows.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.trace() <= WHITEN_EIGEN_FLOOR {
        return Ok(WhitenModel::identity(subpatch, channels));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Vec::with_capacity(dim * dim);
    let mut eigenvalues = Vec::with_capacity(dim);
    for &k in &order {
        basis.extend(eig.eigenvectors.column(k).iter());
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    let scales = eigenvalues
        .iter()
        .map(|l| 1.0 / l.max(WHITEN_EIGEN_FLOOR).sqrt())
        .collect();
    Ok(WhitenModel {
        remove_mean_color: true,
        subpatch,
        channels,
        basis,
        scales,
        eigenvalues,
    })
}

/// Centered and whitened sub-patch at top-left location `(x, y)`.
pub fn whiten_apply(map: &FeatureMap, model: &WhitenModel, x: usize, y: usize) -> Result<Vec<f64>> {
    if map.channels() != model.channels {
        return Err(CknError::DimensionMismatch {
            expected: model.channels,
            actual: map.channels(),
        });
    }
    let raw = map.subpatch(x, y, model.subpatch)?;
    Ok(model.transform(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_patch(side: usize, channels: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::from_image(Image::from_fn(side, side, channels, |_, _, _| rng.random()).unwrap())
            .unwrap()
    }

    #[test]
    fn raw_map_is_identity_on_rgb() {
        let red = Patch::from_image(
            Image::from_fn(51, 51, 3, |_, _, c| if c == 0 { 0.7 } else { 0.0 }).unwrap(),
        )
        .unwrap();
        let map = to_raw_map(&red).unwrap();
        assert_eq!((map.width(), map.height(), map.channels()), (51, 51, 3));
        assert_eq!(map.pixel(10, 20), &[0.7, 0.0, 0.0]);

        let p = noise_patch(51, 3, 1);
        assert_eq!(to_raw_map(&p).unwrap().data(), p.pixels.data());
        assert!(to_raw_map(&noise_patch(9, 1, 2)).is_err());
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let flat = Patch::from_image(Image::from_fn(9, 9, 1, |_, _, _| 0.4).unwrap()).unwrap();
        assert!(to_grad_map(&flat).data().iter().all(|v| *v == 0.0));

        let s = 0.03;
        let ramp =
            Patch::from_image(Image::from_fn(11, 11, 1, |x, _, _| 0.1 + s * x as f64).unwrap())
                .unwrap();
        let g = to_grad_map(&ramp);
        for y in 1..10 {
            for x in 1..10 {
                assert!((g.get(x, y, 0) - s).abs() < 1e-12);
                assert_eq!(g.get(x, y, 1), 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_direct_differences() {
        let p = noise_patch(13, 3, 7);
        let g = to_grad_map(&p);
        let gray = |x: usize, y: usize| {
            0.299 * p.pixels.get(x, y, 0) + 0.587 * p.pixels.get(x, y, 1) + 0.114 * p.pixels.get(x, y, 2)
        };
        for y in 0..13usize {
            for x in 0..13usize {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(12));
                let (yl, yr) = (y.saturating_sub(1), (y + 1).min(12));
                let gx = (gray(xr, y) - gray(xl, y)) / (xr - xl) as f64;
                let gy = (gray(x, yr) - gray(x, yl)) / (yr - yl) as f64;
                assert!((g.get(x, y, 0) - gx).abs() < 1e-12);
                assert!((g.get(x, y, 1) - gy).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_ignores_constant_offset() {
        let p = noise_patch(15, 1, 3);
        let shifted = Patch::from_image(
            Image::new(15, 15, 1, p.pixels.data().iter().map(|v| v * 0.5 + 0.25).collect())
                .unwrap(),
        )
        .unwrap();
        let base = Patch::from_image(
            Image::new(15, 15, 1, p.pixels.data().iter().map(|v| v * 0.5).collect()).unwrap(),
        )
        .unwrap();
        let a = to_grad_map(&base);
        let b = to_grad_map(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_color_map_falls_back_to_identity() {
        let map = FeatureMap::new(10, 10, 3, [0.2, 0.5, 0.9].repeat(100)).unwrap();
        let model = whiten_fit(&map, 3).unwrap();
        assert_eq!(model, WhitenModel::identity(3, 3));
        let v = whiten_apply(&map, &model, 2, 2).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-15));
    }

    fn covariance(rows: &[Vec<f64>], dims: &[usize]) -> Vec<Vec<f64>> {
        let n = rows.len() as f64;
        let mean: Vec<f64> = dims.iter().map(|&d| rows.iter().map(|r| r[d]).sum::<f64>() / n).collect();
        dims.iter()
            .enumerate()
            .map(|(a, &da)| {
                dims.iter()
                    .enumerate()
                    .map(|(b, &db)| {
                        rows.iter().map(|r| (r[da] - mean[a]) * (r[db] - mean[b])).sum::<f64>() / n
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn whitened_noise_has_identity_covariance() {
        let map = to_raw_map(&noise_patch(51, 3, 11)).unwrap();
        let model = whiten_fit(&map, 3).unwrap();
        let mut rows = Vec::new();
        for y in 0..49 {
            for x in 0..49 {
                rows.push(whiten_apply(&map, &model, x, y).unwrap());
            }
        }
        assert!(rows.len() >= 2000);
        let live: Vec<usize> = (0..model.dim())
            .filter(|&k| model.eigenvalues[k] > WHITEN_EIGEN_FLOOR)
            .collect();
        // Mean-color removal kills one direction per channel.
        assert_eq!(live.len(), model.dim() - 3);
        let cov = covariance(&rows, &live);
        let mut frob = 0.0;
        for (i, row) in cov.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-6, "variance {}", row[i]);
            for (j, v) in row.iter().enumerate() {
                let t = if i == j { 1.0 } else { 0.0 };
                frob += (v - t).powi(2);
            }
        }
        assert!(frob.sqrt() < 0.1);
    }

    #[test]
    fn whiten_apply_matches_matrix_oracle() {
        let map = to_raw_map(&noise_patch(20, 3, 5)).unwrap();
        let model = whiten_fit(&map, 3).unwrap();
        let raw = map.subpatch(4, 7, 3).unwrap();
        // Oracle: explicit per-channel mean subtraction, then basis multiply.
        let mut means = [0.0; 3];
        for (i, v) in raw.iter().enumerate() {
            means[i % 3] += v / 9.0;
        }
        let centered: Vec<f64> = raw.iter().enumerate().map(|(i, v)| v - means[i % 3]).collect();
        let dim = 27;
        let got = whiten_apply(&map, &model, 4, 7).unwrap();
        for k in 0..dim {
            let mut dot = 0.0;
            for i in 0..dim {
                dot += model.basis[k * dim + i] * centered[i];
            }
            assert!((got[k] - model.scales[k] * dot).abs() < 1e-10);
        }
        assert!(whiten_apply(&map, &model, 18, 0).is_err());
    }

    #[test]
    fn centered_subpatch_has_zero_mean_color() {
        let p = noise_patch(6, 3, 9);
        let mut v = FeatureMap::from_image(&p.pixels).subpatch(0, 0, 3).unwrap();
        remove_mean_color(&mut v, 3);
        for c in 0..3 {
            let s: f64 = v.iter().skip(c).step_by(3).sum();
            assert!(s.abs() < 1e-15);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn whitening_ignores_constant_color(seed in 0u64..500, r in -0.5f64..0.5, g in -0.5f64..0.5, b in -0.5f64..0.5) {
                let map = to_raw_map(&noise_patch(12, 3, seed)).unwrap();
                let model = whiten_fit(&map, 3).unwrap();
                let shifted: Vec<f64> = map.data().iter().enumerate()
                    .map(|(i, v)| v + [r, g, b][i % 3]).collect();
                let shifted = FeatureMap::new(12, 12, 3, shifted).unwrap();
                let a = whiten_apply(&map, &model, 3, 4).unwrap();
                let c = whiten_apply(&shifted, &model, 3, 4).unwrap();
                for (x, y) in a.iter().zip(&c) {
                    prop_assert!((x - y).abs() < 1e-10);
                    prop_assert!(x.is_finite());
                }
            }
        }
    }
}
