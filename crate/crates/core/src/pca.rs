//! Descriptor PCA with optional full or semi whitening.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{CknError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::linalg::sym_eigen;

/// Singular values below this fraction of the largest are floored before inversion.
pub const SINGULAR_FLOOR: f64 = 1e-8;

/// Eigenvalues of the Gram matrix below this fraction of the largest are
/// treated as null directions when recovering principal axes.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaMode {
    None,
    Semi,
    Full,
}

impl PcaMode {
    pub fn tag(self) -> u32 {
        match self {
            PcaMode::None => 0,
            PcaMode::Semi => 1,
            PcaMode::Full => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(PcaMode::None),
            1 => Some(PcaMode::Semi),
            2 => Some(PcaMode::Full),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PcaMode::None => "none",
            PcaMode::Semi => "semi",
            PcaMode::Full => "full",
        }
    }

    /// Multiplier applied to the component with scale `d`.
    fn factor(self, d: f64) -> f64 {
        match self {
            PcaMode::None => 1.0,
            PcaMode::Semi => 1.0 / d.sqrt(),
            PcaMode::Full => 1.0 / d,
        }
    }
}

impl std::str::FromStr for PcaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PcaMode::None),
            "semi" => Ok(PcaMode::Semi),
            "full" => Ok(PcaMode::Full),
            other => Err(format!("unknown PCA mode `{other}` (expected none, semi or full)")),
        }
    }
}

/// Projection `y = L (x - mean)` with `L` of shape `d' x d`.
///
/// `scales` are the per-component standard deviations `S_i / sqrt(n)` of the
/// fit set, floored; row `i` of `projection` is the principal axis `i`
/// multiplied by the mode's factor of `scales[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mode: PcaMode,
    pub mean: Array1<f64>,
    pub scales: Array1<f64>,
    pub projection: Array2<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(CknError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(self.projection.dot(&(&x - &self.mean)))
    }

    pub fn apply_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(CknError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let centered = &x - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.projection.t()))
    }
}

const PCA_MAGIC: &[u8; 4] = b"CKNP";
const PCA_VERSION: usize = 1;

impl PcaModel {
    /// Writes the model container: magic, version, mode tag, `d`, `d'`, then
    /// mean, scales and projection as f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.magic(PCA_MAGIC)
            .u32(PCA_VERSION)
            .u32(self.mode.tag() as usize)
            .u32(self.input_dim())
            .u32(self.output_dim())
            .f64s(self.mean.iter())
            .f64s(self.scales.iter())
            .f64s(self.projection.iter());
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::open(path)?;
        r.magic(PCA_MAGIC)?;
        let version = r.u32()?;
        if version != PCA_VERSION {
            return Err(r.error(format!("unsupported PCA version {version}")));
        }
        let tag = r.u32()?;
        let mode = PcaMode::from_tag(tag as u32).ok_or_else(|| r.error(format!("unknown PCA mode {tag}")))?;
        let (d, k) = (r.u32()?, r.u32()?);
        let mean = Array1::from(r.f64s(d)?);
        let scales = Array1::from(r.f64s(k)?);
        let projection = Array2::from_shape_vec((k, d), r.f64s(k * d)?).expect("sized");
        r.finish()?;
        Ok(PcaModel {
            mode,
            mean,
            scales,
            projection,
        })
    }
}

/// Fits a `dim`-component PCA on the rows of `data`.
pub fn fit(data: ArrayView2<f64>, dim: usize, mode: PcaMode) -> Result<PcaModel> {
    let (n, d) = data.dim();
    if dim == 0 || dim > d {
        return Err(CknError::InvalidArgument(format!(
            "PCA dimension must be in 1..={d}, got {dim}"
        )));
    }
    if n < dim {
        return Err(CknError::NotEnoughSamples { needed: dim, got: n });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CknError::NonFinite("PCA input"));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let x = &data - &mean.view().insert_axis(Axis(0));

    // Principal axes as columns of `axes` (d x dim) and variances along them.
    let (variances, mut axes) = if n >= d {
        let cov = x.t().dot(&x) / n as f64;
        let (vals, vecs) = sym_eigen(&cov);
        (vals.slice(s![..dim]).to_owned(), vecs.slice(s![.., ..dim]).to_owned())
    } else {
        let gram = x.dot(&x.t()) / n as f64;
        let (vals, vecs) = sym_eigen(&gram);
        let top = vals[0].max(0.0);
        let mut axes = x.t().dot(&vecs.slice(s![.., ..dim]));
        let mut null = Vec::new();
        for i in 0..dim {
            if vals[i] > RANK_TOL * top && top > 0.0 {
                let norm = (n as f64 * vals[i]).sqrt();
                axes.column_mut(i).mapv_inplace(|v| v / norm);
            } else {
                null.push(i);
            }
        }
        complete_orthonormal(&mut axes, &null);
        (vals.slice(s![..dim]).to_owned(), axes)
    };

    for mut col in axes.columns_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }

    let raw: Vec<f64> = variances.iter().map(|v| v.max(0.0).sqrt()).collect();
    let top = raw.first().copied().unwrap_or(0.0);
    let floor = SINGULAR_FLOOR * top;
    let scales = Array1::from_iter(raw.iter().map(|&v| if top > 0.0 { v.max(floor) } else { 1.0 }));
    let factors = scales.mapv(|sv| mode.factor(sv));
    let projection = axes.t().to_owned() * &factors.view().insert_axis(Axis(1));
    Ok(PcaModel {
        mode,
        mean,
        scales,
        projection,
    })
}

/// Replaces the listed columns with unit vectors orthogonal to all others.
fn complete_orthonormal(axes: &mut Array2<f64>, null: &[usize]) {
    if null.is_empty() {
        return;
    }
    let d = axes.nrows();
    let mut candidate = 0usize;
    for &i in null {
        axes.column_mut(i).fill(0.0);
        loop {
            let mut v = Array1::<f64>::zeros(d);
            v[candidate % d] = 1.0;
            candidate += 1;
            for j in 0..axes.ncols() {
                if j == i || (null.contains(&j) && axes.column(j).iter().all(|&x| x == 0.0)) {
                    continue;
                }
                let c = axes.column(j);
                let proj = c.dot(&v);
                v.scaled_add(-proj, &c);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 0.5 {
                axes.column_mut(i).assign(&(v / norm));
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn correlated(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let mix = Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
        z.dot(&mix) + 0.5
    }

    fn covariance(y: &Array2<f64>) -> Array2<f64> {
        let mean = y.mean_axis(Axis(0)).unwrap();
        let c = y - &mean.insert_axis(Axis(0));
        c.t().dot(&c) / y.nrows() as f64
    }

    fn frobenius(a: &Array2<f64>) -> f64 {
        a.mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn full_whitening_gives_identity_covariance() {
        for (n, d, k) in [(400, 12, 8), (30, 60, 20)] {
            let x = correlated(n, d, n as u64);
            let m = fit(x.view(), k, PcaMode::Full).unwrap();
            let y = m.apply_batch(x.view()).unwrap();
            let err = frobenius(&(covariance(&y) - Array2::<f64>::eye(k)));
            assert!(err < 1e-5, "n={n} d={d}: {err}");
        }
    }

    #[test]
    fn unwhitened_axes_are_orthonormal_with_variances_on_the_diagonal() {
        for (n, d) in [(300, 10), (25, 40)] {
            let x = correlated(n, d, 4);
            let m = fit(x.view(), 8, PcaMode::None).unwrap();
            let gram = m.projection.dot(&m.projection.t());
            assert!(frobenius(&(gram - Array2::<f64>::eye(8))) < 1e-8);
            let cov = covariance(&m.apply_batch(x.view()).unwrap());
            for i in 0..8 {
                assert!((cov[[i, i]] - m.scales[i].powi(2)).abs() < 1e-8 * cov[[0, 0]]);
            }
        }
    }

    #[test]
    fn axis_aligned_data_selects_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sd = [5.0, 3.0, 1.0, 0.5];
        let x = Array2::from_shape_fn((2000, 4), |(_, k)| sd[k] * rng.sample::<f64, _>(StandardNormal));
        let m = fit(x.view(), 2, PcaMode::None).unwrap();
        assert!((m.projection[[0, 0]].abs() - 1.0).abs() < 0.01);
        assert!((m.projection[[1, 1]].abs() - 1.0).abs() < 0.01);
    }

    #[test]
    fn semi_scaled_twice_is_full() {
        let x = correlated(200, 9, 5);
        let semi = fit(x.view(), 6, PcaMode::Semi).unwrap();
        let full = fit(x.view(), 6, PcaMode::Full).unwrap();
        let twice = &semi.projection / &semi.scales.mapv(f64::sqrt).insert_axis(Axis(1));
        assert!((&twice - &full.projection).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn mean_maps_to_zero_and_batch_matches_rows() {
        let x = correlated(100, 7, 6);
        let m = fit(x.view(), 5, PcaMode::Semi).unwrap();
        assert!(m.apply(m.mean.view()).unwrap().iter().all(|v| v.abs() < 1e-12));
        let batch = m.apply_batch(x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let single = m.apply(row).unwrap();
            assert!((&single - &batch.row(i)).iter().all(|v| v.abs() < 1e-10));
        }
        assert!(m.apply(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn projected_inner_products_match_svd_coordinates() {
        let x = correlated(150, 6, 7);
        let m = fit(x.view(), 3, PcaMode::None).unwrap();
        // Oracle: coordinates on the top eigenvectors of the covariance.
        let mean = x.mean_axis(Axis(0)).unwrap();
        let c = &x - &mean.clone().insert_axis(Axis(0));
        let (_, vecs) = sym_eigen(&(c.t().dot(&c) / 150.0));
        let coords = |v: ArrayView1<f64>| (&v - &mean).dot(&vecs.slice(s![.., ..3]));
        let (a, b) = (x.row(3), x.row(9));
        let want = coords(a).dot(&coords(b));
        let got = m.apply(a).unwrap().dot(&m.apply(b).unwrap());
        assert!((want - got).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn rank_deficient_fit_stays_orthonormal() {
        // Exactly `dim` samples: centering leaves one null direction.
        let x = correlated(6, 20, 8);
        let m = fit(x.view(), 6, PcaMode::Full).unwrap();
        let unscaled = &m.projection / &m.scales.mapv(|s| PcaMode::Full.factor(s)).insert_axis(Axis(1));
        let gram = unscaled.dot(&unscaled.t());
        assert!(frobenius(&(gram - Array2::<f64>::eye(6))) < 1e-8);
        assert!(m.projection.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = correlated(5, 8, 9);
        assert!(matches!(fit(x.view(), 6, PcaMode::None), Err(CknError::NotEnoughSamples { .. })));
        assert!(fit(x.view(), 9, PcaMode::None).is_err());
        assert!("half".parse::<PcaMode>().is_err());
        assert_eq!("semi".parse::<PcaMode>().unwrap(), PcaMode::Semi);
    }
}
