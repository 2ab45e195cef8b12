//! k-means vocabularies and VLAD aggregation of local descriptors.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CknError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::pca::{self, PcaModel, PcaMode};

pub const DEFAULT_CODEBOOK_SIZE: usize = 256;
pub const DEFAULT_KMEANS_ITERATIONS: usize = 100;

/// Lloyd iterations stop once the relative inertia change drops below this.
const INERTIA_TOL: f64 = 1e-6;

const CODEBOOK_MAGIC: &[u8; 4] = b"CKNC";

/// `k x d` centroids, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f32>,
}

impl Codebook {
    pub fn new(centroids: Array2<f32>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(CknError::InvalidArgument("empty codebook".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(CknError::NonFinite("codebook"));
        }
        Ok(Codebook { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Writes the codebook container: magic, `k`, `d`, then f32 centroids.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.magic(CODEBOOK_MAGIC).u32(self.k()).u32(self.dim()).f32s(self.centroids.iter());
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::open(path)?;
        r.magic(CODEBOOK_MAGIC)?;
        let (k, d) = (r.u32()?, r.u32()?);
        let data = r.f32s(k * d)?;
        r.finish()?;
        let centroids = Array2::from_shape_vec((k, d), data).expect("sized");
        Codebook::new(centroids).map_err(|e| CknError::format(path, e.to_string()))
    }

    /// Nearest centroid, ties to the lowest index.
    pub fn assign(&self, x: ArrayView1<f32>) -> usize {
        nearest(&self.centroids.mapv(f64::from).view(), x.mapv(f64::from).view()).0
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Writes per-image descriptor counts, one decimal integer per line. A
/// descriptor file for many images stores their rows back to back in this order.
pub fn write_counts(path: &Path, counts: &[usize]) -> Result<()> {
    let text: String = counts.iter().map(|c| format!("{c}\n")).collect();
    std::fs::write(path, text).map_err(|e| CknError::io(path, e))
}

pub fn read_counts(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| CknError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| CknError::format(path, format!("line {}: not a count: {l}", i + 1)))
        })
        .collect()
}

/// Result of [`kmeans_fit`]: the codebook and the inertia after every
/// assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub codebook: Codebook,
    pub inertia: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(data: ArrayView2<f32>, k: usize, seed: u64, max_iters: usize) -> Result<KmeansFit> {
    if k == 0 || max_iters == 0 {
        return Err(CknError::InvalidArgument("k and max_iters must be >= 1".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CknError::NonFinite("k-means input"));
    }
    let distinct: HashSet<Vec<u32>> = data
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(CknError::NotEnoughSamples {
            needed: k,
            got: distinct.len(),
        });
    }
    let x = data.mapv(f64::from);
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Array2::<f64>::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| squared_distance(r, x.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let mut pick = n - 1;
        if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
        }
        centroids.row_mut(j).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, centroids.row(j)));
        }
    }

    let mut inertia = Vec::new();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    for _ in 0..max_iters {
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&centroids.view(), x.row(i)))
            .collect();
        for (i, (l, d)) in assigned.into_iter().enumerate() {
            labels[i] = l;
            dists[i] = d;
        }
        let current: f64 = dists.iter().sum();
        let converged = inertia
            .last()
            .is_some_and(|&prev: &f64| (prev - current).abs() <= INERTIA_TOL * prev.max(f64::MIN_POSITIVE));
        inertia.push(current);
        if converged || current == 0.0 {
            break;
        }

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
            counts[l] += 1;
        }
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            } else {
                // Re-seed from the point farthest from its centroid.
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken.insert(far);
                centroids.row_mut(j).assign(&x.row(far));
            }
        }
    }
    Ok(KmeansFit {
        codebook: Codebook::new(centroids.mapv(|v| v as f32))?,
        inertia,
    })
}

/// Aggregated residuals of one descriptor set.
#[derive(Debug, Clone, PartialEq)]
pub struct Vlad {
    pub values: Array1<f64>,
    /// True when the descriptor set was empty and `values` is all zero.
    pub empty: bool,
}

/// Concatenated per-centroid sums of `x - c_i` over descriptors assigned to
/// centroid `i`, before any normalization. Each centroid's residuals are
/// summed in a value-sorted order, so the result does not depend on the order
/// of the descriptors.
pub fn vlad_residuals(descriptors: ArrayView2<f32>, codebook: &Codebook) -> Result<Array1<f64>> {
    if descriptors.nrows() > 0 && descriptors.ncols() != codebook.dim() {
        return Err(CknError::DimensionMismatch {
            expected: codebook.dim(),
            actual: descriptors.ncols(),
        });
    }
    let (k, d) = (codebook.k(), codebook.dim());
    let centroids = codebook.centroids.mapv(f64::from);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, row) in descriptors.rows().into_iter().enumerate() {
        members[nearest(&centroids.view(), row.mapv(f64::from).view()).0].push(i);
    }
    let mut out = Array1::<f64>::zeros(k * d);
    for (j, idx) in members.iter_mut().enumerate() {
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (descriptors.row(a), descriptors.row(b));
            ra.iter()
                .zip(rb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut block = out.slice_mut(ndarray::s![j * d..(j + 1) * d]);
        for &i in idx.iter() {
            for ((o, &x), &c) in block.iter_mut().zip(descriptors.row(i)).zip(centroids.row(j)) {
                *o += f64::from(x) - c;
            }
        }
    }
    Ok(out)
}

/// Signed square root of every coordinate.
pub fn power_normalize(v: &mut Array1<f64>) {
    v.mapv_inplace(|x| x.signum() * x.abs().sqrt());
}

/// Scales to unit norm; returns false and leaves `v` untouched when it is zero.
pub fn l2_normalize(v: &mut Array1<f64>) -> bool {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        *v /= norm;
        true
    } else {
        false
    }
}

/// VLAD vector: residual sums, then power normalization, then l2 normalization.
pub fn vlad_encode(descriptors: ArrayView2<f32>, codebook: &Codebook) -> Result<Vlad> {
    let mut values = vlad_residuals(descriptors, codebook)?;
    power_normalize(&mut values);
    l2_normalize(&mut values);
    Ok(Vlad {
        values,
        empty: descriptors.nrows() == 0,
    })
}

/// Fully whitened PCA of VLAD vectors.
pub fn vlad_pca_fit(vlads: ArrayView2<f64>, dim: usize) -> Result<PcaModel> {
    pca::fit(vlads, dim, PcaMode::Full)
}

/// Projects a VLAD vector and renormalizes it to unit length (zero stays zero).
pub fn vlad_pca_apply(model: &PcaModel, vlad: ArrayView1<f64>) -> Result<Array1<f64>> {
    let mut y = model.apply(vlad)?;
    if y.dot(&y).sqrt() > 1e-12 {
        l2_normalize(&mut y);
    } else {
        y.fill(0.0);
    }
    Ok(y)
}

/// Row-wise [`vlad_pca_apply`].
pub fn vlad_pca_apply_batch(model: &PcaModel, vlads: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut y = model.apply_batch(vlads)?;
    for mut row in y.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row /= norm;
        } else {
            row.fill(0.0);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand_distr::StandardNormal;

    fn blobs(k: usize, per: usize, d: usize, sigma: f64, seed: u64) -> (Array2<f32>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = Array2::from_shape_simple_fn((k, d), || rng.random_range(-10.0..10.0));
        let data = Array2::from_shape_fn((k * per, d), |(i, c)| {
            (means[[i % k, c]] + sigma * rng.sample::<f64, _>(StandardNormal)) as f32
        });
        (data, means)
    }

    /// Assignment cost of the best matching between centroid and true-mean
    /// sets, by exhaustive search over permutations.
    fn best_matching_error(found: &Array2<f64>, truth: &Array2<f64>) -> f64 {
        fn permute(i: usize, used: &mut Vec<bool>, cost: &dyn Fn(usize, usize) -> f64, acc: f64, best: &mut f64) {
            if i == used.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    permute(i + 1, used, cost, acc.max(cost(i, j)), best);
                    used[j] = false;
                }
            }
        }
        let cost = |i: usize, j: usize| squared_distance(found.row(i), truth.row(j)).sqrt();
        let mut best = f64::INFINITY;
        permute(0, &mut vec![false; found.nrows()], &cost, 0.0, &mut best);
        best
    }

    #[test]
    fn recovers_separated_blobs() {
        let sigma = 0.5;
        let (data, means) = blobs(5, 2000, 3, sigma, 1);
        let fit = kmeans_fit(data.view(), 5, 2, 100).unwrap();
        let err = best_matching_error(&fit.codebook.centroids.mapv(f64::from), &means);
        assert!(err < 0.1 * sigma, "{err}");
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_simple_fn((500, 4), || rng.random_range(-1.0f32..1.0));
        let fit = kmeans_fit(data.view(), 16, 4, 100).unwrap();
        assert!(fit.inertia.len() > 1);
        for w in fit.inertia.windows(2) {
            assert!(w[1] <= w[0], "{w:?}");
        }
    }

    #[test]
    fn k_equal_to_distinct_points_is_exact() {
        let pts = arr2(&[[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]);
        let fit = kmeans_fit(pts.view(), 3, 0, 10).unwrap();
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
        let mut rows: Vec<Vec<f32>> = fit.codebook.centroids.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(kmeans_fit(pts.view(), 4, 0, 10).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (data, _) = blobs(4, 50, 3, 1.0, 5);
        assert_eq!(kmeans_fit(data.view(), 6, 7, 50).unwrap(), kmeans_fit(data.view(), 6, 7, 50).unwrap());
    }

    #[test]
    fn descriptor_at_centroid_gives_zero_vlad() {
        let cb = Codebook::new(arr2(&[[1.0f32, 2.0], [5.0, 5.0]])).unwrap();
        let v = vlad_encode(arr2(&[[1.0f32, 2.0]]).view(), &cb).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
        let empty = vlad_encode(Array2::<f32>::zeros((0, 2)).view(), &cb).unwrap();
        assert!(empty.empty && empty.values.iter().all(|&x| x == 0.0));
        assert!(vlad_encode(arr2(&[[1.0f32, 2.0, 3.0]]).view(), &cb).is_err());
    }

    #[test]
    fn single_descriptor_closed_form() {
        let cb = Codebook::new(arr2(&[[0.5f32, 0.5, 0.5]])).unwrap();
        let v = vlad_encode(arr2(&[[4.5f32, 0.25, 0.5]]).view(), &cb).unwrap();
        let raw = arr1(&[2.0f64, -0.5, 0.0]);
        let norm = raw.dot(&raw).sqrt();
        for (a, b) in v.values.iter().zip(raw.iter()) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let desc = Array2::from_shape_simple_fn((100, 5), || rng.random_range(-1.0f32..1.0));
        let cb = Codebook::new(Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0f32..1.0))).unwrap();
        let got = vlad_residuals(desc.view(), &cb).unwrap();
        let mut want = vec![0.0f64; 20];
        for i in 0..100 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..4 {
                let mut d = 0.0;
                for c in 0..5 {
                    let diff = desc[[i, c]] as f64 - cb.centroids[[j, c]] as f64;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            for c in 0..5 {
                want[best * 5 + c] += desc[[i, c]] as f64 - cb.centroids[[best, c]] as f64;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let v = vlad_encode(desc.view(), &cb).unwrap();
        assert!((v.values.dot(&v.values).sqrt() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn vlad_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let desc = Array2::from_shape_simple_fn((60, 3), || rng.random_range(-1.0f32..1.0));
        let cb = Codebook::new(arr2(&[[0.0f32, 0.0, 0.0], [0.5, 0.5, 0.5]])).unwrap();
        let mut order: Vec<usize> = (0..60).collect();
        order.reverse();
        order.swap(3, 40);
        let shuffled = desc.select(Axis(0), &order);
        assert_eq!(
            vlad_encode(desc.view(), &cb).unwrap(),
            vlad_encode(shuffled.view(), &cb).unwrap()
        );
    }

    #[test]
    fn vlad_pca_whitens_and_renormalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array2::from_shape_simple_fn((300, 8), || rng.sample::<f64, _>(StandardNormal));
        let m = vlad_pca_fit(x.view(), 8).unwrap();
        let raw = m.apply_batch(x.view()).unwrap();
        let cov = raw.t().dot(&raw) / 300.0;
        let err = (&cov - &Array2::<f64>::eye(8)).mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-5);
        let y = vlad_pca_apply_batch(&m, x.view()).unwrap();
        for row in y.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        let zero = vlad_pca_apply(&m, m.mean.view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    mod props {
        use super::{vlad_encode, Array2, ChaCha8Rng, Codebook};
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn vlad_is_unit_or_zero(seed in 0u64..1000, n in 0usize..30) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let desc = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0f32..1.0));
                let cb = Codebook::new(Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0f32..1.0))).unwrap();
                let v = vlad_encode(desc.view(), &cb).unwrap();
                let norm = v.values.dot(&v.values).sqrt();
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-10);
                // Every descriptor lands in exactly one block.
                let mut counts = vec![0usize; 3];
                for r in desc.rows() {
                    counts[cb.assign(r)] += 1;
                }
                prop_assert_eq!(counts.iter().sum::<usize>(), n);
            }
        }
    }
}
