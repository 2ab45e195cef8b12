//! Unsupervised layer training: fit `(W, b)` so that
//! `sum_j exp(w_j.x + b_j) exp(w_j.x' + b_j)` reproduces the Gaussian kernel
//! `exp(-|x - x'|^2 / (2 alpha^2))` on pairs of unit-norm sub-patches.
//!
//! Optimization runs in preconditioned coordinates `Z` with
//! `[W; b] = R Z`, where `R` decorrelates the intercept-augmented inputs.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CknError, Result};
use crate::linalg::{spectral_map, sym_eigen};
use crate::map::FeatureMap;

/// Exponents are clamped here inside `exp` during training.
pub const EXPONENT_CLAMP: f64 = 30.0;

/// Sub-patch vectors whose norm is at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-10;

/// Default number of sub-patches drawn per layer.
pub const DEFAULT_POOL_SIZE: usize = 1_000_000;

/// Fraction of clamped exponents above which an evaluation counts as diverged.
const CLAMP_TOLERANCE: f64 = 0.01;

/// Shape of one layer: sub-patch side, subsampling factor, filter count and
/// input channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub subpatch: usize,
    pub subsample: usize,
    pub filters: usize,
    pub in_channels: usize,
}

impl LayerSpec {
    pub fn input_dim(&self) -> usize {
        self.subpatch * self.subpatch * self.in_channels
    }
}

/// Trained parameters of one layer. `weights` is `q x p`, one filter per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub alpha: f64,
    pub subpatch: usize,
    pub subsample: usize,
    pub pool_beta: f64,
    pub in_channels: usize,
}

impl LayerParams {
    pub fn new(
        spec: LayerSpec,
        weights: Array2<f64>,
        bias: Array1<f64>,
        alpha: f64,
        pool_beta: f64,
    ) -> Result<Self> {
        if weights.nrows() != spec.input_dim() {
            return Err(CknError::DimensionMismatch {
                expected: spec.input_dim(),
                actual: weights.nrows(),
            });
        }
        if weights.ncols() != bias.len() || bias.is_empty() {
            return Err(CknError::DimensionMismatch {
                expected: weights.ncols(),
                actual: bias.len(),
            });
        }
        if !(alpha > 0.0) || !(pool_beta > 0.0) || spec.subsample == 0 {
            return Err(CknError::InvalidArgument(format!(
                "need alpha > 0, beta > 0, subsample >= 1 (got {alpha}, {pool_beta}, {})",
                spec.subsample
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(CknError::NonFinite("layer parameters"));
        }
        Ok(LayerParams {
            weights,
            bias,
            alpha,
            subpatch: spec.subpatch,
            subsample: spec.subsample,
            pool_beta,
            in_channels: spec.in_channels,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            subpatch: self.subpatch,
            subsample: self.subsample,
            filters: self.filters(),
            in_channels: self.in_channels,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn filters(&self) -> usize {
        self.weights.ncols()
    }

    /// Explicit feature vector `psi(x) = [exp(w_j.x + b_j)]_j`.
    pub fn features(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(CknError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok((x.dot(&self.weights) + &self.bias).mapv(f64::exp))
    }
}

/// Approximate kernel `<psi(x), psi(x')>`.
pub fn approx_kernel(params: &LayerParams, x: ArrayView1<f64>, xp: ArrayView1<f64>) -> Result<f64> {
    let a = params.features(x)?;
    let b = params.features(xp)?;
    Ok(a.dot(&b))
}

/// Gaussian kernel on the sphere that a layer is trained to reproduce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernelTarget {
    alpha: f64,
}

impl GaussianKernelTarget {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(CknError::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(GaussianKernelTarget { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, x: ArrayView1<f64>, xp: ArrayView1<f64>) -> f64 {
        let d2: f64 = x.iter().zip(xp.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * self.alpha * self.alpha)).exp()
    }
}

/// Pool of unit-norm training vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPairSet {
    vectors: Array2<f64>,
    pub seed: u64,
}

impl TrainPairSet {
    /// Normalizes the rows of `rows` and drops those with zero norm.
    pub fn from_rows(rows: ArrayView2<f64>, seed: u64) -> Result<Self> {
        let dim = rows.ncols();
        let mut data = Vec::with_capacity(rows.len());
        for row in rows.rows() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CknError::NonFinite("training pool"));
            }
            let norm = row.dot(&row).sqrt();
            if norm > ZERO_NORM {
                data.extend(row.iter().map(|v| v / norm));
            }
        }
        if data.is_empty() {
            return Err(CknError::NoInformativePatches);
        }
        let n = data.len() / dim;
        Ok(TrainPairSet {
            vectors: Array2::from_shape_vec((n, dim), data).expect("row-major pool"),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }
}

/// Draws `n` normalized sub-patches uniformly over (map, location).
pub fn sample_pairs(maps: &[FeatureMap], n: usize, subpatch: usize, seed: u64) -> Result<TrainPairSet> {
    sample_pairs_with(maps, n, subpatch, seed, |_, v| v.to_vec())
}

/// As [`sample_pairs`], with `transform(map_index, raw_subpatch)` applied to
/// each candidate before normalization.
pub fn sample_pairs_with(
    maps: &[FeatureMap],
    n: usize,
    subpatch: usize,
    seed: u64,
    transform: impl Fn(usize, &[f64]) -> Vec<f64>,
) -> Result<TrainPairSet> {
    if n == 0 {
        return Err(CknError::InvalidArgument("pool size must be >= 1".into()));
    }
    let channels = maps
        .first()
        .ok_or_else(|| CknError::InvalidArgument("no maps to sample from".into()))?
        .channels();
    let mut offsets = Vec::with_capacity(maps.len() + 1);
    offsets.push(0usize);
    let mut grids = Vec::with_capacity(maps.len());
    for m in maps {
        if m.channels() != channels {
            return Err(CknError::DimensionMismatch {
                expected: channels,
                actual: m.channels(),
            });
        }
        let grid = m.subpatch_grid(subpatch).unwrap_or((0, 0));
        grids.push(grid);
        offsets.push(offsets.last().unwrap() + grid.0 * grid.1);
    }
    let total = *offsets.last().unwrap();
    if total == 0 {
        return Err(CknError::InvalidArgument(format!(
            "no map is large enough for sub-patches of side {subpatch}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_dim = subpatch * subpatch * channels;
    let mut buf = vec![0.0; raw_dim];
    let mut data: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut found = 0usize;
    let mut attempts = 0usize;
    let budget = 50 * n + 10_000;
    while found < n {
        if attempts >= budget && found == 0 {
            return Err(CknError::NoInformativePatches);
        }
        attempts += 1;
        let g = rng.random_range(0..total);
        let m = offsets.partition_point(|&o| o <= g) - 1;
        let local = g - offsets[m];
        let (gw, _) = grids[m];
        maps[m].subpatch_into(local % gw, local / gw, subpatch, &mut buf);
        let v = transform(m, &buf);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(CknError::NonFinite("sub-patch"));
        }
        if norm <= ZERO_NORM {
            continue;
        }
        dim = v.len();
        data.extend(v.iter().map(|x| x / norm));
        found += 1;
    }
    Ok(TrainPairSet {
        vectors: Array2::from_shape_vec((n, dim), data).expect("row-major pool"),
        seed,
    })
}

/// Appends the constant 1 to every row.
fn augment(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(s![.., ..x.ncols()]).assign(&x);
    out
}

/// Change of variables that decorrelates intercept-augmented inputs.
///
/// `transform` is `U (D + tau I)^(-1/2) U^T`, the matrix applied to each
/// augmented input `x~`; with `tau = 0` and invertible `G` the transformed
/// inputs have identity second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub covariance: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
    pub tau: f64,
    transform: Array2<f64>,
}

impl Preconditioner {
    /// Fits on the pool with `tau` set to the mean eigenvalue.
    pub fn fit(pool: &TrainPairSet) -> Result<Self> {
        Self::fit_rows(pool.vectors(), None)
    }

    /// Fits on raw rows; `tau = None` uses the mean eigenvalue.
    pub fn fit_rows(rows: ArrayView2<f64>, tau: Option<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(CknError::InvalidArgument("empty pool".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(CknError::NonFinite("preconditioner input"));
        }
        let xt = augment(rows);
        let covariance = xt.t().dot(&xt) / rows.nrows() as f64;
        let (eigenvalues, eigenvectors) = sym_eigen(&covariance);
        let eigenvalues = eigenvalues.mapv(|l| l.max(0.0));
        let tau = tau.unwrap_or_else(|| eigenvalues.mean().unwrap_or(0.0));
        if !(tau >= 0.0) {
            return Err(CknError::InvalidArgument(format!("tau must be >= 0, got {tau}")));
        }
        let floor = 1e-12 * eigenvalues[0].max(1e-300);
        let transform = spectral_map(&eigenvalues, &eigenvectors, |l| 1.0 / (l + tau).max(floor).sqrt());
        Ok(Preconditioner {
            covariance,
            eigenvalues,
            eigenvectors,
            tau,
            transform,
        })
    }

    /// Matrix applied to augmented inputs.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.transform
    }

    /// `U (D + tau I)^(1/2) U^T`, the inverse of [`Preconditioner::matrix`].
    pub fn sqrt_matrix(&self) -> Array2<f64> {
        spectral_map(&self.eigenvalues, &self.eigenvectors, |l| (l + self.tau).sqrt())
    }

    pub fn dim(&self) -> usize {
        self.transform.nrows()
    }

    /// Rows `R x~_i` for the given raw rows.
    pub fn apply_rows(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        augment(rows).dot(&self.transform)
    }
}

/// Converts preconditioned filters `Z` into `(W, b)` with `[W; b] = R Z`.
pub fn de_precondition(z: &Array2<f64>, precond: &Preconditioner) -> (Array2<f64>, Array1<f64>) {
    let wb = precond.matrix().dot(z);
    let q = wb.nrows() - 1;
    (wb.slice(s![..q, ..]).to_owned(), wb.row(q).to_owned())
}

/// Inverse of [`de_precondition`].
pub fn precondition_filters(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    precond: &Preconditioner,
) -> Array2<f64> {
    let mut wb = Array2::zeros((weights.nrows() + 1, weights.ncols()));
    wb.slice_mut(s![..weights.nrows(), ..]).assign(weights);
    wb.row_mut(weights.nrows()).assign(bias);
    precond.sqrt_matrix().dot(&wb)
}

/// Training pairs, row `i` of `left` paired with row `i` of `right`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

impl PairBatch {
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Result<Self> {
        if left.dim() != right.dim() {
            return Err(CknError::DimensionMismatch {
                expected: left.len(),
                actual: right.len(),
            });
        }
        Ok(PairBatch { left, right })
    }

    pub fn len(&self) -> usize {
        self.left.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.left.nrows() == 0
    }

    fn targets(&self, alpha: f64) -> Array1<f64> {
        let target = GaussianKernelTarget { alpha };
        self.left
            .rows()
            .into_iter()
            .zip(self.right.rows())
            .map(|(a, b)| target.eval(a, b))
            .collect()
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct ClampStats {
    clamped: usize,
    total: usize,
}

impl ClampStats {
    fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clamped as f64 / self.total as f64
        }
    }
}

/// Summed squared residual on preconditioned rows, with its gradient in `Z`
/// written to `grad` when requested.
fn loss_and_grad(
    z: &Array2<f64>,
    ul: ArrayView2<f64>,
    ur: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    grad: Option<&mut Array2<f64>>,
    stats: &mut ClampStats,
) -> f64 {
    let mut a = ul.dot(z);
    let mut ap = ur.dot(z);
    stats.total += 2 * a.len();
    let mut clamp = |m: &mut Array2<f64>| {
        m.mapv_inplace(|v| {
            if v > EXPONENT_CLAMP {
                stats.clamped += 1;
                f64::INFINITY
            } else {
                v
            }
        })
    };
    clamp(&mut a);
    clamp(&mut ap);

    // Clamped entries are marked with +inf so their derivative can be zeroed.
    let mut terms = Array2::zeros(a.raw_dim());
    ndarray::Zip::from(&mut terms)
        .and(&a)
        .and(&ap)
        .for_each(|e, &x, &y| *e = (x.min(EXPONENT_CLAMP) + y.min(EXPONENT_CLAMP)).exp());
    let model = terms.sum_axis(Axis(1));
    let residual = &targets - &model;
    let loss = residual.dot(&residual);

    if let Some(grad) = grad {
        let weighted = &terms * &residual.view().insert_axis(Axis(1));
        let mask = |m: &Array2<f64>| {
            let mut w = weighted.clone();
            ndarray::Zip::from(&mut w).and(m).for_each(|w, &v| {
                if v.is_infinite() {
                    *w = 0.0
                }
            });
            w
        };
        let gl = ul.t().dot(&mask(&a));
        let gr = ur.t().dot(&mask(&ap));
        *grad = (gl + gr) * -2.0;
    }
    loss
}

fn check_filters(z: &Array2<f64>, precond: &Preconditioner, batch: &PairBatch) -> Result<()> {
    if z.nrows() != precond.dim() {
        return Err(CknError::DimensionMismatch {
            expected: precond.dim(),
            actual: z.nrows(),
        });
    }
    if batch.left.ncols() + 1 != precond.dim() {
        return Err(CknError::DimensionMismatch {
            expected: precond.dim() - 1,
            actual: batch.left.ncols(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CknError::NonFinite("filters"));
    }
    Ok(())
}

/// Training objective: sum over pairs of
/// `(exp(-|x - x'|^2 / (2 alpha^2)) - sum_j exp(z_j.R x~) exp(z_j.R x~'))^2`.
pub fn objective(z: &Array2<f64>, batch: &PairBatch, alpha: f64, precond: &Preconditioner) -> Result<f64> {
    check_filters(z, precond, batch)?;
    let ul = precond.apply_rows(batch.left.view());
    let ur = precond.apply_rows(batch.right.view());
    let mut stats = ClampStats::default();
    Ok(loss_and_grad(z, ul.view(), ur.view(), batch.targets(alpha).view(), None, &mut stats))
}

/// Objective and its gradient with respect to `Z`.
pub fn objective_gradient(
    z: &Array2<f64>,
    batch: &PairBatch,
    alpha: f64,
    precond: &Preconditioner,
) -> Result<(f64, Array2<f64>)> {
    check_filters(z, precond, batch)?;
    let ul = precond.apply_rows(batch.left.view());
    let ur = precond.apply_rows(batch.right.view());
    let mut stats = ClampStats::default();
    let mut grad = Array2::zeros(z.raw_dim());
    let loss = loss_and_grad(
        z,
        ul.view(),
        ur.view(),
        batch.targets(alpha).view(),
        Some(&mut grad),
        &mut stats,
    );
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `Z` entries drawn from a standard normal.
    StandardNormal,
    /// Standard normal draws mapped to the random-feature expansion of the
    /// target kernel: `w_j = g_j / alpha`, `b_j = -1/alpha^2 - ln(p)/2`.
    RandomFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_candidates: Vec<f64>,
    pub probe_iterations: usize,
    pub check_period: usize,
    pub decay_period: usize,
    pub validation_pairs: usize,
    /// Backtrack when the validation objective exceeds this factor times the best seen.
    pub divergence_factor: f64,
    pub max_backtracks: usize,
    pub init: InitScheme,
    pub seed: u64,
}

/// `{1, 2^-1/2, 2^-1, ..., 2^-20}`.
pub fn default_lr_candidates() -> Vec<f64> {
    (0..=40).map(|k| 2f64.powf(-(k as f64) / 2.0)).collect()
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            iterations: 300_000,
            batch_size: 1000,
            lr_candidates: default_lr_candidates(),
            probe_iterations: 1000,
            check_period: 1000,
            decay_period: 50_000,
            validation_pairs: 10_000,
            divergence_factor: 1.5,
            max_backtracks: 30,
            init: InitScheme::RandomFeatures,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.iterations,
            self.batch_size,
            self.probe_iterations,
            self.check_period,
            self.decay_period,
            self.validation_pairs,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(CknError::InvalidArgument("SGD counts must all be >= 1".into()));
        }
        if self.lr_candidates.is_empty() || self.lr_candidates.iter().any(|l| !(*l > 0.0)) {
            return Err(CknError::InvalidArgument(
                "learning-rate candidates must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub validation: f64,
    pub learning_rate: f64,
    pub best: f64,
}

/// Validation objectives are means over the held-out pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_validation: f64,
    pub final_validation: f64,
    pub learning_rate: f64,
    pub backtracks: usize,
    pub history: Vec<Checkpoint>,
}

struct Trainer<'a> {
    u: Array2<f64>,
    raw: ArrayView2<'a, f64>,
    train_idx: Vec<usize>,
    val_left: Array2<f64>,
    val_right: Array2<f64>,
    val_targets: Array1<f64>,
    alpha: f64,
    batch_size: usize,
}

impl Trainer<'_> {
    fn validation(&self, z: &Array2<f64>) -> (f64, f64) {
        let mut stats = ClampStats::default();
        let loss = loss_and_grad(
            z,
            self.val_left.view(),
            self.val_right.view(),
            self.val_targets.view(),
            None,
            &mut stats,
        );
        let mean = loss / self.val_targets.len() as f64;
        (if mean.is_finite() { mean } else { f64::INFINITY }, stats.fraction())
    }

    /// Runs `steps` SGD steps; returns the clamp fraction seen.
    fn run(&self, z: &mut Array2<f64>, lr: f64, steps: usize, rng: &mut ChaCha8Rng) -> f64 {
        let dim = self.u.ncols();
        let b = self.batch_size;
        let mut ul = Array2::zeros((b, dim));
        let mut ur = Array2::zeros((b, dim));
        let mut targets = Array1::zeros(b);
        let mut grad = Array2::zeros(z.raw_dim());
        let mut stats = ClampStats::default();
        let inv_two_a2 = 1.0 / (2.0 * self.alpha * self.alpha);
        for _ in 0..steps {
            for i in 0..b {
                let l = self.train_idx[rng.random_range(0..self.train_idx.len())];
                let r = self.train_idx[rng.random_range(0..self.train_idx.len())];
                ul.row_mut(i).assign(&self.u.row(l));
                ur.row_mut(i).assign(&self.u.row(r));
                let d2: f64 = self
                    .raw
                    .row(l)
                    .iter()
                    .zip(self.raw.row(r).iter())
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum();
                targets[i] = (-d2 * inv_two_a2).exp();
            }
            loss_and_grad(z, ul.view(), ur.view(), targets.view(), Some(&mut grad), &mut stats);
            z.scaled_add(-lr / b as f64, &grad);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        stats.fraction()
    }
}

fn initial_filters(
    config: &SgdConfig,
    q: usize,
    p: usize,
    alpha: f64,
    precond: &Preconditioner,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let normal = Array2::from_shape_simple_fn((q + 1, p), || rng.sample::<f64, _>(StandardNormal));
    match config.init {
        InitScheme::StandardNormal => normal,
        InitScheme::RandomFeatures => {
            let weights = normal.slice(s![..q, ..]).mapv(|g| g / alpha);
            let bias = Array1::from_elem(p, -1.0 / (alpha * alpha) - 0.5 * (p as f64).ln());
            precondition_filters(&weights, &bias, precond)
        }
    }
}

/// Fits a layer's filters on `pool` by preconditioned SGD.
///
/// A learning rate is chosen by short probes over the candidate set; the
/// main run checks a held-out objective every `check_period` steps, restores
/// the best snapshot and halves the rate on divergence, and divides the rate
/// by `sqrt(2)` every `decay_period` steps. The best snapshot is returned.
pub fn train_layer(
    pool: &TrainPairSet,
    spec: LayerSpec,
    alpha: f64,
    config: &SgdConfig,
) -> Result<(LayerParams, TrainReport)> {
    config.validate()?;
    GaussianKernelTarget::new(alpha)?;
    if spec.filters == 0 {
        return Err(CknError::InvalidArgument("need at least one filter".into()));
    }
    if pool.dim() != spec.input_dim() {
        return Err(CknError::DimensionMismatch {
            expected: spec.input_dim(),
            actual: pool.dim(),
        });
    }
    let n = pool.len();
    let q = pool.dim();
    let p = spec.filters;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = if n >= 20 {
        let k = n / 10;
        (order[..k].to_vec(), order[k..].to_vec())
    } else {
        (order.clone(), order)
    };

    let raw = pool.vectors();
    let train_rows = raw.select(Axis(0), &train_idx);
    let precond = Preconditioner::fit_rows(train_rows.view(), None)?;
    let u = precond.apply_rows(raw);

    let pick = |rng: &mut ChaCha8Rng| val_idx[rng.random_range(0..val_idx.len())];
    let pairs: Vec<(usize, usize)> = (0..config.validation_pairs)
        .map(|_| (pick(&mut rng), pick(&mut rng)))
        .collect();
    let (lv, rv): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let val_batch = PairBatch {
        left: raw.select(Axis(0), &lv),
        right: raw.select(Axis(0), &rv),
    };
    let trainer = Trainer {
        val_left: u.select(Axis(0), &lv),
        val_right: u.select(Axis(0), &rv),
        val_targets: val_batch.targets(alpha),
        u,
        raw,
        train_idx,
        alpha,
        batch_size: config.batch_size,
    };

    let z0 = initial_filters(config, q, p, alpha, &precond, &mut rng);
    let (initial_validation, _) = trainer.validation(&z0);
    let stream_seed: u64 = rng.random();

    let probe_steps = config.probe_iterations.min(config.iterations);
    let mut best: Option<(f64, f64, Array2<f64>)> = None;
    for &lr in &config.lr_candidates {
        let mut z = z0.clone();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let clamp = trainer.run(&mut z, lr, probe_steps, &mut probe_rng);
        let (val, val_clamp) = trainer.validation(&z);
        if !val.is_finite() || clamp > CLAMP_TOLERANCE || val_clamp > CLAMP_TOLERANCE {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, lr, z));
        }
    }
    let (mut best_val, mut lr, mut z) = best.ok_or_else(|| {
        CknError::Diverged("every learning-rate candidate diverged during probing".into())
    })?;
    let chosen_lr = lr;
    let mut snapshot = z.clone();
    let mut history = vec![Checkpoint {
        iteration: probe_steps,
        validation: best_val,
        learning_rate: lr,
        best: best_val,
    }];

    let mut main_rng = ChaCha8Rng::seed_from_u64(stream_seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut iteration = probe_steps;
    let mut backtracks = 0;
    let mut consecutive = 0;
    while iteration < config.iterations {
        let next_check = (iteration / config.check_period + 1) * config.check_period;
        let next_decay = (iteration / config.decay_period + 1) * config.decay_period;
        let stop = next_check.min(next_decay).min(config.iterations);
        let clamp = trainer.run(&mut z, lr, stop - iteration, &mut main_rng);
        iteration = stop;
        if iteration % config.decay_period == 0 {
            lr /= std::f64::consts::SQRT_2;
        }
        if iteration % config.check_period != 0 && iteration != config.iterations {
            continue;
        }
        let (val, val_clamp) = trainer.validation(&z);
        let diverged = !val.is_finite()
            || val > config.divergence_factor * best_val
            || clamp > CLAMP_TOLERANCE
            || val_clamp > CLAMP_TOLERANCE;
        if diverged {
            z.assign(&snapshot);
            lr /= 2.0;
            backtracks += 1;
            consecutive += 1;
            if consecutive > config.max_backtracks {
                return Err(CknError::Diverged(format!(
                    "{consecutive} consecutive backtracks at iteration {iteration}"
                )));
            }
        } else {
            consecutive = 0;
            if val < best_val {
                best_val = val;
                snapshot.assign(&z);
            }
        }
        history.push(Checkpoint {
            iteration,
            validation: val,
            learning_rate: lr,
            best: best_val,
        });
    }

    let (weights, bias) = de_precondition(&snapshot, &precond);
    let params = LayerParams::new(spec, weights, bias, alpha, spec.subsample as f64)?;
    Ok((
        params,
        TrainReport {
            initial_validation,
            final_validation: best_val,
            learning_rate: chosen_lr,
            backtracks,
            history,
        },
    ))
}
