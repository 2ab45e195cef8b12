//! Brute-force references for the fast paths. Nothing here calls the code it
//! checks: sub-patches, distances and sums are all written out as plain loops.

use ndarray::{ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CknError, Result};
use crate::map::FeatureMap;
use crate::trainer::LayerParams;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub quantity: String,
    pub exact: f64,
    pub approx: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl OracleReport {
    pub fn new(quantity: impl Into<String>, exact: f64, approx: f64) -> Self {
        let abs_error = (exact - approx).abs();
        OracleReport {
            quantity: quantity.into(),
            exact,
            approx,
            abs_error,
            rel_error: if exact != 0.0 { abs_error / exact.abs() } else { abs_error },
            samples: None,
            seed: None,
            std_error: None,
            correlation: None,
            scale: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

fn patch_at(m: &FeatureMap, x: usize, y: usize, e: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(e * e * m.channels());
    for dy in 0..e {
        for dx in 0..e {
            for c in 0..m.channels() {
                v.push(m.get(x + dx, y + dy, c));
            }
        }
    }
    v
}

/// Single-layer convolutional match kernel: sum over all location pairs of
/// `exp(-|z - z'|^2 / (2 beta^2)) |P| |P'| exp(-|P~ - P~'|^2 / (2 alpha^2))`.
pub fn exact_match_kernel(m: &FeatureMap, mp: &FeatureMap, e: usize, alpha: f64, beta: f64) -> Result<f64> {
    if (m.width(), m.height(), m.channels()) != (mp.width(), mp.height(), mp.channels()) {
        return Err(CknError::InvalidArgument("maps must have equal shapes".into()));
    }
    if e == 0 || e > m.width() || e > m.height() {
        return Err(CknError::InvalidArgument(format!("sub-patch side {e} does not fit the map")));
    }
    let (gw, gh) = (m.width() - e + 1, m.height() - e + 1);
    let collect = |map: &FeatureMap| -> Vec<(f64, f64, f64, Vec<f64>)> {
        let mut out = Vec::new();
        for y in 0..gh {
            for x in 0..gw {
                let p = patch_at(map, x, y, e);
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let unit = if norm > 0.0 { p.iter().map(|v| v / norm).collect() } else { p };
                out.push((x as f64, y as f64, norm, unit));
            }
        }
        out
    };
    let (a, b) = (collect(m), collect(mp));
    let mut total = 0.0;
    for (x, y, n, u) in &a {
        if *n == 0.0 {
            continue;
        }
        for (xp, yp, np, up) in &b {
            if *np == 0.0 {
                continue;
            }
            let spatial = ((x - xp).powi(2) + (y - yp).powi(2)) / (2.0 * beta * beta);
            let feature: f64 = u.iter().zip(up).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / (2.0 * alpha * alpha);
            total += (-spatial).exp() * n * np * (-feature).exp();
        }
    }
    Ok(total)
}

/// Monte Carlo estimate of `exp(-|x - x'|^2 / (2 alpha^2))` for unit vectors
/// as the mean of `s(v.x) s(v.x')` with `v ~ N(0, alpha^2/4 I)` and
/// `s(u) = exp(-1/alpha^2 + 2u/alpha^2)`. Returns the report with its
/// standard error.
pub fn mc_gaussian_estimate(
    x: ArrayView1<f64>,
    xp: ArrayView1<f64>,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    if x.len() != xp.len() {
        return Err(CknError::DimensionMismatch {
            expected: x.len(),
            actual: xp.len(),
        });
    }
    if samples < 2 || !(alpha > 0.0) {
        return Err(CknError::InvalidArgument("need >= 2 samples and alpha > 0".into()));
    }
    let normal = Normal::new(0.0, alpha / 2.0).expect("valid deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a2 = alpha * alpha;
    let s = |u: f64| (-1.0 / a2 + 2.0 * u / a2).exp();
    let (mut mean, mut m2) = (0.0, 0.0);
    let mut v = vec![0.0; x.len()];
    for i in 0..samples {
        v.iter_mut().for_each(|c| *c = normal.sample(&mut rng));
        let (mut u, mut up) = (0.0, 0.0);
        for k in 0..v.len() {
            u += v[k] * x[k];
            up += v[k] * xp[k];
        }
        let value = s(u) * s(up);
        let delta = value - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (value - mean);
    }
    let var = m2 / (samples - 1) as f64;
    let mut d2 = 0.0;
    for k in 0..x.len() {
        d2 += (x[k] - xp[k]) * (x[k] - xp[k]);
    }
    let mut report = OracleReport::new("gaussian_kernel_mc", (-d2 / (2.0 * a2)).exp(), mean);
    report.samples = Some(samples);
    report.seed = Some(seed);
    report.std_error = Some((var / samples as f64).sqrt());
    Ok(report)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Inner products of encoded maps next to the exact single-layer kernel.
///
/// `encode` maps a feature map to its flattened encoding. The report's
/// `exact`/`approx` are means over pairs, `scale` is the least-squares factor
/// bringing inner products onto the kernel, and `rel_error` is the mean
/// relative error after that scaling.
pub fn encoder_vs_kernel(
    params: &LayerParams,
    pairs: &[(FeatureMap, FeatureMap)],
    encode: impl Fn(&FeatureMap) -> Result<Vec<f64>> + Sync,
) -> Result<OracleReport> {
    if pairs.is_empty() {
        return Err(CknError::InvalidArgument("no map pairs".into()));
    }
    let values: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(m, mp)| -> Result<(f64, f64)> {
            let exact = exact_match_kernel(m, mp, params.subpatch, params.alpha, params.pool_beta)?;
            let (a, b) = (encode(m)?, encode(mp)?);
            let mut dot = 0.0;
            for k in 0..a.len() {
                dot += a[k] * b[k];
            }
            Ok((exact, dot))
        })
        .collect::<Result<_>>()?;
    let exact: Vec<f64> = values.iter().map(|v| v.0).collect();
    let approx: Vec<f64> = values.iter().map(|v| v.1).collect();
    let scale = exact.iter().zip(&approx).map(|(e, a)| e * a).sum::<f64>()
        / approx.iter().map(|a| a * a).sum::<f64>().max(f64::MIN_POSITIVE);
    let n = pairs.len() as f64;
    let rel = exact
        .iter()
        .zip(&approx)
        .map(|(e, a)| if *e != 0.0 { (e - scale * a).abs() / e.abs() } else { (scale * a).abs() })
        .sum::<f64>()
        / n;
    let mut report = OracleReport::new(
        "encoder_vs_kernel",
        exact.iter().sum::<f64>() / n,
        approx.iter().sum::<f64>() / n,
    );
    report.rel_error = rel;
    report.samples = Some(pairs.len());
    report.correlation = Some(pearson(&exact, &approx));
    report.scale = Some(scale);
    Ok(report)
}

/// Residual sums per nearest centroid (lowest index on ties), one point at a time.
pub fn naive_vlad(descriptors: ArrayView2<f32>, centroids: ArrayView2<f32>) -> Vec<f64> {
    let (k, d) = centroids.dim();
    let mut out = vec![0.0; k * d];
    for i in 0..descriptors.nrows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let mut dist = 0.0;
            for c in 0..d {
                let diff = descriptors[[i, c]] as f64 - centroids[[j, c]] as f64;
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        for c in 0..d {
            out[best * d + c] += descriptors[[i, c]] as f64 - centroids[[best, c]] as f64;
        }
    }
    out
}

/// Average precision from the 1-based ranks of the relevant items.
pub fn naive_average_precision(relevant_ranks: &[usize]) -> f64 {
    let mut ranks = relevant_ranks.to_vec();
    ranks.sort_unstable();
    let mut sum = 0.0;
    for (hit, rank) in ranks.iter().enumerate() {
        sum += (hit + 1) as f64 / *rank as f64;
    }
    sum / ranks.len() as f64
}
