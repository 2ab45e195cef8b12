//! Forward encoding of patches through a layer stack, and layer-wise training
//! of a whole model.

use std::f64::consts::PI;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{CknError, Result};
use crate::image::{Patch, DEFAULT_PATCH_SIDE};
use crate::input::{whiten_fit, InputType, WhitenModel};
use crate::io::{ByteReader, ByteWriter};
use crate::map::FeatureMap;
use crate::trainer::{sample_pairs_with, train_layer, LayerParams, LayerSpec, SgdConfig, TrainReport, ZERO_NORM};

/// Layer shapes for one input type.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input: InputType,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// 5x5 sub-patches, subsampling 5, 512 filters on raw color.
    pub fn raw() -> Self {
        Architecture {
            input: InputType::Raw,
            layers: vec![layer(5, 5, 512, 3)],
        }
    }

    /// 3x3/3/128 on whitened color, then 2x2/2/512.
    pub fn white() -> Self {
        Architecture {
            input: InputType::White { subpatch: 3 },
            layers: vec![layer(3, 3, 128, 3), layer(2, 2, 512, 128)],
        }
    }

    /// 16 analytic orientation bins subsampled by 3, then 4x4/2/1024.
    pub fn grad() -> Self {
        Architecture {
            input: InputType::Grad,
            layers: vec![layer(1, 3, 16, 2), layer(4, 2, 1024, 16)],
        }
    }

    pub fn reference(input: InputType) -> Self {
        match input {
            InputType::Raw => Self::raw(),
            InputType::White { .. } => Self::white(),
            InputType::Grad => Self::grad(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| CknError::InvalidArgument("architecture has no layers".into()))?;
        if first.in_channels != self.input.map_channels() {
            return Err(CknError::DimensionMismatch {
                expected: self.input.map_channels(),
                actual: first.in_channels,
            });
        }
        match self.input {
            InputType::White { subpatch } if subpatch != first.subpatch => {
                return Err(CknError::InvalidArgument(format!(
                    "whitening sub-patch {subpatch} differs from layer-1 sub-patch {}",
                    first.subpatch
                )));
            }
            InputType::Grad if first.subpatch != 1 || first.filters < 2 => {
                return Err(CknError::InvalidArgument(
                    "gradient input needs a 1x1 first layer with at least 2 orientations".into(),
                ));
            }
            _ => {}
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[1].in_channels != pair[0].filters {
                return Err(CknError::InvalidArgument(format!(
                    "layer {} expects {} channels but layer {} outputs {}",
                    k + 2,
                    pair[1].in_channels,
                    k + 1,
                    pair[0].filters
                )));
            }
        }
        if self.layers.iter().any(|l| l.subpatch == 0 || l.subsample == 0 || l.filters == 0) {
            return Err(CknError::InvalidArgument("layer sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Output `(width, height, channels)` for a square input of side `side`.
    pub fn output_shape(&self, side: usize) -> Option<(usize, usize, usize)> {
        let mut n = side;
        for l in &self.layers {
            n = pooled_len(n.checked_sub(l.subpatch - 1)?, l.subsample);
            if n == 0 {
                return None;
            }
        }
        let c = self.layers.last()?.filters;
        Some((n, n, c))
    }

    pub fn output_dim(&self, side: usize) -> Option<usize> {
        self.output_shape(side).map(|(w, h, c)| w * h * c)
    }
}

fn layer(subpatch: usize, subsample: usize, filters: usize, in_channels: usize) -> LayerSpec {
    LayerSpec {
        subpatch,
        subsample,
        filters,
        in_channels,
    }
}

/// Number of pooling centers `floor(s/2) + k s` below `n`.
pub fn pooled_len(n: usize, subsample: usize) -> usize {
    let first = subsample / 2;
    if n <= first {
        0
    } else {
        (n - first - 1) / subsample + 1
    }
}

/// Bandwidth of the orientation layer: distance between adjacent bin centers
/// on the unit circle.
pub fn orientation_bandwidth(p1: usize) -> f64 {
    let t = 2.0 * PI / p1 as f64;
    ((1.0 - t.cos()).powi(2) + t.sin().powi(2)).sqrt()
}

/// Bin angle of orientation channel `j` (0-based), `2 (j + 1) pi / p1`.
pub fn orientation_angle(j: usize, p1: usize) -> f64 {
    2.0 * (j + 1) as f64 * PI / p1 as f64
}

/// The orientation layer written as an ordinary layer:
/// `w_j = [cos t_j, sin t_j] / alpha^2`, `b_j = -1 / alpha^2`.
pub fn orientation_layer(p1: usize, subsample: usize) -> Result<LayerParams> {
    if p1 < 2 {
        return Err(CknError::InvalidArgument(format!("need at least 2 orientations, got {p1}")));
    }
    let alpha = orientation_bandwidth(p1);
    let a2 = alpha * alpha;
    let weights = Array2::from_shape_fn((2, p1), |(k, j)| {
        let t = orientation_angle(j, p1);
        if k == 0 {
            t.cos() / a2
        } else {
            t.sin() / a2
        }
    });
    let bias = Array1::from_elem(p1, -1.0 / a2);
    LayerParams::new(layer(1, subsample, p1, 2), weights, bias, alpha, subsample as f64)
}

/// Pre-pooling orientation responses
/// `rho_z exp(-|u_j - u_z|^2 / (2 alpha1^2))` of a gradient map.
pub fn orientation_responses(grad: &FeatureMap, p1: usize, alpha1: f64) -> Result<FeatureMap> {
    if grad.channels() != 2 {
        return Err(CknError::DimensionMismatch {
            expected: 2,
            actual: grad.channels(),
        });
    }
    if p1 < 2 || !(alpha1 > 0.0) {
        return Err(CknError::InvalidArgument(format!(
            "need p1 >= 2 and alpha1 > 0 (got {p1}, {alpha1})"
        )));
    }
    let bins: Vec<(f64, f64)> = (0..p1)
        .map(|j| {
            let t = orientation_angle(j, p1);
            (t.cos(), t.sin())
        })
        .collect();
    let inv = 1.0 / (2.0 * alpha1 * alpha1);
    let mut data = Vec::with_capacity(grad.width() * grad.height() * p1);
    for px in grad.data().chunks_exact(2) {
        let rho = (px[0] * px[0] + px[1] * px[1]).sqrt();
        if rho <= ZERO_NORM {
            data.extend(std::iter::repeat_n(0.0, p1));
            continue;
        }
        let (c, s) = (px[0] / rho, px[1] / rho);
        data.extend(bins.iter().map(|(bc, bs)| {
            let d2 = (bc - c) * (bc - c) + (bs - s) * (bs - s);
            rho * (-d2 * inv).exp()
        }));
    }
    FeatureMap::new(grad.width(), grad.height(), p1, data)
}

/// Orientation responses followed by Gaussian pooling.
pub fn grad_first_layer(grad: &FeatureMap, p1: usize, alpha1: f64, subsample: usize) -> Result<FeatureMap> {
    let m = orientation_responses(grad, p1, alpha1)?;
    gaussian_pool(&m, subsample, subsample as f64)
}

/// Unnormalized Gaussian pooling `sum_u exp(-|u - z|^2 / beta^2) M(u)` over a
/// square window of radius `ceil(2 beta)`, at centers `floor(s/2) + k s`.
pub fn gaussian_pool(map: &FeatureMap, subsample: usize, beta: f64) -> Result<FeatureMap> {
    if subsample == 0 || !(beta > 0.0) {
        return Err(CknError::InvalidArgument(format!(
            "need subsample >= 1 and beta > 0 (got {subsample}, {beta})"
        )));
    }
    let (w, h, c) = (map.width(), map.height(), map.channels());
    let (ow, oh) = (pooled_len(w, subsample), pooled_len(h, subsample));
    if ow == 0 || oh == 0 {
        return Err(CknError::InvalidArgument("map too small to pool".into()));
    }
    let radius = (2.0 * beta).ceil() as usize;
    let taps = |n: usize, center: usize| -> Vec<(usize, f64)> {
        let lo = center.saturating_sub(radius);
        let hi = (center + radius).min(n - 1);
        (lo..=hi)
            .map(|u| {
                let d = u as f64 - center as f64;
                (u, (-d * d / (beta * beta)).exp())
            })
            .collect()
    };
    let first = subsample / 2;
    let src = map.data();

    // Horizontal pass: h x ow x c.
    let mut tmp = vec![0.0; h * ow * c];
    for ox in 0..ow {
        let t = taps(w, first + ox * subsample);
        for y in 0..h {
            let out = &mut tmp[(y * ow + ox) * c..(y * ow + ox + 1) * c];
            for &(u, wt) in &t {
                let px = &src[(y * w + u) * c..(y * w + u + 1) * c];
                out.iter_mut().zip(px).for_each(|(o, v)| *o += wt * v);
            }
        }
    }
    // Vertical pass: oh x ow x c.
    let mut data = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let t = taps(h, first + oy * subsample);
        for ox in 0..ow {
            let out = &mut data[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for &(u, wt) in &t {
                let px = &tmp[(u * ow + ox) * c..(u * ow + ox + 1) * c];
                out.iter_mut().zip(px).for_each(|(o, v)| *o += wt * v);
            }
        }
    }
    FeatureMap::new(ow, oh, c, data)
}

/// Intermediate map `|P| exp(W^T P~ + b)` over all valid sub-patch
/// locations; `transform` rewrites each raw sub-patch first.
pub fn intermediate_map_with(
    map: &FeatureMap,
    params: &LayerParams,
    transform: impl Fn(&mut [f64]),
) -> Result<FeatureMap> {
    if map.channels() != params.in_channels {
        return Err(CknError::DimensionMismatch {
            expected: params.in_channels,
            actual: map.channels(),
        });
    }
    let e = params.subpatch;
    let (gw, gh) = map
        .subpatch_grid(e)
        .ok_or_else(|| CknError::InvalidArgument(format!("map smaller than the {e}x{e} sub-patch")))?;
    let q = params.input_dim();
    let n = gw * gh;
    let mut patches = Array2::<f64>::zeros((n, q));
    let mut norms = vec![0.0; n];
    let mut buf = vec![0.0; q];
    for (i, (mut row, norm)) in patches.rows_mut().into_iter().zip(norms.iter_mut()).enumerate() {
        map.subpatch_into(i % gw, i / gw, e, &mut buf);
        transform(&mut buf);
        let nrm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > ZERO_NORM {
            *norm = nrm;
            row.iter_mut().zip(&buf).for_each(|(r, v)| *r = v / nrm);
        }
    }
    let mut act = patches.dot(&params.weights);
    for (mut row, &norm) in act.rows_mut().into_iter().zip(&norms) {
        if norm == 0.0 {
            row.fill(0.0);
        } else {
            row.iter_mut()
                .zip(params.bias.iter())
                .for_each(|(a, b)| *a = norm * (*a + b).exp());
        }
    }
    if act.iter().any(|v| !v.is_finite()) {
        return Err(CknError::NonFinite("layer response overflowed"));
    }
    let (data, _) = act.into_raw_vec_and_offset();
    FeatureMap::new(gw, gh, params.filters(), data)
}

/// One layer: contrast-normalized exponential responses, then Gaussian pooling.
pub fn encode_layer(map: &FeatureMap, params: &LayerParams) -> Result<FeatureMap> {
    encode_layer_with(map, params, |_| {})
}

pub fn encode_layer_with(
    map: &FeatureMap,
    params: &LayerParams,
    transform: impl Fn(&mut [f64]),
) -> Result<FeatureMap> {
    let m = intermediate_map_with(map, params, transform)?;
    let mut out = gaussian_pool(&m, params.subsample, params.pool_beta)?;
    out.layer = map.layer + 1;
    Ok(out)
}

/// How CKN-white whitening models are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Whitening {
    /// Fitted on every input patch separately.
    PerPatch,
    /// One model shared by all patches.
    Global(WhitenModel),
}

/// Input type, layers, and expected patch side.
#[derive(Debug, Clone, PartialEq)]
pub struct CknModel {
    pub input: InputType,
    pub input_side: usize,
    pub layers: Vec<LayerParams>,
    pub whitening: Whitening,
}

impl CknModel {
    pub fn new(input: InputType, input_side: usize, layers: Vec<LayerParams>) -> Result<Self> {
        let model = CknModel {
            input,
            input_side,
            layers,
            whitening: Whitening::PerPatch,
        };
        model.architecture().validate()?;
        if model.architecture().output_shape(input_side).is_none() {
            return Err(CknError::InvalidArgument(format!(
                "a {input_side}x{input_side} patch is too small for this architecture"
            )));
        }
        Ok(model)
    }

    /// Model with untrained layers: random-feature weights for bandwidth
    /// `alpha`, and the analytic orientation layer for gradient input.
    pub fn random(arch: &Architecture, alpha: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (k, spec) in arch.layers.iter().enumerate() {
            if k == 0 && arch.input == InputType::Grad {
                layers.push(orientation_layer(spec.filters, spec.subsample)?);
                continue;
            }
            let weights = Array2::from_shape_simple_fn((spec.input_dim(), spec.filters), || {
                let g: f64 = StandardNormal.sample(&mut rng);
                g / alpha
            });
            let bias = Array1::from_elem(spec.filters, -1.0 / (alpha * alpha) - 0.5 * (spec.filters as f64).ln());
            layers.push(LayerParams::new(*spec, weights, bias, alpha, spec.subsample as f64)?);
        }
        CknModel::new(arch.input, DEFAULT_PATCH_SIDE, layers)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input,
            layers: self.layers.iter().map(LayerParams::spec).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.architecture().output_dim(self.input_side).unwrap_or(0)
    }

    fn whiten_model(&self, map: &FeatureMap) -> Result<Option<WhitenModel>> {
        match (self.input, &self.whitening) {
            (InputType::White { subpatch }, Whitening::PerPatch) => Ok(Some(whiten_fit(map, subpatch)?)),
            (InputType::White { .. }, Whitening::Global(m)) => Ok(Some(m.clone())),
            _ => Ok(None),
        }
    }

    /// Map after the first `depth` layers.
    pub fn encode_to_depth(&self, patch: &Patch, depth: usize) -> Result<FeatureMap> {
        if patch.side() != self.input_side {
            return Err(CknError::DimensionMismatch {
                expected: self.input_side,
                actual: patch.side(),
            });
        }
        let mut map = self.input.input_map(patch)?;
        let whiten = self.whiten_model(&map)?;
        for (k, params) in self.layers.iter().take(depth).enumerate() {
            map = match (k, self.input, &whiten) {
                (0, InputType::Grad, _) => {
                    let mut m = grad_first_layer(&map, params.filters(), params.alpha, params.subsample)?;
                    m.layer = 1;
                    m
                }
                (0, _, Some(w)) => encode_layer_with(&map, params, |buf| {
                    let t = w.transform(buf);
                    buf.copy_from_slice(&t);
                })?,
                _ => encode_layer(&map, params)?,
            };
        }
        Ok(map)
    }

    /// Flattened final map, all channels of one location before the next.
    pub fn encode_patch(&self, patch: &Patch) -> Result<Vec<f64>> {
        Ok(self.encode_to_depth(patch, self.layers.len())?.into_data())
    }

    /// Descriptors for `patches`, one row each, in input order.
    pub fn encode_batch(&self, patches: &[Patch]) -> Result<Array2<f32>> {
        let rows: Vec<Vec<f64>> = patches.par_iter().map(|p| self.encode_patch(p)).collect::<Result<_>>()?;
        let dim = self.output_dim();
        let mut out = Array2::zeros((rows.len(), dim));
        for (mut dst, row) in out.rows_mut().into_iter().zip(&rows) {
            dst.iter_mut().zip(row).for_each(|(d, v)| *d = *v as f32);
        }
        Ok(out)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"CKNM";
const MODEL_VERSION: usize = 1;
const DESCRIPTOR_MAGIC: &[u8; 4] = b"CKND";
const DESCRIPTOR_VERSION: usize = 1;

impl CknModel {
    /// Writes the model container. Weights and biases are stored as f32; a
    /// shared whitening model is not stored, loading gives per-patch whitening.
    pub fn save(&self, path: &Path) -> Result<()> {
        let white_side = match self.input {
            InputType::White { subpatch } => subpatch,
            _ => 0,
        };
        let mut w = ByteWriter::default();
        w.magic(MODEL_MAGIC)
            .u32(MODEL_VERSION)
            .u32(self.input.tag() as usize)
            .u32(self.layers.len())
            .u32(self.input_side)
            .u32(white_side);
        for l in &self.layers {
            w.f64(l.input_dim() as f64)
                .f64(l.filters() as f64)
                .f64(l.subpatch as f64)
                .f64(l.subsample as f64)
                .f64(l.alpha)
                .f64(l.pool_beta);
            let weights: Vec<f32> = l.weights.iter().map(|&v| v as f32).collect();
            let bias: Vec<f32> = l.bias.iter().map(|&v| v as f32).collect();
            w.f32s(&weights).f32s(&bias);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::open(path)?;
        r.magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.error(format!("unsupported model version {version}")));
        }
        let tag = r.u32()?;
        let count = r.u32()?;
        let side = r.u32()?;
        let white_side = r.u32()?;
        let input = InputType::from_tag(tag as u32, white_side).ok_or_else(|| r.error(format!("unknown input type {tag}")))?;
        let mut layers = Vec::with_capacity(count);
        for k in 0..count {
            let mut header = [0usize; 4];
            for h in header.iter_mut() {
                let v = r.f64()?;
                if !(v >= 1.0 && v.fract() == 0.0 && v < 1e9) {
                    return Err(r.error(format!("layer {k}: bad shape value {v}")));
                }
                *h = v as usize;
            }
            let [q, p, e, s] = header;
            let (alpha, beta) = (r.f64()?, r.f64()?);
            if q % (e * e) != 0 {
                return Err(r.error(format!("layer {k}: q = {q} is not a multiple of {e}x{e}")));
            }
            let spec = LayerSpec {
                subpatch: e,
                subsample: s,
                filters: p,
                in_channels: q / (e * e),
            };
            let weights = Array2::from_shape_vec((q, p), r.f32s(q * p)?.into_iter().map(f64::from).collect())
                .expect("sized");
            let bias = Array1::from(r.f32s(p)?.into_iter().map(f64::from).collect::<Vec<_>>());
            let params = LayerParams::new(spec, weights, bias, alpha, beta).map_err(|e| r.error(format!("layer {k}: {e}")))?;
            layers.push(params);
        }
        r.finish()?;
        CknModel::new(input, side, layers).map_err(|e| CknError::format(path, e.to_string()))
    }
}

/// Writes `count x dim` rows as a descriptor container.
pub fn write_descriptors(path: &Path, rows: ArrayView2<f32>) -> Result<()> {
    let mut w = ByteWriter::default();
    w.magic(DESCRIPTOR_MAGIC)
        .u32(DESCRIPTOR_VERSION)
        .u32(rows.nrows())
        .u32(rows.ncols())
        .f32s(rows.iter());
    w.save(path)
}

/// Writes a descriptor container row block by row block.
pub struct DescriptorWriter {
    path: std::path::PathBuf,
    out: std::io::BufWriter<std::fs::File>,
    count: usize,
    dim: usize,
    written: usize,
}

impl DescriptorWriter {
    pub fn create(path: &Path, count: usize, dim: usize) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| CknError::io(path, e))?;
        let mut w = DescriptorWriter {
            path: path.to_path_buf(),
            out: std::io::BufWriter::new(file),
            count,
            dim,
            written: 0,
        };
        let mut header = Vec::with_capacity(16);
        header.extend_from_slice(DESCRIPTOR_MAGIC);
        for v in [DESCRIPTOR_VERSION, count, dim] {
            header.extend_from_slice(&u32::try_from(v).expect("header value fits in u32").to_le_bytes());
        }
        w.put(&header)?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        use std::io::Write;
        self.out.write_all(bytes).map_err(|e| CknError::io(&self.path, e))
    }

    pub fn write_rows(&mut self, rows: ArrayView2<f32>) -> Result<()> {
        if rows.ncols() != self.dim {
            return Err(CknError::DimensionMismatch {
                expected: self.dim,
                actual: rows.ncols(),
            });
        }
        if self.written + rows.nrows() > self.count {
            return Err(CknError::InvalidArgument(format!("more than {} rows written", self.count)));
        }
        let bytes: Vec<u8> = rows.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.put(&bytes)?;
        self.written += rows.nrows();
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        use std::io::Write;
        if self.written != self.count {
            return Err(CknError::InvalidArgument(format!(
                "{} of {} rows written",
                self.written, self.count
            )));
        }
        self.out.flush().map_err(|e| CknError::io(&self.path, e))
    }
}

pub fn read_descriptors(path: &Path) -> Result<Array2<f32>> {
    let mut r = ByteReader::open(path)?;
    r.magic(DESCRIPTOR_MAGIC)?;
    let version = r.u32()?;
    if version != DESCRIPTOR_VERSION {
        return Err(r.error(format!("unsupported descriptor version {version}")));
    }
    let (count, dim) = (r.u32()?, r.u32()?);
    let data = r.f32s(count * dim)?;
    r.finish()?;
    Ok(Array2::from_shape_vec((count, dim), data).expect("sized"))
}

/// Settings for layer-wise training of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTraining {
    /// Bandwidth of each layer; ignored for an analytic first layer.
    pub alphas: Vec<f64>,
    pub pool_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

/// Trains the layers of `arch` in order on `patches`: each layer samples
/// sub-patches from the maps produced by the layers already trained.
pub fn train_model(
    arch: &Architecture,
    patches: &[Patch],
    settings: &ModelTraining,
) -> Result<(CknModel, Vec<Option<TrainReport>>)> {
    arch.validate()?;
    if patches.is_empty() {
        return Err(CknError::InvalidArgument("no training patches".into()));
    }
    if settings.alphas.len() != arch.layers.len() {
        return Err(CknError::InvalidArgument(format!(
            "{} bandwidths for {} layers",
            settings.alphas.len(),
            arch.layers.len()
        )));
    }
    let side = patches[0].side();
    if patches.iter().any(|p| p.side() != side) {
        return Err(CknError::InvalidArgument("training patches differ in size".into()));
    }
    let mut model = CknModel {
        input: arch.input,
        input_side: side,
        layers: Vec::new(),
        whitening: Whitening::PerPatch,
    };
    let mut reports = Vec::with_capacity(arch.layers.len());
    for (k, spec) in arch.layers.iter().enumerate() {
        if k == 0 && arch.input == InputType::Grad {
            model.layers.push(orientation_layer(spec.filters, spec.subsample)?);
            reports.push(None);
            continue;
        }
        let maps: Vec<FeatureMap> = patches
            .par_iter()
            .map(|p| model.encode_to_depth(p, k))
            .collect::<Result<_>>()?;
        let seed = settings.seed.wrapping_add(k as u64);
        let pool = if k == 0 {
            if let InputType::White { subpatch } = arch.input {
                let whiten: Vec<WhitenModel> =
                    maps.par_iter().map(|m| whiten_fit(m, subpatch)).collect::<Result<_>>()?;
                sample_pairs_with(&maps, settings.pool_size, spec.subpatch, seed, |i, v| whiten[i].transform(v))?
            } else {
                sample_pairs_with(&maps, settings.pool_size, spec.subpatch, seed, |_, v| v.to_vec())?
            }
        } else {
            sample_pairs_with(&maps, settings.pool_size, spec.subpatch, seed, |_, v| v.to_vec())?
        };
        let sgd = SgdConfig {
            seed: settings.sgd.seed.wrapping_add(k as u64),
            ..settings.sgd.clone()
        };
        let (params, report) = train_layer(&pool, *spec, settings.alphas[k], &sgd)?;
        model.layers.push(params);
        reports.push(Some(report));
    }
    model.architecture().validate()?;
    Ok((model, reports))
}
