//! File-to-file stages behind the command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{kmeans_fit, read_counts, vlad_encode, vlad_pca_apply_batch, write_counts, Codebook, KmeansFit};
use crate::config::PipelineConfig;
use crate::encoder::{encode_layer, read_descriptors, train_model, write_descriptors, CknModel, DescriptorWriter, ModelTraining};
use crate::error::{CknError, Result};
use crate::eval::{mean_average_precision, recall4, EvalReport, Manifest, ManifestEntry, Role};
use crate::image::{dense_keypoints, extract_patch, load_image, read_keypoints, Image, Keypoint, Patch};
use crate::map::FeatureMap;
use crate::oracles::{encoder_vs_kernel, exact_match_kernel, mc_gaussian_estimate, OracleReport};
use crate::pca::{self, PcaMode, PcaModel};
use crate::synth::{self, jittered_patch, Jitter, SyntheticBenchSpec};
use crate::trainer::TrainReport;

/// Patches encoded per block while streaming descriptors to disk.
const ENCODE_BLOCK: usize = 64;

fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest = Manifest::read(path)?;
    if manifest.is_empty() {
        return Err(CknError::Manifest(format!("{} lists no entries", path.display())));
    }
    Ok(manifest)
}

/// Loads every manifest entry as a `side x side` patch.
pub fn load_patches(manifest: &Manifest, side: usize) -> Result<Vec<Patch>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let image = load_image(&path)?;
            if image.width() != side || image.height() != side {
                return Err(CknError::format(
                    &path,
                    format!("patch is {}x{}, expected {side}x{side}", image.width(), image.height()),
                ));
            }
            Patch::from_image(image)
        })
        .collect()
}

/// Trains a model on the manifest patches and writes it to `out`.
pub fn train(cfg: &PipelineConfig, manifest: &Path, out: &Path) -> Result<Vec<Option<TrainReport>>> {
    cfg.validate()?;
    let manifest = read_manifest(manifest)?;
    let patches = load_patches(&manifest, cfg.patch_side)?;
    let settings = ModelTraining {
        alphas: cfg.alphas.clone(),
        pool_size: cfg.pool_size,
        sgd: cfg.sgd.clone(),
        seed: cfg.train_seed,
    };
    let (model, reports) = train_model(&cfg.architecture(), &patches, &settings)?;
    model.save(out)?;
    Ok(reports)
}

fn encode_stream(model: &CknModel, patches: &[Patch], writer: &mut DescriptorWriter, pca: Option<&PcaModel>) -> Result<()> {
    for block in patches.chunks(ENCODE_BLOCK) {
        let rows = model.encode_batch(block)?;
        match pca {
            Some(p) => writer.write_rows(p.apply_batch(rows.mapv(f64::from).view())?.mapv(|v| v as f32).view())?,
            None => writer.write_rows(rows.view())?,
        }
    }
    Ok(())
}

/// Encodes the manifest patches in manifest order. Returns `(count, dim)`.
pub fn encode_patches(model: &Path, manifest: &Path, out: &Path) -> Result<(usize, usize)> {
    let model = CknModel::load(model)?;
    let manifest = read_manifest(manifest)?;
    let patches = load_patches(&manifest, model.input_side)?;
    let dim = model.output_dim();
    let mut writer = DescriptorWriter::create(out, patches.len(), dim)?;
    encode_stream(&model, &patches, &mut writer, None)?;
    writer.finish()?;
    Ok((patches.len(), dim))
}

/// Where local descriptors are taken in whole images.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampling {
    pub stride: usize,
    pub scales: Vec<f64>,
    /// Directory of `<image stem>.kp` files; replaces the dense grid when set.
    pub keypoints: Option<PathBuf>,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            stride: 16,
            scales: vec![1.0],
            keypoints: None,
        }
    }
}

fn image_keypoints(image: &Image, path: &Path, sampling: &Sampling, side: usize) -> Result<Vec<Keypoint>> {
    match &sampling.keypoints {
        Some(dir) => {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            read_keypoints(&dir.join(format!("{stem}.kp")))
        }
        None => Ok(dense_keypoints(image, sampling.stride, &sampling.scales, side)),
    }
}

fn image_patches(image: &Image, keypoints: &[Keypoint], side: usize) -> Vec<Patch> {
    keypoints
        .iter()
        .filter_map(|kp| match extract_patch(image, kp, side) {
            Ok(p) => Some(p),
            Err(CknError::WindowOutside) => None,
            Err(e) => panic!("keypoint validated upstream: {e}"),
        })
        .collect()
}

/// Encodes local descriptors of every manifest image into one container,
/// image after image, optionally reduced by `pca`. Writes the per-image row
/// counts next to it and returns them.
pub fn encode_images(
    model: &Path,
    manifest: &Path,
    out: &Path,
    counts_out: &Path,
    sampling: &Sampling,
    pca: Option<&Path>,
) -> Result<Vec<usize>> {
    let model = CknModel::load(model)?;
    let pca = pca.map(PcaModel::load).transpose()?;
    let manifest = read_manifest(manifest)?;
    let side = model.input_side;
    let mut plan = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let path = manifest.resolve(e);
        let image = load_image(&path)?;
        let kps = image_keypoints(&image, &path, sampling, side)?;
        for kp in &kps {
            if !(kp.scale > 0.0) {
                return Err(CknError::InvalidArgument(format!("{}: bad keypoint {kp:?}", path.display())));
            }
        }
        let n = image_patches(&image, &kps, side).len();
        plan.push((path, kps, n));
    }
    let counts: Vec<usize> = plan.iter().map(|p| p.2).collect();
    let dim = match &pca {
        Some(p) => {
            if p.input_dim() != model.output_dim() {
                return Err(CknError::DimensionMismatch {
                    expected: model.output_dim(),
                    actual: p.input_dim(),
                });
            }
            p.output_dim()
        }
        None => model.output_dim(),
    };
    let mut writer = DescriptorWriter::create(out, counts.iter().sum(), dim)?;
    for (path, kps, _) in &plan {
        let image = load_image(path)?;
        let patches = image_patches(&image, kps, side);
        encode_stream(&model, &patches, &mut writer, pca.as_ref())?;
    }
    writer.finish()?;
    write_counts(counts_out, &counts)?;
    Ok(counts)
}

/// Fits a k-means vocabulary, on at most `max_samples` rows drawn with `seed`.
pub fn vocab(descriptors: &Path, out: &Path, k: usize, iterations: usize, seed: u64, max_samples: Option<usize>) -> Result<KmeansFit> {
    let mut data = read_descriptors(descriptors)?;
    if let Some(m) = max_samples {
        if data.nrows() > m {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = rand::seq::index::sample(&mut rng, data.nrows(), m).into_vec();
            ids.sort_unstable();
            data = data.select(Axis(0), &ids);
        }
    }
    let fit = kmeans_fit(data.view(), k, seed, iterations)?;
    fit.codebook.save(out)?;
    Ok(fit)
}

/// VLAD vectors for consecutive per-image descriptor blocks. Returns the
/// indices of images that had no descriptors; their vectors are zero.
pub fn vlad(descriptors: &Path, counts: &Path, codebook: &Path, out: &Path) -> Result<Vec<usize>> {
    let data = read_descriptors(descriptors)?;
    let counts = read_counts(counts)?;
    let codebook = Codebook::load(codebook)?;
    if counts.iter().sum::<usize>() != data.nrows() {
        return Err(CknError::Manifest(format!(
            "counts sum to {} but the descriptor file has {} rows",
            counts.iter().sum::<usize>(),
            data.nrows()
        )));
    }
    let mut starts = Vec::with_capacity(counts.len());
    let mut at = 0;
    for c in &counts {
        starts.push(at);
        at += c;
    }
    let vlads = starts
        .par_iter()
        .zip(&counts)
        .map(|(&start, &n)| vlad_encode(data.slice(s![start..start + n, ..]), &codebook))
        .collect::<Result<Vec<_>>>()?;
    let dim = codebook.k() * codebook.dim();
    let mut rows = Array2::<f32>::zeros((vlads.len(), dim));
    for (mut row, v) in rows.rows_mut().into_iter().zip(&vlads) {
        row.iter_mut().zip(v.values.iter()).for_each(|(d, x)| *d = *x as f32);
    }
    write_descriptors(out, rows.view())?;
    Ok(vlads.iter().enumerate().filter(|(_, v)| v.empty).map(|(i, _)| i).collect())
}

pub fn pca_fit(descriptors: &Path, out: &Path, dim: usize, mode: PcaMode) -> Result<PcaModel> {
    let data = read_descriptors(descriptors)?.mapv(f64::from);
    let model = pca::fit(data.view(), dim, mode)?;
    model.save(out)?;
    Ok(model)
}

/// Projects descriptors; `renormalize` rescales each result to unit norm as
/// done for VLAD vectors.
pub fn pca_apply(model: &Path, descriptors: &Path, out: &Path, renormalize: bool) -> Result<(usize, usize)> {
    let model = PcaModel::load(model)?;
    let data = read_descriptors(descriptors)?.mapv(f64::from);
    let reduced = if renormalize {
        vlad_pca_apply_batch(&model, data.view())?
    } else {
        model.apply_batch(data.view())?
    };
    write_descriptors(out, reduced.mapv(|v| v as f32).view())?;
    Ok(reduced.dim())
}

/// mAP of descriptors against a manifest; writes the JSON-lines report when
/// `report` is given.
pub fn eval_retrieval(descriptors: &Path, manifest: &Path, report: Option<&Path>, protocol: &str) -> Result<EvalReport> {
    let data = read_descriptors(descriptors)?;
    let manifest = read_manifest(manifest)?;
    let result = mean_average_precision(data.view(), &manifest.entries, protocol)?;
    if let Some(path) = report {
        let file = std::fs::File::create(path).map_err(|e| CknError::io(path, e))?;
        result
            .write_jsonl(std::io::BufWriter::new(file))
            .map_err(|e| CknError::io(path, e))?;
    }
    Ok(result)
}

/// Mean number of same-group items among the four nearest, self included.
pub fn eval_ukb(descriptors: &Path, manifest: &Path) -> Result<f64> {
    let data = read_descriptors(descriptors)?;
    let manifest = read_manifest(manifest)?;
    let groups: Vec<String> = manifest.entries.iter().map(|e| e.label.clone()).collect();
    recall4(data.view(), &groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Pixels, along a random direction per patch.
    Translation,
    /// Degrees.
    Rotation,
    /// Relative scale change.
    Scale,
    /// Relative brightness change.
    Brightness,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Translation => "translation",
            Transform::Rotation => "rotation",
            Transform::Scale => "scale",
            Transform::Brightness => "brightness",
        }
    }

    fn jitter(self, magnitude: f64, direction: f64) -> Jitter {
        let mut j = Jitter::NONE;
        match self {
            Transform::Translation => {
                j.dx = magnitude * direction.cos();
                j.dy = magnitude * direction.sin();
            }
            Transform::Rotation => j.rotation = magnitude.to_radians(),
            Transform::Scale => j.scale = 1.0 + magnitude,
            Transform::Brightness => j.brightness = 1.0 + magnitude,
        }
        j
    }
}

impl std::str::FromStr for Transform {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "translation" => Ok(Transform::Translation),
            "rotation" => Ok(Transform::Rotation),
            "scale" => Ok(Transform::Scale),
            "brightness" => Ok(Transform::Brightness),
            other => Err(format!("unknown transform `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessPoint {
    pub magnitude: f64,
    pub mean_distance: f64,
    pub patches: usize,
}

/// Mean Euclidean distance between the descriptor of each base's central
/// patch and that of the same patch moved by each magnitude.
pub fn robustness_curve(
    model: &CknModel,
    bases: &[Image],
    transform: Transform,
    magnitudes: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    if bases.is_empty() {
        return Err(CknError::InvalidArgument("no base images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<f64> = bases.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let side = model.input_side;
    let reference: Vec<Patch> = bases.iter().map(|b| jittered_patch(b, side, &Jitter::NONE)).collect::<Result<_>>()?;
    let reference = model.encode_batch(&reference)?;
    magnitudes
        .iter()
        .map(|&m| {
            let moved: Vec<Patch> = bases
                .iter()
                .zip(&directions)
                .map(|(b, &dir)| jittered_patch(b, side, &transform.jitter(m, dir)))
                .collect::<Result<_>>()?;
            let moved = model.encode_batch(&moved)?;
            let total: f64 = reference
                .rows()
                .into_iter()
                .zip(moved.rows())
                .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt())
                .sum();
            Ok(RobustnessPoint {
                magnitude: m,
                mean_distance: total / bases.len() as f64,
                patches: bases.len(),
            })
        })
        .collect()
}

pub fn write_robustness_csv(points: &[RobustnessPoint], transform: Transform, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "transform,magnitude,mean_distance,patches")?;
    for p in points {
        writeln!(out, "{},{},{},{}", transform.name(), p.magnitude, p.mean_distance, p.patches)?;
    }
    Ok(())
}

/// Loads the base images listed in a manifest.
pub fn load_images(manifest: &Path) -> Result<Vec<Image>> {
    let manifest = read_manifest(manifest)?;
    manifest.entries.par_iter().map(|e| load_image(&manifest.resolve(e))).collect()
}

/// Writes the synthetic benchmark under `dir`: patches with `manifest.tsv`,
/// and the base textures with `bases.tsv`.
pub fn synth(spec: &SyntheticBenchSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let set = synth::generate(spec)?;
    let entries = synth::write_dataset(&set, dir)?;
    let lines: String = (0..set.bases.len())
        .map(|i| {
            let e = ManifestEntry {
                path: format!("bases/base_{i:04}.png").into(),
                label: i.to_string(),
                role: Role::Both,
            };
            format!("{}\n", e.to_line())
        })
        .collect();
    let path = dir.join("bases.tsv");
    std::fs::write(&path, lines).map_err(|e| CknError::io(&path, e))?;
    Ok(entries)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
        let n = v.dot(&v).sqrt();
        if n > 1e-3 {
            return v / n;
        }
    }
}

/// Monte Carlo check of the Gaussian kernel on two random unit vectors.
pub fn oracle_mc(dim: usize, alpha: f64, samples: usize, seed: u64) -> Result<OracleReport> {
    if dim == 0 {
        return Err(CknError::InvalidArgument("dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = (random_unit(dim, &mut rng), random_unit(dim, &mut rng));
    mc_gaussian_estimate(x.view(), y.view(), alpha, samples, seed.wrapping_add(1))
}

fn random_map(width: usize, height: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    FeatureMap::new(
        width,
        height,
        channels,
        (0..width * height * channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Exact match kernel of two random maps in both argument orders.
pub fn oracle_match_kernel(side: usize, channels: usize, subpatch: usize, alpha: f64, beta: f64, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_map(side, side, channels, &mut rng)?;
    let b = random_map(side, side, channels, &mut rng)?;
    let mut report = OracleReport::new(
        "match_kernel_symmetry",
        exact_match_kernel(&a, &b, subpatch, alpha, beta)?,
        exact_match_kernel(&b, &a, subpatch, alpha, beta)?,
    );
    report.seed = Some(seed);
    Ok(report)
}

/// First layer of `model` on random maps against the exact kernel.
pub fn oracle_encoder(model: &CknModel, side: usize, pairs: usize, seed: u64) -> Result<OracleReport> {
    let params = model
        .layers
        .first()
        .ok_or_else(|| CknError::InvalidArgument("model has no layers".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps: Vec<(FeatureMap, FeatureMap)> = (0..pairs)
        .map(|_| Ok((random_map(side, side, params.in_channels, &mut rng)?, random_map(side, side, params.in_channels, &mut rng)?)))
        .collect::<Result<_>>()?;
    let mut report = encoder_vs_kernel(params, &maps, |m| encode_layer(m, params).map(FeatureMap::into_data))?;
    report.seed = Some(seed);
    Ok(report)
}
