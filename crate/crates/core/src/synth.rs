//! Procedural textured patches with jittered copies, for end-to-end checks.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CknError, Result};
use crate::eval::{ManifestEntry, Role};
use crate::image::{extract_patch, Image, Keypoint, Patch, DEFAULT_PATCH_SIDE};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchSpec {
    pub bases: usize,
    pub copies: usize,
    /// Maximum translation per axis, pixels.
    pub max_shift: f64,
    /// Maximum absolute rotation, radians.
    pub max_rotation: f64,
    /// Maximum relative scale change.
    pub max_scale: f64,
    /// Maximum relative brightness change.
    pub max_brightness: f64,
    pub base_side: usize,
    pub patch_side: usize,
    pub seed: u64,
}

impl Default for SyntheticBenchSpec {
    fn default() -> Self {
        SyntheticBenchSpec {
            bases: 50,
            copies: 10,
            max_shift: 2.0,
            max_rotation: 5f64.to_radians(),
            max_scale: 0.0,
            max_brightness: 0.1,
            base_side: 96,
            patch_side: DEFAULT_PATCH_SIDE,
            seed: 0,
        }
    }
}

impl SyntheticBenchSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.max_shift, self.max_rotation, self.max_scale, self.max_brightness];
        if ranges.iter().any(|r| !(*r >= 0.0)) {
            return Err(CknError::InvalidArgument("jitter ranges must be non-negative".into()));
        }
        if self.bases == 0 || self.copies == 0 {
            return Err(CknError::InvalidArgument("need at least one base and one copy".into()));
        }
        if self.patch_side < 3 || self.patch_side % 2 == 0 || self.base_side < self.patch_side {
            return Err(CknError::InvalidArgument(
                "patch side must be odd >= 3 and fit in the base image".into(),
            ));
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise: random lattice values every `spacing` pixels, smoothly interpolated.
fn value_noise(side: usize, spacing: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = side / spacing + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let gy = y / spacing;
        let fy = smoothstep((y % spacing) as f64 / spacing as f64);
        for x in 0..side {
            let gx = x / spacing;
            let fx = smoothstep((x % spacing) as f64 / spacing as f64);
            let at = |i: usize, j: usize| lattice[j * cells + i];
            let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
            let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// RGB texture made of multi-scale value noise and a few soft oriented edges.
pub fn texture(side: usize, rng: &mut ChaCha8Rng) -> Image {
    let octaves = [(1usize, 0.30), (2, 0.30), (4, 0.25), (8, 0.15)];
    let mut gray = vec![0.0; side * side];
    for &(spacing, amp) in &octaves {
        for (g, v) in gray.iter_mut().zip(value_noise(side, spacing, rng)) {
            *g += amp * (v - 0.5);
        }
    }
    let edges = rng.random_range(2..=4);
    for _ in 0..edges {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (nx, ny) = (theta.cos(), theta.sin());
        let cx = rng.random_range(0.25..0.75) * side as f64;
        let cy = rng.random_range(0.25..0.75) * side as f64;
        let contrast = rng.random_range(0.15..0.35) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        for y in 0..side {
            for x in 0..side {
                let d = (x as f64 - cx) * nx + (y as f64 - cy) * ny;
                gray[y * side + x] += contrast / (1.0 + (-2.0 * d).exp());
            }
        }
    }
    let (lo, hi) = gray
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.6..1.0)).collect();
    let offset: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.15)).collect();
    Image::from_fn(side, side, 3, |x, y, c| {
        let g = 0.1 + 0.8 * (gray[y * side + x] - lo) / span;
        offset[c] + tint[c] * g * 0.85
    })
    .expect("texture values are clamped")
}

/// Jitter applied to one copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub rotation: f64,
    pub scale: f64,
    pub brightness: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        rotation: 0.0,
        scale: 1.0,
        brightness: 1.0,
    };
}

/// Extracts the patch at the base center under the given jitter.
pub fn jittered_patch(base: &Image, side: usize, jitter: &Jitter) -> Result<Patch> {
    let c = (base.width() as f64 - 1.0) / 2.0;
    let kp = Keypoint::new(c + jitter.dx, c + jitter.dy, jitter.scale, jitter.rotation);
    let patch = extract_patch(base, &kp, side)?;
    if jitter.brightness == 1.0 {
        return Ok(patch);
    }
    Ok(Patch {
        pixels: patch.pixels.scale_intensity(jitter.brightness),
        source: patch.source,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub bases: Vec<Image>,
    /// `(label, copy index, patch)`; copy 0 of each class is its query.
    pub patches: Vec<(usize, usize, Patch)>,
}

pub fn generate(spec: &SyntheticBenchSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let symmetric = |r: f64, rng: &mut ChaCha8Rng| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let mut bases = Vec::with_capacity(spec.bases);
    let mut patches = Vec::with_capacity(spec.bases * spec.copies);
    for label in 0..spec.bases {
        let base = texture(spec.base_side, &mut rng);
        for copy in 0..spec.copies {
            let jitter = Jitter {
                dx: symmetric(spec.max_shift, &mut rng),
                dy: symmetric(spec.max_shift, &mut rng),
                rotation: symmetric(spec.max_rotation, &mut rng),
                scale: 1.0 + symmetric(spec.max_scale, &mut rng),
                brightness: 1.0 + symmetric(spec.max_brightness, &mut rng),
            };
            patches.push((label, copy, jittered_patch(&base, spec.patch_side, &jitter)?));
        }
        bases.push(base);
    }
    Ok(SyntheticSet { bases, patches })
}

/// Writes `bases/`, `patches/` and `manifest.tsv` under `dir`.
pub fn write_dataset(set: &SyntheticSet, dir: &Path) -> Result<Vec<ManifestEntry>> {
    for sub in ["bases", "patches"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| CknError::io(dir.join(sub), e))?;
    }
    for (i, base) in set.bases.iter().enumerate() {
        base.save(&dir.join(format!("bases/base_{i:04}.png")))?;
    }
    let mut entries = Vec::with_capacity(set.patches.len());
    for (label, copy, patch) in &set.patches {
        let rel = format!("patches/c{label:04}_{copy:03}.png");
        patch.pixels.save(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel.into(),
            label: label.to_string(),
            role: if *copy == 0 { Role::Query } else { Role::Target },
        });
    }
    let manifest = dir.join("manifest.tsv");
    let mut f = std::fs::File::create(&manifest).map_err(|e| CknError::io(&manifest, e))?;
    for e in &entries {
        writeln!(f, "{}", e.to_line()).map_err(|err| CknError::io(&manifest, err))?;
    }
    Ok(entries)
}
