//! Raster images, keypoints and fixed-size patch extraction.

use std::io::BufRead;
use std::path::Path;

use crate::error::{CknError, Result};

/// Luminance weights used whenever a color image is reduced to gray.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Default patch side, in pixels.
pub const DEFAULT_PATCH_SIDE: usize = 51;

/// Row-major image with values in `[0, 1]`, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CknError::InvalidArgument("image must be at least 1x1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(CknError::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(CknError::DimensionMismatch {
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CknError::InvalidArgument(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Gray value at a pixel (luminance for color images).
    #[inline]
    pub fn gray_at(&self, x: usize, y: usize) -> f64 {
        if self.channels == 1 {
            self.get(x, y, 0)
        } else {
            LUMA_WEIGHTS
                .iter()
                .enumerate()
                .map(|(c, w)| w * self.get(x, y, c))
                .sum()
        }
    }

    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(self.gray_at(x, y).clamp(0.0, 1.0));
            }
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Multiplies every value by `factor`, clamping the result to `[0, 1]`.
    pub fn scale_intensity(&self, factor: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Writes the image as an 8-bit raster; the format follows the extension
    /// (`.png`, `.pgm`, `.ppm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(
            |e| match e {
                image::ImageError::IoError(io) => CknError::io(path, io),
                other => CknError::Raster {
                    path: path.to_path_buf(),
                    reason: other.to_string(),
                },
            },
        )
    }
}

/// Reads an 8-bit gray or RGB raster (PNG, PGM or PPM) and scales it to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| CknError::io(path, e))?;
    let raster_err = |reason: String| CknError::Raster {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = image::load_from_memory(&bytes).map_err(|e| raster_err(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded {
        image::DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        image::DynamicImage::ImageLumaA8(_) => (1, decoded.to_luma8().into_raw()),
        image::DynamicImage::ImageRgba8(_) => (3, decoded.to_rgb8().into_raw()),
        other => {
            return Err(raster_err(format!(
                "only 8-bit gray or RGB rasters are supported, got {:?}",
                other.color()
            )))
        }
    };
    let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    Image::new(w, h, channels, data)
}

/// Patch location in a source image. `scale` is the number of image pixels
/// per patch pixel, `rotation` is in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, scale: f64, rotation: f64) -> Self {
        Keypoint {
            x,
            y,
            scale,
            rotation,
        }
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)` of the sampling window.
    pub fn window_bounds(&self, side: usize) -> (f64, f64, f64, f64) {
        let half = (side as f64 - 1.0) / 2.0 * self.scale;
        let (s, c) = self.rotation.sin_cos();
        let ext = half * (c.abs() + s.abs());
        (self.x - ext, self.y - ext, self.x + ext, self.y + ext)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSource {
    pub image_id: usize,
    pub keypoint: Keypoint,
}

/// Square fixed-side patch resampled from an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    pub source: Option<PatchSource>,
}

impl Patch {
    /// Wraps an already square image as a patch.
    pub fn from_image(pixels: Image) -> Result<Self> {
        if pixels.width() != pixels.height() {
            return Err(CknError::InvalidArgument(format!(
                "patch must be square, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(Patch {
            pixels,
            source: None,
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.width()
    }
}

/// Bilinear sample with out-of-image coordinates clamped to the nearest pixel.
fn sample_bilinear(image: &Image, sx: f64, sy: f64, out: &mut [f64]) {
    let max_x = (image.width() - 1) as f64;
    let max_y = (image.height() - 1) as f64;
    let cx = sx.clamp(0.0, max_x);
    let cy = sy.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(image.width() - 1);
    let y1 = (y0 + 1).min(image.height() - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    for (c, o) in out.iter_mut().enumerate() {
        let top = image.get(x0, y0, c) * (1.0 - fx) + image.get(x1, y0, c) * fx;
        let bottom = image.get(x0, y1, c) * (1.0 - fx) + image.get(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Resamples the rotated and scaled window around `keypoint` to `side x side`.
pub fn extract_patch(image: &Image, keypoint: &Keypoint, side: usize) -> Result<Patch> {
    if side < 3 || side % 2 == 0 {
        return Err(CknError::InvalidArgument(format!(
            "patch side must be odd and >= 3, got {side}"
        )));
    }
    if !(keypoint.scale > 0.0) || !keypoint.x.is_finite() || !keypoint.y.is_finite() {
        return Err(CknError::InvalidArgument(format!(
            "invalid keypoint {keypoint:?}"
        )));
    }
    let (x0, y0, x1, y1) = keypoint.window_bounds(side);
    let (w, h) = (image.width() as f64, image.height() as f64);
    if x1 < 0.0 || y1 < 0.0 || x0 > w - 1.0 || y0 > h - 1.0 {
        return Err(CknError::WindowOutside);
    }

    let channels = image.channels();
    let half = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = keypoint.rotation.sin_cos();
    let mut data = vec![0.0; side * side * channels];
    for i in 0..side {
        let v = (i as f64 - half) * keypoint.scale;
        for j in 0..side {
            let u = (j as f64 - half) * keypoint.scale;
            let sx = keypoint.x + cos * u - sin * v;
            let sy = keypoint.y + sin * u + cos * v;
            let at = (i * side + j) * channels;
            sample_bilinear(image, sx, sy, &mut data[at..at + channels]);
        }
    }
    let pixels = Image::new(side, side, channels, data)?;
    Ok(Patch {
        pixels,
        source: Some(PatchSource {
            image_id: 0,
            keypoint: *keypoint,
        }),
    })
}

/// Grid keypoints every `stride` pixels at each scale, keeping only those
/// whose whole window lies inside the image. Sorted by (scale, y, x).
pub fn dense_keypoints(image: &Image, stride: usize, scales: &[f64], side: usize) -> Vec<Keypoint> {
    let stride = stride.max(1);
    let mut scales: Vec<f64> = scales.iter().copied().filter(|s| *s > 0.0).collect();
    scales.sort_by(|a, b| a.total_cmp(b));
    scales.dedup();

    let (w, h) = (image.width(), image.height());
    let mut out = Vec::new();
    for &scale in &scales {
        let half = (side as f64 - 1.0) / 2.0 * scale;
        for gy in (0..h).step_by(stride) {
            let y = gy as f64;
            if y - half < 0.0 || y + half > (h - 1) as f64 {
                continue;
            }
            for gx in (0..w).step_by(stride) {
                let x = gx as f64;
                if x - half < 0.0 || x + half > (w - 1) as f64 {
                    continue;
                }
                out.push(Keypoint::new(x, y, scale, 0.0));
            }
        }
    }
    out
}

/// Reads keypoints, one `x y scale rotation` per line. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let file = std::fs::File::open(path).map_err(|e| CknError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CknError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CknError::format(path, format!("line {}: {e}", n + 1)))?;
        if fields.len() != 4 || !(fields[2] > 0.0) {
            return Err(CknError::format(
                path,
                format!("line {}: expected `x y scale rotation` with scale > 0", n + 1),
            ));
        }
        out.push(Keypoint::new(fields[0], fields[1], fields[2], fields[3]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| (x + 3 * y) as f64 / (w + 3 * h) as f64).unwrap()
    }

    #[test]
    fn pgm_bytes_scale_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn black_png_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        Image::new(4, 3, 3, vec![0.0; 36]).unwrap().save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let good = dir.path().join("good.png");
        ramp(8, 8).save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported or corrupt raster"), "{err}");
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn centered_unit_scale_is_an_exact_crop() {
        let img = ramp(61, 61);
        let patch = extract_patch(&img, &Keypoint::new(30.0, 30.0, 1.0, 0.0), 51).unwrap();
        for i in 0..51 {
            for j in 0..51 {
                assert_eq!(patch.pixels.get(j, i, 0), img.get(j + 5, i + 5, 0));
            }
        }
    }

    #[test]
    fn corner_keypoint_replicates_corner_pixel() {
        let img = ramp(40, 40);
        let patch = extract_patch(&img, &Keypoint::new(0.0, 0.0, 1.0, 0.0), 11).unwrap();
        let corner = img.get(0, 0, 0);
        for i in 0..=5 {
            for j in 0..=5 {
                assert_eq!(patch.pixels.get(j, i, 0), corner);
            }
        }
    }

    #[test]
    fn rotation_by_pi_on_symmetric_checkerboard() {
        let img = Image::from_fn(41, 41, 1, |x, y, _| {
            let (a, b) = ((x as f64 - 20.0) / 4.0, (y as f64 - 20.0) / 4.0);
            (a.round() + b.round()).rem_euclid(2.0)
        })
        .unwrap();
        let kp = Keypoint::new(20.0, 20.0, 0.75, 0.0);
        let straight = extract_patch(&img, &kp, 21).unwrap();
        let rotated = extract_patch(
            &img,
            &Keypoint {
                rotation: std::f64::consts::PI,
                ..kp
            },
            21,
        )
        .unwrap();

        // Oracle: direct resampling at explicitly rotated coordinates.
        let half = 10.0;
        for i in 0..21 {
            for j in 0..21 {
                let (u, v) = ((j as f64 - half) * 0.75, (i as f64 - half) * 0.75);
                let (sx, sy) = (20.0 - u, 20.0 - v);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let g = |x: f64, y: f64| img.get(x as usize, y as usize, 0);
                let expect = (g(x0, y0) * (1.0 - fx) + g(x0 + 1.0, y0) * fx) * (1.0 - fy)
                    + (g(x0, y0 + 1.0) * (1.0 - fx) + g(x0 + 1.0, y0 + 1.0) * fx) * fy;
                assert!((rotated.pixels.get(j, i, 0) - expect).abs() < 1e-12);
                assert!((rotated.pixels.get(j, i, 0) - straight.pixels.get(j, i, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_outside_image_is_an_error() {
        let img = ramp(20, 20);
        let err = extract_patch(&img, &Keypoint::new(200.0, 200.0, 1.0, 0.0), 11);
        assert!(matches!(err, Err(CknError::WindowOutside)));
        assert!(extract_patch(&img, &Keypoint::new(10.0, 10.0, 1.0, 0.0), 10).is_err());
    }

    #[test]
    fn dense_grid_matches_enumeration() {
        let img = ramp(64, 64);
        let kps = dense_keypoints(&img, 8, &[1.0], 51);
        // Oracle: enumerate every grid point and test the window by hand.
        let mut expected = Vec::new();
        for y in (0..64).step_by(8) {
            for x in (0..64).step_by(8) {
                if x >= 25 && x + 25 <= 63 && y >= 25 && y + 25 <= 63 {
                    expected.push((x as f64, y as f64));
                }
            }
        }
        let got: Vec<_> = kps.iter().map(|k| (k.x, k.y)).collect();
        assert_eq!(got, expected);
        assert_eq!(kps.len(), 1);

        let small = dense_keypoints(&img, 8, &[0.2], 51);
        assert!(!small.is_empty());
        assert!(small.iter().all(|k| k.rotation == 0.0));
    }

    #[test]
    fn dense_grid_edge_cases() {
        let img = ramp(30, 30);
        let kps = dense_keypoints(&img, 30, &[0.1], 51);
        let xs: std::collections::BTreeSet<i64> = kps.iter().map(|k| k.x as i64).collect();
        assert!(xs.len() <= 1);
        assert!(dense_keypoints(&img, 8, &[], 51).is_empty());
        assert!(dense_keypoints(&img, 8, &[1.0], 51).is_empty());
    }

    #[test]
    fn dense_grid_is_sorted_and_unique() {
        let img = ramp(100, 80);
        let kps = dense_keypoints(&img, 5, &[0.5, 0.3, 0.5], 21);
        for pair in kps.windows(2) {
            let a = (pair[0].scale, pair[0].y, pair[0].x);
            let b = (pair[1].scale, pair[1].y, pair[1].x);
            assert!(a < b, "{a:?} !< {b:?}");
        }
    }

    #[test]
    fn keypoint_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.txt");
        std::fs::write(&path, "# x y s r\n10 12.5 1.5 0.25\n\n3 4 1 0\n").unwrap();
        let kps = read_keypoints(&path).unwrap();
        assert_eq!(kps.len(), 2);
        assert_eq!(kps[0], Keypoint::new(10.0, 12.5, 1.5, 0.25));
        std::fs::write(&path, "1 2 3\n").unwrap();
        assert!(read_keypoints(&path).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn clamp_padding_stays_in_range(
                x in -10.0f64..50.0, y in -10.0f64..50.0,
                scale in 0.3f64..2.0, rot in -3.2f64..3.2, seed in 0u64..1000,
            ) {
                let img = Image::from_fn(40, 40, 1, |px, py, _| {
                    let h = (px as u64 * 7919 + py as u64 * 104729 + seed) % 1000;
                    h as f64 / 999.0
                }).unwrap();
                let kp = Keypoint::new(x, y, scale, rot);
                if let Ok(p) = extract_patch(&img, &kp, 9) {
                    let (lo, hi) = img.min_max();
                    let (plo, phi) = p.pixels.min_max();
                    prop_assert!(plo >= lo - 1e-12 && phi <= hi + 1e-12);
                    let again = extract_patch(&img, &kp, 9).unwrap();
                    prop_assert_eq!(p, again);
                }
            }
        }
    }
}
