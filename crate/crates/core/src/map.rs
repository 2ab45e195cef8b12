//! Multi-channel spatial feature maps.

use crate::error::{CknError, Result};
use crate::image::Image;

/// Spatial grid of `channels`-dimensional values, stored position-major:
/// all channels of `(x, y)` are contiguous and positions are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    /// Layer that produced this map (0 for input maps).
    pub layer: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(CknError::InvalidArgument(format!(
                "feature map must be non-empty, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(CknError::DimensionMismatch {
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CknError::NonFinite("feature map"));
        }
        Ok(FeatureMap {
            width,
            height,
            channels,
            layer: 0,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            layer: 0,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_image(image: &Image) -> Self {
        FeatureMap {
            width: image.width(),
            height: image.height(),
            channels: image.channels(),
            layer: 0,
            data: image.data().to_vec(),
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn scaled(&self, factor: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Number of valid `side x side` sub-patch positions per axis.
    pub fn subpatch_grid(&self, side: usize) -> Option<(usize, usize)> {
        if side == 0 || side > self.width || side > self.height {
            None
        } else {
            Some((self.width - side + 1, self.height - side + 1))
        }
    }

    /// Copies the `side x side` sub-patch with top-left corner `(x, y)` into
    /// `out`, ordered (row, column, channel).
    pub fn subpatch_into(&self, x: usize, y: usize, side: usize, out: &mut [f64]) {
        let row = side * self.channels;
        for dy in 0..side {
            let at = ((y + dy) * self.width + x) * self.channels;
            out[dy * row..(dy + 1) * row].copy_from_slice(&self.data[at..at + row]);
        }
    }

    pub fn subpatch(&self, x: usize, y: usize, side: usize) -> Result<Vec<f64>> {
        match self.subpatch_grid(side) {
            Some((gw, gh)) if x < gw && y < gh => {
                let mut out = vec![0.0; side * side * self.channels];
                self.subpatch_into(x, y, side, &mut out);
                Ok(out)
            }
            _ => Err(CknError::InvalidArgument(format!(
                "sub-patch of side {side} at ({x}, {y}) does not fit a {}x{} map",
                self.width, self.height
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subpatch_layout_is_row_column_channel() {
        let data: Vec<f64> = (0..4 * 3 * 2).map(|v| v as f64).collect();
        let map = FeatureMap::new(4, 3, 2, data).unwrap();
        let p = map.subpatch(1, 1, 2).unwrap();
        let mut expect = Vec::new();
        for dy in 0..2 {
            for dx in 0..2 {
                for c in 0..2 {
                    expect.push(map.get(1 + dx, 1 + dy, c));
                }
            }
        }
        assert_eq!(p, expect);
        assert!(map.subpatch(3, 0, 2).is_err());
        assert_eq!(map.subpatch_grid(2), Some((3, 2)));
        assert_eq!(map.subpatch_grid(4), None);
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(FeatureMap::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(FeatureMap::new(1, 1, 0, vec![]).is_err());
    }
}
