//! Image-shaped value types: normalised input tensors, binary masks and
//! confidence maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel mean/std applied to `[0, 1]` RGB values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        // ImageNet statistics
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Normalised 3-channel image, CHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!("image {height}x{width} needs {} values, got {}", 3 * height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8], norm: &Normalization) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!("rgb buffer of {} bytes for {height}x{width}", rgb.len())));
        }
        let plane = height * width;
        let mut data = vec![0f32; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                let v = rgb[i * 3 + c] as f64 / 255.0;
                data[c * plane + i] = ((v - norm.mean[c]) / norm.std[c]) as f32;
            }
        }
        Ok(Self { height, width, data })
    }

    /// Back to interleaved 8-bit RGB (rounded, clamped).
    pub fn to_rgb8(&self, norm: &Normalization) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                let v = self.data[c * plane + i] as f64 * norm.std[c] + norm.mean[c];
                out[i * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    /// Errors unless both sides are multiples of `divisor`.
    pub fn check_divisible(&self, divisor: usize) -> Result<()> {
        for side in [self.height, self.width] {
            if side == 0 || side % divisor != 0 {
                return Err(Error::NotDivisible { side, divisor });
            }
        }
        Ok(())
    }
}

/// Per-pixel `{0, 1}` labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!("mask {height}x{width} with {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour resample (half-pixel centres), keeps values binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Self { height, width, data }
    }

    /// 8-bit grey encoding with glass = 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect()
    }
}

/// Per-pixel glass probability in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!("confidence map {height}x{width} with {} values", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("confidences must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value.clamp(0.0, 1.0); height * width] }
    }

    /// `1` where `confidence >= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        let t = threshold as f32;
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&c| u8::from(c >= t)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_is_lossless() {
        let norm = Normalization::default();
        let rgb: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let t = ImageTensor::from_rgb8(4, 4, &rgb, &norm).unwrap();
        assert_eq!(t.to_rgb8(&norm), rgb);
    }

    #[test]
    fn binarize_examples() {
        let m = ConfidenceMap::filled(2, 2, 0.9).binarize(0.5);
        assert_eq!(m.data, vec![1; 4]);
        let m = ConfidenceMap::filled(2, 2, 0.5).binarize(0.5);
        assert_eq!(m.data, vec![1; 4], "ties count as glass");
        let checker = ConfidenceMap::new(2, 2, vec![0.2, 0.8, 0.8, 0.2]).unwrap();
        assert_eq!(checker.binarize(0.5).data, vec![0, 1, 1, 0]);
    }

    #[test]
    fn nearest_resize_same_size_is_identity() {
        let m = BinaryMask::new(3, 3, vec![1, 0, 1, 0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(m.resize_nearest(3, 3), m);
        let up = m.resize_nearest(6, 6);
        assert!(up.data.iter().all(|&v| v <= 1));
        assert_eq!(up.get(0, 0), 1);
        assert_eq!(up.get(5, 5), 0);
    }

    #[test]
    fn divisibility_check() {
        let t = ImageTensor::new(64, 96, vec![0.0; 3 * 64 * 96]).unwrap();
        assert!(t.check_divisible(32).is_ok());
        let t = ImageTensor::new(64, 100, vec![0.0; 3 * 64 * 100]).unwrap();
        assert!(matches!(t.check_divisible(32), Err(Error::NotDivisible { side: 100, divisor: 32 })));
    }
}
