//! Feature-map value types exchanged between backbones, fusion and decoder.

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Var};

/// Scale denominators of the four pyramid levels.
pub const PYRAMID_SCALES: [usize; 4] = [4, 8, 16, 32];

/// `C × H × W` activations for one image, tagged with the scale denominator.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub scale_denominator: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, scale_denominator: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || scale_denominator == 0 {
            return Err(Error::InvalidArgument("feature map dimensions must be positive".into()));
        }
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!("{channels}x{height}x{width} map with {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map holds non-finite values".into()));
        }
        Ok(Self { channels, height, width, scale_denominator, values })
    }

    /// Copies batch item `index` of a `[B, C, H, W]` graph value.
    pub fn from_graph<F: Float>(g: &Graph<'_, F>, v: Var, index: usize, scale_denominator: usize) -> Result<Self> {
        let s = g.shape(v);
        if s.len() != 4 || index >= s[0] {
            return Err(Error::ShapeMismatch(format!("expected [B, C, H, W] with B > {index}, got {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let n = c * h * w;
        let values = g.value(v)[index * n..(index + 1) * n].iter().map(|x| x.f64()).collect();
        Self::new(c, h, w, scale_denominator, values)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Image size this map implies.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height * self.scale_denominator, self.width * self.scale_denominator)
    }
}

/// Four-level pyramid at scales 1/4, 1/8, 1/16, 1/32.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    levels: Vec<FeatureMap>,
}

impl MultiScaleFeatures {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::ShapeMismatch(format!("pyramid needs 4 levels, got {}", levels.len())));
        }
        for (l, s) in levels.iter().zip(PYRAMID_SCALES) {
            if l.scale_denominator != s {
                return Err(Error::ShapeMismatch(format!("level at 1/{} where 1/{s} was expected", l.scale_denominator)));
            }
        }
        let size = levels[0].image_size();
        if levels.iter().any(|l| l.image_size() != size) {
            return Err(Error::ShapeMismatch("pyramid levels imply different image sizes".into()));
        }
        Ok(Self { levels })
    }

    pub fn from_graph<F: Float>(g: &Graph<'_, F>, vars: &[Var; 4], index: usize) -> Result<Self> {
        let levels = vars.iter().zip(PYRAMID_SCALES).map(|(&v, s)| FeatureMap::from_graph(g, v, index, s)).collect::<Result<_>>()?;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.levels[i].channels)
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.levels[0].image_size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, side: usize, scale: usize) -> FeatureMap {
        FeatureMap::new(c, side, side, scale, vec![0.0; c * side * side]).unwrap()
    }

    #[test]
    fn pyramid_checks_order_and_size() {
        let ok = MultiScaleFeatures::new(vec![map(2, 8, 4), map(2, 4, 8), map(2, 2, 16), map(2, 1, 32)]).unwrap();
        assert_eq!(ok.image_size(), (32, 32));
        assert!(MultiScaleFeatures::new(vec![map(2, 4, 8), map(2, 8, 4), map(2, 2, 16), map(2, 1, 32)]).is_err());
        assert!(MultiScaleFeatures::new(vec![map(2, 8, 4), map(2, 4, 8), map(2, 4, 16), map(2, 1, 32)]).is_err());
        assert!(MultiScaleFeatures::new(vec![map(2, 8, 4)]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureMap::new(1, 1, 1, 4, vec![f64::NAN]).is_err());
    }
}
