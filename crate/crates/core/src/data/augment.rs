use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor};
use crate::tensor::resize_bilinear;

fn flip_plane<T: Copy>(data: &[T], planes: usize, h: usize, w: usize, horizontal: bool, vertical: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(data[(p * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Mirrors image and mask together.
pub fn flip(sample: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    Sample {
        image: ImageTensor { height: h, width: w, data: flip_plane(&sample.image.data, 3, h, w, horizontal, vertical) },
        mask: BinaryMask { height: h, width: w, data: flip_plane(&sample.mask.data, 1, h, w, horizontal, vertical) },
        id: sample.id.clone(),
    }
}

/// Independent horizontal and vertical flips, each with probability 0.5.
pub fn augment_flip<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let horizontal = rng.gen_bool(0.5);
    let vertical = rng.gen_bool(0.5);
    flip(sample, horizontal, vertical)
}

/// Bilinear image / nearest-neighbour mask resize to `side × side`.
pub fn resize_pair(sample: &Sample, side: usize) -> Result<Sample> {
    if side == 0 || side % 32 != 0 {
        return Err(Error::NotDivisible { side, divisor: 32 });
    }
    let (h, w) = (sample.image.height, sample.image.width);
    let data = resize_bilinear(&sample.image.data, 3, (h, w), (side, side));
    Sample::new(ImageTensor::new(side, side, data)?, sample.mask.resize_nearest(side, side), sample.id.clone())
}
