use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor, Normalization};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Checker,
    Gradient,
    Noise,
    Blobs,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 5] =
        [TextureFamily::Stripes, TextureFamily::Checker, TextureFamily::Gradient, TextureFamily::Noise, TextureFamily::Blobs];
}

/// Scene distribution shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Inclusive panel-count range.
    pub n_panels: (usize, usize),
    /// Range of the background weight `t` in `t·background + (1 − t)·tint`.
    pub transparency: (f64, f64),
    pub reflection_prob: f64,
    pub frame_prob: f64,
    pub rotation_prob: f64,
    /// Panel half-extent range as a fraction of the canvas side.
    pub panel_extent: (f64, f64),
    /// Families the per-sample background is drawn from.
    pub backgrounds: Vec<TextureFamily>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_panels: (1, 3),
            transparency: (0.55, 0.95),
            reflection_prob: 0.5,
            frame_prob: 0.5,
            rotation_prob: 0.5,
            panel_extent: (0.12, 0.32),
            backgrounds: TextureFamily::ALL.to_vec(),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.n_panels.0 <= self.n_panels.1
            && self.transparency.0 <= self.transparency.1
            && (0.0..=1.0).contains(&self.transparency.0)
            && (0.0..=1.0).contains(&self.transparency.1)
            && prob(self.reflection_prob)
            && prob(self.frame_prob)
            && prob(self.rotation_prob)
            && self.panel_extent.0 > 0.0
            && self.panel_extent.0 <= self.panel_extent.1
            && self.panel_extent.1 <= 0.5
            && !self.backgrounds.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("scene parameters out of range: {self:?}")))
        }
    }
}

/// Fully determined scene: the distribution, the background family and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    #[serde(flatten)]
    pub params: SceneParams,
    pub background: TextureFamily,
    pub seed: u64,
}

impl SceneSpec {
    /// Picks the background family for `seed` from the allowed list.
    pub fn from_params(canvas_size: usize, params: &SceneParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let background = params.backgrounds[rng.gen_range(0..params.backgrounds.len().max(1))];
        Self { canvas_size, params: params.clone(), background, seed }
    }
}

/// Seed of sample `index` in a dataset seeded with `dataset_seed`; independent
/// of generation order.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index);
    rng.next_u64()
}

type Rgb = [f64; 3];

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Rgb> {
    let n = spec.canvas_size;
    let (a, b) = (color(rng), color(rng));
    let mix = |t: f64| -> Rgb { std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t) };
    let mut px = vec![[0.0; 3]; n * n];
    match spec.background {
        TextureFamily::Stripes => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let period = rng.gen_range(4.0..(n as f64 / 3.0).max(5.0));
            let (s, c) = angle.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 * c + y as f64 * s) / period;
                    px[y * n + x] = mix(0.5 + 0.5 * (u * std::f64::consts::TAU).sin());
                }
            }
        }
        TextureFamily::Checker => {
            let cell = rng.gen_range(3..(n / 4).max(4));
            for y in 0..n {
                for x in 0..n {
                    px[y * n + x] = mix(((x / cell + y / cell) % 2) as f64);
                }
            }
        }
        TextureFamily::Gradient => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let u = ((x as f64 / n as f64 - 0.5) * c + (y as f64 / n as f64 - 0.5) * s) / std::f64::consts::SQRT_2 + 0.5;
                    px[y * n + x] = mix(u.clamp(0.0, 1.0));
                }
            }
        }
        TextureFamily::Noise => {
            let g = rng.gen_range(3..8usize);
            let grid: Vec<Rgb> = (0..(g + 1) * (g + 1)).map(|_| color(rng)).collect();
            for y in 0..n {
                for x in 0..n {
                    let (fy, fx) = (y as f64 / n as f64 * g as f64, x as f64 / n as f64 * g as f64);
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let at = |yy: usize, xx: usize| grid[yy * (g + 1) + xx];
                    px[y * n + x] = std::array::from_fn(|c| {
                        let top = at(y0, x0)[c] * (1.0 - tx) + at(y0, x0 + 1)[c] * tx;
                        let bot = at(y0 + 1, x0)[c] * (1.0 - tx) + at(y0 + 1, x0 + 1)[c] * tx;
                        top * (1.0 - ty) + bot * ty
                    });
                }
            }
        }
        TextureFamily::Blobs => {
            px.iter_mut().for_each(|p| *p = a);
            for _ in 0..rng.gen_range(3..9) {
                let col = color(rng);
                let (cx, cy) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
                let r = rng.gen_range(n as f64 * 0.05..n as f64 * 0.25);
                for y in 0..n {
                    for x in 0..n {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        if d < r {
                            px[y * n + x] = col;
                        }
                    }
                }
            }
        }
    }
    px
}

fn quantize(px: &[Rgb]) -> Vec<u8> {
    px.iter().flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect()
}

/// Background only, as interleaved RGB.
pub fn render_background(spec: &SceneSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    quantize(&background(spec, &mut rng))
}

/// Interleaved RGB and the glass mask. Panels are alpha-blended over the
/// background; frames are opaque and excluded from the mask.
pub fn render_scene(spec: &SceneSpec) -> Result<(Vec<u8>, BinaryMask)> {
    spec.params.validate()?;
    if spec.canvas_size == 0 {
        return Err(Error::InvalidArgument("canvas_size must be positive".into()));
    }
    let n = spec.canvas_size;
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut px = background(spec, &mut rng);
    let mut mask = vec![0u8; n * n];
    let panels = rng.gen_range(p.n_panels.0..=p.n_panels.1);
    for _ in 0..panels {
        let side = n as f64;
        let hx = rng.gen_range(p.panel_extent.0..=p.panel_extent.1) * side;
        let hy = rng.gen_range(p.panel_extent.0..=p.panel_extent.1) * side;
        let cx = rng.gen_range(hx.min(side / 2.0)..=(side - hx).max(side / 2.0));
        let cy = rng.gen_range(hy.min(side / 2.0)..=(side - hy).max(side / 2.0));
        let angle = if rng.gen_bool(p.rotation_prob) { rng.gen_range(-0.6..0.6) } else { 0.0f64 };
        let t = rng.gen_range(p.transparency.0..=p.transparency.1);
        let tint = color(&mut rng);
        let reflection = rng.gen_bool(p.reflection_prob).then(|| (rng.gen_range(-1.0..1.0f64), rng.gen_range(0.08..0.25f64), rng.gen_range(0.25..0.6f64)));
        let frame = rng.gen_bool(p.frame_prob).then(|| (rng.gen_range(1.5..(hx.min(hy) * 0.25).max(2.0)), [rng.gen_range(0.0..80.0f64); 3]));
        let (s, c) = angle.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                if u.abs() >= hx || v.abs() >= hy {
                    continue;
                }
                let i = y * n + x;
                if let Some((width, fc)) = frame {
                    if hx - u.abs() < width || hy - v.abs() < width {
                        px[i] = fc;
                        mask[i] = 0;
                        continue;
                    }
                }
                let mut out: Rgb = std::array::from_fn(|k| t * px[i][k] + (1.0 - t) * tint[k]);
                if let Some((offset, width, strength)) = reflection {
                    // diagonal streak across the panel, brightest on its centre line
                    let d = ((u / hx + v / hy) / 2.0 - offset * 0.5).abs();
                    if d < width {
                        let k = strength * (1.0 - d / width);
                        out = out.map(|o| o + (255.0 - o) * k);
                    }
                }
                px[i] = out;
                mask[i] = 1;
            }
        }
    }
    Ok((quantize(&px), BinaryMask::new(n, n, mask)?))
}

/// Renders and normalises a scene into a [`Sample`] with id `scene_<seed>`.
pub fn generate_scene(spec: &SceneSpec, norm: &Normalization) -> Result<Sample> {
    let (rgb, mask) = render_scene(spec)?;
    let image = ImageTensor::from_rgb8(spec.canvas_size, spec.canvas_size, &rgb, norm)?;
    Sample::new(image, mask, format!("scene_{:016x}", spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec::from_params(64, &SceneParams::default(), seed)
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(render_scene(&spec(7)).unwrap(), render_scene(&spec(7)).unwrap());
        assert_ne!(render_scene(&spec(7)).unwrap().0, render_scene(&spec(8)).unwrap().0);
    }

    #[test]
    fn fully_transparent_panel_matches_background() {
        for family in TextureFamily::ALL {
            let params = SceneParams { transparency: (1.0, 1.0), reflection_prob: 0.0, frame_prob: 0.0, ..Default::default() };
            let s = SceneSpec { canvas_size: 64, params, background: family, seed: 3 };
            let (rgb, mask) = render_scene(&s).unwrap();
            assert!(mask.count_ones() > 0);
            assert_eq!(rgb, render_background(&s));
        }
    }

    #[test]
    fn no_panels_means_empty_mask() {
        let params = SceneParams { n_panels: (0, 0), ..Default::default() };
        let (_, mask) = render_scene(&SceneSpec::from_params(32, &params, 1)).unwrap();
        assert_eq!(mask.count_ones(), 0);
    }

    #[test]
    fn frames_are_not_glass() {
        let params = SceneParams { n_panels: (1, 1), frame_prob: 1.0, rotation_prob: 0.0, reflection_prob: 0.0, ..Default::default() };
        let s = SceneSpec { canvas_size: 64, params, background: TextureFamily::Gradient, seed: 11 };
        let (rgb, mask) = render_scene(&s).unwrap();
        let bg = render_background(&s);
        let changed = (0..64 * 64).filter(|&i| rgb[3 * i..3 * i + 3] != bg[3 * i..3 * i + 3]).count();
        assert!(changed > mask.count_ones(), "frame pixels changed but stay unlabelled");
    }

    #[test]
    fn sample_seeds_are_order_independent() {
        let a: Vec<u64> = (0..10).map(|i| sample_seed(5, i)).collect();
        let b: Vec<u64> = (0..10).rev().map(|i| sample_seed(5, i)).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(a[0], a[1]);
    }
}
