//! Synthetic rain layers and the blend models used to build training triplets.
//!
//! A rain layer is produced by seeding sparse bright points, smearing each one
//! along a line kernel rotated to the streak angle, and clipping the result to
//! the requested peak intensity. Several such layers can be stacked with the
//! screen blend to get overlapping rain at slightly different angles.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_same_shape, ImageTensor};
use crate::seed::{derive_seed, rng};

/// How a rain layer is combined with a background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// `clamp(B + R, 0, 1)`.
    Additive,
    /// `1 - (1 - B)(1 - R)`.
    Screen,
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlendMode::Additive => "additive",
            BlendMode::Screen => "screen",
        })
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(BlendMode::Additive),
            "screen" => Ok(BlendMode::Screen),
            other => Err(Error::InvalidParameter(format!("unknown blend mode `{other}`"))),
        }
    }
}

/// Screen blend of two scalars.
///
/// Evaluated as `hi + lo * (1 - hi)` on the sorted pair, which keeps the
/// result exactly commutative, exact at the identities `x ⊕ 0 = x` and
/// `x ⊕ 1 = 1`, and never below `max(a, b)`.
#[inline]
pub fn screen(a: f32, b: f32) -> f32 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (hi + lo * (1.0 - hi)).min(1.0)
}

#[inline]
pub fn additive(a: f32, b: f32) -> f32 {
    (a + b).clamp(0.0, 1.0)
}

pub fn blend(background: &ImageTensor, rain: &ImageTensor, mode: BlendMode) -> Result<ImageTensor> {
    check_same_shape(background, rain)?;
    let f = match mode {
        BlendMode::Additive => additive,
        BlendMode::Screen => screen,
    };
    let mut out = Array3::zeros(background.dim());
    Zip::from(&mut out).and(background.view()).and(rain.view()).for_each(|o, &b, &r| *o = f(b, r));
    ImageTensor::new(out)
}

/// Parameters of one rain layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    /// Fraction of pixels that seed a streak, in `(0, 0.2]`.
    pub density: f32,
    /// Streak length in pixels, in `[5, 80]`.
    pub streak_length: u32,
    /// Streak angle from vertical in degrees, in `[-30, 30]`.
    pub angle_deg: f32,
    /// Peak brightness, in `(0, 1]`.
    pub intensity: f32,
    /// Number of screen-blended sub-layers, in `[1, 3]`.
    pub num_overlays: u32,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self { density: 0.01, streak_length: 20, angle_deg: 0.0, intensity: 0.9, num_overlays: 1, seed: 0 }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.density > 0.0 && self.density <= 0.2) {
            return bad(&format!("density {} outside (0, 0.2]", self.density));
        }
        if !(5..=80).contains(&self.streak_length) {
            return bad(&format!("streak_length {} outside [5, 80]", self.streak_length));
        }
        if !(-30.0..=30.0).contains(&self.angle_deg) {
            return bad(&format!("angle_deg {} outside [-30, 30]", self.angle_deg));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return bad(&format!("intensity {} outside (0, 1]", self.intensity));
        }
        if !(1..=3).contains(&self.num_overlays) {
            return bad(&format!("num_overlays {} outside [1, 3]", self.num_overlays));
        }
        Ok(())
    }
}

/// Inclusive sampling ranges for [`RainParams`] during dataset synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainParamRanges {
    pub density: (f32, f32),
    pub streak_length: (u32, u32),
    pub angle_deg: (f32, f32),
    pub intensity: (f32, f32),
    pub num_overlays: (u32, u32),
}

impl Default for RainParamRanges {
    fn default() -> Self {
        Self {
            density: (0.002, 0.02),
            streak_length: (10, 40),
            angle_deg: (-20.0, 20.0),
            intensity: (0.6, 1.0),
            num_overlays: (1, 3),
        }
    }
}

impl RainParamRanges {
    /// A degenerate range that always yields `p` (apart from the seed).
    pub fn fixed(p: &RainParams) -> Self {
        Self {
            density: (p.density, p.density),
            streak_length: (p.streak_length, p.streak_length),
            angle_deg: (p.angle_deg, p.angle_deg),
            intensity: (p.intensity, p.intensity),
            num_overlays: (p.num_overlays, p.num_overlays),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.density.0 <= self.density.1
            && self.streak_length.0 <= self.streak_length.1
            && self.angle_deg.0 <= self.angle_deg.1
            && self.intensity.0 <= self.intensity.1
            && self.num_overlays.0 <= self.num_overlays.1;
        if !ordered {
            return Err(Error::InvalidParameter("range lower bound above upper bound".into()));
        }
        let corner = |lo: bool| RainParams {
            density: if lo { self.density.0 } else { self.density.1 },
            streak_length: if lo { self.streak_length.0 } else { self.streak_length.1 },
            angle_deg: if lo { self.angle_deg.0 } else { self.angle_deg.1 },
            intensity: if lo { self.intensity.0 } else { self.intensity.1 },
            num_overlays: if lo { self.num_overlays.0 } else { self.num_overlays.1 },
            seed: 0,
        };
        corner(true).validate()?;
        corner(false).validate()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, seed: u64) -> RainParams {
        fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        }
        RainParams {
            density: uniform(rng, self.density),
            streak_length: rng.gen_range(self.streak_length.0..=self.streak_length.1),
            angle_deg: uniform(rng, self.angle_deg),
            intensity: uniform(rng, self.intensity),
            num_overlays: rng.gen_range(self.num_overlays.0..=self.num_overlays.1),
            seed,
        }
    }
}

/// Sparse anti-aliased line kernel, peak weight 1, centered on the origin.
fn line_kernel(length: u32, angle_deg: f32) -> Vec<(i32, i32, f32)> {
    let theta = angle_deg.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let half = length as f32 / 2.0;
    let steps = (length * 4).max(1);
    let radius = length as i32 / 2 + 2;
    let side = (2 * radius + 1) as usize;
    let mut grid = vec![0.0f32; side * side];
    for i in 0..=steps {
        let t = -half + length as f32 * i as f32 / steps as f32;
        let (x, y) = (t * dx, t * dy);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ox, oy, wgt) in
            [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)]
        {
            let gx = x0 as i32 + ox + radius;
            let gy = y0 as i32 + oy + radius;
            if wgt > 0.0 && (0..side as i32).contains(&gx) && (0..side as i32).contains(&gy) {
                grid[gy as usize * side + gx as usize] += wgt;
            }
        }
    }
    let peak = grid.iter().cloned().fold(0.0f32, f32::max);
    grid.iter()
        .enumerate()
        .filter(|(_, &v)| v > 1e-3 * peak)
        .map(|(i, &v)| {
            let gy = (i / side) as i32 - radius;
            let gx = (i % side) as i32 - radius;
            (gy, gx, v / peak)
        })
        .collect()
}

fn single_rain_layer(h: usize, w: usize, density: f32, length: u32, angle: f32, intensity: f32, seed: u64) -> Vec<f32> {
    let mut rng = rng(seed);
    let kernel = line_kernel(length, angle);
    let mut acc = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let u: f32 = rng.gen();
            if u >= density {
                continue;
            }
            let brightness: f32 = rng.gen_range(0.4..=1.0);
            for &(ky, kx, kw) in &kernel {
                let (yy, xx) = (y as i32 + ky, x as i32 + kx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc[yy as usize * w + xx as usize] += brightness * kw;
                }
            }
        }
    }
    acc.iter_mut().for_each(|v| *v = intensity * v.min(1.0));
    acc
}

/// Generates a single-channel rain layer of size `h × w`.
///
/// Overlay 0 uses `params` verbatim; later overlays jitter the angle by up to
/// ±5° and scale the intensity by `[0.6, 1]`, and all overlays are combined
/// with the screen blend. The output is a pure function of `(h, w, params)`.
pub fn generate_rain_layer(h: usize, w: usize, params: &RainParams) -> Result<ImageTensor> {
    params.validate()?;
    let min_side = params.streak_length as usize;
    if h < min_side || w < min_side {
        return Err(Error::InvalidParameter(format!("{h}x{w} layer is smaller than streak length {min_side}")));
    }
    let mut layer = vec![0.0f32; h * w];
    for overlay in 0..params.num_overlays {
        let sub_seed = derive_seed(params.seed, overlay as u64);
        let (angle, intensity) = if overlay == 0 {
            (params.angle_deg, params.intensity)
        } else {
            let mut jitter = rng(derive_seed(sub_seed, 0xA11CE));
            let a = (params.angle_deg + jitter.gen_range(-5.0..=5.0f32)).clamp(-30.0, 30.0);
            (a, params.intensity * jitter.gen_range(0.6..=1.0f32))
        };
        let sub = single_rain_layer(h, w, params.density, params.streak_length, angle, intensity, sub_seed);
        layer.iter_mut().zip(sub).for_each(|(l, s)| *l = screen(*l, s));
    }
    ImageTensor::new(Array3::from_shape_vec((h, w, 1), layer).expect("shape matches length"))
}

/// Smooth, textured synthetic background for when no photographs are supplied.
pub fn procedural_background(h: usize, w: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut rng = rng(seed);
    let waves: Vec<[f32; 5]> = (0..6 * channels)
        .map(|_| {
            [
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.02..0.12),
                0.0,
            ]
        })
        .collect();
    let rects: Vec<(f32, f32, f32, f32, Vec<f32>)> = (0..4)
        .map(|_| {
            let y0 = rng.gen_range(0.0..1.0f32);
            let x0 = rng.gen_range(0.0..1.0f32);
            let color = (0..channels).map(|_| rng.gen_range(-0.2..0.2f32)).collect();
            (y0, x0, y0 + rng.gen_range(0.1..0.5f32), x0 + rng.gen_range(0.1..0.5f32), color)
        })
        .collect();
    let base: Vec<f32> = (0..channels).map(|_| rng.gen_range(0.3..0.6f32)).collect();
    let data = Array3::from_shape_fn((h, w, channels), |(y, x, c)| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let mut v = base[c];
        for wave in &waves[c * 6..(c + 1) * 6] {
            let [dir, freq, phase, amp, _] = *wave;
            let t = fx * dir.cos() + fy * dir.sin();
            v += amp * (std::f32::consts::TAU * freq * t + phase).sin();
        }
        for (y0, x0, y1, x1, color) in &rects {
            if (*y0..*y1).contains(&fy) && (*x0..*x1).contains(&fx) {
                v += color[c];
            }
        }
        v.clamp(0.02, 0.95)
    });
    ImageTensor::new(data).expect("clamped into range")
}

/// A paired training record.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub rainy: ImageTensor,
    pub background: ImageTensor,
    pub rain: ImageTensor,
    pub mode: BlendMode,
    pub seed: u64,
}

impl Triplet {
    /// Builds a triplet from a background crop and rain parameters.
    ///
    /// Background and rain are snapped to the 8-bit grid first so that the
    /// blend relation survives PNG storage to within half a code value.
    pub fn compose(background: &ImageTensor, params: &RainParams, mode: BlendMode) -> Result<Self> {
        let background = background.quantized();
        let rain = generate_rain_layer(background.height(), background.width(), params)?
            .expand_channels(background.channels())?
            .quantized();
        let rainy = blend(&background, &rain, mode)?;
        Ok(Self { rainy, background, rain, mode, seed: params.seed })
    }
}

/// Options for [`synthesize_dataset`] beyond the parameter ranges.
#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub crop: usize,
    pub mode: BlendMode,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { crop: 224, mode: BlendMode::Screen, seed: 0 }
    }
}

fn synthesize_one(
    backgrounds: &[ImageTensor],
    index: usize,
    ranges: &RainParamRanges,
    opts: &SynthOptions,
) -> Result<Triplet> {
    let bg = &backgrounds[index % backgrounds.len()];
    let triplet_seed = derive_seed(opts.seed, index as u64);
    let mut rng = rng(triplet_seed);
    if bg.height() < opts.crop || bg.width() < opts.crop {
        return Err(Error::ImageSmallerThanPatch {
            id: format!("background #{}", index % backgrounds.len()),
            height: bg.height(),
            width: bg.width(),
            patch: opts.crop,
        });
    }
    let top = rng.gen_range(0..=bg.height() - opts.crop);
    let left = rng.gen_range(0..=bg.width() - opts.crop);
    let crop = bg.crop(top, left, opts.crop, opts.crop)?;
    let params = ranges.sample(&mut rng, triplet_seed);
    Triplet::compose(&crop, &params, opts.mode)
}

/// Produces exactly `count` triplets, cycling through `backgrounds` with
/// random crops. Each triplet's seed is derived from `opts.seed` and its index.
pub fn synthesize_dataset(
    backgrounds: &[ImageTensor],
    count: usize,
    ranges: &RainParamRanges,
    opts: &SynthOptions,
) -> Result<Vec<Triplet>> {
    if backgrounds.is_empty() {
        return Err(Error::EmptyBackgrounds);
    }
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    synthesize_range(backgrounds, 0..count, ranges, opts)
}

/// Triplets `range` of the dataset [`synthesize_dataset`] would produce;
/// element `i` depends only on `i`, never on the range bounds.
pub fn synthesize_range(
    backgrounds: &[ImageTensor],
    range: std::ops::Range<usize>,
    ranges: &RainParamRanges,
    opts: &SynthOptions,
) -> Result<Vec<Triplet>> {
    if backgrounds.is_empty() {
        return Err(Error::EmptyBackgrounds);
    }
    ranges.validate()?;
    range.into_par_iter().map(|i| synthesize_one(backgrounds, i, ranges, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(v: f32) -> ImageTensor {
        ImageTensor::filled(4, 5, 3, v).unwrap()
    }

    #[test]
    fn screen_constant_examples() {
        let out = blend(&constant(0.5), &constant(0.5), BlendMode::Screen).unwrap();
        assert!(out.view().iter().all(|&v| v == 0.75));
        let bg = procedural_background(8, 8, 3, 4);
        let zero = ImageTensor::filled(8, 8, 3, 0.0).unwrap();
        assert_eq!(blend(&bg, &zero, BlendMode::Screen).unwrap(), bg);
        let one = ImageTensor::filled(8, 8, 3, 1.0).unwrap();
        assert!(blend(&bg, &one, BlendMode::Screen).unwrap().view().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn additive_clamps() {
        let out = blend(&constant(0.9), &constant(0.3), BlendMode::Additive).unwrap();
        assert!(out.view().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn blend_shape_mismatch() {
        let a = ImageTensor::filled(4, 4, 3, 0.1).unwrap();
        let b = ImageTensor::filled(4, 5, 3, 0.1).unwrap();
        assert!(matches!(blend(&a, &b, BlendMode::Screen), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_density_rejected() {
        let p = RainParams { density: 0.0, seed: 1, ..RainParams::default() };
        assert!(matches!(generate_rain_layer(64, 64, &p), Err(Error::InvalidParameter(_))));
        let p = RainParams { streak_length: 100, ..RainParams::default() };
        assert!(generate_rain_layer(128, 128, &p).is_err());
        let p = RainParams { streak_length: 40, ..RainParams::default() };
        assert!(generate_rain_layer(30, 64, &p).is_err());
    }

    #[test]
    fn rain_layer_is_deterministic() {
        let p = RainParams { seed: 7, num_overlays: 3, ..RainParams::default() };
        let a = generate_rain_layer(64, 64, &p).unwrap();
        let b = generate_rain_layer(64, 64, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.channels(), 1);
        assert!(a.view().iter().any(|&v| v > 0.0));
        let c = generate_rain_layer(64, 64, &RainParams { seed: 8, ..p }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn peak_respects_intensity() {
        let p = RainParams { intensity: 0.4, density: 0.1, seed: 2, ..RainParams::default() };
        let layer = generate_rain_layer(64, 64, &p).unwrap();
        let peak = layer.view().iter().cloned().fold(0.0, f32::max);
        assert!(peak <= 0.4 + 1e-6 && peak > 0.3);
    }

    #[test]
    fn synthesize_single_triplet() {
        let bg = procedural_background(224, 224, 3, 11);
        let p = RainParams { seed: 0, ..RainParams::default() };
        let opts = SynthOptions { crop: 224, mode: BlendMode::Screen, seed: 0 };
        let out = synthesize_dataset(&[bg], 1, &RainParamRanges::fixed(&p), &opts).unwrap();
        assert_eq!(out.len(), 1);
        let t = &out[0];
        assert_eq!(t.rainy, blend(&t.background, &t.rain, BlendMode::Screen).unwrap());
    }

    #[test]
    fn synthesis_errors_and_determinism() {
        let opts = SynthOptions { crop: 32, ..SynthOptions::default() };
        let ranges = RainParamRanges { streak_length: (5, 20), ..RainParamRanges::default() };
        assert!(matches!(synthesize_dataset(&[], 3, &ranges, &opts), Err(Error::EmptyBackgrounds)));
        let bgs = vec![procedural_background(40, 48, 3, 1), procedural_background(36, 36, 3, 2)];
        let a = synthesize_dataset(&bgs, 5, &ranges, &opts).unwrap();
        let b = synthesize_dataset(&bgs, 5, &ranges, &opts).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let small = vec![procedural_background(20, 48, 3, 1)];
        assert!(matches!(synthesize_dataset(&small, 1, &ranges, &opts), Err(Error::ImageSmallerThanPatch { .. })));
    }

    proptest! {
        #[test]
        fn screen_algebra(b in 0.0f32..=1.0, r in 0.0f32..=1.0) {
            let s = screen(b, r);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(s >= b.max(r));
            prop_assert_eq!(s, screen(r, b));
            prop_assert_eq!(screen(b, 0.0), b);
            prop_assert_eq!(screen(b, 1.0), 1.0);
        }
    }
}
