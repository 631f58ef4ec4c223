//! Decomposition network (shared encoder, background and rain decoders),
//! composition block and patch discriminator.
//!
//! Encoder module `k` runs two 3×3 convolutions with a residual link and then
//! max-pools, so the five module outputs sit at 1/2 … 1/32 of the input. The
//! first module's pre-pool activation is also kept as a full-resolution skip
//! for the last decoder stage. Each decoder stage upsamples ×2 (nearest),
//! convolves and adds the encoder map of the same scale. The rain decoder
//! additionally concatenates the background decoder's feature map of the
//! same stage before its convolution.

pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod ops;
pub mod weights;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Array3, Array4, Axis};

pub use config::{DilationPlacement, NetworkConfig};
pub use graph::{Graph, Var};
pub use weights::{ConvParams, Weights};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use config::{DECODER_STAGES, IMAGE_CHANNELS};

/// Multi-scale encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// Module outputs at 1/2, 1/4, 1/8, 1/16 and 1/32 of the input, NCHW.
    pub levels: Vec<Array4<f32>>,
    /// Pre-pool activation of the first module at full resolution.
    pub stem: Array4<f32>,
}

impl FeaturePyramid {
    pub fn input_size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.stem.dim();
        (h, w)
    }

    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.dim().2, l.dim().3)).collect()
    }

    fn check(&self) -> Result<()> {
        let (h, w) = self.input_size();
        if self.levels.len() != 5 {
            return Err(Error::ShapeInconsistency(format!("pyramid has {} levels", self.levels.len())));
        }
        for (k, l) in self.levels.iter().enumerate() {
            let f = 1 << (k + 1);
            if (l.dim().2, l.dim().3) != (h / f, w / f) || l.dim().0 != self.stem.dim().0 {
                return Err(Error::ShapeInconsistency(format!(
                    "level {} is {}x{}, expected {}x{}",
                    k + 1,
                    l.dim().2,
                    l.dim().3,
                    h / f,
                    w / f
                )));
            }
        }
        Ok(())
    }
}

/// Background-decoder stage outputs, coarse to fine (1/16 … 1/1), NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderFeatures {
    pub stages: Vec<Array4<f32>>,
}

/// How many times each sub-network has been evaluated.
#[derive(Debug, Default)]
pub struct EvalCounters {
    encoder: AtomicU64,
    background_decoder: AtomicU64,
    rain_decoder: AtomicU64,
    composition: AtomicU64,
    discriminator: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub encoder: u64,
    pub background_decoder: u64,
    pub rain_decoder: u64,
    pub composition: u64,
    pub discriminator: u64,
}

impl EvalCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            encoder: self.encoder.load(Ordering::Relaxed),
            background_decoder: self.background_decoder.load(Ordering::Relaxed),
            rain_decoder: self.rain_decoder.load(Ordering::Relaxed),
            composition: self.composition.load(Ordering::Relaxed),
            discriminator: self.discriminator.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.encoder, &self.background_decoder, &self.rain_decoder, &self.composition, &self.discriminator] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Graph handles of one encoder evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub levels: [Var; 5],
    pub stem: Var,
}

/// Graph handles of a full decomposition/composition pass.
#[derive(Clone, Copy, Debug)]
pub struct FullVars {
    pub input: Var,
    pub background: Var,
    pub rain: Var,
    pub recomposed: Var,
}

/// Configuration, parameters and evaluation counters of the whole model.
#[derive(Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub weights: Weights,
    counters: EvalCounters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), weights: self.weights.clone(), counters: EvalCounters::default() }
    }
}

impl Model {
    pub fn new(config: NetworkConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Self { config, weights, counters: EvalCounters::default() })
    }

    /// Seeded random initialization from `config.init_seed`.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        let weights = Weights::init(&config);
        Self::new(config, weights)
    }

    pub fn counters(&self) -> &EvalCounters {
        &self.counters
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    // --- graph builders -------------------------------------------------

    pub fn build_encoder(&self, g: &mut Graph<'_>, x: Var) -> Result<EncoderVars> {
        let (_, c, h, w) = g.value(x).dim();
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::NonDivisibleInput { height: h, width: w });
        }
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeInconsistency(format!("encoder expects 3 channels, got {c}")));
        }
        EvalCounters::bump(&self.counters.encoder);
        let layers = self.config.encoder_layers();
        let mut cur = x;
        let mut levels = Vec::with_capacity(5);
        let mut stem = x;
        for m in 0..5 {
            let h = g.conv(cur, &layers[2 * m], None)?;
            let y = g.conv(h, &layers[2 * m + 1], Some(h))?;
            if m == 0 {
                stem = y;
            }
            cur = g.maxpool(y);
            levels.push(cur);
        }
        Ok(EncoderVars { levels: levels.try_into().expect("five levels"), stem })
    }

    fn skip_for_stage(enc: &EncoderVars, stage: usize) -> Var {
        if stage + 1 < DECODER_STAGES {
            enc.levels[3 - stage]
        } else {
            enc.stem
        }
    }

    pub fn build_background_decoder(&self, g: &mut Graph<'_>, enc: &EncoderVars) -> Result<(Var, [Var; 5])> {
        EvalCounters::bump(&self.counters.background_decoder);
        let layers = self.config.background_decoder_layers();
        let mut cur = enc.levels[4];
        let mut feats = Vec::with_capacity(DECODER_STAGES);
        for (j, layer) in layers.iter().take(DECODER_STAGES).enumerate() {
            let up = g.upsample(cur);
            cur = g.conv(up, layer, Some(Self::skip_for_stage(enc, j)))?;
            feats.push(cur);
        }
        let out = g.conv(cur, &layers[DECODER_STAGES], None)?;
        Ok((out, feats.try_into().expect("five stages")))
    }

    pub fn build_rain_decoder(&self, g: &mut Graph<'_>, enc: &EncoderVars, bg: &[Var; 5]) -> Result<Var> {
        EvalCounters::bump(&self.counters.rain_decoder);
        let layers = self.config.rain_decoder_layers();
        let mut cur = enc.levels[4];
        for (j, layer) in layers.iter().take(DECODER_STAGES).enumerate() {
            let up = g.upsample(cur);
            let joined = g.concat(up, bg[j])?;
            cur = g.conv(joined, layer, Some(Self::skip_for_stage(enc, j)))?;
        }
        g.conv(cur, &layers[DECODER_STAGES], None)
    }

    pub fn build_composition(&self, g: &mut Graph<'_>, background: Var, rain: Var) -> Result<Var> {
        if g.value(background).dim() != g.value(rain).dim() {
            let (a, b) = (g.value(background).dim(), g.value(rain).dim());
            return Err(Error::ShapeMismatch { left: vec![a.0, a.1, a.2, a.3], right: vec![b.0, b.1, b.2, b.3] });
        }
        EvalCounters::bump(&self.counters.composition);
        let mut cur = g.concat(background, rain)?;
        for layer in self.config.composition_layers() {
            cur = g.conv(cur, &layer, None)?;
        }
        Ok(cur)
    }

    pub fn build_discriminator(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dim();
        let p = self.config.patch;
        if h != p || w != p || c != IMAGE_CHANNELS {
            return Err(Error::WrongInputSize { expected: p, height: h, width: w });
        }
        EvalCounters::bump(&self.counters.discriminator);
        let mut cur = x;
        for layer in self.config.discriminator_layers() {
            cur = g.conv(cur, &layer, None)?;
        }
        Ok(cur)
    }

    /// Encoder → both decoders → composition on an NCHW batch, keeping the
    /// tape for back-propagation.
    pub fn build_full<'w>(&'w self, g: &mut Graph<'w>, rainy: Array4<f32>) -> Result<FullVars> {
        let input = g.input(rainy, false);
        let enc = self.build_encoder(g, input)?;
        let (background, feats) = self.build_background_decoder(g, &enc)?;
        let rain = self.build_rain_decoder(g, &enc, &feats)?;
        let recomposed = self.build_composition(g, background, rain)?;
        Ok(FullVars { input, background, rain, recomposed })
    }

    // --- image-level operations ------------------------------------------

    pub fn encode(&self, o: &ImageTensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new(&self.weights);
        let x = g.input(image_to_nchw(o), false);
        let enc = self.build_encoder(&mut g, x)?;
        Ok(FeaturePyramid {
            levels: enc.levels.iter().map(|&v| g.value(v).clone()).collect(),
            stem: g.value(enc.stem).clone(),
        })
    }

    fn pyramid_inputs(&self, g: &mut Graph<'_>, pyr: &FeaturePyramid) -> Result<EncoderVars> {
        pyr.check()?;
        let e = &self.config.encoder_channels;
        for (k, l) in pyr.levels.iter().enumerate() {
            if l.dim().1 != e[k] {
                return Err(Error::ShapeInconsistency(format!(
                    "level {} has {} channels, expected {}",
                    k + 1,
                    l.dim().1,
                    e[k]
                )));
            }
        }
        let levels: Vec<Var> = pyr.levels.iter().map(|l| g.input(l.clone(), false)).collect();
        let stem = g.input(pyr.stem.clone(), false);
        Ok(EncoderVars { levels: levels.try_into().expect("five levels"), stem })
    }

    pub fn decode_background(&self, pyr: &FeaturePyramid) -> Result<(ImageTensor, DecoderFeatures)> {
        let mut g = Graph::new(&self.weights);
        let enc = self.pyramid_inputs(&mut g, pyr)?;
        let (out, feats) = self.build_background_decoder(&mut g, &enc)?;
        let stages = feats.iter().map(|&v| g.value(v).clone()).collect();
        Ok((nchw_to_image(g.value(out)), DecoderFeatures { stages }))
    }

    pub fn decode_rain(&self, pyr: &FeaturePyramid, bg: &DecoderFeatures) -> Result<ImageTensor> {
        let mut g = Graph::new(&self.weights);
        let enc = self.pyramid_inputs(&mut g, pyr)?;
        if bg.stages.len() != DECODER_STAGES {
            return Err(Error::ShapeInconsistency(format!("{} background stages", bg.stages.len())));
        }
        let (h, w) = pyr.input_size();
        let mut feats = Vec::with_capacity(DECODER_STAGES);
        for (j, f) in bg.stages.iter().enumerate() {
            let scale = 1 << (DECODER_STAGES - 1 - j);
            if (f.dim().2, f.dim().3) != (h / scale, w / scale) || f.dim().1 != self.config.decoder_channels(j) {
                return Err(Error::ShapeInconsistency(format!(
                    "background stage {} is {:?}, expected {}x{}x{}",
                    j + 1,
                    f.dim(),
                    self.config.decoder_channels(j),
                    h / scale,
                    w / scale
                )));
            }
            feats.push(g.input(f.clone(), false));
        }
        let out = self.build_rain_decoder(&mut g, &enc, &feats.try_into().expect("five stages"))?;
        Ok(nchw_to_image(g.value(out)))
    }

    pub fn compose(&self, background: &ImageTensor, rain: &ImageTensor) -> Result<ImageTensor> {
        crate::image::check_same_shape(background, rain)?;
        let mut g = Graph::new(&self.weights);
        let b = g.input(image_to_nchw(background), false);
        let r = g.input(image_to_nchw(rain), false);
        let out = self.build_composition(&mut g, b, r)?;
        Ok(nchw_to_image(g.value(out)))
    }

    /// Per-patch "real" probabilities of a `patch × patch` image.
    pub fn discriminate(&self, image: &ImageTensor) -> Result<Array2<f32>> {
        let mut g = Graph::new(&self.weights);
        let x = g.input(image_to_nchw(image), false);
        let out = self.build_discriminator(&mut g, x)?;
        Ok(g.into_value(out).index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0))
    }

    pub fn forward_full(&self, o: &ImageTensor) -> Result<(ImageTensor, ImageTensor, ImageTensor)> {
        let mut g = Graph::new(&self.weights);
        let v = self.build_full(&mut g, image_to_nchw(o))?;
        Ok((nchw_to_image(g.value(v.background)), nchw_to_image(g.value(v.rain)), nchw_to_image(g.value(v.recomposed))))
    }

    /// Inference path: encoder and background decoder only. Inputs whose
    /// sides are not multiples of 32 are reflect-padded and the output is
    /// cropped back.
    pub fn derain(&self, o: &ImageTensor) -> Result<ImageTensor> {
        let (h, w, _) = o.dim();
        let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
        let x = reflect_pad(&image_to_nchw(o), ph, pw);
        let mut g = Graph::new(&self.weights);
        let input = g.input(x, false);
        let enc = self.build_encoder(&mut g, input)?;
        let (out, _) = self.build_background_decoder(&mut g, &enc)?;
        let full = g.into_value(out);
        Ok(nchw_to_image(&full.slice(s![.., .., ..h, ..w]).to_owned()))
    }
}

/// HWC image → `1 × 3 × H × W`, replicating grayscale to three channels.
pub fn image_to_nchw(img: &ImageTensor) -> Array4<f32> {
    let (h, w, c) = img.dim();
    let v = img.view();
    Array4::from_shape_fn((1, IMAGE_CHANNELS, h, w), |(_, ch, y, x)| v[[y, x, if c == 1 { 0 } else { ch }]])
}

/// First sample of an NCHW tensor → HWC image, clamped into `[0, 1]`.
pub fn nchw_to_image(t: &Array4<f32>) -> ImageTensor {
    let (_, c, h, w) = t.dim();
    ImageTensor::from_clamped(Array3::from_shape_fn((h, w, c), |(y, x, ch)| t[[0, ch, y, x]]))
}

/// NHWC batch → NCHW.
pub fn nhwc_to_nchw(t: &Array4<f32>) -> Array4<f32> {
    t.view().permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

pub fn nchw_to_nhwc(t: &Array4<f32>) -> Array4<f32> {
    t.view().permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned()
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads the bottom and right edges of an NCHW tensor up to `h × w`.
pub fn reflect_pad(x: &Array4<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c, ih, iw) = x.dim();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    Array4::from_shape_fn((n, c, h, w), |(s, ch, y, xx)| {
        x[[s, ch, reflect_index(y as isize, ih), reflect_index(xx as isize, iw)]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rainsynth::procedural_background;

    pub(crate) fn small_config(patch: usize) -> NetworkConfig {
        NetworkConfig {
            patch,
            encoder_channels: [4, 6, 8, 8, 8],
            composition_channels: vec![4],
            discriminator_channels: [4, 4, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn pyramid_fractions() {
        let m = Model::init(small_config(64)).unwrap();
        for (h, w) in [(64, 64), (96, 160), (32, 32)] {
            let pyr = m.encode(&procedural_background(h, w, 3, 1)).unwrap();
            let want: Vec<_> = (1..=5).map(|k| (h >> k, w >> k)).collect();
            assert_eq!(pyr.spatial_sizes(), want);
        }
        assert!(matches!(m.encode(&procedural_background(33, 64, 3, 1)), Err(Error::NonDivisibleInput { .. })));
    }

    #[test]
    fn zero_weights_give_half_everywhere() {
        let cfg = small_config(32);
        let m = Model::new(cfg.clone(), Weights::zeros(&cfg)).unwrap();
        let img = procedural_background(32, 32, 3, 2);
        let (b, r, o) = m.forward_full(&img).unwrap();
        for out in [&b, &r, &o] {
            assert!(out.view().iter().all(|&v| v == 0.5));
        }
        let d = m.discriminate(&img).unwrap();
        assert!(d.iter().all(|&v| v == 0.5));
        assert!(m.compose(&img, &img).unwrap().view().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoders_shapes_and_errors() {
        let m = Model::init(small_config(32)).unwrap();
        let img = procedural_background(64, 96, 3, 3);
        let pyr = m.encode(&img).unwrap();
        let (b, feats) = m.decode_background(&pyr).unwrap();
        assert_eq!(b.dim(), (64, 96, 3));
        let r = m.decode_rain(&pyr, &feats).unwrap();
        assert_eq!(r.dim(), (64, 96, 3));
        assert!(b.view().iter().chain(r.view().iter()).all(|&v| v > 0.0 && v < 1.0));

        let other = m.encode(&procedural_background(32, 32, 3, 3)).unwrap();
        let (_, small_feats) = m.decode_background(&other).unwrap();
        assert!(matches!(m.decode_rain(&pyr, &small_feats), Err(Error::ShapeInconsistency(_))));
        let mut broken = pyr.clone();
        broken.levels.swap(0, 1);
        assert!(matches!(m.decode_background(&broken), Err(Error::ShapeInconsistency(_))));
    }

    #[test]
    fn discriminator_rejects_other_sizes() {
        let m = Model::init(small_config(64)).unwrap();
        assert_eq!(m.discriminate(&procedural_background(64, 64, 3, 0)).unwrap().dim(), (6, 6));
        assert!(matches!(m.discriminate(&procedural_background(32, 32, 3, 0)), Err(Error::WrongInputSize { .. })));
    }

    #[test]
    fn derain_pads_and_skips_other_branches() {
        let m = Model::init(small_config(32)).unwrap();
        let img = procedural_background(50, 41, 3, 5);
        let out = m.derain(&img).unwrap();
        assert_eq!(out.dim(), (50, 41, 3));
        let c = m.counters().snapshot();
        assert_eq!((c.encoder, c.background_decoder), (1, 1));
        assert_eq!((c.rain_decoder, c.composition, c.discriminator), (0, 0, 0));

        let img = procedural_background(64, 32, 3, 6);
        assert_eq!(m.derain(&img).unwrap(), m.forward_full(&img).unwrap().0);
    }

    #[test]
    fn reflect_padding_mirrors_edges() {
        let x = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, y, x)| (y * 3 + x) as f32);
        let p = reflect_pad(&x, 4, 5);
        assert_eq!(p[[0, 0, 0, 3]], x[[0, 0, 0, 1]]);
        assert_eq!(p[[0, 0, 2, 0]], x[[0, 0, 0, 0]]);
        assert_eq!(p[[0, 0, 3, 4]], x[[0, 0, 1, 0]]);
        assert_eq!(reflect_index(7, 1), 0);
    }

    /// Parameter gradients of the full tape against central differences of a
    /// scalar objective.
    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = small_config(32);
        let mut model = Model::init(cfg).unwrap();
        let x = image_to_nchw(&procedural_background(32, 32, 3, 7));
        let objective = |m: &Model| -> f64 {
            let mut g = Graph::new(&m.weights);
            let v = m.build_full(&mut g, x.clone()).unwrap();
            [v.background, v.rain, v.recomposed]
                .iter()
                .enumerate()
                .map(|(k, &var)| g.value(var).iter().map(|&p| (k as f64 + 1.0) * (p as f64).powi(2)).sum::<f64>())
                .sum()
        };
        let grads = {
            let mut g = Graph::new(&model.weights);
            let v = model.build_full(&mut g, x.clone()).unwrap();
            let seed = |var: Var, k: f32| (var, g.value(var).mapv(|p| 2.0 * k * p));
            let seeds = vec![seed(v.background, 1.0), seed(v.rain, 2.0), seed(v.recomposed, 3.0)];
            g.backward(seeds).params
        };
        for (layer, idx) in [
            ("enc1.conv_a", (0, 0, 1, 1)),
            ("enc3.conv_b", (2, 1, 0, 2)),
            ("dec_b5.conv", (1, 2, 2, 2)),
            ("dec_r2.conv", (0, 9, 1, 1)),
            ("dec_r.head", (2, 0, 1, 0)),
            ("comp.conv1", (3, 4, 1, 1)),
        ] {
            let eps = 2e-3f32;
            let analytic = grads.get(layer).unwrap().weight[idx] as f64;
            let orig = model.weights.get(layer).unwrap().weight[idx];
            model.weights.get_mut(layer).unwrap().weight[idx] = orig + eps;
            let fp = objective(&model);
            model.weights.get_mut(layer).unwrap().weight[idx] = orig - eps;
            let fm = objective(&model);
            model.weights.get_mut(layer).unwrap().weight[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps as f64);
            assert!(
                (fd - analytic).abs() <= 2e-2 * fd.abs().max(analytic.abs()) + 1e-2,
                "{layer}{idx:?}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}
