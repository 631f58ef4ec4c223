//! Float images in height × width × channel layout.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// An H×W×C image with every intensity finite and in `[0, 1]`, `C ∈ {1, 3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidParameter(format!("empty image {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidParameter(format!("{c} channels; expected 1 or 3")));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidParameter(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { data: data.as_standard_layout().into_owned() })
    }

    /// Clamps into `[0, 1]` (NaN becomes 0) instead of rejecting.
    pub fn from_clamped(mut data: Array3<f32>) -> Self {
        let (h, w, c) = data.dim();
        assert!(h > 0 && w > 0 && (c == 1 || c == 3), "bad image shape {h}x{w}x{c}");
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self { data: data.as_standard_layout().into_owned() }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self { data: self.data.slice(s![top..top + height, left..left + width, ..]).to_owned() })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self { data: self.data.slice(s![.., ..;-1, ..]).as_standard_layout().into_owned() }
    }

    /// Replicates a single-channel image to `channels` channels.
    pub fn expand_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels(), channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => {
                let (h, w, _) = self.dim();
                Ok(Self { data: Array3::from_shape_fn((h, w, 3), |(y, x, _)| self.data[[y, x, 0]]) })
            }
            (a, b) => Err(Error::InvalidParameter(format!("cannot expand {a} channels to {b}"))),
        }
    }

    /// Snaps every value onto the 8-bit grid `k / 255`.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.mapv(|v| quantize_u8(v) as f32 / 255.0) }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let decoded = image::open(path)
            .map_err(|e| Error::UndecodableImage { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(Self::from_dynamic(&decoded))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let data = match img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                    g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
                })
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                    rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
                })
            }
        };
        Self { data }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (h, w, c) = self.dim();
        if c == 1 {
            let g = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quantize_u8(self.data[[y as usize, x as usize, 0]])])
            });
            DynamicImage::ImageLuma8(g)
        } else {
            let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = |ch| quantize_u8(self.data[[y as usize, x as usize, ch]]);
                image::Rgb([p(0), p(1), p(2)])
            });
            DynamicImage::ImageRgb8(rgb)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(e)))
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dim() != b.dim() {
        let (ah, aw, ac) = a.dim();
        let (bh, bw, bc) = b.dim();
        return Err(Error::ShapeMismatch { left: vec![ah, aw, ac], right: vec![bh, bw, bc] });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(ImageTensor::filled(2, 2, 3, 1.5).is_err());
        assert!(ImageTensor::filled(2, 2, 2, 0.5).is_err());
        assert!(ImageTensor::filled(0, 2, 3, 0.5).is_err());
        assert!(ImageTensor::new(Array3::from_elem((1, 1, 1), f32::NAN)).is_err());
    }

    #[test]
    fn png_round_trip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 7 + x) * 3 + c) as f32 / 104.0))
            .unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back.dim(), img.dim());
        for (a, b) in img.view().iter().zip(back.view().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn flip_and_crop() {
        let img = ImageTensor::new(Array3::from_shape_fn((2, 3, 1), |(y, x, _)| (y * 3 + x) as f32 / 10.0)).unwrap();
        let f = img.flip_horizontal();
        assert_eq!(f.view()[[0, 0, 0]], img.view()[[0, 2, 0]]);
        let c = img.crop(1, 1, 1, 2).unwrap();
        assert_eq!(c.view()[[0, 0, 0]], 0.4);
        assert!(img.crop(1, 2, 1, 2).is_err());
    }
}
