//! HU windowing, center cropping and average downsampling of 8-bit frames.

use crate::error::{Error, Result};

/// Intensity window in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { center: 50.0, width: 200.0 }
    }
}

impl WindowSpec {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::Config(format!("window width must be positive, got {width}")));
        }
        Ok(Self { center, width })
    }

    /// One HU value to a pixel, rounding halves up.
    pub fn apply(&self, hu: f64) -> u8 {
        let lo = self.center - self.width / 2.0;
        let t = ((hu - lo) / self.width).clamp(0.0, 1.0);
        if t.is_nan() {
            return 0;
        }
        (255.0 * t + 0.5).floor() as u8
    }
}

pub fn hu_window(hu: &[f32], w: WindowSpec) -> Vec<u8> {
    hu.iter().map(|&v| w.apply(v as f64)).collect()
}

/// Row-major 8-bit grayscale frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Data(format!("{height}x{width} image with {} pixels", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Self { height, width, pixels: vec![v; height * width] }
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Top-left corner of a centered `h`×`w` window.
pub fn crop_offset(img: &Image, h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h > img.height || w > img.width {
        return Err(Error::Config(format!("cannot crop {h}x{w} out of {}x{}", img.height, img.width)));
    }
    Ok(((img.height - h) / 2, (img.width - w) / 2))
}

pub fn center_crop(img: &Image, h: usize, w: usize) -> Result<Image> {
    let (r0, c0) = crop_offset(img, h, w)?;
    let mut pixels = Vec::with_capacity(h * w);
    for r in r0..r0 + h {
        pixels.extend_from_slice(&img.pixels[r * img.width + c0..r * img.width + c0 + w]);
    }
    Image::new(h, w, pixels)
}

/// Writes `crop` back into a copy of `base` at the centered offset.
pub fn embed_center(base: &Image, crop: &Image) -> Result<Image> {
    let (r0, c0) = crop_offset(base, crop.height, crop.width)?;
    let mut out = base.clone();
    for r in 0..crop.height {
        let dst = (r0 + r) * base.width + c0;
        out.pixels[dst..dst + crop.width].copy_from_slice(&crop.pixels[r * crop.width..(r + 1) * crop.width]);
    }
    Ok(out)
}

/// Mean over non-overlapping `factor`×`factor` blocks, rounded half up.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::Config(format!("{}x{} is not divisible by {factor}", img.height, img.width)));
    }
    let (h, w) = (img.height / factor, img.width / factor);
    let area = (factor * factor) as u32;
    let mut pixels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0u32;
            for dr in 0..factor {
                let row = (r * factor + dr) * img.width + c * factor;
                sum += img.pixels[row..row + factor].iter().map(|&p| p as u32).sum::<u32>();
            }
            pixels.push(((2 * sum + area) / (2 * area)) as u8);
        }
    }
    Image::new(h, w, pixels)
}

/// Center crop to `crop`×`crop`, then average down by `factor`.
pub fn prepare_frame(img: &Image, crop: usize, factor: usize) -> Result<Image> {
    downsample(&center_crop(img, crop, crop)?, factor)
}
