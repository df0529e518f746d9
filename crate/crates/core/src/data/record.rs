use std::fmt;
use std::str::FromStr;

use super::preprocess::{downsample, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_FRAMES: usize = 10;
pub const MAX_FRAMES: usize = 12;
pub const CLIP_FRAMES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Modality {
    #[default]
    Ct,
    EnhancedCt,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "ct",
            Modality::EnhancedCt => "enhanced_ct",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ct" => Ok(Modality::Ct),
            "enhanced_ct" => Ok(Modality::EnhancedCt),
            other => Err(Error::Data(format!("unknown modality {other:?}"))),
        }
    }
}

/// One scanned subject: an ordered stack of frames and its binary label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub frames: Vec<Image>,
    pub label: u8,
    pub modality: Modality,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!("{}: label {} is not 0 or 1", self.subject_id, self.label)));
        }
        let n = self.frames.len();
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&n) {
            return Err(Error::Data(format!(
                "{}: {n} frames, expected {MIN_FRAMES} to {MAX_FRAMES}",
                self.subject_id
            )));
        }
        let (h, w) = (self.frames[0].height, self.frames[0].width);
        if let Some(f) = self.frames.iter().find(|f| (f.height, f.width) != (h, w)) {
            return Err(Error::Data(format!(
                "{}: mixed frame sizes {h}x{w} and {}x{}",
                self.subject_id, f.height, f.width
            )));
        }
        Ok(())
    }
}

/// A fixed-length stack of 8-bit frames, ready to be fed to the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Clip {
    /// Pads short records by repeating their last frame.
    pub fn assemble(record: &SubjectRecord, frames: usize) -> Result<Self> {
        record.validate()?;
        if frames < record.frames.len() {
            return Err(Error::Data(format!(
                "{}: {} frames do not fit a {frames}-frame clip",
                record.subject_id,
                record.frames.len()
            )));
        }
        let last = record.frames.last().expect("validated");
        let (height, width) = (last.height, last.width);
        let mut pixels = Vec::with_capacity(frames * height * width);
        for i in 0..frames {
            pixels.extend_from_slice(&record.frames.get(i).unwrap_or(last).pixels);
        }
        Ok(Self { frames, height, width, pixels })
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn frame(&self, i: usize) -> Image {
        let n = self.height * self.width;
        Image { height: self.height, width: self.width, pixels: self.pixels[i * n..(i + 1) * n].to_vec() }
    }

    /// Averages each frame down by `factor`.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let mut out = Vec::new();
        let (mut h, mut w) = (0, 0);
        for i in 0..self.frames {
            let f = downsample(&self.frame(i), factor)?;
            (h, w) = (f.height, f.width);
            out.extend(f.pixels);
        }
        Ok(Self { frames: self.frames, height: h, width: w, pixels: out })
    }

    /// Writes `pixel / 255` into `out`.
    pub fn write_unit(&self, out: &mut [f32]) {
        for (o, &p) in out.iter_mut().zip(&self.pixels) {
            *o = p as f32 / 255.0;
        }
    }

    /// `[1, L, H, W]` in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut data = vec![0.0; self.pixels.len()];
        self.write_unit(&mut data);
        Tensor::new(&[1, self.frames, self.height, self.width], data).expect("sized from extents")
    }
}

pub fn assemble_clip(record: &SubjectRecord, frames: usize) -> Result<Tensor<f32>> {
    Ok(Clip::assemble(record, frames)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize) -> SubjectRecord {
        SubjectRecord {
            subject_id: "s".into(),
            frames: (0..n).map(|i| Image::filled(2, 3, 10 * i as u8 + 5)).collect(),
            label: 1,
            modality: Modality::Ct,
        }
    }

    #[test]
    fn twelve_frames_unchanged() {
        let t = assemble_clip(&record(12), 12).unwrap();
        assert_eq!(t.dims(), &[1, 12, 2, 3]);
        for i in 0..12 {
            assert_eq!(t.at(&[0, i, 1, 2]), (10 * i + 5) as f32 / 255.0);
        }
    }

    #[test]
    fn short_records_repeat_the_last_frame() {
        let t = assemble_clip(&record(10), 12).unwrap();
        for i in 9..12 {
            assert_eq!(t.at(&[0, i, 0, 0]), 95.0 / 255.0);
        }
    }

    #[test]
    fn zero_frames_give_zero_clip() {
        let mut r = record(11);
        r.frames.iter_mut().for_each(|f| f.pixels.fill(0));
        assert!(assemble_clip(&r, 12).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_records() {
        assert!(matches!(assemble_clip(&record(9), 12), Err(Error::Data(_))));
        assert!(matches!(assemble_clip(&record(13), 12), Err(Error::Data(_))));
        let mut r = record(12);
        r.label = 2;
        assert!(matches!(assemble_clip(&r, 12), Err(Error::Data(_))));
        let mut r = record(12);
        r.frames[3] = Image::filled(3, 3, 0);
        assert!(matches!(assemble_clip(&r, 12), Err(Error::Data(_))));
    }

    #[test]
    fn full_range_maps_to_unit_interval() {
        let mut r = record(12);
        r.frames[0].pixels = vec![0, 255, 128, 1, 254, 3];
        let t = assemble_clip(&r, 12).unwrap();
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t.at(&[0, 0, 0, 1]), 1.0);
    }
}
