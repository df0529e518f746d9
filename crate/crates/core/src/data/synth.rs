//! Synthetic subjects: a smooth noisy background with a bright elliptical
//! vein whose minor axis is squeezed on three consecutive frames. Positives
//! are squeezed below half their area, negatives barely at all.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::preprocess::Image;
use super::record::{Modality, SubjectRecord, CLIP_FRAMES};

/// Intensity of vein pixels; the background never reaches it.
pub const VEIN_LEVEL: u8 = 242;
/// Frames (0-based, inclusive) on which the vein is drawn.
pub const VEIN_FRAMES: (usize, usize) = (3, 8);
/// Squeeze factor ranges for each class.
pub const POSITIVE_SQUEEZE: (f64, f64) = (0.2, 0.45);
pub const NEGATIVE_SQUEEZE: (f64, f64) = (0.7, 1.0);

const BACKGROUND: (f64, f64) = (0.3, 0.7);
const GRID: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    /// Frame side length in pixels.
    pub size: usize,
    pub frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 128, frames: CLIP_FRAMES }
    }
}

/// Geometry drawn into one subject, kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct VeinGeometry {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    pub squeeze: f64,
    /// First of the three squeezed frames.
    pub squeeze_start: usize,
}

fn coarse_grid(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..GRID * GRID).map(|_| rng.random_range(BACKGROUND.0..=BACKGROUND.1)).collect()
}

/// Bilinear upsampling of a `GRID`×`GRID` lattice to `size`×`size`.
fn smooth(grid: &[f64], size: usize) -> Vec<f64> {
    let scale = (GRID - 1) as f64 / (size.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = r as f64 * scale;
        let y0 = (y as usize).min(GRID - 2);
        let fy = y - y0 as f64;
        for c in 0..size {
            let x = c as f64 * scale;
            let x0 = (x as usize).min(GRID - 2);
            let fx = x - x0 as f64;
            let g = |i: usize, j: usize| grid[i * GRID + j];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
            let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn inside(geom: &VeinGeometry, minor: f64, r: usize, c: usize) -> bool {
    let (dy, dx) = (r as f64 + 0.5 - geom.center.0, c as f64 + 0.5 - geom.center.1);
    let (s, co) = geom.angle.sin_cos();
    let u = dx * co + dy * s;
    let v = -dx * s + dy * co;
    (u / geom.semi_major).powi(2) + (v / minor).powi(2) <= 1.0
}

pub fn synth_geometry(seed: u64, label: u8, cfg: SynthConfig) -> VeinGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e57);
    let s = cfg.size as f64;
    let jitter = s / 16.0;
    let center = (s / 2.0 + rng.random_range(-jitter..=jitter), s / 2.0 + rng.random_range(-jitter..=jitter));
    let semi_major = s * rng.random_range(0.14..=0.2);
    let semi_minor = s * rng.random_range(0.09..=0.13);
    let angle = rng.random_range(0.0..PI);
    let (lo, hi) = if label == 1 { POSITIVE_SQUEEZE } else { NEGATIVE_SQUEEZE };
    let squeeze = rng.random_range(lo..=hi);
    let squeeze_start = rng.random_range(4..=5);
    VeinGeometry { center, semi_major, semi_minor, angle, squeeze, squeeze_start }
}

pub fn synth_subject_with(seed: u64, label: u8, cfg: SynthConfig) -> SubjectRecord {
    let geom = synth_geometry(seed, label, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = smooth(&coarse_grid(&mut rng), cfg.size);
    let frames = (0..cfg.frames)
        .map(|f| {
            // Each frame blends the shared background with its own field, a
            // convex mix that stays inside the background range.
            let own = smooth(&coarse_grid(&mut rng), cfg.size);
            let mut pixels: Vec<u8> =
                base.iter().zip(&own).map(|(b, o)| (255.0 * (0.8 * b + 0.2 * o)).round() as u8).collect();
            if (VEIN_FRAMES.0..=VEIN_FRAMES.1).contains(&f) {
                let squeezed = (geom.squeeze_start..geom.squeeze_start + 3).contains(&f);
                let minor = if squeezed { geom.semi_minor * geom.squeeze } else { geom.semi_minor };
                for r in 0..cfg.size {
                    for c in 0..cfg.size {
                        if inside(&geom, minor, r, c) {
                            pixels[r * cfg.size + c] = VEIN_LEVEL;
                        }
                    }
                }
            }
            Image { height: cfg.size, width: cfg.size, pixels }
        })
        .collect();
    SubjectRecord { subject_id: format!("synth_{seed}"), frames, label, modality: Modality::Ct }
}

/// A 12-frame 128×128 synthetic subject.
pub fn synth_subject(seed: u64, label: u8) -> SubjectRecord {
    synth_subject_with(seed, label, SynthConfig::default())
}
