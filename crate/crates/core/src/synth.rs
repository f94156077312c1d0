//! Procedural test scenes: a 4-band HRMS with smooth gradients, rectangles and
//! band-correlated texture, plus a PAN derived from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Result};
use crate::raster::MultiBandImage;

pub const SYNTH_BANDS: usize = 4;
pub const PAN_WEIGHT: f64 = 0.25;
pub const PAN_GAMMA: f64 = 0.9;
const LO: f64 = 0.02;
const HI: f64 = 0.98;

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub hrms: MultiBandImage,
    pub pan: MultiBandImage,
}

/// `(0.25 * sum of bands) ^ 0.9` per pixel.
pub fn synth_pan(hrms: &MultiBandImage) -> MultiBandImage {
    let n = hrms.pixels();
    let mut pan = MultiBandImage::zeros(hrms.width(), hrms.height(), 1).with_source_vmax(hrms.source_vmax());
    for (p, out) in pan.samples_mut().iter_mut().enumerate() {
        let s: f64 = (0..hrms.bands()).map(|b| hrms.samples()[b * n + p]).sum();
        *out = (PAN_WEIGHT * s).powf(PAN_GAMMA);
    }
    pan
}

struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    level: f64,
    tint: [f64; SYNTH_BANDS],
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
    gain: [f64; SYNTH_BANDS],
}

/// Deterministic scene for a seed; every sample lies in `[0.02, 0.98]`.
pub fn synth_scene(width: usize, height: usize, seed: u64) -> Result<SynthScene> {
    if width == 0 || height == 0 {
        return Err(shape("synthetic scene needs a positive size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);

    let ramps: Vec<[f64; 3]> = (0..SYNTH_BANDS)
        .map(|_| [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(0.3..0.6)])
        .collect();
    let rects: Vec<Rect> = (0..10)
        .map(|_| {
            let cx = rng.gen_range(0.0..w);
            let cy = rng.gen_range(0.0..h);
            let rw = rng.gen_range(0.05..0.3) * w;
            let rh = rng.gen_range(0.05..0.3) * h;
            Rect {
                x0: cx - rw / 2.0,
                y0: cy - rh / 2.0,
                x1: cx + rw / 2.0,
                y1: cy + rh / 2.0,
                level: rng.gen_range(-0.3..0.3),
                tint: std::array::from_fn(|_| rng.gen_range(0.6..1.4)),
            }
        })
        .collect();
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let period = rng.gen_range(3.0..12.0);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let k = 2.0 * std::f64::consts::PI / period;
            Wave {
                fx: k * angle.cos(),
                fy: k * angle.sin(),
                phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                amp: rng.gen_range(0.03..0.08),
                gain: std::array::from_fn(|_| rng.gen_range(0.7..1.3)),
            }
        })
        .collect();

    let n = width * height;
    let mut samples = vec![0.0; SYNTH_BANDS * n];
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let p = y * width + x;
            for b in 0..SYNTH_BANDS {
                let [ax, ay, c] = ramps[b];
                let mut v = c + ax * (fx / w - 0.5) + ay * (fy / h - 0.5);
                for r in &rects {
                    if fx >= r.x0 && fx < r.x1 && fy >= r.y0 && fy < r.y1 {
                        v += r.level * r.tint[b];
                    }
                }
                for t in &waves {
                    v += t.amp * t.gain[b] * (t.fx * fx + t.fy * fy + t.phase).sin();
                }
                samples[b * n + p] = v.clamp(LO, HI);
            }
        }
    }
    let hrms = MultiBandImage::from_samples(width, height, SYNTH_BANDS, samples)?;
    let pan = synth_pan(&hrms);
    Ok(SynthScene { hrms, pan })
}

/// Uniform random image, used for benchmarking.
pub fn random_image(width: usize, height: usize, bands: usize, rng: &mut ChaCha8Rng) -> Result<MultiBandImage> {
    let samples = (0..width * height * bands).map(|_| rng.gen::<f64>()).collect();
    MultiBandImage::from_samples(width, height, bands, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_scene(40, 24, 7).unwrap();
        let b = synth_scene(40, 24, 7).unwrap();
        assert_eq!(a.hrms.samples(), b.hrms.samples());
        assert_eq!(a.pan.samples(), b.pan.samples());
        assert!(a.hrms.samples().iter().all(|v| (LO..=HI).contains(v)));
        assert!(a.pan.samples().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = synth_scene(40, 24, 8).unwrap();
        assert_ne!(a.hrms.samples(), c.hrms.samples());
    }

    #[test]
    fn pan_is_gamma_of_band_mean() {
        let s = synth_scene(16, 16, 1).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let m: f64 = (0..4).map(|b| s.hrms.get(b, x, y)).sum::<f64>() * 0.25;
                assert!((s.pan.get(0, x, y) - m.powf(0.9)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scene_has_detail() {
        let s = synth_scene(64, 64, 0).unwrap();
        let band = s.hrms.band(0);
        let mean = band.iter().sum::<f64>() / band.len() as f64;
        let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / band.len() as f64;
        assert!(var > 1e-3);
    }
}
