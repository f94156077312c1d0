//! Resampling: Catmull-Rom bicubic upsampling and Wald-protocol degradation.
//!
//! Both operators are linear with replicate padding at the borders.

use crate::error::{shape, Error, Result};
use crate::raster::MultiBandImage;

/// Catmull-Rom cubic convolution kernel (a = -0.5).
#[inline]
pub fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Source taps for one output coordinate: first source index and four weights.
#[derive(Debug, Clone, Copy)]
struct Taps {
    first: i64,
    weights: [f64; 4],
}

/// Source coordinate of output pixel `o` under pixel-center alignment.
#[inline]
pub fn source_coord(o: usize, r: usize) -> f64 {
    (o as f64 + 0.5) / r as f64 - 0.5
}

fn taps_for(out_len: usize, r: usize) -> Vec<Taps> {
    (0..out_len)
        .map(|o| {
            let s = source_coord(o, r);
            let i0 = s.floor();
            let t = s - i0;
            Taps {
                first: i0 as i64 - 1,
                weights: [
                    catmull_rom(t + 1.0),
                    catmull_rom(t),
                    catmull_rom(1.0 - t),
                    catmull_rom(2.0 - t),
                ],
            }
        })
        .collect()
}

#[inline]
fn clamp_index(i: i64, len: usize) -> usize {
    i.clamp(0, len as i64 - 1) as usize
}

/// Bicubic upsampler that can produce any band-complete row range of the output.
///
/// The horizontal pass runs once over every source row at construction; each
/// output row is then a fixed 4-tap vertical combination, so a row computed
/// through [`rows`](Self::rows) is bit-identical no matter which range it was
/// requested in.
pub struct BicubicUpsampler {
    bands: usize,
    src_h: usize,
    out_w: usize,
    out_h: usize,
    taps_y: Vec<Taps>,
    /// bands x src_h x out_w
    horizontal: Vec<f64>,
    source_vmax: u32,
}

impl BicubicUpsampler {
    pub fn new(ms: &MultiBandImage, r: usize) -> Result<Self> {
        if r < 2 {
            return Err(Error::Domain(format!("upsampling ratio must be >= 2, got {r}")));
        }
        let (src_w, src_h) = (ms.width(), ms.height());
        let out_w = src_w * r;
        let out_h = src_h * r;
        let taps_x = taps_for(out_w, r);
        let mut horizontal = vec![0.0; ms.bands() * src_h * out_w];
        for b in 0..ms.bands() {
            let band = ms.band(b);
            for y in 0..src_h {
                let src = &band[y * src_w..(y + 1) * src_w];
                let dst = &mut horizontal[(b * src_h + y) * out_w..(b * src_h + y + 1) * out_w];
                for (d, t) in dst.iter_mut().zip(&taps_x) {
                    let v: [f64; 4] = std::array::from_fn(|k| src[clamp_index(t.first + k as i64, src_w)]);
                    *d = anchored_sum(&t.weights, &v);
                }
            }
        }
        Ok(Self {
            bands: ms.bands(),
            src_h,
            out_w,
            out_h,
            taps_y: taps_for(out_h, r),
            horizontal,
            source_vmax: ms.source_vmax(),
        })
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.out_w, self.out_h)
    }

    /// Output rows `y0..y1` for every band.
    pub fn rows(&self, y0: usize, y1: usize) -> MultiBandImage {
        assert!(y0 < y1 && y1 <= self.out_h, "row range {y0}..{y1} of {}", self.out_h);
        let rows = y1 - y0;
        let w = self.out_w;
        let mut out = vec![0.0; self.bands * rows * w];
        for b in 0..self.bands {
            let plane = &self.horizontal[b * self.src_h * w..(b + 1) * self.src_h * w];
            for (ry, y) in (y0..y1).enumerate() {
                let t = &self.taps_y[y];
                let dst = &mut out[(b * rows + ry) * w..(b * rows + ry + 1) * w];
                let src_rows: [&[f64]; 4] = std::array::from_fn(|k| {
                    let sy = clamp_index(t.first + k as i64, self.src_h);
                    &plane[sy * w..(sy + 1) * w]
                });
                for (x, d) in dst.iter_mut().enumerate() {
                    let v: [f64; 4] = std::array::from_fn(|k| src_rows[k][x]);
                    *d = anchored_sum(&t.weights, &v);
                }
            }
        }
        MultiBandImage::from_samples(w, rows, self.bands, out)
            .expect("row range is non-empty")
            .with_source_vmax(self.source_vmax)
    }

    pub fn full(&self) -> MultiBandImage {
        self.rows(0, self.out_h)
    }
}

/// `sum_k w_k v_k` written as `v_1 + sum_k w_k (v_k - v_1)`, which equals it
/// because the taps sum to one and reproduces a constant exactly.
#[inline]
fn anchored_sum(w: &[f64; 4], v: &[f64; 4]) -> f64 {
    let c = v[1];
    c + (w[0] * (v[0] - c) + w[2] * (v[2] - c) + w[3] * (v[3] - c))
}

/// Upsamples by an integer factor with a separable Catmull-Rom kernel.
pub fn upsample_bicubic(ms: &MultiBandImage, r: usize) -> Result<MultiBandImage> {
    Ok(BicubicUpsampler::new(ms, r)?.full())
}

/// Adjoint of [`upsample_bicubic`]: maps a gradient at the upsampled
/// resolution back onto the `src_w x src_h` grid.
pub fn upsample_bicubic_adjoint(
    grad: &MultiBandImage,
    src_w: usize,
    src_h: usize,
    r: usize,
) -> Result<MultiBandImage> {
    if r < 2 {
        return Err(Error::Domain(format!("upsampling ratio must be >= 2, got {r}")));
    }
    if grad.width() != src_w * r || grad.height() != src_h * r {
        return Err(shape(format!(
            "gradient {}x{} does not match {src_w}x{src_h} at ratio {r}",
            grad.width(),
            grad.height()
        )));
    }
    let (out_w, out_h) = (grad.width(), grad.height());
    let taps_x = taps_for(out_w, r);
    let taps_y = taps_for(out_h, r);
    let mut result = MultiBandImage::zeros(src_w, src_h, grad.bands());
    let mut horizontal = vec![0.0; src_h * out_w];
    for b in 0..grad.bands() {
        horizontal.iter_mut().for_each(|v| *v = 0.0);
        let g = grad.band(b);
        for (y, t) in taps_y.iter().enumerate() {
            let row = &g[y * out_w..(y + 1) * out_w];
            for (k, w) in t.weights.iter().enumerate() {
                let sy = clamp_index(t.first + k as i64, src_h);
                let dst = &mut horizontal[sy * out_w..(sy + 1) * out_w];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        let dst = result.band_mut(b);
        for sy in 0..src_h {
            let row = &horizontal[sy * out_w..(sy + 1) * out_w];
            for (x, t) in taps_x.iter().enumerate() {
                for (k, w) in t.weights.iter().enumerate() {
                    let sx = clamp_index(t.first + k as i64, src_w);
                    dst[sy * src_w + sx] += w * row[x];
                }
            }
        }
    }
    Ok(result)
}

/// Normalized Gaussian taps with `sigma = r / 4`, truncated at three sigma.
pub fn wald_gaussian_kernel(r: usize) -> Vec<f64> {
    let sigma = r as f64 / 4.0;
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Gaussian pre-blur followed by an `r x r` box average, per band.
pub fn degrade(img: &MultiBandImage, r: usize) -> Result<MultiBandImage> {
    if r < 2 {
        return Err(Error::Domain(format!("degradation ratio must be >= 2, got {r}")));
    }
    let (w, h) = (img.width(), img.height());
    if w % r != 0 || h % r != 0 {
        return Err(shape(format!("{w}x{h} is not divisible by {r}")));
    }
    let kernel = wald_gaussian_kernel(r);
    let radius = (kernel.len() / 2) as i64;
    let (ow, oh) = (w / r, h / r);
    let mut out = MultiBandImage::zeros(ow, oh, img.bands()).with_source_vmax(img.source_vmax());
    let mut tmp = vec![0.0; w * h];
    let mut blurred = vec![0.0; w * h];
    let inv_area = 1.0 / (r * r) as f64;
    for b in 0..img.bands() {
        let src = img.band(b);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kw) in kernel.iter().enumerate() {
                    let sx = clamp_index(x as i64 + k as i64 - radius, w);
                    acc += kw * src[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kw) in kernel.iter().enumerate() {
                    let sy = clamp_index(y as i64 + k as i64 - radius, h);
                    acc += kw * tmp[sy * w + x];
                }
                blurred[y * w + x] = acc;
            }
        }
        let dst = out.band_mut(b);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..r {
                    let row = &blurred[(oy * r + dy) * w + ox * r..(oy * r + dy) * w + ox * r + r];
                    acc += row.iter().sum::<f64>();
                }
                dst[oy * ow + ox] = acc * inv_area;
            }
        }
    }
    Ok(out)
}

/// Degrades a co-registered HRMS/PAN pair by `r`, returning `(ms_low, pan_low)`.
pub fn wald_degrade(
    hrms: &MultiBandImage,
    pan: &MultiBandImage,
    r: usize,
) -> Result<(MultiBandImage, MultiBandImage)> {
    if !hrms.same_dims(pan) {
        return Err(shape(format!(
            "HRMS {}x{} and PAN {}x{} differ in size",
            hrms.width(),
            hrms.height(),
            pan.width(),
            pan.height()
        )));
    }
    Ok((degrade(hrms, r)?, degrade(pan, r)?))
}
