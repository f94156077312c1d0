//! Reference metrics (PSNR, SSIM, SAM, ERGAS) and the no-reference QNR suite.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::raster::MultiBandImage;
use crate::resample::degrade;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const Q_BLOCK: usize = 32;

fn check_pair(a: &MultiBandImage, b: &MultiBandImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.bands(),
            b.width(),
            b.height(),
            b.bands()
        )));
    }
    if a.samples().is_empty() {
        return Err(shape("empty images"));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &MultiBandImage, gt: &MultiBandImage) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.samples().len() as f64;
    let mse = pred
        .samples()
        .iter()
        .zip(gt.samples())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable Gaussian filter of one plane.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let s = &src[y * w + x..y * w + x + SSIM_WINDOW];
            rows[y * ow + x] = s.iter().zip(taps).map(|(a, t)| a * t).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions, averaged over bands.
pub fn ssim(pred: &MultiBandImage, gt: &MultiBandImage) -> Result<f64> {
    check_pair(pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let taps = ssim_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for b in 0..pred.bands() {
        let x = pred.band(b);
        let y = gt.band(b);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(x, w, h, &taps);
        let my = filter_valid(y, w, h, &taps);
        let sxx = filter_valid(&xx, w, h, &taps);
        let syy = filter_valid(&yy, w, h, &taps);
        let sxy = filter_valid(&xy, w, h, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / pred.bands() as f64)
}

/// Mean spectral angle in radians, skipping pixels where either spectrum is zero.
pub fn sam(pred: &MultiBandImage, gt: &MultiBandImage) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.bands() < 2 {
        return Err(shape("SAM needs at least 2 bands"));
    }
    let n = pred.pixels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for b in 0..pred.bands() {
            let x = pred.band(b)[p];
            let y = gt.band(b)[p];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        sum += (dot / (na * nb).sqrt()).clamp(-1.0, 1.0).acos();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("SAM: every pixel has a zero spectrum".into()));
    }
    Ok(sum / count as f64)
}

/// `100 / r * sqrt(mean_b (RMSE_b / mean(gt_b))^2)`.
pub fn ergas(pred: &MultiBandImage, gt: &MultiBandImage, r: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    if r == 0 {
        return Err(Error::Domain("ERGAS ratio must be positive".into()));
    }
    let n = pred.pixels() as f64;
    let mut acc = 0.0;
    for b in 0..pred.bands() {
        let g = gt.band(b);
        let mu = g.iter().sum::<f64>() / n;
        if mu == 0.0 {
            return Err(Error::UndefinedMetric(format!("ERGAS: band {b} of the reference has zero mean")));
        }
        let mse = pred.band(b).iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / r as f64 * (acc / pred.bands() as f64).sqrt())
}

/// Universal image quality index of one block given as row slices.
fn q_block(a: &[f64], b: &[f64], w: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> f64 {
    let n = (bw * bh) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            sa += a[y * w + x];
            sb += b[y * w + x];
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let first = (a[y0 * w + x0], b[y0 * w + x0]);
    let (mut const_a, mut const_b) = (true, true);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            const_a &= a[y * w + x] == first.0;
            const_b &= b[y * w + x] == first.1;
        }
    }
    if const_a && const_b {
        return 1.0;
    }
    if const_a || const_b {
        return 0.0;
    }
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let da = a[y * w + x] - ma;
            let db = b[y * w + x] - mb;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
    let den = (vaa + vbb) * (ma * ma + mb * mb);
    if den == 0.0 {
        return 0.0;
    }
    4.0 * vab * ma * mb / den
}

/// Mean Q index over non-overlapping `block x block` tiles of two planes.
/// Partial tiles at the right and bottom are dropped; an image smaller than
/// one tile is treated as a single tile.
pub fn q_index(a: &[f64], b: &[f64], width: usize, height: usize, block: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != a.len() || a.is_empty() {
        return Err(shape("Q index planes must match the given size"));
    }
    if block == 0 {
        return Err(Error::Domain("Q block size must be positive".into()));
    }
    if width < block || height < block {
        return Ok(q_block(a, b, width, 0, 0, width, height));
    }
    let (nx, ny) = (width / block, height / block);
    let mut acc = 0.0;
    for by in 0..ny {
        for bx in 0..nx {
            acc += q_block(a, b, width, bx * block, by * block, block, block);
        }
    }
    Ok(acc / (nx * ny) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QnrReport {
    pub d_lambda: f64,
    pub d_s: f64,
    pub qnr: f64,
}

/// Block size used for Q at MS resolution.
pub fn low_res_block(block: usize, r: usize) -> usize {
    (block / r.max(1)).max(2)
}

/// Spectral distortion, spatial distortion and QNR with unit exponents.
pub fn qnr_suite(
    fused: &MultiBandImage,
    ms: &MultiBandImage,
    pan: &MultiBandImage,
    r: usize,
    block: usize,
) -> Result<QnrReport> {
    if pan.bands() != 1 || !fused.same_dims(pan) {
        return Err(shape("fused image must be at PAN size and PAN must have 1 band"));
    }
    if ms.bands() != fused.bands() || ms.width() * r != fused.width() || ms.height() * r != fused.height() {
        return Err(shape(format!(
            "MS {}x{}x{} is not the 1/{r} scale of fused {}x{}x{}",
            ms.width(),
            ms.height(),
            ms.bands(),
            fused.width(),
            fused.height(),
            fused.bands()
        )));
    }
    let c = fused.bands();
    if c < 2 {
        return Err(shape("QNR needs at least 2 bands"));
    }
    let (fw, fh) = (fused.width(), fused.height());
    let (mw, mh) = (ms.width(), ms.height());
    let low_block = low_res_block(block, r);

    let mut d_lambda = 0.0;
    for i in 0..c {
        for j in i + 1..c {
            let qf = q_index(fused.band(i), fused.band(j), fw, fh, block)?;
            let qm = q_index(ms.band(i), ms.band(j), mw, mh, low_block)?;
            d_lambda += 2.0 * (qf - qm).abs();
        }
    }
    d_lambda /= (c * (c - 1)) as f64;

    let pan_low = degrade(pan, r)?;
    let mut d_s = 0.0;
    for i in 0..c {
        let qf = q_index(fused.band(i), pan.band(0), fw, fh, block)?;
        let qm = q_index(ms.band(i), pan_low.band(0), mw, mh, low_block)?;
        d_s += (qf - qm).abs();
    }
    d_s /= c as f64;
    Ok(QnrReport {
        d_lambda,
        d_s,
        qnr: (1.0 - d_lambda) * (1.0 - d_s),
    })
}

/// Metrics from one evaluation. Reduced-resolution runs fill the first four
/// fields, full-resolution runs the last three.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub sam: Option<f64>,
    pub ergas: Option<f64>,
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub qnr: Option<f64>,
}

impl EvalReport {
    pub const KEYS: [&'static str; 7] = ["psnr", "ssim", "sam", "ergas", "d_lambda", "d_s", "qnr"];

    pub fn reduced(pred: &MultiBandImage, gt: &MultiBandImage, r: usize) -> Result<Self> {
        Ok(Self {
            psnr: Some(psnr(pred, gt)?),
            ssim: Some(ssim(pred, gt)?),
            sam: Some(sam(pred, gt)?),
            ergas: Some(ergas(pred, gt, r)?),
            ..Self::default()
        })
    }

    pub fn full(fused: &MultiBandImage, ms: &MultiBandImage, pan: &MultiBandImage, r: usize, block: usize) -> Result<Self> {
        let q = qnr_suite(fused, ms, pan, r, block)?;
        Ok(Self {
            d_lambda: Some(q.d_lambda),
            d_s: Some(q.d_s),
            qnr: Some(q.qnr),
            ..Self::default()
        })
    }

    pub fn values(&self) -> [Option<f64>; 7] {
        [self.psnr, self.ssim, self.sam, self.ergas, self.d_lambda, self.d_s, self.qnr]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn tsv_header() -> String {
        Self::KEYS.join("\t")
    }

    /// Tab-separated values in [`KEYS`](Self::KEYS) order; absent metrics print as `NA`.
    pub fn to_tsv(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.10}")))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> MultiBandImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..w * h * c).map(|_| rng.gen_range(0.05..1.0)).collect();
        MultiBandImage::from_samples(w, h, c, s).unwrap()
    }

    fn noisy(img: &MultiBandImage, amp: f64, seed: u64) -> MultiBandImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = img.clone();
        for v in out.samples_mut() {
            *v += amp * (rng.gen::<f64>() - 0.5);
        }
        out
    }

    #[test]
    fn identical_images() {
        let a = random_image(16, 16, 4, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sam(&a, &a).unwrap(), 0.0);
        assert_eq!(ergas(&a, &a, 4).unwrap(), 0.0);
    }

    #[test]
    fn closed_forms() {
        let gt = MultiBandImage::filled(4, 4, 1, 0.5);
        let pred = MultiBandImage::filled(4, 4, 1, 0.6);
        assert!((psnr(&pred, &gt).unwrap() - 20.0).abs() < 1e-9);
        let pred = MultiBandImage::filled(4, 4, 1, 0.55);
        assert!((ergas(&pred, &gt, 4).unwrap() - 2.5).abs() < 1e-12);
        let a = random_image(5, 5, 4, 2);
        let mut b = a.clone();
        b.samples_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert!(sam(&b, &a).unwrap() < 1e-7);
    }

    #[test]
    fn ssim_sign_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..256).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let a = MultiBandImage::from_samples(16, 16, 1, s.clone()).unwrap();
        let b = MultiBandImage::from_samples(16, 16, 1, s.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
        let small = MultiBandImage::zeros(10, 20, 1);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn undefined_metrics() {
        let z = MultiBandImage::zeros(3, 3, 4);
        assert!(matches!(sam(&z, &z), Err(Error::UndefinedMetric(_))));
        assert!(matches!(ergas(&z, &z, 4), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ergas_is_asymmetric() {
        let a = random_image(8, 8, 4, 4);
        let b = noisy(&a, 0.3, 5);
        assert_ne!(ergas(&a, &b, 4).unwrap(), ergas(&b, &a, 4).unwrap());
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn monotone_in_noise() {
        let gt = random_image(24, 24, 4, 6);
        let mut last: Option<(f64, f64, f64, f64)> = None;
        for amp in [0.05, 0.1, 0.2] {
            let p = noisy(&gt, amp, 7);
            let m = (
                psnr(&p, &gt).unwrap(),
                ssim(&p, &gt).unwrap(),
                sam(&p, &gt).unwrap(),
                ergas(&p, &gt, 4).unwrap(),
            );
            if let Some(l) = last {
                assert!(m.0 < l.0 && m.1 < l.1 && m.2 > l.2 && m.3 > l.3);
            }
            last = Some(m);
        }
    }

    #[test]
    fn q_conventions() {
        let c = vec![0.4; 16];
        let d = vec![0.7; 16];
        assert_eq!(q_index(&c, &d, 4, 4, 4).unwrap(), 1.0);
        let v: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        assert_eq!(q_index(&c, &v, 4, 4, 4).unwrap(), 0.0);
        assert!((q_index(&v, &v, 4, 4, 4).unwrap() - 1.0).abs() < 1e-12);
        // Smaller than a block: one whole-image block.
        assert_eq!(q_index(&v, &v, 4, 4, 32).unwrap(), q_index(&v, &v, 4, 4, 4).unwrap());
    }

    #[test]
    fn constant_bands_give_perfect_qnr() {
        let ms = MultiBandImage::from_samples(
            8,
            8,
            4,
            (0..4).flat_map(|b| std::iter::repeat_n(0.2 + 0.1 * b as f64, 64)).collect(),
        )
        .unwrap();
        let fused = crate::resample::upsample_bicubic(&ms, 4).unwrap();
        let pan = MultiBandImage::filled(32, 32, 1, 0.5);
        let q = qnr_suite(&fused, &ms, &pan, 4, 32).unwrap();
        assert_eq!((q.d_lambda, q.d_s, q.qnr), (0.0, 0.0, 1.0));
    }

    #[test]
    fn report_serialization() {
        let a = random_image(16, 16, 4, 8);
        let r = EvalReport::reduced(&a, &a, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 7);
        for k in EvalReport::KEYS {
            assert!(v.get(k).is_some());
        }
        assert_eq!(v["psnr"], 100.0);
        assert!(v["qnr"].is_null());
        assert_eq!(r.to_tsv().split('\t').count(), 7);
    }
}
