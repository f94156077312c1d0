//! Planar multi-band rasters in the normalized `[0, 1]` sample domain.
//!
//! Samples are stored band-sequential: bands outermost, then rows, then
//! columns. Every image carries the integer full-scale value it was ingested
//! from so it can be written back at the original bit depth.

use crate::error::{shape, Error, Result};

/// A `C`-band raster of normalized samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandImage {
    width: usize,
    height: usize,
    bands: usize,
    samples: Vec<f64>,
    source_vmax: u32,
}

/// Integer spatial resolution ratio between PAN and MS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalePair {
    ratio: usize,
}

impl ScalePair {
    pub const DEFAULT_RATIO: usize = 4;

    pub fn new(ratio: usize) -> Result<Self> {
        if ratio < 2 {
            return Err(Error::Domain(format!("resolution ratio must be >= 2, got {ratio}")));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(self) -> usize {
        self.ratio
    }

    /// Checks that `pan` is exactly `ratio` times `ms` along both axes.
    pub fn check_pair(self, pan: &MultiBandImage, ms: &MultiBandImage) -> Result<()> {
        if pan.width != ms.width * self.ratio || pan.height != ms.height * self.ratio {
            return Err(shape(format!(
                "PAN {}x{} is not {}x the MS {}x{}",
                pan.width, pan.height, self.ratio, ms.width, ms.height
            )));
        }
        Ok(())
    }

    /// Infers the ratio from a PAN/MS pair, requiring an integer ratio shared by both axes.
    pub fn infer(pan: &MultiBandImage, ms: &MultiBandImage) -> Result<Self> {
        if ms.width == 0 || ms.height == 0 {
            return Err(shape("empty MS image"));
        }
        if !pan.width.is_multiple_of(ms.width) || !pan.height.is_multiple_of(ms.height) {
            return Err(shape(format!(
                "PAN {}x{} / MS {}x{} is not an integer ratio",
                pan.width, pan.height, ms.width, ms.height
            )));
        }
        let rx = pan.width / ms.width;
        let ry = pan.height / ms.height;
        if rx != ry {
            return Err(shape(format!("anisotropic ratio {rx}x{ry}")));
        }
        Ok(Self { ratio: rx })
    }
}

impl Default for ScalePair {
    fn default() -> Self {
        Self {
            ratio: Self::DEFAULT_RATIO,
        }
    }
}

impl MultiBandImage {
    /// Zero-filled image. `source_vmax` defaults to 2047 (11-bit sensors).
    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        Self {
            width,
            height,
            bands,
            samples: vec![0.0; width * height * bands],
            source_vmax: 2047,
        }
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: f64) -> Self {
        Self {
            samples: vec![value; width * height * bands],
            ..Self::zeros(width, height, bands)
        }
    }

    pub fn from_samples(
        width: usize,
        height: usize,
        bands: usize,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape(format!("degenerate image {width}x{height}")));
        }
        if samples.len() != width * height * bands {
            return Err(shape(format!(
                "{} samples for a {width}x{height}x{bands} image",
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            samples,
            source_vmax: 2047,
        })
    }

    pub fn with_source_vmax(mut self, vmax: u32) -> Self {
        self.source_vmax = vmax;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn source_vmax(&self) -> u32 {
        self.source_vmax
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn same_dims(&self, other: &MultiBandImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn same_shape(&self, other: &MultiBandImage) -> bool {
        self.same_dims(other) && self.bands == other.bands
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.samples[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.samples[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn get(&self, b: usize, x: usize, y: usize) -> f64 {
        self.samples[(b * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, x: usize, y: usize, v: f64) {
        let (w, h) = (self.width, self.height);
        self.samples[(b * h + y) * w + x] = v;
    }

    /// Sample at `(x, y)` with replicate padding outside the image.
    pub fn read_padded(&self, band: usize, x: i64, y: i64) -> Result<f64> {
        if band >= self.bands {
            return Err(Error::Index(format!("band {band} of {}", self.bands)));
        }
        let (cx, cy) = clamp_coords(x, y, self.width, self.height);
        Ok(self.get(band, cx, cy))
    }

    /// Copies bands `start..end` into a new image.
    pub fn slice_bands(&self, start: usize, end: usize) -> Result<MultiBandImage> {
        if start > end || end > self.bands {
            return Err(Error::Index(format!(
                "band range {start}..{end} of {}",
                self.bands
            )));
        }
        let n = self.pixels();
        Ok(MultiBandImage {
            width: self.width,
            height: self.height,
            bands: end - start,
            samples: self.samples[start * n..end * n].to_vec(),
            source_vmax: self.source_vmax,
        })
    }

    /// Rows `y0..y1` of every band.
    pub fn slice_rows(&self, y0: usize, y1: usize) -> MultiBandImage {
        debug_assert!(y0 < y1 && y1 <= self.height);
        let rows = y1 - y0;
        let mut samples = Vec::with_capacity(rows * self.width * self.bands);
        for b in 0..self.bands {
            let band = self.band(b);
            samples.extend_from_slice(&band[y0 * self.width..y1 * self.width]);
        }
        MultiBandImage {
            width: self.width,
            height: rows,
            bands: self.bands,
            samples,
            source_vmax: self.source_vmax,
        }
    }

    /// Clamps every sample into `[0, 1]`, returning the mask of samples that were moved.
    pub fn clamp_unit(&mut self) -> Vec<bool> {
        self.samples
            .iter_mut()
            .map(|s| {
                let c = s.clamp(0.0, 1.0);
                let moved = c != *s;
                *s = c;
                moved
            })
            .collect()
    }

    /// Clamps into `[0, 1]` without recording which samples moved.
    pub fn clamp_unit_in_place(&mut self) {
        for s in &mut self.samples {
            *s = s.clamp(0.0, 1.0);
        }
    }

    /// Errors unless every sample lies in `[0, 1]` (NaN included).
    pub fn check_unit_range(&self, what: &str) -> Result<()> {
        if let Some(i) = self.samples.iter().position(|s| !(0.0..=1.0).contains(s)) {
            let n = self.pixels();
            let (b, p) = (i / n, i % n);
            return Err(Error::Domain(format!(
                "{what}: sample {} at band {b}, pixel ({}, {}) is outside [0, 1]",
                self.samples[i],
                p % self.width,
                p / self.width
            )));
        }
        Ok(())
    }

    /// Integer samples at `vmax` full scale, rounded to nearest.
    pub fn denormalize(&self, vmax: u32) -> Vec<u32> {
        let scale = vmax as f64;
        self.samples
            .iter()
            .map(|s| (s.clamp(0.0, 1.0) * scale).round() as u32)
            .collect()
    }
}

#[inline]
pub(crate) fn clamp_coords(x: i64, y: i64, width: usize, height: usize) -> (usize, usize) {
    (
        x.clamp(0, width as i64 - 1) as usize,
        y.clamp(0, height as i64 - 1) as usize,
    )
}

/// Divides integer samples by `vmax`, producing a normalized image.
///
/// `raw` is band-sequential, matching [`MultiBandImage`]'s layout.
pub fn normalize_ingest<T>(
    width: usize,
    height: usize,
    bands: usize,
    raw: &[T],
    vmax: u32,
) -> Result<MultiBandImage>
where
    T: Copy + Into<u64>,
{
    if vmax == 0 {
        return Err(Error::Domain("vmax must be positive".into()));
    }
    if raw.len() != width * height * bands {
        return Err(shape(format!(
            "{} raw samples for a {width}x{height}x{bands} raster",
            raw.len()
        )));
    }
    let scale = vmax as f64;
    let n = width * height;
    let mut samples = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        let v: u64 = v.into();
        if v > vmax as u64 {
            let p = i % n.max(1);
            return Err(Error::Ingest {
                band: i / n.max(1),
                x: p % width,
                y: p / width,
                value: v,
                vmax,
            });
        }
        samples.push(v as f64 / scale);
    }
    Ok(MultiBandImage::from_samples(width, height, bands, samples)?.with_source_vmax(vmax))
}

/// Stacks `b`'s bands after `a`'s. An image with zero bands is the identity.
pub fn concat_bands(a: &MultiBandImage, b: &MultiBandImage) -> Result<MultiBandImage> {
    if !a.same_dims(b) {
        return Err(shape(format!(
            "cannot concatenate {}x{} with {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut samples = Vec::with_capacity(a.samples.len() + b.samples.len());
    samples.extend_from_slice(&a.samples);
    samples.extend_from_slice(&b.samples);
    Ok(MultiBandImage {
        width: a.width,
        height: a.height,
        bands: a.bands + b.bands,
        samples,
        source_vmax: a.source_vmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize, c: usize) -> MultiBandImage {
        let s = (0..w * h * c).map(|i| i as f64 / (w * h * c) as f64).collect();
        MultiBandImage::from_samples(w, h, c, s).unwrap()
    }

    #[test]
    fn ingest_examples() {
        let full = normalize_ingest(1, 1, 1, &[255u16], 255).unwrap();
        assert_eq!(full.samples()[0], 1.0);
        let zero = normalize_ingest(1, 1, 1, &[0u16], 2047).unwrap();
        assert_eq!(zero.samples()[0], 0.0);
        let mid = normalize_ingest(1, 1, 1, &[1023u16], 2047).unwrap();
        assert_eq!(mid.samples()[0], 1023.0 / 2047.0);
        assert!((mid.samples()[0] - 0.499_755).abs() < 1e-6);
        assert_eq!(mid.source_vmax(), 2047);
    }

    #[test]
    fn ingest_rejects_over_range_and_names_pixel() {
        let raw = [0u16, 0, 0, 0, 0, 0, 0, 300];
        match normalize_ingest(2, 2, 2, &raw, 255) {
            Err(Error::Ingest { band, x, y, value, .. }) => {
                assert_eq!((band, x, y, value), (1, 1, 1, 300));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concat_puts_first_operand_first() {
        let pan = MultiBandImage::filled(4, 4, 1, 0.25);
        let ms = ramp(4, 4, 4);
        let pm = concat_bands(&pan, &ms).unwrap();
        assert_eq!(pm.bands(), 5);
        assert_eq!(pm.band(0), pan.band(0));
        assert_eq!(pm.slice_bands(1, 5).unwrap(), ms);

        let empty = MultiBandImage::from_samples(4, 4, 0, vec![]).unwrap();
        assert_eq!(concat_bands(&ms, &empty).unwrap(), ms);
    }

    #[test]
    fn concat_dimension_mismatch() {
        let a = MultiBandImage::zeros(4, 4, 1);
        let b = MultiBandImage::zeros(4, 5, 1);
        assert!(matches!(concat_bands(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn padded_reads_replicate_edges() {
        let img = ramp(5, 4, 2);
        assert_eq!(img.read_padded(1, 2, 3).unwrap(), img.get(1, 2, 3));
        assert_eq!(img.read_padded(0, -1, 0).unwrap(), img.get(0, 0, 0));
        assert_eq!(img.read_padded(0, 5, 4).unwrap(), img.get(0, 4, 3));
        assert!(matches!(img.read_padded(2, 0, 0), Err(Error::Index(_))));
    }

    #[test]
    fn ratio_checks() {
        assert!(ScalePair::new(1).is_err());
        let pan = MultiBandImage::zeros(16, 16, 1);
        let ms = MultiBandImage::zeros(4, 4, 4);
        assert_eq!(ScalePair::infer(&pan, &ms).unwrap().ratio(), 4);
        let odd = MultiBandImage::zeros(5, 4, 4);
        assert!(ScalePair::infer(&pan, &odd).is_err());
    }

    proptest! {
        #[test]
        fn ingest_then_denormalize_is_lossless(
            vmax in prop::sample::select(vec![255u32, 1023, 2047, 7, 65535]),
            seeds in prop::collection::vec(any::<u32>(), 12),
        ) {
            let raw: Vec<u32> = seeds.iter().map(|s| s % (vmax + 1)).collect();
            let img = normalize_ingest(3, 2, 2, &raw, vmax).unwrap();
            prop_assert!(img.samples().iter().all(|s| (0.0..=1.0).contains(s)));
            prop_assert_eq!(img.denormalize(vmax), raw);
        }

        #[test]
        fn padded_read_matches_interior(x in 0i64..7, y in 0i64..5) {
            let img = ramp(7, 5, 1);
            prop_assert_eq!(img.read_padded(0, x, y).unwrap(), img.get(0, x as usize, y as usize));
        }
    }
}
