//! The composed Pan-LUT map: upsample MS, stack PAN in front, then
//! PGLUT, SDLUT and AOLUT with clamps to `[0, 1]` at every boundary.

use rayon::prelude::*;

use crate::error::{shape, Error, Result};
use crate::interp::LutTable;
use crate::raster::{concat_bands, MultiBandImage, ScalePair};
use crate::resample::{upsample_bicubic_adjoint, BicubicUpsampler};
use crate::stages::{AoLut, PgLut, SdLut, SdMode, Stage, StageKind, StageTape};
use crate::training::{self, LossBreakdown, LossConfig};

/// Rows per strip in [`sharpen`].
pub const STRIP_ROWS: usize = 256;

/// Rows of context above and below a strip. Chained SDLUT output at row `y`
/// depends on rows `y - 2 ..= y + 2`.
pub const STRIP_HALO: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PanLutModel {
    pub pglut: PgLut,
    pub sdlut: SdLut,
    pub aolut: AoLut,
}

impl PanLutModel {
    pub fn new(pglut: PgLut, sdlut: SdLut, aolut: AoLut) -> Result<Self> {
        let n = pglut.table().points();
        if sdlut.table().points() != n || aolut.table().points() != n {
            return Err(shape(format!(
                "tables disagree on N: {}, {}, {}",
                n,
                sdlut.table().points(),
                aolut.table().points()
            )));
        }
        Ok(Self { pglut, sdlut, aolut })
    }

    pub fn identity(points: usize, mode: SdMode) -> Result<Self> {
        Self::new(
            PgLut::identity(points)?,
            SdLut::identity(points, mode)?,
            AoLut::identity(points)?,
        )
    }

    pub fn n_points(&self) -> usize {
        self.pglut.table().points()
    }

    pub fn sd_mode(&self) -> SdMode {
        self.sdlut.mode()
    }

    pub fn tables(&self) -> [&LutTable; 3] {
        [self.pglut.table(), self.sdlut.table(), self.aolut.table()]
    }

    pub fn tables_mut(&mut self) -> [&mut LutTable; 3] {
        [
            self.pglut.table_mut(),
            self.sdlut.table_mut(),
            self.aolut.table_mut(),
        ]
    }

    pub fn table(&self, kind: StageKind) -> &LutTable {
        match kind {
            StageKind::PgLut => self.pglut.table(),
            StageKind::SdLut => self.sdlut.table(),
            StageKind::AoLut => self.aolut.table(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tables().iter().map(|t| t.entries().len()).sum()
    }

    /// Rounds every entry to the nearest `f32`, matching what the model file stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tables_mut() {
            for e in t.entries_mut() {
                *e = *e as f32 as f64;
            }
        }
    }

    /// Stage chain over `pm` rows with no tape; returns rows `keep` of the result.
    fn run_rows(&self, mut pm: MultiBandImage, keep: std::ops::Range<usize>) -> Result<MultiBandImage> {
        pm.clamp_unit_in_place();
        let mut v = self.pglut.forward(&pm, None)?;
        drop(pm);
        v.clamp_unit_in_place();
        let mut v = self.sdlut.forward(&v, None)?;
        v.clamp_unit_in_place();
        let v = if keep.start == 0 && keep.end == v.height() {
            v
        } else {
            v.slice_rows(keep.start, keep.end)
        };
        let mut out = self.aolut.forward(&v, None)?;
        out.clamp_unit_in_place();
        Ok(out)
    }
}

fn check_inputs(pan: &MultiBandImage, ms: &MultiBandImage) -> Result<ScalePair> {
    if pan.bands() != 1 {
        return Err(shape(format!("PAN must have 1 band, got {}", pan.bands())));
    }
    if ms.bands() != 4 {
        return Err(shape(format!("MS must have 4 bands, got {}", ms.bands())));
    }
    ScalePair::infer(pan, ms)
}

/// Fuses PAN with MS, streaming 256-row strips in parallel.
pub fn sharpen(model: &PanLutModel, pan: &MultiBandImage, ms: &MultiBandImage) -> Result<MultiBandImage> {
    sharpen_strips(model, pan, ms, STRIP_ROWS)
}

/// [`sharpen`] with a custom strip height; any height gives bit-identical output.
pub fn sharpen_strips(
    model: &PanLutModel,
    pan: &MultiBandImage,
    ms: &MultiBandImage,
    strip_rows: usize,
) -> Result<MultiBandImage> {
    if strip_rows == 0 {
        return Err(Error::Domain("strip height must be positive".into()));
    }
    let scale = check_inputs(pan, ms)?;
    let ups = BicubicUpsampler::new(ms, scale.ratio())?;
    let (w, h) = (pan.width(), pan.height());
    let starts: Vec<usize> = (0..h).step_by(strip_rows).collect();
    let strips: Vec<MultiBandImage> = starts
        .par_iter()
        .map(|&y0| {
            let y1 = (y0 + strip_rows).min(h);
            let a = y0.saturating_sub(STRIP_HALO);
            let b = (y1 + STRIP_HALO).min(h);
            let pm = concat_bands(&pan.slice_rows(a, b), &ups.rows(a, b))?;
            model.run_rows(pm, y0 - a..y1 - a)
        })
        .collect::<Result<_>>()?;
    drop(ups);
    if strips.len() == 1 {
        return Ok(strips.into_iter().next().unwrap().with_source_vmax(ms.source_vmax()));
    }
    let mut out = MultiBandImage::zeros(w, h, 4).with_source_vmax(ms.source_vmax());
    for (strip, &y0) in strips.iter().zip(&starts) {
        for b in 0..4 {
            let dst = &mut out.band_mut(b)[y0 * w..(y0 + strip.height()) * w];
            dst.copy_from_slice(strip.band(b));
        }
    }
    Ok(out)
}

/// Everything recorded by a taped forward.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub ratio: usize,
    pub ms_dims: (usize, usize),
    /// PAN+MS stack samples clamped before PGLUT.
    pub pm_clamped: Vec<bool>,
    pub pg: StageTape,
    pub pg_clamped: Vec<bool>,
    pub sd: StageTape,
    pub sd_clamped: Vec<bool>,
    pub ao: StageTape,
    pub out_clamped: Vec<bool>,
    /// Final output after the last clamp.
    pub output: MultiBandImage,
}

impl GradientTape {
    /// Re-evaluates AOLUT from its recorded queries and applies the final clamp.
    pub fn replay_output(&self, model: &PanLutModel) -> Result<MultiBandImage> {
        let StageTape::Pixelwise { width, height, queries } = &self.ao else {
            return Err(shape("AOLUT tape is not pixelwise"));
        };
        let n = width * height;
        let mut out = MultiBandImage::zeros(*width, *height, 4);
        let mut o = [0.0; 5];
        for (p, q) in queries.iter().enumerate() {
            model.aolut.table().interpolate_into(q, &mut o);
            for (c, &v) in o.iter().take(4).enumerate() {
                out.samples_mut()[c * n + p] = v.clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

fn empty_tape() -> StageTape {
    StageTape::Pixelwise {
        width: 0,
        height: 0,
        queries: Vec::new(),
    }
}

/// Whole-image forward recording a [`GradientTape`]. The output equals [`sharpen`]'s bit for bit.
pub fn forward_taped(model: &PanLutModel, pan: &MultiBandImage, ms: &MultiBandImage) -> Result<GradientTape> {
    let scale = check_inputs(pan, ms)?;
    let ups = BicubicUpsampler::new(ms, scale.ratio())?.full();
    let mut pm = concat_bands(pan, &ups)?;
    let pm_clamped = pm.clamp_unit();
    let mut pg = empty_tape();
    let mut v = model.pglut.forward(&pm, Some(&mut pg))?;
    let pg_clamped = v.clamp_unit();
    let mut sd = empty_tape();
    let mut v = model.sdlut.forward(&v, Some(&mut sd))?;
    let sd_clamped = v.clamp_unit();
    let mut ao = empty_tape();
    let mut output = model.aolut.forward(&v, Some(&mut ao))?;
    let out_clamped = output.clamp_unit();
    Ok(GradientTape {
        ratio: scale.ratio(),
        ms_dims: (ms.width(), ms.height()),
        pm_clamped,
        pg,
        pg_clamped,
        sd,
        sd_clamped,
        ao,
        out_clamped,
        output: output.with_source_vmax(ms.source_vmax()),
    })
}

fn gate(grad: &mut MultiBandImage, clamped: &[bool]) {
    for (g, &c) in grad.samples_mut().iter_mut().zip(clamped) {
        if c {
            *g = 0.0;
        }
    }
}

/// Entry gradients for the three tables, in PGLUT, SDLUT, AOLUT order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub pglut: Vec<f64>,
    pub sdlut: Vec<f64>,
    pub aolut: Vec<f64>,
}

impl ModelGradients {
    pub fn zeros_like(model: &PanLutModel) -> Self {
        let [pg, sd, ao] = model.tables();
        Self {
            pglut: vec![0.0; pg.entries().len()],
            sdlut: vec![0.0; sd.entries().len()],
            aolut: vec![0.0; ao.entries().len()],
        }
    }

    pub fn segments(&self) -> [&[f64]; 3] {
        [&self.pglut, &self.sdlut, &self.aolut]
    }

    pub fn segments_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.pglut, &mut self.sdlut, &mut self.aolut]
    }

    pub fn add_assign(&mut self, other: &ModelGradients) {
        for (a, b) in self.segments_mut().into_iter().zip(other.segments()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Gradients with respect to the two input images.
#[derive(Debug, Clone)]
pub struct InputGradients {
    pub pan: MultiBandImage,
    pub ms: MultiBandImage,
}

/// Backpropagates `dl_dout` (gradient of the clamped output) through the tape.
pub fn backward(
    model: &PanLutModel,
    tape: &GradientTape,
    dl_dout: &MultiBandImage,
) -> Result<(ModelGradients, InputGradients)> {
    if !dl_dout.same_shape(&tape.output) {
        return Err(shape("output gradient does not match the taped output"));
    }
    let mut g = dl_dout.clone();
    gate(&mut g, &tape.out_clamped);
    let ao = model.aolut.backward(&tape.ao, &g)?;
    let mut g = ao.input;
    gate(&mut g, &tape.sd_clamped);
    let sd = model.sdlut.backward(&tape.sd, &g)?;
    let mut g = sd.input;
    gate(&mut g, &tape.pg_clamped);
    let pg = model.pglut.backward(&tape.pg, &g)?;
    let mut g = pg.input;
    gate(&mut g, &tape.pm_clamped);

    let pan = g.slice_bands(0, 1)?;
    let ms_up = g.slice_bands(1, 5)?;
    let (mw, mh) = tape.ms_dims;
    let ms = upsample_bicubic_adjoint(&ms_up, mw, mh, tape.ratio)?;
    Ok((
        ModelGradients {
            pglut: pg.entries,
            sdlut: sd.entries,
            aolut: ao.entries,
        },
        InputGradients { pan, ms },
    ))
}

/// Result of [`forward_backward`].
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub loss: LossBreakdown,
    /// Gradients of the total loss, regularizers included.
    pub grads: ModelGradients,
    pub inputs: InputGradients,
    pub output: MultiBandImage,
}

/// Taped forward, total loss, and gradients of that loss with respect to
/// every table entry and every input sample.
pub fn forward_backward(
    model: &PanLutModel,
    pan: &MultiBandImage,
    ms: &MultiBandImage,
    gt: &MultiBandImage,
    cfg: &LossConfig,
) -> Result<ForwardBackward> {
    if gt.bands() != 4 || !gt.same_dims(pan) {
        return Err(shape(format!(
            "GT {}x{}x{} must be 4 bands at PAN size {}x{}",
            gt.width(),
            gt.height(),
            gt.bands(),
            pan.width(),
            pan.height()
        )));
    }
    let tape = forward_taped(model, pan, ms)?;
    let loss = training::loss_total(&tape.output, gt, model, cfg)?;
    let dl_dout = training::fidelity_grad(&tape.output, gt)?;
    let (mut grads, inputs) = backward(model, &tape, &dl_dout)?;
    for (table, g) in model.tables().into_iter().zip(grads.segments_mut()) {
        training::regularizer_grad(table, cfg, g);
    }
    Ok(ForwardBackward {
        loss,
        grads,
        inputs,
        output: tape.output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::LutTable;
    use crate::resample::upsample_bicubic;
    use crate::stages::init_identity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> MultiBandImage {
        let s = (0..w * h * c).map(|_| rng.gen::<f64>()).collect();
        MultiBandImage::from_samples(w, h, c, s).unwrap()
    }

    fn noisy(kind: StageKind, n: usize, amp: f64, rng: &mut ChaCha8Rng) -> LutTable {
        let mut t = init_identity(kind, n).unwrap();
        for e in t.entries_mut() {
            *e += rng.gen_range(-amp..amp);
        }
        t
    }

    fn random_model(n: usize, mode: SdMode, amp: f64, seed: u64) -> PanLutModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PanLutModel::new(
            PgLut::new(noisy(StageKind::PgLut, n, amp, &mut rng)).unwrap(),
            SdLut::new(noisy(StageKind::SdLut, n, amp, &mut rng), mode).unwrap(),
            AoLut::new(noisy(StageKind::AoLut, n, amp, &mut rng)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_model_reproduces_bicubic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pan = random_image(32, 32, 1, &mut rng);
        let ms = random_image(8, 8, 4, &mut rng);
        let model = PanLutModel::identity(9, SdMode::Chained).unwrap();
        let out = sharpen(&model, &pan, &ms).unwrap();
        let mut up = upsample_bicubic(&ms, 4).unwrap();
        up.clamp_unit_in_place();
        let err = out.samples().iter().zip(up.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_inputs_give_constant_output() {
        let model = random_model(5, SdMode::Chained, 0.2, 2);
        let pan = MultiBandImage::filled(12, 8, 1, 0.4);
        let ms = MultiBandImage::filled(3, 2, 4, 0.6);
        let out = sharpen(&model, &pan, &ms).unwrap();
        for b in 0..4 {
            let v = out.band(b)[0];
            assert!(out.band(b).iter().all(|&x| x == v));
        }
    }

    #[test]
    fn matches_hand_composition() {
        let model = random_model(9, SdMode::Chained, 0.3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pan = random_image(8, 8, 1, &mut rng);
        let ms = random_image(2, 2, 4, &mut rng);
        let mut pm = concat_bands(&pan, &upsample_bicubic(&ms, 4).unwrap()).unwrap();
        pm.clamp_unit_in_place();
        let mut v = model.pglut.forward(&pm, None).unwrap();
        v.clamp_unit_in_place();
        let mut v = model.sdlut.forward(&v, None).unwrap();
        v.clamp_unit_in_place();
        let mut want = model.aolut.forward(&v, None).unwrap();
        want.clamp_unit_in_place();
        let got = sharpen(&model, &pan, &ms).unwrap();
        assert_eq!(got.samples(), want.samples());
        assert!(got.samples().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn strip_height_does_not_change_output() {
        for mode in [SdMode::Chained, SdMode::Ensemble] {
            let model = random_model(5, mode, 0.3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let pan = random_image(16, 40, 1, &mut rng);
            let ms = random_image(4, 10, 4, &mut rng);
            let whole = sharpen_strips(&model, &pan, &ms, 1000).unwrap();
            for rows in [1, 2, 3, 7, 16, 39] {
                let s = sharpen_strips(&model, &pan, &ms, rows).unwrap();
                assert_eq!(s.samples(), whole.samples(), "{mode} strips of {rows}");
            }
            let taped = forward_taped(&model, &pan, &ms).unwrap();
            assert_eq!(taped.output.samples(), whole.samples());
        }
    }

    #[test]
    fn tape_replay_is_exact() {
        let model = random_model(5, SdMode::Chained, 0.4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pan = random_image(8, 8, 1, &mut rng);
        let ms = random_image(2, 2, 4, &mut rng);
        let tape = forward_taped(&model, &pan, &ms).unwrap();
        assert_eq!(tape.replay_output(&model).unwrap().samples(), tape.output.samples());
    }

    #[test]
    fn rejects_bad_shapes() {
        let model = PanLutModel::identity(3, SdMode::Chained).unwrap();
        let pan = MultiBandImage::zeros(10, 10, 1);
        let ms = MultiBandImage::zeros(3, 3, 4);
        assert!(matches!(sharpen(&model, &pan, &ms), Err(Error::Shape(_))));
        let ms = MultiBandImage::zeros(5, 5, 3);
        assert!(matches!(sharpen(&model, &pan, &ms), Err(Error::Shape(_))));
        let mismatched = PanLutModel::new(
            PgLut::identity(3).unwrap(),
            SdLut::identity(5, SdMode::Chained).unwrap(),
            AoLut::identity(3).unwrap(),
        );
        assert!(mismatched.is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_fidelity_gradient() {
        let model = PanLutModel::identity(5, SdMode::Chained).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pan = random_image(8, 8, 1, &mut rng);
        let ms = random_image(2, 2, 4, &mut rng);
        let gt = sharpen(&model, &pan, &ms).unwrap();
        let cfg = LossConfig { lambda_s: 0.0, lambda_m: 0.0 };
        let fb = forward_backward(&model, &pan, &ms, &gt, &cfg).unwrap();
        assert_eq!(fb.loss.fidelity, 0.0);
        assert!(fb.grads.segments().iter().all(|s| s.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn backward_is_additive_in_the_output_gradient() {
        let model = random_model(5, SdMode::Chained, 0.2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pan = random_image(8, 8, 1, &mut rng);
        let ms = random_image(2, 2, 4, &mut rng);
        let tape = forward_taped(&model, &pan, &ms).unwrap();
        let d1 = random_image(8, 8, 4, &mut rng);
        let d2 = random_image(8, 8, 4, &mut rng);
        let mut d12 = d1.clone();
        for (a, b) in d12.samples_mut().iter_mut().zip(d2.samples()) {
            *a += b;
        }
        let (g1, i1) = backward(&model, &tape, &d1).unwrap();
        let (g2, i2) = backward(&model, &tape, &d2).unwrap();
        let (g12, i12) = backward(&model, &tape, &d12).unwrap();
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        for (a, b) in sum.segments().iter().zip(g12.segments()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        for (x, (y, z)) in i12.ms.samples().iter().zip(i1.ms.samples().iter().zip(i2.ms.samples())) {
            assert!((x - (y + z)).abs() <= 1e-12 * x.abs().max(1.0));
        }
        for (x, (y, z)) in i12.pan.samples().iter().zip(i1.pan.samples().iter().zip(i2.pan.samples())) {
            assert!((x - (y + z)).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
