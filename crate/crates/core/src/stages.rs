//! The three lookup stages: PAN-guided spectral mapping (PGLUT), spatial
//! details over 2x2 neighborhoods (SDLUT) and adaptive output aggregation
//! (AOLUT).
//!
//! Forwards take planar images whose samples already lie in `[0, 1]`; the
//! pipeline clamps between stages. Passing a [`StageTape`] records every
//! lattice query so [`Stage::backward`] can replay the chain rule exactly.

use crate::error::{shape, Error, Result};
use crate::interp::{locate_unchecked, LatticeQuery, LutTable, MAX_DIMS};
use crate::raster::{clamp_coords, MultiBandImage};

/// Which stage a table belongs to; the discriminant is the on-disk kind byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    PgLut = 0,
    SdLut = 1,
    AoLut = 2,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::PgLut, StageKind::SdLut, StageKind::AoLut];

    pub fn dims(self) -> usize {
        match self {
            StageKind::PgLut | StageKind::AoLut => 5,
            StageKind::SdLut => 4,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            StageKind::PgLut => 5,
            StageKind::SdLut => 1,
            StageKind::AoLut => 4,
        }
    }

    /// `5N^5`, `N^4` and `4N^5` respectively.
    pub fn param_count(self, points: usize) -> usize {
        LutTable::param_count(self.dims(), points, self.channels())
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(StageKind::PgLut),
            1 => Ok(StageKind::SdLut),
            2 => Ok(StageKind::AoLut),
            other => Err(Error::Format(format!("unknown LUT kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::PgLut => "PGLUT",
            StageKind::SdLut => "SDLUT",
            StageKind::AoLut => "AOLUT",
        }
    }

    fn check_table(self, table: &LutTable) -> Result<()> {
        if table.dims() != self.dims() || table.channels() != self.channels() {
            return Err(shape(format!(
                "{} needs D={}, E={}; got D={}, E={}",
                self.name(),
                self.dims(),
                self.channels(),
                table.dims(),
                table.channels()
            )));
        }
        Ok(())
    }
}

/// How SDLUT combines its four oriented lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdMode {
    /// Four sequential passes, each reading the previous pass's output.
    #[default]
    Chained = 0,
    /// Four lookups on the same input, averaged.
    Ensemble = 1,
}

impl SdMode {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SdMode::Chained),
            1 => Ok(SdMode::Ensemble),
            other => Err(Error::Format(format!("unknown SDLUT mode {other}"))),
        }
    }
}

impl std::str::FromStr for SdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chained" => Ok(SdMode::Chained),
            "ensemble" => Ok(SdMode::Ensemble),
            other => Err(Error::Usage(format!("sd mode must be chained or ensemble, got {other}"))),
        }
    }
}

impl std::fmt::Display for SdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SdMode::Chained => "chained",
            SdMode::Ensemble => "ensemble",
        })
    }
}

/// `(dx, dy)` of the four SDLUT inputs for orientations 0, 90, 180 and 270
/// degrees. Orientation `k + 1` is orientation `k` rotated by
/// `(dx, dy) -> (dy, -dx)`, and the union of the four is the 3x3 block.
pub const ORIENTATIONS: [[(i64, i64); 4]; 4] = [
    [(0, 0), (1, 0), (0, 1), (1, 1)],
    [(0, 0), (0, -1), (1, 0), (1, -1)],
    [(0, 0), (-1, 0), (0, -1), (-1, -1)],
    [(0, 0), (0, 1), (-1, 0), (-1, 1)],
];

/// Identity table for a stage: PGLUT passes all five inputs through, SDLUT
/// returns the current pixel and AOLUT returns the four MS inputs.
pub fn init_identity(kind: StageKind, points: usize) -> Result<LutTable> {
    let scale = (points.max(2) - 1) as f64;
    match kind {
        StageKind::PgLut => LutTable::from_fn(5, points, 5, |idx, e| idx[e] as f64 / scale),
        StageKind::SdLut => LutTable::from_fn(4, points, 1, |idx, _| idx[0] as f64 / scale),
        StageKind::AoLut => LutTable::from_fn(5, points, 4, |idx, c| idx[c + 1] as f64 / scale),
    }
}

/// Queries recorded by one stage forward.
#[derive(Debug, Clone)]
pub enum StageTape {
    /// One query per pixel, row-major.
    Pixelwise {
        width: usize,
        height: usize,
        queries: Vec<LatticeQuery>,
    },
    Spatial {
        width: usize,
        height: usize,
        mode: SdMode,
        passes: Vec<SpatialPass>,
    },
}

/// One oriented SDLUT lookup over every band.
#[derive(Debug, Clone)]
pub struct SpatialPass {
    pub orientation: usize,
    /// Samples of this pass's input that were clamped into `[0, 1]`
    /// (chained passes after the first; empty otherwise).
    pub input_clamped: Vec<bool>,
    /// `bands x pixels` queries.
    pub queries: Vec<LatticeQuery>,
}

impl StageTape {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            StageTape::Pixelwise { width, height, .. } | StageTape::Spatial { width, height, .. } => {
                (*width, *height)
            }
        }
    }
}

/// Gradients produced by [`Stage::backward`].
#[derive(Debug, Clone)]
pub struct StageGradients {
    /// Entry-shaped `dL/dtable`.
    pub entries: Vec<f64>,
    /// `dL/dinput` with the input image's shape.
    pub input: MultiBandImage,
}

pub trait Stage {
    fn kind(&self) -> StageKind;
    fn table(&self) -> &LutTable;
    fn table_mut(&mut self) -> &mut LutTable;

    fn forward(&self, input: &MultiBandImage, tape: Option<&mut StageTape>) -> Result<MultiBandImage>;

    fn backward(&self, tape: &StageTape, dl_dout: &MultiBandImage) -> Result<StageGradients>;
}

macro_rules! pixelwise_stage {
    ($name:ident, $kind:expr) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            table: LutTable,
        }

        impl $name {
            pub fn new(table: LutTable) -> Result<Self> {
                $kind.check_table(&table)?;
                Ok(Self { table })
            }

            pub fn identity(points: usize) -> Result<Self> {
                Self::new(init_identity($kind, points)?)
            }

            pub fn into_table(self) -> LutTable {
                self.table
            }
        }

        impl Stage for $name {
            fn kind(&self) -> StageKind {
                $kind
            }

            fn table(&self) -> &LutTable {
                &self.table
            }

            fn table_mut(&mut self) -> &mut LutTable {
                &mut self.table
            }

            fn forward(
                &self,
                input: &MultiBandImage,
                tape: Option<&mut StageTape>,
            ) -> Result<MultiBandImage> {
                pixelwise_forward(&self.table, $kind, input, tape)
            }

            fn backward(&self, tape: &StageTape, dl_dout: &MultiBandImage) -> Result<StageGradients> {
                pixelwise_backward(&self.table, tape, dl_dout)
            }
        }
    };
}

pixelwise_stage!(PgLut, StageKind::PgLut);
pixelwise_stage!(AoLut, StageKind::AoLut);

fn pixelwise_forward(
    table: &LutTable,
    kind: StageKind,
    input: &MultiBandImage,
    tape: Option<&mut StageTape>,
) -> Result<MultiBandImage> {
    let dims = table.dims();
    if input.bands() != dims {
        return Err(shape(format!(
            "{} expects {dims} input bands, got {}",
            kind.name(),
            input.bands()
        )));
    }
    input.check_unit_range(kind.name())?;
    let n = input.pixels();
    let e_count = table.channels();
    let mut out = MultiBandImage::zeros(input.width(), input.height(), e_count)
        .with_source_vmax(input.source_vmax());
    let planes: Vec<&[f64]> = (0..dims).map(|b| input.band(b)).collect();
    let mut queries = tape.as_ref().map(|_| Vec::with_capacity(n));
    let mut v = [0.0; MAX_DIMS];
    let mut o = [0.0; MAX_DIMS];
    let out_samples = out.samples_mut();
    for p in 0..n {
        for (l, plane) in planes.iter().enumerate() {
            v[l] = plane[p];
        }
        let q = locate_unchecked(&v[..dims], table.points());
        table.interpolate_into(&q, &mut o);
        for e in 0..e_count {
            out_samples[e * n + p] = o[e];
        }
        if let Some(qs) = queries.as_mut() {
            qs.push(q);
        }
    }
    if let (Some(t), Some(queries)) = (tape, queries) {
        *t = StageTape::Pixelwise {
            width: input.width(),
            height: input.height(),
            queries,
        };
    }
    Ok(out)
}

fn pixelwise_backward(
    table: &LutTable,
    tape: &StageTape,
    dl_dout: &MultiBandImage,
) -> Result<StageGradients> {
    let StageTape::Pixelwise {
        width,
        height,
        queries,
    } = tape
    else {
        return Err(shape("pixelwise stage given a spatial tape"));
    };
    if dl_dout.width() != *width || dl_dout.height() != *height || dl_dout.bands() != table.channels()
    {
        return Err(shape(format!(
            "output gradient {}x{}x{} does not match tape {width}x{height}x{}",
            dl_dout.width(),
            dl_dout.height(),
            dl_dout.bands(),
            table.channels()
        )));
    }
    let n = width * height;
    let dims = table.dims();
    let mut entries = vec![0.0; table.entries().len()];
    let mut input = MultiBandImage::zeros(*width, *height, dims);
    let g_samples = dl_dout.samples();
    let in_samples = input.samples_mut();
    let mut g = [0.0; MAX_DIMS];
    let mut dv = [0.0; MAX_DIMS];
    for (p, q) in queries.iter().enumerate() {
        let mut any = false;
        for (e, slot) in g.iter_mut().enumerate().take(table.channels()) {
            *slot = g_samples[e * n + p];
            any |= *slot != 0.0;
        }
        if !any {
            continue;
        }
        let g = &g[..table.channels()];
        table.backprop_entries_unchecked(q, g, &mut entries);
        table.backprop_inputs_into(q, g, &mut dv);
        for l in 0..dims {
            in_samples[l * n + p] = dv[l];
        }
    }
    Ok(StageGradients { entries, input })
}

/// Spatial-details LUT: one 4-D table shared by every band.
#[derive(Debug, Clone, PartialEq)]
pub struct SdLut {
    table: LutTable,
    mode: SdMode,
}

impl SdLut {
    pub fn new(table: LutTable, mode: SdMode) -> Result<Self> {
        StageKind::SdLut.check_table(&table)?;
        Ok(Self { table, mode })
    }

    pub fn identity(points: usize, mode: SdMode) -> Result<Self> {
        Self::new(init_identity(StageKind::SdLut, points)?, mode)
    }

    pub fn mode(&self) -> SdMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: SdMode) {
        self.mode = mode;
    }

    pub fn into_table(self) -> LutTable {
        self.table
    }

    /// One oriented lookup over a single plane, writing `out` and optionally the queries.
    fn oriented_pass(
        &self,
        src: &[f64],
        width: usize,
        height: usize,
        orientation: usize,
        out: &mut [f64],
        mut queries: Option<&mut Vec<LatticeQuery>>,
    ) {
        let offsets = &ORIENTATIONS[orientation];
        let points = self.table.points();
        let mut v = [0.0; 4];
        for y in 0..height {
            for x in 0..width {
                for (slot, (dx, dy)) in v.iter_mut().zip(offsets) {
                    let (sx, sy) = clamp_coords(x as i64 + dx, y as i64 + dy, width, height);
                    *slot = src[sy * width + sx];
                }
                let q = locate_unchecked(&v, points);
                out[y * width + x] = self.table.interpolate_scalar(&q);
                if let Some(qs) = queries.as_deref_mut() {
                    qs.push(q);
                }
            }
        }
    }
}

impl Stage for SdLut {
    fn kind(&self) -> StageKind {
        StageKind::SdLut
    }

    fn table(&self) -> &LutTable {
        &self.table
    }

    fn table_mut(&mut self) -> &mut LutTable {
        &mut self.table
    }

    fn forward(&self, input: &MultiBandImage, tape: Option<&mut StageTape>) -> Result<MultiBandImage> {
        input.check_unit_range("SDLUT")?;
        let (w, h) = (input.width(), input.height());
        let n = w * h;
        let bands = input.bands();
        let record = tape.is_some();
        let mut passes: Vec<SpatialPass> = (0..4)
            .map(|k| SpatialPass {
                orientation: k,
                input_clamped: Vec::new(),
                queries: Vec::with_capacity(if record { n * bands } else { 0 }),
            })
            .collect();
        let mut out = MultiBandImage::zeros(w, h, bands).with_source_vmax(input.source_vmax());
        match self.mode {
            SdMode::Chained => {
                let mut cur = vec![0.0; n];
                let mut next = vec![0.0; n];
                for b in 0..bands {
                    cur.copy_from_slice(input.band(b));
                    for (k, pass) in passes.iter_mut().enumerate() {
                        if k > 0 {
                            for s in cur.iter_mut() {
                                let c = s.clamp(0.0, 1.0);
                                if record {
                                    pass.input_clamped.push(c != *s);
                                }
                                *s = c;
                            }
                        }
                        let qs = record.then_some(&mut pass.queries);
                        self.oriented_pass(&cur, w, h, k, &mut next, qs);
                        std::mem::swap(&mut cur, &mut next);
                    }
                    out.band_mut(b).copy_from_slice(&cur);
                }
            }
            SdMode::Ensemble => {
                let mut lookups = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
                for b in 0..bands {
                    let src = input.band(b);
                    for (k, pass) in passes.iter_mut().enumerate() {
                        let qs = record.then_some(&mut pass.queries);
                        self.oriented_pass(src, w, h, k, &mut lookups[k], qs);
                    }
                    for (p, o) in out.band_mut(b).iter_mut().enumerate() {
                        *o = (lookups[0][p] + lookups[1][p] + lookups[2][p] + lookups[3][p]) * 0.25;
                    }
                }
            }
        }
        if let Some(t) = tape {
            *t = StageTape::Spatial {
                width: w,
                height: h,
                mode: self.mode,
                passes,
            };
        }
        Ok(out)
    }

    fn backward(&self, tape: &StageTape, dl_dout: &MultiBandImage) -> Result<StageGradients> {
        let StageTape::Spatial {
            width,
            height,
            mode,
            passes,
        } = tape
        else {
            return Err(shape("SDLUT given a pixelwise tape"));
        };
        let (w, h) = (*width, *height);
        if dl_dout.width() != w || dl_dout.height() != h {
            return Err(shape(format!(
                "output gradient {}x{} does not match tape {w}x{h}",
                dl_dout.width(),
                dl_dout.height()
            )));
        }
        let n = w * h;
        let bands = dl_dout.bands();
        if passes.len() != 4 || passes.iter().any(|p| p.queries.len() != n * bands) {
            return Err(shape("SDLUT tape does not match gradient band count"));
        }
        let mut entries = vec![0.0; self.table.entries().len()];
        let mut input = MultiBandImage::zeros(w, h, bands);
        let mut dv = [0.0; MAX_DIMS];

        // Scatters one pass's gradient onto its input plane.
        let mut scatter = |pass: &SpatialPass, b: usize, g_out: &[f64], g_in: &mut [f64], scale: f64| {
            let offsets = &ORIENTATIONS[pass.orientation];
            let queries = &pass.queries[b * n..(b + 1) * n];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let g = g_out[p] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let q = &queries[p];
                    self.table.backprop_entries_unchecked(q, &[g], &mut entries);
                    self.table.backprop_inputs_into(q, &[g], &mut dv);
                    for (i, (dx, dy)) in offsets.iter().enumerate() {
                        let (sx, sy) = clamp_coords(x as i64 + dx, y as i64 + dy, w, h);
                        g_in[sy * w + sx] += dv[i];
                    }
                }
            }
        };

        match mode {
            SdMode::Chained => {
                let mut g_cur = vec![0.0; n];
                let mut g_prev = vec![0.0; n];
                for b in 0..bands {
                    g_cur.copy_from_slice(dl_dout.band(b));
                    for pass in passes.iter().rev() {
                        g_prev.iter_mut().for_each(|g| *g = 0.0);
                        scatter(pass, b, &g_cur, &mut g_prev, 1.0);
                        if !pass.input_clamped.is_empty() {
                            let mask = &pass.input_clamped[b * n..(b + 1) * n];
                            for (g, &m) in g_prev.iter_mut().zip(mask) {
                                if m {
                                    *g = 0.0;
                                }
                            }
                        }
                        std::mem::swap(&mut g_cur, &mut g_prev);
                    }
                    input.band_mut(b).copy_from_slice(&g_cur);
                }
            }
            SdMode::Ensemble => {
                let mut g_in = vec![0.0; n];
                for b in 0..bands {
                    g_in.iter_mut().for_each(|g| *g = 0.0);
                    for pass in passes {
                        scatter(pass, b, dl_dout.band(b), &mut g_in, 0.25);
                    }
                    input.band_mut(b).copy_from_slice(&g_in);
                }
            }
        }
        Ok(StageGradients { entries, input })
    }
}
