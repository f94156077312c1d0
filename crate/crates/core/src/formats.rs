//! Binary formats: MSR rasters, PLUT tables, PANLUTM model containers and
//! binary PGM/PPM.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::interp::LutTable;
use crate::pipeline::PanLutModel;
use crate::raster::{normalize_ingest, MultiBandImage};
use crate::stages::{AoLut, PgLut, SdLut, SdMode, Stage, StageKind};

pub const MSR_MAGIC: &[u8; 4] = b"MSR1";
pub const PLUT_MAGIC: &[u8; 4] = b"PLUT";
pub const PLUT_VERSION: u16 = 1;
pub const MODEL_MAGIC: &[u8; 7] = b"PANLUTM";
pub const MODEL_VERSION: u8 = 1;

/// Sample encoding of an MSR payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleType {
    U8 = 0,
    U16 = 1,
    /// Normalized samples stored as `f32`.
    F32 = 2,
}

impl SampleType {
    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(SampleType::U8),
            1 => Ok(SampleType::U16),
            2 => Ok(SampleType::F32),
            other => Err(Error::Format(format!("unknown MSR dtype {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            SampleType::U8 => 1,
            SampleType::U16 => 2,
            SampleType::F32 => 4,
        }
    }

    pub fn max_vmax(self) -> u32 {
        match self {
            SampleType::U8 => u8::MAX as u32,
            SampleType::U16 => u16::MAX as u32,
            SampleType::F32 => u32::MAX,
        }
    }
}

impl std::str::FromStr for SampleType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(SampleType::U8),
            "u16" => Ok(SampleType::U16),
            "f32" => Ok(SampleType::F32),
            other => Err(Error::Usage(format!("dtype must be u8, u16 or f32, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsrHeader {
    pub width: u32,
    pub height: u32,
    pub bands: u32,
    pub dtype: SampleType,
    pub vmax: u32,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("trailing bytes after {what}"))),
    }
}

pub fn write_msr<W: Write>(w: &mut W, img: &MultiBandImage, dtype: SampleType, vmax: u32) -> Result<()> {
    if vmax == 0 || vmax > dtype.max_vmax() {
        return Err(Error::Domain(format!("vmax {vmax} does not fit {dtype:?}")));
    }
    w.write_all(MSR_MAGIC)?;
    for v in [img.width() as u32, img.height() as u32, img.bands() as u32, dtype as u32, vmax] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(img.samples().len() * dtype.size());
    match dtype {
        SampleType::U8 => buf.extend(img.denormalize(vmax).into_iter().map(|v| v as u8)),
        SampleType::U16 => {
            for v in img.denormalize(vmax) {
                buf.extend_from_slice(&(v as u16).to_le_bytes());
            }
        }
        SampleType::F32 => {
            for &v in img.samples() {
                buf.extend_from_slice(&(v.clamp(0.0, 1.0) as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_msr<R: Read>(r: &mut R) -> Result<(MultiBandImage, MsrHeader)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "MSR header")?;
    if &magic != MSR_MAGIC {
        return Err(Error::Format("not an MSR file".into()));
    }
    let width = read_u32(r, "MSR header")?;
    let height = read_u32(r, "MSR header")?;
    let bands = read_u32(r, "MSR header")?;
    let dtype = SampleType::from_code(read_u32(r, "MSR header")?)?;
    let vmax = read_u32(r, "MSR header")?;
    if vmax == 0 || vmax > dtype.max_vmax() {
        return Err(Error::Format(format!("vmax {vmax} invalid for {dtype:?}")));
    }
    let header = MsrHeader {
        width,
        height,
        bands,
        dtype,
        vmax,
    };
    let (w, h, c) = (width as usize, height as usize, bands as usize);
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("MSR dimensions overflow".into()))?;
    let mut payload = Vec::new();
    r.take((count * dtype.size()) as u64).read_to_end(&mut payload)?;
    if payload.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "MSR payload has {} bytes, expected {}",
            payload.len(),
            count * dtype.size()
        )));
    }
    expect_eof(r, "MSR payload")?;
    let img = match dtype {
        SampleType::U8 => normalize_ingest(w, h, c, &payload, vmax)?,
        SampleType::U16 => {
            let raw: Vec<u16> = payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
            normalize_ingest(w, h, c, &raw, vmax)?
        }
        SampleType::F32 => {
            let mut samples = Vec::with_capacity(count);
            for (i, b) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!("f32 sample {i} = {v} outside [0, 1]")));
                }
                samples.push(v as f64);
            }
            MultiBandImage::from_samples(w, h, c, samples)?.with_source_vmax(vmax)
        }
    };
    Ok((img, header))
}

pub fn save_msr(path: &Path, img: &MultiBandImage, dtype: SampleType, vmax: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_msr(&mut w, img, dtype, vmax)?;
    w.flush()?;
    Ok(())
}

pub fn load_msr(path: &Path) -> Result<(MultiBandImage, MsrHeader)> {
    read_msr(&mut BufReader::new(File::open(path)?))
}

pub fn write_plut<W: Write>(w: &mut W, kind: StageKind, table: &LutTable) -> Result<()> {
    if table.dims() != kind.dims() || table.channels() != kind.channels() {
        return Err(Error::Shape(format!("table does not have {} geometry", kind.name())));
    }
    let points = u16::try_from(table.points())
        .map_err(|_| Error::Domain(format!("N = {} does not fit the PLUT header", table.points())))?;
    w.write_all(PLUT_MAGIC)?;
    w.write_all(&PLUT_VERSION.to_le_bytes())?;
    w.write_all(&[kind as u8, table.dims() as u8])?;
    w.write_all(&points.to_le_bytes())?;
    w.write_all(&(table.channels() as u16).to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    let mut buf = Vec::with_capacity(table.entries().len() * 4);
    for &v in table.entries() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Numeric(format!("entry {v} is not representable as f32")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_plut<R: Read>(r: &mut R) -> Result<(StageKind, LutTable)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "PLUT header")?;
    if &magic != PLUT_MAGIC {
        return Err(Error::Format("not a PLUT block".into()));
    }
    let version = read_u16(r, "PLUT header")?;
    if version != PLUT_VERSION {
        return Err(Error::Format(format!("unsupported PLUT version {version}")));
    }
    let kind = StageKind::from_code(read_u8(r, "PLUT header")?)?;
    let dims = read_u8(r, "PLUT header")? as usize;
    let points = read_u16(r, "PLUT header")? as usize;
    let channels = read_u16(r, "PLUT header")? as usize;
    let reserved = read_u16(r, "PLUT header")?;
    if reserved != 0 {
        return Err(Error::Format("PLUT reserved field is nonzero".into()));
    }
    if dims != kind.dims() || channels != kind.channels() {
        return Err(Error::Format(format!(
            "{} block declares D={dims}, E={channels}",
            kind.name()
        )));
    }
    if points < 2 {
        return Err(Error::Format(format!("PLUT N = {points} is below 2")));
    }
    let count = LutTable::param_count(dims, points, channels);
    let mut payload = vec![0u8; count * 4];
    read_exact(r, &mut payload, "PLUT entries")?;
    let mut entries = Vec::with_capacity(count);
    for (i, b) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(Error::Format(format!("PLUT entry {i} is not finite")));
        }
        entries.push(v as f64);
    }
    Ok((kind, LutTable::from_entries(dims, points, channels, entries)?))
}

pub fn write_model<W: Write>(w: &mut W, model: &PanLutModel) -> Result<()> {
    let points = u16::try_from(model.n_points())
        .map_err(|_| Error::Domain("N does not fit the model header".into()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION, model.sd_mode() as u8])?;
    w.write_all(&points.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    write_plut(w, StageKind::PgLut, model.pglut.table())?;
    write_plut(w, StageKind::SdLut, model.sdlut.table())?;
    write_plut(w, StageKind::AoLut, model.aolut.table())?;
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<PanLutModel> {
    let mut magic = [0u8; 7];
    read_exact(r, &mut magic, "model header")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a PANLUTM model".into()));
    }
    let version = read_u8(r, "model header")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let mode = SdMode::from_code(read_u8(r, "model header")?)?;
    let points = read_u16(r, "model header")? as usize;
    if read_u32(r, "model header")? != 0 {
        return Err(Error::Format("model reserved field is nonzero".into()));
    }
    let mut tables = Vec::with_capacity(3);
    for want in StageKind::ALL {
        let (kind, table) = read_plut(r)?;
        if kind != want {
            return Err(Error::Format(format!("expected {} block, found {}", want.name(), kind.name())));
        }
        if table.points() != points {
            return Err(Error::Format(format!(
                "{} has N={}, header says {points}",
                kind.name(),
                table.points()
            )));
        }
        tables.push(table);
    }
    expect_eof(r, "model")?;
    let ao = tables.pop().unwrap();
    let sd = tables.pop().unwrap();
    let pg = tables.pop().unwrap();
    PanLutModel::new(PgLut::new(pg)?, SdLut::new(sd, mode)?, AoLut::new(ao)?)
}

pub fn save_model(path: &Path, model: &PanLutModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PanLutModel> {
    read_model(&mut BufReader::new(File::open(path)?))
}

pub fn save_plut(path: &Path, kind: StageKind, table: &LutTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_plut(&mut w, kind, table)?;
    w.flush()?;
    Ok(())
}

pub fn load_plut(path: &Path) -> Result<(StageKind, LutTable)> {
    let mut r = BufReader::new(File::open(path)?);
    let out = read_plut(&mut r)?;
    expect_eof(&mut r, "PLUT block")?;
    Ok(out)
}

/// Writes one band (PGM) or three bands (PPM) as 8-bit binary netpbm.
pub fn write_pnm<W: Write>(w: &mut W, img: &MultiBandImage, bands: &[usize]) -> Result<()> {
    let magic = match bands.len() {
        1 => "P5",
        3 => "P6",
        n => return Err(Error::Shape(format!("netpbm export takes 1 or 3 bands, got {n}"))),
    };
    if let Some(&b) = bands.iter().find(|&&b| b >= img.bands()) {
        return Err(Error::Index(format!("band {b} of {}", img.bands())));
    }
    write!(w, "{magic}\n{} {}\n255\n", img.width(), img.height())?;
    let planes: Vec<&[f64]> = bands.iter().map(|&b| img.band(b)).collect();
    let mut buf = Vec::with_capacity(img.pixels() * bands.len());
    for p in 0..img.pixels() {
        for plane in &planes {
            buf.push((plane[p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn pnm_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let c = read_u8(r, "netpbm header")?;
        if c == b'#' && tok.is_empty() {
            while read_u8(r, "netpbm header")? != b'\n' {}
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

/// Reads binary PGM (1 band) or PPM (3 bands); `maxval` becomes the image's vmax.
pub fn read_pnm<R: Read>(r: &mut R) -> Result<MultiBandImage> {
    let magic = pnm_token(r)?;
    let bands = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported netpbm magic {other}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        pnm_token(r)?
            .parse()
            .map_err(|_| Error::Format(format!("bad netpbm {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("netpbm maxval {maxval} out of range")));
    }
    let size = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    let mut payload = vec![0u8; n * bands * size];
    read_exact(r, &mut payload, "netpbm payload")?;
    let mut raw = vec![0u16; n * bands];
    for p in 0..n {
        for b in 0..bands {
            let i = p * bands + b;
            raw[b * n + p] = if size == 1 {
                payload[i] as u16
            } else {
                u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]])
            };
        }
    }
    normalize_ingest(width, height, bands, &raw, maxval as u32)
}

pub fn save_pnm(path: &Path, img: &MultiBandImage, bands: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pnm(&mut w, img, bands)?;
    w.flush()?;
    Ok(())
}

pub fn load_pnm(path: &Path) -> Result<MultiBandImage> {
    read_pnm(&mut BufReader::new(File::open(path)?))
}

/// Loads an MSR file, or PGM/PPM when the extension says so.
pub fn load_raster(path: &Path) -> Result<MultiBandImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") => load_pnm(path),
        _ => Ok(load_msr(path)?.0),
    }
}
