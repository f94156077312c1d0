//! D-dimensional lattice tables with multilinear interpolation.
//!
//! A [`LutTable`] holds `N` lattice points per axis over the unit hypercube
//! and an `E`-vector of outputs at every point. Queries are resolved by
//! [`locate`] into a [`LatticeQuery`] (cell corner, per-axis offsets and the
//! `2^D` corner weights) and then evaluated, or differentiated, against a
//! table.
//!
//! Corner `c` of a cell sets axis `l` to its upper lattice point when bit
//! `D - 1 - l` of `c` is set, so axis 0 is the most significant bit. Every
//! loop over corners follows this order, which keeps gradient accumulation
//! deterministic.

use crate::error::{shape, Error, Result};

/// Largest supported lattice dimensionality.
pub const MAX_DIMS: usize = 5;
pub const MAX_CORNERS: usize = 1 << MAX_DIMS;

#[derive(Debug, Clone, PartialEq)]
pub struct LutTable {
    dims: usize,
    points: usize,
    channels: usize,
    entries: Vec<f64>,
    strides: [usize; MAX_DIMS],
    corner_offsets: Vec<usize>,
}

/// Resolved lookup state for one input point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeQuery {
    dims: usize,
    points: usize,
    base: [usize; MAX_DIMS],
    frac: [f64; MAX_DIMS],
    weights: [f64; MAX_CORNERS],
}

impl LatticeQuery {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn base(&self) -> &[usize] {
        &self.base[..self.dims]
    }

    pub fn frac(&self) -> &[f64] {
        &self.frac[..self.dims]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..1 << self.dims]
    }

    /// Lattice coordinates of corner `c`.
    pub fn corner(&self, c: usize) -> [usize; MAX_DIMS] {
        let mut idx = [0; MAX_DIMS];
        for (l, slot) in idx.iter_mut().enumerate().take(self.dims) {
            *slot = self.base[l] + ((c >> (self.dims - 1 - l)) & 1);
        }
        idx
    }

    /// Smallest distance of any offset to a cell face, in lattice units.
    pub fn face_margin(&self) -> f64 {
        self.frac()
            .iter()
            .map(|f| f.min(1.0 - f))
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_geometry(dims: usize, points: usize) -> Result<()> {
    if dims == 0 || dims > MAX_DIMS {
        return Err(Error::Domain(format!("lattice dims must be in 1..={MAX_DIMS}, got {dims}")));
    }
    if points < 2 {
        return Err(Error::Domain(format!("lattice needs at least 2 points per axis, got {points}")));
    }
    if points > u16::MAX as usize {
        return Err(Error::Domain(format!("{points} points per axis is too many")));
    }
    Ok(())
}

/// Resolves a normalized input point into its lattice cell and corner weights.
pub fn locate(v: &[f64], points: usize) -> Result<LatticeQuery> {
    check_geometry(v.len(), points)?;
    if let Some((l, x)) = v.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!(
            "lattice input {x} on axis {l} is outside [0, 1]; clamp upstream"
        )));
    }
    Ok(locate_unchecked(v, points))
}

/// [`locate`] without the geometry and range checks. Inputs must lie in `[0, 1]`.
#[inline]
pub fn locate_unchecked(v: &[f64], points: usize) -> LatticeQuery {
    let dims = v.len();
    let scale = (points - 1) as f64;
    let top = points - 2;
    let mut base = [0usize; MAX_DIMS];
    let mut frac = [0.0f64; MAX_DIMS];
    for l in 0..dims {
        let x = v[l] * scale;
        let i = (x.floor() as usize).min(top);
        base[l] = i;
        frac[l] = x - i as f64;
    }
    let mut weights = [0.0f64; MAX_CORNERS];
    weights[0] = 1.0;
    let mut len = 1;
    for &d in &frac[..dims] {
        for i in (0..len).rev() {
            let w = weights[i];
            weights[2 * i] = w * (1.0 - d);
            weights[2 * i + 1] = w * d;
        }
        len *= 2;
    }
    LatticeQuery {
        dims,
        points,
        base,
        frac,
        weights,
    }
}

impl LutTable {
    /// Zero-initialized table.
    pub fn new(dims: usize, points: usize, channels: usize) -> Result<Self> {
        let count = Self::param_count(dims, points, channels);
        Self::from_entries(dims, points, channels, vec![0.0; count])
    }

    pub fn from_entries(
        dims: usize,
        points: usize,
        channels: usize,
        entries: Vec<f64>,
    ) -> Result<Self> {
        check_geometry(dims, points)?;
        if channels == 0 {
            return Err(Error::Domain("table needs at least one output channel".into()));
        }
        let expected = Self::param_count(dims, points, channels);
        if entries.len() != expected {
            return Err(shape(format!(
                "{} entries for a D={dims}, N={points}, E={channels} table (expected {expected})",
                entries.len()
            )));
        }
        let mut strides = [0usize; MAX_DIMS];
        let mut s = channels;
        for l in (0..dims).rev() {
            strides[l] = s;
            s *= points;
        }
        let corner_offsets = (0..1usize << dims)
            .map(|c| {
                (0..dims)
                    .map(|l| ((c >> (dims - 1 - l)) & 1) * strides[l])
                    .sum()
            })
            .collect();
        Ok(Self {
            dims,
            points,
            channels,
            entries,
            strides,
            corner_offsets,
        })
    }

    /// Builds a table by evaluating `f(lattice_index, channel)` at every entry.
    pub fn from_fn(
        dims: usize,
        points: usize,
        channels: usize,
        mut f: impl FnMut(&[usize], usize) -> f64,
    ) -> Result<Self> {
        let mut table = Self::new(dims, points, channels)?;
        let mut idx = vec![0usize; dims];
        for p in 0..table.lattice_points() {
            table.unflatten_point(p, &mut idx);
            for e in 0..channels {
                table.entries[p * channels + e] = f(&idx, e);
            }
        }
        Ok(table)
    }

    /// `E * N^D`, the learnable parameter count.
    pub fn param_count(dims: usize, points: usize, channels: usize) -> usize {
        channels * points.pow(dims as u32)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lattice_points(&self) -> usize {
        self.points.pow(self.dims as u32)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    /// Element stride of axis `l` in [`entries`](Self::entries).
    pub fn stride(&self, l: usize) -> usize {
        self.strides[l]
    }

    pub fn entry_index(&self, idx: &[usize], channel: usize) -> usize {
        debug_assert_eq!(idx.len(), self.dims);
        idx.iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum::<usize>()
            + channel
    }

    pub fn get(&self, idx: &[usize], channel: usize) -> f64 {
        self.entries[self.entry_index(idx, channel)]
    }

    pub fn set(&mut self, idx: &[usize], channel: usize, v: f64) {
        let i = self.entry_index(idx, channel);
        self.entries[i] = v;
    }

    /// Lattice coordinates of flat point number `p` (entry index divided by `E`).
    pub fn unflatten_point(&self, mut p: usize, idx: &mut [usize]) {
        for l in (0..self.dims).rev() {
            idx[l] = p % self.points;
            p /= self.points;
        }
    }

    fn check_query(&self, q: &LatticeQuery) -> Result<()> {
        if q.dims != self.dims || q.points != self.points {
            return Err(shape(format!(
                "query (D={}, N={}) does not match table (D={}, N={})",
                q.dims, q.points, self.dims, self.points
            )));
        }
        Ok(())
    }

    #[inline]
    fn base_offset(&self, q: &LatticeQuery) -> usize {
        let mut off = 0;
        for l in 0..self.dims {
            off += q.base[l] * self.strides[l];
        }
        off
    }

    /// Weighted sum over the `2^D` cell corners, one value per output channel.
    pub fn interpolate(&self, q: &LatticeQuery) -> Result<Vec<f64>> {
        self.check_query(q)?;
        let mut out = vec![0.0; self.channels];
        self.interpolate_into(q, &mut out);
        Ok(out)
    }

    /// Unchecked [`interpolate`](Self::interpolate) into a caller buffer of length `E`.
    #[inline]
    pub fn interpolate_into(&self, q: &LatticeQuery, out: &mut [f64]) {
        let base = self.base_offset(q);
        let e_count = self.channels;
        out[..e_count].iter_mut().for_each(|o| *o = 0.0);
        for (w, off) in q.weights[..self.corner_offsets.len()]
            .iter()
            .zip(&self.corner_offsets)
        {
            let src = &self.entries[base + off..base + off + e_count];
            for (o, v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }

    /// Single-channel fast path for `E == 1` tables.
    #[inline]
    pub fn interpolate_scalar(&self, q: &LatticeQuery) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let base = self.base_offset(q);
        let mut acc = 0.0;
        for (w, off) in q.weights[..self.corner_offsets.len()]
            .iter()
            .zip(&self.corner_offsets)
        {
            acc += w * self.entries[base + off];
        }
        acc
    }

    /// Accumulates `weight_c * dL/dout_e` into the entry-shaped `grad_accum`.
    pub fn backprop_entries(
        &self,
        q: &LatticeQuery,
        dl_dout: &[f64],
        grad_accum: &mut [f64],
    ) -> Result<()> {
        self.check_query(q)?;
        if dl_dout.len() != self.channels || grad_accum.len() != self.entries.len() {
            return Err(shape(format!(
                "gradient buffers ({}, {}) do not match table ({}, {})",
                dl_dout.len(),
                grad_accum.len(),
                self.channels,
                self.entries.len()
            )));
        }
        self.backprop_entries_unchecked(q, dl_dout, grad_accum);
        Ok(())
    }

    #[inline]
    pub(crate) fn backprop_entries_unchecked(
        &self,
        q: &LatticeQuery,
        dl_dout: &[f64],
        grad_accum: &mut [f64],
    ) {
        let base = self.base_offset(q);
        let e_count = self.channels;
        for (w, off) in q.weights[..self.corner_offsets.len()]
            .iter()
            .zip(&self.corner_offsets)
        {
            let dst = &mut grad_accum[base + off..base + off + e_count];
            for (d, g) in dst.iter_mut().zip(dl_dout) {
                *d += w * g;
            }
        }
    }

    /// `dL/dv` for each of the `D` normalized inputs.
    ///
    /// Differentiates the multilinear form of the located cell, so at an
    /// exact lattice hit this is the derivative from the upper side (and at
    /// full scale, from the lower side).
    pub fn backprop_inputs(&self, q: &LatticeQuery, dl_dout: &[f64]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        if dl_dout.len() != self.channels {
            return Err(shape(format!(
                "{} output gradients for {} channels",
                dl_dout.len(),
                self.channels
            )));
        }
        let mut out = [0.0; MAX_DIMS];
        self.backprop_inputs_into(q, dl_dout, &mut out);
        Ok(out[..self.dims].to_vec())
    }

    pub(crate) fn backprop_inputs_into(
        &self,
        q: &LatticeQuery,
        dl_dout: &[f64],
        out: &mut [f64; MAX_DIMS],
    ) {
        let dims = self.dims;
        let base = self.base_offset(q);
        let scale = (self.points - 1) as f64;
        // Projection of every corner's entry vector onto dL/dout.
        let mut proj = [0.0; MAX_CORNERS];
        for (c, off) in self.corner_offsets.iter().enumerate() {
            let src = &self.entries[base + off..base + off + self.channels];
            proj[c] = src.iter().zip(dl_dout).map(|(v, g)| v * g).sum();
        }
        for l in 0..dims {
            let mut acc = 0.0;
            for (c, p) in proj[..1 << dims].iter().enumerate() {
                let mut dw = 1.0;
                for k in 0..dims {
                    let upper = (c >> (dims - 1 - k)) & 1 == 1;
                    if k == l {
                        if !upper {
                            dw = -dw;
                        }
                    } else if upper {
                        dw *= q.frac[k];
                    } else {
                        dw *= 1.0 - q.frac[k];
                    }
                }
                acc += dw * p;
            }
            out[l] = acc * scale;
        }
    }
}
