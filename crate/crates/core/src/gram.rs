//! Full 2-D convolution and the filter-scoring quadratic forms.
//!
//! A candidate filter f is scored by how much energy the current residuals keep
//! after filtering: sum over samples of ||Y_n * f||^2. Writing the full
//! convolution as a matrix product D_Y vec(f) turns that score into the
//! quadratic form vec(f)^T (sum_n D_n^T D_n) vec(f), so the whole design problem
//! lives on one small k^2 x k^2 matrix per channel. The dense D exists here as a
//! verification oracle; the production path builds D^T D directly from image
//! autocorrelations in O(w h k^2) without materializing D.
//!
//! Vectorization order is row-major over filter rows then columns, fixed
//! crate-wide; [`crate::filterbank::FilterBank`] and [`crate::net`] use the same
//! order when applying filters.

use crate::error::{Error, Result};
use crate::raster::{Plane, Residual};

/// Symmetric k^2 x k^2 positive semidefinite matrix accumulated over residual
/// samples, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub k: usize,
    pub dim: usize,
    pub sample_count: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn zeros(k: usize) -> Self {
        let dim = k * k;
        Self {
            k,
            dim,
            sample_count: 0,
            data: vec![0.0; dim * dim],
        }
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.dim + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, v: f64) {
        self.data[a * self.dim + b] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        for a in 0..self.dim {
            let row = &self.data[a * self.dim..(a + 1) * self.dim];
            let mut acc = 0.0;
            for (x, w) in v.iter().zip(row) {
                acc += x * w;
            }
            out[a] = acc;
        }
    }

    /// v^T Q v.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut acc = 0.0;
        for a in 0..self.dim {
            let row = &self.data[a * self.dim..(a + 1) * self.dim];
            let mut inner = 0.0;
            for (x, w) in v.iter().zip(row) {
                inner += x * w;
            }
            acc += v[a] * inner;
        }
        acc
    }

    pub fn add_assign(&mut self, other: &GramMatrix) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        self.sample_count += other.sample_count;
    }
}

/// Dense matrix D with D vec(f) = vec(x * f) for every k x k filter f.
/// Verification oracle only; guarded against accidental huge allocations.
#[derive(Clone, Debug)]
pub struct CirculantMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl CirculantMatrix {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matvec(&self, f: &[f64]) -> Vec<f64> {
        debug_assert_eq!(f.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] = row.iter().zip(f).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// D^T D as a GramMatrix with sample_count 1.
    pub fn gram(&self) -> GramMatrix {
        let k = (self.cols as f64).sqrt().round() as usize;
        debug_assert_eq!(k * k, self.cols);
        let mut g = GramMatrix::zeros(k);
        for a in 0..self.cols {
            for b in a..self.cols {
                let mut acc = 0.0;
                for r in 0..self.rows {
                    acc += self.get(r, a) * self.get(r, b);
                }
                g.set(a, b, acc);
                g.set(b, a, acc);
            }
        }
        g.sample_count = 1;
        g
    }
}

/// Full (true) 2-D convolution with zero padding:
/// out(i,j) = sum_{u,v} f(u,v) x(i-u, j-v), output (h+fh-1) x (w+fw-1).
pub fn conv2d_full(x: &Plane, f: &Plane) -> Result<Plane> {
    if x.height == 0 || x.width == 0 || f.height == 0 || f.width == 0 {
        return Err(Error::EmptyInput);
    }
    let oh = x.height + f.height - 1;
    let ow = x.width + f.width - 1;
    let mut out = Plane::zeros(oh, ow);
    for fy in 0..f.height {
        for fx in 0..f.width {
            let w = f.get(fy, fx);
            if w == 0.0 {
                continue;
            }
            for iy in 0..x.height {
                let src = x.row(iy);
                let dst = &mut out.row_mut(iy + fy)[fx..fx + x.width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    Ok(out)
}

/// Dense D such that D vec(f) = vec(conv2d_full(y, f)) for k x k filters,
/// rows indexed by output pixel (row-major), columns by filter coefficient.
pub fn build_circulant(y: &Plane, k: usize) -> Result<CirculantMatrix> {
    if y.height == 0 || y.width == 0 || k == 0 {
        return Err(Error::EmptyInput);
    }
    let l = (y.height + k - 1) * (y.width + k - 1);
    let cols = k * k;
    if l * cols > 4_000_000 {
        return Err(Error::CirculantTooLarge {
            height: y.height,
            width: y.width,
            k,
        });
    }
    let ow = y.width + k - 1;
    let mut data = vec![0.0; l * cols];
    for i in 0..y.height + k - 1 {
        for j in 0..ow {
            let row = (i * ow + j) * cols;
            for u in 0..k {
                for v in 0..k {
                    let sy = i as isize - u as isize;
                    let sx = j as isize - v as isize;
                    if sy >= 0 && sx >= 0 && (sy as usize) < y.height && (sx as usize) < y.width {
                        data[row + u * k + v] = y.get(sy as usize, sx as usize);
                    }
                }
            }
        }
    }
    Ok(CirculantMatrix {
        rows: l,
        cols,
        data,
    })
}

/// Autocorrelation of y at integer lag (dy, dx) with zero padding outside.
fn autocorr_at(y: &Plane, dy: isize, dx: isize) -> f64 {
    debug_assert!(dy >= 0);
    let h = y.height as isize;
    let w = y.width as isize;
    if dy >= h || dx.abs() >= w {
        return 0.0;
    }
    let n0 = (-dx).max(0) as usize;
    let n1 = (w - dx.max(0)) as usize;
    let mut acc = 0.0;
    for m in 0..(h - dy) as usize {
        let a = &y.row(m)[n0..n1];
        let b_row = y.row(m + dy as usize);
        let b = &b_row[(n0 as isize + dx) as usize..(n1 as isize + dx) as usize];
        let mut dot = 0.0;
        for (p, q) in a.iter().zip(b) {
            dot += p * q;
        }
        acc += dot;
    }
    acc
}

/// D^T D computed without materializing D: entry (a, b) equals the
/// autocorrelation of y at the lag between the two coefficient offsets.
pub fn gram_from_autocorr(y: &Plane, k: usize) -> Result<GramMatrix> {
    if y.height == 0 || y.width == 0 || k == 0 {
        return Err(Error::EmptyInput);
    }
    let span = k as isize - 1;
    // r[(dy + span, dx + span)] = autocorrelation at lag (dy, dx).
    let table = 2 * k - 1;
    let mut r = vec![0.0; table * table];
    for dy in 0..=span {
        for dx in -span..=span {
            if dy == 0 && dx < 0 {
                continue;
            }
            let v = autocorr_at(y, dy, dx);
            r[(dy + span) as usize * table + (dx + span) as usize] = v;
            r[(span - dy) as usize * table + (span - dx) as usize] = v;
        }
    }
    let mut g = GramMatrix::zeros(k);
    for a in 0..k * k {
        let (ua, va) = ((a / k) as isize, (a % k) as isize);
        for b in 0..k * k {
            let (ub, vb) = ((b / k) as isize, (b % k) as isize);
            let dy = ua - ub;
            let dx = va - vb;
            g.set(a, b, r[(dy + span) as usize * table + (dx + span) as usize]);
        }
    }
    g.sample_count = 1;
    Ok(g)
}

/// Per-channel sum of D_n^T D_n over all residual samples.
pub fn accumulate_gram(residuals: &[Residual], k: usize) -> Result<Vec<GramMatrix>> {
    let first = residuals.first().ok_or(Error::EmptySampleSet)?;
    let channels = first.channels();
    for r in residuals {
        if r.channels() != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: r.channels(),
            });
        }
    }
    let mut out = vec![GramMatrix::zeros(k); channels];
    for res in residuals {
        for (c, acc) in out.iter_mut().enumerate() {
            let g = gram_from_autocorr(&res.plane(c), k)?;
            acc.add_assign(&g);
        }
    }
    Ok(out)
}
