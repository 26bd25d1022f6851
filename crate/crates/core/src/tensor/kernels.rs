//! Raw compute kernels on flat NCHW buffers. Shape validation happens in the
//! graph layer; everything here assumes conforming sizes.

use rayon::prelude::*;

use super::{gemm, Real, Tensor};
use crate::error::{PdseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        x: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(PdseError::shape(op, x, weight)),
        };
        let (o, i, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(PdseError::shape(op, x, weight)),
        };
        if i != c {
            return Err(PdseError::shape(op, x, weight));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(PdseError::invalid(op, format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(PdseError::invalid(op, "stride must be >= 1"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(PdseError::invalid(
                op,
                format!("non-positive output size for input {x:?}, kernel {k}, pad {pad}"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.ho, self.wo]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            let bo = b[o];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.o * p];
    out.par_chunks_mut(g.o * p)
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(out_n, x_n)| {
            if g.is_pointwise() {
                gemm(g.o, g.c, p, w, false, x_n, false, out_n, false);
            } else {
                let mut cols = vec![T::zero(); g.col_rows() * p];
                im2col(x_n, g, &mut cols);
                gemm(g.o, g.col_rows(), p, w, false, &cols, false, out_n, false);
            }
            add_bias(out_n, bias, p);
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Sums per-sample partial results in sample order so the reduction is
/// independent of the worker count.
fn ordered_sum<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let p = g.out_plane();
    let rows = g.col_rows();
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let d_n = &dout[n * g.o * p..(n + 1) * g.o * p];
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); g.o * rows];
                if g.is_pointwise() {
                    gemm(g.o, p, rows, d_n, false, x_n, true, &mut dw, false);
                } else {
                    let mut cols = vec![T::zero(); rows * p];
                    im2col(x_n, g, &mut cols);
                    gemm(g.o, p, rows, d_n, false, &cols, true, &mut dw, false);
                }
                dw
            });
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); g.in_len()];
                if g.is_pointwise() {
                    gemm(g.c, g.o, p, w, true, d_n, false, &mut dx, false);
                } else {
                    let mut dcols = vec![T::zero(); rows * p];
                    gemm(rows, g.o, p, w, true, d_n, false, &mut dcols, false);
                    col2im(&dcols, g, &mut dx);
                }
                dx
            });
            (dx, dw)
        })
        .collect();
    let mut dxs = Vec::new();
    let mut dws = Vec::new();
    for (dx, dw) in per_sample {
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
        if let Some(dw) = dw {
            dws.push(dw);
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.o];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let s = (n * g.o + o) * p;
                *acc += dout[s..s + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        dx: need_dx.then_some(dxs),
        dw: need_dw.then(|| ordered_sum(dws, g.o * rows)),
        db,
    }
}

/// Bilinear corner taps of a fractional sample position; taps outside the map
/// are dropped (zero padding).
#[derive(Clone, Copy, Debug)]
struct Taps<T> {
    idx: [usize; 4],
    wt: [T; 4],
    valid: [bool; 4],
    ly: T,
    lx: T,
}

#[inline]
fn taps<T: Real>(h: usize, w: usize, y: T, x: T) -> Option<Taps<T>> {
    let hf = T::c(h as f64);
    let wf = T::c(w as f64);
    if y <= -T::one() || x <= -T::one() || y >= hf || x >= wf {
        return None;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let y0 = y0.to_i64().unwrap_or(i64::MIN);
    let x0 = x0.to_i64().unwrap_or(i64::MIN);
    let one = T::one();
    let mut t = Taps {
        idx: [0; 4],
        wt: [
            (one - ly) * (one - lx),
            (one - ly) * lx,
            ly * (one - lx),
            ly * lx,
        ],
        valid: [false; 4],
        ly,
        lx,
    };
    for (j, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let yy = y0 + dy;
        let xx = x0 + dx;
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            t.valid[j] = true;
            t.idx[j] = yy as usize * w + xx as usize;
        }
    }
    Some(t)
}

#[inline]
fn tap_values<T: Real>(plane: &[T], t: &Taps<T>) -> [T; 4] {
    let mut v = [T::zero(); 4];
    for j in 0..4 {
        if t.valid[j] {
            v[j] = plane[t.idx[j]];
        }
    }
    v
}

#[inline]
fn interp<T: Real>(v: &[T; 4], t: &Taps<T>) -> T {
    t.wt[0] * v[0] + t.wt[1] * v[1] + t.wt[2] * v[2] + t.wt[3] * v[3]
}

/// Partial derivatives of the interpolated value w.r.t. `(y, x)`.
#[inline]
fn interp_dyx<T: Real>(v: &[T; 4], t: &Taps<T>) -> (T, T) {
    let one = T::one();
    let dy = (one - t.lx) * (v[2] - v[0]) + t.lx * (v[3] - v[1]);
    let dx = (one - t.ly) * (v[1] - v[0]) + t.ly * (v[3] - v[2]);
    (dy, dx)
}

#[inline]
fn lattice_margin(v: f64) -> f64 {
    let f = v - v.floor();
    f.min(1.0 - f)
}

/// Samples every channel of a `[C, H, W]` map at fractional `(y, x)` with
/// bilinear interpolation. Positions outside the map read as zero.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, y: T, x: T) -> Result<Vec<T>> {
    let (c, h, w) = chw(map)?;
    let mut out = vec![T::zero(); c];
    if let Some(t) = taps(h, w, y, x) {
        for (ch, o) in out.iter_mut().enumerate() {
            *o = interp(&tap_values(&map.data()[ch * h * w..(ch + 1) * h * w], &t), &t);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BilinearGrad<T> {
    /// Gradient w.r.t. every map value, same shape as the map.
    pub d_map: Tensor<T>,
    pub dy: T,
    pub dx: T,
}

/// Vector-Jacobian product of [`bilinear_sample`] for upstream gradient `upstream` (length C).
pub fn bilinear_sample_grad<T: Real>(map: &Tensor<T>, y: T, x: T, upstream: &[T]) -> Result<BilinearGrad<T>> {
    let (c, h, w) = chw(map)?;
    if upstream.len() != c {
        return Err(PdseError::shape("bilinear_sample_grad", map.shape(), &[upstream.len()]));
    }
    let mut d_map = Tensor::zeros(map.shape());
    let (mut dy, mut dx) = (T::zero(), T::zero());
    if let Some(t) = taps(h, w, y, x) {
        for ch in 0..c {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            let v = tap_values(plane, &t);
            let (gy, gx) = interp_dyx(&v, &t);
            dy += upstream[ch] * gy;
            dx += upstream[ch] * gx;
            let dplane = &mut d_map.data_mut()[ch * h * w..(ch + 1) * h * w];
            for j in 0..4 {
                if t.valid[j] {
                    dplane[t.idx[j]] += upstream[ch] * t.wt[j];
                }
            }
        }
    }
    Ok(BilinearGrad { d_map, dy, dx })
}

fn chw<T: Real>(map: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *map.shape() {
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(PdseError::invalid(
            "bilinear_sample",
            format!("expected C×H×W map, got {:?}", map.shape()),
        )),
    }
}

#[inline]
fn sample_pos<T: Real>(g: &ConvGeom, off: &[T], t: usize, p: usize) -> (T, T) {
    let plane = g.out_plane();
    let (oy, ox) = (p / g.wo, p % g.wo);
    let (ky, kx) = (t / g.k, t % g.k);
    let base_y = (oy * g.stride + ky) as f64 - g.pad as f64;
    let base_x = (ox * g.stride + kx) as f64 - g.pad as f64;
    (
        T::c(base_y) + off[2 * t * plane + p],
        T::c(base_x) + off[(2 * t + 1) * plane + p],
    )
}

fn deform_im2col<T: Real>(x: &[T], off: &[T], g: &ConvGeom, cols: &mut [T]) -> f64 {
    let p = g.out_plane();
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    let mut margin = f64::INFINITY;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for t in 0..kk {
        for q in 0..p {
            let (y, xx) = sample_pos(g, off, t, q);
            margin = margin.min(lattice_margin(y.f64())).min(lattice_margin(xx.f64()));
            let Some(tp) = taps(g.h, g.w, y, xx) else { continue };
            for c in 0..g.c {
                let v = tap_values(&x[c * hw..(c + 1) * hw], &tp);
                cols[(c * kk + t) * p + q] = interp(&v, &tp);
            }
        }
    }
    margin
}

/// Deformable convolution. `off` is `N × 2k² × Ho × Wo` with `(dy, dx)` pairs per tap.
/// Returns the output and the smallest distance of any sample coordinate to the
/// integer lattice, where the interpolant is not differentiable.
pub(crate) fn deform_conv2d_forward<T: Real>(
    x: &[T],
    off: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, f64) {
    let p = g.out_plane();
    let rows = g.col_rows();
    let off_len = 2 * g.k * g.k * p;
    let mut out = vec![T::zero(); g.n * g.o * p];
    let margins: Vec<f64> = out
        .par_chunks_mut(g.o * p)
        .zip(x.par_chunks(g.in_len()))
        .zip(off.par_chunks(off_len))
        .map(|((out_n, x_n), off_n)| {
            let mut cols = vec![T::zero(); rows * p];
            let m = deform_im2col(x_n, off_n, g, &mut cols);
            gemm(g.o, rows, p, w, false, &cols, false, out_n, false);
            add_bias(out_n, bias, p);
            m
        })
        .collect();
    (out, margins.into_iter().fold(f64::INFINITY, f64::min))
}

pub(crate) struct DeformGrads<T> {
    pub dx: Option<Vec<T>>,
    pub doff: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_conv2d_backward<T: Real>(
    x: &[T],
    off: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_doff: bool,
    need_dw: bool,
    need_db: bool,
) -> DeformGrads<T> {
    let p = g.out_plane();
    let rows = g.col_rows();
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    let off_len = 2 * kk * p;
    type Part<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);
    let parts: Vec<Part<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let off_n = &off[n * off_len..(n + 1) * off_len];
            let d_n = &dout[n * g.o * p..(n + 1) * g.o * p];
            let dw = need_dw.then(|| {
                let mut cols = vec![T::zero(); rows * p];
                deform_im2col(x_n, off_n, g, &mut cols);
                let mut dw = vec![T::zero(); g.o * rows];
                gemm(g.o, p, rows, d_n, false, &cols, true, &mut dw, false);
                dw
            });
            let (dx, doff) = if need_dx || need_doff {
                let mut dcols = vec![T::zero(); rows * p];
                gemm(rows, g.o, p, w, true, d_n, false, &mut dcols, false);
                let mut dx = vec![T::zero(); g.in_len()];
                let mut doff = vec![T::zero(); off_len];
                for t in 0..kk {
                    for q in 0..p {
                        let (y, xx) = sample_pos(g, off_n, t, q);
                        let Some(tp) = taps(g.h, g.w, y, xx) else { continue };
                        let (mut gy, mut gx) = (T::zero(), T::zero());
                        for c in 0..g.c {
                            let gc = dcols[(c * kk + t) * p + q];
                            let plane = &x_n[c * hw..(c + 1) * hw];
                            if need_doff {
                                let v = tap_values(plane, &tp);
                                let (vy, vx) = interp_dyx(&v, &tp);
                                gy += gc * vy;
                                gx += gc * vx;
                            }
                            if need_dx {
                                let dplane = &mut dx[c * hw..(c + 1) * hw];
                                for j in 0..4 {
                                    if tp.valid[j] {
                                        dplane[tp.idx[j]] += gc * tp.wt[j];
                                    }
                                }
                            }
                        }
                        doff[2 * t * p + q] = gy;
                        doff[(2 * t + 1) * p + q] = gx;
                    }
                }
                (need_dx.then_some(dx), need_doff.then_some(doff))
            } else {
                (None, None)
            };
            (dx, doff, dw)
        })
        .collect();
    let mut dxs = Vec::new();
    let mut doffs = Vec::new();
    let mut dws = Vec::new();
    for (dx, doff, dw) in parts {
        if let Some(v) = dx {
            dxs.extend(v);
        }
        if let Some(v) = doff {
            doffs.extend(v);
        }
        if let Some(v) = dw {
            dws.push(v);
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.o];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let s = (n * g.o + o) * p;
                *acc += dout[s..s + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    DeformGrads {
        dx: need_dx.then_some(dxs),
        doff: need_doff.then_some(doffs),
        dw: need_dw.then(|| ordered_sum(dws, g.o * rows)),
        db,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub nc: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(op: &'static str, x: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(PdseError::invalid(op, format!("expected NCHW input, got {x:?}"))),
        };
        if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(PdseError::invalid(
                op,
                format!("invalid window k={k} stride={stride} pad={pad} for {x:?}"),
            ));
        }
        Ok(Self {
            nc: n * c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn window(&self, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        (0..self.k).flat_map(move |dy| {
            (0..self.k).filter_map(move |dx| {
                let y = y0 + dy as isize;
                let x = x0 + dx as isize;
                (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
                    .then_some((y as usize, x as usize))
            })
        })
    }
}

/// Max pooling with padding treated as -inf. Returns the output, the flat
/// argmax index per output, and the smallest gap between a window's maximum and
/// runner-up.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>, f64) {
    let plane_in = g.h * g.w;
    let mut out = Vec::with_capacity(g.nc * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    let mut margin = f64::INFINITY;
    for nc in 0..g.nc {
        let base = nc * plane_in;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut second = T::neg_infinity();
                let mut best_i = usize::MAX;
                for (y, xx) in g.window(oy, ox) {
                    let i = base + y * g.w + xx;
                    let v = x[i];
                    if v > best {
                        second = best;
                        best = v;
                        best_i = i;
                    } else if v > second {
                        second = v;
                    }
                }
                if second.is_finite() {
                    margin = margin.min((best - second).f64());
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, margin)
}

/// Average pooling over zero-padded windows, always dividing by `k²`.
pub(crate) fn avgpool_forward<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let plane_in = g.h * g.w;
    let inv = T::one() / T::c((g.k * g.k) as f64);
    let mut out = Vec::with_capacity(g.nc * g.ho * g.wo);
    for nc in 0..g.nc {
        let base = nc * plane_in;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let s: T = g.window(oy, ox).map(|(y, xx)| x[base + y * g.w + xx]).sum();
                out.push(s * inv);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Real>(dout: &[T], g: &PoolGeom) -> Vec<T> {
    let plane_in = g.h * g.w;
    let inv = T::one() / T::c((g.k * g.k) as f64);
    let mut dx = vec![T::zero(); g.nc * plane_in];
    let mut o = 0;
    for nc in 0..g.nc {
        let base = nc * plane_in;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let gv = dout[o] * inv;
                o += 1;
                for (y, xx) in g.window(oy, ox) {
                    dx[base + y * g.w + xx] += gv;
                }
            }
        }
    }
    dx
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); nc * h2 * w2];
    for p in 0..nc {
        for y in 0..h2 {
            let src = &x[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let dst = &mut out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
            for (xx, v) in dst.iter_mut().enumerate() {
                *v = src[xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(dout: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[(p * h + y / 2) * w + xx / 2] += dout[(p * h2 + y) * w2 + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_lattice_and_midpoint() {
        let map = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&map, 0.5, 0.5).unwrap(), vec![2.5]);
        assert_eq!(bilinear_sample(&map, 1.0, 1.0).unwrap(), vec![4.0]);
        assert_eq!(bilinear_sample(&map, 0.0, 1.0).unwrap(), vec![2.0]);
        assert_eq!(bilinear_sample(&map, -5.0, -5.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&map, 2.0, 0.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&map, -1.0, 0.0).unwrap(), vec![0.0]);
        // half a pixel outside the border blends with zero padding
        assert_eq!(bilinear_sample(&map, -0.5, 0.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn bilinear_grad_matches_difference() {
        let map = Tensor::<f64>::new(&[1, 3, 3], (0..9).map(|v| (v * v) as f64).collect()).unwrap();
        let (y, x) = (0.3, 1.7);
        let g = bilinear_sample_grad(&map, y, x, &[1.0]).unwrap();
        let h = 1e-6;
        let fd_y = (bilinear_sample(&map, y + h, x).unwrap()[0] - bilinear_sample(&map, y - h, x).unwrap()[0]) / (2.0 * h);
        let fd_x = (bilinear_sample(&map, y, x + h).unwrap()[0] - bilinear_sample(&map, y, x - h).unwrap()[0]) / (2.0 * h);
        assert!((g.dy - fd_y).abs() < 1e-6);
        assert!((g.dx - fd_x).abs() < 1e-6);
        let total: f64 = g.d_map.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_replicates() {
        let out = upsample2x_forward(&[1.0f32, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(
            out,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let back = upsample2x_backward(&out, 1, 2, 2);
        assert_eq!(back, vec![4.0, 8.0, 12.0, 16.0]);
    }
}
