//! Dense forward/backward kernels for the convolution and mode-product ops.

use super::Axis;
use crate::exec;
use crate::real::{gemm, Operand, Real};

/// Upper bound on im2col buffer entries before the image is processed in
/// row bands.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride > 0, "conv stride must be positive");
        assert!(
            in_h + 2 * pad >= kh && in_w + 2 * pad >= kw,
            "conv kernel larger than padded input"
        );
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        let per_row = self.patch() * self.out_w;
        (IM2COL_BUDGET / per_row.max(1)).clamp(1, self.out_h)
    }

    /// Source pixel for output (oy, ox) under kernel tap (ky, kx).
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.in_h || x as usize >= self.in_w {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }
}

/// im2col for output rows `oy0..oy0+rows`: `[patch, rows*out_w]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, oy0: usize, rows: usize) -> Vec<T> {
    let n = rows * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut col = vec![T::zero(); g.patch() * n];
    exec::for_each_chunk(&mut col, n, |r, dst| {
        let ci = r / (g.kh * g.kw);
        let ky = (r / g.kw) % g.kh;
        let kx = r % g.kw;
        let src = &x[ci * plane..(ci + 1) * plane];
        for oy in 0..rows {
            for ox in 0..g.out_w {
                if let Some(p) = g.src(oy0 + oy, ox, ky, kx) {
                    dst[oy * g.out_w + ox] = src[p];
                }
            }
        }
    });
    col
}

/// Scatter-add of a `[patch, rows*out_w]` column buffer into `dx`.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, oy0: usize, rows: usize, dx: &mut [T]) {
    let n = rows * g.out_w;
    let plane = g.in_h * g.in_w;
    // Each input channel owns a disjoint slice of dx.
    exec::for_each_chunk(dx, plane, |ci, dst| {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * n..(r + 1) * n];
                for oy in 0..rows {
                    for ox in 0..g.out_w {
                        if let Some(p) = g.src(oy0 + oy, ox, ky, kx) {
                            dst[p] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.out_c * out_plane];
    let band = g.band_rows();
    let mut oy0 = 0;
    while oy0 < g.out_h {
        let rows = band.min(g.out_h - oy0);
        let n = rows * g.out_w;
        let col = im2col(x, g, oy0, rows);
        if rows == g.out_h {
            gemm(
                g.out_c,
                g.patch(),
                n,
                Operand::plain(w),
                Operand::plain(&col),
                &mut out,
                false,
            );
        } else {
            let mut blk = vec![T::zero(); g.out_c * n];
            gemm(
                g.out_c,
                g.patch(),
                n,
                Operand::plain(w),
                Operand::plain(&col),
                &mut blk,
                false,
            );
            for o in 0..g.out_c {
                let dst = o * out_plane + oy0 * g.out_w;
                out[dst..dst + n].copy_from_slice(&blk[o * n..(o + 1) * n]);
            }
        }
        oy0 += rows;
    }
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(out_plane).enumerate() {
            for v in chunk {
                *v += b[o];
            }
        }
    }
    out
}

pub(super) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let out_plane = g.out_h * g.out_w;
    let patch = g.patch();
    let mut dx = want_x.then(|| vec![T::zero(); g.in_c * g.in_h * g.in_w]);
    let mut dw = want_w.then(|| vec![T::zero(); g.out_c * patch]);
    let band = g.band_rows();
    let mut oy0 = 0;
    let mut first = true;
    while oy0 < g.out_h {
        let rows = band.min(g.out_h - oy0);
        let n = rows * g.out_w;
        let gblk: Vec<T> = if rows == g.out_h {
            grad.to_vec()
        } else {
            let mut b = Vec::with_capacity(g.out_c * n);
            for o in 0..g.out_c {
                let s = o * out_plane + oy0 * g.out_w;
                b.extend_from_slice(&grad[s..s + n]);
            }
            b
        };
        if let Some(dw) = dw.as_mut() {
            let col = im2col(x, g, oy0, rows);
            gemm(g.out_c, n, patch, Operand::plain(&gblk), Operand::t(&col), dw, !first);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcol = vec![T::zero(); patch * n];
            gemm(
                patch,
                g.out_c,
                n,
                Operand::t(w),
                Operand::plain(&gblk),
                &mut dcol,
                false,
            );
            col2im(&dcol, g, oy0, rows, dx);
        }
        first = false;
        oy0 += rows;
    }
    (dx, dw)
}

/// `out[o, y*k+ky, x*k+kx] = sum_c w[c,o,ky,kx] * x[c,y,x] + b[o]`.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv_transpose_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
) -> Vec<T> {
    let hw = h * wd;
    let okk = o * k * k;
    let mut t = vec![T::zero(); okk * hw];
    gemm(okk, c, hw, Operand::t(w), Operand::plain(x), &mut t, false);
    let (oh, ow) = (h * k, wd * k);
    let mut out = vec![T::zero(); o * oh * ow];
    exec::for_each_chunk(&mut out, oh * ow, |oc, dst| {
        let bv = bias.map_or(T::zero(), |b| b[oc]);
        for ky in 0..k {
            for kx in 0..k {
                let row = &t[((oc * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    for xx in 0..wd {
                        dst[(y * k + ky) * ow + xx * k + kx] = row[y * wd + xx] + bv;
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_transpose_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = h * wd;
    let okk = o * k * k;
    let ow = wd * k;
    let out_plane = h * k * ow;
    let mut dt = vec![T::zero(); okk * hw];
    exec::for_each_chunk(&mut dt, hw, |r, dst| {
        let oc = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let src = &grad[oc * out_plane..(oc + 1) * out_plane];
        for y in 0..h {
            for xx in 0..wd {
                dst[y * wd + xx] = src[(y * k + ky) * ow + xx * k + kx];
            }
        }
    });
    let dx = want_x.then(|| {
        let mut dx = vec![T::zero(); c * hw];
        gemm(c, okk, hw, Operand::plain(w), Operand::plain(&dt), &mut dx, false);
        dx
    });
    let dw = want_w.then(|| {
        let mut dw = vec![T::zero(); c * okk];
        gemm(c, hw, okk, Operand::plain(x), Operand::t(&dt), &mut dw, false);
        dw
    });
    (dx, dw)
}

pub(super) fn mode_apply_forward<T: Real>(x: &[T], xs: &[usize], m: &[T], ms: &[usize], axis: Axis) -> Vec<T> {
    let (c, r, q) = (xs[0], xs[1], xs[2]);
    let (p, d) = (ms[0], ms[1]);
    match axis {
        Axis::Channel => {
            assert_eq!(d, c, "mode_apply: channel size mismatch");
            let mut out = vec![T::zero(); p * r * q];
            gemm(p, c, r * q, Operand::plain(m), Operand::plain(x), &mut out, false);
            out
        }
        Axis::Row => {
            assert_eq!(d, r, "mode_apply: row size mismatch");
            let mut out = vec![T::zero(); c * p * q];
            exec::for_each_chunk(&mut out, p * q, |ch, dst| {
                let xc = &x[ch * r * q..(ch + 1) * r * q];
                gemm(p, r, q, Operand::plain(m), Operand::plain(xc), dst, false);
            });
            out
        }
        Axis::Col => {
            assert_eq!(d, q, "mode_apply: column size mismatch");
            let mut out = vec![T::zero(); c * r * p];
            gemm(c * r, q, p, Operand::plain(x), Operand::t(m), &mut out, false);
            out
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn mode_apply_backward<T: Real>(
    x: &[T],
    xs: &[usize],
    m: &[T],
    ms: &[usize],
    axis: Axis,
    g: &[T],
    want_x: bool,
    want_m: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (c, r, q) = (xs[0], xs[1], xs[2]);
    let (p, d) = (ms[0], ms[1]);
    match axis {
        Axis::Channel => {
            let dx = want_x.then(|| {
                let mut dx = vec![T::zero(); c * r * q];
                gemm(c, p, r * q, Operand::t(m), Operand::plain(g), &mut dx, false);
                dx
            });
            let dm = want_m.then(|| {
                let mut dm = vec![T::zero(); p * d];
                gemm(p, r * q, c, Operand::plain(g), Operand::t(x), &mut dm, false);
                dm
            });
            (dx, dm)
        }
        Axis::Row => {
            let dx = want_x.then(|| {
                let mut dx = vec![T::zero(); c * r * q];
                exec::for_each_chunk(&mut dx, r * q, |ch, dst| {
                    let gc = &g[ch * p * q..(ch + 1) * p * q];
                    gemm(r, p, q, Operand::t(m), Operand::plain(gc), dst, false);
                });
                dx
            });
            let dm = want_m.then(|| {
                let mut dm = vec![T::zero(); p * d];
                for ch in 0..c {
                    let gc = &g[ch * p * q..(ch + 1) * p * q];
                    let xc = &x[ch * r * q..(ch + 1) * r * q];
                    gemm(p, q, r, Operand::plain(gc), Operand::t(xc), &mut dm, ch > 0);
                }
                dm
            });
            (dx, dm)
        }
        Axis::Col => {
            let dx = want_x.then(|| {
                let mut dx = vec![T::zero(); c * r * q];
                gemm(c * r, p, q, Operand::plain(g), Operand::plain(m), &mut dx, false);
                dx
            });
            let dm = want_m.then(|| {
                let mut dm = vec![T::zero(); p * d];
                gemm(p, c * r, q, Operand::t(g), Operand::plain(x), &mut dm, false);
                dm
            });
            (dx, dm)
        }
    }
}
