//! Raw slice kernels behind the differentiable ops.
//!
//! Parallel paths only split work across disjoint output rows or chunks, and
//! each output element is accumulated in a fixed order, so results are
//! bit-identical regardless of the rayon thread count.

use rayon::prelude::*;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

/// Rows of `c` updated together, so each loaded row of `b` is reused.
const ROW_TILE: usize = 4;
/// Columns of `c` per pass, keeping the active rows of `c` in cache.
const COL_TILE: usize = 512;

/// `c[rows×n] += A[rows×k] · b[k×n]` for a tile of at most [`ROW_TILE`]
/// rows, with `a_at(r, p)` reading `A[r][p]`. Every element of `c` is
/// accumulated in ascending `p` order.
fn gemm_tile(k: usize, n: usize, a_at: impl Fn(usize, usize) -> f64, b: &[f64], c: &mut [f64]) {
    let rows = c.len() / n;
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        if rows == ROW_TILE {
            let (c0, rest) = c.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a_at(0, p), a_at(1, p), a_at(2, p), a_at(3, p));
                let bs = &b[p * n + j0..p * n + j1];
                for (jj, &bv) in bs.iter().enumerate() {
                    c0[jj] += a0 * bv;
                    c1[jj] += a1 * bv;
                    c2[jj] += a2 * bv;
                    c3[jj] += a3 * bv;
                }
            }
        } else {
            for (r, c_row) in c.chunks_mut(n).enumerate() {
                let c_seg = &mut c_row[j0..j1];
                for p in 0..k {
                    let arp = a_at(r, p);
                    let bs = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in c_seg.iter_mut().zip(bs) {
                        *cv += arp * bv;
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let tile = |(t, c_tile): (usize, &mut [f64])| {
        let i0 = t * ROW_TILE;
        gemm_tile(k, n, |r, p| a[(i0 + r) * k + p], b, c_tile);
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_TILE {
        c.par_chunks_mut(ROW_TILE * n).enumerate().for_each(tile);
    } else {
        c.chunks_mut(ROW_TILE * n).enumerate().for_each(tile);
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    // Rows of `b` are visited in small tiles shared by a band of `c` rows,
    // so `b` is streamed once per band rather than once per row.
    const BAND: usize = 8;
    const B_TILE: usize = 16;
    let band = |(t, c_band): (usize, &mut [f64])| {
        let i0 = t * BAND;
        for j0 in (0..n).step_by(B_TILE) {
            let j1 = (j0 + B_TILE).min(n);
            for (r, c_row) in c_band.chunks_mut(n).enumerate() {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for j in j0..j1 {
                    c_row[j] += dot(a_row, &b[j * k..(j + 1) * k]);
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > BAND {
        c.par_chunks_mut(BAND * n).enumerate().for_each(band);
    } else {
        c.chunks_mut(BAND * n).enumerate().for_each(band);
    }
}

/// Dot product over eight interleaved partial sums, combined in a fixed order.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let split = x.len() - x.len() % LANES;
    for (xc, yc) in x[..split].chunks_exact(LANES).zip(y[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += xc[l] * yc[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in x[split..].iter().zip(&y[split..]) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let tile = |(t, c_tile): (usize, &mut [f64])| {
        let i0 = t * ROW_TILE;
        gemm_tile(k, n, |r, p| a[p * m + i0 + r], b, c_tile);
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_TILE {
        c.par_chunks_mut(ROW_TILE * n).enumerate().for_each(tile);
    } else {
        c.chunks_mut(ROW_TILE * n).enumerate().for_each(tile);
    }
}

/// Geometry of one grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    /// Rows of the unfolded patch matrix per group.
    fn kdim(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn opix(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x[cin_g×h×w]` into `col[(cin_g·kh·kw)×(oh·ow)]` with zero padding.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let opix = g.opix();
    for c in 0..g.cin_g() {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * opix..(r + 1) * opix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`], accumulating into `dx`.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let opix = g.opix();
    for c in 0..g.cin_g() {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let src = &col[r * opix..(r + 1) * opix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cin_g, cout_g, kdim, opix) = (g.cin_g(), g.cout_g(), g.kdim(), g.opix());
    let mut out = vec![0.0; g.batch * g.cout * opix];
    let in_chunk = cin_g * g.h * g.w;
    out.par_chunks_mut(cout_g * opix)
        .enumerate()
        .for_each(|(unit, dst)| {
            let (b, grp) = (unit / g.groups, unit % g.groups);
            let xs = &x[(b * g.cin + grp * cin_g) * g.h * g.w..][..in_chunk];
            let ws = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            if g.is_pointwise() {
                gemm_nn(cout_g, kdim, opix, ws, xs, dst);
            } else {
                let mut col = vec![0.0; kdim * opix];
                im2col(g, xs, &mut col);
                gemm_nn(cout_g, kdim, opix, ws, &col, dst);
            }
            if let Some(bias) = bias {
                for (j, row) in dst.chunks_mut(opix).enumerate() {
                    let bv = bias[grp * cout_g + j];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (cin_g, cout_g, kdim, opix) = (g.cin_g(), g.cout_g(), g.kdim(), g.opix());
    let in_chunk = cin_g * g.h * g.w;
    let units = g.batch * g.groups;
    let unit_x = |unit: usize| {
        let (b, grp) = (unit / g.groups, unit % g.groups);
        &x[(b * g.cin + grp * cin_g) * g.h * g.w..][..in_chunk]
    };
    let unit_dout = |unit: usize| &dout[unit * cout_g * opix..(unit + 1) * cout_g * opix];

    let dx = need[0].then(|| {
        let mut dx = vec![0.0; x.len()];
        dx.par_chunks_mut(in_chunk)
            .enumerate()
            .for_each(|(unit, dxs)| {
                let grp = unit % g.groups;
                let ws = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                if g.is_pointwise() {
                    gemm_tn(kdim, cout_g, opix, ws, unit_dout(unit), dxs);
                } else {
                    let mut dcol = vec![0.0; kdim * opix];
                    gemm_tn(kdim, cout_g, opix, ws, unit_dout(unit), &mut dcol);
                    col2im(g, &dcol, dxs);
                }
            });
        dx
    });

    let dw = need[1].then(|| {
        let partials: Vec<Vec<f64>> = (0..units)
            .into_par_iter()
            .map(|unit| {
                let mut part = vec![0.0; cout_g * kdim];
                if g.is_pointwise() {
                    gemm_nt(cout_g, opix, kdim, unit_dout(unit), unit_x(unit), &mut part);
                } else {
                    let mut col = vec![0.0; kdim * opix];
                    im2col(g, unit_x(unit), &mut col);
                    gemm_nt(cout_g, opix, kdim, unit_dout(unit), &col, &mut part);
                }
                part
            })
            .collect();
        let mut dw = vec![0.0; w.len()];
        for (unit, part) in partials.iter().enumerate() {
            let grp = unit % g.groups;
            let dst = &mut dw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            for (d, p) in dst.iter_mut().zip(part) {
                *d += p;
            }
        }
        dw
    });

    let db = need[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let row = &dout[(b * g.cout + co) * opix..(b * g.cout + co + 1) * opix];
                *acc += row.iter().sum::<f64>();
            }
        }
        db
    });

    ConvGrads { dx, dw, db }
}

/// Source taps of one output coordinate under align-corners=false sampling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    x: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(x.par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (oy, t) in ty.iter().enumerate() {
                let r0 = &src[t.lo * w..(t.lo + 1) * w];
                let r1 = &src[t.hi * w..(t.hi + 1) * w];
                for (ox, s) in tx.iter().enumerate() {
                    let top = r0[s.lo] * (1.0 - s.frac) + r0[s.hi] * s.frac;
                    let bot = r1[s.lo] * (1.0 - s.frac) + r1[s.hi] * s.frac;
                    dst[oy * ow + ox] = top * (1.0 - t.frac) + bot * t.frac;
                }
            }
        });
    out
}

pub(crate) fn resize_backward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dout: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    dx.par_chunks_mut(h * w)
        .zip(dout.par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    let top = v * (1.0 - t.frac);
                    let bot = v * t.frac;
                    dst[t.lo * w + s.lo] += top * (1.0 - s.frac);
                    dst[t.lo * w + s.hi] += top * s.frac;
                    dst[t.hi * w + s.lo] += bot * (1.0 - s.frac);
                    dst[t.hi * w + s.hi] += bot * s.frac;
                }
            }
        });
    dx
}

/// 2×2 stride-2 max pooling; returns pooled values and the flat source
/// index of each maximum (first one wins on ties).
pub(crate) fn max_pool2(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let cands = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialise `x` with its axes reordered so output axis `i` is input axis
/// `perm[i]`.
pub(crate) fn permute(shape: &[usize], perm: &[usize], x: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return (out_shape, x.to_vec());
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..n / inner {
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        // advance the outer multi-index
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
