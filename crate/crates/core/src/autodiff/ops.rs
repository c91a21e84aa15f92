//! Differentiable operations.
//!
//! Layout is channels-first (`B×C×H×W`) throughout. Broadcasting is limited
//! to scalar ops and per-channel bias addition.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use rayon::prelude::*;

use super::Var;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
enum Trans {
    NN,
    TN,
    NT,
}

impl<'t> Var<'t> {
    fn expect_same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.expect_same_shape(other, "add")?;
        let out = zip_map(self.value(), other.value(), |a, b| a + b);
        Var::from_op("add", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.expect_same_shape(other, "sub")?;
        let out = zip_map(self.value(), other.value(), |a, b| a - b);
        Var::from_op("sub", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.expect_same_shape(other, "mul")?;
        let out = zip_map(self.value(), other.value(), |a, b| a * b);
        let (a, b) = (self.value.clone(), other.value.clone());
        Var::from_op("mul", out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| zip_map(g, &b, |x, y| x * y)),
                need[1].then(|| zip_map(g, &a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        Var::from_op("scale", self.value().map(|v| v * s), &[self], move |g, _| {
            vec![Some(g.map(|v| v * s))]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        Var::from_op("add_scalar", self.value().map(|v| v + s), &[self], |g, _| {
            vec![Some(g.clone())]
        })
    }

    /// Adds `bias[c]` to every element of channel `c` of a `B×C×…` tensor.
    pub fn add_channel(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || bias.shape() != [shape[1]] {
            return Err(Error::shape("add_channel", &shape, bias.shape()));
        }
        let (batch, ch, inner) = kernels::axis_split(&shape, 1);
        let mut out = self.value().data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias.value().data()[(i / inner) % ch];
        }
        Var::from_op(
            "add_channel",
            Tensor::from_parts(shape, out),
            &[self, bias],
            move |g, need| {
                let db = need[1].then(|| {
                    let mut db = vec![0.0; ch];
                    for b in 0..batch {
                        for (c, acc) in db.iter_mut().enumerate() {
                            let s = (b * ch + c) * inner;
                            *acc += g.data()[s..s + inner].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(vec![ch], db)
                });
                vec![Some(g.clone()), db]
            },
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        Var::from_op("sum", Tensor::scalar(self.value().sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, q) = (a[0], b[1]);
        let a3 = self.reshape([1, a[0], a[1]])?;
        let b3 = other.reshape([1, b[0], b[1]])?;
        a3.batched(&b3, Trans::NN, "matmul")?.reshape([m, q])
    }

    /// Batched product `A[i]·B[i]` of rank-3 tensors.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, Trans::NN, "bmm")
    }

    /// Batched product `A[i]ᵀ·B[i]`.
    pub fn bmm_tn(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, Trans::TN, "bmm_tn")
    }

    /// Batched product `A[i]·B[i]ᵀ`.
    pub fn bmm_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, Trans::NT, "bmm_nt")
    }

    fn batched(&self, other: &Var<'t>, trans: Trans, op: &'static str) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(op, sa, sb));
        }
        let batch = sa[0];
        let (m, k, n, ok) = match trans {
            Trans::NN => (sa[1], sa[2], sb[2], sa[2] == sb[1]),
            Trans::TN => (sa[2], sa[1], sb[2], sa[1] == sb[1]),
            Trans::NT => (sa[1], sa[2], sb[1], sa[2] == sb[2]),
        };
        if !ok {
            return Err(Error::shape(op, sa, sb));
        }
        self.tape
            .add_macs((batch * m * k * n) as u64);
        let (a, b) = (self.value.clone(), other.value.clone());
        let mut out = vec![0.0; batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            match trans {
                Trans::NN => kernels::gemm_nn(m, k, n, ai, bi, c),
                Trans::TN => kernels::gemm_tn(m, k, n, ai, bi, c),
                Trans::NT => kernels::gemm_nt(m, k, n, ai, bi, c),
            }
        });
        let out = Tensor::from_parts(vec![batch, m, n], out);
        Var::from_op(op, out, &[self, other], move |g, need| {
            let mut da = need[0].then(|| vec![0.0; a.numel()]);
            let mut db = need[1].then(|| vec![0.0; b.numel()]);
            for i in 0..batch {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    let dst = &mut da[i * m * k..(i + 1) * m * k];
                    match trans {
                        Trans::NN => kernels::gemm_nt(m, n, k, gi, bi, dst),
                        Trans::TN => kernels::gemm_nt(k, n, m, bi, gi, dst),
                        Trans::NT => kernels::gemm_nn(m, n, k, gi, bi, dst),
                    }
                }
                if let Some(db) = db.as_mut() {
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    match trans {
                        Trans::NN => kernels::gemm_tn(k, m, n, ai, gi, dst),
                        Trans::TN => kernels::gemm_nn(k, m, n, ai, gi, dst),
                        Trans::NT => kernels::gemm_tn(n, m, k, gi, ai, dst),
                    }
                }
            }
            vec![
                da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
                db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
            ]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Var::from_op("reshape", out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(orig, g.data().to_vec()))]
        })
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (shape, data) = kernels::permute(self.shape(), perm, self.value().data());
        let inv = kernels::inverse_perm(perm);
        Var::from_op("permute", Tensor::from_parts(shape, data), &[self], move |g, _| {
            let (s, d) = kernels::permute(g.shape(), &inv, g.data());
            vec![Some(Tensor::from_parts(s, d))]
        })
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Var::from_op("narrow", Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut dx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let s = (o * full + start) * inner;
                dx[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::from_op("concat", Tensor::from_parts(shape, out), parts, move |g, need| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g.data()[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(part_shapes)
                .zip(need)
                .map(|((d, s), &n)| n.then(|| Tensor::from_parts(s, d)))
                .collect()
        })
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
    pub fn gelu(&self) -> Result<Var<'t>> {
        let x = self.value.clone();
        Var::from_op("gelu", x.map(|v| v * normal_cdf(v)), &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |gv, v| gv * (normal_cdf(v) + v * normal_pdf(v))))]
        })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let y = Arc::new(self.value().map(sigmoid_scalar));
        let saved = y.clone();
        Var::from_op("sigmoid", y, &[self], move |g, _| {
            vec![Some(zip_map(g, &saved, |gv, s| gv * s * (1.0 - s)))]
        })
    }

    /// Softmax along `axis`, shifted by the running maximum for stability.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value().data();
        let mut y = vec![0.0; x.len()];
        if inner == 1 {
            let row = |(xr, yr): (&[f64], &mut [f64])| {
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (yv, &xv) in yr.iter_mut().zip(xr) {
                    *yv = (xv - max).exp();
                    z += *yv;
                }
                let inv = 1.0 / z;
                yr.iter_mut().for_each(|v| *v *= inv);
            };
            if x.len() >= kernels::PAR_THRESHOLD {
                x.par_chunks(len).zip(y.par_chunks_mut(len)).for_each(row);
            } else {
                x.chunks(len).zip(y.chunks_mut(len)).for_each(row);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (x[idx(j)] - max).exp();
                        y[idx(j)] = e;
                        z += e;
                    }
                    for j in 0..len {
                        y[idx(j)] /= z;
                    }
                }
            }
        }
        let y = Arc::new(Tensor::from_parts(shape, y));
        let saved = y.clone();
        Var::from_op("softmax", y, &[self], move |g, _| {
            let (gy, yv) = (g.data(), saved.data());
            let mut dx = vec![0.0; yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| gy[idx(j)] * yv[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] = yv[idx(j)] * (gy[idx(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layer_norm", &shape, gamma.shape()));
        }
        let rows = self.value().numel() / c;
        let x = self.value().data();
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gm[j] + bt[j];
            }
        }
        let gamma_v = gamma.value.clone();
        Var::from_op(
            "layer_norm",
            Tensor::from_parts(shape.clone(), y),
            &[self, gamma, beta],
            move |g, need| {
                let gd = g.data();
                let gm = gamma_v.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = need[0].then(|| vec![0.0; gd.len()]);
                for r in 0..rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            dx[r * c + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(shape, d)),
                    need[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                    need[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                ]
            },
        )
    }

    /// Bilinear resize of a `B×C×H×W` tensor (half-pixel centres,
    /// align-corners=false).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("bilinear_resize", format!("expected rank 4, got {s:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output extents must be ≥ 1"));
        }
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        let out = kernels::resize_forward(planes, (h, w), (out_h, out_w), self.value().data());
        Var::from_op(
            "bilinear_resize",
            Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out),
            &[self],
            move |g, _| {
                let dx = kernels::resize_backward(planes, (h, w), (out_h, out_w), g.data());
                vec![Some(Tensor::from_parts(s, dx))]
            },
        )
    }

    /// 2×2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2(&self) -> Result<Var<'t>> {
        let s = self.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::invalid("max_pool2", format!("needs B×C×H×W with even H, W; got {s:?}")));
        }
        let (out, arg) = kernels::max_pool2(s[0] * s[1], s[2], s[3], self.value().data());
        let n = self.value().numel();
        Var::from_op(
            "max_pool2",
            Tensor::from_parts(vec![s[0], s[1], s[2] / 2, s[3] / 2], out),
            &[self],
            move |g, _| {
                let mut dx = vec![0.0; n];
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                vec![Some(Tensor::from_parts(s, dx))]
            },
        )
    }
}

/// Grouped 2-D cross-correlation with zero padding.
///
/// `x` is `B×Cin×H×W`, `weight` is `Cout×(Cin/groups)×kh×kw`, `bias` is
/// `Cout`.
pub fn conv2d<'t>(x: &Var<'t>, weight: &Var<'t>, bias: Option<&Var<'t>>, spec: Conv2dSpec) -> Result<Var<'t>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv2d", xs, ws));
    }
    let Conv2dSpec { stride, pad, groups } = spec;
    if groups == 0 || stride == 0 {
        return Err(Error::invalid("conv2d", "stride and groups must be ≥ 1"));
    }
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if cin % groups != 0 || cout % groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("channels in={cin} out={cout} not divisible by groups={groups}"),
        ));
    }
    if ws[1] != cin / groups {
        return Err(Error::shape("conv2d", xs, ws));
    }
    let extent = |n: usize, k: usize| -> Result<usize> {
        let padded = n + 2 * pad;
        if padded < k || (padded - k) % stride != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("extent {n} with pad {pad}, kernel {k}, stride {stride} gives a non-integral output"),
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    let geom = ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        groups,
        oh: extent(h, kh)?,
        ow: extent(w, kw)?,
    };
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
        }
    }
    x.tape()
        .add_macs((batch * cout * geom.oh * geom.ow * (cin / groups) * kh * kw) as u64);
    let out = kernels::conv2d_forward(&geom, x.value().data(), weight.value().data(), bias.map(|b| b.value().data()));
    let out = Tensor::from_parts(vec![batch, cout, geom.oh, geom.ow], out);
    let (xv, wv) = (x.value.clone(), weight.value.clone());
    let has_bias = bias.is_some();
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Var::from_op("conv2d", out, &parents, move |g, need| {
        let grads = kernels::conv2d_backward(
            &geom,
            xv.data(),
            wv.data(),
            g.data(),
            [need[0], need[1], has_bias && need[2]],
        );
        let mut res = vec![
            grads.dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
            grads.dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
        ];
        if has_bias {
            res.push(grads.db.map(|d| Tensor::from_parts(vec![geom.cout], d)));
        }
        res
    })
}
