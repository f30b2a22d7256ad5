//! Convolution kernels (NCHW layout) built on im2col + GEMM.

use crate::grad::float::Float;
use crate::grad::tape::Var;
use crate::grad::tensor::{matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Self {
        let &[n, c_in, h, w] = input else {
            panic!("conv input must be NCHW, got {input:?}")
        };
        let &[_, wc, kh, kw] = weight else {
            panic!("conv weight must be (Cout, Cin, kh, kw), got {weight:?}")
        };
        assert_eq!(wc, c_in, "conv weight expects {wc} input channels, input has {c_in}");
        assert!(stride >= 1, "stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        Self {
            n,
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        }
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output positions per image.
    pub fn p(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `[lo, hi)` whose input column `ow * stride + j - pad`
/// falls inside `0..w`.
fn valid_cols(g: &ConvGeometry, j: usize) -> (usize, usize) {
    let lo = if g.pad > j { (g.pad - j).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > j {
        ((g.w - 1 + g.pad - j) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Column matrix `(C*kh*kw, N*P)` with zero padding.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    // Rows are produced in memory order, so the buffer is filled by
    // appending instead of zeroing first.
    let mut cols = Vec::with_capacity(g.k() * g.n * g.p());
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_cols(g, j);
                for n in 0..g.n {
                    let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.h_out {
                        let ih = (oh * g.stride + i) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize || lo >= hi {
                            cols.resize(cols.len() + g.w_out, T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * g.w..][..g.w];
                        let first = lo * g.stride + j - g.pad;
                        cols.resize(cols.len() + lo, T::zero());
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[first..first + hi - lo]);
                        } else {
                            cols.extend((0..hi - lo).map(|k| src[first + k * g.stride]));
                        }
                        cols.resize(cols.len() + g.w_out - hi, T::zero());
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto the input layout.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut x = vec![T::zero(); g.n * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * np..(row + 1) * np];
                let (lo, hi) = valid_cols(g, j);
                if lo >= hi {
                    continue;
                }
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.h_out {
                        let ih = (oh * g.stride + i) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * g.w..][..g.w];
                        let base = n * p + oh * g.w_out;
                        let first = lo * g.stride + j - g.pad;
                        let seg = &src[base + lo..base + hi];
                        if g.stride == 1 {
                            for (d, &v) in dst[first..first + seg.len()].iter_mut().zip(seg) {
                                *d += v;
                            }
                        } else {
                            for (k, &v) in seg.iter().enumerate() {
                                dst[first + k * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(Cout, N*P)` -> NCHW
fn cols_to_nchw<T: Float>(m: &[T], c_out: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c_out * p];
    for co in 0..c_out {
        for b in 0..n {
            out[(b * c_out + co) * p..][..p].copy_from_slice(&m[co * n * p + b * p..][..p]);
        }
    }
    out
}

/// NCHW -> `(Cout, N*P)`
fn nchw_to_cols<T: Float>(x: &[T], c_out: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c_out * p];
    for co in 0..c_out {
        for b in 0..n {
            out[co * n * p + b * p..][..p].copy_from_slice(&x[(b * c_out + co) * p..][..p]);
        }
    }
    out
}

fn bias_grad<T: Float>(g: &[T], c_out: usize, n: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c_out];
    for b in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += g[(b * c_out + co) * p..][..p].iter().copied().sum::<T>();
        }
    }
    db
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], n: usize, p: usize) {
    let c_out = bias.len();
    for b in 0..n {
        for (co, &bv) in bias.iter().enumerate() {
            out[(b * c_out + co) * p..][..p].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Bilinear sample of one plane at fractional `(y, x)`; zero outside.
/// Returns the value and the four `(index, weight)` taps.
#[inline]
fn bilinear_taps<T: Float>(h: usize, w: usize, y: T, x: T) -> [(usize, T); 4] {
    let mut taps = [(0usize, T::zero()); 4];
    let (hf, wf) = (T::lit(h as f64), T::lit(w as f64));
    let neg1 = -T::one();
    if y <= neg1 || y >= hf || x <= neg1 || x >= wf {
        return taps;
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let y0i = y0.to_i64().unwrap_or(-1);
    let x0i = x0.to_i64().unwrap_or(-1);
    let corners = [
        (y0i, x0i, hy * hx),
        (y0i, x0i + 1, hy * lx),
        (y0i + 1, x0i, ly * hx),
        (y0i + 1, x0i + 1, ly * lx),
    ];
    for (t, &(yy, xx, wt)) in taps.iter_mut().zip(&corners) {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            *t = (yy as usize * w + xx as usize, wt);
        }
    }
    taps
}

/// Sample `plane` at fractional `(y, x)` with zero padding.
pub fn bilinear_sample<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    bilinear_taps(h, w, y, x)
        .iter()
        .map(|&(i, wt)| if wt == T::zero() { T::zero() } else { wt * plane[i] })
        .fold(T::zero(), |a, b| a + b)
}

/// Partial derivatives of the bilinear sample with respect to `(y, x)`.
fn bilinear_grad<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T) {
    let (hf, wf) = (T::lit(h as f64), T::lit(w as f64));
    let neg1 = -T::one();
    if y <= neg1 || y >= hf || x <= neg1 || x >= wf {
        return (T::zero(), T::zero());
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let y0i = y0.to_i64().unwrap_or(-1);
    let x0i = x0.to_i64().unwrap_or(-1);
    let at = |yy: i64, xx: i64| {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            plane[yy as usize * w + xx as usize]
        } else {
            T::zero()
        }
    };
    let (v00, v01, v10, v11) = (at(y0i, x0i), at(y0i, x0i + 1), at(y0i + 1, x0i), at(y0i + 1, x0i + 1));
    let one = T::one();
    let dy = (one - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (one - ly) * (v01 - v00) + ly * (v11 - v10);
    (dy, dx)
}

/// Column matrix for deformable convolution. Offsets are
/// `(N, 2*kh*kw, Ho, Wo)` with channel `2t` the row shift and `2t+1` the
/// column shift of tap `t = i*kw + j`.
fn deform_im2col<T: Float>(x: &[T], off: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, np, taps) = (g.p(), g.n * g.p(), g.kh * g.kw);
    let mut cols = vec![T::zero(); g.k() * np];
    for n in 0..g.n {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let t = i * g.kw + j;
                let oy = &off[((n * 2 * taps) + 2 * t) * p..][..p];
                let ox = &off[((n * 2 * taps) + 2 * t + 1) * p..][..p];
                for oh in 0..g.h_out {
                    for ow in 0..g.w_out {
                        let q = oh * g.w_out + ow;
                        let y = T::lit((oh * g.stride + i) as f64 - g.pad as f64) + oy[q];
                        let xx = T::lit((ow * g.stride + j) as f64 - g.pad as f64) + ox[q];
                        let tp = bilinear_taps(g.h, g.w, y, xx);
                        for c in 0..g.c_in {
                            let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                            let mut v = T::zero();
                            for &(idx, wt) in &tp {
                                if wt != T::zero() {
                                    v += wt * plane[idx];
                                }
                            }
                            cols[(c * taps + t) * np + n * p + q] = v;
                        }
                    }
                }
            }
        }
    }
    cols
}

impl<T: Float> Var<T> {
    /// 2-D cross-correlation. `weight` is `(Cout, Cin, kh, kw)`; `bias` is
    /// `(Cout)`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let geo = ConvGeometry::new(self.shape(), weight.shape(), stride, pad);
        let c_out = weight.shape()[0];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[c_out], "bias must be (Cout)");
        }
        let (x, w) = (self.value().clone(), weight.value().clone());
        let (k, p) = (geo.k(), geo.p());
        // One GEMM per sample writes straight into NCHW; 1x1 convolutions
        // skip the column matrix.
        let one = ConvGeometry { n: 1, ..geo };
        let pointwise = geo.kh == 1 && geo.kw == 1 && stride == 1 && pad == 0;
        let in_len = geo.c_in * geo.h * geo.w;
        let mut out = vec![T::zero(); geo.n * c_out * p];
        for b in 0..geo.n {
            let xs = &x.data()[b * in_len..][..in_len];
            let owned;
            let cols: &[T] = if pointwise {
                xs
            } else {
                owned = im2col(xs, &one);
                &owned
            };
            matmul_into(
                w.data(),
                false,
                cols,
                false,
                &mut out[b * c_out * p..],
                c_out,
                k,
                p,
                false,
            );
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), geo.n, p);
        }
        let value = Tensor::from_vec(vec![geo.n, c_out, geo.h_out, geo.w_out], out);
        let mut parents: Vec<&Var<T>> = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().record(value, &parents, move |g, need| {
            let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
            let mut dw = need[1].then(|| vec![T::zero(); c_out * k]);
            let mut dcols = vec![T::zero(); if need[0] { k * p } else { 0 }];
            for b in 0..geo.n {
                let gm = &g.data()[b * c_out * p..][..c_out * p];
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx[b * in_len..][..in_len];
                    if pointwise {
                        matmul_into(w.data(), true, gm, false, dst, k, c_out, p, false);
                    } else {
                        matmul_into(w.data(), true, gm, false, &mut dcols, k, c_out, p, false);
                        dst.copy_from_slice(&col2im(&dcols, &one));
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    let xs = &x.data()[b * in_len..][..in_len];
                    let owned;
                    let cols: &[T] = if pointwise {
                        xs
                    } else {
                        owned = im2col(xs, &one);
                        &owned
                    };
                    matmul_into(gm, false, cols, true, dw, c_out, p, k, b > 0);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_vec(w.shape().to_vec(), d)),
            ];
            if has_bias {
                grads.push(need[2].then(|| Tensor::from_vec(vec![c_out], bias_grad(g.data(), c_out, geo.n, p))));
            }
            grads
        })
    }

    /// Deformable convolution: every kernel tap samples the input at its
    /// regular grid position plus a learned `(dy, dx)` offset, with bilinear
    /// interpolation and zero padding.
    pub fn deform_conv2d(
        &self,
        offsets: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Var<T> {
        let geo = ConvGeometry::new(self.shape(), weight.shape(), stride, pad);
        let taps = geo.kh * geo.kw;
        assert_eq!(
            offsets.shape(),
            &[geo.n, 2 * taps, geo.h_out, geo.w_out],
            "offsets must be (N, 2*kh*kw, Ho, Wo)"
        );
        let c_out = weight.shape()[0];
        let (x, off, w) = (self.value().clone(), offsets.value().clone(), weight.value().clone());
        let (k, p, np) = (geo.k(), geo.p(), geo.n * geo.p());
        let cols = deform_im2col(x.data(), off.data(), &geo);
        let mut m = vec![T::zero(); c_out * np];
        matmul_into(w.data(), false, &cols, false, &mut m, c_out, k, np, false);
        drop(cols);
        let mut out = cols_to_nchw(&m, c_out, geo.n, p);
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), geo.n, p);
        }
        let value = Tensor::from_vec(vec![geo.n, c_out, geo.h_out, geo.w_out], out);
        let mut parents: Vec<&Var<T>> = vec![self, offsets, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().record(value, &parents, move |g, need| {
            let gm = nchw_to_cols(g.data(), c_out, geo.n, p);
            let dcols = (need[0] || need[1]).then(|| {
                let mut d = vec![T::zero(); k * np];
                matmul_into(w.data(), true, &gm, false, &mut d, k, c_out, np, false);
                d
            });
            let (xd, od) = (x.data(), off.data());
            let mut dx = need[0].then(|| vec![T::zero(); xd.len()]);
            let mut doff = need[1].then(|| vec![T::zero(); od.len()]);
            if let Some(dcols) = &dcols {
                for n in 0..geo.n {
                    for i in 0..geo.kh {
                        for j in 0..geo.kw {
                            let t = i * geo.kw + j;
                            let ybase = ((n * 2 * taps) + 2 * t) * p;
                            let xbase = ((n * 2 * taps) + 2 * t + 1) * p;
                            for oh in 0..geo.h_out {
                                for ow in 0..geo.w_out {
                                    let q = oh * geo.w_out + ow;
                                    let y = T::lit((oh * geo.stride + i) as f64 - geo.pad as f64) + od[ybase + q];
                                    let xx = T::lit((ow * geo.stride + j) as f64 - geo.pad as f64) + od[xbase + q];
                                    let tp = bilinear_taps(geo.h, geo.w, y, xx);
                                    let (mut gy, mut gx) = (T::zero(), T::zero());
                                    for c in 0..geo.c_in {
                                        let gc = dcols[(c * taps + t) * np + n * p + q];
                                        if gc == T::zero() {
                                            continue;
                                        }
                                        let off_plane = (n * geo.c_in + c) * geo.h * geo.w;
                                        if let Some(dx) = dx.as_mut() {
                                            for &(idx, wt) in &tp {
                                                if wt != T::zero() {
                                                    dx[off_plane + idx] += gc * wt;
                                                }
                                            }
                                        }
                                        if doff.is_some() {
                                            let plane = &xd[off_plane..][..geo.h * geo.w];
                                            let (py, px) = bilinear_grad(plane, geo.h, geo.w, y, xx);
                                            gy += gc * py;
                                            gx += gc * px;
                                        }
                                    }
                                    if let Some(doff) = doff.as_mut() {
                                        doff[ybase + q] += gy;
                                        doff[xbase + q] += gx;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)),
                doff.map(|d| Tensor::from_vec(off.shape().to_vec(), d)),
                need[2].then(|| {
                    let cols = deform_im2col(xd, od, &geo);
                    let mut dw = vec![T::zero(); c_out * k];
                    matmul_into(&gm, false, &cols, true, &mut dw, c_out, np, k, false);
                    Tensor::from_vec(w.shape().to_vec(), dw)
                }),
            ];
            if has_bias {
                grads.push(need[3].then(|| Tensor::from_vec(vec![c_out], bias_grad(g.data(), c_out, geo.n, p))));
            }
            grads
        })
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        if factor == 1 {
            return self.clone();
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value().data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let s = &src[plane * h * w..][..h * w];
            let d = &mut out[plane * ho * wo..][..ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    d[y * wo + x] = s[(y / factor) * w + x / factor];
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, ho, wo], out);
        self.tape().record(value, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let s = &gd[plane * ho * wo..][..ho * wo];
                let d = &mut dx[plane * h * w..][..h * w];
                for y in 0..ho {
                    for x in 0..wo {
                        d[(y / factor) * w + x / factor] += s[y * wo + x];
                    }
                }
            }
            vec![Some(Tensor::from_vec(vec![n, c, h, w], dx))]
        })
    }
}
