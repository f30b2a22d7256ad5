//! Pixel-level interventions: luma scaling, chroma scaling, and amplitude
//! fusion in the Fourier domain, plus the contrastive loss that ranks the
//! encoded anchor against the positive and the intervention negatives.
//!
//! Every intervention exists twice: on [`Image`] in `f64` for inspection and
//! tests, and on NCHW [`Var`]s so the learnable strengths receive gradients.

use std::f64::consts::PI;

use crate::grad::{Ctx, Float, ParamBuilder, ParamId, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{
    fft_decompose, fft_reconstruct, rgb_to_ycrcb_px, ycrcb_to_rgb_px, ColorSpace, Image, Spectrum, CB_GAIN,
    CHROMA_OFFSET, CR_GAIN, KB, KG, KR,
};

/// Below this modulus a frequency bin has phase 0 and passes no gradient.
const BIN_FLOOR: f64 = 1e-6;

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PciInit {
    pub theta_b: f64,
    pub theta_c: [f64; 2],
    pub alpha: f64,
}

impl Default for PciInit {
    fn default() -> Self {
        Self {
            theta_b: 1.5,
            theta_c: [1.0, 1.0],
            alpha: 0.5,
        }
    }
}

/// Learnable intervention strengths, stored unconstrained:
/// `theta = softplus(raw)`, `alpha = sigmoid(raw)`.
#[derive(Clone, Debug)]
pub struct Pci {
    pub theta_b_raw: ParamId,
    pub theta_c_raw: ParamId,
    pub alpha_raw: ParamId,
}

/// Interventions of one batch.
pub struct Interventions<T: Float> {
    pub brightness: Var<T>,
    pub color: Var<T>,
    pub fused: Var<T>,
}

impl Pci {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, init: PciInit) -> Self {
        assert!(init.theta_b > 0.0 && init.theta_c.iter().all(|&t| t > 0.0));
        assert!(init.alpha > 0.0 && init.alpha < 1.0);
        let [c0, c1] = init.theta_c;
        let theta_c = Tensor::from_f64([2], &[softplus_inverse(c0), softplus_inverse(c1)]);
        Self {
            theta_b_raw: b.constant("theta_b_raw", &[1], softplus_inverse(init.theta_b)),
            theta_c_raw: b.tensor("theta_c_raw", theta_c, crate::grad::ParamKind::Trainable),
            alpha_raw: b.constant("alpha_raw", &[1], logit(init.alpha)),
        }
    }

    pub fn theta_b<T: Float>(&self, cx: &Ctx<'_, T>) -> Var<T> {
        cx.param(self.theta_b_raw).softplus()
    }

    pub fn theta_c<T: Float>(&self, cx: &Ctx<'_, T>) -> Var<T> {
        cx.param(self.theta_c_raw).softplus()
    }

    pub fn alpha<T: Float>(&self, cx: &Ctx<'_, T>) -> Var<T> {
        cx.param(self.alpha_raw).sigmoid()
    }

    /// Current `(theta_b, theta_c, alpha)` as plain numbers.
    pub fn values<T: Float>(&self, store: &crate::grad::ParamStore<T>) -> (f64, [f64; 2], f64) {
        let sp = |v: f64| if v > 30.0 { v } else { v.exp().ln_1p() };
        let tb = sp(store.get(self.theta_b_raw).item().as_f64());
        let tc = store.get(self.theta_c_raw).to_f64_vec();
        let a = store.get(self.alpha_raw).item().as_f64();
        (tb, [sp(tc[0]), sp(tc[1])], 1.0 / (1.0 + (-a).exp()))
    }

    /// All three interventions of an `N x 3 x H x W` batch.
    pub fn intervene<T: Float>(&self, cx: &Ctx<'_, T>, low: &Var<T>) -> Interventions<T> {
        let brightness = brightness_var(low, &self.theta_b(cx));
        let color = color_var(low, &self.theta_c(cx));
        let fused = frequency_fuse_var(&brightness, &color, &self.alpha(cx));
        Interventions {
            brightness,
            color,
            fused,
        }
    }
}

// ---- image-level reference ----

fn require_rgb(img: &Image) -> Result<()> {
    if img.colorspace() != ColorSpace::Rgb {
        return Err(Error::ColorSpace {
            expected: ColorSpace::Rgb,
            got: img.colorspace(),
        });
    }
    Ok(())
}

fn map_ycrcb(img: &Image, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Image> {
    require_rgb(img)?;
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        let ycc = rgb_to_ycrcb_px([px[0] as f64, px[1] as f64, px[2] as f64]).map(|v| v.clamp(0.0, 1.0));
        let ycc = f(ycc).map(|v| v.clamp(0.0, 1.0));
        data.extend(ycrcb_to_rgb_px(ycc).iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    Image::new(img.height(), img.width(), ColorSpace::Rgb, data)
}

/// `Y <- theta_b * Y`; chroma untouched.
pub fn brightness_intervene(img: &Image, theta_b: f64) -> Result<Image> {
    map_ycrcb(img, |[y, cr, cb]| [y * theta_b, cr, cb])
}

/// Chroma scaled about the neutral point: `C <- 0.5 + theta (C - 0.5)`.
pub fn color_intervene(img: &Image, theta_c: [f64; 2]) -> Result<Image> {
    map_ycrcb(img, |[y, cr, cb]| {
        [
            y,
            CHROMA_OFFSET + (cr - CHROMA_OFFSET) * theta_c[0],
            CHROMA_OFFSET + (cb - CHROMA_OFFSET) * theta_c[1],
        ]
    })
}

/// Amplitude `alpha A_b + (1 - alpha) A_c` with the phase of `i_b`; unclamped.
pub fn frequency_fuse(i_b: &Image, i_c: &Image, alpha: f64) -> Result<Image> {
    if !i_b.same_dims(i_c) {
        return Err(Error::Shape(format!(
            "fuse {}x{} with {}x{}",
            i_b.height(),
            i_b.width(),
            i_c.height(),
            i_c.width()
        )));
    }
    let sb = fft_decompose(i_b)?;
    let sc = fft_decompose(i_c)?;
    let amplitude = sb
        .amplitude
        .iter()
        .zip(&sc.amplitude)
        .map(|(a, c)| alpha * a + (1.0 - alpha) * c)
        .collect();
    fft_reconstruct(&Spectrum { amplitude, ..sb })
}

// ---- differentiable ----

/// RGB -> YCrCb as a `3 x 3` matrix plus offset.
fn forward_matrix() -> [[f64; 3]; 3] {
    [
        [KR, KG, KB],
        [CR_GAIN * (1.0 - KR), -CR_GAIN * KG, -CR_GAIN * KB],
        [-CB_GAIN * KR, -CB_GAIN * KG, CB_GAIN * (1.0 - KB)],
    ]
}

fn inverse_matrix() -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|r, c| forward_matrix()[r][c]);
    let inv = m.try_inverse().expect("color matrix is invertible");
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
}

const CHROMA_OFFSETS: [f64; 3] = [0.0, CHROMA_OFFSET, CHROMA_OFFSET];

fn mix_channels<T: Float>(x: &Var<T>, m: [[f64; 3]; 3], pre: [f64; 3], post: [f64; 3]) -> Var<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 3, "color conversion needs 3 channels");
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let mat = x.constant_like(Tensor::from_f64([3, 3], &flat));
    let pre = x.constant_like(Tensor::from_f64([1, 3, 1], &pre));
    let post = x.constant_like(Tensor::from_f64([1, 3, 1], &post));
    let xr = x.reshape(vec![n, 3, h * w]).sub(&pre);
    mat.matmul(&xr).add(&post).reshape(vec![n, 3, h, w])
}

/// Clamped RGB -> YCrCb of an `N x 3 x H x W` batch.
pub fn rgb_to_ycrcb_var<T: Float>(x: &Var<T>) -> Var<T> {
    mix_channels(x, forward_matrix(), [0.0; 3], CHROMA_OFFSETS).clamp(0.0, 1.0)
}

/// Clamped YCrCb -> RGB of an `N x 3 x H x W` batch.
pub fn ycrcb_to_rgb_var<T: Float>(x: &Var<T>) -> Var<T> {
    mix_channels(x, inverse_matrix(), CHROMA_OFFSETS, [0.0; 3]).clamp(0.0, 1.0)
}

/// Per-channel gains `(g_y, g_cr, g_cb)` about `(0, 0.5, 0.5)`; `gains` is a
/// `[3]` var.
fn scale_ycrcb<T: Float>(x: &Var<T>, gains: &Var<T>) -> Var<T> {
    let ycc = rgb_to_ycrcb_var(x);
    let off = x.constant_like(Tensor::from_f64([1, 3, 1, 1], &CHROMA_OFFSETS));
    let g = gains.reshape(vec![1, 3, 1, 1]);
    let scaled = ycc.sub(&off).mul(&g).add(&off).clamp(0.0, 1.0);
    ycrcb_to_rgb_var(&scaled)
}

/// Differentiable [`brightness_intervene`]; `theta_b` is a `[1]` var.
pub fn brightness_var<T: Float>(x: &Var<T>, theta_b: &Var<T>) -> Var<T> {
    let ones = x.constant_like(Tensor::ones(vec![2]));
    scale_ycrcb(x, &Var::concat(&[theta_b, &ones], 0))
}

/// Differentiable [`color_intervene`]; `theta_c` is a `[2]` var.
pub fn color_var<T: Float>(x: &Var<T>, theta_c: &Var<T>) -> Var<T> {
    let one = x.constant_like(Tensor::ones(vec![1]));
    scale_ycrcb(x, &Var::concat(&[&one, theta_c], 0))
}

/// `cos(2 pi u k / n)` and `sin(2 pi u k / n)` tables.
fn dft_tables<T: Float>(n: usize) -> (Tensor<T>, Tensor<T>) {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for u in 0..n {
        for k in 0..n {
            // Reduce the index first so large products keep full precision.
            let ang = 2.0 * PI * ((u * k) % n) as f64 / n as f64;
            c.push(ang.cos());
            s.push(ang.sin());
        }
    }
    (Tensor::from_f64([n, n], &c), Tensor::from_f64([n, n], &s))
}

/// Real and imaginary parts of the per-plane DFT of `x` (`B x H x W`).
fn dft_var<T: Float>(x: &Var<T>, tables: &DftTables<T>) -> (Var<T>, Var<T>) {
    let (ch, sh, cw, sw) = (&tables.ch, &tables.sh, &tables.cw, &tables.sw);
    let cx_ = ch.matmul(x);
    let sx_ = sh.matmul(x);
    let re = cx_.matmul(cw).sub(&sx_.matmul(sw));
    let im = sx_.matmul(cw).add(&cx_.matmul(sw)).neg();
    (re, im)
}

/// Real part of the inverse DFT (scaled by `1/HW`).
fn idft_real_var<T: Float>(re: &Var<T>, im: &Var<T>, tables: &DftTables<T>) -> Var<T> {
    let (ch, sh, cw, sw) = (&tables.ch, &tables.sh, &tables.cw, &tables.sw);
    let h = ch.shape()[0];
    let w = cw.shape()[0];
    let a = ch.matmul(re).matmul(cw);
    let b = sh.matmul(re).matmul(sw);
    let c = sh.matmul(im).matmul(cw);
    let d = ch.matmul(im).matmul(sw);
    a.sub(&b).sub(&c).sub(&d).mul_scalar(1.0 / (h * w) as f64)
}

struct DftTables<T: Float> {
    ch: Var<T>,
    sh: Var<T>,
    cw: Var<T>,
    sw: Var<T>,
}

impl<T: Float> DftTables<T> {
    fn new(like: &Var<T>, h: usize, w: usize) -> Self {
        let (ch, sh) = dft_tables::<T>(h);
        let (cw, sw) = dft_tables::<T>(w);
        Self {
            ch: like.constant_like(ch),
            sh: like.constant_like(sh),
            cw: like.constant_like(cw),
            sw: like.constant_like(sw),
        }
    }
}

/// `sqrt(re^2 + im^2)`, with zero gradient on bins below [`BIN_FLOOR`].
pub fn modulus_var<T: Float>(re: &Var<T>, im: &Var<T>) -> Var<T> {
    let (r, i) = (re.value().clone(), im.value().clone());
    let a = r.zip_map(&i, |x, y| (x * x + y * y).sqrt());
    let a_saved = a.clone();
    re.tape().record(a, &[re, im], move |g, need| {
        let floor = T::lit(BIN_FLOOR);
        let part = |num: &Tensor<T>| {
            let t = num.zip_map(&a_saved, |n, m| if m > floor { n / m } else { T::zero() });
            t.mul(g)
        };
        vec![need[0].then(|| part(&r)), need[1].then(|| part(&i))]
    })
}

/// `(cos P, sin P)` of the phase `P = atan2(im, re)`; bins below
/// [`BIN_FLOOR`] have phase 0 and pass no gradient.
pub fn phasor_var<T: Float>(re: &Var<T>, im: &Var<T>) -> (Var<T>, Var<T>) {
    let floor = T::lit(BIN_FLOOR);
    let (r, i) = (re.value().clone(), im.value().clone());
    let a = r.zip_map(&i, |x, y| (x * x + y * y).sqrt());
    let cos = r.zip_map(&a, |x, m| if m > floor { x / m } else { T::one() });
    let sin = i.zip_map(&a, |y, m| if m > floor { y / m } else { T::zero() });
    // d(re/A) = (im^2 dre - re im dim) / A^3 ; d(im/A) = (re^2 dim - re im dre) / A^3
    let jac = |num_r: fn(T, T) -> T, num_i: fn(T, T) -> T| {
        let (r, i, a) = (r.clone(), i.clone(), a.clone());
        move |g: &Tensor<T>, need: &[bool]| {
            let (rd, id, ad, gd) = (r.data(), i.data(), a.data(), g.data());
            let mut dr = vec![T::zero(); rd.len()];
            let mut di = vec![T::zero(); rd.len()];
            for k in 0..rd.len() {
                if ad[k] > floor {
                    let a3 = ad[k] * ad[k] * ad[k];
                    dr[k] = gd[k] * num_r(rd[k], id[k]) / a3;
                    di[k] = gd[k] * num_i(rd[k], id[k]) / a3;
                }
            }
            vec![
                need[0].then(|| Tensor::from_vec(r.shape().to_vec(), dr)),
                need[1].then(|| Tensor::from_vec(r.shape().to_vec(), di)),
            ]
        }
    };
    let cos_v = re.tape().record(cos, &[re, im], jac(|_, y| y * y, |x, y| -(x * y)));
    let sin_v = re.tape().record(sin, &[re, im], jac(|x, y| -(x * y), |x, _| x * x));
    (cos_v, sin_v)
}

/// Differentiable [`frequency_fuse`] on `N x C x H x W` batches; `alpha` is a
/// `[1]` var. Output is not clamped.
pub fn frequency_fuse_var<T: Float>(i_b: &Var<T>, i_c: &Var<T>, alpha: &Var<T>) -> Var<T> {
    assert_eq!(i_b.shape(), i_c.shape(), "fused images must share a shape");
    let (n, c, h, w) = i_b.dims4();
    let tables = DftTables::new(i_b, h, w);
    let (rb, ib) = dft_var(&i_b.reshape(vec![n * c, h, w]), &tables);
    let (rc, ic) = dft_var(&i_c.reshape(vec![n * c, h, w]), &tables);
    let a_b = modulus_var(&rb, &ib);
    let a_c = modulus_var(&rc, &ic);
    let alpha = alpha.reshape(vec![1, 1, 1]);
    let a_f = a_b.sub(&a_c).mul(&alpha).add(&a_c);
    let (cos, sin) = phasor_var(&rb, &ib);
    let out = idft_real_var(&a_f.mul(&cos), &a_f.mul(&sin), &tables);
    out.reshape(vec![n, c, h, w])
}

// ---- contrastive ----

/// Cosine similarity of matching rows of two `N x ...` vars, over each
/// sample's flattened features. Zero when either row has zero norm.
pub fn cosine_rows<T: Float>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_eq!(a.shape(), b.shape(), "cosine similarity of mismatched shapes");
    let n = a.shape()[0];
    let d = a.value().numel() / n.max(1);
    let (av, bv) = (a.value().clone(), b.value().clone());
    let mut sims = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    for r in 0..n {
        let (ar, br) = (&av.data()[r * d..][..d], &bv.data()[r * d..][..d]);
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (x, y) in ar.iter().zip(br) {
            let (x, y) = (x.as_f64(), y.as_f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        let s = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
        sims.push(T::lit(s));
        stats.push((s, na, nb));
    }
    let value = Tensor::from_vec(vec![n], sims);
    a.tape().record(value, &[a, b], move |g, need| {
        // ds/da = b / (|a||b|) - s a / |a|^2
        let grad_for = |x: &Tensor<T>, y: &Tensor<T>, first: bool| {
            let mut out = vec![T::zero(); x.numel()];
            for (r, &(s, na, nb)) in stats.iter().enumerate() {
                let (nx, ny) = if first { (na, nb) } else { (nb, na) };
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                let gr = g.data()[r].as_f64();
                let (c1, c2) = (gr / (nx * ny), gr * s / (nx * nx));
                let xs = &x.data()[r * d..][..d];
                let ys = &y.data()[r * d..][..d];
                for k in 0..d {
                    out[r * d + k] = T::lit(c1 * ys[k].as_f64() - c2 * xs[k].as_f64());
                }
            }
            Tensor::from_vec(x.shape().to_vec(), out)
        };
        vec![
            need[0].then(|| grad_for(&av, &bv, true)),
            need[1].then(|| grad_for(&bv, &av, false)),
        ]
    })
}

/// `-log(e^{tau s+} / (e^{tau s+} + sum_i e^{tau s_i}))` averaged over the
/// batch, with the max logit subtracted before exponentiating.
pub fn contrastive_loss<T: Float>(pos: &Var<T>, negs: &[&Var<T>], tau: f64) -> Var<T> {
    let n = pos.shape()[0];
    let mut cols = vec![pos.reshape(vec![n, 1])];
    cols.extend(negs.iter().map(|s| {
        assert_eq!(s.shape(), pos.shape(), "similarity batches differ");
        s.reshape(vec![n, 1])
    }));
    let refs: Vec<&Var<T>> = cols.iter().collect();
    let logits = Var::concat(&refs, 1).mul_scalar(tau);
    let m = logits.max_axes(&[1]).detach();
    let lse = logits.sub(&m).exp().sum_axes(&[1]).ln().add(&m);
    lse.sub(&logits.narrow(1, 0, 1)).mean_all()
}

/// Contrastive loss of the anchor against the positive and the three
/// intervention negatives.
pub fn pci_loss<T: Float>(anchor: &Var<T>, positive: &Var<T>, negatives: [&Var<T>; 3], tau: f64) -> Var<T> {
    let pos = cosine_rows(anchor, positive);
    let negs: Vec<Var<T>> = negatives.iter().map(|c| cosine_rows(anchor, c)).collect();
    let refs: Vec<&Var<T>> = negs.iter().collect();
    contrastive_loss(&pos, &refs, tau)
}
