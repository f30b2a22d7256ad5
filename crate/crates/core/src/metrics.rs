//! Full-reference (PSNR, SSIM) and no-reference (NIQE) quality metrics.
//!
//! Outputs are compared as they are: no mean-brightness rescaling toward the
//! reference is applied anywhere.

use std::path::Path;
use std::sync::OnceLock;

use crate::grad::Tensor;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::checkpoint::Container;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) || a.colorspace() != b.colorspace() {
        return Err(Error::Shape(format!(
            "{}x{} {:?} vs {}x{} {:?}",
            a.height(),
            a.width(),
            a.colorspace(),
            b.height(),
            b.width(),
            b.colorspace()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filter over fully contained windows only.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * wo + xo]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), windows
/// placed only where they fit entirely.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (la, lb) = (a.luma(), b.luma());
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, ho, wo) = filter_valid(&la, h, w, &k);
    let (mu_b, _, _) = filter_valid(&lb, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(&la, &la), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(&lb, &lb), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(&la, &lb), h, w, &k);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / (ho * wo) as f64)
}

// ---------------------------------------------------------------------------
// NIQE

/// Features per patch: 18 at each of two scales.
pub const NIQE_FEATURES: usize = 36;
const MSCN_WINDOW: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiqeFitOptions {
    /// Side of the square patches at full scale; must be even.
    pub patch_size: usize,
    /// Patches whose sharpness is below this fraction of the sharpest one
    /// are dropped.
    pub sharpness_fraction: f64,
    pub min_patches: usize,
}

impl Default for NiqeFitOptions {
    fn default() -> Self {
        Self {
            patch_size: 32,
            sharpness_fraction: 0.75,
            min_patches: 500,
        }
    }
}

/// Multivariate Gaussian over patch features of pristine images.
#[derive(Clone, Debug, PartialEq)]
pub struct NiqeModel {
    pub patch_size: usize,
    pub mean: Vec<f64>,
    /// Row-major `NIQE_FEATURES x NIQE_FEATURES`.
    pub cov: Vec<f64>,
    pub patches: usize,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Separable filter with symmetric border extension; output is `h x w`.
fn filter_same(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..w {
            rows[y * w + xo] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * x[y * w + reflect(xo as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..w {
            out[y * w + xo] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[reflect(y as isize + i as isize - r, h) * w + xo])
                .sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients and the local deviation
/// map of a grey image in `[0, 255]`.
pub fn mscn(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_kernel(MSCN_WINDOW, MSCN_SIGMA);
    let mu = filter_same(x, h, w, &k);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mu_sq = filter_same(&sq, h, w, &k);
    let sigma: Vec<f64> = mu_sq.iter().zip(&mu).map(|(s, m)| (s - m * m).abs().sqrt()).collect();
    let out = x
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + 1.0))
        .collect();
    (out, sigma)
}

const ALPHA_GRID: (f64, f64, usize) = (0.2, 0.001, 9800);

fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

fn ggd_table() -> &'static Vec<(f64, f64)> {
    static T: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    T.get_or_init(|| {
        (0..ALPHA_GRID.2)
            .map(|i| {
                let a = ALPHA_GRID.0 + ALPHA_GRID.1 * i as f64;
                (a, gamma(1.0 / a) * gamma(3.0 / a) / gamma(2.0 / a).powi(2))
            })
            .collect()
    })
}

fn nearest_alpha(target: f64, table: &[(f64, f64)]) -> f64 {
    let mut best = (f64::INFINITY, table[0].0);
    for &(a, r) in table {
        let d = (r - target).abs();
        if d < best.0 {
            best = (d, a);
        }
    }
    best.1
}

/// Generalized Gaussian fit by moment matching: `(shape, variance)`.
pub fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if mean_abs == 0.0 {
        return (ALPHA_GRID.0, 0.0);
    }
    (nearest_alpha(var / (mean_abs * mean_abs), ggd_table()), var)
}

/// Asymmetric generalized Gaussian fit: `(shape, mean, left var, right var)`.
pub fn fit_aggd(x: &[f64]) -> [f64; 4] {
    static T: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    let table = T.get_or_init(|| ggd_table().iter().map(|&(a, r)| (a, 1.0 / r)).collect());
    let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            sl += v * v;
            nl += 1;
        } else if v > 0.0 {
            sr += v * v;
            nr += 1;
        }
    }
    let left = if nl > 0 { (sl / nl as f64).sqrt() } else { 0.0 };
    let right = if nr > 0 { (sr / nr as f64).sqrt() } else { 0.0 };
    let n = x.len() as f64;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    if left == 0.0 || right == 0.0 || mean_sq == 0.0 {
        return [ALPHA_GRID.0, 0.0, left * left, right * right];
    }
    let g = left / right;
    let r_hat = mean_abs * mean_abs / mean_sq;
    let big_r = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = nearest_alpha(big_r, table);
    let ratio = (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    let eta = (right - left) * ratio * gamma(2.0 / alpha) / gamma(1.0 / alpha);
    [alpha, eta, left * left, right * right]
}

/// 18 features of one MSCN patch.
fn patch_features(m: &[f64], size: usize, out: &mut Vec<f64>) {
    let (a, v) = fit_ggd(m);
    out.push(a);
    out.push(v);
    let at = |y: usize, x: usize| m[y * size + x];
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prods = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (y2, x2) = (y as isize + dy, x as isize + dx);
                if y2 < 0 || x2 < 0 || y2 >= size as isize || x2 >= size as isize {
                    continue;
                }
                prods.push(at(y, x) * at(y2 as usize, x2 as usize));
            }
        }
        out.extend(fit_aggd(&prods));
    }
}

fn extract(m: &[f64], w: usize, y: usize, x: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        out.extend_from_slice(&m[(y + r) * w + x..][..size]);
    }
    out
}

/// Average 2x2 blocks.
fn half(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for xo in 0..wo {
            out[y * wo + xo] = 0.25
                * (x[2 * y * w + 2 * xo]
                    + x[2 * y * w + 2 * xo + 1]
                    + x[(2 * y + 1) * w + 2 * xo]
                    + x[(2 * y + 1) * w + 2 * xo + 1]);
        }
    }
    (out, ho, wo)
}

/// Per-patch feature vectors and sharpness (mean local deviation) of one
/// image, patches tiled without overlap from the top-left corner.
pub fn niqe_patch_features(img: &Image, patch_size: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if patch_size < 8 || !patch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "NIQE patch size {patch_size} must be even and at least 8"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if h < patch_size || w < patch_size {
        return Err(Error::Shape(format!(
            "{h}x{w} is smaller than one {patch_size}x{patch_size} patch"
        )));
    }
    let grey: Vec<f64> = img.luma().into_iter().map(|v| v * 255.0).collect();
    let (m1, s1) = mscn(&grey, h, w);
    let (g2, h2, w2) = half(&grey, h, w);
    let (m2, _) = mscn(&g2, h2, w2);
    let q = patch_size / 2;
    let mut out = Vec::new();
    for py in 0..h / patch_size {
        for px in 0..w / patch_size {
            let (y, x) = (py * patch_size, px * patch_size);
            let mut f = Vec::with_capacity(NIQE_FEATURES);
            patch_features(&extract(&m1, w, y, x, patch_size), patch_size, &mut f);
            patch_features(&extract(&m2, w2, y / 2, x / 2, q), q, &mut f);
            let sharp = extract(&s1, w, y, x, patch_size).iter().sum::<f64>() / (patch_size * patch_size) as f64;
            out.push((f, sharp));
        }
    }
    Ok(out)
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = NIQE_FEATURES;
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    if rows.len() > 1 {
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
                }
            }
        }
    }
    (mean, cov)
}

impl NiqeModel {
    /// Fit on the sharp patches of a pristine corpus.
    pub fn fit(images: &[Image], opts: NiqeFitOptions) -> Result<Self> {
        let mut all = Vec::new();
        for img in images {
            all.extend(niqe_patch_features(img, opts.patch_size)?);
        }
        let max_sharp = all.iter().map(|(_, s)| *s).fold(0.0, f64::max);
        let rows: Vec<Vec<f64>> = all
            .into_iter()
            .filter(|(_, s)| *s >= opts.sharpness_fraction * max_sharp)
            .map(|(f, _)| f)
            .collect();
        if rows.len() < opts.min_patches.max(2) {
            return Err(Error::Data {
                path: Default::default(),
                msg: format!(
                    "{} sharp patches; at least {} required",
                    rows.len(),
                    opts.min_patches.max(2)
                ),
            });
        }
        let (mean, cov) = mean_cov(&rows);
        Ok(Self {
            patch_size: opts.patch_size,
            mean,
            cov,
            patches: rows.len(),
        })
    }

    /// Distance between this model and the Gaussian fitted to the test
    /// image's patches. A ridge is added when the pooled covariance is
    /// singular.
    pub fn score(&self, img: &Image) -> Result<f64> {
        let feats: Vec<Vec<f64>> = niqe_patch_features(img, self.patch_size)?
            .into_iter()
            .map(|(f, _)| f)
            .collect();
        let (mu, cov) = mean_cov(&feats);
        let d = NIQE_FEATURES;
        let pooled = DMatrix::from_fn(d, d, |i, j| 0.5 * (self.cov[i * d + j] + cov[i * d + j]));
        let diff = DVector::from_fn(d, |i, _| self.mean[i] - mu[i]);
        let trace = pooled.trace().abs().max(f64::MIN_POSITIVE);
        let mut ridge = 0.0;
        loop {
            let m = &pooled + DMatrix::identity(d, d) * ridge;
            if let Some(ch) = m.cholesky() {
                if ridge > 0.0 {
                    log::debug!("NIQE covariance regularized with ridge {ridge:e}");
                }
                let q = diff.dot(&ch.solve(&diff));
                return Ok(q.max(0.0).sqrt());
            }
            ridge = if ridge == 0.0 {
                1e-10 * trace / d as f64
            } else {
                ridge * 10.0
            };
            if !ridge.is_finite() {
                return Err(Error::Numeric("NIQE covariance cannot be regularized".into()));
            }
        }
    }

    pub fn to_container(&self) -> Container {
        let d = NIQE_FEATURES;
        let mut c = Container {
            meta: serde_json::json!({
                "kind": "niqe-model",
                "patch_size": self.patch_size,
                "feature_dim": d,
                "patches": self.patches,
            }),
            tensors: Vec::new(),
        };
        c.push("niqe.mean", Tensor::from_f64(vec![d], &self.mean));
        c.push("niqe.cov", Tensor::from_f64(vec![d, d], &self.cov));
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("niqe-model") {
            return Err(bad("not a NIQE model"));
        }
        let get = |k: &str| c.meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| bad(k));
        let (patch_size, dim, patches) = (
            get("patch_size")? as usize,
            get("feature_dim")? as usize,
            get("patches")? as usize,
        );
        if dim != NIQE_FEATURES {
            return Err(bad(&format!("feature_dim {dim}")));
        }
        let mean = c.tensor("niqe.mean").ok_or_else(|| bad("missing niqe.mean"))?;
        let cov = c.tensor("niqe.cov").ok_or_else(|| bad("missing niqe.cov"))?;
        if mean.shape() != [dim] || cov.shape() != [dim, dim] {
            return Err(bad("tensor shapes"));
        }
        Ok(Self {
            patch_size,
            mean: mean.to_f64_vec(),
            cov: cov.to_f64_vec(),
            patches,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

/// Deterministic "dead leaves" images: overlapping discs with power-law
/// radii, whose statistics resemble natural scenes.
pub fn dead_leaves(n: usize, size: usize, seed: u64) -> Vec<Image> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut img = Image::filled(size, size, [0.5; 3]);
            let (rmin, rmax) = (1.5f64, size as f64 / 3.0);
            for _ in 0..(size * size / 12) {
                let u: f64 = rng.random_range(0.0..1.0);
                // Density proportional to r^-3 on [rmin, rmax].
                let r = 1.0 / (rmin.powi(-2) - u * (rmin.powi(-2) - rmax.powi(-2))).sqrt();
                let cy = rng.random_range(-r..size as f64 + r);
                let cx = rng.random_range(-r..size as f64 + r);
                let base: f32 = rng.random_range(0.05..0.95);
                let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
                let (y0, y1) = (
                    (cy - r).floor().max(0.0) as usize,
                    ((cy + r).ceil().max(0.0) as usize).min(size),
                );
                let (x0, x1) = (
                    (cx - r).floor().max(0.0) as usize,
                    ((cx + r).ceil().max(0.0) as usize).min(size),
                );
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy * dy + dx * dx <= r * r {
                            img.set_pixel(y, x, std::array::from_fn(|c| (base + tint[c]).clamp(0.0, 1.0)));
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Fit options and corpus behind the bundled model.
pub const DESK_CORPUS: (usize, usize, u64) = (192, 128, 0x6e69_7165);

/// Bundled model fitted by [`fit_desk_model`]. Its absolute scores are not
/// comparable to models fitted on photographs; only orderings are
/// meaningful.
pub fn desk_model() -> NiqeModel {
    static M: OnceLock<NiqeModel> = OnceLock::new();
    M.get_or_init(|| {
        let bytes = include_bytes!("../assets/niqe_desk.vqm");
        let path = Path::new("<bundled niqe_desk.vqm>");
        let c = Container::from_bytes(bytes, path).expect("bundled NIQE model parses");
        NiqeModel::from_container(&c, path).expect("bundled NIQE model is valid")
    })
    .clone()
}

/// Refit the bundled model from its synthetic corpus.
pub fn fit_desk_model() -> Result<NiqeModel> {
    let (n, size, seed) = DESK_CORPUS;
    NiqeModel::fit(&dead_leaves(n, size, seed), NiqeFitOptions::default())
}
