//! Discrete codebook, nearest-code quantization, and the two codebook losses.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::grad::{Ctx, Float, ParamBuilder, ParamId, Tensor, Var};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Debug)]
pub struct Codebook {
    pub codes: ParamId,
    size: usize,
    dim: usize,
    usage: Vec<AtomicU64>,
}

impl Clone for Codebook {
    fn clone(&self) -> Self {
        Self {
            codes: self.codes,
            size: self.size,
            dim: self.dim,
            usage: self.usage_counts().into_iter().map(AtomicU64::new).collect(),
        }
    }
}

/// Result of quantizing an `N x D x h x w` map.
#[derive(Clone, Debug)]
pub struct Quantized<T: Float> {
    /// Chosen codes, `N x D x h x w`.
    pub z_q: Tensor<T>,
    /// Code index per position, ordered `(n, y, x)`.
    pub indices: Vec<usize>,
}

/// Index of the nearest row of `codes` (`K x D`) to `v`, by
/// `|v|^2 - 2 v.z + |z|^2` in `f64` with negatives clamped to zero. Ties go to
/// the lowest index.
pub fn nearest_code<T: Float>(codes: &[T], dim: usize, v: &[T]) -> usize {
    let vv: f64 = v.iter().map(|x| x.as_f64() * x.as_f64()).sum();
    let mut best = (f64::INFINITY, 0);
    for (k, z) in codes.chunks_exact(dim).enumerate() {
        let (mut dot, mut zz) = (0.0f64, 0.0f64);
        for (a, b) in v.iter().zip(z) {
            let (a, b) = (a.as_f64(), b.as_f64());
            dot += a * b;
            zz += b * b;
        }
        let d = (vv - 2.0 * dot + zz).max(0.0);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// `N x D x h x w` -> rows `(N h w) x D`.
pub fn to_rows<T: Float>(z: &Tensor<T>) -> Tensor<T> {
    let (n, d, h, w) = z.dims4();
    z.permute(&[0, 2, 3, 1]).reshape(vec![n * h * w, d])
}

/// Inverse of [`to_rows`].
pub fn from_rows<T: Float>(rows: &Tensor<T>, n: usize, h: usize, w: usize) -> Tensor<T> {
    let d = rows.shape()[1];
    rows.reshape(vec![n, h, w, d]).permute(&[0, 3, 1, 2])
}

impl Codebook {
    pub const PREFIX: &'static str = "codebook";

    /// Codes drawn from `U(-1/K, 1/K)`.
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, size: usize, dim: usize) -> Self {
        assert!(size >= 2, "a codebook needs at least two codes");
        let bound = 1.0 / size as f64;
        Self {
            codes: b.uniform("codes", &[size, dim], -bound, bound),
            size,
            dim,
            usage: (0..size).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn usage_counts(&self) -> Vec<u64> {
        self.usage.iter().map(|u| u.load(Ordering::Relaxed)).collect()
    }

    pub fn set_usage_counts(&self, counts: &[u64]) -> Result<()> {
        if counts.len() != self.size {
            return Err(Error::Checkpoint(format!(
                "{} usage counts for {} codes",
                counts.len(),
                self.size
            )));
        }
        for (u, &c) in self.usage.iter().zip(counts) {
            u.store(c, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn reset_usage(&self) {
        self.usage.iter().for_each(|u| u.store(0, Ordering::Relaxed));
    }

    /// Entropy (nats) of the usage distribution; 0 before any use.
    pub fn usage_entropy(&self) -> f64 {
        let counts = self.usage_counts();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }

    /// Nearest codes of every position of `z`; bumps the usage counts.
    pub fn quantize<T: Float>(&self, codes: &Tensor<T>, z: &Tensor<T>) -> Result<Quantized<T>> {
        if z.rank() != 4 || z.shape()[1] != self.dim {
            return Err(Error::Shape(format!(
                "quantize expects N x {} x h x w, got {:?}",
                self.dim,
                z.shape()
            )));
        }
        if codes.shape() != [self.size, self.dim] {
            return Err(Error::Shape(format!("codes have shape {:?}", codes.shape())));
        }
        let (n, _, h, w) = z.dims4();
        let rows = to_rows(z);
        let cd = codes.data();
        let indices: Vec<usize> = rows
            .data()
            .chunks_exact(self.dim)
            .map(|v| nearest_code(cd, self.dim, v))
            .collect();
        for &i in &indices {
            self.usage[i].fetch_add(1, Ordering::Relaxed);
        }
        let mut out = Vec::with_capacity(rows.numel());
        for &i in &indices {
            out.extend_from_slice(&cd[i * self.dim..(i + 1) * self.dim]);
        }
        let z_q = from_rows(&Tensor::from_vec(vec![indices.len(), self.dim], out), n, h, w);
        Ok(Quantized { z_q, indices })
    }

    /// Quantize a graph node.
    ///
    /// Returns `(z_st, z_q)`: `z_st` carries the code values with gradients
    /// passed straight through to `z`; `z_q` carries the same values with
    /// gradients to the codebook entries.
    pub fn quantize_var<T: Float>(&self, cx: &Ctx<'_, T>, z: &Var<T>) -> Result<(Var<T>, Var<T>, Vec<usize>)> {
        let codes = cx.param(self.codes);
        let q = self.quantize(codes.value(), z.value())?;
        let (n, _, h, w) = z.dims4();
        let z_q = codes
            .gather_rows(&q.indices)
            .reshape(vec![n, h, w, self.dim])
            .permute(&[0, 3, 1, 2]);
        let z_st = z.straight_through(q.z_q);
        Ok((z_st, z_q, q.indices))
    }
}

/// Mean squared difference.
fn mse<T: Float>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    a.sub(b).square().mean_all()
}

fn check_shapes<T: Float>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `|target - recon|_1 + |sg(z_hat) - z_q|^2 + beta |z_hat - sg(z_q)|^2`,
/// each term a mean over elements.
pub fn vq_loss<T: Float>(z_hat: &Var<T>, z_q: &Var<T>, recon: &Var<T>, target: &Var<T>, beta: f64) -> Result<Var<T>> {
    check_shapes(z_hat, z_q, "vq_loss latents")?;
    check_shapes(recon, target, "vq_loss images")?;
    let rec = target.sub(recon).abs().mean_all();
    let codebook = mse(&z_hat.detach(), z_q);
    let commit = mse(z_hat, &z_q.detach());
    Ok(rec.add(&codebook).add(&commit.mul_scalar(beta)))
}

/// `|z_vq - sg(z_gt)|^2 + beta |sg(z_vq) - z_gt|^2`, element means.
pub fn codebook_match_loss<T: Float>(z_vq: &Var<T>, z_gt: &Var<T>, beta: f64) -> Result<Var<T>> {
    check_shapes(z_vq, z_gt, "codebook_match_loss")?;
    let first = mse(z_vq, &z_gt.detach());
    let second = mse(&z_vq.detach(), z_gt);
    Ok(first.add(&second.mul_scalar(beta)))
}
