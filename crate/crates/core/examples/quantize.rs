//! Nearest-code quantization: reconstruction error and code usage as the
//! codebook grows, on clustered features.
//!
//! `cargo run --example quantize`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqlight::codebook::Codebook;
use vqlight::grad::{ParamStore, Tensor};

const DIM: usize = 8;

/// `1 x DIM x side x side` features scattered around `centers` cluster means.
fn clustered(side: usize, centers: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let means = Tensor::<f64>::randn(vec![centers, DIM], 1.0, rng);
    let noise = Tensor::<f64>::randn(vec![side * side, DIM], 0.1, rng);
    let mut data = vec![0.0; DIM * side * side];
    for p in 0..side * side {
        let m = p % centers;
        for d in 0..DIM {
            data[d * side * side + p] = means.data()[m * DIM + d] + noise.data()[p * DIM + d];
        }
    }
    Tensor::from_f64([1, DIM, side, side], &data)
}

fn main() -> vqlight::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = clustered(16, 12, &mut rng);
    let total: f64 = z.data().iter().map(|v| v * v).sum();
    println!(
        "{:>5} {:>12} {:>10} {:>12}",
        "codes", "rel. error", "used", "entropy nats"
    );
    for k in [2, 4, 8, 16, 32, 64] {
        let mut store = ParamStore::<f64>::new();
        let cb = Codebook::new(&mut store.builder(&mut rng), k, DIM);
        // Seed the codes from the data itself so every size sees the clusters.
        let plane = z.shape()[2] * z.shape()[3];
        let mut rows = Vec::with_capacity(k * DIM);
        for i in 0..k {
            let p = (i * 37) % plane;
            rows.extend((0..DIM).map(|d| z.data()[d * plane + p]));
        }
        store.set(cb.codes, Tensor::from_f64([k, DIM], &rows));
        let q = cb.quantize(store.get(cb.codes), &z)?;
        let err: f64 = q.z_q.data().iter().zip(z.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let used = cb.usage_counts().iter().filter(|&&c| c > 0).count();
        println!("{k:>5} {:>12.5} {used:>10} {:>12.3}", err / total, cb.usage_entropy());
    }
    Ok(())
}
