//! Full-reference and no-reference scores of one image under growing noise.
//!
//! `cargo run --example metrics`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vqlight::metrics::{dead_leaves, desk_model, psnr, ssim};

fn main() -> vqlight::Result<()> {
    let clean = dead_leaves(1, 128, 42).remove(0);
    let niqe = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>6} {:>8} {:>7} {:>7}", "sigma", "psnr", "ssim", "niqe");
    for sigma in [0.0, 0.02, 0.05, 0.1, 0.2] {
        let mut noisy = clean.clone();
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("positive sigma");
            for v in noisy.data_mut() {
                *v = (*v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        println!(
            "{sigma:>6.2} {:>8.3} {:>7.4} {:>7.3}",
            psnr(&noisy, &clean)?,
            ssim(&noisy, &clean)?,
            niqe.score(&noisy)?
        );
    }
    Ok(())
}
