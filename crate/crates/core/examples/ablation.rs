//! Switch off one component at a time and compare training-set PSNR.
//!
//! `cargo run --example ablation -- [size] [batch] [pretrain] [finetune]`

use vqlight::pipeline::experiment::{ablation, variant_mean, Variant};
use vqlight::pipeline::Config;

fn main() -> vqlight::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("integer argument"))
        .collect();
    let arg = |i: usize, d: u64| a.get(i).copied().unwrap_or(d);
    let (size, batch, pre, fine) = (arg(0, 32) as usize, arg(1, 2) as usize, arg(2, 500), arg(3, 500));
    let cfg = Config {
        crop: size,
        batch,
        ..Config::toy()
    };
    let runs = ablation(&cfg, &[0, 1, 2], 8, size, pre, fine)?;
    println!("seed variant  train_psnr heldout_psnr");
    for r in &runs {
        println!(
            "{:4} {:8} {:10.3} {:12.3}",
            r.seed,
            r.variant.name(),
            r.psnr,
            r.heldout_psnr
        );
    }
    for v in Variant::ALL {
        let (train, held) = (
            variant_mean(&runs, v, |r| r.psnr),
            variant_mean(&runs, v, |r| r.heldout_psnr),
        );
        println!("mean {:8} {train:10.3} {held:12.3}", v.name());
    }
    Ok(())
}
