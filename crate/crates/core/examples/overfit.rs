//! Pretrain, then fine-tune on eight synthetic pairs and track training PSNR.
//!
//! `cargo run --example overfit -- [pretrain] [finetune]`

use std::time::Instant;

use vqlight::pipeline::data::synthetic_pairs;
use vqlight::pipeline::experiment::overfit;
use vqlight::pipeline::Config;

fn main() -> vqlight::Result<()> {
    let a: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("integer argument"))
        .collect();
    let (pre, fine) = (a.first().copied().unwrap_or(500), a.get(1).copied().unwrap_or(2000));
    let data = synthetic_pairs(8, 64, 64, 0);
    let t = Instant::now();
    let r = overfit(&Config::toy(), &data.low, &data.high, pre, fine, 250)?;
    for (it, p) in &r.trace {
        println!("step {it:5}  PSNR {p:.2}");
    }
    println!("baseline PSNR {:.2} SSIM {:.4}", r.baseline.0, r.baseline.1);
    println!("fine-tuned PSNR {:.2} SSIM {:.4}", r.finetuned.0, r.finetuned.1);
    println!("{:.0}s", t.elapsed().as_secs_f64());
    Ok(())
}
