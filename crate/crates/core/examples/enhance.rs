//! The command-line workflow end to end on a tiny synthetic dataset:
//! pretrain, fine-tune, write a checkpoint, reload it, enhance a folder and
//! score it against the references.
//!
//! `cargo run --example enhance [pretrain_iters] [finetune_iters]`

use vqlight::cli::evaluate_paired;
use vqlight::image::save_image;
use vqlight::pipeline::data::synthetic_pairs;
use vqlight::pipeline::{enhance_image, model_from_checkpoint, Checkpoint, Config, Trainer};

fn arg(i: usize, default: u64) -> u64 {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> vqlight::Result<()> {
    let (pre, fine) = (arg(1, 100), arg(2, 100));
    let config = Config {
        crop: 32,
        batch: 2,
        pretrain_iters: pre,
        finetune_iters: fine,
        ..Config::toy()
    };
    let root = std::env::temp_dir().join("vqlight-enhance");
    let data = synthetic_pairs(4, 32, 32, 2);
    data.save(&root.join("data"))?;

    let mut t = Trainer::pretrain(config.clone(), data.high.clone())?;
    t.run(pre, None)?;
    let mut t = Trainer::finetune(config, data.low.clone(), data.high.clone(), &t.checkpoint())?;
    let (_, written) = t.run(fine, Some(&root.join("run")))?;
    let path = match written {
        Some(p) => p,
        None => t.save(&root.join("run"))?,
    };
    println!("checkpoint {}", path.display());

    let model = model_from_checkpoint(&Checkpoint::load(&path)?)?;
    let out = root.join("enhanced");
    std::fs::create_dir_all(&out).map_err(|e| vqlight::Error::io(&out, e))?;
    for (name, low) in data.names.iter().zip(&data.low) {
        save_image(&enhance_image(&model, low)?, out.join(name))?;
    }
    let before = evaluate_paired(&root.join("data/low"), &root.join("data/high"))?;
    let after = evaluate_paired(&out, &root.join("data/high"))?;
    println!("input vs reference\n{}", before.to_table());
    println!("enhanced vs reference\n{}", after.to_table());
    Ok(())
}
