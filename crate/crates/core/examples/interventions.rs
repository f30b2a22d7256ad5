//! One fine-tuning forward pass, then a short fine-tune: the contrastive
//! losses, the channel gate and the learned intervention parameters.
//!
//! `cargo run --example interventions`

use vqlight::grad::Ctx;
use vqlight::image::to_tensor;
use vqlight::pipeline::data::synthetic_pairs;
use vqlight::pipeline::experiment::pretrain_checkpoint;
use vqlight::pipeline::{Config, Trainer};
use vqlight::Model;

fn main() -> vqlight::Result<()> {
    let config = Config {
        crop: 32,
        batch: 2,
        ..Config::toy()
    };
    let data = synthetic_pairs(4, 32, 32, 1);

    let model = Model::<f32>::new(&config.model(), config.seed)?;
    let cx = Ctx::new(&model.store, true);
    let low = cx.input(to_tensor(&data.low[..2])?);
    let gt = cx.input(to_tensor(&data.high[..2])?);
    let f = model.finetune_forward(&cx, &low, &gt)?;
    let mask = f.mask.value().to_f64_vec();
    let s = f.sensitivity.value().to_f64_vec();
    println!("losses at initialization: {:?}", f.report);
    println!("contrastive FCI {:.4}  effect surrogate {:.4}", f.fci, f.ate);
    println!(
        "gate: {}/{} channels selected, sensitivity in [{:.4}, {:.4}]",
        mask.iter().filter(|&&m| m > 0.5).count(),
        mask.len(),
        s.iter().copied().fold(f64::INFINITY, f64::min),
        s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    );

    let ckpt = pretrain_checkpoint(&config, &data.high, 50)?;
    let mut t = Trainer::finetune(config, data.low, data.high, &ckpt)?;
    println!(
        "{:>5} {:>9} {:>9} {:>7} {:>9} {:>17} {:>7}",
        "step", "pix", "pci", "fci_t", "theta_b", "theta_c", "alpha"
    );
    for _ in 0..6 {
        let (logs, _) = t.run(10, None)?;
        let l = &logs.last().expect("ran steps").losses;
        let (tb, tc, alpha) = t.model.pci.values(&t.model.store);
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>7.4} {tb:>9.4} {:>8.4},{:>8.4} {alpha:>7.4}",
            t.iteration, l["pix"], l["pci"], l["fci_t"], tc[0], tc[1]
        );
    }
    println!("threshold kappa {:.4}", t.model.fci.kappa_value(&t.model.store));
    Ok(())
}
