//! Desk-scale experiments: overfitting a handful of synthetic pairs, and
//! ablating one component at a time against the full model.

use log::info;

use crate::error::Result;
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::pipeline::data::synthetic_pairs;
use crate::pipeline::train::{enhance_image, reconstruct_image};
use crate::pipeline::{model_from_checkpoint, Checkpoint, Config, Trainer};

/// Mean PSNR and SSIM of `f(low)` against `high` over a set of pairs.
pub fn mean_scores(low: &[Image], high: &[Image], f: impl Fn(&Image) -> Result<Image>) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for (l, h) in low.iter().zip(high) {
        let out = f(l)?;
        p += psnr(&out, h)?;
        s += ssim(&out, h)?;
    }
    let n = low.len().max(1) as f64;
    Ok((p / n, s / n))
}

/// Full refinement path.
pub fn enhanced_scores(model: &Model<f32>, low: &[Image], high: &[Image]) -> Result<(f64, f64)> {
    mean_scores(low, high, |l| enhance_image(model, l))
}

/// Encode, quantize, decode with the pretrained network alone.
pub fn baseline_scores(model: &Model<f32>, low: &[Image], high: &[Image]) -> Result<(f64, f64)> {
    mean_scores(low, high, |l| reconstruct_image(model, l))
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub baseline: (f64, f64),
    pub finetuned: (f64, f64),
    /// `(iteration, training PSNR)` at each evaluation point.
    pub trace: Vec<(u64, f64)>,
}

/// Pretrain on the normal-light images, then fine-tune on the pairs, scoring
/// the training set every `eval_every` fine-tuning steps.
pub fn overfit(
    config: &Config,
    low: &[Image],
    high: &[Image],
    pretrain: u64,
    finetune: u64,
    eval_every: u64,
) -> Result<OverfitReport> {
    let config = Config {
        finetune_iters: finetune,
        ..config.clone()
    };
    let ckpt = pretrain_checkpoint(&config, high, pretrain)?;
    let baseline = baseline_scores(&model_from_checkpoint(&ckpt)?, low, high)?;
    let mut t = Trainer::finetune(config, low.to_vec(), high.to_vec(), &ckpt)?;
    let mut trace = Vec::new();
    let step = eval_every.clamp(1, finetune.max(1));
    while t.iteration < finetune {
        t.run(step.min(finetune - t.iteration), None)?;
        let (p, _) = enhanced_scores(&t.model, low, high)?;
        info!("fine-tune {} training PSNR {p:.2}", t.iteration);
        trace.push((t.iteration, p));
    }
    Ok(OverfitReport {
        baseline,
        finetuned: enhanced_scores(&t.model, low, high)?,
        trace,
    })
}

/// The schedule horizon is set to `iters`.
pub fn pretrain_checkpoint(config: &Config, high: &[Image], iters: u64) -> Result<Checkpoint> {
    let config = Config {
        pretrain_iters: iters,
        ..config.clone()
    };
    let mut t = Trainer::pretrain(config, high.to_vec())?;
    t.run(iters, None)?;
    Ok(t.checkpoint())
}

/// One component switched off, everything else unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoPci,
    NoFci,
    NoHdrm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPci, Variant::NoFci, Variant::NoHdrm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPci => "no_pci",
            Variant::NoFci => "no_fci",
            Variant::NoHdrm => "no_hdrm",
        }
    }

    pub fn apply(self, config: &Config) -> Config {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoPci => c.use_pci_loss = false,
            Variant::NoFci => c.use_fci_loss = false,
            Variant::NoHdrm => c.use_hdrm = false,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: Variant,
    /// Mean PSNR on the pairs the variant was trained on.
    pub psnr: f64,
    /// Mean PSNR on pairs drawn from the same generator with another seed.
    pub heldout_psnr: f64,
}

/// Seed offset of the held-out pairs.
pub const HELDOUT_SEED_OFFSET: u64 = 1_000_003;

/// Every variant fine-tuned from one shared pretrained checkpoint per seed,
/// on `pairs` synthetic pairs of side `size` generated from that seed, and
/// scored on those pairs and on as many held-out ones.
pub fn ablation(
    config: &Config,
    seeds: &[u64],
    pairs: usize,
    size: usize,
    pretrain: u64,
    finetune: u64,
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let data = synthetic_pairs(pairs, size, size, seed);
        let heldout = synthetic_pairs(pairs, size, size, seed + HELDOUT_SEED_OFFSET);
        let base = Config {
            seed,
            finetune_iters: finetune,
            ..config.clone()
        };
        let ckpt = pretrain_checkpoint(&base, &data.high, pretrain)?;
        for variant in Variant::ALL {
            let mut t = Trainer::finetune(variant.apply(&base), data.low.clone(), data.high.clone(), &ckpt)?;
            t.run(finetune, None)?;
            let (psnr, _) = enhanced_scores(&t.model, &data.low, &data.high)?;
            let (heldout_psnr, _) = enhanced_scores(&t.model, &heldout.low, &heldout.high)?;
            info!(
                "seed {seed} {} PSNR {psnr:.3} held-out {heldout_psnr:.3}",
                variant.name()
            );
            runs.push(AblationRun {
                seed,
                variant,
                psnr,
                heldout_psnr,
            });
        }
    }
    Ok(runs)
}

/// Mean of `score` over the runs of one variant.
pub fn variant_mean(runs: &[AblationRun], variant: Variant, score: impl Fn(&AblationRun) -> f64) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(score).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
