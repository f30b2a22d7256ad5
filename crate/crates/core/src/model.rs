//! The full network: backbone, codebook, interventions, refinement,
//! discriminator, and frozen feature extractor over one parameter store.

use crate::grad::{Ctx, Float, ParamId, ParamKind, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Decoder, Encoder};
use crate::codebook::{codebook_match_loss, vq_loss, Codebook};
use crate::error::{Error, Result};
use crate::fci::{Fci, FciSettings};
use crate::hdrm::{derive_high_freq, Hdrm};
use crate::objectives::{
    generator_loss, perceptual_loss, pixel_loss, total_loss, Discriminator, FeatureExtractor, LossReport, LossTerms,
    LossWeights,
};
use crate::pci::{pci_loss, Pci, PciInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub codebook_size: usize,
    pub beta: f64,
    pub tau: f64,
    pub pci: PciInit,
    pub fci: FciSettings,
    pub disc_width: usize,
    pub extractor_widths: [usize; 4],
    pub weights: LossWeights,
    pub use_pci_loss: bool,
    pub use_fci_loss: bool,
    pub use_hdrm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            codebook_size: 256,
            beta: crate::codebook::DEFAULT_BETA,
            tau: 10.0,
            pci: PciInit::default(),
            fci: FciSettings::default(),
            disc_width: 32,
            extractor_widths: [16, 32, 32, 64],
            weights: LossWeights::default(),
            use_pci_loss: true,
            use_fci_loss: true,
            use_hdrm: true,
        }
    }
}

/// Which parameter groups a stage trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    /// Name prefixes a checkpoint of this stage carries.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Pretrain => &[Encoder::PREFIX, Decoder::PREFIX, Codebook::PREFIX],
            Stage::Finetune => &[
                Encoder::PREFIX,
                Decoder::PREFIX,
                Codebook::PREFIX,
                "pci",
                "fci",
                Hdrm::PREFIX,
                Discriminator::PREFIX,
                FeatureExtractor::PREFIX,
            ],
        }
    }
}

pub struct Model<T: Float = f32> {
    pub store: ParamStore<T>,
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub pci: Pci,
    pub fci: Fci,
    pub hdrm: Vec<Hdrm>,
    pub disc: Discriminator,
    pub extractor: FeatureExtractor,
}

/// Everything one fine-tuning forward pass produces.
pub struct FinetuneForward<T: Float> {
    pub output: Var<T>,
    pub total: Var<T>,
    pub report: LossReport,
    pub mask: Var<T>,
    pub sensitivity: Var<T>,
    pub negative: Var<T>,
    pub anchor: Var<T>,
    pub ate: f64,
    pub fci: f64,
}

impl<T: Float> Model<T> {
    /// Build every module, drawing initial weights from `seed` in a fixed
    /// order.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        config.weights.validate()?;
        if config.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if !(config.tau > 0.0) || !(config.beta >= 0.0) {
            return Err(Error::Config("tau must be positive and beta non-negative".into()));
        }
        if config.disc_width == 0 || config.extractor_widths.contains(&0) {
            return Err(Error::Config(
                "discriminator and extractor widths must be positive".into(),
            ));
        }
        let p = config.pci;
        if !(p.theta_b > 0.0 && p.theta_c[0] > 0.0 && p.theta_c[1] > 0.0 && p.alpha > 0.0 && p.alpha < 1.0) {
            return Err(Error::Config(
                "intervention strengths must be positive and alpha in (0, 1)".into(),
            ));
        }
        let k = config.fci.kappa_init;
        if !(crate::fci::KAPPA_RANGE.0..=crate::fci::KAPPA_RANGE.1).contains(&k) {
            return Err(Error::Config(format!(
                "kappa_init {k} outside {:?}",
                crate::fci::KAPPA_RANGE
            )));
        }
        let bb = &config.backbone;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, decoder, codebook, pci, fci, hdrm, disc) = {
            let mut b = store.builder(&mut rng);
            let encoder = Encoder::new(&mut b.pp(Encoder::PREFIX), bb);
            let decoder = Decoder::new(&mut b.pp(Decoder::PREFIX), bb);
            let codebook = Codebook::new(&mut b.pp(Codebook::PREFIX), config.codebook_size, bb.latent_dim);
            let pci = Pci::new(&mut b.pp("pci"), config.pci);
            let fci = Fci::new(&mut b.pp("fci"), bb.latent_dim, config.fci);
            let hdrm = (0..bb.num_levels)
                .map(|i| {
                    let (c, scale) = bb.decoder_level(i);
                    Hdrm::new(&mut b.pp(format!("{}.level{i}", Hdrm::PREFIX)), bb.latent_dim, c, scale)
                })
                .collect();
            let disc = Discriminator::new(&mut b.pp(Discriminator::PREFIX), config.disc_width);
            (encoder, decoder, codebook, pci, fci, hdrm, disc)
        };
        let extractor = FeatureExtractor::new(&mut store, bb.latent_dim, config.extractor_widths, false);
        Ok(Self {
            store,
            config: config.clone(),
            encoder,
            decoder,
            codebook,
            pci,
            fci,
            hdrm,
            disc,
            extractor,
        })
    }

    /// Freeze or unfreeze the codebook entries.
    pub fn set_codebook_frozen(&mut self, frozen: bool) {
        let kind = if frozen {
            ParamKind::Frozen
        } else {
            ParamKind::Trainable
        };
        self.store.set_kind(self.codebook.codes, kind);
    }

    /// Ids whose name starts with any of `prefixes`.
    pub fn ids_with_prefixes(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let name = self.store.name(id);
                prefixes
                    .iter()
                    .any(|p| name == *p || name.starts_with(&format!("{p}.")))
            })
            .collect()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.ids_with_prefixes(&[Discriminator::PREFIX])
    }

    /// Trainable ids updated by the generator side of a stage.
    pub fn generator_ids(&self, stage: Stage) -> Vec<ParamId> {
        let prefixes: &[&str] = match stage {
            Stage::Pretrain => &[Encoder::PREFIX, Decoder::PREFIX, Codebook::PREFIX],
            Stage::Finetune => &[
                Encoder::PREFIX,
                Decoder::PREFIX,
                Codebook::PREFIX,
                "pci",
                "fci",
                Hdrm::PREFIX,
            ],
        };
        self.ids_with_prefixes(prefixes)
            .into_iter()
            .filter(|&id| self.store.kind(id) == ParamKind::Trainable)
            .collect()
    }

    pub fn encode(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        self.encoder.forward(cx, x)
    }

    /// Encode, quantize, decode without refinement. Returns
    /// `(reconstruction, z_hat, z_q with codebook gradients)`.
    pub fn reconstruct(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        let z_hat = self.encode(cx, x);
        let (z_st, z_q, _) = self.codebook.quantize_var(cx, &z_hat)?;
        let out = self.decoder.forward(cx, &z_st, None);
        Ok((out, z_hat, z_q))
    }

    /// Pretraining objective on a batch of normal-light images.
    pub fn pretrain_loss(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<(Var<T>, f64, Var<T>)> {
        let (out, z_hat, z_q) = self.reconstruct(cx, x)?;
        let loss = vq_loss(&z_hat, &z_q, &out, x, self.config.beta)?;
        let rec = x.sub(&out).abs().mean_all().scalar();
        Ok((loss, rec, out))
    }

    /// Full fine-tuning forward pass and generator objective.
    pub fn finetune_forward(&self, cx: &Ctx<'_, T>, low: &Var<T>, gt: &Var<T>) -> Result<FinetuneForward<T>> {
        let cfg = &self.config;
        let iv = self.pci.intervene(cx, low);
        let a = self.encode(cx, low);
        let positive = cx.no_grad(|| self.encode(cx, gt)).detach();
        let c_b = self.encode(cx, &iv.brightness);
        let c_c = self.encode(cx, &iv.color);
        let c_f = self.encode(cx, &iv.fused);
        let pci = pci_loss(&a, &positive, [&c_b, &c_c, &c_f], cfg.tau);
        let gate = self.fci.gate(cx, &a, &c_b, &c_c, &c_f);
        let (fci_t, fci, ate) = self
            .fci
            .total(&a, &positive, &gate.negative, cfg.tau, &self.extractor, cx);

        let codes = cx.param(self.codebook.codes);
        let z_gt = cx.input(self.codebook.quantize(codes.value(), positive.value())?.z_q);
        let (z_vq, _, _) = self.codebook.quantize_var(cx, &a)?;
        let cp = codebook_match_loss(&z_vq, &z_gt, cfg.beta)?;

        let output = if cfg.use_hdrm {
            let f_high = derive_high_freq(&a, &gate.mask);
            self.decoder.forward(cx, &z_vq, Some((&self.hdrm, &f_high)))
        } else {
            self.decoder.forward(cx, &z_vq, None)
        };
        let pix = pixel_loss(&output, gt);
        let per = perceptual_loss(cx, &self.extractor, &output, gt);
        let adv = generator_loss(&self.disc.probability(cx, &output));
        let zero = a.constant_like(crate::grad::Tensor::zeros(vec![1]));
        let terms = LossTerms {
            pix,
            cp,
            per,
            adv,
            pci: if cfg.use_pci_loss { pci } else { zero.clone() },
            fci_t: if cfg.use_fci_loss { fci_t } else { zero },
        };
        let (total, report) = total_loss(&terms, &cfg.weights)?;
        Ok(FinetuneForward {
            output,
            total,
            report,
            mask: gate.mask,
            sensitivity: gate.s,
            negative: gate.negative,
            anchor: a,
            ate: ate.scalar(),
            fci: fci.scalar(),
        })
    }

    /// Inference: interventions and gating produce the mask; the quantized
    /// anchor is decoded through the refinement modules.
    pub fn enhance(&self, cx: &Ctx<'_, T>, low: &Var<T>) -> Result<Var<T>> {
        let a = self.encode(cx, low);
        let (z_vq, _, _) = self.codebook.quantize_var(cx, &a)?;
        if !self.config.use_hdrm {
            return Ok(self.decoder.forward(cx, &z_vq, None));
        }
        let iv = self.pci.intervene(cx, low);
        let c_b = self.encode(cx, &iv.brightness);
        let c_c = self.encode(cx, &iv.color);
        let c_f = self.encode(cx, &iv.fused);
        let gate = self.fci.gate(cx, &a, &c_b, &c_c, &c_f);
        let f_high = derive_high_freq(&a, &gate.mask);
        Ok(self.decoder.forward(cx, &z_vq, Some((&self.hdrm, &f_high))))
    }
}
