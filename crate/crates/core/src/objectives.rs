//! Pixel, perceptual, and adversarial losses, the U-Net discriminator, the
//! frozen feature extractor shared with the semantic-consistency loss, and
//! the weighted total.

use crate::grad::nn::Conv2d;
use crate::grad::{Ctx, Float, ParamBuilder, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed of the extractor's fixed random weights.
pub const EXTRACTOR_SEED: u64 = 0x5eed_fea7;
/// Probability clamp before taking logs in the adversarial losses.
pub const PROB_EPS: f64 = 1e-6;

/// Fixed 4-layer convolutional feature extractor.
///
/// Weights are He-normal from [`EXTRACTOR_SEED`] unless loaded from a file.
/// Latent feature maps enter through a fixed `1 x 1` projection to three
/// channels.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    projection: ParamId,
    layers: Vec<Conv2d>,
    /// Indices of the compared stages.
    pub stages: Vec<usize>,
    /// Drop the nonlinearities (makes the map linear).
    pub linear: bool,
}

impl FeatureExtractor {
    pub const PREFIX: &'static str = "features";

    /// `widths` are the output channels of the four layers; layers 2 and 4
    /// halve the resolution.
    pub fn new<T: Float>(store: &mut ParamStore<T>, latent_channels: usize, widths: [usize; 4], linear: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let mut root = store.builder(&mut rng);
        let mut b = root.pp(Self::PREFIX);
        let proj_std = (1.0 / latent_channels as f64).sqrt();
        let proj = Tensor::randn(vec![3, latent_channels, 1, 1], proj_std, b.rng());
        let projection = b.tensor("projection", proj, ParamKind::Frozen);
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let weight = Tensor::randn(vec![w, c_in, 3, 3], std, b.rng());
            let mut lb = b.pp(format!("conv{i}"));
            let wid = lb.tensor("weight", weight, ParamKind::Frozen);
            let bid = lb.tensor("bias", Tensor::zeros(vec![w]), ParamKind::Frozen);
            layers.push(Conv2d {
                weight: wid,
                bias: Some(bid),
                stride,
                pad: 1,
                c_in,
                c_out: w,
                kernel: 3,
            });
            c_in = w;
        }
        Self {
            projection,
            layers,
            stages: vec![1, 2],
            linear,
        }
    }

    /// Replace the random weights with tensors of matching names from a
    /// container file.
    pub fn load_weights<T: Float>(&self, store: &mut ParamStore<T>, path: &std::path::Path) -> Result<()> {
        let file = crate::pipeline::checkpoint::Container::read(path)?;
        let ids: Vec<ParamId> = store.ids_with_prefix(Self::PREFIX).collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = file
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {name}", path.display())))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: {name} has shape {:?}",
                    path.display(),
                    t.shape()
                )));
            }
            store.set(id, t.cast());
        }
        Ok(())
    }

    /// Activations of the compared stages for an image batch in `[0, 1]`.
    pub fn image_features<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Vec<Var<T>> {
        self.run(cx, &x.add_scalar(-0.5))
    }

    /// Activations of the compared stages for a latent batch.
    pub fn latent_features<T: Float>(&self, cx: &Ctx<'_, T>, z: &Var<T>) -> Vec<Var<T>> {
        let p = cx.param(self.projection);
        self.run(cx, &z.conv2d(&p, None, 1, 0))
    }

    fn run<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Vec<Var<T>> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, &h);
            if !self.linear {
                h = h.relu();
            }
            if self.stages.contains(&i) {
                out.push(h.clone());
            }
        }
        out
    }
}

/// Mean absolute difference.
pub fn pixel_loss<T: Float>(out: &Var<T>, gt: &Var<T>) -> Var<T> {
    assert_eq!(out.shape(), gt.shape(), "pixel loss of mismatched shapes");
    out.sub(gt).abs().mean_all()
}

/// Mean squared feature distance, averaged over the extractor's stages.
pub fn perceptual_loss<T: Float>(cx: &Ctx<'_, T>, extractor: &FeatureExtractor, out: &Var<T>, gt: &Var<T>) -> Var<T> {
    assert_eq!(out.shape(), gt.shape(), "perceptual loss of mismatched shapes");
    let fo = extractor.image_features(cx, out);
    let fg = extractor.image_features(cx, gt);
    let n = fo.len() as f64;
    let mut total: Option<Var<T>> = None;
    for (a, b) in fo.iter().zip(&fg) {
        let t = a.sub(b).square().mean_all();
        total = Some(match total {
            Some(acc) => acc.add(&t),
            None => t,
        });
    }
    total.expect("extractor has stages").mul_scalar(1.0 / n)
}

/// Three-level U-Net producing per-pixel real/fake logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    conv_in: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

impl Discriminator {
    pub const PREFIX: &'static str = "disc";

    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, width: usize) -> Self {
        let w = width;
        Self {
            conv_in: Conv2d::new(&mut b.pp("conv_in"), 3, w, 3, 1),
            down1: Conv2d::new(&mut b.pp("down1"), w, 2 * w, 3, 2),
            down2: Conv2d::new(&mut b.pp("down2"), 2 * w, 4 * w, 3, 2),
            up1: Conv2d::new(&mut b.pp("up1"), 4 * w, 2 * w, 3, 1),
            up2: Conv2d::new(&mut b.pp("up2"), 2 * w, w, 3, 1),
            conv_out: Conv2d::new(&mut b.pp("conv_out"), w, 1, 3, 1),
        }
    }

    /// `N x 1 x H x W` logits; `H` and `W` must be divisible by 4.
    pub fn logits<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let e0 = self.conv_in.forward(cx, x).leaky_relu(0.2);
        let e1 = self.down1.forward(cx, &e0).leaky_relu(0.2);
        let e2 = self.down2.forward(cx, &e1).leaky_relu(0.2);
        let u1 = self.up1.forward(cx, &e2.upsample_nearest(2)).leaky_relu(0.2).add(&e1);
        let u2 = self.up2.forward(cx, &u1.upsample_nearest(2)).leaky_relu(0.2).add(&e0);
        self.conv_out.forward(cx, &u2)
    }

    /// Per-sample probability of "real": mean of the per-pixel sigmoids,
    /// clamped away from 0 and 1.
    pub fn probability<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let p = self.logits(cx, x).sigmoid().mean_axes(&[1, 2, 3]);
        let n = p.shape()[0];
        p.reshape(vec![n]).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }
}

/// `-log D(out)`, batch mean.
pub fn generator_loss<T: Float>(d_out: &Var<T>) -> Var<T> {
    d_out.ln().neg().mean_all()
}

/// `-(log D(gt) + log(1 - D(out)))`, batch mean.
pub fn discriminator_loss<T: Float>(d_gt: &Var<T>, d_out: &Var<T>) -> Var<T> {
    d_gt.ln().add(&d_out.rsub_scalar(1.0).ln()).neg().mean_all()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pix: f64,
    pub cp: f64,
    pub per: f64,
    pub adv: f64,
    /// Applied to the sum of the two causal losses.
    pub causal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pix: 1.0,
            cp: 1.0,
            per: 0.1,
            adv: 0.1,
            causal: 0.1,
        }
    }
}

/// Per-component values of one fine-tuning step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pix: f64,
    pub cp: f64,
    pub per: f64,
    pub adv: f64,
    pub pci: f64,
    pub fci_t: f64,
    pub total: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pix, self.cp, self.per, self.adv, self.causal];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn combine(&self, pix: f64, cp: f64, per: f64, adv: f64, pci: f64, fci_t: f64) -> f64 {
        self.pix * pix + self.cp * cp + self.per * per + self.adv * adv + self.causal * (pci + fci_t)
    }
}

/// Components of the fine-tuning objective as graph nodes.
pub struct LossTerms<T: Float> {
    pub pix: Var<T>,
    pub cp: Var<T>,
    pub per: Var<T>,
    pub adv: Var<T>,
    pub pci: Var<T>,
    pub fci_t: Var<T>,
}

/// Weighted sum with the two causal losses grouped under one weight. Fails on
/// any non-finite component.
pub fn total_loss<T: Float>(terms: &LossTerms<T>, w: &LossWeights) -> Result<(Var<T>, LossReport)> {
    let named = [
        ("pix", &terms.pix),
        ("cp", &terms.cp),
        ("per", &terms.per),
        ("adv", &terms.adv),
        ("pci", &terms.pci),
        ("fci_t", &terms.fci_t),
    ];
    for (name, v) in named {
        if !v.scalar().is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {}", v.scalar())));
        }
    }
    let total = terms
        .pix
        .mul_scalar(w.pix)
        .add(&terms.cp.mul_scalar(w.cp))
        .add(&terms.per.mul_scalar(w.per))
        .add(&terms.adv.mul_scalar(w.adv))
        .add(&terms.pci.add(&terms.fci_t).mul_scalar(w.causal));
    let report = LossReport {
        pix: terms.pix.scalar(),
        cp: terms.cp.scalar(),
        per: terms.per.scalar(),
        adv: terms.adv.scalar(),
        pci: terms.pci.scalar(),
        fci_t: terms.fci_t.scalar(),
        total: total.scalar(),
    };
    Ok((total, report))
}
