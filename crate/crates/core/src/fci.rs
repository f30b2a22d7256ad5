//! Feature-level intervention: a sensitivity map from intervention
//! differences and a learned estimator, a hard mask at a learnable threshold,
//! an adaptive perturbation on the masked sites, and the semantic-consistency
//! and contrastive losses built from the perturbed negative.

use crate::grad::nn::{BatchNorm2d, Conv2d};
use crate::grad::{Ctx, Float, ParamBuilder, ParamId, Tensor, Var};

use crate::objectives::FeatureExtractor;
use crate::pci::{contrastive_loss, cosine_rows};

/// Normalizer guard in the difference map.
pub const SENSITIVITY_EPS: f64 = 1e-8;
pub const KAPPA_RANGE: (f64, f64) = (0.05, 0.95);

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FciSettings {
    pub kappa_init: f64,
    pub lambda_ate: f64,
    /// Sharpness of the sigmoid standing in for the threshold's derivative.
    pub mask_temperature: f64,
}

impl Default for FciSettings {
    fn default() -> Self {
        Self {
            kappa_init: 0.5,
            lambda_ate: 0.5,
            mask_temperature: 10.0,
        }
    }
}

/// Outputs of the gating stage.
pub struct Sensitivity<T: Float> {
    pub s: Var<T>,
    pub mask: Var<T>,
    pub perturbation: Var<T>,
    pub negative: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Fci {
    pub kappa: ParamId,
    s1: Conv2d,
    s2: Conv2d,
    p1: Conv2d,
    p_norm: BatchNorm2d,
    p2: Conv2d,
    pub settings: FciSettings,
}

/// `(|a - c_b| + |a - c_c|) / (per-sample max + eps)`.
pub fn sensitivity_difference<T: Float>(a: &Var<T>, c_b: &Var<T>, c_c: &Var<T>) -> Var<T> {
    let d = a.sub(c_b).abs().add(&a.sub(c_c).abs());
    let rest: Vec<usize> = (1..d.shape().len()).collect();
    let max = d.max_axes(&rest).add_scalar(SENSITIVITY_EPS);
    d.div(&max)
}

/// `1[s > kappa]`. The backward pass differentiates
/// `sigmoid(temperature (s - kappa))` instead.
pub fn threshold_mask<T: Float>(s: &Var<T>, kappa: &Var<T>, temperature: f64) -> Var<T> {
    assert_eq!(kappa.value().numel(), 1, "threshold must be a scalar");
    let k = kappa.value().data()[0];
    let sv = s.value().clone();
    let mask = sv.map(|v| if v > k { T::one() } else { T::zero() });
    let kshape = kappa.shape().to_vec();
    let t = T::lit(temperature);
    s.tape().record(mask, &[s, kappa], move |g, need| {
        let slope = sv.map(|v| {
            let z = t * (v - k);
            let sig = if z >= T::zero() {
                T::one() / (T::one() + (-z).exp())
            } else {
                let e = z.exp();
                e / (T::one() + e)
            };
            t * sig * (T::one() - sig)
        });
        let ds = g.mul(&slope);
        let dk = need[1].then(|| Tensor::full(kshape.clone(), -ds.sum()));
        vec![need[0].then_some(ds), dk]
    })
}

impl Fci {
    /// `channels` is the latent width of the feature maps being gated.
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, channels: usize, settings: FciSettings) -> Self {
        let c = channels;
        Self {
            kappa: b.constant("kappa", &[1], settings.kappa_init),
            s1: Conv2d::new(&mut b.pp("phi_s.0"), 4 * c, c, 3, 1),
            s2: Conv2d::new(&mut b.pp("phi_s.2"), c, c, 3, 1),
            p1: Conv2d::new(&mut b.pp("phi_p.0"), 4 * c, c, 3, 1),
            p_norm: BatchNorm2d::new(&mut b.pp("phi_p.1"), c),
            p2: Conv2d::new(&mut b.pp("phi_p.3"), c, c, 3, 1),
            settings,
        }
    }

    /// Learned sensitivity in `(0, 1)`.
    pub fn sensitivity_learned<T: Float>(&self, cx: &Ctx<'_, T>, stacked: &Var<T>) -> Var<T> {
        let h = self.s1.forward(cx, stacked).leaky_relu(0.2);
        self.s2.forward(cx, &h).sigmoid()
    }

    pub fn perturbation<T: Float>(&self, cx: &Ctx<'_, T>, stacked: &Var<T>) -> Var<T> {
        let h = self.p1.forward(cx, stacked);
        let h = self.p_norm.forward(cx, &h).leaky_relu(0.2);
        self.p2.forward(cx, &h)
    }

    /// Sensitivity map, mask, perturbation, and the perturbed negative
    /// `a * M * p`.
    pub fn gate<T: Float>(
        &self,
        cx: &Ctx<'_, T>,
        a: &Var<T>,
        c_b: &Var<T>,
        c_c: &Var<T>,
        c_f: &Var<T>,
    ) -> Sensitivity<T> {
        let stacked = Var::concat(&[a, c_b, c_c, c_f], 1);
        let s = self
            .sensitivity_learned(cx, &stacked)
            .add(&sensitivity_difference(a, c_b, c_c));
        let mask = threshold_mask(&s, &cx.param(self.kappa), self.settings.mask_temperature);
        let perturbation = self.perturbation(cx, &stacked);
        let negative = a.mul(&mask).mul(&perturbation);
        Sensitivity {
            s,
            mask,
            perturbation,
            negative,
        }
    }

    /// Keep the threshold inside [`KAPPA_RANGE`] after an update.
    pub fn clamp_kappa<T: Float>(&self, store: &mut crate::grad::ParamStore<T>) {
        let (lo, hi) = (T::lit(KAPPA_RANGE.0), T::lit(KAPPA_RANGE.1));
        for v in store.get_mut(self.kappa).data_mut() {
            *v = v.max(lo).min(hi);
        }
    }

    pub fn kappa_value<T: Float>(&self, store: &crate::grad::ParamStore<T>) -> f64 {
        store.get(self.kappa).item().as_f64()
    }

    /// Contrastive loss plus `lambda_ate` times the semantic-consistency loss.
    pub fn total<T: Float>(
        &self,
        a: &Var<T>,
        positive: &Var<T>,
        negative: &Var<T>,
        tau: f64,
        extractor: &FeatureExtractor,
        cx: &Ctx<'_, T>,
    ) -> (Var<T>, Var<T>, Var<T>) {
        let fci = fci_loss(a, positive, negative, tau);
        let ate = ate_loss(cx, extractor, a, negative);
        let total = fci.add(&ate.mul_scalar(self.settings.lambda_ate));
        (total, fci, ate)
    }
}

/// Two-way contrastive loss: anchor against positive and one negative.
pub fn fci_loss<T: Float>(a: &Var<T>, positive: &Var<T>, negative: &Var<T>, tau: f64) -> Var<T> {
    let pos = cosine_rows(a, positive);
    let neg = cosine_rows(a, negative);
    contrastive_loss(&pos, &[&neg], tau)
}

/// Mean over the extractor's compared stages of the mean absolute feature
/// difference between the anchor and the perturbed negative.
pub fn ate_loss<T: Float>(cx: &Ctx<'_, T>, extractor: &FeatureExtractor, a: &Var<T>, negative: &Var<T>) -> Var<T> {
    let fa = extractor.latent_features(cx, a);
    let fn_ = extractor.latent_features(cx, negative);
    let n = fa.len() as f64;
    let terms: Vec<Var<T>> = fa.iter().zip(&fn_).map(|(x, y)| x.sub(y).abs().mean_all()).collect();
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t);
    }
    total.mul_scalar(1.0 / n)
}
