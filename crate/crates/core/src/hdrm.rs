//! Detail refinement: high-frequency features from the complement of the
//! gating mask steer a deformable convolution over the decoder features.

use crate::grad::nn::Conv2d;
use crate::grad::{Ctx, Float, ParamBuilder, ParamId, Var};

/// Kernel size of the deformable convolution.
pub const KERNEL: usize = 3;
/// Offset channels: `(dy, dx)` per kernel tap.
pub const OFFSET_CHANNELS: usize = 2 * KERNEL * KERNEL;

/// `a * (1 - M)`: features on the sites the mask leaves alone.
pub fn derive_high_freq<T: Float>(a: &Var<T>, mask: &Var<T>) -> Var<T> {
    a.mul(&mask.rsub_scalar(1.0))
}

/// One decoder level's refinement.
///
/// The offset head's last layer and the deformable kernel start at zero, so a
/// fresh module is the identity.
#[derive(Clone, Debug)]
pub struct Hdrm {
    /// Upsampling factor from the bottleneck to this level.
    pub scale: usize,
    pub channels: usize,
    project: Conv2d,
    offset1: Conv2d,
    offset2: Conv2d,
    deform_weight: ParamId,
    deform_bias: ParamId,
}

impl Hdrm {
    pub const PREFIX: &'static str = "hdrm";

    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, latent_dim: usize, channels: usize, scale: usize) -> Self {
        let c = channels;
        Self {
            scale,
            channels,
            project: Conv2d::new(&mut b.pp("project"), latent_dim, c, 1, 1),
            offset1: Conv2d::new(&mut b.pp("offset.0"), 2 * c, c, 3, 1),
            offset2: Conv2d::zeros(&mut b.pp("offset.2"), c, OFFSET_CHANNELS, 3),
            deform_weight: b.constant("deform.weight", &[c, c, KERNEL, KERNEL], 0.0),
            deform_bias: b.constant("deform.bias", &[c], 0.0),
        }
    }

    /// `f_high` resampled to this level and projected to its width.
    pub fn level_features<T: Float>(&self, cx: &Ctx<'_, T>, f_high: &Var<T>) -> Var<T> {
        self.project.forward(cx, &f_high.upsample_nearest(self.scale))
    }

    /// Offsets, clamped to half the smaller spatial extent.
    pub fn offsets<T: Float>(&self, cx: &Ctx<'_, T>, z: &Var<T>, f_level: &Var<T>) -> Var<T> {
        let (_, _, h, w) = z.dims4();
        let lim = h.min(w) as f64 / 2.0;
        let x = Var::concat(&[z, f_level], 1);
        let hdn = self.offset1.forward(cx, &x).leaky_relu(0.2);
        self.offset2.forward(cx, &hdn).clamp(-lim, lim)
    }

    /// `z + deform_conv(z, offsets)`.
    pub fn refine<T: Float>(&self, cx: &Ctx<'_, T>, z: &Var<T>, f_high: &Var<T>) -> Var<T> {
        assert_eq!(z.shape()[1], self.channels, "refinement width mismatch");
        let f_level = self.level_features(cx, f_high);
        assert_eq!(
            f_level.shape()[2..],
            z.shape()[2..],
            "high-frequency features do not match the level"
        );
        let off = self.offsets(cx, z, &f_level);
        let w = cx.param(self.deform_weight);
        let b = cx.param(self.deform_bias);
        z.add(&z.deform_conv2d(&off, &w, Some(&b), 1, KERNEL / 2))
    }
}
