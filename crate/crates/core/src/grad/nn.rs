//! Parameterized layers. Layers hold parameter ids; values live in a
//! [`ParamStore`](crate::grad::ParamStore) and are bound per pass through a [`Ctx`].

use crate::grad::float::Float;
use crate::grad::params::{Ctx, ParamBuilder, ParamId, ParamKind};
use crate::grad::tape::Var;
use crate::grad::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Square kernel padded by `(kernel - 1) / 2`: "same" size for odd kernels
    /// at stride 1, exact halving for a 4x4 kernel at stride 2.
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self::with_padding(b, c_in, c_out, kernel, stride, (kernel - 1) / 2, true)
    }

    pub fn with_padding<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = b.fan_in_uniform("weight", &[c_out, c_in, kernel, kernel], fan_in);
        let bias = bias.then(|| b.fan_in_uniform("bias", &[c_out], fan_in));
        Self {
            weight,
            bias,
            stride,
            pad,
            c_in,
            c_out,
            kernel,
        }
    }

    /// All weights and bias start at zero.
    pub fn zeros<T: Float>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let weight = b.constant("weight", &[c_out, c_in, kernel, kernel], 0.0);
        let bias = Some(b.constant("bias", &[c_out], 0.0));
        Self {
            weight,
            bias,
            stride: 1,
            pad: (kernel - 1) / 2,
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn forward<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    channels: usize,
}

impl GroupNorm {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, channels: usize, groups: usize) -> Self {
        assert_eq!(
            channels % groups,
            0,
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            groups,
            gamma: b.constant("weight", &[channels], 1.0),
            beta: b.constant("bias", &[channels], 0.0),
            eps: 1e-6,
            channels,
        }
    }

    pub fn forward<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "group norm channel mismatch");
        let xr = x.reshape(vec![n, self.groups, (c / self.groups) * h * w]);
        let mean = xr.mean_axes(&[2]);
        let centered = xr.sub(&mean);
        let var = centered.square().mean_axes(&[2]);
        let normed = centered.div(&var.add_scalar(self.eps).sqrt());
        let normed = normed.reshape(vec![n, c, h, w]);
        let gamma = cx.param(self.gamma).reshape(vec![1, c, 1, 1]);
        let beta = cx.param(self.beta).reshape(vec![1, c, 1, 1]);
        normed.mul(&gamma).add(&beta)
    }
}

/// Batch normalization: batch statistics while training, running statistics
/// otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: b.constant("weight", &[channels], 1.0),
            beta: b.constant("bias", &[channels], 0.0),
            running_mean: b.buffer("running_mean", &[channels], 0.0),
            running_var: b.buffer("running_var", &[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let stat_shape = vec![1, c, 1, 1];
        let normed = if cx.training() {
            let mean = x.mean_axes(&[0, 2, 3]);
            let centered = x.sub(&mean);
            let var = centered.square().mean_axes(&[0, 2, 3]);
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let mom = T::lit(self.momentum);
            let keep = T::one() - mom;
            let rm = cx.store().get(self.running_mean);
            let rv = cx.store().get(self.running_var);
            let new_mean = rm.zip_map(&mean.value().reshape(vec![c]), |r, b| keep * r + mom * b);
            let new_var = rv.zip_map(&var.value().reshape(vec![c]), |r, b| {
                keep * r + mom * b * T::lit(unbiased)
            });
            cx.push_buffer_update(self.running_mean, new_mean);
            cx.push_buffer_update(self.running_var, new_var);
            centered.div(&var.add_scalar(self.eps).sqrt())
        } else {
            let mean = cx.param(self.running_mean).reshape(stat_shape.clone());
            let var = cx.param(self.running_var).reshape(stat_shape.clone());
            x.sub(&mean).div(&var.add_scalar(self.eps).sqrt())
        };
        let gamma = cx.param(self.gamma).reshape(stat_shape.clone());
        let beta = cx.param(self.beta).reshape(stat_shape);
        normed.mul(&gamma).add(&beta)
    }
}

/// Build a frozen copy of a tensor as a constant parameter.
pub fn frozen<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, value: Tensor<T>) -> ParamId {
    b.tensor(name, value, ParamKind::Frozen)
}
