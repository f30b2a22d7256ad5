//! Convolutional encoder and decoder around the quantized bottleneck.

use crate::grad::nn::{group_count, Conv2d, GroupNorm};
use crate::grad::{Ctx, Float, ParamBuilder, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdrm::Hdrm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_levels: usize,
    pub base_channels: usize,
    /// Width multiplier of each level, finest first; one entry per level.
    pub channel_mult: Vec<usize>,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub latent_dim: usize,
    /// Upper bound on group-norm groups.
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_levels: 4,
            base_channels: 32,
            channel_mult: vec![1, 1, 2, 2],
            enc_blocks: 2,
            dec_blocks: 3,
            latent_dim: 64,
            norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.channel_mult.len() != self.num_levels {
            return Err(Error::Config(format!(
                "channel_mult needs {} entries, has {}",
                self.num_levels,
                self.channel_mult.len()
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 || self.norm_groups == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.channel_mult.contains(&0) {
            return Err(Error::Config("channel_mult entries must be positive".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.num_levels
    }

    /// Width at encoder level `i` (resolution `H / 2^(i+1)`).
    pub fn level_width(&self, i: usize) -> usize {
        self.base_channels * self.channel_mult[i]
    }

    /// `(width, upsampling factor from the bottleneck)` of decoder level `i`,
    /// coarsest first.
    pub fn decoder_level(&self, i: usize) -> (usize, usize) {
        (self.level_width(self.num_levels - 1 - i), 1 << i)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::Shape(format!("{h}x{w} input is not divisible by {f}")));
        }
        Ok(())
    }
}

/// `x + conv(silu(norm(conv(silu(norm(x))))))`, with a `1 x 1` projection on
/// the skip when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), c_in, group_count(c_in, groups)),
            conv1: Conv2d::new(&mut b.pp("conv1"), c_in, c_out, 3, 1),
            norm2: GroupNorm::new(&mut b.pp("norm2"), c_out, group_count(c_out, groups)),
            conv2: Conv2d::new(&mut b.pp("conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(&mut b.pp("skip"), c_in, c_out, 1, 1)),
        }
    }

    pub fn forward<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(cx, &self.norm1.forward(cx, x).silu());
        let h = self.conv2.forward(cx, &self.norm2.forward(cx, &h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(cx, x),
            None => x.clone(),
        };
        skip.add(&h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Conv2d,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    config: BackboneConfig,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, config: &BackboneConfig) -> Self {
        let g = config.norm_groups;
        let conv_in = Conv2d::new(&mut b.pp("conv_in"), 3, config.base_channels, 3, 1);
        let mut c = config.base_channels;
        let mut levels = Vec::new();
        for i in 0..config.num_levels {
            let w = config.level_width(i);
            let mut lb = b.pp(format!("level{i}"));
            let down = Conv2d::new(&mut lb.pp("down"), c, w, 3, 2);
            let blocks = (0..config.enc_blocks)
                .map(|j| ResBlock::new(&mut lb.pp(format!("block{j}")), w, w, g))
                .collect();
            levels.push(EncoderLevel { down, blocks });
            c = w;
        }
        Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut b.pp("norm_out"), c, group_count(c, g)),
            conv_out: Conv2d::new(&mut b.pp("conv_out"), c, config.latent_dim, 3, 1),
            config: config.clone(),
        }
    }

    /// `N x 3 x H x W` -> `N x n_z x H/2^L x W/2^L`.
    pub fn forward<T: Float>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, 3, "encoder expects RGB input");
        self.config.check_input(h, w).expect("encoder input size");
        let mut h = self.conv_in.forward(cx, x);
        for level in &self.levels {
            h = level.down.forward(cx, &h);
            for block in &level.blocks {
                h = block.forward(cx, &h);
            }
        }
        self.conv_out.forward(cx, &self.norm_out.forward(cx, &h).silu())
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    blocks: Vec<ResBlock>,
    up: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv2d,
    levels: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub const PREFIX: &'static str = "decoder";

    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, config: &BackboneConfig) -> Self {
        let g = config.norm_groups;
        let l = config.num_levels;
        let (c0, _) = config.decoder_level(0);
        let conv_in = Conv2d::new(&mut b.pp("conv_in"), config.latent_dim, c0, 3, 1);
        let mut levels = Vec::new();
        for i in 0..l {
            let (c, _) = config.decoder_level(i);
            let next = if i + 1 < l {
                config.decoder_level(i + 1).0
            } else {
                config.base_channels
            };
            let mut lb = b.pp(format!("level{i}"));
            let blocks = (0..config.dec_blocks)
                .map(|j| ResBlock::new(&mut lb.pp(format!("block{j}")), c, c, g))
                .collect();
            let up = Conv2d::new(&mut lb.pp("up"), c, next, 3, 1);
            levels.push(DecoderLevel { blocks, up });
        }
        let c = config.base_channels;
        Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut b.pp("norm_out"), c, group_count(c, g)),
            conv_out: Conv2d::new(&mut b.pp("conv_out"), c, 3, 3, 1),
        }
    }

    /// Bottleneck features -> `N x 3 x H x W`, unclamped. With `refine`, each
    /// level first passes through its detail-refinement module, driven by the
    /// bottleneck-resolution high-frequency features.
    pub fn forward<T: Float>(&self, cx: &Ctx<'_, T>, z: &Var<T>, refine: Option<(&[Hdrm], &Var<T>)>) -> Var<T> {
        if let Some((mods, _)) = refine {
            assert_eq!(mods.len(), self.levels.len(), "one refinement module per decoder level");
        }
        let mut h = self.conv_in.forward(cx, z);
        for (i, level) in self.levels.iter().enumerate() {
            if let Some((mods, f_high)) = refine {
                h = mods[i].refine(cx, &h, f_high);
            }
            for block in &level.blocks {
                h = block.forward(cx, &h);
            }
            h = level.up.forward(cx, &h.upsample_nearest(2));
        }
        self.conv_out.forward(cx, &self.norm_out.forward(cx, &h).silu())
    }
}
