use candle_core::{Tensor, D};

use crate::error::{Error, Result};

use super::params::{patchify, softplus, unpatchify, ChannelNorm, Conv3x3, Dense, ParamBuilder};
use super::ModelConfig;

/// ConvNeXt-style residual block: spatial mixing, channel norm, then an
/// inverted-bottleneck MLP added back onto the input.
#[derive(Debug, Clone)]
pub struct Block {
    mix: Option<Conv3x3>,
    norm: ChannelNorm,
    expand: Dense,
    reduce: Dense,
}

impl Block {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, expansion: usize, spatial: bool, zero_out: bool) -> Result<Self> {
        pb.scoped(name, |pb| {
            let mix = if spatial { Some(Conv3x3::new(pb, "mix", dim, dim)?) } else { None };
            let norm = ChannelNorm::new(pb, "norm", dim)?;
            let expand = Dense::new(pb, "expand", dim, dim * expansion)?;
            let reduce = if zero_out {
                Dense::zeros(pb, "reduce", dim * expansion, dim)?
            } else {
                Dense::new(pb, "reduce", dim * expansion, dim)?
            };
            Ok(Self { mix, norm, expand, reduce })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match &self.mix {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        let y = self.reduce.forward(&self.expand.forward(&self.norm.forward(&y)?)?.gelu()?)?;
        Ok((x + y)?)
    }
}

struct Downsample {
    norm: ChannelNorm,
    proj: Dense,
}

/// Four-stage hierarchical encoder with total stride `config.stride`.
pub struct Encoder {
    stem_patch: usize,
    stem: Dense,
    stem_norm: ChannelNorm,
    stages: Vec<Vec<Block>>,
    downsamples: Vec<Downsample>,
    out_norm: ChannelNorm,
    stride: usize,
    channels: usize,
}

impl Encoder {
    /// Pixels are mapped to `(x - PIXEL_MEAN) / PIXEL_STD` before the stem.
    pub const PIXEL_MEAN: f64 = 0.5;
    pub const PIXEL_STD: f64 = 0.25;

    pub fn new(pb: &mut ParamBuilder, config: &ModelConfig) -> Result<Self> {
        let widths = config.stage_widths();
        let stem_patch = config.stride / 8;
        let stem = Dense::new(pb, "stem", 3 * stem_patch * stem_patch, widths[0])?;
        let stem_norm = ChannelNorm::new(pb, "stem_norm", widths[0])?;
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let blocks = (0..config.encoder_blocks)
                .map(|j| Block::new(pb, &format!("stage{i}.block{j}"), w, config.block_expansion, config.spatial_mixing, false))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if let Some(&next) = widths.get(i + 1) {
                downsamples.push(Downsample {
                    norm: ChannelNorm::new(pb, &format!("down{i}.norm"), w)?,
                    proj: Dense::new(pb, &format!("down{i}.proj"), 4 * w, next)?,
                });
            }
        }
        let out_norm = ChannelNorm::new(pb, "out_norm", config.c1)?;
        Ok(Self { stem_patch, stem, stem_norm, stages, downsamples, out_norm, stride: config.stride, channels: config.c1 })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `(N, H, W, 3)` images to `(N, H/stride, W/stride, C1)` representations.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by encoder stride {}", self.stride)));
        }
        let pixels = images.affine(1.0 / Self::PIXEL_STD, -Self::PIXEL_MEAN / Self::PIXEL_STD)?;
        let mut x = self.stem_norm.forward(&self.stem.forward(&patchify(&pixels, self.stem_patch)?)?)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(&x)?;
            }
            if let Some(down) = self.downsamples.get(i) {
                x = down.proj.forward(&patchify(&down.norm.forward(&x)?, 2)?)?;
            }
        }
        let out = self.out_norm.forward(&x)?;
        debug_assert_eq!(out.dims4()?.3, self.channels);
        Ok(out)
    }
}

/// Pool, two-layer MLP, L2 normalization.
pub struct ProjectionHead {
    hidden: Dense,
    out: Dense,
    in_dim: usize,
}

impl ProjectionHead {
    /// Added under the square root so an all-zero MLP output maps to the
    /// zero vector instead of NaN.
    pub const NORM_EPS: f64 = 1e-12;

    pub fn new(pb: &mut ParamBuilder, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(pb, "hidden", config.c1, config.proj_hidden)?,
            out: Dense::new(pb, "out", config.proj_hidden, config.c2)?,
            in_dim: config.c1,
        })
    }

    /// `(N, H, W, C1)` to unit-norm `(N, C2)`.
    pub fn forward(&self, representation: &Tensor) -> Result<Tensor> {
        let (_, _, _, c) = representation.dims4()?;
        if c != self.in_dim {
            return Err(Error::Shape(format!("projection expects {} channels, got {c}", self.in_dim)));
        }
        let pooled = representation.mean(1)?.mean(1)?;
        let z = self.out.forward(&self.hidden.forward(&pooled)?.relu()?)?;
        let norm = (z.sqr()?.sum_keepdim(D::Minus1)? + Self::NORM_EPS)?.sqrt()?;
        Ok(z.broadcast_div(&norm)?)
    }
}

/// Stack of residual blocks whose last projections start at zero, so a
/// fresh refiner is the identity map.
pub struct Refiner {
    blocks: Vec<Block>,
    dim: usize,
}

impl Refiner {
    pub fn new(pb: &mut ParamBuilder, config: &ModelConfig) -> Result<Self> {
        let blocks = (0..config.refiner_depth)
            .map(|i| Block::new(pb, &format!("block{i}"), config.c1, config.block_expansion, config.spatial_mixing, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, dim: config.c1 })
    }

    pub fn forward(&self, representation: &Tensor) -> Result<Tensor> {
        let (_, _, _, c) = representation.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!("refiner width is {}, representation has {c} channels", self.dim)));
        }
        let mut x = representation.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }
}

/// Counting head: a chain of kernel-2, stride-2 transposed convolutions
/// (one per factor of two of upsampling), then softplus.
pub struct DensityHead {
    layers: Vec<Dense>,
    in_dim: usize,
}

impl DensityHead {
    /// Initial softplus input; gives a small positive density everywhere.
    const OUTPUT_BIAS: f32 = -2.0;

    pub fn new(pb: &mut ParamBuilder, config: &ModelConfig) -> Result<Self> {
        let n = config.head_upsample.trailing_zeros() as usize;
        let mut layers = Vec::with_capacity(n);
        let mut width = config.c1;
        for i in 0..n {
            let last = i + 1 == n;
            let next = if last { 1 } else { (width / 2).max(1) };
            let name = format!("up{i}");
            layers.push(if last {
                Dense::with_bias(pb, &name, width, 4 * next, Self::OUTPUT_BIAS)?
            } else {
                Dense::new(pb, &name, width, 4 * next)?
            });
            width = next;
        }
        Ok(Self { layers, in_dim: config.c1 })
    }

    /// `(N, h, w, C1)` to a nonnegative `(N, h*up, w*up)` density.
    pub fn forward(&self, representation: &Tensor) -> Result<Tensor> {
        let (_, _, _, c) = representation.dims4()?;
        if c != self.in_dim {
            return Err(Error::Shape(format!("head expects {} channels, got {c}", self.in_dim)));
        }
        let mut x = representation.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = unpatchify(&layer.forward(&x)?, 2)?;
            if i + 1 < self.layers.len() {
                x = x.gelu()?;
            }
        }
        Ok(softplus(&x)?.squeeze(3)?)
    }
}
