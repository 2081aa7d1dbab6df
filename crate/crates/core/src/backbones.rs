//! Feature extractors: a ResNet-34-style CNN and a MaxViT-style multi-axis
//! transformer, each ending in global average pooling with no head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Builder, Conv2d, Ctx, MBConv, MBConvParams, Partition, ResidualBlock,
    ResidualBlockParams, TransformerLayer,
};
use crate::tape::Var;
use crate::tensor::{Element, Tensor};

/// Output of one stage in a shape trace: `(label, channels, height, width)`.
pub type StageShape = (String, usize, usize, usize);

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|s| s / stride + 1).filter(|&s| s > 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub width_scale: f64,
    pub depth_scale: f64,
    pub resolution: usize,
}

impl ResNetConfig {
    /// ResNet-34: depths `[3,4,6,3]`, widths `[64,128,256,512]`.
    pub fn resnet34(resolution: usize) -> Self {
        Self {
            stem_channels: 64,
            depths: vec![3, 4, 6, 3],
            widths: vec![64, 128, 256, 512],
            width_scale: 1.0,
            depth_scale: 1.0,
            resolution,
        }
    }

    /// Laptop-sized preset: depths `[2,2,2,2]`, widths `[16,32,64,128]`.
    pub fn desk(resolution: usize) -> Self {
        Self {
            stem_channels: 16,
            depths: vec![2, 2, 2, 2],
            widths: vec![16, 32, 64, 128],
            width_scale: 1.0,
            depth_scale: 1.0,
            resolution,
        }
    }

    fn scale(n: usize, s: f64) -> usize {
        ((n as f64 * s).round() as usize).max(1)
    }

    pub fn effective_depths(&self) -> Vec<usize> {
        self.depths.iter().map(|&d| Self::scale(d, self.depth_scale)).collect()
    }

    pub fn effective_widths(&self) -> Vec<usize> {
        self.widths.iter().map(|&w| Self::scale(w, self.width_scale)).collect()
    }

    pub fn effective_stem(&self) -> usize {
        Self::scale(self.stem_channels, self.width_scale)
    }

    pub fn feature_dim(&self) -> usize {
        self.effective_widths().last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != 4 || self.widths.len() != 4 {
            return Err(Error::config(format!(
                "ResNet needs exactly 4 stages, got depths {:?} widths {:?}",
                self.depths, self.widths
            )));
        }
        if self.stem_channels == 0
            || self.depths.contains(&0)
            || self.widths.contains(&0)
            || self.width_scale <= 0.0
            || self.depth_scale <= 0.0
        {
            return Err(Error::config("ResNet depths, widths and scales must be positive"));
        }
        self.shape_trace().map(|_| ())
    }

    /// Shapes after the stem and each stage, computed without running the
    /// network.
    pub fn shape_trace(&self) -> Result<Vec<StageShape>> {
        let too_small = |stage: &str| {
            Error::config(format!("resolution {} too small for ResNet {stage}", self.resolution))
        };
        let mut s = self.resolution;
        s = conv_out(s, 7, 2, 3).ok_or_else(|| too_small("stem"))?;
        s = conv_out(s, 3, 2, 1).ok_or_else(|| too_small("stem pool"))?;
        let mut trace = vec![("stem".to_string(), self.effective_stem(), s, s)];
        for (i, &w) in self.effective_widths().iter().enumerate() {
            if i > 0 {
                s = conv_out(s, 3, 2, 1).ok_or_else(|| too_small(&format!("stage {}", i + 1)))?;
            }
            trace.push((format!("stage{}", i + 1), w, s, s));
        }
        trace.push(("pool".to_string(), self.feature_dim(), 1, 1));
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxViTConfig {
    pub stem_channels: usize,
    pub depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub grid: usize,
    pub expansion: usize,
    pub mlp_ratio: usize,
    pub se_ratio: Option<f64>,
    pub rel_pos_bias: bool,
    pub resolution: usize,
}

impl MaxViTConfig {
    /// MaxViT-small: stem 64, depths `[2,2,5,2]`, channels
    /// `[96,192,384,768]`, 32-wide heads, 7×7 windows and grids.
    pub fn small(resolution: usize) -> Self {
        Self {
            stem_channels: 64,
            depths: vec![2, 2, 5, 2],
            channels: vec![96, 192, 384, 768],
            heads: vec![3, 6, 12, 24],
            window: 7,
            grid: 7,
            expansion: 4,
            mlp_ratio: 4,
            se_ratio: Some(0.25),
            rel_pos_bias: false,
            resolution,
        }
    }

    /// Laptop-sized preset: two stages `[32,64]`, one block each, P = G = 4.
    pub fn desk(resolution: usize) -> Self {
        Self {
            stem_channels: 16,
            depths: vec![1, 1],
            channels: vec![32, 64],
            heads: vec![2, 4],
            window: 4,
            grid: 4,
            expansion: 4,
            mlp_ratio: 4,
            se_ratio: Some(0.25),
            rel_pos_bias: false,
            resolution,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depths.len();
        if n == 0 || self.channels.len() != n || self.heads.len() != n {
            return Err(Error::config(format!(
                "MaxViT stage lists disagree: depths {:?}, channels {:?}, heads {:?}",
                self.depths, self.channels, self.heads
            )));
        }
        if self.stem_channels == 0
            || self.depths.contains(&0)
            || self.channels.contains(&0)
            || self.window == 0
            || self.grid == 0
            || self.expansion == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::config("MaxViT sizes must be positive"));
        }
        for (i, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return Err(Error::config(format!("stage {}: {c} channels not divisible by {h} heads", i + 1)));
            }
        }
        self.shape_trace().map(|_| ())
    }

    pub fn shape_trace(&self) -> Result<Vec<StageShape>> {
        let mut s = conv_out(self.resolution, 3, 2, 1)
            .ok_or_else(|| Error::config(format!("resolution {} too small for MaxViT stem", self.resolution)))?;
        let mut trace = vec![("stem".to_string(), self.stem_channels, s, s)];
        for (i, &c) in self.channels.iter().enumerate() {
            s = conv_out(s, 3, 2, 1)
                .ok_or_else(|| Error::config(format!("stage {}: resolution collapsed to zero", i + 1)))?;
            for (what, p) in [("window", self.window), ("grid", self.grid)] {
                if s % p != 0 {
                    return Err(Error::config(format!(
                        "stage {}: {s}x{s} feature map is not divisible by {what} {p}",
                        i + 1
                    )));
                }
            }
            trace.push((format!("stage{}", i + 1), c, s, s));
        }
        trace.push(("pool".to_string(), self.feature_dim(), 1, 1));
        Ok(trace)
    }
}

/// Pooled, head-free features `[B, D]`.
#[derive(Clone, Debug)]
pub struct BackboneOutput<T> {
    pub features: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub config: ResNetConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<ResidualBlock>>,
}

impl ResNet {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, config: &ResNetConfig) -> Result<Self> {
        config.validate()?;
        let stem = config.effective_stem();
        let stem_conv = Conv2d::build(&mut b.scope("stem.conv"), 3, stem, 7, 2, 3, 1, false)?;
        let stem_bn = BatchNorm::build(&mut b.scope("stem.bn"), stem)?;
        let mut stages = Vec::new();
        let mut in_ch = stem;
        for (si, (&depth, &width)) in config.effective_depths().iter().zip(&config.effective_widths()).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let p = ResidualBlockParams { in_ch, out_ch: width, stride, zero_init_last_bn: true };
                blocks.push(ResidualBlock::build(&mut b.scope(format!("stage{}.block{bi}", si + 1)), p)?);
                in_ch = width;
            }
            stages.push(blocks);
        }
        Ok(Self { config: config.clone(), stem_conv, stem_bn, stages })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_input(ctx, x, self.config.resolution)?;
        let h = self.stem_conv.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let mut h = ctx.tape.max_pool2d(h, 3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(ctx, h)?;
            }
        }
        ctx.tape.global_avg_pool(h)
    }
}

#[derive(Clone, Debug)]
struct MaxViTBlock {
    mbconv: MBConv,
    block_attn: TransformerLayer,
    grid_attn: TransformerLayer,
}

#[derive(Clone, Debug)]
pub struct MaxViT {
    pub config: MaxViTConfig,
    stem_conv1: Conv2d,
    stem_bn: BatchNorm,
    stem_conv2: Conv2d,
    stages: Vec<Vec<MaxViTBlock>>,
}

impl MaxViT {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, config: &MaxViTConfig) -> Result<Self> {
        config.validate()?;
        let stem = config.stem_channels;
        let stem_conv1 = Conv2d::build(&mut b.scope("stem.conv1"), 3, stem, 3, 2, 1, 1, false)?;
        let stem_bn = BatchNorm::build(&mut b.scope("stem.bn"), stem)?;
        let stem_conv2 = Conv2d::build(&mut b.scope("stem.conv2"), stem, stem, 3, 1, 1, 1, true)?;
        let mut stages = Vec::new();
        let mut in_ch = stem;
        for (si, (&depth, (&ch, &heads))) in
            config.depths.iter().zip(config.channels.iter().zip(&config.heads)).enumerate()
        {
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                let mut sb = b.scope(format!("stage{}.block{bi}", si + 1));
                let stride = if bi == 0 { 2 } else { 1 };
                let mut p = MBConvParams::new(in_ch, ch, stride);
                p.expansion = config.expansion;
                p.se_ratio = config.se_ratio;
                let mbconv = MBConv::build(&mut sb.scope("mbconv"), p)?;
                let block_attn = TransformerLayer::build(
                    &mut sb.scope("block_attn"),
                    ch,
                    heads,
                    Partition::Block(config.window),
                    config.mlp_ratio,
                    config.rel_pos_bias,
                )?;
                let grid_attn = TransformerLayer::build(
                    &mut sb.scope("grid_attn"),
                    ch,
                    heads,
                    Partition::Grid(config.grid),
                    config.mlp_ratio,
                    config.rel_pos_bias,
                )?;
                blocks.push(MaxViTBlock { mbconv, block_attn, grid_attn });
                in_ch = ch;
            }
            stages.push(blocks);
        }
        Ok(Self { config: config.clone(), stem_conv1, stem_bn, stem_conv2, stages })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_input(ctx, x, self.config.resolution)?;
        let h = self.stem_conv1.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let h = ctx.tape.gelu(h);
        let mut h = self.stem_conv2.forward(ctx, h)?;
        for stage in &self.stages {
            for block in stage {
                h = block.mbconv.forward(ctx, h)?;
                h = block.block_attn.forward(ctx, h)?;
                h = block.grid_attn.forward(ctx, h)?;
            }
        }
        ctx.tape.global_avg_pool(h)
    }
}

fn check_input<T: Element>(ctx: &Ctx<'_, T>, x: Var, resolution: usize) -> Result<()> {
    let s = ctx.tape.shape(x);
    if s.len() != 4 || s[1] != 3 || s[2] != resolution || s[3] != resolution {
        return Err(Error::dim(format!(
            "backbone expects [B,3,{resolution},{resolution}] input, got {s:?}"
        )));
    }
    Ok(())
}

/// Either backbone behind one interface.
#[derive(Clone, Debug)]
pub enum Backbone {
    ResNet(ResNet),
    MaxViT(MaxViT),
}

impl Backbone {
    /// Parameter-name prefix the backbone is registered under.
    pub fn prefix(&self) -> &'static str {
        match self {
            Backbone::ResNet(_) => "resnet",
            Backbone::MaxViT(_) => "maxvit",
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::ResNet(r) => r.feature_dim(),
            Backbone::MaxViT(m) => m.feature_dim(),
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Backbone::ResNet(r) => r.config.resolution,
            Backbone::MaxViT(m) => m.config.resolution,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Backbone::ResNet(r) => r.forward(ctx, x),
            Backbone::MaxViT(m) => m.forward(ctx, x),
        }
    }

    /// Pooled features of `x: [B,3,H,W]` as a plain tensor.
    pub fn extract_features<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<BackboneOutput<T>> {
        let xv = ctx.input(x.clone());
        let f = self.forward(ctx, xv)?;
        Ok(BackboneOutput { features: ctx.tape.value(f).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet34_trace_at_224() {
        let trace = ResNetConfig::resnet34(224).shape_trace().unwrap();
        let sizes: Vec<usize> = trace.iter().map(|t| t.2).collect();
        assert_eq!(sizes, vec![56, 56, 28, 14, 7, 1]);
        assert_eq!(trace.last().unwrap().1, 512);
    }

    #[test]
    fn maxvit_small_trace_at_224() {
        let cfg = MaxViTConfig::small(224);
        cfg.validate().unwrap();
        let trace = cfg.shape_trace().unwrap();
        let sizes: Vec<usize> = trace.iter().map(|t| t.2).collect();
        assert_eq!(sizes, vec![112, 56, 28, 14, 7, 1]);
        assert_eq!(cfg.feature_dim(), 768);
    }

    #[test]
    fn maxvit_divisibility_error_names_stage() {
        let mut cfg = MaxViTConfig::desk(64);
        cfg.window = 3;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("stage 1"), "{msg}");
    }

    #[test]
    fn resnet_rejects_zero_depth() {
        let mut cfg = ResNetConfig::desk(64);
        cfg.depths[2] = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ResNetConfig::desk(64);
        cfg.widths.pop();
        assert!(cfg.validate().is_err());
    }
}
