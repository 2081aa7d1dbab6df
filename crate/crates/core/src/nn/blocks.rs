//! Convolutional building blocks: the ResNet basic block and MBConv.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Conv2d, Ctx, Linear};
use crate::tape::Var;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlockParams {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Start the second batch norm's scale at zero so the block begins as
    /// `relu(skip(x))`.
    pub zero_init_last_bn: bool,
}

/// Two 3×3 conv + BN layers with a shortcut; a 1×1 conv + BN projects the
/// shortcut when the stride or channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub params: ResidualBlockParams,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub downsample: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, p: ResidualBlockParams) -> Result<Self> {
        if p.in_ch == 0 || p.out_ch == 0 || p.stride == 0 {
            return Err(Error::config(format!("invalid residual block {p:?}")));
        }
        let conv1 = Conv2d::build(&mut b.scope("conv1"), p.in_ch, p.out_ch, 3, p.stride, 1, 1, false)?;
        let bn1 = BatchNorm::build(&mut b.scope("bn1"), p.out_ch)?;
        let conv2 = Conv2d::build(&mut b.scope("conv2"), p.out_ch, p.out_ch, 3, 1, 1, 1, false)?;
        let bn2 = if p.zero_init_last_bn {
            BatchNorm::build_zero_gamma(&mut b.scope("bn2"), p.out_ch)?
        } else {
            BatchNorm::build(&mut b.scope("bn2"), p.out_ch)?
        };
        let downsample = if p.stride != 1 || p.in_ch != p.out_ch {
            let mut d = b.scope("downsample");
            let conv = Conv2d::build(&mut d.scope("conv"), p.in_ch, p.out_ch, 1, p.stride, 0, 1, false)?;
            let bn = BatchNorm::build(&mut d.scope("bn"), p.out_ch)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self { params: p, conv1, bn1, conv2, bn2, downsample })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.params.in_ch {
            return Err(Error::dim(format!(
                "residual block expects {} input channels, got {s:?}",
                self.params.in_ch
            )));
        }
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.relu(sum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MBConvParams {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub stride: usize,
    /// Squeeze-excitation width as a fraction of `in_ch`; `None` disables it.
    pub se_ratio: Option<f64>,
}

impl MBConvParams {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self { in_ch, out_ch, expansion: 4, stride, se_ratio: Some(0.25) }
    }

    pub fn hidden(&self) -> usize {
        self.out_ch * self.expansion
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

/// Channel gate: pool → dense → GELU → dense → sigmoid → scale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
}

impl SqueezeExcite {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, channels: usize, reduced: usize) -> Result<Self> {
        Ok(Self {
            reduce: Linear::build(&mut b.scope("reduce"), channels, reduced)?,
            expand: Linear::build(&mut b.scope("expand"), reduced, channels)?,
            channels,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = ctx.tape.shape(x)[0];
        let pooled = ctx.tape.global_avg_pool(x)?;
        let h = self.reduce.forward(ctx, pooled)?;
        let h = ctx.tape.gelu(h);
        let h = self.expand.forward(ctx, h)?;
        let gate = ctx.tape.sigmoid(h);
        let gate = ctx.tape.reshape(gate, &[b, self.channels, 1, 1])?;
        ctx.tape.mul(x, gate)
    }
}

/// Inverted bottleneck: 1×1 expand → depthwise 3×3 → squeeze-excitation →
/// 1×1 project, plus identity skip for stride-1 equal-width blocks.
#[derive(Clone, Debug)]
pub struct MBConv {
    pub params: MBConvParams,
    pub expand: Conv2d,
    pub bn1: BatchNorm,
    pub depthwise: Conv2d,
    pub bn2: BatchNorm,
    pub se: Option<SqueezeExcite>,
    pub project: Conv2d,
}

impl MBConv {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, p: MBConvParams) -> Result<Self> {
        if p.in_ch == 0 || p.out_ch == 0 || p.expansion == 0 || !(p.stride == 1 || p.stride == 2) {
            return Err(Error::config(format!("invalid MBConv {p:?}")));
        }
        let hidden = p.hidden();
        let expand = Conv2d::build(&mut b.scope("expand"), p.in_ch, hidden, 1, 1, 0, 1, false)?;
        let bn1 = BatchNorm::build(&mut b.scope("bn1"), hidden)?;
        let depthwise =
            Conv2d::build(&mut b.scope("depthwise"), hidden, hidden, 3, p.stride, 1, hidden, false)?;
        let bn2 = BatchNorm::build(&mut b.scope("bn2"), hidden)?;
        let se = match p.se_ratio {
            Some(r) => {
                let reduced = ((p.in_ch as f64 * r).round() as usize).max(1);
                Some(SqueezeExcite::build(&mut b.scope("se"), hidden, reduced)?)
            }
            None => None,
        };
        let project = Conv2d::build(&mut b.scope("project"), hidden, p.out_ch, 1, 1, 0, 1, true)?;
        Ok(Self { params: p, expand, bn1, depthwise, bn2, se, project })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.params.in_ch {
            return Err(Error::dim(format!(
                "MBConv expects {} input channels, got {s:?}",
                self.params.in_ch
            )));
        }
        let h = self.expand.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h);
        let h = self.depthwise.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let mut h = ctx.tape.gelu(h);
        if let Some(se) = &self.se {
            h = se.forward(ctx, h)?;
        }
        let h = self.project.forward(ctx, h)?;
        if self.params.has_skip() {
            ctx.tape.add(h, x)
        } else {
            Ok(h)
        }
    }
}
