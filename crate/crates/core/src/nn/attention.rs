//! Multi-axis self-attention: blocked local windows and dilated global grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Init, LayerNorm, Linear, Mlp, ParamId};
use crate::tape::Var;
use crate::tensor::Element;

/// How a `[B,C,H,W]` map is cut into independent attention groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Non-overlapping `P×P` windows.
    Block(usize),
    /// A `G×G` grid of tokens per group, strided by `(H/G, W/G)` across the
    /// whole map.
    Grid(usize),
}

impl Partition {
    pub fn size(self) -> usize {
        match self {
            Partition::Block(p) | Partition::Grid(p) => p,
        }
    }

    pub fn check(self, h: usize, w: usize) -> Result<()> {
        let s = self.size();
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::dim(format!("{self:?} does not evenly divide a {h}x{w} map")));
        }
        Ok(())
    }

    /// Spatial position `(y, x)` of token `t` in group `g`.
    pub fn position(self, h: usize, w: usize, g: usize, t: usize) -> (usize, usize) {
        match self {
            Partition::Block(p) => {
                let per_row = w / p;
                let (gy, gx) = (g / per_row, g % per_row);
                (gy * p + t / p, gx * p + t % p)
            }
            Partition::Grid(gs) => {
                let (dh, dw) = (h / gs, w / gs);
                let (gy, gx) = (g / dw, g % dw);
                ((t / gs) * dh + gy, (t % gs) * dw + gx)
            }
        }
    }

    /// Group index and in-group token index of spatial position `(y, x)`.
    pub fn group_of(self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
        match self {
            Partition::Block(p) => ((y / p) * (w / p) + x / p, (y % p) * p + x % p),
            Partition::Grid(gs) => {
                let (dh, dw) = (h / gs, w / gs);
                ((y % dh) * dw + x % dw, (y / dh) * gs + x / dw)
            }
        }
    }

    pub fn groups(self, h: usize, w: usize) -> usize {
        let s = self.size();
        (h / s) * (w / s)
    }

    pub fn tokens(self) -> usize {
        self.size() * self.size()
    }

    /// Gather index taking `[B,C,H,W]` to `[B·groups, tokens, C]`.
    fn forward_index(self, b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
        let (groups, n) = (self.groups(h, w), self.tokens());
        let mut index = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for g in 0..groups {
                for t in 0..n {
                    let (y, x) = self.position(h, w, g, t);
                    for ch in 0..c {
                        index.push(((bi * c + ch) * h + y) * w + x);
                    }
                }
            }
        }
        index
    }

    pub(crate) fn split<T: Element>(self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::dim(format!("attention partition expects [B,C,H,W], got {s:?}")));
        };
        self.check(h, w)?;
        let index = self.forward_index(b, c, h, w);
        ctx.tape.gather(x, index, &[b * self.groups(h, w), self.tokens(), c])
    }

    pub(crate) fn merge<T: Element>(
        self,
        ctx: &mut Ctx<'_, T>,
        tokens: Var,
        shape: [usize; 4],
    ) -> Result<Var> {
        let [b, c, h, w] = shape;
        let forward = self.forward_index(b, c, h, w);
        let mut inverse = vec![0; forward.len()];
        for (pos, &src) in forward.iter().enumerate() {
            inverse[src] = pos;
        }
        ctx.tape.gather(tokens, inverse, &shape)
    }
}

/// Multi-head scaled dot-product self-attention with separate q, k, v and
/// output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// Learned `[heads, (2S-1)²]` bias table for `S×S` token groups.
    pub rel_bias: Option<(ParamId, usize)>,
}

impl Attention {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        dim: usize,
        heads: usize,
        rel_bias_window: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{dim} channels cannot be split into {heads} heads")));
        }
        let rel_bias = match rel_bias_window {
            Some(s) => {
                let id = b.param("rel_bias", &[heads, (2 * s - 1) * (2 * s - 1)], Init::TruncNormal { std: 0.02 })?;
                Some((id, s))
            }
            None => None,
        };
        Ok(Self {
            dim,
            heads,
            q: Linear::build(&mut b.scope("q"), dim, dim)?,
            k: Linear::build(&mut b.scope("k"), dim, dim)?,
            v: Linear::build(&mut b.scope("v"), dim, dim)?,
            out: Linear::build(&mut b.scope("out"), dim, dim)?,
            rel_bias,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[G,N,C] -> [G·heads, N, head_dim]`
    fn split_heads<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, g: usize, n: usize) -> Result<Var> {
        let hd = self.head_dim();
        let x = ctx.tape.reshape(x, &[g, n, self.heads, hd])?;
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        ctx.tape.reshape(x, &[g * self.heads, n, hd])
    }

    /// Attention within each group of `tokens: [G,N,C]`.
    pub fn forward_tokens<T: Element>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<Var> {
        let s = ctx.tape.shape(tokens).to_vec();
        let [g, n, c] = s[..] else {
            return Err(Error::dim(format!("attention expects [G,N,C] tokens, got {s:?}")));
        };
        if c != self.dim {
            return Err(Error::dim(format!("attention of width {} applied to {s:?}", self.dim)));
        }
        let hd = self.head_dim();
        let q = self.q.forward(ctx, tokens)?;
        let k = self.k.forward(ctx, tokens)?;
        let v = self.v.forward(ctx, tokens)?;
        let q = self.split_heads(ctx, q, g, n)?;
        let k = self.split_heads(ctx, k, g, n)?;
        let v = self.split_heads(ctx, v, g, n)?;
        let kt = ctx.tape.permute(k, &[0, 2, 1])?;
        let scores = ctx.tape.matmul(q, kt)?;
        let mut scores = ctx.tape.scale(scores, (hd as f64).powf(-0.5));
        if let Some((table, side)) = self.rel_bias {
            if side * side != n {
                return Err(Error::dim(format!("relative bias for {side}x{side} groups used with {n} tokens")));
            }
            let span = 2 * side - 1;
            let mut index = Vec::with_capacity(self.heads * n * n);
            for h in 0..self.heads {
                for i in 0..n {
                    for j in 0..n {
                        let dy = i / side + side - 1 - j / side;
                        let dx = i % side + side - 1 - j % side;
                        index.push(h * span * span + dy * span + dx);
                    }
                }
            }
            let tv = ctx.p(table);
            let bias = ctx.tape.gather(tv, index, &[1, self.heads, n, n])?;
            let s4 = ctx.tape.reshape(scores, &[g, self.heads, n, n])?;
            let s4 = ctx.tape.add(s4, bias)?;
            scores = ctx.tape.reshape(s4, &[g * self.heads, n, n])?;
        }
        let weights = ctx.tape.softmax(scores, 2)?;
        ctx.record_attention(weights);
        let heads_out = ctx.tape.matmul(weights, v)?;
        let merged = ctx.tape.reshape(heads_out, &[g, self.heads, n, hd])?;
        let merged = ctx.tape.permute(merged, &[0, 2, 1, 3])?;
        let merged = ctx.tape.reshape(merged, &[g, n, c])?;
        self.out.forward(ctx, merged)
    }

    /// Partition `x: [B,C,H,W]`, attend within each group, and scatter back.
    pub fn forward_spatial<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, part: Partition) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let tokens = part.split(ctx, x)?;
        let y = self.forward_tokens(ctx, tokens)?;
        part.merge(ctx, y, [s[0], s[1], s[2], s[3]])
    }

    /// Self-attention restricted to non-overlapping `window×window` blocks.
    pub fn block_attention<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, window: usize) -> Result<Var> {
        self.forward_spatial(ctx, x, Partition::Block(window))
    }

    /// Self-attention over dilated `grid×grid` token sets spanning the map.
    pub fn grid_attention<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, grid: usize) -> Result<Var> {
        self.forward_spatial(ctx, x, Partition::Grid(grid))
    }
}

/// Pre-norm transformer layer applied within one partition:
/// `y = x + attn(LN(x))`, `out = y + MLP(LN(y))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub partition: Partition,
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        dim: usize,
        heads: usize,
        partition: Partition,
        mlp_ratio: usize,
        rel_bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            partition,
            norm1: LayerNorm::build(&mut b.scope("norm1"), dim)?,
            attn: Attention::build(&mut b.scope("attn"), dim, heads, rel_bias.then_some(partition.size()))?,
            norm2: LayerNorm::build(&mut b.scope("norm2"), dim)?,
            mlp: Mlp::build(&mut b.scope("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let tokens = self.partition.split(ctx, x)?;
        let h = self.norm1.forward(ctx, tokens)?;
        let h = self.attn.forward_tokens(ctx, h)?;
        let y = ctx.tape.add(tokens, h)?;
        let h = self.norm2.forward(ctx, y)?;
        let h = self.mlp.forward(ctx, h)?;
        let y = ctx.tape.add(y, h)?;
        self.partition.merge(ctx, y, [s[0], s[1], s[2], s[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_bijections() {
        for part in [Partition::Block(2), Partition::Block(4), Partition::Grid(2), Partition::Grid(4)] {
            let (h, w) = (8, 4);
            if part.check(h, w).is_err() {
                continue;
            }
            let mut seen = vec![false; h * w];
            for g in 0..part.groups(h, w) {
                for t in 0..part.tokens() {
                    let (y, x) = part.position(h, w, g, t);
                    assert!(!seen[y * w + x]);
                    seen[y * w + x] = true;
                    assert_eq!(part.group_of(h, w, y, x), (g, t));
                }
            }
            assert!(seen.into_iter().all(|s| s));
        }
    }

    #[test]
    fn grid_groups_are_dilated() {
        let part = Partition::Grid(2);
        // 4x4 map, grid 2: dilation 2, group 0 holds the even/even positions.
        let members: Vec<_> = (0..4).map(|t| part.position(4, 4, 0, t)).collect();
        assert_eq!(members, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        let block = Partition::Block(2);
        let members: Vec<_> = (0..4).map(|t| block.position(4, 4, 0, t)).collect();
        assert_eq!(members, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn divisibility_enforced() {
        assert!(Partition::Block(3).check(8, 8).is_err());
        assert!(Partition::Grid(4).check(8, 8).is_ok());
    }
}
