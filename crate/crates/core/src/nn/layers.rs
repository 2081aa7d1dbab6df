use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Init, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Element};

/// `x·w + b` for `x: [B,D]`, `w: [D,O]`, `b: [O]`.
pub fn dense<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (sx, sw, sb) = (tape.shape(x).to_vec(), tape.shape(w).to_vec(), tape.shape(b).to_vec());
    match (sx.as_slice(), sw.as_slice(), sb.as_slice()) {
        ([_, d], [d2, o], [o2]) if d == d2 && o == o2 => {}
        _ => {
            return Err(Error::dim(format!(
                "dense of input {sx:?} with weight {sw:?} and bias {sb:?}"
            )))
        }
    }
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        b: &mut Builder<'_, T>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::config(format!(
                "conv {in_ch}->{out_ch} cannot be split into {groups} groups"
            )));
        }
        let fan_in = in_ch / groups * kernel * kernel;
        let weight =
            b.param("weight", &[out_ch, in_ch / groups, kernel, kernel], Init::HeNormal { fan_in })?;
        let bias = if bias { Some(b.param("bias", &[out_ch], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, in_ch, out_ch, kernel, stride, pad, groups })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad, self.groups)?;
        match self.bias {
            Some(b) => {
                let bv = ctx.p(b);
                let b4 = ctx.tape.reshape(bv, &[1, self.out_ch, 1, 1])?;
                ctx.tape.add(y, b4)
            }
            None => Ok(y),
        }
    }

    pub fn out_size(&self, size: usize) -> Option<usize> {
        (size + 2 * self.pad).checked_sub(self.kernel).map(|s| s / self.stride + 1)
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, channels: usize) -> Result<Self> {
        Self::build_with_gamma(b, channels, Init::Ones)
    }

    /// Batch norm whose scale starts at zero, making the branch it ends an
    /// exact zero at initialization.
    pub fn build_zero_gamma<T: Element>(b: &mut Builder<'_, T>, channels: usize) -> Result<Self> {
        Self::build_with_gamma(b, channels, Init::Zeros)
    }

    fn build_with_gamma<T: Element>(b: &mut Builder<'_, T>, channels: usize, gamma: Init) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels], gamma)?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
            running_mean: b.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: b.buffer("running_var", &[channels], Init::Ones)?,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.is_train() {
            let (y, stats) = ctx.tape.batch_norm(x, g, b, None)?;
            let stats = stats.expect("training-mode batch norm returns statistics");
            let m = T::of(self.momentum);
            let keep = T::one() - m;
            let store = ctx.store();
            let blend = |id: ParamId, batch: &[T]| -> Vec<T> {
                store.tensor(id).data().iter().zip(batch).map(|(&r, &s)| keep * r + m * s).collect()
            };
            let rm = blend(self.running_mean, &stats.mean);
            let rv = blend(self.running_var, &stats.var);
            ctx.push_buffer_update(self.running_mean, rm);
            ctx.push_buffer_update(self.running_var, rv);
            Ok(y)
        } else {
            let store = ctx.store();
            let rm = store.tensor(self.running_mean).data();
            let rv = store.tensor(self.running_var).data();
            let (y, _) = ctx.tape.batch_norm(x, g, b, Some((rm, rv)))?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Ones)?,
            beta: b.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Affine map over the last axis of a tensor of any rank.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[in_dim, out_dim], Init::TruncNormal { std: 0.02 })?,
            bias: b.param("bias", &[out_dim], Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.last() != Some(&self.in_dim) {
            return Err(Error::dim(format!("linear layer of width {} applied to {s:?}", self.in_dim)));
        }
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        if s.len() == 2 {
            return dense(&mut ctx.tape, x, w, b);
        }
        let rows = numel(&s[..s.len() - 1]);
        let flat = ctx.tape.reshape(x, &[rows, self.in_dim])?;
        let y = dense(&mut ctx.tape, flat, w, b)?;
        let mut out_shape = s;
        *out_shape.last_mut().expect("rank checked above") = self.out_dim;
        ctx.tape.reshape(y, &out_shape)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::build(&mut b.scope("fc1"), dim, hidden)?,
            fc2: Linear::build(&mut b.scope("fc2"), hidden, dim)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn dense_zero_weights_give_bias_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::from_f64(&[2], &[1., -1.]).unwrap());
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1., -1., 1., -1., 1., -1.]);
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::<f64>::new();
        let data = [0.3, -1.2, 2.5, 7.0];
        let x = tape.constant(Tensor::from_f64(&[2, 2], &data).unwrap());
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &data);
    }

    #[test]
    fn dense_rejects_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(dense(&mut tape, x, w, b), Err(Error::Dimension(_))));
    }
}
