use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::tensor::Element;

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moments per parameter (empty for buffers) and the number of
/// steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::nn::Param<T>| match p.kind {
            ParamKind::Trainable => vec![T::zero(); p.tensor.numel()],
            ParamKind::Buffer => Vec::new(),
        };
        Self {
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }
}

impl Adam {
    /// One update of every parameter listed in `grads`:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
    /// p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)
    /// ```
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
        state: &mut OptimizerState<T>,
        lr: f64,
    ) -> Result<()> {
        let t = state.step + 1;
        for (id, g) in grads {
            let p = store.get(*id);
            if p.kind != ParamKind::Trainable {
                return Err(Error::Contract(format!("gradient supplied for buffer {}", p.name)));
            }
            if g.len() != p.tensor.numel() || state.m[id.index()].len() != g.len() {
                return Err(Error::dim(format!("gradient of {} has {} values for {:?}", p.name, g.len(), p.tensor.shape())));
            }
            if let Some(i) = g.iter().position(|v| !v.f64().is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} is non-finite at element {i}, step {t}", p.name)));
            }
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let data = store.tensor_mut(*id).data_mut();
            for j in 0..g.len() {
                let gj = g[j].f64();
                let mj = self.beta1 * m[j].f64() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j].f64() + (1.0 - self.beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                data[j] = T::of(data[j].f64() * decay - lr * update);
            }
        }
        state.step = t;
        Ok(())
    }
}
