//! Feature-level ensemble: both backbones' pooled features are flattened,
//! concatenated, and classified by one dense layer with two outputs.

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, MaxViT, MaxViTConfig, ResNet, ResNetConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear, Mode, ParamStore};
use crate::rng::RngState;
use crate::tape::Var;
use crate::tensor::{Element, Tensor};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Normal = 0,
    Pneumonia = 1,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Class::Normal),
            1 => Ok(Class::Pneumonia),
            _ => Err(Error::validation(format!("class index {i} out of range"))),
        }
    }

    /// Directory name in the on-disk dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Class::Normal => "NORMAL",
            Class::Pneumonia => "PNEUMONIA",
        }
    }

    pub const ALL: [Class; 2] = [Class::Normal, Class::Pneumonia];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Resnet,
    Maxvit,
    Fusion,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(ModelKind::Resnet),
            "maxvit" => Ok(ModelKind::Maxvit),
            "fusion" => Ok(ModelKind::Fusion),
            _ => Err(Error::Usage(format!("unknown model {s:?} (expected resnet, maxvit or fusion)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Usage(format!("unknown scale {s:?} (expected desk or full)"))),
        }
    }
}

/// Backbone configurations plus the classifier head. A model with only one
/// branch is the single-backbone baseline with the same head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModelConfig {
    pub resnet: Option<ResNetConfig>,
    pub maxvit: Option<MaxViTConfig>,
    pub num_classes: usize,
}

impl FusionModelConfig {
    pub fn desk(resolution: usize) -> Self {
        Self::preset(ModelKind::Fusion, Scale::Desk, resolution)
    }

    pub fn full() -> Self {
        Self::preset(ModelKind::Fusion, Scale::Full, 224)
    }

    pub fn preset(kind: ModelKind, scale: Scale, resolution: usize) -> Self {
        let (resnet, maxvit) = match scale {
            Scale::Desk => (ResNetConfig::desk(resolution), MaxViTConfig::desk(resolution)),
            Scale::Full => (ResNetConfig::resnet34(resolution), MaxViTConfig::small(resolution)),
        };
        Self {
            resnet: matches!(kind, ModelKind::Resnet | ModelKind::Fusion).then_some(resnet),
            maxvit: matches!(kind, ModelKind::Maxvit | ModelKind::Fusion).then_some(maxvit),
            num_classes: NUM_CLASSES,
        }
    }

    pub fn kind(&self) -> Option<ModelKind> {
        match (&self.resnet, &self.maxvit) {
            (Some(_), Some(_)) => Some(ModelKind::Fusion),
            (Some(_), None) => Some(ModelKind::Resnet),
            (None, Some(_)) => Some(ModelKind::Maxvit),
            (None, None) => None,
        }
    }

    pub fn resolution(&self) -> Option<usize> {
        self.resnet.as_ref().map(|r| r.resolution).or(self.maxvit.as_ref().map(|m| m.resolution))
    }

    /// Width of the concatenated feature vector.
    pub fn feature_dim(&self) -> usize {
        self.resnet.as_ref().map_or(0, ResNetConfig::feature_dim)
            + self.maxvit.as_ref().map_or(0, MaxViTConfig::feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        if let (Some(r), Some(m)) = (&self.resnet, &self.maxvit) {
            if r.resolution != m.resolution {
                return Err(Error::config(format!(
                    "backbone resolutions differ: resnet {} vs maxvit {}",
                    r.resolution, m.resolution
                )));
            }
        }
        if self.kind().is_none() {
            return Err(Error::config("model needs at least one backbone"));
        }
        if let Some(r) = &self.resnet {
            r.validate()?;
        }
        if let Some(m) = &self.maxvit {
            m.validate()?;
        }
        Ok(())
    }
}

/// Logits, row-stochastic probabilities and argmax labels for a batch.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    pub predicted: Vec<Class>,
}

/// Row-wise argmax over two classes; ties go to the lower index (Normal).
pub fn argmax_rows<T: Element>(values: &Tensor<T>) -> Vec<Class> {
    let k = values.shape().last().copied().unwrap_or(1).max(1);
    values
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Class::from_index(best).unwrap_or(Class::Normal)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub config: FusionModelConfig,
    pub store: ParamStore<T>,
    pub branches: Vec<Backbone>,
    pub head: Linear,
}

impl<T: Element> FusionModel<T> {
    /// Builds every branch and the head from one seed. Identical seeds give
    /// bitwise-identical parameters.
    pub fn build(config: &FusionModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut stream = rng.next_stream();
        let mut b = Builder::new(&mut store, &mut stream);
        let mut branches = Vec::new();
        if let Some(r) = &config.resnet {
            branches.push(Backbone::ResNet(ResNet::build(&mut b.scope("resnet"), r)?));
        }
        if let Some(m) = &config.maxvit {
            branches.push(Backbone::MaxViT(MaxViT::build(&mut b.scope("maxvit"), m)?));
        }
        let head = Linear::build(&mut b.scope("head"), config.feature_dim(), config.num_classes)?;
        Ok(Self { config: config.clone(), store, branches, head })
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution().unwrap_or(0)
    }

    /// Columns of the head weight fed by each branch, in concat order.
    pub fn feature_spans(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut start = 0;
        self.branches
            .iter()
            .map(|b| {
                let span = start..start + b.feature_dim();
                start = span.end;
                (b.prefix(), span)
            })
            .collect()
    }

    /// Pooled features of every branch for `x: [B,3,H,W]`.
    pub fn branch_features(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.branches.iter().map(|b| b.forward(ctx, x)).collect()
    }

    /// Logits `[B,2]`: dense(concat(flatten(f₁), flatten(f₂))).
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let feats = self.branch_features(ctx, x)?;
        let flat = feats
            .into_iter()
            .map(|f| ctx.tape.flatten(f, 1))
            .collect::<Result<Vec<_>>>()?;
        let fused = if flat.len() == 1 { flat[0] } else { ctx.tape.concat(&flat, 1)? };
        self.head.forward(ctx, fused)
    }

    /// Mean cross-entropy of the logits against labels in `{0, 1}`.
    pub fn loss(&self, ctx: &mut Ctx<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
        ctx.tape.cross_entropy(logits, labels)
    }

    /// Eval-mode prediction.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let xv = ctx.input(x.clone());
        let logits = self.forward(&mut ctx, xv)?;
        let probs = ctx.tape.softmax(logits, 1)?;
        let probabilities = ctx.tape.value(probs).clone();
        Ok(Prediction {
            logits: ctx.tape.value(logits).clone(),
            predicted: argmax_rows(&probabilities),
            probabilities,
        })
    }

    pub fn cast<U: Element>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            store: self.store.cast(),
            branches: self.branches.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_to_normal() {
        let t = Tensor::<f64>::from_f64(&[3, 2], &[0.5, 0.5, 0.2, 0.8, 0.9, 0.1]).unwrap();
        assert_eq!(argmax_rows(&t), vec![Class::Normal, Class::Pneumonia, Class::Normal]);
    }

    #[test]
    fn config_rejects_mismatched_resolution() {
        let mut cfg = FusionModelConfig::desk(64);
        cfg.maxvit.as_mut().unwrap().resolution = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn head_dims() {
        assert_eq!(FusionModelConfig::desk(64).feature_dim(), 192);
        assert_eq!(FusionModelConfig::full().feature_dim(), 1280);
        let r = FusionModelConfig::preset(ModelKind::Resnet, Scale::Desk, 64);
        assert_eq!(r.kind(), Some(ModelKind::Resnet));
        assert_eq!(r.feature_dim(), 128);
    }
}
