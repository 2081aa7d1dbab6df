//! Reference implementations shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use fusionnet::data::{augment, collate, synth_dataset, AugmentConfig};
use fusionnet::nn::{Attention, Builder, Ctx, Linear, Mode, ParamStore, Partition};
use fusionnet::train::{lr_at, OptimizerState, TrainingConfig};
use fusionnet::{FusionModel, FusionModelConfig, ModelKind, RngState, Scale, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const RES: usize = 32;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Replaces every parameter with N(0, scale²) so attention is far from uniform.
pub fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn attention(dim: usize, heads: usize, rel: Option<usize>, seed: u64) -> (ParamStore<f64>, Attention) {
    let mut store = ParamStore::new();
    let mut rng = RngState::new(seed).stream_at(0);
    let attn = Attention::build(&mut Builder::new(&mut store, &mut rng), dim, heads, rel).unwrap();
    scramble(&mut store, &mut RngState::new(seed).stream_at(1), 0.5);
    (store, attn)
}

pub fn run_attention(store: &ParamStore<f64>, attn: &Attention, x: &Tensor<f64>, part: Partition) -> Tensor<f64> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let xv = ctx.input(x.clone());
    let y = attn.forward_spatial(&mut ctx, xv, part).unwrap();
    ctx.tape.value(y).clone()
}

/// Spatial positions whose output changed, over all batch items and channels.
pub fn changed_positions(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<(usize, usize)> {
    let [n, c, h, w] = a.shape()[..] else { panic!("rank 4 expected") };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let diff = (0..n).any(|i| {
                (0..c).any(|ch| {
                    let k = ((i * c + ch) * h + y) * w + x;
                    a.data()[k].to_bits() != b.data()[k].to_bits()
                })
            });
            if diff {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn perturb(x: &Tensor<f64>, py: usize, px: usize) -> Tensor<f64> {
    let [_, c, h, w] = x.shape()[..] else { panic!() };
    let mut p = x.clone();
    for ch in 0..c {
        p.data_mut()[(ch * h + py) * w + px] += 1.0;
    }
    p
}

/// Plain-loop multi-head global self-attention over all `h·w` positions.
pub fn dense_oracle(store: &ParamStore<f64>, attn: &Attention, x: &Tensor<f64>) -> Tensor<f64> {
    let [b, c, h, w] = x.shape()[..] else { panic!() };
    let n = h * w;
    let (heads, hd) = (attn.heads, attn.head_dim());
    let project = |lin: &Linear, tokens: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (wt, bias) = (store.tensor(lin.weight).data(), store.tensor(lin.bias).data());
        tokens
            .iter()
            .map(|t| (0..lin.out_dim).map(|o| bias[o] + (0..lin.in_dim).map(|i| t[i] * wt[i * lin.out_dim + o]).sum::<f64>()).collect())
            .collect()
    };
    let mut out = Tensor::new(&[b, c, h, w], vec![0.0; b * c * n]).unwrap();
    for bi in 0..b {
        let tokens: Vec<Vec<f64>> =
            (0..n).map(|p| (0..c).map(|ch| x.data()[(bi * c + ch) * n + p]).collect()).collect();
        let (q, k, v) = (project(&attn.q, &tokens), project(&attn.k, &tokens), project(&attn.v, &tokens));
        let mut merged = vec![vec![0.0; c]; n];
        for head in 0..heads {
            let r = head * hd..(head + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| r.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in r.clone() {
                    merged[i][d] = (0..n).map(|j| e[j] / z * v[j][d]).sum();
                }
            }
        }
        let y = project(&attn.out, &merged);
        for p in 0..n {
            for ch in 0..c {
                out.data_mut()[(bi * c + ch) * n + p] = y[p][ch];
            }
        }
    }
    out
}

/// A single-backbone model carrying the fused model's weights for that branch.
pub fn standalone(fused: &FusionModel<f64>, kind: ModelKind) -> FusionModel<f64> {
    let cfg = FusionModelConfig::preset(kind, Scale::Desk, RES);
    let mut single = FusionModel::<f64>::build(&cfg, &mut RngState::new(99)).unwrap();
    let ids: Vec<_> = single.store.ids().collect();
    let mut copied = 0;
    for id in ids {
        let name = single.store.get(id).name.clone();
        if name.starts_with("head") {
            continue;
        }
        let src = fused.store.find(&name).unwrap_or_else(|| panic!("{name} missing from fused model"));
        let data = fused.store.tensor(src).data().to_vec();
        single.store.tensor_mut(id).data_mut().copy_from_slice(&data);
        copied += 1;
    }
    assert!(copied > 0);
    single
}

/// Runs each backbone in its own context, concatenates the pooled features
/// and applies the fused head with plain loops.
pub fn oracle(fused: &FusionModel<f64>, x: &Tensor<f64>, mode: Mode) -> Vec<f64> {
    let batch = x.shape()[0];
    let mut feats = vec![Vec::new(); batch];
    for kind in [ModelKind::Resnet, ModelKind::Maxvit] {
        let single = standalone(fused, kind);
        let mut ctx = Ctx::new(&single.store, mode);
        let xv = ctx.input(x.clone());
        let f = single.branch_features(&mut ctx, xv).unwrap().remove(0);
        let t = ctx.tape.value(f);
        let d = t.numel() / batch;
        for (b, row) in feats.iter_mut().enumerate() {
            row.extend_from_slice(&t.data()[b * d..(b + 1) * d]);
        }
    }
    let (w, bias) = (fused.store.tensor(fused.head.weight), fused.store.tensor(fused.head.bias));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut logits = Vec::with_capacity(batch * dout);
    for row in &feats {
        assert_eq!(row.len(), din);
        for o in 0..dout {
            logits.push(bias.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>());
        }
    }
    logits
}

pub fn fused_model(seed: u64) -> FusionModel<f64> {
    let mut model = FusionModel::<f64>::build(&FusionModelConfig::desk(RES), &mut RngState::new(seed)).unwrap();
    let mut rng = RngState::new(seed).stream_at(7);
    let head = model.head.clone();
    for id in [head.weight, head.bias] {
        for v in model.store.tensor_mut(id).data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

/// Repeated full-batch steps on eight images until the loss drops below 0.01.
pub fn overfit_steps(max_steps: usize) -> Option<usize> {
    let images = synth_dataset(4, 32, &RngState::new(1)).unwrap();
    let members: Vec<usize> = (0..images.len()).collect();
    let norm = AugmentConfig::identity();
    let batch = collate(&images, &members, |_, img| augment(&img.pixels, &norm, &mut RngState::new(0).stream_at(0))).unwrap();
    let mut model = FusionModel::<f32>::build(&FusionModelConfig::desk(RES), &mut RngState::new(2)).unwrap();
    let cfg = TrainingConfig { epochs: max_steps, base_lr: 1e-3, ..TrainingConfig::default() };
    let adam = cfg.adam();
    let mut state = OptimizerState::new(&model.store);
    for step in 0..max_steps {
        let (loss, grads, updates) = {
            let mut ctx = Ctx::new(&model.store, Mode::Train);
            let x = ctx.input(batch.images.clone());
            let logits = model.forward(&mut ctx, x).unwrap();
            let loss = model.loss(&mut ctx, logits, &batch.labels).unwrap();
            let value = f64::from(ctx.tape.value(loss).item().unwrap());
            ctx.tape.backward(loss).unwrap();
            (value, ctx.param_grads(), ctx.take_buffer_updates())
        };
        if loss < 0.01 {
            return Some(step);
        }
        adam.step(&mut model.store, &grads, &mut state, lr_at(step as f64, 1, &cfg)).unwrap();
        model.store.apply_buffer_updates(updates);
    }
    None
}

pub fn image_batch(seed: u64, batch: usize) -> Tensor<f64> {
    let mut rng = RngState::new(seed).stream_at(0);
    let n = batch * 3 * RES * RES;
    Tensor::new(&[batch, 3, RES, RES], (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}
