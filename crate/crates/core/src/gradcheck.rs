//! Central finite-difference verification of every differentiable op and
//! block, in `f64`.
//!
//! Each probe is a function from input tensors to a scalar loss. The
//! analytic gradient comes from one backward pass; the numeric one from
//! `(f(x+h) - f(x-h)) / 2h` per checked coordinate. A coordinate that misses
//! the tolerance at the nominal step is re-measured at `h/10` and `h/100`,
//! which steps off ReLU/max-pool kinks that happen to lie within `h` of the
//! probe point; a wrong gradient fails at every step.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbones::{MaxViTConfig, ResNetConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionModelConfig};
use crate::nn::{
    dense, Attention, Builder, Ctx, MBConv, MBConvParams, Mode, ParamKind, ParamStore, Partition,
    ResidualBlock, ResidualBlockParams, TransformerLayer,
};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub instances: usize,
    /// Coordinates sampled per input tensor (all of them when smaller).
    pub max_coords: usize,
    /// Input tensors sampled per instance (all of them when smaller).
    pub max_tensors: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            instances: 10,
            max_coords: 16,
            max_tensors: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub coords_checked: usize,
    /// Coordinates that needed a smaller step to agree.
    pub refined: usize,
    pub worst_rel_err: f64,
    pub worst_at: String,
    pub passed: bool,
}

/// Every probe name, in run order.
pub const OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "softmax",
    "cross_entropy",
    "batch_norm",
    "layer_norm",
    "activations",
    "max_pool2d",
    "global_avg_pool",
    "reshape_concat_permute",
    "residual_block",
    "mbconv",
    "block_attention",
    "grid_attention",
    "transformer_layer",
    "fusion",
];

/// Loss and (optionally) per-input analytic gradients.
type EvalFn = Box<dyn Fn(&[Tensor<f64>], bool) -> Result<(f64, Vec<Option<Vec<f64>>>)>>;

struct Probe {
    inputs: Vec<Tensor<f64>>,
    names: Vec<String>,
    eval: EvalFn,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_f64(shape, &data).expect("shape and data agree")
}

/// Probe over plain tensor inputs: `loss = sum(op(inputs) ⊙ R)` with a fixed
/// random `R`.
fn tensor_probe<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, op: F) -> Result<Probe>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let weights = randn(rng, &out_shape, 1.0);
    let names = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let eval: EvalFn = Box::new(move |xs: &[Tensor<f64>], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(grads))).collect();
        let out = op(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()))
    });
    Ok(Probe { inputs, names, eval })
}

/// Probe over a layer's input and all of its trainable parameters, run in
/// training mode.
fn layer_probe<L, F>(rng: &mut ChaCha8Rng, x: Tensor<f64>, build: L, forward: F) -> Result<Probe>
where
    L: FnOnce(&mut Builder<'_, f64>) -> Result<Box<dyn std::any::Any>>,
    F: Fn(&dyn std::any::Any, &mut Ctx<'_, f64>, Var) -> Result<Var> + 'static,
{
    let mut store = ParamStore::<f64>::new();
    let layer = {
        let mut b = Builder::new(&mut store, rng);
        build(&mut b)?
    };
    let trainable: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(id, _)| id).collect();
    // Move every parameter away from its structured initial value.
    for &id in &trainable {
        let t = store.tensor_mut(id);
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut inputs = vec![x];
    let mut names = vec!["x".to_string()];
    for &id in &trainable {
        inputs.push(store.tensor(id).clone());
        names.push(store.get(id).name.clone());
    }
    let out_shape = {
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.input(inputs[0].clone());
        let y = forward(layer.as_ref(), &mut ctx, xv)?;
        ctx.tape.shape(y).to_vec()
    };
    let weights = randn(rng, &out_shape, 1.0);
    let eval: EvalFn = Box::new(move |xs: &[Tensor<f64>], grads: bool| {
        let mut local = store.clone();
        for (&id, t) in trainable.iter().zip(&xs[1..]) {
            local.tensor_mut(id).data_mut().copy_from_slice(t.data());
        }
        let mut ctx = Ctx::new(&local, Mode::Train);
        let xv = ctx.tape.leaf(xs[0].clone().with_requires_grad(grads));
        let y = forward(layer.as_ref(), &mut ctx, xv)?;
        let w = ctx.tape.constant(weights.clone());
        let prod = ctx.tape.mul(y, w)?;
        let loss = ctx.tape.sum(prod);
        let value = ctx.tape.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        ctx.tape.backward(loss)?;
        let mut out = vec![ctx.tape.grad(xv).map(<[f64]>::to_vec)];
        let bound: std::collections::HashMap<_, _> = ctx.bound_params().collect();
        for id in &trainable {
            out.push(bound.get(id).and_then(|&v| ctx.tape.grad(v)).map(<[f64]>::to_vec));
        }
        Ok((value, out))
    });
    Ok(Probe { inputs, names, eval })
}

fn tiny_fusion_config() -> FusionModelConfig {
    FusionModelConfig {
        resnet: Some(ResNetConfig {
            stem_channels: 4,
            depths: vec![1, 1, 1, 1],
            widths: vec![4, 4, 6, 6],
            width_scale: 1.0,
            depth_scale: 1.0,
            resolution: 16,
        }),
        maxvit: Some(MaxViTConfig {
            stem_channels: 4,
            depths: vec![1],
            channels: vec![8],
            heads: vec![2],
            window: 2,
            grid: 2,
            expansion: 2,
            mlp_ratio: 2,
            se_ratio: Some(0.25),
            rel_pos_bias: false,
            resolution: 16,
        }),
        num_classes: 2,
    }
}

fn fusion_probe(rng: &mut ChaCha8Rng, seed: u64) -> Result<Probe> {
    let cfg = tiny_fusion_config();
    let mut state = RngState::new(seed);
    let mut model = FusionModel::<f64>::build(&cfg, &mut state)?;
    let trainable: Vec<_> =
        model.store.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(id, _)| id).collect();
    for &id in &trainable {
        for v in model.store.tensor_mut(id).data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let batch = 2;
    let x = randn(rng, &[batch, 3, 16, 16], 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..2)).collect();
    let mut inputs = vec![x];
    let mut names = vec!["x".to_string()];
    for &id in &trainable {
        inputs.push(model.store.tensor(id).clone());
        names.push(model.store.get(id).name.clone());
    }
    let eval: EvalFn = Box::new(move |xs: &[Tensor<f64>], grads: bool| {
        let mut local = model.store.clone();
        for (&id, t) in trainable.iter().zip(&xs[1..]) {
            local.tensor_mut(id).data_mut().copy_from_slice(t.data());
        }
        let mut ctx = Ctx::new(&local, Mode::Train);
        let xv = ctx.tape.leaf(xs[0].clone().with_requires_grad(grads));
        let logits = model.forward(&mut ctx, xv)?;
        let loss = model.loss(&mut ctx, logits, &labels)?;
        let value = ctx.tape.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        ctx.tape.backward(loss)?;
        let bound: std::collections::HashMap<_, _> = ctx.bound_params().collect();
        let mut out = vec![ctx.tape.grad(xv).map(<[f64]>::to_vec)];
        for id in &trainable {
            out.push(bound.get(id).and_then(|&v| ctx.tape.grad(v)).map(<[f64]>::to_vec));
        }
        Ok((value, out))
    });
    Ok(Probe { inputs, names, eval })
}

fn build_probe(op: &str, rng: &mut ChaCha8Rng, seed: u64) -> Result<Probe> {
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            if rng.gen_bool(0.5) {
                let inputs = vec![randn(rng, &[m, k], 1.0), randn(rng, &[k, n], 1.0)];
                tensor_probe(rng, inputs, |t, v| t.matmul(v[0], v[1]))
            } else {
                let b = dim(rng, 1, 3);
                let inputs = vec![randn(rng, &[b, m, k], 1.0), randn(rng, &[b, k, n], 1.0)];
                tensor_probe(rng, inputs, |t, v| t.matmul(v[0], v[1]))
            }
        }
        "conv2d" => {
            let (b, c, f) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = *[1usize, 2, 3].get(rng.gen_range(0..3)).unwrap_or(&3);
            let (h, w) = (dim(rng, k.max(3), 6), dim(rng, k.max(3), 6));
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let inputs = vec![randn(rng, &[b, c, h, w], 1.0), randn(rng, &[f, c, k, k], 0.5)];
            tensor_probe(rng, inputs, move |t, v| t.conv2d(v[0], v[1], stride, pad, 1))
        }
        "depthwise_conv2d" => {
            let (b, c) = (dim(rng, 1, 2), dim(rng, 1, 4));
            let (h, w, stride) = (dim(rng, 3, 6), dim(rng, 3, 6), dim(rng, 1, 2));
            let inputs = vec![randn(rng, &[b, c, h, w], 1.0), randn(rng, &[c, 1, 3, 3], 0.5)];
            tensor_probe(rng, inputs, move |t, v| t.conv2d(v[0], v[1], stride, 1, c))
        }
        "dense" => {
            let (b, d, o) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 4));
            let inputs = vec![randn(rng, &[b, d], 1.0), randn(rng, &[d, o], 1.0), randn(rng, &[o], 1.0)];
            tensor_probe(rng, inputs, |t, v| dense(t, v[0], v[1], v[2]))
        }
        "softmax" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3)];
            let axis = rng.gen_range(0..3);
            let inputs = vec![randn(rng, &shape, 2.0)];
            tensor_probe(rng, inputs, move |t, v| t.softmax(v[0], axis))
        }
        "cross_entropy" => {
            let (b, k) = (dim(rng, 1, 5), dim(rng, 2, 4));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            let inputs = vec![randn(rng, &[b, k], 2.0)];
            tensor_probe(rng, inputs, move |t, v| t.cross_entropy(v[0], &labels))
        }
        "batch_norm" => {
            let (b, c, h) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let inputs = vec![randn(rng, &[b, c, h, h], 1.0), randn(rng, &[c], 1.0), randn(rng, &[c], 1.0)];
            if rng.gen_bool(0.5) {
                tensor_probe(rng, inputs, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], None)?.0))
            } else {
                let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
                tensor_probe(rng, inputs, move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)))?.0))
            }
        }
        "layer_norm" => {
            let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let inputs = vec![randn(rng, &[r, d], 1.0), randn(rng, &[d], 1.0), randn(rng, &[d], 1.0)];
            tensor_probe(rng, inputs, |t, v| t.layer_norm(v[0], v[1], v[2]))
        }
        "activations" => {
            let n = dim(rng, 2, 12);
            let inputs = vec![randn(rng, &[n], 2.0)];
            tensor_probe(rng, inputs, |t, v| {
                let a = t.relu(v[0]);
                let g = t.gelu(v[0]);
                let s = t.sigmoid(v[0]);
                let ag = t.add(a, g)?;
                let y = t.mul(ag, s)?;
                Ok(t.scale(y, 1.5))
            })
        }
        "max_pool2d" => {
            let (b, c, h) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 3, 6));
            let inputs = vec![randn(rng, &[b, c, h, h], 1.0)];
            tensor_probe(rng, inputs, |t, v| t.max_pool2d(v[0], 3, 2, 1))
        }
        "global_avg_pool" => {
            let (b, c, h) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4));
            let inputs = vec![randn(rng, &[b, c, h, h], 1.0)];
            tensor_probe(rng, inputs, |t, v| t.global_avg_pool(v[0]))
        }
        "reshape_concat_permute" => {
            let (b, d1, d2) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let inputs = vec![randn(rng, &[b, d1, 1, 1], 1.0), randn(rng, &[b, d2], 1.0)];
            tensor_probe(rng, inputs, move |t, v| {
                let f = t.flatten(v[0], 1)?;
                let c = t.concat(&[f, v[1]], 1)?;
                let p = t.permute(c, &[1, 0])?;
                let m = t.mean(p);
                let s = t.sub(p, m)?;
                t.mul(s, s)
            })
        }
        "residual_block" => {
            let in_ch = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let out_ch = if stride == 1 && rng.gen_bool(0.5) { in_ch } else { dim(rng, 1, 4) };
            let x = randn(rng, &[2, in_ch, 4, 4], 1.0);
            let p = ResidualBlockParams { in_ch, out_ch, stride, zero_init_last_bn: false };
            layer_probe(
                rng,
                x,
                move |b| Ok(Box::new(ResidualBlock::build(b, p)?)),
                |l, ctx, x| l.downcast_ref::<ResidualBlock>().expect("residual block").forward(ctx, x),
            )
        }
        "mbconv" => {
            let in_ch = dim(rng, 2, 4);
            let stride = dim(rng, 1, 2);
            let out_ch = if stride == 1 && rng.gen_bool(0.5) { in_ch } else { dim(rng, 2, 4) };
            let mut p = MBConvParams::new(in_ch, out_ch, stride);
            p.expansion = 2;
            if rng.gen_bool(0.3) {
                p.se_ratio = None;
            }
            let x = randn(rng, &[2, in_ch, 4, 4], 1.0);
            layer_probe(
                rng,
                x,
                move |b| Ok(Box::new(MBConv::build(b, p)?)),
                |l, ctx, x| l.downcast_ref::<MBConv>().expect("mbconv").forward(ctx, x),
            )
        }
        "block_attention" | "grid_attention" => {
            let heads = dim(rng, 1, 2);
            let c = heads * dim(rng, 1, 3);
            let part = if op == "block_attention" { Partition::Block(2) } else { Partition::Grid(2) };
            let rel = rng.gen_bool(0.3);
            let batch = dim(rng, 1, 2);
            let x = randn(rng, &[batch, c, 4, 4], 1.0);
            layer_probe(
                rng,
                x,
                move |b| Ok(Box::new(Attention::build(b, c, heads, rel.then_some(2))?)),
                move |l, ctx, x| l.downcast_ref::<Attention>().expect("attention").forward_spatial(ctx, x, part),
            )
        }
        "transformer_layer" => {
            let heads = dim(rng, 1, 2);
            let c = heads * 2;
            let part = if rng.gen_bool(0.5) { Partition::Block(2) } else { Partition::Grid(2) };
            let x = randn(rng, &[1, c, 4, 4], 1.0);
            layer_probe(
                rng,
                x,
                move |b| Ok(Box::new(TransformerLayer::build(b, c, heads, part, 2, false)?)),
                |l, ctx, x| l.downcast_ref::<TransformerLayer>().expect("transformer layer").forward(ctx, x),
            )
        }
        "fusion" => fusion_probe(rng, seed),
        other => Err(Error::Usage(format!("unknown gradcheck op {other:?}; known: {}", OPS.join(", ")))),
    }
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks one probe; returns `(coords, refined, worst error, location)`.
fn check_probe(probe: &Probe, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<(usize, usize, f64, String)> {
    let (_, grads) = (probe.eval)(&probe.inputs, true)?;
    let mut inputs = probe.inputs.clone();
    let (mut coords, mut refined, mut worst, mut worst_at) = (0, 0, 0.0f64, String::new());
    let tensor_ids: Vec<usize> = if inputs.len() > opts.max_tensors {
        let mut ids = sample(rng, inputs.len(), opts.max_tensors).into_vec();
        ids.sort_unstable();
        ids
    } else {
        (0..inputs.len()).collect()
    };
    for ti in tensor_ids {
        let n = inputs[ti].numel();
        let picks: Vec<usize> = if n > opts.max_coords {
            let mut p = sample(rng, n, opts.max_coords).into_vec();
            p.sort_unstable();
            p
        } else {
            (0..n).collect()
        };
        for j in picks {
            let analytic = grads[ti].as_ref().map_or(0.0, |g| g[j]);
            let orig = inputs[ti].data()[j];
            let mut best = f64::INFINITY;
            for (attempt, h) in [opts.step, opts.step / 10.0, opts.step / 100.0].into_iter().enumerate() {
                inputs[ti].data_mut()[j] = orig + h;
                let (fp, _) = (probe.eval)(&inputs, false)?;
                inputs[ti].data_mut()[j] = orig - h;
                let (fm, _) = (probe.eval)(&inputs, false)?;
                inputs[ti].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let err = rel_err(analytic, numeric, opts.floor);
                best = best.min(err);
                if err < opts.tolerance {
                    if attempt > 0 {
                        refined += 1;
                    }
                    break;
                }
            }
            coords += 1;
            if best > worst || worst_at.is_empty() {
                worst = worst.max(best);
                worst_at = format!("{}[{j}]", probe.names[ti]);
            }
        }
    }
    Ok((coords, refined, worst, worst_at))
}

/// Runs one named probe over `opts.instances` random instances.
pub fn check_op(op: &str, opts: &GradCheckOptions) -> Result<OpReport> {
    let op_index = OPS
        .iter()
        .position(|o| *o == op)
        .ok_or_else(|| Error::Usage(format!("unknown gradcheck op {op:?}; known: {}", OPS.join(", "))))?;
    let state = RngState::new(opts.seed).derive(op_index as u64);
    let mut report = OpReport {
        op: op.to_string(),
        instances: 0,
        coords_checked: 0,
        refined: 0,
        worst_rel_err: 0.0,
        worst_at: String::new(),
        passed: true,
    };
    for inst in 0..opts.instances {
        let mut rng = state.stream_at(inst as u64);
        let probe = build_probe(op, &mut rng, state.seed.wrapping_add(inst as u64))?;
        let (coords, refined, worst, at) = check_probe(&probe, opts, &mut rng)?;
        report.instances += 1;
        report.coords_checked += coords;
        report.refined += refined;
        if worst >= report.worst_rel_err {
            report.worst_rel_err = worst;
            report.worst_at = format!("instance {inst}: {at}");
        }
    }
    report.passed = report.worst_rel_err < opts.tolerance;
    Ok(report)
}

/// Runs the named probes (all of [`OPS`] when `ops` is empty).
pub fn run(ops: &[String], opts: &GradCheckOptions) -> Result<Vec<OpReport>> {
    let selected: Vec<&str> = if ops.is_empty() {
        OPS.to_vec()
    } else {
        ops.iter().map(String::as_str).collect()
    };
    selected.into_iter().map(|op| check_op(op, opts)).collect()
}
