mod common;

use common::{attention, changed_positions, dense_oracle, perturb, randn, run_attention, scramble};
use fusionnet::nn::{Builder, Ctx, Mode, ParamStore, Partition, TransformerLayer};
use fusionnet::{FusionModel, FusionModelConfig, RngState, Tensor};

#[test]
fn block_attention_is_local() {
    let (h, w, win) = (8, 12, 4);
    let (store, attn) = attention(8, 2, None, 1);
    let mut rng = RngState::new(2).stream_at(0);
    let x = randn(&mut rng, &[1, 8, h, w], 1.0);
    let base = run_attention(&store, &attn, &x, Partition::Block(win));
    for (py, px) in [(0, 0), (1, 6), (5, 11), (7, 3)] {
        let y = run_attention(&store, &attn, &perturb(&x, py, px), Partition::Block(win));
        let changed = changed_positions(&base, &y);
        assert!(changed.contains(&(py, px)));
        for &(cy, cx) in &changed {
            assert_eq!((cy / win, cx / win), (py / win, px / win), "({cy},{cx}) changed by pixel ({py},{px})");
        }
        // every position of the perturbed window sees the change
        assert_eq!(changed.len(), win * win);
    }
}

#[test]
fn grid_attention_touches_only_its_dilated_group() {
    let (h, w, g) = (8, 8, 4);
    let stride = h / g;
    let (store, attn) = attention(8, 2, None, 3);
    let x = randn(&mut RngState::new(4).stream_at(0), &[1, 8, h, w], 1.0);
    let base = run_attention(&store, &attn, &x, Partition::Grid(g));
    for (py, px) in [(0, 0), (3, 6), (7, 7)] {
        let y = run_attention(&store, &attn, &perturb(&x, py, px), Partition::Grid(g));
        let changed = changed_positions(&base, &y);
        assert_eq!(changed.len(), g * g);
        for &(cy, cx) in &changed {
            assert_eq!((cy % stride, cx % stride), (py % stride, px % stride));
        }
    }
}

#[test]
fn transformer_layer_is_local() {
    let (h, w, win) = (8, 8, 4);
    let mut store = ParamStore::new();
    let mut rng = RngState::new(5).stream_at(0);
    let layer =
        TransformerLayer::build(&mut Builder::new(&mut store, &mut rng), 8, 2, Partition::Block(win), 2, true).unwrap();
    scramble(&mut store, &mut RngState::new(5).stream_at(1), 0.5);
    let x = randn(&mut RngState::new(6).stream_at(0), &[2, 8, h, w], 1.0);
    let run = |x: &Tensor<f64>| {
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.input(x.clone());
        let y = layer.forward(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    };
    let base = run(&x);
    let changed = changed_positions(&base, &run(&perturb(&x, 6, 1)));
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&(y, x)| (y / win, x / win) == (1, 0)));
}

#[test]
fn full_grid_equals_global_attention() {
    for (seed, side, dim, heads) in [(7, 4, 8, 2), (8, 6, 6, 3), (9, 8, 4, 1)] {
        let (store, attn) = attention(dim, heads, None, seed);
        let x = randn(&mut RngState::new(seed + 100).stream_at(0), &[2, dim, side, side], 1.0);
        let got = run_attention(&store, &attn, &x, Partition::Grid(side));
        let want = dense_oracle(&store, &attn, &x);
        let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "side {side}: max abs diff {err:e}");
    }
}

fn assert_rows_stochastic(weights: &Tensor<f64>, tol: f64) {
    let n = *weights.shape().last().unwrap();
    for row in weights.data().chunks(n) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= tol, "row sums to {s}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for (part, rel) in [(Partition::Block(4), None), (Partition::Grid(2), None), (Partition::Block(2), Some(2))] {
        let (store, attn) = attention(8, 4, rel, 11);
        let x = randn(&mut RngState::new(12).stream_at(0), &[2, 8, 8, 8], 3.0);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        ctx.capture_attention(true);
        let xv = ctx.input(x);
        attn.forward_spatial(&mut ctx, xv, part).unwrap();
        let captured = ctx.attention_weights().to_vec();
        assert_eq!(captured.len(), 1);
        assert_rows_stochastic(ctx.tape.value(captured[0]), 1e-6);
    }
}

#[test]
fn model_attention_rows_sum_to_one() {
    let cfg = FusionModelConfig::desk(32);
    let model = FusionModel::<f64>::build(&cfg, &mut RngState::new(13)).unwrap();
    let x = randn(&mut RngState::new(14).stream_at(0), &[2, 3, 32, 32], 1.0);
    let mut ctx = Ctx::new(&model.store, Mode::Eval);
    ctx.capture_attention(true);
    let xv = ctx.input(x);
    model.forward(&mut ctx, xv).unwrap();
    let captured = ctx.attention_weights().to_vec();
    // one block and one grid layer per MaxViT block
    assert_eq!(captured.len(), 2 * cfg.maxvit.as_ref().unwrap().depths.iter().sum::<usize>());
    for w in captured {
        assert_rows_stochastic(ctx.tape.value(w), 1e-6);
    }
}

#[test]
fn single_precision_rows_sum_to_one() {
    let model = FusionModel::<f32>::build(&FusionModelConfig::desk(32), &mut RngState::new(15)).unwrap();
    let x = randn(&mut RngState::new(16).stream_at(0), &[2, 3, 32, 32], 1.0);
    let x = Tensor::new(x.shape(), x.data().iter().map(|&v| v as f32).collect()).unwrap();
    let mut ctx = Ctx::new(&model.store, Mode::Eval);
    ctx.capture_attention(true);
    let xv = ctx.input(x);
    model.forward(&mut ctx, xv).unwrap();
    for &w in ctx.attention_weights() {
        let t = ctx.tape.value(w);
        let n = *t.shape().last().unwrap();
        for row in t.data().chunks(n) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        }
    }
}
