mod common;

use common::{fused_model, image_batch as input, oracle};
use fusionnet::nn::{Ctx, Mode, ParamKind};

#[test]
fn fused_forward_matches_separate_backbones() {
    for (seed, mode) in [(1, Mode::Eval), (2, Mode::Train), (3, Mode::Eval)] {
        let model = fused_model(seed);
        let x = input(seed + 10, 3);
        let mut ctx = Ctx::new(&model.store, mode);
        let xv = ctx.input(x.clone());
        let y = model.forward(&mut ctx, xv).unwrap();
        let got = ctx.tape.value(y);
        assert_eq!(got.shape(), [3, 2]);
        let want = oracle(&model, &x, mode);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{mode:?}: max abs diff {err:e}");
    }
}

#[test]
fn feature_spans_cover_the_head_input() {
    let model = fused_model(4);
    let spans = model.feature_spans();
    assert_eq!(spans.iter().map(|(name, _)| *name).collect::<Vec<_>>(), ["resnet", "maxvit"]);
    assert_eq!(spans[0].1.start, 0);
    assert_eq!(spans[0].1.end, spans[1].1.start);
    assert_eq!(spans[1].1.end, model.head.in_dim);
}

#[test]
fn gradients_reach_both_backbones() {
    let model = fused_model(5);
    let mut ctx = Ctx::new(&model.store, Mode::Train);
    let xv = ctx.input(input(15, 4));
    let logits = model.forward(&mut ctx, xv).unwrap();
    let loss = model.loss(&mut ctx, logits, &[0, 1, 1, 0]).unwrap();
    ctx.tape.backward(loss).unwrap();
    let grads = ctx.param_grads();
    let norm = |prefix: &str| -> (usize, f64) {
        let mut count = 0;
        let mut sq = 0.0;
        for (id, g) in &grads {
            if model.store.get(*id).name.starts_with(prefix) {
                count += 1;
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        (count, sq.sqrt())
    };
    for prefix in ["resnet.", "maxvit.", "head."] {
        let (count, n) = norm(prefix);
        assert!(count > 0, "no gradients for {prefix}");
        assert!(n > 0.0 && n.is_finite(), "{prefix} gradient norm {n}");
    }
    // the stems are the farthest from the loss
    for stem in ["resnet.stem", "maxvit.stem"] {
        let (count, n) = norm(stem);
        assert!(count > 0 && n > 0.0, "{stem} gradient norm {n}");
    }
    let trainable = model.store.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).count();
    assert_eq!(grads.len(), trainable);
}
