use fusionnet::data::synth_dataset;
use fusionnet::exec;
use fusionnet::nn::{Ctx, Mode};
use fusionnet::{FusionModel, FusionModelConfig, RngState, Tensor};

fn step(model: &FusionModel<f32>, x: &Tensor<f32>) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut ctx = Ctx::new(&model.store, Mode::Train);
    let xv = ctx.input(x.clone());
    let logits = model.forward(&mut ctx, xv).unwrap();
    let loss = model.loss(&mut ctx, logits, &[0, 1, 0, 1]).unwrap();
    ctx.tape.backward(loss).unwrap();
    let grads = ctx.param_grads().into_iter().map(|(_, g)| g).collect();
    (ctx.tape.value(logits).data().to_vec(), grads)
}

// The only test in this binary: it switches the global pool.
#[test]
fn thread_pool_matches_reference_bitwise() {
    let images = synth_dataset(2, 32, &RngState::new(3)).unwrap();
    let data: Vec<f32> = images.iter().flat_map(|i| i.pixels.data().to_vec()).collect();
    let x = Tensor::new(&[4, 3, 32, 32], data).unwrap();
    let model = FusionModel::<f32>::build(&FusionModelConfig::desk(32), &mut RngState::new(4)).unwrap();

    exec::set_threads(0);
    assert!(exec::is_reference());
    let (logits_ref, grads_ref) = step(&model, &x);
    for threads in [2, 3] {
        exec::set_threads(threads);
        assert_eq!(exec::threads(), threads);
        let (logits, grads) = step(&model, &x);
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&logits), bits(&logits_ref), "{threads} threads");
        assert_eq!(grads.len(), grads_ref.len());
        for (g, r) in grads.iter().zip(&grads_ref) {
            assert_eq!(bits(g), bits(r), "{threads} threads");
        }
    }
    exec::set_threads(0);
}
