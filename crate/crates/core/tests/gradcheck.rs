use fusionnet::gradcheck::{check_op, GradCheckOptions, OPS};

fn assert_op(op: &str) {
    let report = check_op(op, &GradCheckOptions::default()).unwrap();
    println!("{op}: {report:?}");
    assert!(report.instances >= 10);
    assert!(report.coords_checked > 0);
    assert!(report.passed, "{op} worst relative error {} at {}", report.worst_rel_err, report.worst_at);
}

macro_rules! op_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                assert_op(stringify!($name));
            }
        )*
    };
}

op_tests!(
    matmul,
    conv2d,
    depthwise_conv2d,
    dense,
    softmax,
    cross_entropy,
    batch_norm,
    layer_norm,
    activations,
    max_pool2d,
    global_avg_pool,
    reshape_concat_permute,
    residual_block,
    mbconv,
    block_attention,
    grid_attention,
    transformer_layer,
    fusion,
);

#[test]
fn every_op_is_covered() {
    assert_eq!(OPS.len(), 18);
}

#[test]
fn seed_changes_probes_not_verdicts() {
    let a = check_op("conv2d", &GradCheckOptions { seed: 1, ..Default::default() }).unwrap();
    let b = check_op("conv2d", &GradCheckOptions { seed: 2, ..Default::default() }).unwrap();
    assert!(a.passed && b.passed);
    assert_ne!(a.worst_rel_err, b.worst_rel_err);
}
