use fusionnet::metrics::{
    compute_metrics, confusion_matrix, invert_metrics, render_report, reproduce_table, ConfusionMatrix, Format,
    ReportEntry, PUBLISHED, TEST_NEGATIVES, TEST_POSITIVES,
};
use proptest::prelude::*;

/// Metrics straight from the prediction lists, without a confusion matrix.
fn brute_force(preds: &[usize], labels: &[usize]) -> [Option<f64>; 5] {
    let n = preds.len() as f64;
    let count = |f: &dyn Fn(usize, usize) -> bool| preds.iter().zip(labels).filter(|(&p, &l)| f(p, l)).count() as f64;
    let frac = |num: f64, den: f64| (den > 0.0).then(|| num / den);
    let agree = count(&|p, l| p == l);
    let (pred_pos, lab_pos) = (count(&|p, _| p == 1), count(&|_, l| l == 1));
    let chance = (pred_pos * lab_pos + (n - pred_pos) * (n - lab_pos)) / (n * n);
    let acc = agree / n;
    let kappa = if chance == 1.0 { if acc == 1.0 { 1.0 } else { 0.0 } } else { (acc - chance) / (1.0 - chance) };
    [
        Some(acc),
        Some(kappa),
        frac(count(&|p, l| p == 1 && l == 1), lab_pos),
        frac(count(&|p, l| p == 0 && l == 0), n - lab_pos),
        frac(count(&|p, l| p == 1 && l == 1), pred_pos),
    ]
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn metrics_match_brute_force(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..500)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let report = compute_metrics(&confusion_matrix(&preds, &labels).unwrap()).unwrap();
        let want = brute_force(&preds, &labels);
        for (i, (got, want)) in report.values().into_iter().zip(want).enumerate() {
            prop_assert!(close(got, want), "metric {}: {:?} vs {:?}", i, got, want);
        }
    }

    #[test]
    fn skewed_predictions_match_brute_force(
        n in 1usize..500,
        pos_rate in 0.0f64..1.0,
        flip in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(pos_rate))).collect();
        let preds: Vec<usize> = labels.iter().map(|&l| if rng.gen_bool(flip) { 1 - l } else { l }).collect();
        let report = compute_metrics(&confusion_matrix(&preds, &labels).unwrap()).unwrap();
        for (got, want) in report.values().into_iter().zip(brute_force(&preds, &labels)) {
            prop_assert!(close(got, want));
        }
    }
}

fn round_trips(cm: ConfusionMatrix) -> bool {
    let r = compute_metrics(&cm).unwrap();
    let back = invert_metrics(r.sensitivity.unwrap(), r.specificity.unwrap(), cm.positives(), cm.negatives()).unwrap();
    back == cm
}

#[test]
fn round_trip_exhaustive_on_small_matrices() {
    // every cm with both classes present and n ≤ 48
    let mut checked = 0u64;
    for p in 1..48u64 {
        for n in 1..=(48 - p) {
            for tp in 0..=p {
                for tn in 0..=n {
                    assert!(round_trips(ConfusionMatrix::new(tp, n - tn, tn, p - tp)));
                    checked += 1;
                }
            }
        }
    }
    // C(52,4) four-part compositions of n ≤ 48, minus those missing a class
    assert_eq!(checked, 270_725 - 2 * 1_225 + 1);
}

#[test]
fn round_trip_exhaustive_per_class_up_to_500() {
    // TP depends only on (sensitivity, P) and TN only on (specificity, N), so
    // checking every (count, class size) pair on each side with the other
    // side held fixed covers every cm with n ≤ 500.
    for size in 1..500u64 {
        for k in 0..=size {
            assert!(round_trips(ConfusionMatrix::new(k, 1, 0, size - k)), "TP={k} P={size}");
            assert!(round_trips(ConfusionMatrix::new(1, size - k, k, 0)), "TN={k} N={size}");
        }
    }
    for (sens_side, spec_side) in [(1u64, 499u64), (250, 250), (499, 1)] {
        for k in 0..=sens_side {
            for j in [0, spec_side / 3, spec_side] {
                assert!(round_trips(ConfusionMatrix::new(k, spec_side - j, j, sens_side - k)));
            }
        }
    }
}

#[test]
fn inversion_is_independent_per_class() {
    for (sens, spec) in [(0.0, 1.0), (0.37, 0.81), (1.0, 0.0)] {
        let a = invert_metrics(sens, spec, 300, 100).unwrap();
        let b = invert_metrics(sens, 0.5, 300, 7).unwrap();
        let c = invert_metrics(0.5, spec, 9, 100).unwrap();
        assert_eq!((a.tp, a.fn_), (b.tp, b.fn_));
        assert_eq!((a.tn, a.fp), (c.tn, c.fp));
    }
}

#[test]
fn published_rows_reconstruct() {
    let expected = [(389, 36, 198, 1), (388, 35, 199, 2), (389, 33, 201, 1), (390, 32, 202, 0)];
    for (row, (tp, fp, tn, fn_)) in PUBLISHED.iter().zip(expected) {
        let cm = invert_metrics(row.sensitivity, row.specificity, TEST_POSITIVES, TEST_NEGATIVES).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(tp, fp, tn, fn_), "{}", row.model);
    }
    let check = reproduce_table(5e-4).unwrap();
    assert!(check.pass);
    assert!(!reproduce_table(0.0).unwrap().pass);
    let fusion = compute_metrics(&ConfusionMatrix::new(390, 32, 202, 0)).unwrap();
    assert_eq!(format!("{:.4}", fusion.accuracy), "0.9487");
    assert_eq!(format!("{:.4}", fusion.kappa), "0.8875");
    assert_eq!(format!("{:.4}", fusion.ppv.unwrap()), "0.9242");
}

#[test]
fn reports_in_every_format() {
    let entries = [ReportEntry::new("fusion", ConfusionMatrix::new(390, 32, 202, 0)).unwrap()];
    let csv = render_report(&entries, Format::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("Model,Accuracy,Kappa,Sensitivity,Specificity,PPV,TP,FP,TN,FN"));
    assert!(lines.next().unwrap().starts_with("fusion,0.9487,0.8875,1.0000,0.8632,0.9242,390,32,202,0"));
    let json: serde_json::Value = serde_json::from_str(&render_report(&entries, Format::Json).unwrap()).unwrap();
    let e = &json.as_array().unwrap()[0];
    assert_eq!(e["model"], "fusion");
    assert_eq!(e["accuracy"], 0.9487);
    assert_eq!(e["cm"]["tp"], 390);
    assert_eq!(e["cm"]["fn"], 0);
    let text = render_report(&entries, Format::Text).unwrap();
    assert!(text.contains("0.9487") && text.contains("PNEUMONIA"));
}
