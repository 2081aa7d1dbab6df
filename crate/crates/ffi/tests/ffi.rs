use std::ffi::{CStr, CString};
use std::ptr;

use fusionnet_ffi::*;
use FusionnetMetric::*;
use FusionnetStatus::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fusionnet_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn metrics_round_trip_through_c_abi() {
    let mut cm = FusionnetConfusion::default();
    let status = unsafe { fusionnet_invert_metrics(1.0, 0.8632, 390, 234, &mut cm) };
    assert_eq!(status, FUSIONNET_OK);
    assert_eq!(cm, FusionnetConfusion { tp: 390, fp: 32, tn: 202, fn_: 0 });

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fusionnet_metrics_compute(cm, &mut m) }, FUSIONNET_OK);
    let get = |which| {
        let (mut v, mut defined) = (0.0, false);
        assert_eq!(unsafe { fusionnet_metrics_get(m, which, &mut v, &mut defined) }, FUSIONNET_OK);
        assert!(defined);
        v
    };
    assert!((get(FUSIONNET_ACCURACY) - 0.9487).abs() < 5e-5);
    assert!((get(FUSIONNET_KAPPA) - 0.8875).abs() < 5e-5);
    assert!((get(FUSIONNET_PPV) - 0.9242).abs() < 5e-5);
    assert_eq!(get(FUSIONNET_SENSITIVITY), 1.0);
    assert!(!unsafe { fusionnet_metrics_kappa_degenerate(m) });
    unsafe { fusionnet_metrics_free(m) };
}

#[test]
fn undefined_metric_reports_nan() {
    let mut m = ptr::null_mut();
    let cm = FusionnetConfusion { tp: 0, fp: 0, tn: 5, fn_: 0 };
    assert_eq!(unsafe { fusionnet_metrics_compute(cm, &mut m) }, FUSIONNET_OK);
    let (mut v, mut defined) = (0.0, true);
    assert_eq!(unsafe { fusionnet_metrics_get(m, FUSIONNET_SENSITIVITY, &mut v, &mut defined) }, FUSIONNET_OK);
    assert!(!defined && v.is_nan());
    assert!(unsafe { fusionnet_metrics_kappa_degenerate(m) });
    unsafe { fusionnet_metrics_free(m) };
}

#[test]
fn errors_set_status_and_message() {
    let mut cm = FusionnetConfusion::default();
    assert_eq!(unsafe { fusionnet_invert_metrics(1.5, 0.5, 10, 10, &mut cm) }, FUSIONNET_ERR_INVERSION);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { fusionnet_invert_metrics(1.0, 0.5, 10, 10, ptr::null_mut()) }, FUSIONNET_ERR_NULL);

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { fusionnet_model_load(missing.as_ptr(), &mut model) }, FUSIONNET_ERR_PATH);
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    assert!(model.is_null());

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fusionnet_metrics_compute(FusionnetConfusion::default(), &mut m) }, FUSIONNET_ERR_VALIDATION);
    assert!(m.is_null());
    let cm = FusionnetConfusion { tp: 1, fp: 0, tn: 1, fn_: 0 };
    assert_eq!(unsafe { fusionnet_metrics_compute(cm, &mut m) }, FUSIONNET_OK);
    assert_eq!(last_error(), "");
    unsafe { fusionnet_metrics_free(m) };
    unsafe { fusionnet_model_free(ptr::null_mut()) };
}

#[test]
fn model_predict_save_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { fusionnet_model_new(FusionnetModelKind::FUSIONNET_FUSION, 32, 5, &mut model) }, FUSIONNET_OK);
    let res = unsafe { fusionnet_model_resolution(model) };
    assert_eq!(res, 32);
    assert!(unsafe { fusionnet_model_num_values(model) } > 0);

    let batch = 2;
    let pixels: Vec<f32> = (0..batch * 3 * res * res).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
    let predict = |m| {
        let mut pred = ptr::null_mut();
        assert_eq!(unsafe { fusionnet_model_predict(m, pixels.as_ptr(), batch, &mut pred) }, FUSIONNET_OK);
        assert_eq!(unsafe { fusionnet_prediction_len(pred) }, batch);
        let mut out = Vec::new();
        for i in 0..batch {
            let (mut class, mut probs) = (9u32, [0f32; 2]);
            assert_eq!(unsafe { fusionnet_prediction_get(pred, i, &mut class, probs.as_mut_ptr()) }, FUSIONNET_OK);
            assert!(class < 2);
            assert!((probs[0] + probs[1] - 1.0).abs() < 1e-6);
            out.push((class, probs));
        }
        let mut class = 0;
        assert_eq!(unsafe { fusionnet_prediction_get(pred, batch, &mut class, ptr::null_mut()) }, FUSIONNET_ERR_INVALID_ARGUMENT);
        unsafe { fusionnet_prediction_free(pred) };
        out
    };
    let before = predict(model);
    assert_eq!(unsafe { fusionnet_model_save(model, path.as_ptr()) }, FUSIONNET_OK);
    let mut reloaded = ptr::null_mut();
    assert_eq!(unsafe { fusionnet_model_load(path.as_ptr(), &mut reloaded) }, FUSIONNET_OK);
    assert_eq!(predict(reloaded), before);
    unsafe {
        fusionnet_model_free(model);
        fusionnet_model_free(reloaded);
    }
}

#[test]
fn bad_resolution_is_config_error() {
    let mut model = ptr::null_mut();
    let status = unsafe { fusionnet_model_new(FusionnetModelKind::FUSIONNET_MAXVIT, 36, 0, &mut model) };
    assert_eq!(status, FUSIONNET_ERR_CONFIG);
    assert!(model.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/fusionnet.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["fusionnet_model_predict", "fusionnet_invert_metrics", "fusionnet_last_error", "FUSIONNET_ERR_PANIC"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    match std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).status() {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler; skipping syntax check"),
    }
}
