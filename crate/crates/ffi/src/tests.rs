use std::ffi::CString;

use super::*;

fn last_error() -> String {
    let n = unsafe { tb_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n];
    unsafe { tb_last_error(buf.as_mut_ptr(), n) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

fn loss(kind: TbLoss, beta: f64, k: usize, policy: &[f64], reference: &[f64]) -> (TbStatus, f64) {
    let mut out = f64::NAN;
    let n = policy.len() / k;
    let s = unsafe { tb_preference_loss(kind, beta, k, n, policy.as_ptr(), reference.as_ptr(), &mut out) };
    (s, out)
}

#[test]
fn zero_ratio_losses_have_closed_forms() {
    let p = [-1.0, -2.0, -3.0, -4.0];
    let (s, v) = loss(TbLoss::PlDpo, 0.5, 4, &p, &p);
    assert_eq!(s, TbStatus::Ok);
    assert!((v - 4f64.ln()).abs() < 1e-12);
    let (s, v) = loss(TbLoss::Dpo, 0.5, 2, &p, &p);
    assert_eq!(s, TbStatus::Ok);
    assert!((v - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn pl_dpo_with_two_responses_matches_dpo() {
    let p = [-1.5, -2.5, -0.5, -3.0];
    let r = [-1.0, -2.0, -1.0, -2.0];
    let (_, a) = loss(TbLoss::Dpo, 0.3, 2, &p, &r);
    let (_, b) = loss(TbLoss::PlDpo, 0.3, 2, &p, &r);
    let (_, c) = loss(TbLoss::AddDpoKMinus1, 0.3, 2, &p, &r);
    assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
}

#[test]
fn bad_arguments_set_status_and_message() {
    let (s, _) = loss(TbLoss::Dpo, 0.5, 3, &[-1.0, -1.0, -1.0], &[-1.0, -1.0, -1.0]);
    assert_eq!(s, TbStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let (s, _) = loss(TbLoss::Dpo, 0.5, 1, &[-1.0], &[-1.0]);
    assert_eq!(s, TbStatus::InvalidArgument);
    let s = unsafe { tb_preference_loss(TbLoss::Dpo, 0.5, 2, 1, ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(s, TbStatus::NullPointer);
    assert_eq!(last_error(), "out_loss is null");
    let mut out = 0.0;
    assert_eq!(
        unsafe { tb_balanced_score(7.0, 0.5, &mut out) },
        TbStatus::InvalidArgument
    );
    let bad = [0xffu8, 0];
    let ok = CString::new("a").unwrap();
    let s = unsafe { tb_rouge_f1(bad.as_ptr().cast(), ok.as_ptr(), 1, &mut out) };
    assert_eq!(s, TbStatus::InvalidUtf8);
}

#[test]
fn metrics_match_reference_values() {
    assert!((tb_f1(0.31, 0.75) - 0.44).abs() < 0.005);
    let mut b = 0.0;
    assert_eq!(unsafe { tb_balanced_score(3.52, 0.93, &mut b) }, TbStatus::Ok);
    assert!((b - 0.817).abs() < 1e-12);
    let r = CString::new("a b c d").unwrap();
    let c = CString::new("a c d").unwrap();
    let mut f = 0.0;
    assert_eq!(unsafe { tb_rouge_f1(r.as_ptr(), c.as_ptr(), 0, &mut f) }, TbStatus::Ok);
    assert!((f - 6.0 / 7.0).abs() < 1e-12);
    let src = CString::new("Ann visited Paris in May.").unwrap();
    assert_eq!(
        unsafe { tb_faithfulness_proxy(src.as_ptr(), src.as_ptr(), &mut f) },
        TbStatus::Ok
    );
    assert_eq!(f, 1.0);
}

#[test]
fn model_handles_round_trip_through_a_checkpoint() {
    let mut m: *mut TbModel = ptr::null_mut();
    assert_eq!(unsafe { tb_model_new(1, 2, 16, 64, 3, &mut m) }, TbStatus::Ok);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.tblm").display().to_string()).unwrap();
    assert_eq!(unsafe { tb_model_save(m, path.as_ptr()) }, TbStatus::Ok);
    let mut loaded: *mut TbModel = ptr::null_mut();
    assert_eq!(unsafe { tb_model_load(path.as_ptr(), &mut loaded) }, TbStatus::Ok);

    let prompt = CString::new("Hello").unwrap();
    let mut a: *mut c_char = ptr::null_mut();
    let mut b: *mut c_char = ptr::null_mut();
    assert_eq!(
        unsafe { tb_model_generate(m, prompt.as_ptr(), 5, &mut a) },
        TbStatus::Ok
    );
    assert_eq!(
        unsafe { tb_model_generate(loaded, prompt.as_ptr(), 5, &mut b) },
        TbStatus::Ok
    );
    assert_eq!(unsafe { CStr::from_ptr(a) }, unsafe { CStr::from_ptr(b) });
    let resp = CString::new("x").unwrap();
    let mut lp = 0.0;
    assert_eq!(
        unsafe { tb_model_sequence_logprob(m, prompt.as_ptr(), resp.as_ptr(), &mut lp) },
        TbStatus::Ok
    );
    assert!(lp < 0.0 && lp.is_finite());
    unsafe {
        tb_string_free(a);
        tb_string_free(b);
        tb_model_free(m);
        tb_model_free(loaded);
    }
    let missing = CString::new("/nonexistent/m.tblm").unwrap();
    let mut none: *mut TbModel = ptr::null_mut();
    assert_eq!(unsafe { tb_model_load(missing.as_ptr(), &mut none) }, TbStatus::Io);
    assert!(none.is_null());
    assert_eq!(
        unsafe { tb_model_new(1, 3, 16, 64, 0, &mut none) },
        TbStatus::InvalidArgument
    );
}

#[test]
fn detector_handles_classify_features_and_generations() {
    use truebrief::detection::{train_classifier, ClassifierSpec};
    let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i), 1.0, 0.5]).collect();
    let ys: Vec<bool> = (0..20).map(|i| i >= 10).collect();
    let (det, _) = train_classifier(&xs, &ys, &ClassifierSpec::default(), 0).unwrap();
    let json = CString::new(serde_json::to_string(&det).unwrap()).unwrap();
    let mut d: *mut TbDetector = ptr::null_mut();
    assert_eq!(unsafe { tb_detector_from_json(json.as_ptr(), &mut d) }, TbStatus::Ok);
    assert_eq!(unsafe { tb_detector_input_len(d) }, 3);
    let (mut label, mut score) = (0, 0.0);
    let x = [19.0, 1.0, 0.5];
    assert_eq!(
        unsafe { tb_detector_predict(d, x.as_ptr(), 3, &mut label, &mut score) },
        TbStatus::Ok
    );
    assert_eq!(label, 1);
    assert!(score > 0.5);
    assert_eq!(
        unsafe { tb_detector_predict(d, x.as_ptr(), 2, &mut label, &mut score) },
        TbStatus::InvalidArgument
    );

    let mut m: *mut TbModel = ptr::null_mut();
    assert_eq!(unsafe { tb_model_new(1, 2, 16, 64, 3, &mut m) }, TbStatus::Ok);
    let prompt = CString::new("Some text").unwrap();
    let s = unsafe { tb_detect_generation(m, d, prompt.as_ptr(), 4, &mut label, &mut score) };
    assert_eq!(s, TbStatus::Ok, "{}", last_error());
    assert!(label == 0 || label == 1);
    unsafe {
        tb_detector_free(d);
        tb_model_free(m);
    }
}

#[test]
fn cli_entry_point_returns_exit_codes() {
    let args: Vec<CString> = ["truebrief", "train", "--objective", "ppo"]
        .iter()
        .map(|s| CString::new(*s).unwrap())
        .collect();
    let ptrs: Vec<*const c_char> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { tb_cli_run(ptrs.len() as c_int, ptrs.as_ptr()) }, 2);
}
