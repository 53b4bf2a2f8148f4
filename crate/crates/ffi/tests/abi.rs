use std::ffi::{c_char, CStr, CString};
use std::ptr;

use cmm_ffi::*;

fn last_error() -> String {
    let p = cmm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn scalar_functions() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(cmm_nb_pmf(0, 2.0, 1.0, &mut v), CmmStatus::Ok);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cmm_nb_pmf(0, -1.0, 1.0, &mut v), CmmStatus::Data);
        assert!(last_error().contains("mu"), "{}", last_error());
        assert_eq!(cmm_nb_pmf(0, 2.0, 1.0, ptr::null_mut()), CmmStatus::InvalidArgument);

        let phi = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(cmm_inflated_pmf(0, 5.0, 2.0, phi.as_ptr(), &mut v), CmmStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(cmm_inflated_pmf(33, 5.0, 2.0, phi.as_ptr(), &mut v), CmmStatus::Data);
        assert_eq!(cmm_inflated_pmf(1, 5.0, 2.0, ptr::null(), &mut v), CmmStatus::InvalidArgument);

        assert_eq!(cmm_marginal_censor_prob(2, 10, 250, 3, &mut v), CmmStatus::Ok);
        assert!((v - 29.0 / 32.0 * 3.0 / 31.0).abs() < 1e-15);
        assert_eq!(cmm_marginal_censor_prob(1, 20, 250, 3, &mut v), CmmStatus::Data);

        let mut z = 99u32;
        assert_eq!(cmm_risk_neutral_optimum(30, 250, 1, &mut z), CmmStatus::Ok);
        assert_eq!(z, 23);
    }
    let version = unsafe { CStr::from_ptr(cmm_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn simulate_fit_predict_roundtrip() {
    let cfg = CString::new(
        "seed = 3\nschema = \"game\"\n[simulate]\npreset = \"three_segment\"\nn_children = 60\n[fit]\nn_segments = 1\n",
    )
    .unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cmm_dataset_simulate(cfg.as_ptr(), &mut ds), CmmStatus::Ok);
        let (mut nc, mut nt) = (0usize, 0usize);
        cmm_dataset_n_children(ds, &mut nc);
        cmm_dataset_n_trials(ds, &mut nt);
        assert_eq!((nc, nt), (60, 960));

        let mut fit = ptr::null_mut();
        let st = cmm_fit_run(ds, cfg.as_ptr(), &mut fit);
        assert!(st == CmmStatus::Ok || st == CmmStatus::NotConverged);
        assert!(!fit.is_null());
        let mut s = 0usize;
        cmm_fit_n_segments(fit, &mut s);
        assert_eq!(s, 1);
        let (mut ll, mut bic) = (0.0, 0.0);
        cmm_fit_loglik(fit, &mut ll);
        cmm_fit_bic(fit, &mut bic);
        assert!(ll < 0.0 && bic > 0.0);

        // size query, then fill
        let mut needed = 0usize;
        assert_eq!(
            cmm_fit_natural_params(fit, ptr::null_mut(), 0, &mut needed),
            CmmStatus::InvalidArgument
        );
        let mut params = vec![0.0; needed];
        assert_eq!(
            cmm_fit_natural_params(fit, params.as_mut_ptr(), params.len(), &mut needed),
            CmmStatus::Ok
        );
        let mut se = vec![0.0; needed];
        assert_eq!(
            cmm_fit_standard_errors(fit, se.as_mut_ptr(), se.len(), ptr::null_mut()),
            CmmStatus::Ok
        );
        assert!(se.iter().take(1).all(|v| *v > 0.0));

        let mut preds = vec![0.0; nt];
        assert_eq!(
            cmm_fit_predict(fit, ds, false, preds.as_mut_ptr(), preds.len(), ptr::null_mut()),
            CmmStatus::Ok
        );
        assert!(preds.iter().all(|p| (0.0..=32.0).contains(p)));

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(cmm_fit_to_json(fit, &mut json), CmmStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(cmm_fit_from_json(json, &mut again), CmmStatus::Ok);
        let mut ll2 = 0.0;
        cmm_fit_loglik(again, &mut ll2);
        assert_eq!(ll, ll2);
        cmm_string_free(json);
        cmm_fit_free(again);
        cmm_fit_free(fit);
        cmm_dataset_free(ds);
        // null handles are tolerated by the free functions
        cmm_fit_free(ptr::null_mut());
        cmm_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut ds = ptr::null_mut();
        let bad = CString::new("[simulate]\npreset = \"nope\"\n").unwrap();
        assert_eq!(cmm_dataset_simulate(bad.as_ptr(), &mut ds), CmmStatus::Config);
        assert!(ds.is_null());
        assert!(last_error().contains("preset"));

        let missing = CString::new("/nonexistent/children.csv").unwrap();
        assert_eq!(cmm_dataset_load(missing.as_ptr(), missing.as_ptr(), &mut ds), CmmStatus::Data);
        assert_eq!(cmm_dataset_load(ptr::null(), missing.as_ptr(), &mut ds), CmmStatus::InvalidArgument);

        let mut fit = ptr::null_mut();
        let junk = CString::new("{not json").unwrap();
        assert_eq!(cmm_fit_from_json(junk.as_ptr(), &mut fit), CmmStatus::Data);
        let mut n = 0usize;
        assert_eq!(cmm_fit_n_segments(ptr::null(), &mut n), CmmStatus::InvalidArgument);
    }
    // a successful call clears the message
    let mut v = 0.0;
    unsafe { cmm_nb_pmf(1, 1.0, 1.0, &mut v) };
    assert!(cmm_last_error().is_null());
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/cmm.h");
    for name in [
        "cmm_version",
        "cmm_last_error",
        "cmm_nb_pmf",
        "cmm_inflated_pmf",
        "cmm_marginal_censor_prob",
        "cmm_risk_neutral_optimum",
        "cmm_dataset_load",
        "cmm_dataset_simulate",
        "cmm_dataset_n_children",
        "cmm_dataset_n_trials",
        "cmm_dataset_free",
        "cmm_fit_run",
        "cmm_fit_from_json",
        "cmm_fit_n_segments",
        "cmm_fit_loglik",
        "cmm_fit_bic",
        "cmm_fit_converged",
        "cmm_fit_natural_params",
        "cmm_fit_standard_errors",
        "cmm_fit_predict",
        "cmm_fit_to_json",
        "cmm_fit_free",
        "cmm_string_free",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct CmmFit CmmFit;"));
}
