use std::ffi::{CStr, CString};
use std::ptr;

use fedhyp_ffi::*;

fn last_error() -> String {
    let p = fh_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { fh_string_free(p) };
    s
}

const SMALL: &str = "rounds = 2\n[pretrain]\nepochs = 1\nclassifier_epochs = 1\n[data]\nsource_per_agent = 120\ntest_per_domain = 4\n";

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(fh_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn geometry_on_raw_buffers() {
    let x = [0.1, -0.2, 0.05];
    let zero = [0.0; 3];
    let mut out = [9.0; 3];
    assert_eq!(unsafe { fh_mobius_add(zero.as_ptr(), x.as_ptr(), 3, 1.0, out.as_mut_ptr()) }, FhStatus::Ok);
    for (a, b) in out.iter().zip(&x) {
        assert!((a - b).abs() < 1e-15);
    }

    let mut d = -1.0;
    assert_eq!(unsafe { fh_distance(zero.as_ptr(), x.as_ptr(), 3, 1.0, &mut d) }, FhStatus::Ok);
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((d - 2.0 * n.atanh()).abs() < 1e-12);

    assert_eq!(
        unsafe { fh_exp_map(zero.as_ptr(), x.as_ptr(), 3, 0.5, FhExpMap::Standard, out.as_mut_ptr()) },
        FhStatus::Ok
    );
    assert!(0.5 * out.iter().map(|v| v * v).sum::<f64>() < 1.0);

    let pts = [0.1, 0.0, 0.0, -0.1, 0.0, 0.0];
    let mut m = [9.0; 3];
    assert_eq!(unsafe { fh_midpoint(pts.as_ptr(), 2, 3, ptr::null(), 1.0, m.as_mut_ptr()) }, FhStatus::Ok);
    assert!(m.iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn bad_arguments_report_codes_and_messages() {
    let x = [0.1, 0.2];
    let mut out = [0.0; 2];
    assert_eq!(unsafe { fh_mobius_add(ptr::null(), x.as_ptr(), 2, 1.0, out.as_mut_ptr()) }, FhStatus::NullPointer);
    assert!(last_error().contains("x"));
    assert_eq!(unsafe { fh_mobius_add(x.as_ptr(), x.as_ptr(), 2, -1.0, out.as_mut_ptr()) }, FhStatus::InvalidArgument);
    assert!(last_error().contains("curvature"));
    assert_eq!(unsafe { fh_midpoint(x.as_ptr(), 0, 2, ptr::null(), 1.0, out.as_mut_ptr()) }, FhStatus::InvalidArgument);

    let bad = CString::new("beta = 7.0").unwrap();
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { fh_simulator_new(bad.as_ptr(), &mut sim) }, FhStatus::Config);
    assert!(sim.is_null());
    assert!(last_error().contains("beta"));

    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { fh_simulator_from_checkpoint(ptr::null(), missing.as_ptr(), &mut sim) }, FhStatus::Io);
    unsafe { fh_simulator_free(ptr::null_mut()) };
    unsafe { fh_string_free(ptr::null_mut()) };
}

fn records(sim: *const FhSimulator) -> String {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { fh_simulator_records_json(sim, &mut p) }, FhStatus::Ok);
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { fh_string_free(p) };
    s
}

#[test]
fn simulator_lifecycle() {
    let cfg = CString::new(SMALL).unwrap();
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { fh_simulator_new(cfg.as_ptr(), &mut sim) }, FhStatus::Ok);
    let mut round = 99;
    assert_eq!(unsafe { fh_simulator_round(sim, &mut round) }, FhStatus::Ok);
    assert_eq!(round, 0);
    assert_eq!(unsafe { fh_simulator_step(sim, &mut round) }, FhStatus::Ok);
    assert_eq!(round, 1);
    assert_eq!(unsafe { fh_simulator_run(sim) }, FhStatus::Ok);
    assert_eq!(unsafe { fh_simulator_step(sim, ptr::null_mut()) }, FhStatus::InvalidArgument);

    let mut score = -1.0;
    assert_eq!(unsafe { fh_simulator_combined_score(sim, &mut score) }, FhStatus::Ok);
    assert!((0.0..=1.0).contains(&score));
    let mut gamma = 0.0;
    assert_eq!(unsafe { fh_simulator_gamma(sim, &mut gamma) }, FhStatus::Ok);
    assert!(gamma > 0.0);
    let lines = records(sim);
    assert_eq!(lines.lines().count(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("s.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fh_simulator_save_checkpoint(sim, path.as_ptr()) }, FhStatus::Ok);
    let mut resumed = ptr::null_mut();
    assert_eq!(unsafe { fh_simulator_from_checkpoint(cfg.as_ptr(), path.as_ptr(), &mut resumed) }, FhStatus::Ok);
    assert_eq!(unsafe { fh_simulator_round(resumed, &mut round) }, FhStatus::Ok);
    assert_eq!(round, 2);
    unsafe {
        fh_simulator_free(resumed);
        fh_simulator_free(sim);
    }
}
