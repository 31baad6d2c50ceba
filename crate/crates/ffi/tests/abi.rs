use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use nullmoe_ffi::*;

const N: usize = 4;
const K: usize = 2;
const D: usize = 8;

fn create(rho: f64, variant: NullmoeVariant) -> *mut NullmoeModel {
    let mut h = ptr::null_mut();
    let st = unsafe { nullmoe_model_create(N, K, rho, variant, D, 16, 2, false, 11, &mut h) };
    assert_eq!(st, NullmoeStatus::Ok);
    assert!(!h.is_null());
    h
}

fn inputs(n_tokens: usize) -> Vec<f64> {
    (0..n_tokens * D).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect()
}

fn last_error() -> String {
    let p = nullmoe_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dims_report_null_copies() {
    let h = create(0.5, NullmoeVariant::Zero);
    let (mut n, mut m, mut k, mut d, mut l) = (0, 0, 0, 0, 0);
    let st = unsafe { nullmoe_model_dims(h, &mut n, &mut m, &mut k, &mut d, &mut l) };
    assert_eq!(st, NullmoeStatus::Ok);
    assert_eq!((n, m, k, d, l), (N, 4, K, D, 2));
    let st = unsafe { nullmoe_model_dims(h, ptr::null_mut(), &mut m, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, NullmoeStatus::Ok);
    unsafe { nullmoe_model_free(h) };
}

#[test]
fn route_and_scores_agree() {
    let h = create(0.5, NullmoeVariant::Zero);
    let t = 10;
    let x = inputs(t);
    let mut scores = vec![-1.0; t];
    assert_eq!(
        unsafe { nullmoe_model_compute_scores(h, x.as_ptr(), t, D, scores.as_mut_ptr()) },
        NullmoeStatus::Ok
    );
    let mut mean = vec![0.0; t];
    for layer in 0..2 {
        let mut slots = vec![u32::MAX; t * K];
        let mut counts = vec![u32::MAX; t];
        let st = unsafe { nullmoe_model_route(h, layer, x.as_ptr(), t, D, slots.as_mut_ptr(), counts.as_mut_ptr()) };
        assert_eq!(st, NullmoeStatus::Ok);
        for tok in 0..t {
            let row = &slots[tok * K..(tok + 1) * K];
            assert!(row.iter().all(|&s| (s as usize) < N + 4));
            let real = row.iter().filter(|&&s| (s as usize) < N).count();
            assert_eq!(real as u32, counts[tok]);
            mean[tok] += real as f64 / (2 * K) as f64;
        }
    }
    assert_eq!(mean, scores);
    unsafe { nullmoe_model_free(h) };
}

#[test]
fn dense_model_scores_are_one() {
    let h = create(1.0, NullmoeVariant::Zero);
    let x = inputs(5);
    let mut scores = vec![0.0; 5];
    unsafe { nullmoe_model_compute_scores(h, x.as_ptr(), 5, D, scores.as_mut_ptr()) };
    assert!(scores.iter().all(|&s| s == 1.0));
    unsafe { nullmoe_model_free(h) };
}

#[test]
fn save_load_round_trip_preserves_forward() {
    let h = create(0.5, NullmoeVariant::Copy);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nullmoe_model_save(h, path.as_ptr()) }, NullmoeStatus::Ok);
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { nullmoe_model_load(path.as_ptr(), &mut g) }, NullmoeStatus::Ok);
    let x = inputs(6);
    let (mut a, mut b) = (vec![0.0; 6 * D], vec![1.0; 6 * D]);
    unsafe {
        nullmoe_model_forward(h, x.as_ptr(), 6, D, a.as_mut_ptr());
        nullmoe_model_forward(g, x.as_ptr(), 6, D, b.as_mut_ptr());
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    unsafe {
        nullmoe_model_free(h);
        nullmoe_model_free(g);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let mut h = ptr::null_mut();
    let st = unsafe { nullmoe_model_create(N, 0, 0.5, NullmoeVariant::Zero, D, 16, 2, false, 0, &mut h) };
    assert_eq!(st, NullmoeStatus::InvalidArgument);
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { nullmoe_model_create(N, K, 0.5, NullmoeVariant::Zero, D, 16, 2, false, 0, ptr::null_mut()) };
    assert_eq!(st, NullmoeStatus::NullPointer);

    let m = create(0.5, NullmoeVariant::Zero);
    let x = inputs(3);
    let mut out = vec![0.0; 3 * D];
    let st = unsafe { nullmoe_model_forward(m, x.as_ptr(), 3, D + 1, out.as_mut_ptr()) };
    assert_eq!(st, NullmoeStatus::Shape);
    assert!(last_error().contains("d_model"));

    let mut bad = x.clone();
    bad[0] = f64::NAN;
    let st = unsafe { nullmoe_model_forward(m, bad.as_ptr(), 3, D, out.as_mut_ptr()) };
    assert_eq!(st, NullmoeStatus::NonFinite);

    let st = unsafe { nullmoe_model_route(m, 9, x.as_ptr(), 3, D, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, NullmoeStatus::InvalidArgument);

    let st = unsafe { nullmoe_model_forward(ptr::null(), x.as_ptr(), 3, D, out.as_mut_ptr()) };
    assert_eq!(st, NullmoeStatus::NullPointer);
    unsafe { nullmoe_model_free(m) };
    unsafe { nullmoe_model_free(ptr::null_mut()) };
}

#[test]
fn load_rejects_missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
    let st = unsafe { nullmoe_model_load(missing.as_ptr(), &mut h) };
    assert!(matches!(st, NullmoeStatus::Io | NullmoeStatus::Checkpoint), "{st:?}");
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nullmoe_model_load(junk.as_ptr(), &mut h) }, NullmoeStatus::Checkpoint);
    assert!(h.is_null());
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(nullmoe_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nullmoe.h")).unwrap();
    for name in [
        "nullmoe_last_error_message",
        "nullmoe_version",
        "nullmoe_model_create",
        "nullmoe_model_load",
        "nullmoe_model_save",
        "nullmoe_model_free",
        "nullmoe_model_dims",
        "nullmoe_model_forward",
        "nullmoe_model_route",
        "nullmoe_model_compute_scores",
        "NULLMOE_STATUS_PANIC",
        "typedef struct nullmoe_model nullmoe_model;",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"nullmoe.h\"\nint main(void) { nullmoe_model *m = 0; (void)m; return NULLMOE_STATUS_OK; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().and_then(|d| d.parent()).unwrap().join("libnullmoe_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("static library or C compiler unavailable, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "nullmoe.h"
int main(void) {
    nullmoe_model *m = NULL;
    if (nullmoe_model_create(4, 2, 0.5, NULLMOE_VARIANT_ZERO, 8, 16, 2, false, 3, &m) != NULLMOE_STATUS_OK) return 1;
    double x[3 * 8];
    for (int i = 0; i < 24; i++) x[i] = (i % 5) - 2.0;
    double s[3];
    if (nullmoe_model_compute_scores(m, x, 3, 8, s) != NULLMOE_STATUS_OK) return 2;
    if (nullmoe_model_forward(m, x, 3, 9, x) != NULLMOE_STATUS_SHAPE) return 3;
    printf("%s|%.3f\n", nullmoe_last_error_message(), s[0]);
    nullmoe_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("d_model"), "{text}");
}
