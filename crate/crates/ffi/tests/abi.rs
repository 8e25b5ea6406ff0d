use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pmod_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pmod_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn tanh_norm_is_bounded() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(pmod_tanh_norm(0.2, 100.0, &mut out), PmodStatus::Ok);
        assert!((out - 0.2).abs() < 1e-15);
        assert_eq!(pmod_tanh_norm(0.2, 0.0, &mut out), PmodStatus::Ok);
        assert_eq!(out, 0.0);
        assert_eq!(pmod_tanh_norm(0.0, 1.0, &mut out), PmodStatus::InvalidArgument);
        assert!(last_error().contains("gating"), "{}", last_error());
        assert_eq!(pmod_tanh_norm(0.2, 1.0, ptr::null_mut()), PmodStatus::NullPointer);
    }
}

#[test]
fn last_error_clears_on_success() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(pmod_prd_ratio(0.5, 32, 0, &mut out), PmodStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(pmod_prd_ratio(0.5, 32, 16, &mut out), PmodStatus::Ok);
        assert_eq!(out, 0.5);
        assert_eq!(last_error(), "");
    }
}

#[test]
fn errors_are_per_thread() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(pmod_prd_ratio(2.0, 32, 1, &mut out), PmodStatus::InvalidArgument);
    }
    let other = std::thread::spawn(last_error).join().unwrap();
    assert_eq!(other, "");
    assert!(!last_error().is_empty());
}

#[test]
fn topk_ties_go_low() {
    let w = [1.0; 6];
    let mut mask = [9u8; 6];
    let mut k = 0;
    unsafe {
        assert_eq!(pmod_select_topk(w.as_ptr(), 6, 0.5, mask.as_mut_ptr(), &mut k), PmodStatus::Ok);
    }
    assert_eq!(k, 3);
    assert_eq!(mask, [1, 1, 1, 0, 0, 0]);
    unsafe {
        assert_eq!(pmod_select_topk(w.as_ptr(), 0, 0.5, mask.as_mut_ptr(), &mut k), PmodStatus::InvalidArgument);
        assert_eq!(pmod_select_topk(w.as_ptr(), 6, 1.5, mask.as_mut_ptr(), &mut k), PmodStatus::InvalidArgument);
        assert_eq!(pmod_select_topk(ptr::null(), 6, 0.5, mask.as_mut_ptr(), &mut k), PmodStatus::NullPointer);
    }
}

#[test]
fn schedule_handles() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(pmod_schedule_cosine(0.5, 0.0, 1.0, 32, false, &mut s), PmodStatus::Ok);
        let (mut n, mut mean) = (0usize, 0.0);
        assert_eq!(pmod_schedule_len(s, &mut n), PmodStatus::Ok);
        assert_eq!(n, 32);
        assert_eq!(pmod_schedule_mean(s, &mut mean), PmodStatus::Ok);
        assert!((mean - 0.484375).abs() < 1e-12);
        let mut buf = vec![0.0; 31];
        assert_eq!(pmod_schedule_ratios(s, buf.as_mut_ptr(), 31), PmodStatus::BufferTooSmall);
        buf.push(0.0);
        assert_eq!(pmod_schedule_ratios(s, buf.as_mut_ptr(), 32), PmodStatus::Ok);
        assert_eq!(buf[15], 0.5);
        pmod_schedule_free(s);
        pmod_schedule_free(ptr::null_mut());

        let mut c = ptr::null_mut();
        assert_eq!(pmod_schedule_constant(0.0, 8, &mut c), PmodStatus::InvalidArgument);
        assert!(c.is_null());
        assert_eq!(pmod_schedule_constant(0.4, 8, &mut c), PmodStatus::Ok);
        assert_eq!(pmod_schedule_mean(c, &mut mean), PmodStatus::Ok);
        assert!((mean - 0.4).abs() < 1e-15);
        pmod_schedule_free(c);
        assert_eq!(pmod_schedule_len(ptr::null(), &mut n), PmodStatus::NullPointer);
    }
}

#[test]
fn threshold_search_matches_kv_targets() {
    for (beta, target) in [(0.3, 0.423), (0.4, 0.475), (0.5, 0.537)] {
        let mut t = PmodThresholds::default();
        let mut s = ptr::null_mut();
        unsafe {
            assert_eq!(pmod_search_thresholds(target, beta, 32, &mut t, &mut s), PmodStatus::Ok);
            assert!(t.within_tolerance && (t.achieved - target).abs() <= 0.005);
            let mut mean = 0.0;
            pmod_schedule_mean(s, &mut mean);
            assert!((mean - t.achieved).abs() < 1e-12);
            pmod_schedule_free(s);
            assert_eq!(pmod_search_thresholds(target, beta, 32, &mut t, ptr::null_mut()), PmodStatus::Ok);
        }
    }
}

#[test]
fn cost_report_of_high_res_workload() {
    let shape = PmodModelShape {
        n_layers: 32,
        d_model: 4096,
        n_heads: 32,
        d_ff: 11008,
        vocab_size: 32000,
    };
    let load = PmodWorkload {
        n_vision: 2880,
        n_text_prompt: 64,
        n_decode: 16,
        bytes_per_element: 2,
    };
    unsafe {
        let mut ones = ptr::null_mut();
        pmod_schedule_constant(1.0, 32, &mut ones);
        let mut r = ptr::null_mut();
        assert_eq!(pmod_cost(&shape, ones, &load, &mut r), PmodStatus::Ok);
        let mut sum = PmodCostSummary::default();
        assert_eq!(pmod_cost_summary(r, &mut sum), PmodStatus::Ok);
        assert_eq!(sum.total_flops, sum.baseline_flops);
        assert_eq!(sum.flops_ratio, 1.0);
        let tf = sum.baseline_flops as f64 / 1e12;
        assert!((tf - 39.46).abs() / 39.46 <= 0.05);
        let mut layers = vec![0u64; 32];
        assert_eq!(pmod_cost_layer_flops(r, layers.as_mut_ptr(), 32), PmodStatus::Ok);
        assert_eq!(layers.iter().sum::<u64>() + sum.head_flops, sum.total_flops);
        pmod_cost_free(r);

        let short = PmodModelShape { n_layers: 8, ..shape };
        let mut r = ptr::null_mut();
        assert_eq!(pmod_cost(&short, ones, &load, &mut r), PmodStatus::InvalidArgument);
        assert!(r.is_null());
        assert!(last_error().contains("32"));
        pmod_schedule_free(ones);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pmod.h")
}

fn has(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "pmod_last_error",
        "pmod_tanh_norm",
        "pmod_prd_ratio",
        "pmod_select_topk",
        "pmod_schedule_cosine",
        "pmod_schedule_constant",
        "pmod_search_thresholds",
        "pmod_schedule_ratios",
        "pmod_schedule_free",
        "pmod_cost",
        "pmod_cost_summary",
        "pmod_cost_free",
        "typedef struct PmodSchedule PmodSchedule;",
        "PMOD_STATUS_BUFFER_TOO_SMALL = 3",
    ] {
        assert!(h.contains(name), "{name}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    if !has("cc") {
        eprintln!("no C compiler, skipped");
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let inc = dir.join("include");
    let src = dir.join("tests/c/smoke.c");
    for (tool, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        if !has(tool) {
            continue;
        }
        let st = Command::new(tool)
            .args(&extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&inc)
            .arg(&src)
            .status()
            .unwrap();
        assert!(st.success(), "{tool}");
    }
}

/// Links the C smoke program against the static library when cargo has
/// already built one next to this test binary.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libpmod_ffi.a");
    if !lib.exists() || !has("cc") {
        eprintln!("static library not built, skipped");
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = std::env::temp_dir().join(format!("pmod_smoke_{}", std::process::id()));
    let st = Command::new("cc")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&tmp)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&tmp).output().unwrap();
    let _ = std::fs::remove_file(&tmp);
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.5"));
}
