use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dcbench_ffi::*;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/sweep_traces.jsonl")
}

fn last_error() -> String {
    let p = dcb_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    dcb_string_free(s);
    out
}

#[test]
fn threshold_and_policies() {
    let mut a = DcbAction::Custom;
    unsafe {
        assert_eq!(dcb_threshold_rule(0.75, 1.0, &mut a), DcbStatus::Ok);
        assert_eq!(a, DcbAction::Clarify);
        assert_eq!(dcb_threshold_rule(0.8, 0.8, &mut a), DcbStatus::Ok);
        assert_eq!(a, DcbAction::Execute);
        assert_eq!(dcb_threshold_rule(1.2, 0.8, &mut a), DcbStatus::InvalidArgument);

        assert_eq!(dcb_calendar_policy(1.0, false, &mut a), DcbStatus::Ok);
        assert_eq!(a, DcbAction::Execute);
        assert_eq!(dcb_calendar_policy(1.0, true, &mut a), DcbStatus::Ok);
        assert_eq!(a, DcbAction::Clarify);

        let input = DcbGraphInput {
            p_suff: 0.5,
            p_corr: 0.95,
            just_traversed: true,
            n_untried: 1,
            n_hidden: 2,
            turn: 3,
        };
        assert_eq!(dcb_graph_policy(&input, 0.4, 0.5, &mut a), DcbStatus::Ok);
        assert_eq!(a, DcbAction::Accept);
        assert_eq!(dcb_graph_policy(&input, 0.4, 0.5, ptr::null_mut()), DcbStatus::NullPointer);
    }
}

#[test]
fn composite_and_errors() {
    let mut p = 0.0;
    unsafe {
        assert_eq!(dcb_blend_composite(0.5, 1.0, 0.4, &mut p), DcbStatus::Ok);
        assert!((p - 0.8).abs() < 1e-12);
        assert_eq!(dcb_blend_composite(0.5, 1.0, -0.1, &mut p), DcbStatus::Config);
    }
    assert!(last_error().contains("alpha"));
}

#[test]
fn utility_routing() {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/routing.json")).unwrap();
    let c = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(dcb_utility_argmax(c.as_ptr(), &mut out), DcbStatus::Ok);
        assert_eq!(take(out), "small");
        let bad = CString::new("{").unwrap();
        assert_eq!(dcb_utility_argmax(bad.as_ptr(), &mut out), DcbStatus::Data);
    }
}

#[test]
fn index_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("passages.jsonl");
    std::fs::write(
        &path,
        "{\"id\":\"a\",\"text\":\"red apple orchard\"}\n{\"id\":\"b\",\"text\":\"blue ocean waves\"}\n",
    )
    .unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut idx = ptr::null_mut();
    unsafe {
        assert_eq!(dcb_index_new_from_jsonl(cpath.as_ptr(), &mut idx), DcbStatus::Ok);
        let mut n = 0;
        assert_eq!(dcb_index_len(idx, &mut n), DcbStatus::Ok);
        assert_eq!(n, 2);
        let q = CString::new("ocean").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(dcb_index_search(idx, q.as_ptr(), 1, &mut out), DcbStatus::Ok);
        let hits: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(hits[0]["id"], "b");
        dcb_index_free(idx);

        let missing = CString::new("/nonexistent/passages.jsonl").unwrap();
        assert_eq!(dcb_index_new_from_jsonl(missing.as_ptr(), &mut idx), DcbStatus::Io);
    }
}

#[test]
fn trace_set_handle() {
    let path = CString::new(fixture().to_str().unwrap()).unwrap();
    let mut set = ptr::null_mut();
    unsafe {
        assert_eq!(dcb_traces_open(path.as_ptr(), &mut set), DcbStatus::Ok);
        let mut n = 0;
        dcb_traces_len(set, &mut n);
        assert_eq!(n, 150);
        let mut r = DcbReplay::default();
        assert_eq!(dcb_traces_replay(set, 0, 0.8, 0.4, 2, &mut r), DcbStatus::Ok);
        assert_eq!(dcb_traces_replay(set, 999, 0.8, 0.4, 2, &mut r), DcbStatus::InvalidArgument);

        let (taus, alphas) = ([0.9], [0.4]);
        let mut out = ptr::null_mut();
        assert_eq!(
            dcb_traces_sweep(set, taus.as_ptr(), 1, alphas.as_ptr(), 1, 2, &mut out),
            DcbStatus::Ok
        );
        let rows: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let medium = rows.as_array().unwrap().iter().find(|r| r["bucket"] == "medium").unwrap();
        assert_eq!(medium["success"], 0.92);
        dcb_traces_free(set);
    }
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dcbench.h")).unwrap();
    for name in ["dcb_threshold_rule", "dcb_traces_sweep", "dcb_index_search", "DCB_STATUS_OK", "typedef struct DcbIndex DcbIndex"] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// Compiles and runs the C smoke test against the static library when a C
/// compiler is on PATH.
#[test]
fn c_smoke() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libdcbench_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = Command::new(&bin).arg(fixture()).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
