use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mpc_ffi::*;

fn last_error() -> String {
    let p = mpc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn generate(n: usize, seed: u64) -> *mut MpcCorpus {
    let spec = c(&format!(r#"{{"num_conversations": {n}, "vocab_size": 96}}"#));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mpc_corpus_generate(spec.as_ptr(), seed, &mut out) }, MpcStatus::Ok);
    out
}

fn report(ck: *const MpcCheckpoint, corpus: *const MpcCorpus, task: MpcTask) -> serde_json::Value {
    let mut s = ptr::null_mut();
    let status = unsafe { mpc_evaluate(ck, corpus, task, 2, 1, &mut s) };
    assert_eq!(status, MpcStatus::Ok, "{}", last_error());
    let v = serde_json::from_str(unsafe { CStr::from_ptr(s) }.to_str().unwrap()).unwrap();
    unsafe { mpc_string_free(s) };
    v
}

#[test]
fn pretrain_finetune_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(24, 5);
    assert_eq!(unsafe { mpc_corpus_len(corpus) }, 24);
    let (mut train, mut valid) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(mpc_corpus_slice(corpus, 0, 16, &mut train), MpcStatus::Ok);
        assert_eq!(mpc_corpus_slice(corpus, 16, 24, &mut valid), MpcStatus::Ok);
        assert_eq!(mpc_corpus_slice(corpus, 20, 30, &mut valid), MpcStatus::InvalidArgument);
    }
    assert!(last_error().contains("20..30"));

    let cfg = c(r#"{"encoder": {"d": 8, "layers": 1, "heads": 2, "d_ff": 16, "max_seq_len": 96},
        "sampler": {"max_seq_len": 96}, "train": {"max_steps": 2, "batch_size": 8}, "drop": ["nsp"]}"#);
    let mut ck = ptr::null_mut();
    let status = unsafe { mpc_pretrain(train, cfg.as_ptr(), &mut ck) };
    assert_eq!(status, MpcStatus::Ok, "{}", last_error());
    assert!(unsafe { mpc_checkpoint_num_params(ck) } > 0);

    let path = c(dir.path().join("p.ck").to_str().unwrap());
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(mpc_checkpoint_save(ck, path.as_ptr()), MpcStatus::Ok);
        assert_eq!(mpc_checkpoint_load(path.as_ptr(), &mut loaded), MpcStatus::Ok);
        assert_eq!(mpc_checkpoint_num_params(loaded), mpc_checkpoint_num_params(ck));
    }

    let ft_cfg = c(r#"{"train": {"epochs": 1, "batch_size": 8}}"#);
    let mut ft = ptr::null_mut();
    let status = unsafe { mpc_finetune(MpcTask::Ar, loaded, train, valid, ft_cfg.as_ptr(), &mut ft) };
    assert_eq!(status, MpcStatus::Ok, "{}", last_error());
    let r = report(ft, valid, MpcTask::Ar);
    assert_eq!(r["task"], "ar");
    assert_eq!(r["reports"][0]["metric"], "P@1");
    let oracle = report(ptr::null(), valid, MpcTask::Ar);
    assert_eq!(oracle["reports"][0]["value"], 1.0);

    unsafe {
        mpc_checkpoint_free(ft);
        mpc_checkpoint_free(loaded);
        mpc_checkpoint_free(ck);
        mpc_corpus_free(train);
        mpc_corpus_free(valid);
        mpc_corpus_free(corpus);
    }
}

#[test]
fn corpus_files_round_trip_with_a_checkpoint_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(6, 2);
    let path = c(dir.path().join("c.jsonl").to_str().unwrap());
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(mpc_corpus_write(corpus, path.as_ptr()), MpcStatus::Ok);
        assert_eq!(mpc_corpus_load(path.as_ptr(), ptr::null(), 1000, &mut back), MpcStatus::Ok);
        assert_eq!(mpc_corpus_len(back), 6);
        mpc_corpus_free(back);
        mpc_corpus_free(corpus);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(mpc_corpus_load(ptr::null(), ptr::null(), 10, &mut out), MpcStatus::NullArgument);
        assert!(last_error().contains("path"));
        let missing = c("/nonexistent/dir/c.jsonl");
        assert_eq!(mpc_corpus_load(missing.as_ptr(), ptr::null(), 10, &mut out), MpcStatus::Io);
        assert!(last_error().contains("/nonexistent/dir/c.jsonl"));
        let bad = c("{not json");
        assert_eq!(mpc_corpus_generate(bad.as_ptr(), 1, &mut out), MpcStatus::Parse);
        let bad = c(r#"{"vocab_size": 3}"#);
        assert_eq!(mpc_corpus_generate(bad.as_ptr(), 1, &mut out), MpcStatus::InvalidArgument);
        assert!(out.is_null());
        assert_eq!(mpc_corpus_generate(ptr::null(), 1, ptr::null_mut()), MpcStatus::NullArgument);
        assert_eq!(mpc_corpus_len(ptr::null()), 0);
        mpc_corpus_free(ptr::null_mut());
        mpc_string_free(ptr::null_mut());
        let corpus = generate(4, 1);
        let mut s = ptr::null_mut();
        assert_eq!(mpc_evaluate(ptr::null(), corpus, MpcTask::Rs, 2, 0, &mut s), MpcStatus::InvalidArgument);
        assert!(last_error().contains("oracle"));
        mpc_corpus_free(corpus);
    }
    let v = unsafe { CStr::from_ptr(mpc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mpc.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
    assert!(header.contains("MPC_STATUS_INTERNAL = 6"));
}

/// Compiles the C smoke program against the static library when a C
/// compiler is present.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(cc.status.success());
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib: PathBuf = profile_dir.join("libmpc_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipped", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let manifest = env!("CARGO_MANIFEST_DIR");
    let build = Command::new("cc")
        .arg(format!("{manifest}/tests/smoke.c"))
        .arg(format!("-I{manifest}/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
