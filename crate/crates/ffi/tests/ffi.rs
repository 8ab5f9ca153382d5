use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mtseq::data::Vocabulary;
use mtseq::layers::LayerDims;
use mtseq::model::{MultiTaskModel, SharingMode, TaskSpec};
use mtseq_ffi::*;

fn toy_model(dir: &Path) -> PathBuf {
    let src = Vocabulary::from_tokens(["the", "cat", "sat", "on", "mat"]);
    let tasks = vec![
        TaskSpec::translation("mt", Vocabulary::from_tokens(["le", "chat", "assis"])).main(),
        TaskSpec::tagging("pos", Vocabulary::from_tokens(["D", "N", "V", "P"])),
    ];
    let model = MultiTaskModel::build(SharingMode::SharedEncoder, tasks, LayerDims::new(4, 3, 5, 6), src, 7).unwrap();
    let path = dir.join("model.bin");
    model.save(&path).unwrap();
    path
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mtseq_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    mtseq_string_free(p);
    s
}

#[test]
fn load_translate_tag_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(toy_model(dir.path()).to_str().unwrap());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(mtseq_model_load(path.as_ptr(), &mut model), MtseqStatus::Ok);
        assert!(!model.is_null());
        assert!(mtseq_last_error_message().is_null());

        let mut n = 0usize;
        assert_eq!(mtseq_model_task_count(model, &mut n), MtseqStatus::Ok);
        assert_eq!(n, 2);
        let mut name = ptr::null_mut();
        assert_eq!(mtseq_model_task_name(model, 1, &mut name), MtseqStatus::Ok);
        assert_eq!(take(name), "pos");
        assert_eq!(mtseq_model_task_name(model, 2, &mut name), MtseqStatus::InvalidArgument);
        assert!(name.is_null());

        let sentence = c("the cat sat on the mat");
        let mut out = ptr::null_mut();
        assert_eq!(
            mtseq_tag(model, ptr::null(), ptr::null(), sentence.as_ptr(), &mut out),
            MtseqStatus::Ok
        );
        assert_eq!(take(out).split(' ').count(), 6);

        let mut out = ptr::null_mut();
        let task = c("mt");
        assert_eq!(
            mtseq_translate(model, ptr::null(), task.as_ptr(), sentence.as_ptr(), 3, &mut out),
            MtseqStatus::Ok
        );
        let text = take(out);
        assert!(
            text.split_whitespace().all(|w| ["le", "chat", "assis"].contains(&w)),
            "{text}"
        );

        let empty = c("");
        let mut out = ptr::null_mut();
        assert_eq!(
            mtseq_tag(model, ptr::null(), ptr::null(), empty.as_ptr(), &mut out),
            MtseqStatus::Ok
        );
        assert_eq!(take(out), "");

        mtseq_model_free(model);
    }
}

#[test]
fn errors_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(toy_model(dir.path()).to_str().unwrap());
    unsafe {
        let mut model = ptr::null_mut();
        let missing = c("/nonexistent/model.bin");
        assert_eq!(mtseq_model_load(missing.as_ptr(), &mut model), MtseqStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("nonexistent"));

        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not a model").unwrap();
        let junk = c(junk.to_str().unwrap());
        assert_eq!(mtseq_model_load(junk.as_ptr(), &mut model), MtseqStatus::Corrupt);

        assert_eq!(mtseq_model_load(ptr::null(), &mut model), MtseqStatus::NullPointer);
        assert_eq!(
            mtseq_model_load(path.as_ptr(), ptr::null_mut()),
            MtseqStatus::NullPointer
        );

        assert_eq!(mtseq_model_load(path.as_ptr(), &mut model), MtseqStatus::Ok);
        let s = c("the cat");
        let mut out = ptr::null_mut();
        let bad = c("ner");
        assert_eq!(
            mtseq_tag(model, ptr::null(), bad.as_ptr(), s.as_ptr(), &mut out),
            MtseqStatus::UnknownTask
        );
        assert!(last_error().contains("ner"));
        let mt = c("mt");
        assert_eq!(
            mtseq_tag(model, ptr::null(), mt.as_ptr(), s.as_ptr(), &mut out),
            MtseqStatus::InvalidArgument
        );
        assert!(out.is_null());
        let bytes = [0xffu8, 0xfe, 0];
        assert_eq!(
            mtseq_translate(model, ptr::null(), ptr::null(), bytes.as_ptr().cast(), 0, &mut out),
            MtseqStatus::InvalidUtf8
        );
        assert_eq!(
            mtseq_translate(ptr::null(), ptr::null(), ptr::null(), s.as_ptr(), 0, &mut out),
            MtseqStatus::NullPointer
        );
        mtseq_model_free(model);
        mtseq_model_free(ptr::null_mut());
        mtseq_string_free(ptr::null_mut());
    }
}

#[test]
fn bpe_handle_segments_input() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = c(toy_model(dir.path()).to_str().unwrap());
    let codes = dir.path().join("codes");
    std::fs::write(&codes, "1\nc a\n").unwrap();
    let codes = c(codes.to_str().unwrap());
    unsafe {
        let (mut model, mut bpe) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(mtseq_model_load(model_path.as_ptr(), &mut model), MtseqStatus::Ok);
        assert_eq!(mtseq_bpe_load(codes.as_ptr(), &mut bpe), MtseqStatus::Ok);
        let s = c("cat sat");
        let mut out = ptr::null_mut();
        assert_eq!(
            mtseq_tag(model, bpe, ptr::null(), s.as_ptr(), &mut out),
            MtseqStatus::Ok
        );
        assert_eq!(take(out).split(' ').count(), 2);
        let mut out = ptr::null_mut();
        assert_eq!(
            mtseq_translate(model, bpe, ptr::null(), s.as_ptr(), 0, &mut out),
            MtseqStatus::Ok
        );
        assert!(!take(out).contains("@@"));
        mtseq_bpe_free(bpe);
        mtseq_model_free(model);
    }
}

#[test]
fn eval_files() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp");
    let reference = dir.path().join("ref");
    std::fs::write(&hyp, "a b c d e\nN.sg V.3\n").unwrap();
    std::fs::write(&reference, "a b c d e\nN.pl V.3\n").unwrap();
    let (h, r) = (c(hyp.to_str().unwrap()), c(reference.to_str().unwrap()));
    unsafe {
        let mut score = -1.0;
        assert_eq!(
            mtseq_eval_bleu_files(h.as_ptr(), h.as_ptr(), &mut score),
            MtseqStatus::Ok
        );
        assert!((score - 100.0).abs() < 1e-9);

        let mut fine = -1.0;
        assert_eq!(
            mtseq_eval_tag_error_files(h.as_ptr(), r.as_ptr(), 0, ptr::null(), &mut fine),
            MtseqStatus::Ok
        );
        assert!((fine - 100.0 / 7.0).abs() < 1e-9);
        let mut coarse = -1.0;
        assert_eq!(
            mtseq_eval_tag_error_files(h.as_ptr(), r.as_ptr(), 1, ptr::null(), &mut coarse),
            MtseqStatus::Ok
        );
        assert_eq!(coarse, 0.0);

        let short = dir.path().join("short");
        std::fs::write(&short, "a b c d e\n").unwrap();
        let s = c(short.to_str().unwrap());
        assert_eq!(
            mtseq_eval_bleu_files(s.as_ptr(), r.as_ptr(), &mut score),
            MtseqStatus::Mismatch
        );
        let msg = last_error();
        assert!(msg.contains('1') && msg.contains('2'), "{msg}");
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(mtseq_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mtseq.h")).unwrap();
    for name in [
        "mtseq_version",
        "mtseq_last_error_message",
        "mtseq_string_free",
        "mtseq_model_load",
        "mtseq_model_free",
        "mtseq_model_task_count",
        "mtseq_model_task_name",
        "mtseq_bpe_load",
        "mtseq_bpe_free",
        "mtseq_translate",
        "mtseq_tag",
        "mtseq_eval_bleu_files",
        "mtseq_eval_tag_error_files",
        "typedef struct MtseqModel MtseqModel",
        "MTSEQ_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "mtseq.h"

int main(int argc, char **argv) {
    MtseqModel *model = NULL;
    if (mtseq_model_load(argv[1], &model) != MTSEQ_STATUS_OK) {
        fprintf(stderr, "%s\n", mtseq_last_error_message());
        return 1;
    }
    char *tags = NULL;
    if (mtseq_tag(model, NULL, NULL, "the cat sat", &tags) != MTSEQ_STATUS_OK) return 2;
    int spaces = 0;
    for (char *p = tags; *p; p++) spaces += *p == ' ';
    printf("%d\n", spaces + 1);
    mtseq_string_free(tags);
    MtseqModel *none = NULL;
    if (mtseq_model_load("/nonexistent", &none) != MTSEQ_STATUS_IO) return 3;
    if (mtseq_last_error_message() == NULL) return 4;
    mtseq_model_free(model);
    return 0;
}
"#;

/// `target/<profile>` of this test binary.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = profile_dir().join("libmtseq_ffi.a");
    let cc = Command::new("cc").arg("--version").output();
    if cc.is_err() || !lib.is_file() {
        eprintln!("skipped: needs cc and {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).arg(&model).output().unwrap();
    assert!(
        out.status.success(),
        "C program failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "3");
}
