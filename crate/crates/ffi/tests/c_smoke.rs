//! Compiles a small C program against the generated header and static
//! library, then runs it on a freshly saved checkpoint.

use std::path::PathBuf;
use std::process::Command;

use amtl::model::{ModelConfig, ModelState};
use amtl::vocab::Vocab;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "amtl.h"

int main(int argc, char **argv) {
    AmtlModel *m = NULL;
    if (amtl_model_load(argv[1], &m) != AMTL_STATUS_OK) {
        fprintf(stderr, "load: %s\n", amtl_last_error_message());
        return 10;
    }
    char *out = NULL;
    if (amtl_correct(m, "abcdefgh", 1, &out) != AMTL_STATUS_OK) return 11;
    if (strlen(out) == 0) return 12;
    amtl_string_free(out);
    double buf[8];
    size_t len = 0;
    if (amtl_score(m, "abcdefgh", buf, 8, &len) != AMTL_STATUS_OK || len != 8) return 13;
    if (amtl_correct(m, "a?c", 0, &out) != AMTL_STATUS_INVALID_INPUT) return 14;
    if (amtl_last_error_message() == NULL) return 15;
    amtl_model_free(m);
    printf("ok %s\n", amtl_version());
    return 0;
}
"#;

/// `cargo test` only refreshes the rlib, so build the static library here.
fn static_lib() -> PathBuf {
    let st = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "-p", "amtl-ffi", "--lib"])
        .status()
        .unwrap();
    assert!(st.success(), "cargo build of the static library failed");
    // target/<profile>/deps/<test-binary>
    let exe = std::env::current_exe().unwrap();
    let target = exe.parent().unwrap().parent().unwrap().parent().unwrap();
    target.join("debug").join("libamtl_ffi.a")
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn c_program_links_and_runs() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let lib = static_lib();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let st = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success(), "C compile failed");

    let vocab = Vocab::toy();
    let mut cfg = ModelConfig::new(vocab.size());
    cfg.layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn = 32;
    let ckpt = dir.path().join("m.ckpt");
    ModelState::new(cfg, vocab, 5).unwrap().save(&ckpt).unwrap();

    let out = Command::new(&bin).arg(&ckpt).output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), format!("ok {}", env!("CARGO_PKG_VERSION")));
}
