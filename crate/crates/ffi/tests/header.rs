//! The generated header declares the exported API and compiles as C.

use std::path::PathBuf;
use std::process::Command;

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("truebrief.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let lib = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = lib
        .lines()
        .filter_map(|l| {
            l.trim()
                .strip_prefix("pub unsafe extern \"C\" fn ")
                .or_else(|| l.trim().strip_prefix("pub extern \"C\" fn "))
        })
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    for item in [
        "TB_STATUS_OK",
        "TB_LOSS_PL_DPO",
        "typedef struct TbModel TbModel",
        "typedef struct TbDetector TbDetector",
    ] {
        assert!(text.contains(item), "{item}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let Some(lib) = [deps, deps.parent().unwrap()]
        .iter()
        .map(|d| d.join("libtruebrief_ffi.a"))
        .find(|p| p.exists())
    else {
        eprintln!("static library not built; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <math.h>
#include <stdio.h>
#include "truebrief.h"
int main(void) {
    double p[4] = {-1.0, -2.0, -3.0, -4.0};
    double loss = 0.0;
    if (tb_preference_loss(TB_LOSS_PL_DPO, 0.5, 4, 1, p, p, &loss) != TB_STATUS_OK) return 1;
    if (fabs(loss - log(4.0)) > 1e-9) return 2;
    if (tb_preference_loss(TB_LOSS_DPO, 0.5, 2, 1, p, p, NULL) != TB_STATUS_NULL_POINTER) return 3;
    char msg[64];
    if (tb_last_error(msg, sizeof msg) < 2) return 4;
    TbModel *m = NULL;
    if (tb_model_new(1, 2, 16, 64, 1, &m) != TB_STATUS_OK) return 5;
    char *out = NULL;
    if (tb_model_generate(m, "Hi", 3, &out) != TB_STATUS_OK) return 6;
    tb_string_free(out);
    tb_model_free(m);
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
