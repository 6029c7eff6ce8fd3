use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use varhorizon::diffusion::{DenoiserArch, Planner, PlannerTrainCfg};
use varhorizon::lp::{LpArch, LpModel};
use varhorizon_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vh_last_error()) }.to_string_lossy().into_owned()
}

fn umaze() -> *mut VhMaze {
    let name = CString::new("umaze").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vh_maze_builtin(name.as_ptr(), &mut m) }, VhStatus::Ok);
    assert!(!m.is_null());
    m
}

fn tiny_planner(dir: &Path) -> CString {
    let cfg = PlannerTrainCfg {
        arch: DenoiserArch {
            channels: 8,
            blocks: 1,
            groups: 2,
            time_dim: 8,
            ..Default::default()
        },
        t_diff: 5,
        ..Default::default()
    };
    let path = dir.join("p.vhdc");
    Planner::new(cfg).unwrap().save(&path, None).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn tiny_lp(dir: &Path) -> CString {
    let path = dir.join("lp.vhdc");
    LpModel::new(LpArch {
        rff_features: 4,
        hidden: 8,
        depth: 1,
        ..Default::default()
    })
    .save(&path, None)
    .unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn maze_queries_and_errors() {
    let m = umaze();
    let (mut rows, mut cols) = (0usize, 0usize);
    unsafe {
        assert_eq!(vh_maze_dims(m, &mut rows, &mut cols), VhStatus::Ok);
        assert_eq!((rows, cols), (30, 30));
        let mut free = true;
        assert_eq!(vh_maze_is_free(m, 0.0, 0.0, &mut free), VhStatus::Ok);
        assert!(!free);
        assert_eq!(vh_maze_is_free(m, 3.6, 3.6, &mut free), VhStatus::Ok);
        assert!(free);

        let s = [3.6, 3.6, 0.0, 0.0];
        let a = [40.0, 0.0];
        let mut out = [0.0; 4];
        assert_eq!(vh_maze_step(m, s.as_ptr(), a.as_ptr(), out.as_mut_ptr()), VhStatus::Ok);
        assert!(out[2] > 0.0 && out[0] > 3.6);

        let mut k = 0i64;
        let g = [3.6, 3.6, 0.0, 0.0];
        assert_eq!(vh_oracle_steps(m, s.as_ptr(), g.as_ptr(), 0.04, 192, &mut k), VhStatus::Ok);
        assert_eq!(k, 0);
        let far = [3.6, 8.4, 0.0, 0.0];
        assert_eq!(vh_oracle_steps(m, s.as_ptr(), far.as_ptr(), 0.04, 3, &mut k), VhStatus::Ok);
        assert_eq!(k, 3);

        assert_eq!(vh_maze_dims(ptr::null(), &mut rows, &mut cols), VhStatus::NullPointer);
        assert!(last_error().contains("maze"));
        let nan = [f64::NAN, 0.0, 0.0, 0.0];
        assert_eq!(vh_maze_step(m, nan.as_ptr(), a.as_ptr(), out.as_mut_ptr()), VhStatus::Numerical);
        assert_eq!(vh_oracle_steps(m, s.as_ptr(), g.as_ptr(), 0.0, 5, &mut k), VhStatus::InvalidArgument);

        let bad = CString::new("nowhere").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(vh_maze_builtin(bad.as_ptr(), &mut h), VhStatus::InvalidArgument);
        assert!(h.is_null());
        assert!(last_error().contains("nowhere"));
        let text = CString::new("###\n#.#\n###\n").unwrap();
        assert_eq!(vh_maze_parse(text.as_ptr(), 1.0, &mut h), VhStatus::Ok);
        assert_eq!(last_error(), "");
        vh_maze_free(h);
        let split = CString::new("#####\n#.#.#\n#####\n").unwrap();
        assert_eq!(vh_maze_parse(split.as_ptr(), 1.0, &mut h), VhStatus::Ok);
        let (l, r) = ([1.5, 1.5, 0.0, 0.0], [3.5, 1.5, 0.0, 0.0]);
        assert_eq!(vh_oracle_steps(h, l.as_ptr(), r.as_ptr(), 0.04, 1000, &mut k), VhStatus::Ok);
        assert_eq!(k, -1);
        vh_maze_free(h);
        vh_maze_free(m);
        vh_maze_free(ptr::null_mut());
    }
}

#[test]
fn planner_and_lp_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let m = umaze();
    let (pp, lpp) = (tiny_planner(dir.path()), tiny_lp(dir.path()));
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(vh_planner_load(pp.as_ptr(), &mut p), VhStatus::Ok);
        let (mut lo, mut hi) = (0, 0);
        assert_eq!(vh_planner_bounds(p, &mut lo, &mut hi), VhStatus::Ok);
        assert_eq!((lo, hi), (16, 192));

        let s = [3.6, 3.6, 0.0, 0.0];
        let g = [8.4, 3.6, 0.0, 0.0];
        let len = 20;
        let mut buf = vec![0.0; 4 * len];
        assert_eq!(
            vh_planner_plan(p, m, s.as_ptr(), g.as_ptr(), len, 3, buf.as_mut_ptr(), buf.len()),
            VhStatus::Ok
        );
        assert!(buf.iter().all(|v| v.is_finite()));
        for i in 0..2 {
            assert!((buf[i] - s[i]).abs() < 1e-5);
            assert!((buf[4 * (len - 1) + i] - g[i]).abs() < 1e-5);
        }
        let mut again = vec![0.0; 4 * len];
        vh_planner_plan(p, m, s.as_ptr(), g.as_ptr(), len, 3, again.as_mut_ptr(), again.len());
        assert_eq!(buf, again);
        assert_eq!(
            vh_planner_plan(p, m, s.as_ptr(), g.as_ptr(), len, 3, buf.as_mut_ptr(), 4),
            VhStatus::BufferTooSmall
        );
        vh_planner_free(p);

        let mut lp = ptr::null_mut();
        assert_eq!(vh_lp_load(lpp.as_ptr(), &mut lp), VhStatus::Ok);
        let (mut d, mut h) = (-1.0, 0usize);
        assert_eq!(vh_lp_predict(lp, m, s.as_ptr(), g.as_ptr(), 1.15, &mut d, &mut h), VhStatus::Ok);
        assert!((0.0..=1.5).contains(&d));
        assert!((16..=192).contains(&h));
        assert_eq!(vh_lp_predict(lp, m, s.as_ptr(), g.as_ptr(), -1.0, &mut d, &mut h), VhStatus::InvalidArgument);
        vh_lp_free(lp);

        let missing = CString::new(dir.path().join("none.vhdc").to_str().unwrap()).unwrap();
        let mut q = ptr::null_mut();
        assert_eq!(vh_planner_load(missing.as_ptr(), &mut q), VhStatus::Io);
        assert!(q.is_null());
        vh_maze_free(m);
    }
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/varhorizon.h");
    assert!(header.exists());
    // Build the static library in its own target dir so the artifact always
    // matches the current sources and the outer cargo lock is not contended.
    let target = crate_dir.join("../../target/c-abi-test");
    let status = Command::new(env!("CARGO"))
        .args(["build", "--release", "-p", "varhorizon-ffi", "--target-dir"])
        .arg(&target)
        .status()
        .unwrap();
    assert!(status.success(), "building the static library failed");
    let lib = target.join("release/libvarhorizon_ffi.a");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "varhorizon.h"
#include <stdio.h>
int main(void) {
    VhMaze *m = NULL;
    if (vh_maze_builtin("umaze", &m) != VH_STATUS_OK) return 1;
    size_t r = 0, c = 0;
    if (vh_maze_dims(m, &r, &c) != VH_STATUS_OK || r != 30 || c != 30) return 2;
    VhMaze *bad = NULL;
    if (vh_maze_builtin("nope", &bad) != VH_STATUS_INVALID_ARGUMENT) return 3;
    if (vh_last_error()[0] == '\0') return 4;
    vh_maze_free(m);
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
