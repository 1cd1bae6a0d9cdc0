use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use heightpipe_ffi::*;

fn new_raster(h: usize, w: usize, c: usize, data: &[f32]) -> *mut HpRaster {
    let mut out = ptr::null_mut();
    let st = unsafe { hp_raster_new(h, w, c, 1.0, data.as_ptr(), &mut out) };
    assert_eq!(st, HpStatus::Ok);
    out
}

fn values(r: *const HpRaster) -> Vec<f32> {
    let (mut h, mut w, mut c, mut g) = (0, 0, 0, 0.0);
    unsafe {
        assert_eq!(hp_raster_shape(r, &mut h, &mut w, &mut c, &mut g), HpStatus::Ok);
        std::slice::from_raw_parts(hp_raster_data(r), h * w * c).to_vec()
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hp_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn raster_roundtrip_through_hmap() {
    let data: Vec<f32> = (0..24).map(|v| v as f32 * 0.5).collect();
    let r = new_raster(2, 4, 3, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("x.hmap"));
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(hp_hmap_write_raster(r, path.as_ptr()), HpStatus::Ok);
        assert_eq!(hp_hmap_read_raster(path.as_ptr(), &mut back), HpStatus::Ok);
    }
    assert_eq!(values(back), data);
    unsafe {
        hp_raster_free(r);
        hp_raster_free(back);
        hp_raster_free(ptr::null_mut());
    }
}

#[test]
fn labels_roundtrip_and_buffer_check() {
    let labels: Vec<u16> = vec![0, 1, 2, 1, 0, 2];
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("l.hmap"));
    let mut buf = [9u16; 6];
    let (mut h, mut w) = (0, 0);
    unsafe {
        assert_eq!(hp_hmap_write_labels(labels.as_ptr(), 2, 3, 3, 0.5, path.as_ptr()), HpStatus::Ok);
        assert_eq!(
            hp_hmap_read_labels(path.as_ptr(), 3, buf.as_mut_ptr(), 6, &mut h, &mut w),
            HpStatus::Ok
        );
        assert_eq!(
            hp_hmap_read_labels(path.as_ptr(), 3, buf.as_mut_ptr(), 5, &mut h, &mut w),
            HpStatus::InvalidArgument
        );
    }
    assert_eq!((h, w), (2, 3));
    assert_eq!(buf.to_vec(), labels);
}

#[test]
fn errors_set_status_and_message() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(hp_raster_new(2, 2, 1, 1.0, ptr::null(), &mut out), HpStatus::NullPointer);
        assert!(last_error().contains("null"));
        let missing = CString::new("/nonexistent/dir/file.hmap").unwrap();
        assert_eq!(hp_hmap_read_raster(missing.as_ptr(), &mut out), HpStatus::Io);
        assert!(!last_error().is_empty());
        assert_eq!(hp_gaussian_window(0, 1.0, &mut out), HpStatus::InvalidArgument);
        assert_eq!(hp_surface_normals(ptr::null(), 0, false, &mut out), HpStatus::NullPointer);
    }
    assert!(out.is_null());
}

#[test]
fn flat_normals_in_both_encodings() {
    let h = new_raster(4, 4, 1, &[2.0; 16]);
    for (enc, want) in [(0u32, [1.0f32, 1.0, 1.5]), (1, [0.5, 0.5, 1.0])] {
        let mut n = ptr::null_mut();
        unsafe { assert_eq!(hp_surface_normals(h, enc, false, &mut n), HpStatus::Ok) };
        for px in values(n).chunks(3) {
            assert_eq!(px, want);
        }
        unsafe { hp_raster_free(n) };
    }
    let mut n = ptr::null_mut();
    unsafe {
        assert_eq!(hp_surface_normals(h, 7, false, &mut n), HpStatus::InvalidArgument);
        hp_raster_free(h);
    }
}

#[test]
fn stitch_reassembles_tile_and_reports_gaps() {
    let full: Vec<f32> = (0..100).map(|v| (v % 13) as f32).collect();
    let mut weights = ptr::null_mut();
    unsafe { assert_eq!(hp_gaussian_window(6, 1.5, &mut weights), HpStatus::Ok) };
    let origins = [0usize, 4];
    let mut crops = Vec::new();
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    for &r in &origins {
        for &c in &origins {
            let d: Vec<f32> = (0..36).map(|i| full[(r + i / 6) * 10 + c + i % 6]).collect();
            crops.push(new_raster(6, 6, 1, &d) as *const HpRaster);
            rows.push(r);
            cols.push(c);
        }
    }
    let mut out = ptr::null_mut();
    unsafe {
        let st = hp_stitch(crops.as_ptr(), rows.as_ptr(), cols.as_ptr(), 4, weights, 10, 10, &mut out);
        assert_eq!(st, HpStatus::Ok, "{}", last_error());
    }
    let got = values(out);
    assert!(got.iter().zip(&full).all(|(a, b)| (a - b).abs() < 1e-6));
    let mut gap = ptr::null_mut();
    unsafe {
        let st = hp_stitch(crops.as_ptr(), rows.as_ptr(), cols.as_ptr(), 1, weights, 10, 10, &mut gap);
        assert_eq!(st, HpStatus::CoverageGap);
        for c in crops {
            hp_raster_free(c as *mut HpRaster);
        }
        hp_raster_free(out);
        hp_raster_free(weights);
    }
}

#[test]
fn metrics_match_hand_values() {
    let p = new_raster(1, 4, 1, &[1.0, 2.0, 3.0, 4.0]);
    let t = new_raster(1, 4, 1, &[1.0, 2.0, 3.0, 6.0]);
    let mut m = HpHeightMetrics::default();
    unsafe { assert_eq!(hp_height_metrics(p, t, &mut m), HpStatus::Ok) };
    assert_eq!((m.mse, m.mae, m.rmse), (1.0, 0.5, 1.0));

    // confusion [[2,1],[1,2]]: oa 2/3, pe 1/2, kappa 1/3
    let truth = [0u16, 0, 0, 1, 1, 1];
    let pred = [0u16, 0, 1, 0, 1, 1];
    let mut s = HpSemanticMetrics::default();
    unsafe { assert_eq!(hp_semantic_metrics(pred.as_ptr(), truth.as_ptr(), 6, 2, &mut s), HpStatus::Ok) };
    assert!((s.kappa - 1.0 / 3.0).abs() < 1e-12);
    assert!((s.oa - 2.0 / 3.0).abs() < 1e-12);
    unsafe {
        hp_raster_free(p);
        hp_raster_free(t);
    }
}

#[test]
fn synth_and_ply_exports() {
    let size = 40;
    let (mut rgb, mut height) = (ptr::null_mut(), ptr::null_mut());
    let mut labels = vec![0u16; size * size];
    unsafe {
        assert_eq!(hp_synth_city(3, size, 6, &mut rgb, &mut height, labels.as_mut_ptr()), HpStatus::Ok);
    }
    assert!(labels.iter().all(|&l| l < 6));
    assert_eq!(values(rgb).len(), size * size * 3);
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c.ply");
    let mesh = dir.path().join("m.ply");
    unsafe {
        assert_eq!(hp_write_cloud_ply(height, rgb, cpath(&cloud).as_ptr(), true), HpStatus::Ok);
        assert_eq!(hp_write_mesh_ply(height, ptr::null(), cpath(&mesh).as_ptr(), false), HpStatus::Ok);
        hp_raster_free(rgb);
        hp_raster_free(height);
    }
    let c = height_pipeline::recon3d::read_ply(&cloud).unwrap();
    assert_eq!(c.cloud.len(), size * size);
    assert!(c.cloud.colors.is_some());
    let m = height_pipeline::recon3d::read_ply(&mesh).unwrap();
    assert_eq!(m.faces.len(), 2 * (size - 1) * (size - 1));
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(crate_dir().join("include/heightpipe.h")).unwrap();
    for name in [
        "typedef struct HpRaster HpRaster",
        "HP_STATUS_OK = 0",
        "hp_last_error",
        "hp_raster_new",
        "hp_raster_free",
        "hp_hmap_read_raster",
        "hp_surface_normals",
        "hp_stitch",
        "hp_height_metrics",
        "hp_semantic_metrics",
        "hp_synth_city",
        "hp_write_mesh_ply",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles a small C program against the generated header and the cdylib.
#[test]
fn c_program_links_and_runs() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib_dir = deps.parent().unwrap().to_path_buf();
    if !lib_dir.join("libheightpipe_ffi.so").exists() {
        eprintln!("cdylib not found in {}; skipping", lib_dir.display());
        return;
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "heightpipe.h"
int main(void) {
    float flat[16];
    for (int i = 0; i < 16; ++i) flat[i] = 3.0f;
    HpRaster *h = NULL, *n = NULL;
    if (hp_raster_new(4, 4, 1, 1.0f, flat, &h) != HP_STATUS_OK) return 1;
    if (hp_surface_normals(h, 0, false, &n) != HP_STATUS_OK) return 2;
    const float *v = hp_raster_data(n);
    if (v[2] != 1.5f) return 3;
    hp_raster_free(n);
    n = NULL;
    if (hp_gaussian_window(0, 1.0, &n) != HP_STATUS_INVALID_ARGUMENT) return 4;
    printf("%s\n", hp_last_error());
    hp_raster_free(h);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lheightpipe_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(!out.stdout.is_empty());
}
