use std::ffi::{c_char, CString};
use std::ptr;

use terragen::diffusion::{Model, ModelConfig};
use terragen::layout::{write_layout, BBox, CategoryId, Layout, LayoutEntity, TaskId};
use terragen_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { tg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.unet.image_size = 16;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_mults = vec![1, 2];
    cfg.unet.injection_resolutions = vec![8, 4];
    cfg.encoder.dim = 16;
    cfg.encoder.fusion_key_dim = 4;
    cfg.encoder.mask_channels = [4, 8, 8, 16];
    cfg.unet.cond_dim = 16;
    cfg.unet.time_dim = 16;
    cfg
}

#[test]
fn null_arguments_are_reported() {
    let mut out: *mut TgModel = ptr::null_mut();
    assert_eq!(unsafe { tg_model_load(ptr::null(), &mut out) }, TgStatus::NullArgument);
    assert!(last_error().contains("path"));
    let mut n = 0usize;
    assert_eq!(unsafe { tg_layout_entity_count(ptr::null(), &mut n) }, TgStatus::NullArgument);
}

#[test]
fn missing_files_are_data_errors() {
    let p = CString::new("/nonexistent/terragen/layout.json").unwrap();
    let mut out: *mut TgLayout = ptr::null_mut();
    assert_eq!(unsafe { tg_layout_read(p.as_ptr(), &mut out) }, TgStatus::Data);
    assert!(out.is_null());
    assert!(last_error().contains("nonexistent"));
}

#[test]
fn layout_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.json");
    let e = LayoutEntity::with_box(CategoryId::VEHICLE, BBox::new(0.1, 0.1, 0.4, 0.3).unwrap());
    write_layout(&path, &Layout::new(TaskId::Detection, vec![e.clone(), e])).unwrap();
    let mut l: *mut TgLayout = ptr::null_mut();
    assert_eq!(unsafe { tg_layout_read(cstr(&path).as_ptr(), &mut l) }, TgStatus::Ok);
    let (mut n, mut issues) = (0usize, 0usize);
    unsafe {
        assert_eq!(tg_layout_entity_count(l, &mut n), TgStatus::Ok);
        assert_eq!(tg_layout_validate(l, &mut issues), TgStatus::Ok);
        tg_layout_free(l);
    }
    assert_eq!(n, 2);
    assert_eq!(issues, 1, "identical same-category boxes overlap");
}

#[test]
fn sampling_through_the_abi_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    Model::new(tiny_model()).unwrap().save(&ckpt, &[], serde_json::json!({})).unwrap();
    let lpath = dir.path().join("l.json");
    let e = LayoutEntity::with_box(CategoryId::BUILDING, BBox::new(0.25, 0.25, 0.75, 0.5).unwrap());
    write_layout(&lpath, &Layout::new(TaskId::BuildingExtraction, vec![e])).unwrap();

    let mut m: *mut TgModel = ptr::null_mut();
    let mut l: *mut TgLayout = ptr::null_mut();
    unsafe {
        assert_eq!(tg_model_load(cstr(&ckpt).as_ptr(), &mut m), TgStatus::Ok, "{}", last_error());
        assert_eq!(tg_layout_read(cstr(&lpath).as_ptr(), &mut l), TgStatus::Ok);
        let (mut c, mut h, mut w) = (0, 0, 0);
        assert_eq!(tg_model_shape(m, &mut c, &mut h, &mut w), TgStatus::Ok);
        assert_eq!((c, h, w), (3, 16, 16));
        let mut small = vec![0u8; 10];
        assert_eq!(tg_sample(m, l, 4, 2.0, 7, small.as_mut_ptr(), small.len()), TgStatus::BufferTooSmall);
        let mut a = vec![0u8; c * h * w];
        let mut b = vec![0u8; c * h * w];
        assert_eq!(tg_sample(m, l, 4, 2.0, 7, a.as_mut_ptr(), a.len()), TgStatus::Ok);
        assert_eq!(tg_sample(m, l, 4, 2.0, 7, b.as_mut_ptr(), b.len()), TgStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(tg_sample(m, l, 0, 2.0, 7, a.as_mut_ptr(), a.len()), TgStatus::Config);
        tg_layout_free(l);
        tg_model_free(m);
    }
}

#[test]
fn dataset_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut n = 0usize;
    let status = unsafe { tg_generate_dataset(cstr(dir.path()).as_ptr(), 3, 4, 1, 2, &mut n) };
    assert_eq!(status, TgStatus::Ok);
    assert_eq!(n, 7);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn fid_scalar_case() {
    let (mr, cr, mg, cg) = ([0.0], [1.0], [3.0], [1.0]);
    let mut out = 0.0;
    let status = unsafe { tg_fid(mr.as_ptr(), cr.as_ptr(), mg.as_ptr(), cg.as_ptr(), 1, &mut out) };
    assert_eq!(status, TgStatus::Ok);
    assert!((out - 9.0).abs() < 1e-10);
    let bad = [-1.0];
    let status = unsafe { tg_fid(mr.as_ptr(), bad.as_ptr(), mg.as_ptr(), cg.as_ptr(), 1, &mut out) };
    assert_eq!(status, TgStatus::Config);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/terragen.h")).unwrap();
    for name in [
        "tg_last_error_message",
        "tg_model_load",
        "tg_model_free",
        "tg_model_shape",
        "tg_layout_read",
        "tg_layout_free",
        "tg_layout_validate",
        "tg_sample",
        "tg_generate_dataset",
        "tg_fid",
        "TG_STATUS_BUFFER_TOO_SMALL",
        "typedef struct TgModel TgModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which("cc") else { return };
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/terragen.h");
    let out = std::process::Command::new(cc).args(["-fsyntax-only", "-x", "c", "-std=c99", header]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which(bin: &str) -> Result<std::path::PathBuf, ()> {
    std::env::var_os("PATH")
        .and_then(|p| std::env::split_paths(&p).map(|d| d.join(bin)).find(|c| c.exists()))
        .ok_or(())
}
