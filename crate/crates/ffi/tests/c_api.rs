use std::ffi::{CStr, CString};
use std::ptr;

use modelbridge::bridge::{init_bridge, InitStrategy, PoolKind};
use modelbridge::model::{predict, Architecture, BridgeRecord, EncoderModel, ModelCheckpoint, TaskHead};
use modelbridge::transfer::{bridge_spec_for, bridged_predict, Positions};
use modelbridge::Tensor;
use modelbridge_ffi::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let p = mb_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    teacher_path: CString,
    bridge_path: CString,
    teacher: EncoderModel,
    head: TaskHead,
    student: EncoderModel,
    ck: BridgeRecord,
}

fn fixture() -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let teacher = EncoderModel::build(Architecture::Conv, "old", (16, 2), &mut r).unwrap();
    let student = EncoderModel::build(Architecture::Attention, "new", (12, 3), &mut r).unwrap();
    let (_, d) = teacher.shape_after(teacher.layer_count()).unwrap();
    let head = TaskHead::new(d, 3, 0.5, &mut r);
    let positions = Positions { m: 2, l: 3 };
    let spec = bridge_spec_for(&student, &teacher, positions, 4, 5).unwrap();
    let bridge = init_bridge(spec, InitStrategy::Random, PoolKind::Mean, None, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tp = dir.path().join("teacher.ckpt");
    let bp = dir.path().join("bridge.ckpt");
    ModelCheckpoint::new(teacher.clone(), Some(head.clone())).save(&tp).unwrap();
    let rec = BridgeRecord {
        bridge,
        input_position: positions.m,
        output_position: positions.l,
    };
    let mut ck = ModelCheckpoint::new(student.clone(), None);
    ck.bridge = Some(rec.clone());
    ck.save(&bp).unwrap();
    Fixture {
        teacher_path: CString::new(tp.to_str().unwrap()).unwrap(),
        bridge_path: CString::new(bp.to_str().unwrap()).unwrap(),
        _dir: dir,
        teacher,
        head,
        student,
        ck: rec,
    }
}

#[test]
fn status_codes_are_stable() {
    assert_eq!(MbStatus::Ok as i32, 0);
    assert_eq!(MbStatus::NullPointer as i32, 1);
    assert_eq!(MbStatus::InvalidArgument as i32, 2);
    assert_eq!(MbStatus::Config as i32, 3);
    assert_eq!(MbStatus::Training as i32, 4);
    assert_eq!(MbStatus::Io as i32, 5);
    assert_eq!(MbStatus::Panic as i32, 6);
}

#[test]
fn cka_matches_library_and_rejects_nulls() {
    let x = [1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 2.0, 2.0];
    let y = [0.3, -0.2, 1.5, 0.7];
    let mut v = 0.0;
    let s = unsafe { mb_cka_linear(x.as_ptr(), y.as_ptr(), 4, 2, 1, &mut v) };
    assert_eq!(s, MbStatus::Ok);
    assert!(mb_last_error_message().is_null());
    let rx = modelbridge::cka::RepresentationMatrix::new(Tensor::new(vec![4, 2], x.to_vec()).unwrap(), 0, "x").unwrap();
    let ry = modelbridge::cka::RepresentationMatrix::new(Tensor::new(vec![4, 1], y.to_vec()).unwrap(), 0, "y").unwrap();
    assert_eq!(v, modelbridge::cka::cka_linear(&rx, &ry).unwrap());

    let s = unsafe { mb_cka_linear(ptr::null(), y.as_ptr(), 4, 2, 1, &mut v) };
    assert_eq!(s, MbStatus::NullPointer);
    assert!(last_error().contains("x is null"));
    let s = unsafe { mb_cka_linear(x.as_ptr(), y.as_ptr(), 1, 2, 1, &mut v) };
    assert_eq!(s, MbStatus::InvalidArgument);
}

#[test]
fn metrics_hand_case() {
    let t = [0u32, 0, 1, 1];
    let p = [0u32, 1, 1, 1];
    let mut m = MbMetrics::default();
    assert_eq!(unsafe { mb_metrics(t.as_ptr(), p.as_ptr(), 4, 2, &mut m) }, MbStatus::Ok);
    assert_eq!(m.balanced_accuracy, 0.75);
    assert!((m.f1_macro - 0.7333).abs() < 1e-4);
    let bad = [0u32, 7, 1, 1];
    assert_eq!(unsafe { mb_metrics(t.as_ptr(), bad.as_ptr(), 4, 2, &mut m) }, MbStatus::InvalidArgument);
}

#[test]
fn model_handle_predicts_like_the_library() {
    let f = fixture();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mb_model_load(f.teacher_path.as_ptr(), &mut h) }, MbStatus::Ok);
    let (mut t, mut c, mut l) = (0, 0, 0);
    assert_eq!(unsafe { mb_model_info(h, &mut t, &mut c, &mut l) }, MbStatus::Ok);
    assert_eq!((t, c, l), (16, 2, f.teacher.layer_count()));

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[5, 16, 2], 1.0, &mut r);
    let mut out = vec![0.0; 15];
    let s = unsafe { mb_model_predict(h, x.data().as_ptr(), x.len(), 5, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, MbStatus::Ok);
    assert_eq!(out, predict(&f.teacher, &f.head, &x).unwrap().data());

    let s = unsafe { mb_model_predict(h, x.data().as_ptr(), x.len(), 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, MbStatus::InvalidArgument);
    let s = unsafe { mb_model_predict(h, x.data().as_ptr(), x.len(), 5, out.as_mut_ptr(), 3) };
    assert_eq!(s, MbStatus::InvalidArgument);
    assert!(last_error().contains("need 15"));
    unsafe { mb_model_free(h) };
    unsafe { mb_model_free(ptr::null_mut()) };
}

#[test]
fn bridged_handle_predicts_like_the_library() {
    let f = fixture();
    let mut h = ptr::null_mut();
    let s = unsafe { mb_bridged_load(f.teacher_path.as_ptr(), f.bridge_path.as_ptr(), &mut h) };
    assert_eq!(s, MbStatus::Ok, "{}", last_error());
    let (mut m, mut l, mut n) = (0, 0, 0);
    assert_eq!(unsafe { mb_bridged_info(h, &mut m, &mut l, &mut n) }, MbStatus::Ok);
    assert_eq!((m, l, n), (2, 3, f.ck.bridge.param_count()));

    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[4, 12, 3], 1.0, &mut r);
    let mut out = vec![0.0; 12];
    let s = unsafe { mb_bridged_predict(h, x.data().as_ptr(), x.len(), 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, MbStatus::Ok);
    let positions = Positions { m: 2, l: 3 };
    let want = bridged_predict(&f.teacher, &f.student, &f.head, &f.ck.bridge, positions, &x).unwrap();
    assert_eq!(out, want.data());
    unsafe { mb_bridged_free(h) };
}

#[test]
fn bridged_load_needs_a_bridge_section() {
    let f = fixture();
    let mut h = ptr::null_mut();
    let s = unsafe { mb_bridged_load(f.teacher_path.as_ptr(), f.teacher_path.as_ptr(), &mut h) };
    assert_eq!(s, MbStatus::InvalidArgument);
    assert!(h.is_null());
    assert!(last_error().contains("no bridge section"));
}

#[test]
fn missing_file_is_an_io_error() {
    let path = CString::new("/nonexistent/teacher.ckpt").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mb_model_load(path.as_ptr(), &mut h) }, MbStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("/nonexistent/teacher.ckpt"));
}

#[test]
fn experiment_returns_report_or_config_error() {
    let bad = CString::new("[experiment]\nno_such_key = 1\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mb_run_experiment(bad.as_ptr(), &mut out) }, MbStatus::Config);
    assert!(out.is_null());

    let cfg = CString::new(
        "[data]\nsamples_per_subject = 30\nsubjects = 6\n[pretrain]\nteacher_epochs = 2\nfoundation_epochs = 1\n\
         foundation_subjects = 2\n[bridge]\nepochs = 2\n[experiment]\nseeds = 1\nmethods = [\"bridge\", \"random\"]\n",
    )
    .unwrap();
    let s = unsafe { mb_run_experiment(cfg.as_ptr(), &mut out) };
    assert_eq!(s, MbStatus::Ok, "{}", last_error());
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { mb_string_free(out) };
    assert!(json.contains("\"bridge\""));
    assert!(json.contains("balanced_accuracy"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/modelbridge.h")).unwrap();
    for name in [
        "MB_STATUS_OK",
        "MB_STATUS_PANIC",
        "typedef struct MbModel MbModel",
        "typedef struct MbBridgedModel MbBridgedModel",
        "mb_last_error_message",
        "mb_cka_linear",
        "mb_metrics",
        "mb_model_load",
        "mb_bridged_predict",
        "mb_run_experiment",
        "mb_string_free",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
