use std::ffi::{CStr, CString};
use std::ptr;

use wnet_core::data::checkpoint;
use wnet_core::data::synth::{generate_pair, ScenePairSpec};
use wnet_core::data::{PairImages, Split};
use wnet_core::nn::ParamSet;
use wnet_core::train::{self, Detector, TrainConfig};
use wnet_ffi::*;

fn last_error() -> String {
    let p = wnet_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let pairs: Vec<PairImages> = (0..3)
        .map(|i| {
            let p = generate_pair(&ScenePairSpec::new(32, i)).unwrap();
            PairImages {
                t1: p.t1,
                t2: p.t2,
                gt: p.gt,
                split: Split::Train,
            }
        })
        .collect();
    let cfg = TrainConfig {
        base_width: 0.0625,
        patch: Some(16),
        batch: 2,
        max_steps: Some(2),
        ..TrainConfig::default()
    };
    let out = train::train(&cfg, &pairs).unwrap();
    let mut params = ParamSet::new();
    for (name, t) in &out.checkpoint.tensors {
        params.push(name.clone(), t.clone());
    }
    let path = dir.join("tiny.cdck");
    checkpoint::save_checkpoint(&path, &out.checkpoint.meta, &params).unwrap();
    path
}

#[test]
fn detector_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut det: *mut WnetDetector = ptr::null_mut();
    assert_eq!(
        unsafe { wnet_detector_load(cpath.as_ptr(), 16, &mut det) },
        WnetStatus::Ok
    );
    assert!(!det.is_null());

    let scene = generate_pair(&ScenePairSpec::new(40, 9)).unwrap();
    let n = 40 * 40;
    let mut prob = vec![0f32; n];
    let mut mask = vec![7u8; n];
    let status = unsafe {
        wnet_detector_infer(
            det,
            scene.t1.as_raw().as_ptr(),
            scene.t2.as_raw().as_ptr(),
            40,
            40,
            8,
            0.5,
            prob.as_mut_ptr(),
            mask.as_mut_ptr(),
        )
    };
    assert_eq!(status, WnetStatus::Ok);

    let ck = checkpoint::load_checkpoint(&path).unwrap();
    let reference = train::infer_images(
        &Detector::from_checkpoint(&ck, 16).unwrap(),
        &scene.t1,
        &scene.t2,
        16,
        8,
        0.5,
    )
    .unwrap();
    for i in 0..n {
        assert_eq!(prob[i], reference.prob[i] as f32);
        assert_eq!(mask[i], if reference.binary[i] { 255 } else { 0 });
    }

    // Stride larger than the patch is rejected and the error is reported.
    let status = unsafe {
        wnet_detector_infer(
            det,
            scene.t1.as_raw().as_ptr(),
            scene.t2.as_raw().as_ptr(),
            40,
            40,
            32,
            0.5,
            prob.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, WnetStatus::InvalidArgument);
    assert!(last_error().contains("stride"));
    unsafe { wnet_detector_free(det) };
}

#[test]
fn load_failures_map_to_status_codes() {
    let mut det: *mut WnetDetector = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.cdck").unwrap();
    assert_eq!(
        unsafe { wnet_detector_load(missing.as_ptr(), 16, &mut det) },
        WnetStatus::Io
    );
    assert!(det.is_null());
    assert!(last_error().contains("/nonexistent/x.cdck"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cdck");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { wnet_detector_load(bad.as_ptr(), 16, &mut det) },
        WnetStatus::Checkpoint
    );
    assert_eq!(
        unsafe { wnet_detector_load(ptr::null(), 16, &mut det) },
        WnetStatus::NullPointer
    );
    assert_eq!(
        unsafe { wnet_detector_load(bad.as_ptr(), 16, ptr::null_mut()) },
        WnetStatus::NullPointer
    );
    unsafe { wnet_detector_free(ptr::null_mut()) };
}

#[test]
fn tile_plan_for_500_pixels() {
    let mut plan: *mut WnetTilePlan = ptr::null_mut();
    assert_eq!(
        unsafe { wnet_tile_plan_new(500, 500, 256, 128, &mut plan) },
        WnetStatus::Ok
    );
    assert_eq!(unsafe { wnet_tile_plan_len(plan) }, 9);
    let mut origins = Vec::new();
    for i in 0..9 {
        let (mut x, mut y) = (0usize, 0usize);
        assert_eq!(
            unsafe { wnet_tile_plan_origin(plan, i, &mut x, &mut y) },
            WnetStatus::Ok
        );
        origins.push((x, y));
    }
    let axis = [0, 128, 244];
    let expected: Vec<(usize, usize)> = axis.iter().flat_map(|&y| axis.iter().map(move |&x| (x, y))).collect();
    assert_eq!(origins, expected);
    let (mut x, mut y) = (0usize, 0usize);
    assert_eq!(
        unsafe { wnet_tile_plan_origin(plan, 9, &mut x, &mut y) },
        WnetStatus::InvalidArgument
    );
    unsafe { wnet_tile_plan_free(plan) };

    assert_eq!(
        unsafe { wnet_tile_plan_new(100, 100, 256, 128, &mut plan) },
        WnetStatus::InvalidArgument
    );
    assert_eq!(unsafe { wnet_tile_plan_len(ptr::null()) }, 0);
}

#[test]
fn confusion_and_rates() {
    let pred = [255u8, 255, 0, 0, 1, 0];
    let gt = [255u8, 0, 0, 255, 255, 0];
    let mut c = WnetConfusion::default();
    assert_eq!(
        unsafe { wnet_confusion(pred.as_ptr(), gt.as_ptr(), pred.len(), &mut c) },
        WnetStatus::Ok
    );
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 2, 1));

    let mut r = WnetRates::default();
    let counts = WnetConfusion {
        tp: 50,
        fp: 10,
        tn: 900,
        fn_: 40,
    };
    assert_eq!(unsafe { wnet_rates(&counts, &mut r) }, WnetStatus::Ok);
    assert!((r.kappa - 0.640805).abs() < 1e-6);
    assert!((r.mar - 40.0 / 90.0).abs() < 1e-15);

    let negatives = WnetConfusion {
        tp: 0,
        fp: 0,
        tn: 5,
        fn_: 0,
    };
    assert_eq!(unsafe { wnet_rates(&negatives, &mut r) }, WnetStatus::Ok);
    assert!(r.mar.is_nan() && r.kappa.is_nan());
    assert_eq!(r.far, 0.0);

    assert_eq!(unsafe { wnet_rates(ptr::null(), &mut r) }, WnetStatus::NullPointer);
    assert_eq!(
        unsafe { wnet_confusion(pred.as_ptr(), ptr::null(), 6, &mut c) },
        WnetStatus::NullPointer
    );
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/wnet_ffi.h")).unwrap();
    for symbol in [
        "WNET_STATUS_OK = 0",
        "WNET_STATUS_PANIC",
        "typedef struct WnetDetector WnetDetector;",
        "wnet_detector_load",
        "wnet_detector_infer",
        "wnet_tile_plan_origin",
        "wnet_rates",
        "wnet_last_error_message",
    ] {
        assert!(header.contains(symbol), "{symbol}");
    }
    let version = unsafe { CStr::from_ptr(wnet_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
