use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use vitguard::config::PipelineConfig;
use vitguard::data::{Split, SyntheticSpec};
use vitguard::detectors::{joint_detect, Feature};
use vitguard::mae::{MaeConfig, MaeModel};
use vitguard::pipeline::calibrate_models;
use vitguard::rng;
use vitguard::vit::{predict_one, ClassifierModel, ModelConfig};
use vitguard_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    vit: CString,
    mae: CString,
    calibration: CString,
    model: ClassifierModel,
    mae_model: MaeModel,
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let model = ClassifierModel::init(ModelConfig::default(), 1).unwrap();
    let mae_model = MaeModel::init(MaeConfig::default(), 2).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.detector.layer = Some(1);
    cfg.detector.calibration_samples = Some(40);
    let validation = SyntheticSpec::default()
        .generate(Split::Validation, 0)
        .unwrap()
        .take(40);
    let artifact = calibrate_models(&cfg, "", &model, &mae_model, &validation).unwrap();
    let (v, m, c) = (
        dir.path().join("vit.ckpt"),
        dir.path().join("mae.ckpt"),
        dir.path().join("calibration.json"),
    );
    model.save(&v).unwrap();
    mae_model.save(&m).unwrap();
    artifact.save(&c).unwrap();
    Fixture {
        vit: cpath(&v),
        mae: cpath(&m),
        calibration: cpath(&c),
        _dir: dir,
        model,
        mae_model,
    }
}

fn last_error() -> String {
    let p = vg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn detect_matches_library() {
    let f = fixture();
    let (mut vit, mut mae, mut det) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(vg_classifier_load(f.vit.as_ptr(), &mut vit), VgStatus::Ok);
        assert_eq!(vg_mae_load(f.mae.as_ptr(), &mut mae), VgStatus::Ok);
        assert_eq!(
            vg_detector_load(f.calibration.as_ptr(), 0.05, &mut det),
            VgStatus::Ok
        );

        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(
            vg_classifier_geometry(vit, &mut h, &mut w, &mut c),
            VgStatus::Ok
        );
        assert_eq!((h, w, c), (16, 16, 1));
        let mut layer = 0;
        assert_eq!(vg_detector_layer(det, &mut layer), VgStatus::Ok);
        assert_eq!(layer, 1);

        let artifact = vitguard::detectors::CalibrationArtifact::load(Path::new(
            f.calibration.to_str().unwrap(),
        ))
        .unwrap();
        let (di, dii) = (
            artifact.detector(Feature::Attention, 0.05).unwrap(),
            artifact.detector(Feature::Cls, 0.05).unwrap(),
        );
        for i in 0..5 {
            let (x, _) = SyntheticSpec::default().sample(Split::Test, i, 0);
            let px = x.as_slice();
            let mut label = usize::MAX;
            assert_eq!(
                vg_classifier_predict(vit, px.as_ptr(), px.len(), &mut label),
                VgStatus::Ok
            );
            assert_eq!(label, predict_one(&f.model, &x).unwrap());

            let mut v = VgVerdict::default();
            assert_eq!(
                vg_detect(det, vit, mae, px.as_ptr(), px.len(), 9, &mut v),
                VgStatus::Ok
            );
            let expected = joint_detect(
                &x,
                &f.model,
                &f.mae_model,
                &di,
                &dii,
                &mut rng::stream(9, 0),
            )
            .unwrap();
            assert_eq!(v.d_attn, expected.d_attn.unwrap());
            assert_eq!(v.d_cls, expected.d_cls.unwrap());
            assert_eq!(v.adversarial, expected.adversarial);
            assert_eq!(v.adversarial, v.attn_fired || v.cls_fired);
            assert_eq!(v.attn_fired, v.d_attn > v.tau_attn);
        }

        vg_detector_free(det);
        vg_mae_free(mae);
        vg_classifier_free(vit);
    }
}

#[test]
fn errors_are_reported() {
    let f = fixture();
    unsafe {
        let mut vit = ptr::null_mut();
        assert_eq!(
            vg_classifier_load(ptr::null(), &mut vit),
            VgStatus::InvalidArgument
        );
        assert!(last_error().contains("path"));

        let missing = CString::new("/nonexistent/vit.ckpt").unwrap();
        assert_eq!(
            vg_classifier_load(missing.as_ptr(), &mut vit),
            VgStatus::Format
        );
        assert!(last_error().contains("/nonexistent/vit.ckpt"));
        assert!(vit.is_null());

        let mut det = ptr::null_mut();
        assert_eq!(
            vg_detector_load(f.calibration.as_ptr(), 0.2, &mut det),
            VgStatus::State
        );

        assert_eq!(vg_classifier_load(f.vit.as_ptr(), &mut vit), VgStatus::Ok);
        let short = [0.5f64; 10];
        let mut label = 0;
        assert_eq!(
            vg_classifier_predict(vit, short.as_ptr(), short.len(), &mut label),
            VgStatus::Dimension
        );
        let bad = [2.0f64; 256];
        assert_eq!(
            vg_classifier_predict(vit, bad.as_ptr(), bad.len(), &mut label),
            VgStatus::Input
        );
        assert_eq!(
            vg_classifier_predict(vit, bad.as_ptr(), bad.len(), ptr::null_mut()),
            VgStatus::Input
        );
        let ok = [0.5f64; 256];
        assert_eq!(
            vg_classifier_predict(vit, ok.as_ptr(), ok.len(), ptr::null_mut()),
            VgStatus::InvalidArgument
        );
        vg_classifier_free(vit);
        vg_classifier_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(vg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vitguard.h"))
            .unwrap();
    for name in [
        "vg_classifier_load",
        "vg_classifier_free",
        "vg_mae_load",
        "vg_detector_load",
        "vg_detect",
        "vg_last_error",
        "typedef struct VgClassifier VgClassifier",
        "VG_STATUS_DIMENSION = 5",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
