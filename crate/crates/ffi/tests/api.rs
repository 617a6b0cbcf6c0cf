use std::ffi::{CStr, CString};
use std::ptr;

use tomoseg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ts_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn volume_round_trip_and_shape() {
    let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
    let mut vol = ptr::null_mut();
    unsafe {
        assert_eq!(ts_volume_from_data(2, 3, 4, data.as_ptr(), &mut vol), TsStatus::Ok);
        let (mut d, mut h, mut w) = (0, 0, 0);
        assert_eq!(ts_volume_shape(vol, &mut d, &mut h, &mut w), TsStatus::Ok);
        assert_eq!((d, h, w), (2, 3, 4));
        let mut back = vec![0f32; 24];
        assert_eq!(ts_volume_copy_data(vol, back.as_mut_ptr(), 24), TsStatus::Ok);
        assert_eq!(back, data);
        assert_eq!(ts_volume_copy_data(vol, back.as_mut_ptr(), 23), TsStatus::Shape);
        ts_volume_free(vol);
    }
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut vol = ptr::null_mut();
    unsafe {
        assert_eq!(
            ts_volume_from_data(1, 1, 1, ptr::null(), &mut vol),
            TsStatus::NullPointer
        );
        assert!(vol.is_null());
        assert!(last_error().contains("data"));
        assert_eq!(
            ts_volume_shape(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            TsStatus::NullPointer
        );
        ts_volume_free(ptr::null_mut());
        ts_labels_free(ptr::null_mut());
        ts_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes_with_messages() {
    let data = [0.5f32, f32::NAN];
    let mut vol = ptr::null_mut();
    unsafe {
        assert_eq!(
            ts_volume_from_data(1, 1, 2, data.as_ptr(), &mut vol),
            TsStatus::NonFinite
        );
        let missing = CString::new("/nonexistent/volume.raw").unwrap();
        assert_eq!(ts_volume_load(missing.as_ptr(), &mut vol), TsStatus::Io);
        assert!(!last_error().is_empty());
        let mut model = ptr::null_mut();
        assert_ne!(ts_model_load(missing.as_ptr(), &mut model), TsStatus::Ok);
        assert!(model.is_null());
    }
}

#[test]
fn noiseless_phantom_clusters_to_ground_truth() {
    let (mut vol, mut gt, mut pseudo) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(
            ts_phantom_three_phase(8, 32, 32, 1, 0.0, 0.0, &mut vol, &mut gt),
            TsStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(
            ts_pseudolabel(vol, TsClusterMethod::Kmeans, 3, 0, &mut pseudo),
            TsStatus::Ok,
            "{}",
            last_error()
        );
        let (mut acc, mut miou) = (0.0, 0.0);
        let ignore = [0u8];
        assert_eq!(
            ts_evaluate(pseudo, gt, ignore.as_ptr(), 1, &mut acc, &mut miou),
            TsStatus::Ok
        );
        assert_eq!((acc, miou), (1.0, 1.0));

        let (mut d, mut h, mut w, mut k) = (0, 0, 0, 0);
        assert_eq!(ts_labels_shape(pseudo, &mut d, &mut h, &mut w, &mut k), TsStatus::Ok);
        assert_eq!((d, h, w, k), (8, 32, 32, 3));
        let mut a = vec![0u8; d * h * w];
        let mut b = vec![0u8; d * h * w];
        ts_labels_copy_data(pseudo, a.as_mut_ptr(), a.len());
        ts_labels_copy_data(gt, b.as_mut_ptr(), b.len());
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("gt.raw").to_str().unwrap()).unwrap();
        assert_eq!(ts_labels_save(gt, path.as_ptr()), TsStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(ts_labels_load(path.as_ptr(), &mut reloaded), TsStatus::Ok);
        assert_eq!(
            ts_evaluate(reloaded, gt, ptr::null(), 0, &mut acc, &mut miou),
            TsStatus::Ok
        );
        assert_eq!(acc, 1.0);

        ts_labels_free(reloaded);
        ts_labels_free(pseudo);
        ts_labels_free(gt);
        ts_volume_free(vol);
    }
}

#[test]
fn clustering_errors_surface() {
    let data = [0.5f32; 8];
    let (mut vol, mut labels) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        ts_volume_from_data(2, 2, 2, data.as_ptr(), &mut vol);
        assert_eq!(
            ts_pseudolabel(vol, TsClusterMethod::Kmeans, 0, 0, &mut labels),
            TsStatus::Clustering
        );
        assert!(labels.is_null());
        ts_volume_free(vol);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(ts_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
