use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use refed_ffi::*;

fn last_error() -> String {
    let p = refed_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_generator() -> CString {
    CString::new(
        r#"{"n_classes":3,"t_len":8,"n_bands":2,"polygons_per_class":6,"mean_pixels":4.0,"min_pixels":2,"seed":3}"#,
    )
    .unwrap()
}

fn synth() -> (*mut RefedDataset, *mut RefedDataset) {
    let cfg = tiny_generator();
    let (mut s, mut t) = (ptr::null_mut(), ptr::null_mut());
    let st = unsafe { refed_synth_generate(cfg.as_ptr(), &mut s, &mut t) };
    assert_eq!(st, RefedStatus::Ok, "{}", last_error());
    (s, t)
}

#[test]
fn synth_dataset_shape_and_labels() {
    let (s, t) = synth();
    unsafe {
        let n = refed_dataset_len(t);
        assert!(n > 0);
        let (mut tl, mut nb, mut k) = (0, 0, 0);
        assert_eq!(refed_dataset_shape(t, &mut tl, &mut nb, &mut k), RefedStatus::Ok);
        assert_eq!((tl, nb, k), (8, 2, 3));
        let mut labels = vec![0u16; n];
        assert_eq!(refed_dataset_labels(t, labels.as_mut_ptr(), n), RefedStatus::Ok);
        assert!(labels.iter().all(|&l| l < 3));
        assert_eq!(
            refed_dataset_labels(t, labels.as_mut_ptr(), n - 1),
            RefedStatus::BufferSize
        );
        refed_dataset_free(s);
        refed_dataset_free(t);
    }
}

#[test]
fn train_predict_save_load() {
    let (s, t) = synth();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let mode = CString::new("refed").unwrap();
    let cfg = CString::new(r#"{"epochs":2,"batch_size":16}"#).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            refed_train(mode.as_ptr(), cfg.as_ptr(), s, t, 0, &mut model),
            RefedStatus::Ok,
            "{}",
            {
                if refed_last_error().is_null() {
                    String::new()
                } else {
                    last_error()
                }
            }
        );
        assert_eq!(refed_model_n_classes(model), 3);
        assert_eq!(refed_model_is_two_branch(model), 1);
        let n = refed_dataset_len(t);
        let mut probs = vec![0f32; n * 3];
        assert_eq!(
            refed_model_predict_proba(model, t, probs.as_mut_ptr(), probs.len()),
            RefedStatus::Ok
        );
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let mut pred = vec![0u32; n];
        assert_eq!(refed_model_predict(model, t, pred.as_mut_ptr(), n), RefedStatus::Ok);

        assert_eq!(refed_model_save(model, path.as_ptr()), RefedStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(refed_model_load(path.as_ptr(), &mut loaded), RefedStatus::Ok);
        let mut again = vec![0f32; n * 3];
        assert_eq!(
            refed_model_predict_proba(loaded, t, again.as_mut_ptr(), again.len()),
            RefedStatus::Ok
        );
        assert_eq!(probs, again);

        let mut labels16 = vec![0u16; n];
        refed_dataset_labels(t, labels16.as_mut_ptr(), n);
        let labels: Vec<u32> = labels16.iter().map(|&l| l as u32).collect();
        let (mut f1, mut acc) = (0.0, 0.0);
        assert_eq!(
            refed_metrics(labels.as_ptr(), pred.as_ptr(), n, 3, &mut f1, &mut acc),
            RefedStatus::Ok
        );
        assert!((0.0..=100.0).contains(&f1) && (0.0..=100.0).contains(&acc));

        refed_model_free(model);
        refed_model_free(loaded);
        refed_dataset_free(s);
        refed_dataset_free(t);
    }
}

#[test]
fn arrays_round_trip_through_file() {
    let features: Vec<f32> = (0..4 * 3 * 2).map(|i| i as f32 / 10.0).collect();
    let labels = [0u16, 1, 1, 0];
    let polys = [0u32, 1, 1, 2];
    let domains = [1u8, 1, 1, 1];
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.sitsb").to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        let st = refed_dataset_from_arrays(
            4,
            3,
            2,
            2,
            features.as_ptr(),
            labels.as_ptr(),
            polys.as_ptr(),
            domains.as_ptr(),
            &mut ds,
        );
        assert_eq!(st, RefedStatus::Ok);
        assert_eq!(refed_dataset_save(ds, path.as_ptr()), RefedStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(refed_dataset_load(path.as_ptr(), &mut back), RefedStatus::Ok);
        assert_eq!(refed_dataset_len(back), 4);
        let mut l = [9u16; 4];
        refed_dataset_labels(back, l.as_mut_ptr(), 4);
        assert_eq!(l, labels);
        refed_dataset_free(ds);
        refed_dataset_free(back);
    }
}

#[test]
fn errors_map_to_status_and_message() {
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = CString::new("/nonexistent/file.sitsb").unwrap();
        assert_eq!(refed_dataset_load(missing.as_ptr(), &mut ds), RefedStatus::NotFound);
        assert!(last_error().contains("not found"));
        assert!(ds.is_null());

        assert_eq!(refed_dataset_load(ptr::null(), &mut ds), RefedStatus::NullPointer);

        let bad_json = CString::new("{not json").unwrap();
        let (mut s, mut t) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            refed_synth_generate(bad_json.as_ptr(), &mut s, &mut t),
            RefedStatus::Config
        );

        let bad_label = [5u16];
        let f = [0f32; 2];
        let st = refed_dataset_from_arrays(
            1,
            1,
            2,
            2,
            f.as_ptr(),
            bad_label.as_ptr(),
            [0u32].as_ptr(),
            [0u8].as_ptr(),
            &mut ds,
        );
        assert_eq!(st, RefedStatus::InvalidInput);
        let st = refed_dataset_from_arrays(
            1,
            1,
            2,
            2,
            f.as_ptr(),
            [0u16].as_ptr(),
            [0u32].as_ptr(),
            [7u8].as_ptr(),
            &mut ds,
        );
        assert_eq!(st, RefedStatus::InvalidInput);

        let mode = CString::new("nonsense").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            refed_train(mode.as_ptr(), ptr::null(), ptr::null(), ptr::null(), 0, &mut m),
            RefedStatus::Config
        );

        // success clears the message
        let (s, t) = synth();
        assert!(refed_last_error().is_null());
        refed_dataset_free(s);
        refed_dataset_free(t);
        refed_dataset_free(ptr::null_mut());
        refed_model_free(ptr::null_mut());
        assert_eq!(refed_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn generated_header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("refed.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "refed_last_error",
        "refed_dataset_load",
        "refed_train",
        "refed_model_predict_proba",
        "refed_metrics",
        "REFED_STATUS_BUFFER_SIZE",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipped compiling the header");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
