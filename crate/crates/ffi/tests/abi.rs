use std::ffi::{CStr, CString};
use std::ptr;

use pmtrec::data::{Dataset, Edge};
use pmtrec_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pmt_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn table_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.bin").to_str().unwrap()).unwrap();
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(pmt_table_init(3, 4, 5, 42, &mut t), PmtStatus::Ok);
        let (mut nu, mut ni, mut d) = (0, 0, 0);
        assert_eq!(pmt_table_dims(t, &mut nu, &mut ni, &mut d), PmtStatus::Ok);
        assert_eq!((nu, ni, d), (3, 4, 5));

        let mut row = [0.0; 5];
        assert_eq!(pmt_table_row(t, 6, row.as_mut_ptr(), 5), PmtStatus::Ok);
        assert!(row.iter().any(|x| *x != 0.0));
        assert_eq!(pmt_table_row(t, 7, row.as_mut_ptr(), 5), PmtStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        assert_eq!(pmt_table_row(t, 0, row.as_mut_ptr(), 4), PmtStatus::InvalidArgument);

        assert_eq!(pmt_table_save(t, path.as_ptr()), PmtStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(pmt_table_load(path.as_ptr(), &mut loaded), PmtStatus::Ok);
        let mut again = [0.0; 5];
        assert_eq!(pmt_table_row(loaded, 6, again.as_mut_ptr(), 5), PmtStatus::Ok);
        assert_eq!(row, again);
        pmt_table_free(t);
        pmt_table_free(loaded);
        pmt_table_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(pmt_table_init(3, 4, 0, 1, &mut t), PmtStatus::Config);
        assert!(!last_error().is_empty());
        assert_eq!(pmt_table_init(1, 1, 1, 1, ptr::null_mut()), PmtStatus::NullPointer);
        let missing = CString::new("/nonexistent/table.bin").unwrap();
        assert_eq!(pmt_table_load(missing.as_ptr(), &mut t), PmtStatus::Io);
        assert!(last_error().contains("/nonexistent/table.bin"));
        let kind = CString::new("cagrad").unwrap();
        let g = [1.0];
        let mut out = [0.0];
        assert_eq!(
            pmt_pool_dense(kind.as_ptr(), g.as_ptr(), 1, 1, 1, 1.0, 1.0, 1, 0, out.as_mut_ptr()),
            PmtStatus::Config
        );
    }
}

#[test]
fn balance_weights_rows_are_softmax() {
    let norms = [3.0, 2.0, 1.0, 2.0];
    let mut w = [0.0; 4];
    unsafe {
        assert_eq!(pmt_balance_weights(norms.as_ptr(), 2, 2, 1.0, 1.0, 1, w.as_mut_ptr()), PmtStatus::Ok);
        assert_eq!(pmt_balance_weights(norms.as_ptr(), 2, 2, 1.0, 0.0, 1, w.as_mut_ptr()), PmtStatus::Config);
    }
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((w[0] - s).abs() < 1e-12 && (w[3] - s).abs() < 1e-12);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
}

#[test]
fn dense_pooling() {
    // Two tasks, two rows, d = 2; task 1 is absent on row 1.
    let grads = [1.0, 0.0, 0.0, 2.0, 0.5, 0.5, 0.0, 0.0];
    let mut ew = [0.0; 4];
    let mut pm = [0.0; 4];
    let ew_kind = CString::new("ew").unwrap();
    let pm_kind = CString::new("pmtrec").unwrap();
    unsafe {
        assert_eq!(pmt_pool_dense(ew_kind.as_ptr(), grads.as_ptr(), 2, 2, 2, 1.0, 1.0, 1, 0, ew.as_mut_ptr()), PmtStatus::Ok);
        assert_eq!(pmt_pool_dense(pm_kind.as_ptr(), grads.as_ptr(), 2, 2, 2, 1.0, 1e9, 1, 0, pm.as_mut_ptr()), PmtStatus::Ok);
    }
    assert_eq!(ew, [1.5, 0.5, 0.0, 2.0]);
    // Nearly flat weights: half of the sum on row 0.
    assert!((pm[0] - 0.75).abs() < 1e-6 && (pm[1] - 0.25).abs() < 1e-6);
}

#[test]
fn evaluate_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::from_splits(1, 3, vec![Edge::new(0, 2)], vec![], vec![Edge::new(0, 0)]).unwrap();
    ds.save(&dir.path().join("ds.bin")).unwrap();
    let table = pmtrec::EmbeddingTable::from_values(1, 3, 1, vec![1.0, 0.9, 0.1, 5.0]).unwrap();
    table.save(&dir.path().join("t.bin")).unwrap();
    let ds_path = CString::new(dir.path().join("ds.bin").to_str().unwrap()).unwrap();
    let t_path = CString::new(dir.path().join("t.bin").to_str().unwrap()).unwrap();
    unsafe {
        let (mut d, mut t) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(pmt_dataset_load(ds_path.as_ptr(), &mut d), PmtStatus::Ok);
        assert_eq!(pmt_table_load(t_path.as_ptr(), &mut t), PmtStatus::Ok);
        let (mut nu, mut ni) = (0, 0);
        assert_eq!(pmt_dataset_dims(d, &mut nu, &mut ni), PmtStatus::Ok);
        assert_eq!((nu, ni), (1, 3));
        let (mut r, mut h, mut n, mut users) = (0.0, 0.0, 0.0, 0);
        assert_eq!(pmt_evaluate(t, d, 1, 1, &mut r, &mut h, &mut n, &mut users), PmtStatus::Ok);
        assert_eq!((r, h, n, users), (1.0, 1.0, 1.0, 1));
        assert_eq!(pmt_evaluate(t, d, 5, 1, &mut r, &mut h, &mut n, &mut users), PmtStatus::InvalidArgument);
        pmt_dataset_free(d);
        pmt_table_free(t);
    }
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pmtrec.h")).unwrap();
    for name in [
        "PmtStatus",
        "PMT_STATUS_OK",
        "typedef struct PmtTable PmtTable",
        "pmt_table_init",
        "pmt_table_free",
        "pmt_dataset_load",
        "pmt_evaluate",
        "pmt_pool_dense",
        "pmt_balance_weights",
        "pmt_last_error",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let v = unsafe { CStr::from_ptr(pmt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
