//! C ABI over the `pmtrec` library.
//!
//! Every function returns a [`PmtStatus`]; on failure the message is available from
//! [`pmt_last_error`] on the same thread. Handles are opaque and must be released
//! with their `_free` function. Tables passed to evaluation are scored directly,
//! i.e. they should already be encoded.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pmtrec::combiner::{apply_task_focus, balance_weights, build_pooler, NormTable};
use pmtrec::data::{Dataset, EvalSplit};
use pmtrec::encoder::{init_embeddings, EmbeddingTable};
use pmtrec::error::Error;
use pmtrec::eval::evaluate;
use pmtrec::{CombinerConfig, CombinerKind, GradientBundle, TaskGradient};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    EmptyDataset = 6,
    Numerical = 7,
    Panic = 99,
}

/// Opaque embedding table.
pub struct PmtTable(EmbeddingTable);

/// Opaque prepared dataset.
pub struct PmtDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(PmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => PmtStatus::Io,
            Error::Format(_) => PmtStatus::Format,
            Error::Config(_) | Error::UnknownKeys(_) => PmtStatus::Config,
            Error::EmptyDataset(_) => PmtStatus::EmptyDataset,
            Error::Numerical(_) | Error::DegenerateRow { .. } => PmtStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PmtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PmtStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PmtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PmtStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a Xavier-initialized table of `(n_users + n_items) x d`.
///
/// # Safety
/// `out` must be a valid pointer to write a handle to.
#[no_mangle]
pub unsafe extern "C" fn pmt_table_init(
    n_users: usize,
    n_items: usize,
    d: usize,
    seed: u64,
    out: *mut *mut PmtTable,
) -> PmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = init_embeddings(n_users, n_items, d, seed)?;
        *out = Box::into_raw(Box::new(PmtTable(t)));
        Ok(())
    })
}

/// Loads a checkpoint written by the library or by [`pmt_table_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pmt_table_load(path: *const c_char, out: *mut *mut PmtTable) -> PmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = EmbeddingTable::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PmtTable(t)));
        Ok(())
    })
}

/// # Safety
/// `table` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pmt_table_save(table: *const PmtTable, path: *const c_char) -> PmtStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null("table"))?;
        t.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Writes the table's user count, item count and dimension. Any output may be null.
///
/// # Safety
/// `table` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmt_table_dims(
    table: *const PmtTable,
    n_users: *mut usize,
    n_items: *mut usize,
    d: *mut usize,
) -> PmtStatus {
    guard(|| {
        let t = &table.as_ref().ok_or_else(|| null("table"))?.0;
        if let Some(p) = n_users.as_mut() {
            *p = t.n_users();
        }
        if let Some(p) = n_items.as_mut() {
            *p = t.n_items();
        }
        if let Some(p) = d.as_mut() {
            *p = t.dim();
        }
        Ok(())
    })
}

/// Copies row `row` (users first, then items) into `out`, which holds `len == d` values.
///
/// # Safety
/// `table` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pmt_table_row(table: *const PmtTable, row: usize, out: *mut f64, len: usize) -> PmtStatus {
    guard(|| {
        let t = &table.as_ref().ok_or_else(|| null("table"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if row >= t.n_rows() {
            return Err(invalid(format!("row {row} out of range ({} rows)", t.n_rows())));
        }
        if len != t.dim() {
            return Err(invalid(format!("buffer holds {len} values, table dimension is {}", t.dim())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(t.row(row));
        Ok(())
    })
}

/// Releases a table handle. Null is ignored.
///
/// # Safety
/// `table` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pmt_table_free(table: *mut PmtTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Loads a dataset bundle written by `pmtrec prepare`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pmt_dataset_load(path: *const c_char, out: *mut *mut PmtDataset) -> PmtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = Dataset::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PmtDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmt_dataset_dims(ds: *const PmtDataset, n_users: *mut usize, n_items: *mut usize) -> PmtStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        if let Some(p) = n_users.as_mut() {
            *p = ds.n_users;
        }
        if let Some(p) = n_items.as_mut() {
            *p = ds.n_items;
        }
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pmt_dataset_free(ds: *mut PmtDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Full-ranking metrics at cutoff `k` on `split` (0 = val, 1 = test).
///
/// # Safety
/// Handles must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmt_evaluate(
    table: *const PmtTable,
    ds: *const PmtDataset,
    split: i32,
    k: usize,
    recall: *mut f64,
    hit_ratio: *mut f64,
    ndcg: *mut f64,
    n_users: *mut usize,
) -> PmtStatus {
    guard(|| {
        let t = &table.as_ref().ok_or_else(|| null("table"))?.0;
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        let split = match split {
            0 => EvalSplit::Val,
            1 => EvalSplit::Test,
            s => return Err(invalid(format!("split must be 0 or 1, got {s}"))),
        };
        let (recall, hit_ratio, ndcg, n_users) = (
            out_arg(recall, "recall")?,
            out_arg(hit_ratio, "hit_ratio")?,
            out_arg(ndcg, "ndcg")?,
            out_arg(n_users, "n_users")?,
        );
        let rep = evaluate(t, ds, split, &[k])?;
        *recall = rep.recall[0];
        *hit_ratio = rep.hit_ratio[0];
        *ndcg = rep.ndcg[0];
        *n_users = rep.n_users;
        Ok(())
    })
}

/// Per-row task weights from a row-major `n_rows x n_tasks` norm matrix (task 0 is
/// the main task): focusing with `alpha^epoch`, then a softmax at temperature `tau`.
///
/// # Safety
/// `norms` must be readable and `weights` writable for `n_rows * n_tasks` values.
#[no_mangle]
pub unsafe extern "C" fn pmt_balance_weights(
    norms: *const f64,
    n_rows: usize,
    n_tasks: usize,
    alpha: f64,
    tau: f64,
    epoch: u32,
    weights: *mut f64,
) -> PmtStatus {
    guard(|| {
        if norms.is_null() || weights.is_null() {
            return Err(null("norms or weights"));
        }
        let len = n_rows.checked_mul(n_tasks).ok_or_else(|| invalid("size overflow"))?;
        let values = std::slice::from_raw_parts(norms, len).to_vec();
        let table = NormTable::from_rows((0..n_rows).collect(), n_tasks, values)?;
        let w = balance_weights(&apply_task_focus(table, alpha, epoch)?, tau)?;
        let out = std::slice::from_raw_parts_mut(weights, len);
        for k in 0..n_rows {
            out[k * n_tasks..(k + 1) * n_tasks].copy_from_slice(w.row(k));
        }
        Ok(())
    })
}

/// Pools dense per-task gradients laid out `[task][row][dim]` into `out`
/// (`[row][dim]`). `kind` is one of `pmtrec`, `ew`, `rlw`, `pcgrad`, `graddrop`;
/// task 0 is the main task. All-zero task rows count as absent.
///
/// # Safety
/// `kind` must be a NUL-terminated string, `grads` readable for
/// `n_tasks * n_rows * d` values and `out` writable for `n_rows * d` values.
#[no_mangle]
pub unsafe extern "C" fn pmt_pool_dense(
    kind: *const c_char,
    grads: *const f64,
    n_tasks: usize,
    n_rows: usize,
    d: usize,
    alpha: f64,
    tau: f64,
    epoch: u32,
    seed: u64,
    out: *mut f64,
) -> PmtStatus {
    guard(|| {
        let kind: CombinerKind = str_arg(kind, "kind")?.parse()?;
        if grads.is_null() || out.is_null() {
            return Err(null("grads or out"));
        }
        if n_tasks == 0 || d == 0 {
            return Err(invalid("n_tasks and d must be positive"));
        }
        let row_len = n_rows.checked_mul(d).ok_or_else(|| invalid("size overflow"))?;
        let total = row_len.checked_mul(n_tasks).ok_or_else(|| invalid("size overflow"))?;
        let all = std::slice::from_raw_parts(grads, total);
        let task_grads = (0..n_tasks)
            .map(|t| {
                let mut g = TaskGradient::new(format!("task{t}"), d);
                for r in 0..n_rows {
                    let v = &all[t * row_len + r * d..t * row_len + (r + 1) * d];
                    if v.iter().any(|x| *x != 0.0) {
                        g.add(r, 1.0, v);
                    }
                }
                g
            })
            .collect();
        let bundle = GradientBundle::new(task_grads)?;
        let cfg = CombinerConfig {
            kind,
            alpha,
            tau,
            epoch,
        };
        let combined = build_pooler(&cfg, seed)?.pool(&bundle, epoch)?;
        let out = std::slice::from_raw_parts_mut(out, row_len);
        out.fill(0.0);
        for (r, v) in combined.rows() {
            out[r * d..(r + 1) * d].copy_from_slice(v);
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(Failure::from(Error::Numerical("x".into())).0, PmtStatus::Numerical);
        assert_eq!(Failure::from(Error::UnknownKeys(vec![])).0, PmtStatus::Config);
        assert_eq!(
            Failure::from(Error::DegenerateRow { row: 0, norm: 0.0 }).0,
            PmtStatus::Numerical
        );
    }

    #[test]
    fn error_message_roundtrip() {
        let st = guard(|| Err(invalid("bad thing")));
        assert_eq!(st, PmtStatus::InvalidArgument);
        let msg = unsafe { CStr::from_ptr(pmt_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "bad thing");
        assert_eq!(guard(|| Ok(())), PmtStatus::Ok);
        assert!(unsafe { CStr::from_ptr(pmt_last_error()) }.to_bytes().is_empty());
    }

    #[test]
    fn panics_are_contained() {
        assert_eq!(guard(|| panic!("boom")), PmtStatus::Panic);
    }
}
