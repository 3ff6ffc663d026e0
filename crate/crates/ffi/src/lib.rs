//! C ABI over `coldrec`: AUC, tensor files, embedding tables and the staged
//! pipeline.
//!
//! Every fallible call returns a `ColdrecStatus`. On failure the message is
//! kept per thread and read back with `coldrec_last_error`. Objects are
//! opaque handles released by their `_free` function; passing NULL to a
//! `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::{c_char, size_t};

use coldrec::numerics::checkpoint;
use coldrec::numerics::tensor::Tensor;
use coldrec::pipeline::{Pipeline, PipelineConfig};
use coldrec::ranking::Ablation;
use coldrec::saviorenc::EmbeddingTable;
use coldrec::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColdrecStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    OutOfRange = 3,
    BufferTooSmall = 4,
    Io = 5,
    Config = 6,
    Contract = 7,
    Dimension = 8,
    UndefinedMetric = 9,
    Format = 10,
    MissingArtifact = 11,
    ConfigHashMismatch = 12,
    Training = 13,
    Panic = 14,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ColdrecStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Dimension { .. } => ColdrecStatus::Dimension,
        Error::Contract(_) => ColdrecStatus::Contract,
        Error::Config { .. } | Error::Toml(_) => ColdrecStatus::Config,
        Error::UndefinedMetric(_) => ColdrecStatus::UndefinedMetric,
        Error::DegenerateBatch(_) | Error::DegenerateDataset(_) | Error::Divergence(_) => ColdrecStatus::Training,
        Error::Format(_) | Error::Json(_) => ColdrecStatus::Format,
        Error::MissingArtifact { .. } => ColdrecStatus::MissingArtifact,
        Error::ConfigHashMismatch { .. } => ColdrecStatus::ConfigHashMismatch,
        Error::Io(_) => ColdrecStatus::Io,
    }
}

struct Fail(ColdrecStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

/// Runs `f`, converting errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> FfiResult) -> ColdrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ColdrecStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ColdrecStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ColdrecStatus::NullArgument, format!("`{what}` is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ColdrecStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copies `src` into `dst[..cap]` when it fits; `needed` receives the full
/// length either way.
unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: size_t, needed: *mut size_t) -> FfiResult {
    if let Some(n) = needed.as_mut() {
        *n = src.len();
    }
    if src.len() > cap {
        return Err(Fail(
            ColdrecStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Copies the calling thread's last error message (NUL-terminated) into
/// `buf`, truncating to `cap` bytes. Returns the untruncated length including
/// the terminator, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn coldrec_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Rank-based AUC with tied scores sharing their average rank. `labels` are
/// 0/1 bytes (any nonzero byte counts as a click).
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements, `out` to one
/// writable double.
#[no_mangle]
pub unsafe extern "C" fn coldrec_auc(scores: *const f64, labels: *const u8, n: size_t, out: *mut f64) -> ColdrecStatus {
    guard(|| {
        if scores.is_null() {
            return Err(null("scores"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let out = out_ref(out, "out")?;
        let s = std::slice::from_raw_parts(scores, n);
        let y: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect();
        *out = coldrec::evalkit::auc(s, &y)?;
        Ok(())
    })
}

/// A decoded tensor file (checkpoint or embedding table).
pub struct ColdrecTensorFile {
    tensors: Vec<(String, Tensor)>,
    names: Vec<CString>,
}

impl ColdrecTensorFile {
    fn entry(&self, index: size_t) -> Result<&Tensor, Fail> {
        self.tensors.get(index).map(|(_, t)| t).ok_or_else(|| {
            Fail(
                ColdrecStatus::OutOfRange,
                format!("tensor index {index} out of range ({} tensors)", self.tensors.len()),
            )
        })
    }
}

/// Reads a tensor file written by the pipeline.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coldrec_tensors_open(path: *const c_char, out: *mut *mut ColdrecTensorFile) -> ColdrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let tensors = checkpoint::read(&PathBuf::from(path))?;
        let names = tensors
            .iter()
            .map(|(n, _)| {
                CString::new(n.as_str()).map_err(|_| Fail(ColdrecStatus::Format, "tensor name holds NUL".into()))
            })
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(ColdrecTensorFile { tensors, names }));
        Ok(())
    })
}

/// # Safety
/// `file` must be NULL or a handle from `coldrec_tensors_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn coldrec_tensors_free(file: *mut ColdrecTensorFile) {
    if !file.is_null() {
        drop(Box::from_raw(file));
    }
}

/// # Safety
/// `file` must be a live handle, `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coldrec_tensors_count(file: *const ColdrecTensorFile, out: *mut size_t) -> ColdrecStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(file, "file")?.tensors.len();
        Ok(())
    })
}

/// Name of tensor `index`; the pointer stays valid until the handle is freed.
///
/// # Safety
/// `file` must be a live handle, `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coldrec_tensors_name(
    file: *const ColdrecTensorFile,
    index: size_t,
    out: *mut *const c_char,
) -> ColdrecStatus {
    guard(|| {
        let f = handle(file, "file")?;
        f.entry(index)?;
        *out_ref(out, "out")? = f.names[index].as_ptr();
        Ok(())
    })
}

/// Shape of tensor `index` into `dims[..cap]`; `rank` receives its length.
///
/// # Safety
/// `file` must be a live handle, `dims` must hold `cap` elements, `rank` must
/// be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn coldrec_tensors_shape(
    file: *const ColdrecTensorFile,
    index: size_t,
    dims: *mut size_t,
    cap: size_t,
    rank: *mut size_t,
) -> ColdrecStatus {
    guard(|| copy_out(handle(file, "file")?.entry(index)?.shape(), dims, cap, rank))
}

/// Row-major values of tensor `index` into `buf[..cap]`; `len` receives the
/// element count.
///
/// # Safety
/// `file` must be a live handle, `buf` must hold `cap` doubles, `len` must be
/// NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn coldrec_tensors_data(
    file: *const ColdrecTensorFile,
    index: size_t,
    buf: *mut f64,
    cap: size_t,
    len: *mut size_t,
) -> ColdrecStatus {
    guard(|| copy_out(handle(file, "file")?.entry(index)?.data(), buf, cap, len))
}

/// Frozen item embedding table.
pub struct ColdrecEmbeddings {
    table: EmbeddingTable,
}

/// Loads `<dir>/<stem>.savior` with its index, e.g. the encode stage's
/// `embedding`.
///
/// # Safety
/// `dir` and `stem` must be NUL-terminated strings, `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coldrec_embeddings_open(
    dir: *const c_char,
    stem: *const c_char,
    out: *mut *mut ColdrecEmbeddings,
) -> ColdrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let stem = str_arg(stem, "stem")?;
        let table = EmbeddingTable::load(&PathBuf::from(dir), stem)?;
        *out = Box::into_raw(Box::new(ColdrecEmbeddings { table }));
        Ok(())
    })
}

/// # Safety
/// `emb` must be NULL or a handle from `coldrec_embeddings_open` not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn coldrec_embeddings_free(emb: *mut ColdrecEmbeddings) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// Item count and embedding width.
///
/// # Safety
/// `emb` must be a live handle; `items` and `dim` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn coldrec_embeddings_size(
    emb: *const ColdrecEmbeddings,
    items: *mut size_t,
    dim: *mut size_t,
) -> ColdrecStatus {
    guard(|| {
        let e = handle(emb, "emb")?;
        if let Some(n) = items.as_mut() {
            *n = e.table.len();
        }
        if let Some(d) = dim.as_mut() {
            *d = e.table.dim();
        }
        Ok(())
    })
}

/// Copies the embedding of `item` into `buf[..cap]`.
///
/// # Safety
/// `emb` must be a live handle and `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn coldrec_embeddings_get(
    emb: *const ColdrecEmbeddings,
    item: u32,
    buf: *mut f64,
    cap: size_t,
) -> ColdrecStatus {
    guard(|| {
        let e = handle(emb, "emb")?;
        if item as usize >= e.table.len() {
            return Err(Fail(
                ColdrecStatus::OutOfRange,
                format!("item {item} out of range ({} items)", e.table.len()),
            ));
        }
        copy_out(e.table.get(item), buf, cap, ptr::null_mut())
    })
}

/// A configured pipeline rooted at its `out_dir`.
pub struct ColdrecPipeline {
    inner: Pipeline,
}

/// Builds a pipeline from an optional TOML config with optional overrides.
/// NULL `config_path` uses the built-in defaults, NULL `out_dir` keeps the
/// configured directory, a negative `seed` keeps the configured seed.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated, `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn coldrec_pipeline_new(
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: i64,
    force: bool,
    out: *mut *mut ColdrecPipeline,
) -> ColdrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let mut cfg = match opt_str_arg(config_path, "config_path")? {
            Some(p) => PipelineConfig::load(&[PathBuf::from(p)])?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = opt_str_arg(out_dir, "out_dir")? {
            cfg.out_dir = PathBuf::from(d);
        }
        if seed >= 0 {
            cfg.seed = seed as u64;
        }
        cfg.validate()?;
        *out = Box::into_raw(Box::new(ColdrecPipeline {
            inner: Pipeline::new(cfg, force),
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or a handle from `coldrec_pipeline_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn coldrec_pipeline_free(p: *mut ColdrecPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Selects the ablation tag used by `rank`, `eval` and `run-all`.
///
/// # Safety
/// `p` must be a live handle and `tag` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn coldrec_pipeline_set_ablation(p: *mut ColdrecPipeline, tag: *const c_char) -> ColdrecStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("p"))?;
        p.inner.cfg.ranker.ablation = str_arg(tag, "tag")?.parse::<Ablation>()?;
        Ok(())
    })
}

/// Runs one stage by CLI name: gen, encode, quantize, rank, eval, ablate,
/// sweep-dims or run-all. Up-to-date stages are skipped.
///
/// # Safety
/// `p` must be a live handle and `stage` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn coldrec_pipeline_run(p: *const ColdrecPipeline, stage: *const c_char) -> ColdrecStatus {
    guard(|| {
        let p = &handle(p, "p")?.inner;
        let tag = p.cfg.ranker.ablation;
        match str_arg(stage, "stage")? {
            "gen" => p.gen().map(drop),
            "encode" => p.encode().map(drop),
            "quantize" => p.quantize().map(drop),
            "rank" => p.rank(tag).map(drop),
            "eval" => p.eval(tag).map(drop),
            "ablate" => p.ablate().map(drop),
            "sweep-dims" => p.sweep_dims().map(drop),
            "run-all" => p.run_all().map(drop),
            other => Err(Error::config("stage", format!("unknown stage `{other}`"))),
        }?;
        Ok(())
    })
}

/// Full report of the selected ablation as JSON, copied NUL-terminated into
/// `buf[..cap]`; `len` receives the size needed including the terminator.
///
/// # Safety
/// `p` must be a live handle, `buf` must hold `cap` bytes, `len` must be NULL
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn coldrec_pipeline_report_json(
    p: *const ColdrecPipeline,
    buf: *mut c_char,
    cap: size_t,
    len: *mut size_t,
) -> ColdrecStatus {
    guard(|| {
        let p = &handle(p, "p")?.inner;
        let report = p.load_report(p.cfg.ranker.ablation)?;
        let json = serde_json::to_string(&report).map_err(Error::from)?;
        let c = CString::new(json).expect("JSON has no NUL");
        let bytes: Vec<c_char> = c.as_bytes_with_nul().iter().map(|&b| b as c_char).collect();
        copy_out(&bytes, buf, cap, len)
    })
}
