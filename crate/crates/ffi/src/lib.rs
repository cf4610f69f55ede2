//! C ABI over the denoiser.
//!
//! Objects cross the boundary as opaque handles (`NmogCube`, `NmogReport`)
//! that the caller releases with the matching `*_free` function. Every fallible
//! call returns an [`NmogStatus`]; on failure, [`nmog_last_error`] describes
//! the most recent error on the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nmog::hsi::{load_cube, save_cube};
use nmog::metrics::{evaluate, svd_baseline_cube};
use nmog::noise_sim::{corrupt, NoiseCase, NoiseSpec};
use nmog::{Cube, Error, InferenceConfig, InferenceReport, NoiseLocation};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmogStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    /// Inference hit a non-finite state. Outputs still hold the last finite
    /// state.
    Diverged = 5,
    Panic = 6,
}

/// Inference settings. Fill with [`nmog_config_default`] before editing.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmogConfig {
    pub rank: u32,
    pub components: u32,
    pub max_iters: u32,
    pub tol: f64,
    pub prune_ratio: f64,
    pub seed: u64,
    pub normalize: bool,
    pub elbo_check: bool,
    pub free_noise_mean: bool,
}

/// Opaque hyperspectral cube.
pub struct NmogCube {
    cube: Cube,
}

/// Opaque inference report.
pub struct NmogReport {
    report: InferenceReport,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> NmogStatus {
    match err {
        Error::Io { .. } => NmogStatus::Io,
        Error::BadMagic { .. }
        | Error::PayloadLength { .. }
        | Error::NonFinite { .. }
        | Error::Json(_) => NmogStatus::Format,
        Error::Divergence { .. } => NmogStatus::Diverged,
        _ => NmogStatus::InvalidArgument,
    }
}

struct Failure(NmogStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NmogStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into a status plus last-error text.
fn guard(body: impl FnOnce() -> Result<NmogStatus, Failure>) -> NmogStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(status)) => status,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside nmog");
            NmogStatus::Panic
        }
    }
}

unsafe fn cube_ref<'a>(cube: *const NmogCube, what: &str) -> Result<&'a Cube, Failure> {
    cube.as_ref().map(|c| &c.cube).ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(NmogStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn new_cube(cube: Cube) -> NmogCube {
    NmogCube { cube }
}

/// Message for the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nmog_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nmog_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default settings to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `NmogConfig`.
#[no_mangle]
pub unsafe extern "C" fn nmog_config_default(out: *mut NmogConfig) -> NmogStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = InferenceConfig::default();
        *out = NmogConfig {
            rank: d.hyper.rank as u32,
            components: d.hyper.components as u32,
            max_iters: d.max_iters as u32,
            tol: d.tol,
            prune_ratio: d.prune_ratio,
            seed: d.seed,
            normalize: d.normalize,
            elbo_check: d.elbo_check,
            free_noise_mean: d.noise_location == NoiseLocation::Free,
        };
        Ok(NmogStatus::Ok)
    })
}

fn to_config(c: &NmogConfig) -> InferenceConfig {
    let mut cfg = InferenceConfig {
        max_iters: c.max_iters as usize,
        tol: c.tol,
        seed: c.seed,
        elbo_check: c.elbo_check,
        prune_ratio: c.prune_ratio,
        normalize: c.normalize,
        noise_location: if c.free_noise_mean {
            NoiseLocation::Free
        } else {
            NoiseLocation::Pinned
        },
        ..Default::default()
    };
    cfg.hyper.rank = c.rank as usize;
    cfg.hyper.components = c.components as usize;
    cfg
}

/// Copies `rows * cols * bands` floats (band-major, row-major within band)
/// into a new cube.
///
/// # Safety
/// `data` must point to that many readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmog_cube_new(
    rows: usize,
    cols: usize,
    bands: usize,
    data: *const f32,
    out: *mut *mut NmogCube,
) -> NmogStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Failure(NmogStatus::InvalidArgument, "cube size overflows".into()))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(out, new_cube(Cube::new(rows, cols, bands, values)?));
        Ok(NmogStatus::Ok)
    })
}

/// Reads a cube file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmog_cube_load(
    path: *const c_char,
    out: *mut *mut NmogCube,
) -> NmogStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        put(out, new_cube(load_cube(path)?));
        Ok(NmogStatus::Ok)
    })
}

/// Writes a cube file.
///
/// # Safety
/// `cube` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nmog_cube_save(cube: *const NmogCube, path: *const c_char) -> NmogStatus {
    guard(|| {
        save_cube(cube_ref(cube, "cube")?, str_arg(path, "path")?)?;
        Ok(NmogStatus::Ok)
    })
}

/// Reports the cube shape. Any output pointer may be null.
///
/// # Safety
/// `cube` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nmog_cube_dims(
    cube: *const NmogCube,
    rows: *mut usize,
    cols: *mut usize,
    bands: *mut usize,
) -> NmogStatus {
    guard(|| {
        let (r, c, b) = cube_ref(cube, "cube")?.shape();
        for (dst, v) in [(rows, r), (cols, c), (bands, b)] {
            if let Some(dst) = dst.as_mut() {
                *dst = v;
            }
        }
        Ok(NmogStatus::Ok)
    })
}

/// Borrowed pointer to the cube's samples, valid until the cube is freed.
/// Null when `cube` is null.
///
/// # Safety
/// `cube` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmog_cube_data(cube: *const NmogCube) -> *const f32 {
    cube.as_ref()
        .map_or(ptr::null(), |c| c.cube.data().as_ptr())
}

/// Releases a cube. Null is ignored.
///
/// # Safety
/// `cube` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmog_cube_free(cube: *mut NmogCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

/// Corrupts `clean` with a named noise case (`iid`, `noniid`, `stripe`,
/// `deadline`, `impulse`, `mixture`). When `metadata_json` is non-null it
/// receives a string to release with [`nmog_string_free`].
///
/// # Safety
/// `clean` must be a live handle, `case_name` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nmog_simulate(
    clean: *const NmogCube,
    case_name: *const c_char,
    seed: u64,
    out: *mut *mut NmogCube,
    metadata_json: *mut *mut c_char,
) -> NmogStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let clean = cube_ref(clean, "clean")?;
        let case: NoiseCase = str_arg(case_name, "case")?.parse()?;
        let (noisy, metadata) = corrupt(clean, &NoiseSpec::new(case, seed))?;
        if !metadata_json.is_null() {
            let json = CString::new(metadata.to_json()?).expect("JSON has no NUL");
            *metadata_json = json.into_raw();
        }
        put(out, new_cube(noisy));
        Ok(NmogStatus::Ok)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmog_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Denoises `noisy`. On [`NmogStatus::Diverged`] both outputs are still set
/// from the last finite state. `report` may be null.
///
/// # Safety
/// `noisy` must be a live handle, `config` readable, `out` writable, and
/// `report` null or writable.
#[no_mangle]
pub unsafe extern "C" fn nmog_denoise(
    noisy: *const NmogCube,
    config: *const NmogConfig,
    out: *mut *mut NmogCube,
    report: *mut *mut NmogReport,
) -> NmogStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let noisy = cube_ref(noisy, "noisy")?;
        let cfg = to_config(config.as_ref().ok_or_else(|| null("config"))?);
        let (clean, rep) = nmog::denoise(noisy, &cfg)?;
        let diverged = rep.divergence.clone();
        put(out, new_cube(clean));
        if !report.is_null() {
            let json = CString::new(rep.to_json()?).expect("JSON has no NUL");
            put(report, NmogReport { report: rep, json });
        }
        match diverged {
            Some(reason) => Err(Failure(
                NmogStatus::Diverged,
                format!("inference diverged at {reason}"),
            )),
            None => Ok(NmogStatus::Ok),
        }
    })
}

/// Rank-`rank` truncated-SVD restoration clipped to [0, 1].
///
/// # Safety
/// `cube` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nmog_svd_baseline(
    cube: *const NmogCube,
    rank: usize,
    out: *mut *mut NmogCube,
) -> NmogStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if rank == 0 {
            return Err(Failure(
                NmogStatus::InvalidArgument,
                "rank must be at least 1".into(),
            ));
        }
        put(
            out,
            new_cube(svd_baseline_cube(cube_ref(cube, "cube")?, rank)?),
        );
        Ok(NmogStatus::Ok)
    })
}

/// Mean PSNR (dB, peak 1) and mean SSIM of `test` against `reference`.
///
/// # Safety
/// Both cubes must be live handles; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn nmog_evaluate(
    reference: *const NmogCube,
    test: *const NmogCube,
    mpsnr: *mut f64,
    mssim: *mut f64,
) -> NmogStatus {
    guard(|| {
        let q = evaluate(cube_ref(reference, "reference")?, cube_ref(test, "test")?)?;
        if let Some(p) = mpsnr.as_mut() {
            *p = q.mpsnr;
        }
        if let Some(s) = mssim.as_mut() {
            *s = q.mssim;
        }
        Ok(NmogStatus::Ok)
    })
}

/// Report as JSON, owned by the report. Null when `report` is null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmog_report_json(report: *const NmogReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// Active rank at the end of the run, or 0 for a null report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmog_report_final_rank(report: *const NmogReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.final_rank)
}

/// Iterations run, or 0 for a null report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nmog_report_iterations(report: *const NmogReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.iterations_run)
}

/// Releases a report. Null is ignored.
///
/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nmog_report_free(report: *mut NmogReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
