//! C ABI over the `ginas` library.
//!
//! Every fallible function returns a [`GinasStatus`]; on failure the
//! message is available from [`ginas_last_error_message`] on the same
//! thread. Objects are opaque handles released with their `_free`
//! function. Strings returned to the caller are released with
//! [`ginas_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ginas::defense::{apply_defense, DefenseConfig};
use ginas::harness::{persist, run_attack, ExperimentConfig, ExperimentReport, HarnessMode};
use ginas::metrics;
use ginas::nas::{sample_genome, ArchGenome, SearchMode, DEFAULT_WIDTHS};
use ginas::search::kendall_tau;
use ginas::tensor::Tensor;
use ginas::victim::GradientSet;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GinasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Utf8 = 3,
    Io = 4,
    AttackFailed = 5,
    Panic = 6,
}

/// Experiment configuration handle.
pub struct GinasConfig(ExperimentConfig);

/// Result of one attack run.
pub struct GinasReport(ExperimentReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(GinasStatus, String);

impl From<ginas::Error> for Failure {
    fn from(e: ginas::Error) -> Self {
        let status = match e {
            ginas::Error::Io(_) => GinasStatus::Io,
            _ => GinasStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GinasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GinasStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GinasStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(GinasStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(s, what)?;
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(GinasStatus::Utf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn read_slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ginas_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library, released once.
#[no_mangle]
pub unsafe extern "C" fn ginas_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_default(out: *mut *mut GinasConfig) -> GinasStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(GinasConfig(ExperimentConfig::default())));
        Ok(())
    })
}

/// Parses a TOML configuration (a saved report is accepted as well).
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_from_toml(text: *const c_char, out: *mut *mut GinasConfig) -> GinasStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = ExperimentConfig::from_toml(read_str(text, "text")?)?;
        *out = Box::into_raw(Box::new(GinasConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_free(cfg: *mut GinasConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_set_seed(cfg: *mut GinasConfig, seed: u64) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).0.master_seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_set_candidates(cfg: *mut GinasConfig, n: usize) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).0.search.n = n;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_set_iterations(cfg: *mut GinasConfig, iterations: usize) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).0.recovery.iterations = iterations;
        Ok(())
    })
}

/// `mode` is `full`, `upsample_only`, `connection_only` or `fixed_genome`.
///
/// # Safety
/// `cfg` must be a valid handle and `mode` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_set_mode(cfg: *mut GinasConfig, mode: *const c_char) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).0.search.mode = read_str(mode, "mode")?.parse::<HarnessMode>()?;
        Ok(())
    })
}

/// `spec` uses the command-line syntax, e.g. `clip:4` or `noise:0.1`.
///
/// # Safety
/// `cfg` must be a valid handle and `spec` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_set_defense(cfg: *mut GinasConfig, spec: *const c_char) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        (*cfg).0.defense = read_str(spec, "spec")?.parse::<DefenseConfig>()?;
        Ok(())
    })
}

/// Serializes the configuration as TOML.
///
/// # Safety
/// `cfg` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_config_to_toml(cfg: *const GinasConfig, out: *mut *mut c_char) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        *out = to_c_string((*cfg).0.to_toml()?);
        Ok(())
    })
}

/// Runs the attack. A report is produced even when a stage fails; the
/// status is then `AttackFailed` and the message names the stage.
///
/// # Safety
/// `cfg` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_run_attack(cfg: *const GinasConfig, out: *mut *mut GinasReport) -> GinasStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(out, "out")?;
        let report = run_attack(&(*cfg).0);
        let failure = report.failure.clone();
        *out = Box::into_raw(Box::new(GinasReport(report)));
        match failure {
            None => Ok(()),
            Some(f) => Err(Failure(
                GinasStatus::AttackFailed,
                format!("stage {:?}: {}", f.stage, f.message),
            )),
        }
    })
}

/// # Safety
/// `report` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_free(report: *mut GinasReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `report` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_mean_psnr(report: *const GinasReport, out: *mut f64) -> GinasStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        *out = (*report)
            .0
            .mean_psnr()
            .ok_or_else(|| Failure(GinasStatus::AttackFailed, "report has no metrics".into()))?;
        Ok(())
    })
}

/// # Safety
/// `report` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_selected_index(report: *const GinasReport, out: *mut usize) -> GinasStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        *out = (*report)
            .0
            .selected
            .as_ref()
            .ok_or_else(|| Failure(GinasStatus::AttackFailed, "no candidate was selected".into()))?
            .genome_id;
        Ok(())
    })
}

/// # Safety
/// `report` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_candidate_count(report: *const GinasReport, out: *mut usize) -> GinasStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        *out = (*report).0.candidates.len();
        Ok(())
    })
}

/// Initial matching loss of candidate `index`.
///
/// # Safety
/// `report` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_candidate_loss(
    report: *const GinasReport,
    index: usize,
    out: *mut f64,
) -> GinasStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        let rows = &(*report).0.candidates;
        let row = rows.get(index).ok_or_else(|| {
            Failure(
                GinasStatus::InvalidArgument,
                format!("candidate {index} out of range for {}", rows.len()),
            )
        })?;
        *out = row.initial_loss;
        Ok(())
    })
}

/// The report as TOML.
///
/// # Safety
/// `report` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_to_toml(report: *const GinasReport, out: *mut *mut c_char) -> GinasStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        *out = to_c_string((*report).0.to_toml()?);
        Ok(())
    })
}

/// Writes the report, CSV tables and images into `dir`.
///
/// # Safety
/// `report` must be a valid handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ginas_report_persist(report: *mut GinasReport, dir: *const c_char) -> GinasStatus {
    guard(|| {
        non_null(report, "report")?;
        let dir = read_str(dir, "dir")?;
        persist(&mut (*report).0, Path::new(dir))?;
        Ok(())
    })
}

/// PSNR in dB of two equally long buffers with values in `[0, 1]`.
///
/// # Safety
/// `a` and `b` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ginas_psnr(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> GinasStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = metrics::psnr_slices(read_slice(a, len, "a")?, read_slice(b, len, "b")?)?;
        Ok(())
    })
}

/// SSIM of two planar `channels x height x width` images.
///
/// # Safety
/// `a` and `b` must point to `channels * height * width` values; `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn ginas_ssim(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> GinasStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = channels * height * width;
        let shape = [channels, height, width];
        let ta = Tensor::new(&shape, read_slice(a, len, "a")?.to_vec())?;
        let tb = Tensor::new(&shape, read_slice(b, len, "b")?.to_vec())?;
        *out = metrics::ssim(&ta, &tb)?;
        Ok(())
    })
}

/// Applies a defense to a flat gradient buffer. `spec` uses the
/// command-line syntax; `seed` drives the noise.
///
/// # Safety
/// `grad` and `out` must point to `len` values; `spec` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ginas_apply_defense(
    grad: *const f64,
    len: usize,
    spec: *const c_char,
    seed: u64,
    out: *mut f64,
) -> GinasStatus {
    guard(|| {
        non_null(out, "out")?;
        let mut cfg: DefenseConfig = read_str(spec, "spec")?.parse()?;
        cfg.seed = seed;
        let g = GradientSet::new(vec![Tensor::new(&[len], read_slice(grad, len, "grad")?.to_vec())?]);
        let d = apply_defense(&g, &cfg)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(d.tensors[0].data());
        Ok(())
    })
}

/// Tie-adjusted Kendall rank correlation of two buffers.
///
/// # Safety
/// `a` and `b` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ginas_kendall_tau(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> GinasStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = kendall_tau(read_slice(a, len, "a")?, read_slice(b, len, "b")?)?;
        Ok(())
    })
}

/// Samples a genome over the default widths and returns its text record.
/// `mode` is `full`, `upsample_only` or `connection_only`.
///
/// # Safety
/// `mode` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ginas_genome_sample(seed: u64, mode: *const c_char, out: *mut *mut c_char) -> GinasStatus {
    use rand::SeedableRng;
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let mode: SearchMode = read_str(mode, "mode")?.parse()?;
        let base = ArchGenome::baseline(&DEFAULT_WIDTHS, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        *out = to_c_string(sample_genome(&mut rng, mode, &base).to_record());
        Ok(())
    })
}
