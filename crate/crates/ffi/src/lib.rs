//! C ABI over `aud-core`.
//!
//! Every fallible function returns an [`AudStatus`]; on failure the message
//! is available from [`aud_last_error`] on the same thread. Objects are
//! opaque handles created by `*_load`/`*_from_*` functions and released with
//! the matching `*_free`. Matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aud_core::dataio::read_wav;
use aud_core::features::{compute_logmel_aud, compute_logmel_vc, LogMelSpectrogram, Recipe};
use aud_core::hmmvae::{self, HmmVae};
use aud_core::metrics::{self, BoundaryOptions, BoundarySet, ConfusionMatrix};
use aud_core::pipeline::{Experiment, ExperimentConfig, RunOptions};
use aud_core::Error;
use ndarray::{Array1, Array2, ArrayView2};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Parse = 6,
    Audio = 7,
    Checkpoint = 8,
    Config = 9,
    Stage = 10,
    Diverged = 11,
    Panic = 12,
}

/// Feature front end for [`aud_features_from_wav`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudFeatureKind {
    /// 80-band log-mel, not normalized.
    Conversion = 0,
    /// 40-band log-mel with deltas and delta-deltas, per-utterance normalized.
    UnitDiscovery = 1,
}

/// Boundary precision, recall and F-score.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudBoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub matches: usize,
    pub hyp_count: usize,
    pub ref_count: usize,
}

/// A feature matrix (frames x width).
pub struct AudFeatures(LogMelSpectrogram);

/// A trained HMM-VAE.
pub struct AudHmmVae(HmmVae);

/// A configured experiment bound to its run directory.
pub struct AudExperiment(Experiment);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> AudStatus {
    match err {
        Error::Parse { .. } | Error::DuplicateId { .. } | Error::Json(_) => AudStatus::Parse,
        Error::Audio { .. } => AudStatus::Audio,
        Error::InvalidArgument(_) => AudStatus::InvalidArgument,
        Error::Shape(_) => AudStatus::Shape,
        Error::NonFinite(_) => AudStatus::NonFinite,
        Error::Diverged { .. } => AudStatus::Diverged,
        Error::Checkpoint(_) => AudStatus::Checkpoint,
        Error::Utterance { source, .. } => status_of(source),
        Error::Stage { .. } => AudStatus::Stage,
        Error::Config(_) => AudStatus::Config,
        Error::Io(_) => AudStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AudStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AudStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("`{what}` is NULL"));
            AudStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            AudStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be NULL or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(std::slice::from_raw_parts(non_null(p, what)?, len))
}

/// # Safety
/// `p` must be NULL or point to a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    let s = CStr::from_ptr(non_null(p, what)?).to_str().map_err(|_| {
        Failure::Core(Error::InvalidArgument(format!("`{what}` is not valid UTF-8")))
    })?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `p` must be NULL or point to `rows * cols` readable doubles.
unsafe fn matrix<'a>(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<ArrayView2<'a, f64>, Failure> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Shape(format!("{rows} x {cols} overflows")))?;
    let data = slice(p, len, what)?;
    Ok(ArrayView2::from_shape((rows, cols), data).expect("length checked"))
}

/// # Safety
/// `out` must be NULL or writable.
unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    non_null(out, what)?;
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a
/// successful one. Valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn aud_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Normalized mutual information in percent of a `rows x cols` confusion
/// matrix (rows: reference labels, columns: hypothesis units).
///
/// # Safety
/// `counts` must point to `rows * cols` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aud_nmi(counts: *const u64, rows: usize, cols: usize, out: *mut f64) -> AudStatus {
    guard(|| {
        let data = slice(counts, rows.saturating_mul(cols), "counts")?;
        let cm = ConfusionMatrix::from_counts(Array2::from_shape_vec((rows, cols), data.to_vec()).map_err(|e| Error::Shape(e.to_string()))?);
        write_out(out, metrics::nmi(&cm)?, "out")
    })
}

/// Cluster purity in [0, 1] of a `rows x cols` confusion matrix.
///
/// # Safety
/// `counts` must point to `rows * cols` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aud_cluster_purity(counts: *const u64, rows: usize, cols: usize, out: *mut f64) -> AudStatus {
    guard(|| {
        let data = slice(counts, rows.saturating_mul(cols), "counts")?;
        let cm = ConfusionMatrix::from_counts(Array2::from_shape_vec((rows, cols), data.to_vec()).map_err(|e| Error::Shape(e.to_string()))?);
        write_out(out, metrics::cluster_purity(&cm)?, "out")
    })
}

/// Boundary scores of one utterance. Times are in seconds, strictly
/// increasing, and exclude the utterance edges.
///
/// # Safety
/// `hyp` and `reference` must point to `hyp_len` and `ref_len` values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aud_boundary_fscore(
    hyp: *const f64,
    hyp_len: usize,
    reference: *const f64,
    ref_len: usize,
    collar: f64,
    out: *mut AudBoundaryScore,
) -> AudStatus {
    guard(|| {
        let h = BoundarySet::new("utterance", slice(hyp, hyp_len, "hyp")?.to_vec(), false)?;
        let r = BoundarySet::new("utterance", slice(reference, ref_len, "reference")?.to_vec(), false)?;
        let opts = BoundaryOptions {
            collar,
            ..BoundaryOptions::default()
        };
        let s = metrics::boundary_fscore(&[h], &[r], &opts)?;
        write_out(
            out,
            AudBoundaryScore {
                precision: s.precision,
                recall: s.recall,
                fscore: s.fscore,
                matches: s.matches,
                hyp_count: s.hyp_count,
                ref_count: s.ref_count,
            },
            "out",
        )
    })
}

/// Most likely state path through a trellis of log scores.
///
/// # Safety
/// `log_initial` holds `states` values, `log_transitions` `states * states`
/// (row: from, column: to), `emissions` `frames * states`; `path_out` must
/// have room for `frames` entries and `log_prob_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aud_viterbi(
    log_initial: *const f64,
    log_transitions: *const f64,
    emissions: *const f64,
    frames: usize,
    states: usize,
    path_out: *mut usize,
    log_prob_out: *mut f64,
) -> AudStatus {
    guard(|| {
        let init = Array1::from(slice(log_initial, states, "log_initial")?.to_vec());
        let trans = matrix(log_transitions, states, states, "log_transitions")?.to_owned();
        let emit = matrix(emissions, frames, states, "emissions")?.to_owned();
        non_null(path_out, "path_out")?;
        non_null(log_prob_out, "log_prob_out")?;
        let (path, logp) = hmmvae::viterbi(&init, &trans, &emit)?;
        ptr::copy_nonoverlapping(path.as_ptr(), path_out, path.len());
        log_prob_out.write(logp);
        Ok(())
    })
}

/// Computes features of a WAV file (any rate; resampled to 16 kHz).
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aud_features_from_wav(
    path: *const c_char,
    kind: AudFeatureKind,
    out: *mut *mut AudFeatures,
) -> AudStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        non_null(out, "out")?;
        let wave = read_wav(&path)?;
        let feat = match kind {
            AudFeatureKind::Conversion => compute_logmel_vc(&wave)?,
            AudFeatureKind::UnitDiscovery => compute_logmel_aud(&wave)?,
        };
        out.write(Box::into_raw(Box::new(AudFeatures(feat))));
        Ok(())
    })
}

/// Number of frames, or 0 for NULL.
///
/// # Safety
/// `features` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aud_features_frames(features: *const AudFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.0.frames())
}

/// Values per frame, or 0 for NULL.
///
/// # Safety
/// `features` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aud_features_width(features: *const AudFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.0.width())
}

/// Row-major `frames x width` values, owned by the handle.
///
/// # Safety
/// `features` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aud_features_data(features: *const AudFeatures) -> *const f64 {
    features
        .as_ref()
        .and_then(|f| f.0.values.as_slice())
        .map_or(ptr::null(), <[f64]>::as_ptr)
}

/// # Safety
/// `features` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn aud_features_free(features: *mut AudFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Loads an HMM-VAE model or trainer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aud_hmmvae_load(path: *const c_char, out: *mut *mut AudHmmVae) -> AudStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        non_null(out, "out")?;
        let model = HmmVae::load(&path)?;
        out.write(Box::into_raw(Box::new(AudHmmVae(model))));
        Ok(())
    })
}

/// Feature width the model expects, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aud_hmmvae_feature_dim(model: *const AudHmmVae) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.feature_dim)
}

/// Number of acoustic units, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aud_hmmvae_units(model: *const AudHmmVae) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.units)
}

/// Unit label of every frame of one utterance's features.
///
/// # Safety
/// `model` must be a live handle, `features` must point to
/// `frames * width` values and `units_out` must have room for `frames`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn aud_hmmvae_decode(
    model: *const AudHmmVae,
    features: *const f64,
    frames: usize,
    width: usize,
    units_out: *mut usize,
) -> AudStatus {
    guard(|| {
        let model = &non_null(model, "model")?.as_ref().expect("checked").0;
        let values = matrix(features, frames, width, "features")?.to_owned();
        non_null(units_out, "units_out")?;
        let feat = LogMelSpectrogram::new(values, width, Recipe::Aud);
        let decoded = hmmvae::decode_to_units(std::slice::from_ref(&feat), model)?;
        let units = decoded[0].frame_units();
        ptr::copy_nonoverlapping(units.as_ptr(), units_out, units.len());
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn aud_hmmvae_free(model: *mut AudHmmVae) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads and validates an experiment configuration file.
///
/// # Safety
/// `config_path` must be a NUL-terminated UTF-8 string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aud_experiment_load(config_path: *const c_char, out: *mut *mut AudExperiment) -> AudStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        non_null(out, "out")?;
        let exp = Experiment::new(ExperimentConfig::load(&path)?)?;
        out.write(Box::into_raw(Box::new(AudExperiment(exp))));
        Ok(())
    })
}

/// Runs every stage and writes the report. With `resume` false an existing
/// run directory is refused.
///
/// # Safety
/// `experiment` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aud_experiment_run(experiment: *const AudExperiment, resume: bool) -> AudStatus {
    guard(|| {
        let exp = &non_null(experiment, "experiment")?.as_ref().expect("checked").0;
        exp.run(&RunOptions {
            resume,
            ..RunOptions::default()
        })?;
        Ok(())
    })
}

/// # Safety
/// `experiment` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn aud_experiment_free(experiment: *mut AudExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}
