//! C interface to `dynpred`.
//!
//! Every function returns a [`DpStatus`]; on failure the message is available
//! from [`dp_last_error_message`] on the same thread. Objects are opaque
//! handles owned by the caller and released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dynpred::bundle::{load_bundle, save_bundle, BundleError, DatasetTemplate, Manifest};
use dynpred::cli::{parse_config, CliError, Overrides};
use dynpred::data::{load_dataset_from_paths, Schema};
use dynpred::metrics::{brier_score, concordance_index, td_auc, MetricError};
use dynpred::pipeline::{fit_prc, PipelineError, PrcModel};
use dynpred::sim::{simulate_prclmm_data, simulate_t_weibull, SimConfig};
use dynpred::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Model = 5,
    Metric = 6,
    Bundle = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Longitudinal and survival data, optionally landmarked.
pub struct DpDataset {
    inner: Dataset,
}

/// A fitted model with the layout of its training data.
pub struct DpModel {
    model: PrcModel,
    template: DatasetTemplate,
    config_hash: String,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(DpStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Metric { .. } => DpStatus::Metric,
            PipelineError::Data(_) | PipelineError::NotLandmarked => DpStatus::Data,
            _ => DpStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        let status = match e {
            BundleError::Io { .. } => DpStatus::Io,
            _ => DpStatus::Bundle,
        };
        Failure(status, e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure(DpStatus::Metric, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e.class() {
            "config" => DpStatus::InvalidArgument,
            "io" => DpStatus::Io,
            "data" => DpStatus::Data,
            "metric" => DpStatus::Metric,
            "bundle" => DpStatus::Bundle,
            _ => DpStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DpStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(DpStatus::NullPointer, format!("`{name}` is null"))
}

/// Runs `f`, converting errors and panics to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset from survival and longitudinal CSV files. `schema_toml`
/// may be null for the default column names.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_dataset_load(
    survival_path: *const c_char,
    longitudinal_path: *const c_char,
    schema_toml: *const c_char,
    out: *mut *mut DpDataset,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = PathBuf::from(str_arg(survival_path, "survival_path")?);
        let l = PathBuf::from(str_arg(longitudinal_path, "longitudinal_path")?);
        let schema: Schema = match opt_str_arg(schema_toml, "schema_toml")? {
            Some(text) => toml::from_str(text).map_err(|e| invalid(format!("schema: {e}")))?,
            None => Schema::default(),
        };
        let ds = load_dataset_from_paths(&s, &l, &schema).map_err(|e| Failure(DpStatus::Data, e.to_string()))?;
        *out = Box::into_raw(Box::new(DpDataset { inner: ds }));
        Ok(())
    })
}

/// Simulates a dataset. `config_toml` holds simulation settings (null for
/// the defaults).
///
/// # Safety
/// `config_toml` is null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_dataset_simulate(config_toml: *const c_char, out: *mut *mut DpDataset) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg: SimConfig = match opt_str_arg(config_toml, "config_toml")? {
            Some(text) => toml::from_str(text).map_err(|e| invalid(format!("simulation config: {e}")))?,
            None => SimConfig::default(),
        };
        let (ds, _) = simulate_prclmm_data(&cfg).map_err(|e| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(DpDataset { inner: ds }));
        Ok(())
    })
}

/// Returns a new landmarked copy of `dataset`.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_dataset_landmark(
    dataset: *const DpDataset,
    landmark: f64,
    out: *mut *mut DpDataset,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let lm = ds
            .inner
            .apply_landmark(landmark)
            .map_err(|e| Failure(DpStatus::Data, e.to_string()))?;
        *out = Box::into_raw(Box::new(DpDataset { inner: lm }));
        Ok(())
    })
}

/// Number of subjects, or 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dp_dataset_n_subjects(dataset: *const DpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.n_subjects())
}

/// Number of observed events, or 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dp_dataset_n_events(dataset: *const DpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.n_events())
}

/// # Safety
/// `dataset` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_dataset_free(dataset: *mut DpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Fits the model on a landmarked dataset. `config_toml` uses the run
/// configuration keys (`y_names`, `fixed_terms`, `random_terms`, `baseline`,
/// `[penalty]`, `standardize`, `seed`, ...); null selects the defaults.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_model_fit(
    dataset: *const DpDataset,
    config_toml: *const c_char,
    workers: usize,
    out: *mut *mut DpModel,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let text = opt_str_arg(config_toml, "config_toml")?.unwrap_or("");
        let overrides = Overrides {
            workers: Some(workers.max(1)),
            ..Overrides::default()
        };
        let cfg = parse_config(text, &overrides)?;
        let pipeline = cfg.pipeline(&ds.inner);
        let model = fit_prc(&ds.inner, &pipeline, cfg.workers)?;
        *out = Box::into_raw(Box::new(DpModel {
            model,
            template: DatasetTemplate::from_dataset(&ds.inner),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }));
        Ok(())
    })
}

/// Writes the model bundle to directory `dir`.
///
/// # Safety
/// `model` must be a live handle; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dp_model_save(model: *const DpModel, dir: *const c_char) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        save_bundle(&dir, &m.model, &m.template, Manifest::new(&m.config_hash, m.seed))?;
        Ok(())
    })
}

/// Reads a model bundle from directory `dir`.
///
/// # Safety
/// `dir` NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_model_load(dir: *const c_char, out: *mut *mut DpModel) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let (model, template, manifest) = load_bundle(&dir)?;
        *out = Box::into_raw(Box::new(DpModel {
            model,
            template,
            config_hash: manifest.config_hash,
            seed: manifest.seed,
        }));
        Ok(())
    })
}

/// Predicted survival probabilities for every subject of a landmarked
/// dataset, written row-major (`n_subjects × n_times`) into `out`.
/// `out_len` is the capacity of `out` in elements; `out_rows` receives the
/// number of subjects even when the buffer is too small.
///
/// # Safety
/// Handles must be live; `times` has `n_times` elements; `out` has
/// `out_len` elements.
#[no_mangle]
pub unsafe extern "C" fn dp_model_predict(
    model: *const DpModel,
    dataset: *const DpDataset,
    times: *const f64,
    n_times: usize,
    out: *mut f64,
    out_len: usize,
    out_rows: *mut usize,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let times = slice_arg(times, n_times, "times")?;
        if times.is_empty() {
            return Err(invalid("no prediction times"));
        }
        let rows = ds.inner.n_subjects();
        if let Some(r) = out_rows.as_mut() {
            *r = rows;
        }
        let need = rows * times.len();
        if out_len < need {
            return Err(Failure(
                DpStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, {need} needed"),
            ));
        }
        if out.is_null() && need > 0 {
            return Err(null("out"));
        }
        let surv = m.model.predict(&ds.inner, times)?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        for i in 0..rows {
            for j in 0..times.len() {
                dst[i * times.len() + j] = surv[(i, j)];
            }
        }
        Ok(())
    })
}

/// Number of model coefficients (longitudinal summaries plus baseline
/// terms), or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dp_model_n_coefficients(model: *const DpModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cox.coefficients.len())
}

/// Copies the coefficients on the original covariate scale into `out`.
///
/// # Safety
/// `model` must be live; `out` has `out_len` elements.
#[no_mangle]
pub unsafe extern "C" fn dp_model_coefficients(model: *const DpModel, out: *mut f64, out_len: usize) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.model.cox.coefficients;
        if out_len < c.len() {
            return Err(Failure(
                DpStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, {} needed", c.len()),
            ));
        }
        if c.is_empty() {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, c.len()).copy_from_slice(c);
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_model_free(model: *mut DpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn metric_inputs<'a>(
    times: *const f64,
    events: *const u8,
    n: usize,
) -> Result<(&'a [f64], Vec<bool>), Failure> {
    let t = slice_arg(times, n, "times")?;
    let e = slice_arg(events, n, "events")?;
    Ok((t, e.iter().map(|&x| x != 0).collect()))
}

/// Harrell's concordance index of `risk` (higher means earlier events).
///
/// # Safety
/// Arrays have `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_concordance_index(
    times: *const f64,
    events: *const u8,
    risk: *const f64,
    n: usize,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (t, e) = metric_inputs(times, events, n)?;
        *out = concordance_index(t, &e, slice_arg(risk, n, "risk")?)?;
        Ok(())
    })
}

/// Cumulative/dynamic time-dependent AUC of `risk` at time `t`.
///
/// # Safety
/// Arrays have `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_td_auc(
    times: *const f64,
    events: *const u8,
    risk: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (tt, e) = metric_inputs(times, events, n)?;
        *out = td_auc(tt, &e, slice_arg(risk, n, "risk")?, t)?;
        Ok(())
    })
}

/// Inverse-probability-of-censoring weighted Brier score of predicted
/// survival probabilities `surv` at time `t`.
///
/// # Safety
/// Arrays have `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_brier_score(
    times: *const f64,
    events: *const u8,
    surv: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (tt, e) = metric_inputs(times, events, n)?;
        *out = brier_score(tt, &e, slice_arg(surv, n, "surv")?, t)?;
        Ok(())
    })
}

/// Draws Weibull times with survival `exp(−λ t^ν e^{lp})`, one per entry of
/// `linear_predictor`, into `out`.
///
/// # Safety
/// `linear_predictor` and `out` have `n` elements.
#[no_mangle]
pub unsafe extern "C" fn dp_simulate_weibull(
    lambda: f64,
    nu: f64,
    linear_predictor: *const f64,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        if !(lambda > 0.0 && nu > 0.0) {
            return Err(invalid("lambda and nu must be positive"));
        }
        let lp = slice_arg(linear_predictor, n, "linear_predictor")?;
        if n == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = simulate_t_weibull(lambda, nu, lp, &mut rng);
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&t);
        Ok(())
    })
}
