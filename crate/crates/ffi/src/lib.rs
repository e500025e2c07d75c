//! C interface to the gainsearch library.
//!
//! Objects are opaque handles created by `gs_*_new`-style functions and
//! released with the matching `gs_*_free`. Every fallible call returns a
//! [`GsStatus`]; on failure the message is kept per thread and can be copied
//! out with [`gs_last_error_message`]. Matrices are column-major with one
//! particle per column.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gainsearch::config::Config;
use gainsearch::experiment::{forward_model, recon_mesh, reconstruct, synthesize, Method};
use gainsearch::forward::{ForwardMode, ForwardOperator, ScaledUmot, UmotForward};
use gainsearch::measure::MeasurementSet;
use gainsearch::stochastic::{ksg_update, lsg_update};
use gainsearch::Error;
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    Mesh = 5,
    Solve = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsMethod {
    Ksg = 0,
    Lsg = 1,
    Gn = 2,
}

pub struct GsConfig(Config);

pub struct GsModel {
    cfg: Config,
    forward: UmotForward,
}

pub struct GsData(MeasurementSet);

pub struct GsReconstruction {
    values: Vec<f64>,
    nodes: Vec<usize>,
    iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> GsStatus {
    match e {
        Error::Mesh(_) => GsStatus::Mesh,
        Error::Assembly(_) | Error::Solve { .. } => GsStatus::Solve,
        Error::Geometry(_) | Error::Config(_) => GsStatus::InvalidArgument,
        Error::Dimension(_) => GsStatus::Dimension,
        Error::Numerical(_) => GsStatus::Numerical,
        Error::Iteration { source, .. } => status_of(source),
        Error::Parse { .. } => GsStatus::Parse,
        Error::Io(_) => GsStatus::Io,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (GsStatus, String)>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GsStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            GsStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (GsStatus, String)>;
}

impl<T> IntoFfi<T> for gainsearch::Result<T> {
    fn ffi(self) -> Result<T, (GsStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (GsStatus, String) {
    (GsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (GsStatus, String) {
    (GsStatus::InvalidArgument, msg.into())
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (GsStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (GsStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], (GsStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (GsStatus, String)> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn drop_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gs_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Built-in default configuration.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn gs_config_default(out: *mut *mut GsConfig) -> GsStatus {
    guard(|| put(out, GsConfig(Config::default())))
}

/// Configuration parsed from TOML text; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gs_config_from_toml(toml: *const c_char, out: *mut *mut GsConfig) -> GsStatus {
    guard(|| {
        let cfg = Config::from_toml(c_str(toml, "toml")?).ffi()?;
        cfg.validate().ffi()?;
        put(out, GsConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gs_config_free(cfg: *mut GsConfig) {
    drop_handle(cfg)
}

/// Builds the reconstruction mesh and forward model for `cfg`.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gs_model_new(cfg: *const GsConfig, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        let cfg = as_ref(cfg, "config")?.0.clone();
        let mesh = recon_mesh(&cfg).ffi()?;
        let forward = forward_model(&cfg, mesh).ffi()?;
        put(out, GsModel { cfg, forward })
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gs_model_free(model: *mut GsModel) {
    drop_handle(model)
}

/// Number of unknowns; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn gs_model_n_params(model: *const GsModel) -> usize {
    model.as_ref().map_or(0, |m| m.forward.n_params())
}

/// Number of measurements; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn gs_model_n_measurements(model: *const GsModel) -> usize {
    model.as_ref().map_or(0, |m| m.forward.n_measurements())
}

/// Evaluates the forward model at physical parameters `p` (cm^-2, one per
/// IR node) into `out`.
///
/// # Safety
/// `p` must hold `n_params` values and `out` room for `n_measurements`.
#[no_mangle]
pub unsafe extern "C" fn gs_model_evaluate(
    model: *const GsModel,
    p: *const f64,
    n_params: usize,
    out: *mut f64,
    n_measurements: usize,
) -> GsStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        if n_params != m.forward.n_params() || n_measurements != m.forward.n_measurements() {
            return Err((
                GsStatus::Dimension,
                format!(
                    "model maps {} parameters to {} measurements, got {n_params} and {n_measurements}",
                    m.forward.n_params(),
                    m.forward.n_measurements()
                ),
            ));
        }
        let p = slice(p, n_params, "p")?;
        let out = slice_mut(out, n_measurements, "out")?;
        let op = ScaledUmot { forward: &m.forward, p_scale: 1.0, mode: ForwardMode::from(m.cfg.solver.forward_mode) };
        out.copy_from_slice(&op.evaluate(p).ffi()?);
        Ok(())
    })
}

/// Synthetic measurements of the configured phantom on the finer data mesh.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gs_data_synthesize(
    cfg: *const GsConfig,
    noise_frac: f64,
    seed: u64,
    out: *mut *mut GsData,
) -> GsStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "config")?.0;
        if !(noise_frac >= 0.0 && noise_frac.is_finite()) {
            return Err(invalid("noise_frac must be finite and non-negative"));
        }
        put(out, GsData(synthesize(cfg, noise_frac, seed).ffi()?.set))
    })
}

/// Reads a measurement CSV written by the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gs_data_read_csv(path: *const c_char, out: *mut *mut GsData) -> GsStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        put(out, GsData(MeasurementSet::read_csv_file(Path::new(path)).ffi()?))
    })
}

/// Number of measurements; 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live data handle.
#[no_mangle]
pub unsafe extern "C" fn gs_data_len(data: *const GsData) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Copies the measurement values into `out`.
///
/// # Safety
/// `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn gs_data_values(data: *const GsData, out: *mut f64, len: usize) -> GsStatus {
    guard(|| {
        let d = &as_ref(data, "data")?.0;
        if len != d.len() {
            return Err((GsStatus::Dimension, format!("data has {} values, buffer holds {len}", d.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(&d.values);
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gs_data_free(data: *mut GsData) {
    drop_handle(data)
}

/// Reconstructs p from `data` with the model's configuration.
///
/// # Safety
/// Handles must be live and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gs_reconstruct(
    model: *const GsModel,
    data: *const GsData,
    method: GsMethod,
    seed: u64,
    out: *mut *mut GsReconstruction,
) -> GsStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let d = &as_ref(data, "data")?.0;
        let method = match method {
            GsMethod::Ksg => Method::Ksg,
            GsMethod::Lsg => Method::Lsg,
            GsMethod::Gn => Method::Gn,
        };
        let r = reconstruct(&m.cfg, &m.forward, d, method, None, seed).ffi()?;
        let iterations = match (&r.stochastic, &r.gn) {
            (Some(s), _) => s.history.len(),
            (_, Some(g)) => g.history.len(),
            _ => 0,
        };
        put(out, GsReconstruction { values: r.field.values, nodes: r.field.ir_nodes, iterations })
    })
}

/// Number of reconstructed values; 0 for a null handle.
///
/// # Safety
/// `rec` must be null or a live reconstruction handle.
#[no_mangle]
pub unsafe extern "C" fn gs_reconstruction_len(rec: *const GsReconstruction) -> usize {
    rec.as_ref().map_or(0, |r| r.values.len())
}

/// Iterations performed; 0 for a null handle.
///
/// # Safety
/// `rec` must be null or a live reconstruction handle.
#[no_mangle]
pub unsafe extern "C" fn gs_reconstruction_iterations(rec: *const GsReconstruction) -> usize {
    rec.as_ref().map_or(0, |r| r.iterations)
}

/// Copies the field (cm^-2) and, when `nodes` is non-null, the matching
/// global mesh node indices.
///
/// # Safety
/// `values` and non-null `nodes` must have room for `len` entries.
#[no_mangle]
pub unsafe extern "C" fn gs_reconstruction_field(
    rec: *const GsReconstruction,
    values: *mut f64,
    nodes: *mut usize,
    len: usize,
) -> GsStatus {
    guard(|| {
        let r = as_ref(rec, "reconstruction")?;
        if len != r.values.len() {
            return Err((GsStatus::Dimension, format!("field has {} values, buffer holds {len}", r.values.len())));
        }
        slice_mut(values, len, "values")?.copy_from_slice(&r.values);
        if !nodes.is_null() {
            std::slice::from_raw_parts_mut(nodes, len).copy_from_slice(&r.nodes);
        }
        Ok(())
    })
}

/// # Safety
/// `rec` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gs_reconstruction_free(rec: *mut GsReconstruction) {
    drop_handle(rec)
}

struct Shapes<'a> {
    predicted: DMatrix<f64>,
    forward: DMatrix<f64>,
    obs: &'a [f64],
}

unsafe fn shapes<'a>(
    n_params: usize,
    n_members: usize,
    n_obs: usize,
    predicted: *const f64,
    forward: *const f64,
    obs: *const f64,
) -> Result<Shapes<'a>, (GsStatus, String)> {
    if n_params == 0 || n_obs == 0 || n_members < 2 {
        return Err((GsStatus::Dimension, "need n_params, n_obs >= 1 and at least two members".into()));
    }
    let np = n_params.checked_mul(n_members).ok_or_else(|| invalid("size overflow"))?;
    let nm = n_obs.checked_mul(n_members).ok_or_else(|| invalid("size overflow"))?;
    Ok(Shapes {
        predicted: DMatrix::from_column_slice(n_params, n_members, slice(predicted, np, "predicted")?),
        forward: DMatrix::from_column_slice(n_obs, n_members, slice(forward, nm, "forward")?),
        obs: slice(obs, n_obs, "observation")?,
    })
}

/// Kalman-type gain update of an ensemble. `predicted` is n_params x n_members,
/// `forward` is n_obs x n_members, `delta_m` the observation increment.
/// `out` receives the updated n_params x n_members ensemble and may alias
/// `predicted`.
///
/// # Safety
/// Buffers must hold the sizes stated above.
#[no_mangle]
pub unsafe extern "C" fn gs_ksg_update(
    n_params: usize,
    n_members: usize,
    n_obs: usize,
    predicted: *const f64,
    forward: *const f64,
    delta_m: *const f64,
    delta_tau: f64,
    alpha: f64,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        let s = shapes(n_params, n_members, n_obs, predicted, forward, delta_m)?;
        if !(delta_tau > 0.0 && delta_tau.is_finite()) || !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(invalid("delta_tau must be positive and alpha non-negative"));
        }
        let r = ksg_update(&s.predicted, &s.forward, s.obs, delta_tau, alpha).ffi()?;
        slice_mut(out, n_params * n_members, "out")?.copy_from_slice(r.as_slice());
        Ok(())
    })
}

/// Least-squares gain update towards the pseudo-measurement `m_next`, with
/// the same layout as [`gs_ksg_update`].
///
/// # Safety
/// Buffers must hold the sizes stated for [`gs_ksg_update`].
#[no_mangle]
pub unsafe extern "C" fn gs_lsg_update(
    n_params: usize,
    n_members: usize,
    n_obs: usize,
    predicted: *const f64,
    forward: *const f64,
    m_next: *const f64,
    sigma_eta: f64,
    alpha: f64,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        let s = shapes(n_params, n_members, n_obs, predicted, forward, m_next)?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha must be non-negative"));
        }
        let r = lsg_update(&s.predicted, &s.forward, s.obs, sigma_eta, alpha).ffi()?;
        slice_mut(out, n_params * n_members, "out")?.copy_from_slice(r.as_slice());
        Ok(())
    })
}
