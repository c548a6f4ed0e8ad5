//! C ABI over the climath library.
//!
//! Every fallible call returns a [`ClimathStatus`]; on failure the message is
//! available from [`climath_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use climath::experiment::{run, RunConfig, RunOptions, ScenarioId};
use climath::ntk::{adaptive_weights, PerLoss};
use climath::pdemodel::{settling_velocity, TruthCase};
use climath::synthgen::{read_observations, solve_forward, FieldSeries, ForwardProblem, Grid, ObservationSet, Tau};
use climath::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClimathStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Structural = 4,
    Io = 5,
    Parse = 6,
    DegenerateKernel = 7,
    MissingArtifacts = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// Ground-truth problem selector, passed as `int32_t` to the functions taking a case.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClimathCase {
    Constant2d = 0,
    Variable2d = 1,
    Height3d = 2,
}

fn case_arg(id: i32) -> Result<TruthCase, (ClimathStatus, String)> {
    match id {
        x if x == ClimathCase::Constant2d as i32 => Ok(TruthCase::Constant2d),
        x if x == ClimathCase::Variable2d as i32 => Ok(TruthCase::Variable2d),
        x if x == ClimathCase::Height3d as i32 => Ok(TruthCase::Height3d),
        _ => Err((ClimathStatus::OutOfRange, format!("unknown case {id}"))),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> ClimathStatus {
    match e {
        Error::Structural(_) => ClimathStatus::Structural,
        Error::Numeric(_) => ClimathStatus::Numeric,
        Error::Config(_) | Error::Json(_) => ClimathStatus::Config,
        Error::DegenerateKernel(_) => ClimathStatus::DegenerateKernel,
        Error::Parse { .. } => ClimathStatus::Parse,
        Error::MissingArtifacts(_) => ClimathStatus::MissingArtifacts,
        Error::Io { .. } => ClimathStatus::Io,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), (ClimathStatus, String)>) -> ClimathStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ClimathStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside climath");
            ClimathStatus::Panic
        }
    }
}

fn lib(e: Error) -> (ClimathStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ClimathStatus, String) {
    (ClimathStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ClimathStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (ClimathStatus::Config, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (ClimathStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn check_point(case: TruthCase, point: &[f64]) -> Result<(), (ClimathStatus, String)> {
    let want = case.spatial_dims() + 1;
    if point.len() != want {
        return Err((
            ClimathStatus::OutOfRange,
            format!("point has {} coordinates, expected {want}", point.len()),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn climath_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn climath_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Settling velocity derived from the particle constants.
#[no_mangle]
pub extern "C" fn climath_settling_velocity() -> f64 {
    settling_velocity()
}

/// True source at `point = (x, y[, z], t)`.
#[no_mangle]
pub unsafe extern "C" fn climath_truth_source(case: i32, point: *const f64, len: usize, out: *mut f64) -> ClimathStatus {
    guard(|| {
        let p = slice_arg(point, len, "point")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let case = case_arg(case)?;
        check_point(case, p)?;
        *out = case.source(p);
        Ok(())
    })
}

/// True velocity component `axis` at `point`.
#[no_mangle]
pub unsafe extern "C" fn climath_truth_velocity(
    case: i32,
    axis: usize,
    point: *const f64,
    len: usize,
    out: *mut f64,
) -> ClimathStatus {
    truth_coefficient(case, axis, point, len, out, true)
}

/// True diffusion along `axis` at `point`.
#[no_mangle]
pub unsafe extern "C" fn climath_truth_diffusion(
    case: i32,
    axis: usize,
    point: *const f64,
    len: usize,
    out: *mut f64,
) -> ClimathStatus {
    truth_coefficient(case, axis, point, len, out, false)
}

unsafe fn truth_coefficient(
    case: i32,
    axis: usize,
    point: *const f64,
    len: usize,
    out: *mut f64,
    velocity: bool,
) -> ClimathStatus {
    guard(|| {
        let p = slice_arg(point, len, "point")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let case = case_arg(case)?;
        check_point(case, p)?;
        if axis >= case.spatial_dims() {
            return Err((ClimathStatus::OutOfRange, format!("axis {axis} out of range")));
        }
        *out = if velocity {
            case.velocity(axis, p)
        } else {
            case.diffusion(axis, p)
        };
        Ok(())
    })
}

/// Adaptive loss weights `lambda = Tr(K) / Tr(K_aa)` over `(r, b, z, v)`.
/// Pass `with_velocity = 0` to ignore the fourth entry.
#[no_mangle]
pub unsafe extern "C" fn climath_adaptive_weights(
    traces: *const f64,
    previous: *const f64,
    with_velocity: i32,
    out: *mut f64,
) -> ClimathStatus {
    guard(|| {
        let t = slice_arg(traces, 4, "traces")?;
        let p = slice_arg(previous, 4, "previous")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let wv = with_velocity != 0;
        let mk = |s: &[f64]| PerLoss {
            r: s[0],
            b: s[1],
            z: s[2],
            v: wv.then_some(s[3]),
        };
        let w = adaptive_weights(&mk(t), &mk(p)).map_err(lib)?;
        let o = std::slice::from_raw_parts_mut(out, 4);
        o.copy_from_slice(&[w.r, w.b, w.z, w.v.unwrap_or(0.0)]);
        Ok(())
    })
}

/// Configured experiment.
pub struct ClimathRun {
    config: RunConfig,
    metrics: Option<String>,
}

/// Creates a run from a scenario preset (`"A1"`, `"A2"`, `"B"` or `"C"`).
#[no_mangle]
pub unsafe extern "C" fn climath_run_new(scenario: *const c_char, paper_scale: i32, out: *mut *mut ClimathRun) -> ClimathStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let id: ScenarioId = str_arg(scenario, "scenario")?.parse().map_err(lib)?;
        let run = ClimathRun {
            config: RunConfig::preset(id, paper_scale != 0),
            metrics: None,
        };
        *out = Box::into_raw(Box::new(run));
        Ok(())
    })
}

/// Applies one `dotted.key=value` override.
#[no_mangle]
pub unsafe extern "C" fn climath_run_set(run: *mut ClimathRun, key_value: *const c_char) -> ClimathStatus {
    guard(|| {
        let r = run.as_mut().ok_or_else(|| null("run"))?;
        let kv = str_arg(key_value, "key_value")?;
        r.config = r.config.with_overrides(&[kv.to_string()]).map_err(lib)?;
        Ok(())
    })
}

/// Generates data, trains and writes every artifact into `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn climath_run_execute(run: *mut ClimathRun, out_dir: *const c_char) -> ClimathStatus {
    guard(|| {
        let r = run.as_mut().ok_or_else(|| null("run"))?;
        let dir = str_arg(out_dir, "out_dir")?;
        let outcome = run_impl(&r.config, Path::new(dir)).map_err(lib)?;
        r.metrics = Some(outcome);
        Ok(())
    })
}

fn run_impl(cfg: &RunConfig, dir: &Path) -> climath::Result<String> {
    Ok(run(cfg, dir, RunOptions::default())?.metrics.to_csv())
}

/// Looks up a metric of an executed run, e.g. `("V_x", "rel_error")` or `("u_t1", "rel_l2")`.
#[no_mangle]
pub unsafe extern "C" fn climath_run_metric(
    run: *const ClimathRun,
    name: *const c_char,
    quantity: *const c_char,
    out: *mut f64,
) -> ClimathStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let name = str_arg(name, "name")?;
        let quantity = str_arg(quantity, "quantity")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let csv = r
            .metrics
            .as_ref()
            .ok_or_else(|| (ClimathStatus::MissingArtifacts, "run has not been executed".to_string()))?;
        let value = csv
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f.len() == 4 && f[1] == name && f[2] == quantity).then(|| f[3].parse::<f64>().ok())
            })
            .next()
            .flatten()
            .ok_or_else(|| (ClimathStatus::OutOfRange, format!("no metric {name}/{quantity}")))?;
        *out = value;
        Ok(())
    })
}

/// Effective configuration as TOML; release with [`climath_string_free`].
#[no_mangle]
pub unsafe extern "C" fn climath_run_config(run: *const ClimathRun) -> *mut c_char {
    match run.as_ref() {
        Some(r) => CString::new(r.config.to_toml()).map_or(ptr::null_mut(), CString::into_raw),
        None => {
            set_error("run is null");
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn climath_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn climath_run_free(run: *mut ClimathRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Parsed observation file.
pub struct ClimathObservations {
    set: ObservationSet,
}

/// One reading; `kind` is 0 for pointwise (`t0 = t1 = t`) and 1 for a window mean.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClimathObservation {
    pub kind: u32,
    pub dims: u32,
    pub x: [f64; 3],
    pub t0: f64,
    pub t1: f64,
    pub intervals: u32,
    pub clean: f64,
    pub noisy: f64,
    pub sigma: f64,
}

#[no_mangle]
pub unsafe extern "C" fn climath_obs_read(path: *const c_char, out: *mut *mut ClimathObservations) -> ClimathStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let set = read_observations(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(ClimathObservations { set }));
        Ok(())
    })
}

/// Number of readings, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn climath_obs_len(obs: *const ClimathObservations) -> usize {
    obs.as_ref().map_or(0, |o| o.set.len())
}

#[no_mangle]
pub unsafe extern "C" fn climath_obs_get(
    obs: *const ClimathObservations,
    index: usize,
    out: *mut ClimathObservation,
) -> ClimathStatus {
    guard(|| {
        let o = obs.as_ref().ok_or_else(|| null("obs"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = o
            .set
            .entries
            .get(index)
            .ok_or_else(|| (ClimathStatus::OutOfRange, format!("index {index} out of range")))?;
        let mut x = [0.0; 3];
        x[..e.x.len()].copy_from_slice(&e.x);
        let (kind, t0, t1, intervals) = match e.tau {
            Tau::Pointwise { t } => (0, t, t, 0),
            Tau::Accumulative { t0, t1, intervals } => (1, t0, t1, intervals as u32),
        };
        *out = ClimathObservation {
            kind,
            dims: e.x.len() as u32,
            x,
            t0,
            t1,
            intervals,
            clean: e.clean,
            noisy: e.noisy,
            sigma: e.sigma,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn climath_obs_free(obs: *mut ClimathObservations) {
    if !obs.is_null() {
        drop(Box::from_raw(obs));
    }
}

/// Finite-difference solution of a ground-truth problem.
pub struct ClimathSeries {
    series: FieldSeries,
}

/// Solves `case` on an `n`-cell grid per axis with `n_steps` time steps on `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn climath_forward_solve(
    case: i32,
    n: usize,
    n_steps: usize,
    out: *mut *mut ClimathSeries,
) -> ClimathStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let case = case_arg(case)?;
        let grid = Grid::new(case.spatial_dims(), n, n_steps).map_err(lib)?;
        let series = solve_forward(&ForwardProblem::truth(case), grid).map_err(lib)?;
        *out = Box::into_raw(Box::new(ClimathSeries { series }));
        Ok(())
    })
}

/// Number of stored snapshots (`n_steps + 1`), 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn climath_series_snapshots(series: *const ClimathSeries) -> usize {
    series.as_ref().map_or(0, |s| s.series.snapshots.len())
}

/// Multilinear interpolation of snapshot `step` at spatial point `x`.
#[no_mangle]
pub unsafe extern "C" fn climath_series_sample(
    series: *const ClimathSeries,
    step: usize,
    x: *const f64,
    dims: usize,
    out: *mut f64,
) -> ClimathStatus {
    guard(|| {
        let s = series.as_ref().ok_or_else(|| null("series"))?;
        let x = slice_arg(x, dims, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if step >= s.series.snapshots.len() {
            return Err((ClimathStatus::OutOfRange, format!("step {step} out of range")));
        }
        *out = s.series.interpolate(step, x).map_err(lib)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn climath_series_free(series: *mut ClimathSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}
