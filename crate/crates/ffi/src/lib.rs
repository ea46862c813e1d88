//! C ABI over the demodulation toolkit.
//!
//! Handles are opaque pointers created and destroyed by this library.
//! Every fallible call returns a [`WsiStatus`]; on any status other than
//! `Ok` a message is available from [`wsi_last_error_message`] until the
//! next failing call on the same thread. Output parameters are written
//! only when the call succeeds.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;

use wsi_demod::error::Error;
use wsi_demod::estimators::carre;
use wsi_demod::fisher::{crb, spcrb};
use wsi_demod::net::{load_weights, Network};
use wsi_demod::signal::{mean_intensities, SceneParams, WavenumberGrid};

/// Outcome of an FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WsiStatus {
    /// The call succeeded and all output parameters are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were outside the supported domain.
    InvalidParameter = 2,
    /// A file could not be read.
    Io = 3,
    /// A file was read but its contents are not a valid artifact.
    MalformedFile = 4,
    /// The estimator rejected this input; not a programming error.
    EstimateFailed = 5,
    /// Any other failure.
    Internal = 6,
}

/// Opaque wavenumber grid handle.
pub struct WsiGrid(WavenumberGrid);

/// Opaque trained-network handle.
pub struct WsiNetwork(Network);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: WsiStatus, message: impl Display) -> WsiStatus {
    let text = CString::new(message.to_string())
        .unwrap_or_else(|_| CString::new("error message contained a nul byte").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
    status
}

fn fail_error(err: Error) -> WsiStatus {
    let status = match &err {
        Error::InvalidParameter(_)
        | Error::InvalidDecomposition { .. }
        | Error::SingularModel { .. }
        | Error::SingularInformation { .. }
        | Error::NonPositiveSigma(_) => WsiStatus::InvalidParameter,
        Error::Io(_) => WsiStatus::Io,
        Error::Format { .. } => WsiStatus::MalformedFile,
        Error::Estimate(_) => WsiStatus::EstimateFailed,
        _ => WsiStatus::Internal,
    };
    fail(status, err)
}

/// Message for the most recent failing call on this thread. Never null;
/// empty before the first failure. The pointer is invalidated by the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn wsi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn wsi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a grid of four evenly spaced wavenumbers. `k1` is the first
/// wavenumber in rad/um, `dk` the spacing, `gain` the conversion gain in
/// electrons per ADU, `adu_max` the saturation level.
///
/// # Safety
/// `out` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn wsi_grid_new_even(
    k1: f64,
    dk: f64,
    gain: f64,
    adu_max: u16,
    out: *mut *mut WsiGrid,
) -> WsiStatus {
    if out.is_null() {
        return fail(WsiStatus::NullArgument, "out is null");
    }
    match WavenumberGrid::evenly_spaced(k1, dk, gain, adu_max) {
        Ok(grid) => {
            unsafe { *out = Box::into_raw(Box::new(WsiGrid(grid))) };
            WsiStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Create the default acquisition grid.
///
/// # Safety
/// `out` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn wsi_grid_default(out: *mut *mut WsiGrid) -> WsiStatus {
    if out.is_null() {
        return fail(WsiStatus::NullArgument, "out is null");
    }
    unsafe { *out = Box::into_raw(Box::new(WsiGrid(WavenumberGrid::default_grid()))) };
    WsiStatus::Ok
}

/// Release a grid handle. Accepts null.
///
/// # Safety
/// `grid` must be null or a pointer returned by a grid constructor that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn wsi_grid_free(grid: *mut WsiGrid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Reference wavenumber (mean of the four) in rad/um.
///
/// # Safety
/// `grid` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wsi_grid_k0(grid: *const WsiGrid, out: *mut f64) -> WsiStatus {
    if grid.is_null() || out.is_null() {
        return fail(WsiStatus::NullArgument, "grid or out is null");
    }
    unsafe { *out = (*grid).0.k0() };
    WsiStatus::Ok
}

/// Noise-free mean intensities in ADU for one scene, written to `out4[0..4]`.
///
/// # Safety
/// `grid` must be a valid handle and `out4` must point to four writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn wsi_mean_intensities(
    grid: *const WsiGrid,
    alpha: f64,
    visibility: f64,
    opl_um: f64,
    out4: *mut f64,
) -> WsiStatus {
    if grid.is_null() || out4.is_null() {
        return fail(WsiStatus::NullArgument, "grid or out4 is null");
    }
    let p = match SceneParams::new(alpha, visibility, opl_um) {
        Ok(p) => p,
        Err(e) => return fail_error(e),
    };
    let means = mean_intensities(&p, unsafe { &(*grid).0 });
    for (i, m) in means.0.iter().enumerate() {
        unsafe { *out4.add(i) = *m };
    }
    WsiStatus::Ok
}

/// Demodulate one four-band intensity vector with the quotient formula.
/// Writes the wrapped OPL in um relative to the grid's reference
/// wavenumber. Singular inputs return `EstimateFailed`.
///
/// # Safety
/// `grid` must be a valid handle and `out_wrapped_um` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsi_carre_demodulate(
    grid: *const WsiGrid,
    i1: f64,
    i2: f64,
    i3: f64,
    i4: f64,
    out_wrapped_um: *mut f64,
) -> WsiStatus {
    if grid.is_null() || out_wrapped_um.is_null() {
        return fail(WsiStatus::NullArgument, "grid or out is null");
    }
    match carre([i1, i2, i3, i4], unsafe { (*grid).0.k0() }) {
        Ok(wrapped) => {
            unsafe { *out_wrapped_um = wrapped.value };
            WsiStatus::Ok
        }
        Err(e) => fail(WsiStatus::EstimateFailed, e),
    }
}

/// Lower bound on the OPL standard deviation with unknown dc and
/// amplitude, in um.
///
/// # Safety
/// `grid` must be a valid handle and `out_sigma_um` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsi_crb(
    grid: *const WsiGrid,
    alpha: f64,
    visibility: f64,
    opl_um: f64,
    out_sigma_um: *mut f64,
) -> WsiStatus {
    unsafe { bound_impl(grid, alpha, visibility, opl_um, out_sigma_um, crb) }
}

/// Lower bound when dc and amplitude are exactly known, in um.
///
/// # Safety
/// `grid` must be a valid handle and `out_sigma_um` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsi_spcrb(
    grid: *const WsiGrid,
    alpha: f64,
    visibility: f64,
    opl_um: f64,
    out_sigma_um: *mut f64,
) -> WsiStatus {
    unsafe { bound_impl(grid, alpha, visibility, opl_um, out_sigma_um, spcrb) }
}

type BoundFn = fn(
    &SceneParams,
    &WavenumberGrid,
) -> Result<wsi_demod::fisher::BoundValue, Error>;

unsafe fn bound_impl(
    grid: *const WsiGrid,
    alpha: f64,
    visibility: f64,
    opl_um: f64,
    out_sigma_um: *mut f64,
    bound: BoundFn,
) -> WsiStatus {
    if grid.is_null() || out_sigma_um.is_null() {
        return fail(WsiStatus::NullArgument, "grid or out is null");
    }
    let p = match SceneParams::new(alpha, visibility, opl_um) {
        Ok(p) => p,
        Err(e) => return fail_error(e),
    };
    match bound(&p, unsafe { &(*grid).0 }) {
        Ok(b) => {
            unsafe { *out_sigma_um = b.sigma };
            WsiStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Load a trained network from a weight file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` must point to
/// writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn wsi_network_load(
    path: *const c_char,
    out: *mut *mut WsiNetwork,
) -> WsiStatus {
    if path.is_null() || out.is_null() {
        return fail(WsiStatus::NullArgument, "path or out is null");
    }
    let path = match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(s) => s,
        Err(_) => return fail(WsiStatus::InvalidParameter, "path is not valid UTF-8"),
    };
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => return fail(WsiStatus::Io, format!("reading {path}: {e}")),
    };
    match load_weights(&bytes) {
        Ok(net) => {
            unsafe { *out = Box::into_raw(Box::new(WsiNetwork(net))) };
            WsiStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Release a network handle. Accepts null.
///
/// # Safety
/// `net` must be null or a pointer returned by [`wsi_network_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn wsi_network_free(net: *mut WsiNetwork) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// The absolute OPL window in um this network was trained for.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wsi_network_window(
    net: *const WsiNetwork,
    out_lo_um: *mut f64,
    out_hi_um: *mut f64,
) -> WsiStatus {
    if net.is_null() || out_lo_um.is_null() || out_hi_um.is_null() {
        return fail(WsiStatus::NullArgument, "net or out is null");
    }
    let window = unsafe { (*net).0.opl_window };
    unsafe {
        *out_lo_um = window.0;
        *out_hi_um = window.1;
    }
    WsiStatus::Ok
}

/// Demodulate one four-band intensity vector (in ADU) into an absolute
/// OPL in um within the network's training window.
///
/// # Safety
/// `net` must be a valid handle and `out_opl_um` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsi_network_infer(
    net: *const WsiNetwork,
    i1: f64,
    i2: f64,
    i3: f64,
    i4: f64,
    out_opl_um: *mut f64,
) -> WsiStatus {
    if net.is_null() || out_opl_um.is_null() {
        return fail(WsiStatus::NullArgument, "net or out is null");
    }
    let obs = [i1, i2, i3, i4];
    if obs.iter().any(|v| !v.is_finite()) {
        return fail(WsiStatus::InvalidParameter, "intensities must be finite");
    }
    let value = unsafe { (*net).0.infer(&[obs])[0] };
    unsafe { *out_opl_um = value };
    WsiStatus::Ok
}
