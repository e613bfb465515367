//! C interface to `woodflow`.
//!
//! Objects are opaque handles created by `wf_*_new` / `wf_*_estimate` and
//! released with the matching `wf_*_free`. Every fallible call returns a
//! [`WfStatus`]; on failure the message is kept per thread and can be fetched
//! with [`wf_last_error_message`]. Panics never cross the boundary.
//!
//! Grids are row-major `double` arrays of `width * height` values.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use woodflow::flow::{coarse_to_fine, huber, FlowResult, Levels, SolverParams};
use woodflow::strain::{analyze, projection_error, StrainAnalysis, StrainParams};
use woodflow::{BinaryMask, Error, ScalarGrid};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numeric = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Scalar raster.
pub struct WfGrid(ScalarGrid);

/// Binary region of interest.
pub struct WfMask(BinaryMask);

/// Result of a flow estimation.
pub struct WfFlow(FlowResult);

/// Strain analysis of a flow field.
pub struct WfStrain(StrainAnalysis);

/// Solver parameters; obtain defaults from [`wf_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WfSolverParams {
    pub lambda: f64,
    pub beta: f64,
    pub eps_flow: f64,
    pub eps_ilu: f64,
    pub warps: u32,
    pub pd_iters: u32,
    pub pyramid_scale: f64,
    /// Pyramid levels; 0 selects them from the image size.
    pub levels: u32,
    pub median_flow_filter: bool,
    pub illumination_on_coarse_levels: bool,
}

/// Scalar outputs of a flow estimation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WfFlowSummary {
    pub energy: f64,
    /// Mean rotation in radians.
    pub delta_theta_avg: f64,
    pub v_avg_x: f64,
    pub v_avg_y: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WfAxis {
    X = 0,
    Y = 1,
}

/// Coefficient profile statistics along one axis. Undefined values are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WfProfileSummary {
    pub positions: usize,
    pub mean_small: f64,
    pub var_small: f64,
    pub mean_green: f64,
    pub var_green: f64,
    pub mean_green_with_cracks: f64,
    pub var_green_with_cracks: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> WfStatus {
    match e.root() {
        Error::InvalidParameter(_) | Error::Config(_) => WfStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => WfStatus::DimensionMismatch,
        Error::Io { .. } | Error::Decode { .. } => WfStatus::Io,
        _ => WfStatus::Numeric,
    }
}

struct Fail(WfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(WfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            WfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            WfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            WfStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

fn element_count(width: usize, height: usize) -> Result<usize, Fail> {
    width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(WfStatus::InvalidArgument, format!("bad dimensions {width}x{height}")))
}

/// Copies the message of the last failed call on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length
/// including the terminator; 1 when there is no error.
#[no_mangle]
pub unsafe extern "C" fn wf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn wf_grid_new(width: usize, height: usize, data: *const f64, out: *mut *mut WfGrid) -> WfStatus {
    guard(|| {
        let n = element_count(width, height)?;
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let g = ScalarGrid::from_vec(width, height, values)?;
        write_out(out, Box::into_raw(Box::new(WfGrid(g))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn wf_grid_free(grid: *mut WfGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wf_grid_dims(grid: *const WfGrid, width: *mut usize, height: *mut usize) -> WfStatus {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        write_out(width, g.width(), "width")?;
        write_out(height, g.height(), "height")
    })
}

#[no_mangle]
pub unsafe extern "C" fn wf_grid_copy(grid: *const WfGrid, out: *mut f64, len: usize) -> WfStatus {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        out_slice(out, len, g.data().len(), "out")?.copy_from_slice(g.data());
        Ok(())
    })
}

/// Mask from bytes; any nonzero byte is inside.
#[no_mangle]
pub unsafe extern "C" fn wf_mask_new(width: usize, height: usize, data: *const u8, out: *mut *mut WfMask) -> WfStatus {
    guard(|| {
        let n = element_count(width, height)?;
        if data.is_null() {
            return Err(null("data"));
        }
        let bits = std::slice::from_raw_parts(data, n).iter().map(|&b| b != 0).collect();
        let m = BinaryMask::from_vec(width, height, bits)?;
        write_out(out, Box::into_raw(Box::new(WfMask(m))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn wf_mask_free(mask: *mut WfMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

fn to_params(p: &WfSolverParams) -> SolverParams {
    SolverParams {
        lambda: p.lambda,
        beta: p.beta,
        eps_flow: p.eps_flow,
        eps_ilu: p.eps_ilu,
        warps: p.warps as usize,
        pd_iters: p.pd_iters as usize,
        pyramid_scale: p.pyramid_scale,
        levels: match p.levels {
            0 => Levels::Auto,
            n => Levels::Fixed(n as usize),
        },
        median_flow_filter: p.median_flow_filter,
        illumination_on_coarse_levels: p.illumination_on_coarse_levels,
    }
}

#[no_mangle]
pub unsafe extern "C" fn wf_params_default(out: *mut WfSolverParams) -> WfStatus {
    guard(|| {
        let d = SolverParams::default();
        let levels = match d.levels {
            Levels::Auto => 0,
            Levels::Fixed(n) => n as u32,
        };
        write_out(
            out,
            WfSolverParams {
                lambda: d.lambda,
                beta: d.beta,
                eps_flow: d.eps_flow,
                eps_ilu: d.eps_ilu,
                warps: d.warps as u32,
                pd_iters: d.pd_iters as u32,
                pyramid_scale: d.pyramid_scale,
                levels,
                median_flow_filter: d.median_flow_filter,
                illumination_on_coarse_levels: d.illumination_on_coarse_levels,
            },
            "out",
        )
    })
}

/// Coarse-to-fine flow from `i1` to `i2` over `mask`. `params` may be null
/// for the defaults.
#[no_mangle]
pub unsafe extern "C" fn wf_flow_estimate(
    i1: *const WfGrid,
    i2: *const WfGrid,
    mask: *const WfMask,
    params: *const WfSolverParams,
    out: *mut *mut WfFlow,
) -> WfStatus {
    guard(|| {
        let i1 = &deref(i1, "i1")?.0;
        let i2 = &deref(i2, "i2")?.0;
        let mask = &deref(mask, "mask")?.0;
        let params = params.as_ref().map(to_params).unwrap_or_default();
        let r = coarse_to_fine(i1, i2, mask, &params)?;
        write_out(out, Box::into_raw(Box::new(WfFlow(r))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn wf_flow_free(flow: *mut WfFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wf_flow_summary(flow: *const WfFlow, out: *mut WfFlowSummary) -> WfStatus {
    guard(|| {
        let r = &deref(flow, "flow")?.0;
        write_out(
            out,
            WfFlowSummary {
                energy: r.energy,
                delta_theta_avg: r.delta_theta_avg,
                v_avg_x: r.v_avg.0,
                v_avg_y: r.v_avg.1,
            },
            "out",
        )
    })
}

/// Copies the displacement components into two caller buffers of `len` values.
#[no_mangle]
pub unsafe extern "C" fn wf_flow_copy_field(flow: *const WfFlow, vx: *mut f64, vy: *mut f64, len: usize) -> WfStatus {
    guard(|| {
        let f = &deref(flow, "flow")?.0.flow;
        let n = f.vx.data().len();
        out_slice(vx, len, n, "vx")?.copy_from_slice(f.vx.data());
        out_slice(vy, len, n, "vy")?.copy_from_slice(f.vy.data());
        Ok(())
    })
}

/// Copies the illumination field `u`.
#[no_mangle]
pub unsafe extern "C" fn wf_flow_copy_illumination(flow: *const WfFlow, out: *mut f64, len: usize) -> WfStatus {
    guard(|| {
        let u = &deref(flow, "flow")?.0.illumination;
        out_slice(out, len, u.data().len(), "out")?.copy_from_slice(u.data());
        Ok(())
    })
}

/// Writes the flow as a `.flo` raster.
#[no_mangle]
pub unsafe extern "C" fn wf_flow_write_flo(flow: *const WfFlow, path: *const c_char) -> WfStatus {
    guard(|| {
        let r = &deref(flow, "flow")?.0;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(WfStatus::InvalidArgument, "path is not UTF-8".into()))?;
        woodflow::io::write_flo(Path::new(path), &r.flow)?;
        Ok(())
    })
}

/// Strain fields and coefficient profiles of `flow` over `mask`.
/// `crack_factor`, `min_span` and `min_averaged` of zero select defaults.
#[no_mangle]
pub unsafe extern "C" fn wf_strain_analyze(
    flow: *const WfFlow,
    mask: *const WfMask,
    delta_rh: f64,
    crack_factor: f64,
    min_span: usize,
    min_averaged: usize,
    out: *mut *mut WfStrain,
) -> WfStatus {
    guard(|| {
        let f = &deref(flow, "flow")?.0.flow;
        let mask = &deref(mask, "mask")?.0;
        let d = StrainParams::default();
        let params = StrainParams {
            crack_factor: if crack_factor > 0.0 { crack_factor } else { d.crack_factor },
            min_span: if min_span > 0 { min_span } else { d.min_span },
            min_averaged: if min_averaged > 0 { min_averaged } else { d.min_averaged },
        };
        let a = analyze(f, mask, delta_rh, &params)?;
        write_out(out, Box::into_raw(Box::new(WfStrain(a))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn wf_strain_free(strain: *mut WfStrain) {
    if !strain.is_null() {
        drop(Box::from_raw(strain));
    }
}

fn nan_if_infinite(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

#[no_mangle]
pub unsafe extern "C" fn wf_strain_profile_summary(
    strain: *const WfStrain,
    axis: WfAxis,
    out: *mut WfProfileSummary,
) -> WfStatus {
    guard(|| {
        let a = &deref(strain, "strain")?.0;
        let p = match axis {
            WfAxis::X => &a.profile_x,
            WfAxis::Y => &a.profile_y,
        };
        write_out(
            out,
            WfProfileSummary {
                positions: p.positions.len(),
                mean_small: nan_if_infinite(p.mean_small),
                var_small: nan_if_infinite(p.var_small),
                mean_green: nan_if_infinite(p.mean_green),
                var_green: nan_if_infinite(p.var_green),
                mean_green_with_cracks: nan_if_infinite(p.mean_green_with_cracks),
                var_green_with_cracks: nan_if_infinite(p.var_green_with_cracks),
            },
            "out",
        )
    })
}

/// Copies one profile: positions (as doubles), small-strain and Green-strain
/// coefficients. Green values omitted because of cracks are NaN. Each buffer
/// must hold the `positions` count from [`wf_strain_profile_summary`].
#[no_mangle]
pub unsafe extern "C" fn wf_strain_copy_profile(
    strain: *const WfStrain,
    axis: WfAxis,
    positions: *mut f64,
    k_small: *mut f64,
    k_green: *mut f64,
    len: usize,
) -> WfStatus {
    guard(|| {
        let a = &deref(strain, "strain")?.0;
        let p = match axis {
            WfAxis::X => &a.profile_x,
            WfAxis::Y => &a.profile_y,
        };
        let n = p.positions.len();
        let pos = out_slice(positions, len, n, "positions")?;
        let ks = out_slice(k_small, len, n, "k_small")?;
        let kg = out_slice(k_green, len, n, "k_green")?;
        for i in 0..n {
            pos[i] = p.positions[i] as f64;
            ks[i] = p.k_small[i];
            kg[i] = p.k_green[i].unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn wf_strain_crack_count(strain: *const WfStrain, out: *mut usize) -> WfStatus {
    guard(|| {
        let a = &deref(strain, "strain")?.0;
        write_out(out, a.cracks.count(), "out")
    })
}

/// `r·(1 − cos(asin(delta_y/r)))`, the apparent displacement caused by an
/// out-of-plane offset on a surface of radius `r` (same length unit).
#[no_mangle]
pub unsafe extern "C" fn wf_projection_error(r: f64, delta_y: f64, out: *mut f64) -> WfStatus {
    guard(|| write_out(out, projection_error(r, delta_y)?, "out"))
}

/// Huber function value; NaN for a negative threshold.
#[no_mangle]
pub extern "C" fn wf_huber(alpha: f64, eps: f64) -> f64 {
    if eps < 0.0 || alpha.is_nan() {
        return f64::NAN;
    }
    huber(alpha, eps)
}
