//! Masked Huber-TV-L1 optical flow with an additive illumination field.
//!
//! The objective over flow `v = (vx, vy)` and illumination `u` is
//!
//! ```text
//! Σ h_ilu(|∇u|) + Σ h_flow(|∇vx|) + Σ h_flow(|∇vy|) + λ Σ m·|ρ(u, v)|
//! ρ(u, v) = I_t + ∇I·(v − v0) − β·u
//! ```
//!
//! where `h` is the Huber function, `m` the data mask and `I_t`, `∇I` the
//! temporal and spatial derivatives at the linearisation flow `v0`. The
//! illumination enters with a minus sign so that `β·u` is the brightness added
//! to the second image (`I_2(x + v) ≈ I_1(x) + β·u(x)`).
//!
//! Each linearisation is solved with a first-order primal-dual scheme: the
//! Huber terms are dualised, the masked L1 data term is handled through its
//! closed-form proximal map. Warping and an image pyramid handle large
//! displacements.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dims, Error, Result};
use crate::grid::{
    downsample_mask_strict, gradient_central, gradient_forward, resample_area,
    resize_bilinear,
    sample_slice, BinaryMask, FlowField, ScalarGrid,
};
use crate::preprocess::AlignedPair;

/// Squared operator-norm bound of the forward-difference gradient.
pub const GRADIENT_NORM_SQ: f64 = 8.0;

/// Smallest side length of the coarsest pyramid level in `auto` mode.
pub const MIN_LEVEL_SIZE: usize = 16;

/// Pixels closer than this to the rotation centre are ignored.
pub const ROTATION_EXCLUSION_RADIUS: f64 = 2.0;

/// Number of pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Levels {
    /// As many levels as keep the smaller side at or above [`MIN_LEVEL_SIZE`].
    #[default]
    Auto,
    Fixed(usize),
}

impl fmt::Display for Levels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Levels::Auto => f.write_str("auto"),
            Levels::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Levels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Levels::Auto => s.serialize_str("auto"),
            Levels::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Levels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(u64),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Levels::Fixed(n as usize)),
            Repr::Name(s) if s == "auto" => Ok(Levels::Auto),
            Repr::Name(s) => Err(serde::de::Error::custom(format!(
                "levels must be a positive integer or \"auto\", got {s:?}"
            ))),
        }
    }
}

/// Optimisation hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    /// Data-term weight λ.
    pub lambda: f64,
    /// Illumination scale β; zero disables illumination compensation.
    pub beta: f64,
    /// Huber threshold of the flow regulariser.
    pub eps_flow: f64,
    /// Huber threshold of the illumination regulariser.
    pub eps_ilu: f64,
    pub warps: usize,
    pub pd_iters: usize,
    pub pyramid_scale: f64,
    pub levels: Levels,
    /// 3×3 median filter on the flow between warps.
    pub median_flow_filter: bool,
    /// Estimate illumination on coarse levels too (otherwise only on the finest).
    pub illumination_on_coarse_levels: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            beta: 0.04,
            eps_flow: 0.2,
            eps_ilu: 0.05,
            warps: 8,
            pd_iters: 60,
            pyramid_scale: 0.85,
            levels: Levels::Auto,
            median_flow_filter: true,
            illumination_on_coarse_levels: true,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.eps_flow >= 0.0 && self.eps_ilu >= 0.0) {
            return bad("huber thresholds must be >= 0".into());
        }
        if self.warps == 0 || self.pd_iters == 0 {
            return bad("warps and pd_iters must be >= 1".into());
        }
        if !(0.5..=0.95).contains(&self.pyramid_scale) {
            return bad(format!(
                "pyramid_scale must lie in [0.5, 0.95], got {}",
                self.pyramid_scale
            ));
        }
        if self.levels == Levels::Fixed(0) {
            return bad("levels must be >= 1".into());
        }
        Ok(())
    }

    /// Primal and dual step sizes, `τ = σ = 1/√8`.
    pub fn step_sizes(&self) -> (f64, f64) {
        let s = 1.0 / GRADIENT_NORM_SQ.sqrt();
        (s, s)
    }
}

/// Huber function: quadratic below `eps`, linear above.
#[inline]
pub fn huber(alpha: f64, eps: f64) -> f64 {
    let a = alpha.abs();
    if eps <= 0.0 {
        a
    } else if a <= eps {
        a * a / (2.0 * eps)
    } else {
        a - eps / 2.0
    }
}

/// Derivatives of the brightness model at a linearisation flow.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// `I_2(x + v0) − I_1(x)`.
    pub it: ScalarGrid,
    pub ix: ScalarGrid,
    pub iy: ScalarGrid,
    /// `I_2` warped by `v0`.
    pub warped: ScalarGrid,
}

/// Backward warp: `out(x) = img(x + v(x))`.
pub fn warp(img: &ScalarGrid, flow: &FlowField) -> Result<ScalarGrid> {
    check_dims(img.dims(), flow.dims())?;
    let (w, h) = img.dims();
    let mut out = ScalarGrid::zeros(w, h);
    let (vx, vy) = (flow.vx.data(), flow.vy.data());
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                let i = y * w + x;
                *v = sample_slice(img.data(), w, h, x as f64 + vx[i], y as f64 + vy[i]);
            }
        });
    Ok(out.with_dpi(img.dpi()))
}

/// Warps `i2` by `flow` and computes `I_t` and the averaged central-difference
/// gradient of `i1` and the warped image.
pub fn linearize(i1: &ScalarGrid, i2: &ScalarGrid, flow: &FlowField) -> Result<Linearization> {
    check_dims(i1.dims(), i2.dims())?;
    let warped = warp(i2, flow)?;
    let it = warped.zip_map(i1, |a, b| a - b)?;
    let (gx1, gy1) = gradient_central(i1);
    let (gx2, gy2) = gradient_central(&warped);
    let ix = gx1.zip_map(&gx2, |a, b| 0.5 * (a + b))?;
    let iy = gy1.zip_map(&gy2, |a, b| 0.5 * (a + b))?;
    Ok(Linearization {
        it,
        ix,
        iy,
        warped,
    })
}

/// Per-pixel linearised data residual `ρ = I_t + ∇I·(v − v0) − β·u`.
pub fn data_residual(
    u: &ScalarGrid,
    v: &FlowField,
    v0: &FlowField,
    lin: &Linearization,
    beta: f64,
) -> Result<ScalarGrid> {
    let dims = lin.it.dims();
    check_dims(dims, u.dims())?;
    check_dims(dims, v.dims())?;
    check_dims(dims, v0.dims())?;
    let (w, h) = dims;
    Ok(ScalarGrid::from_fn(w, h, |x, y| {
        lin.it.get(x, y)
            + lin.ix.get(x, y) * (v.vx.get(x, y) - v0.vx.get(x, y))
            + lin.iy.get(x, y) * (v.vy.get(x, y) - v0.vy.get(x, y))
            - beta * u.get(x, y)
    }))
}

/// Σ h(|∇f|) over all pixels, isotropic per pixel.
pub fn huber_tv(f: &ScalarGrid, eps: f64) -> f64 {
    let (gx, gy) = gradient_forward(f);
    gx.data()
        .iter()
        .zip(gy.data())
        .map(|(a, b)| huber(a.hypot(*b), eps))
        .sum()
}

/// Value of the masked Huber-TV-L1 objective.
pub fn energy(
    u: &ScalarGrid,
    v: &FlowField,
    v0: &FlowField,
    lin: &Linearization,
    mask: &BinaryMask,
    params: &SolverParams,
) -> Result<f64> {
    check_dims(lin.it.dims(), mask.dims())?;
    let rho = data_residual(u, v, v0, lin, params.beta)?;
    let data: f64 = rho
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|(r, _)| r.abs())
        .sum();
    Ok(huber_tv(u, params.eps_ilu)
        + huber_tv(&v.vx, params.eps_flow)
        + huber_tv(&v.vy, params.eps_flow)
        + params.lambda * data)
}

/// 3×3 median with the window clipped at the border.
pub fn median3x3(g: &ScalarGrid) -> ScalarGrid {
    let (w, h) = g.dims();
    let mut out = ScalarGrid::zeros(w, h);
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            let mut buf = [0.0f64; 9];
            for (x, v) in row.iter_mut().enumerate() {
                let mut n = 0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        buf[n] = g.get(xx, yy);
                        n += 1;
                    }
                }
                let s = &mut buf[..n];
                s.sort_by(|a, b| a.total_cmp(b));
                *v = if n % 2 == 1 {
                    s[n / 2]
                } else {
                    0.5 * (s[n / 2 - 1] + s[n / 2])
                };
            }
        });
    out
}

/// Rows handed to one parallel task; keeps scheduling overhead small on
/// narrow pyramid levels.
const ROWS_PER_TASK: usize = 32;

/// Dual variables of one regularised field.
struct Dual {
    px: Vec<f64>,
    py: Vec<f64>,
}

impl Dual {
    fn new(n: usize) -> Self {
        Self {
            px: vec![0.0; n],
            py: vec![0.0; n],
        }
    }

    /// `p ← proj_{|p|≤1}((p + σ∇f̄) / (1 + σε))`.
    fn ascend(&mut self, bar: &[f64], w: usize, h: usize, sigma: f64, eps: f64) {
        let scale = 1.0 / (1.0 + sigma * eps);
        let chunk = w * ROWS_PER_TASK;
        self.px
            .par_chunks_mut(chunk)
            .zip(self.py.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(c, (bx, by))| {
                let y0 = c * ROWS_PER_TASK;
                for (r, (rx, ry)) in bx.chunks_mut(w).zip(by.chunks_mut(w)).enumerate() {
                    let y = y0 + r;
                    let row = &bar[y * w..(y + 1) * w];
                    let below = (y + 1 < h).then(|| &bar[(y + 1) * w..(y + 2) * w]);
                    for x in 0..w {
                        let gx = if x + 1 < w { row[x + 1] - row[x] } else { 0.0 };
                        let gy = below.map_or(0.0, |b| b[x] - row[x]);
                        let qx = (rx[x] + sigma * gx) * scale;
                        let qy = (ry[x] + sigma * gy) * scale;
                        let norm_sq = qx * qx + qy * qy;
                        if norm_sq > 1.0 {
                            let inv = 1.0 / norm_sq.sqrt();
                            rx[x] = qx * inv;
                            ry[x] = qy * inv;
                        } else {
                            rx[x] = qx;
                            ry[x] = qy;
                        }
                    }
                }
            });
    }

    /// Divergence at pixel `(x, y)`, negative adjoint of the forward gradient.
    #[inline(always)]
    fn div(&self, i: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let dx = if w == 1 {
            0.0
        } else if x == 0 {
            self.px[i]
        } else if x == w - 1 {
            -self.px[i - 1]
        } else {
            self.px[i] - self.px[i - 1]
        };
        let dy = if h == 1 {
            0.0
        } else if y == 0 {
            self.py[i]
        } else if y == h - 1 {
            -self.py[i - w]
        } else {
            self.py[i] - self.py[i - w]
        };
        dx + dy
    }
}

/// Per-pixel data-term coefficients: `ρ(x) = c + a·(vx, vy, u)`.
struct DataTerm {
    ax: Vec<f64>,
    ay: Vec<f64>,
    au: f64,
    c: Vec<f64>,
    /// `λ·m` per pixel.
    weight: Vec<f64>,
}

/// Primal variables plus their extrapolations.
struct Primal {
    vx: Vec<f64>,
    vy: Vec<f64>,
    u: Vec<f64>,
    vx_bar: Vec<f64>,
    vy_bar: Vec<f64>,
    u_bar: Vec<f64>,
}

/// Runs `iters` primal-dual iterations on one linearisation.
#[allow(clippy::too_many_arguments)]
fn run_primal_dual(
    primal: &mut Primal,
    duals: &mut [Dual; 3],
    data: &DataTerm,
    w: usize,
    h: usize,
    iters: usize,
    params: &SolverParams,
    with_illumination: bool,
) {
    let (tau, sigma) = params.step_sizes();
    let au = if with_illumination { data.au } else { 0.0 };
    let chunk = w * ROWS_PER_TASK;
    for _ in 0..iters {
        duals[0].ascend(&primal.vx_bar, w, h, sigma, params.eps_flow);
        duals[1].ascend(&primal.vy_bar, w, h, sigma, params.eps_flow);
        if with_illumination {
            duals[2].ascend(&primal.u_bar, w, h, sigma, params.eps_ilu);
        }
        let duals = &*duals;
        primal
            .vx
            .par_chunks_mut(chunk)
            .zip(primal.vy.par_chunks_mut(chunk))
            .zip(primal.u.par_chunks_mut(chunk))
            .zip(primal.vx_bar.par_chunks_mut(chunk))
            .zip(primal.vy_bar.par_chunks_mut(chunk))
            .zip(primal.u_bar.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(c, (((((vx, vy), u), bx), by), bu))| {
                let base = c * chunk;
                let (mut x, mut y) = (0, c * ROWS_PER_TASK);
                for k in 0..vx.len() {
                    let i = base + k;
                    let old = (vx[k], vy[k], u[k]);
                    let mut x0 = old.0 + tau * duals[0].div(i, x, y, w, h);
                    let mut x1 = old.1 + tau * duals[1].div(i, x, y, w, h);
                    let mut x2 = if with_illumination {
                        old.2 + tau * duals[2].div(i, x, y, w, h)
                    } else {
                        old.2
                    };
                    let wt = data.weight[i];
                    if wt > 0.0 {
                        let (a0, a1, a2) = (data.ax[i], data.ay[i], au);
                        let a_sq = a0 * a0 + a1 * a1 + a2 * a2;
                        if a_sq > 0.0 {
                            let rho = data.c[i] + a0 * x0 + a1 * x1 + a2 * x2;
                            let step = tau * wt;
                            let t = if rho < -step * a_sq {
                                step
                            } else if rho > step * a_sq {
                                -step
                            } else {
                                -rho / a_sq
                            };
                            x0 += t * a0;
                            x1 += t * a1;
                            x2 += t * a2;
                        }
                    }
                    vx[k] = x0;
                    vy[k] = x1;
                    u[k] = x2;
                    bx[k] = 2.0 * x0 - old.0;
                    by[k] = 2.0 * x1 - old.1;
                    bu[k] = 2.0 * x2 - old.2;
                    x += 1;
                    if x == w {
                        x = 0;
                        y += 1;
                    }
                }
            });
    }
}

fn check_finite(g: &ScalarGrid, what: &'static str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Refines `init_flow` and `init_u` on one pyramid level.
///
/// For each warp the second image is re-warped, the brightness model is
/// re-linearised and `pd_iters` primal-dual iterations are run.
pub fn pd_solve(
    i1: &ScalarGrid,
    i2: &ScalarGrid,
    mask: &BinaryMask,
    init_flow: &FlowField,
    init_u: &ScalarGrid,
    params: &SolverParams,
) -> Result<(FlowField, ScalarGrid)> {
    pd_solve_level(i1, i2, mask, init_flow, init_u, params, params.beta > 0.0)
}

fn pd_solve_level(
    i1: &ScalarGrid,
    i2: &ScalarGrid,
    mask: &BinaryMask,
    init_flow: &FlowField,
    init_u: &ScalarGrid,
    params: &SolverParams,
    with_illumination: bool,
) -> Result<(FlowField, ScalarGrid)> {
    params.validate()?;
    let dims = i1.dims();
    check_dims(dims, i2.dims())?;
    check_dims(dims, mask.dims())?;
    check_dims(dims, init_flow.dims())?;
    check_dims(dims, init_u.dims())?;
    check_finite(i1, "first image")?;
    check_finite(i2, "second image")?;
    check_finite(&init_flow.vx, "initial flow")?;
    check_finite(&init_flow.vy, "initial flow")?;
    check_finite(init_u, "initial illumination")?;

    let (w, h) = dims;
    let n = w * h;
    let with_illumination = with_illumination && params.beta > 0.0;
    let u0 = if with_illumination {
        init_u.data().to_vec()
    } else {
        vec![0.0; n]
    };
    let mut primal = Primal {
        vx: init_flow.vx.data().to_vec(),
        vy: init_flow.vy.data().to_vec(),
        vx_bar: init_flow.vx.data().to_vec(),
        vy_bar: init_flow.vy.data().to_vec(),
        u_bar: u0.clone(),
        u: u0,
    };
    let mut duals = [Dual::new(n), Dual::new(n), Dual::new(n)];
    let weight: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&m| if m { params.lambda } else { 0.0 })
        .collect();

    for warp_idx in 0..params.warps {
        let v0 = FlowField {
            vx: ScalarGrid::from_vec(w, h, primal.vx.clone())?,
            vy: ScalarGrid::from_vec(w, h, primal.vy.clone())?,
        };
        let lin = linearize(i1, i2, &v0)?;
        let c: Vec<f64> = (0..n)
            .map(|i| {
                lin.it.data()[i] - lin.ix.data()[i] * primal.vx[i] - lin.iy.data()[i] * primal.vy[i]
            })
            .collect();
        let data = DataTerm {
            ax: lin.ix.into_vec(),
            ay: lin.iy.into_vec(),
            au: -params.beta,
            c,
            weight: weight.clone(),
        };
        primal.vx_bar.copy_from_slice(&primal.vx);
        primal.vy_bar.copy_from_slice(&primal.vy);
        primal.u_bar.copy_from_slice(&primal.u);
        run_primal_dual(
            &mut primal,
            &mut duals,
            &data,
            w,
            h,
            params.pd_iters,
            params,
            with_illumination,
        );
        if params.median_flow_filter && warp_idx + 1 < params.warps {
            let fx = median3x3(&ScalarGrid::from_vec(w, h, std::mem::take(&mut primal.vx))?);
            let fy = median3x3(&ScalarGrid::from_vec(w, h, std::mem::take(&mut primal.vy))?);
            primal.vx = fx.into_vec();
            primal.vy = fy.into_vec();
        }
    }
    let flow = FlowField {
        vx: ScalarGrid::from_vec(w, h, primal.vx)?,
        vy: ScalarGrid::from_vec(w, h, primal.vy)?,
    };
    let u = ScalarGrid::from_vec(w, h, primal.u)?;
    Ok((flow, u))
}

/// Level dimensions from finest to coarsest.
pub fn pyramid_dims(width: usize, height: usize, params: &SolverParams) -> Result<Vec<(usize, usize)>> {
    let mut dims = vec![(width, height)];
    let next = |(w, h): (usize, usize)| {
        (
            ((w as f64 * params.pyramid_scale).round() as usize).max(1),
            ((h as f64 * params.pyramid_scale).round() as usize).max(1),
        )
    };
    match params.levels {
        Levels::Auto => loop {
            let d = next(*dims.last().unwrap());
            if d.0.min(d.1) < MIN_LEVEL_SIZE {
                break;
            }
            dims.push(d);
        },
        Levels::Fixed(n) => {
            for _ in 1..n {
                let d = next(*dims.last().unwrap());
                if d.0.min(d.1) < 2 {
                    return Err(Error::InvalidParameter(format!(
                        "{n} pyramid levels do not fit a {width}x{height} image"
                    )));
                }
                dims.push(d);
            }
        }
    }
    Ok(dims)
}

/// Average rotation and displacement of a flow field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    /// Radians, positive in image coordinates (y down).
    pub delta_theta_avg: f64,
    pub v_avg: (f64, f64),
}

/// Rigid correction applied before a second flow pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub center: (f64, f64),
    pub theta: f64,
    pub translation: (f64, f64),
    /// Rotation estimate of the second-pass flow alone.
    pub residual: RotationEstimate,
}

impl Registration {
    /// `c + R(θ)(p − c) + t`.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        rigid_map(self.center, self.theta, self.translation, x, y)
    }
}

#[inline]
fn rigid_map(c: (f64, f64), theta: f64, t: (f64, f64), x: f64, y: f64) -> (f64, f64) {
    let (s, co) = theta.sin_cos();
    let dx = x - c.0;
    let dy = y - c.1;
    (c.0 + co * dx - s * dy + t.0, c.1 + s * dx + co * dy + t.1)
}

/// Output of a complete flow estimation.
#[derive(Clone, Debug)]
pub struct FlowResult {
    pub flow: FlowField,
    pub illumination: ScalarGrid,
    /// Second image warped by the final flow.
    pub warped: ScalarGrid,
    /// `warped − β·u`.
    pub warped_compensated: ScalarGrid,
    /// Final objective value at the returned flow.
    pub energy: f64,
    pub delta_theta_avg: f64,
    pub v_avg: (f64, f64),
    pub registration: Option<Registration>,
}

/// Mean rotation angle and displacement over the mask.
pub fn estimate_rotation(
    flow: &FlowField,
    mask: &BinaryMask,
    center: (f64, f64),
) -> Result<RotationEstimate> {
    check_dims(flow.dims(), mask.dims())?;
    let (mut sum_theta, mut n_theta) = (0.0, 0usize);
    let (mut svx, mut svy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            if !mask.get(x, y) {
                continue;
            }
            let vx = flow.vx.get(x, y);
            let vy = flow.vy.get(x, y);
            svx += vx;
            svy += vy;
            n += 1;
            let rx = x as f64 - center.0;
            let ry = y as f64 - center.1;
            if rx.hypot(ry) <= ROTATION_EXCLUSION_RADIUS {
                continue;
            }
            let mut d = (ry + vy).atan2(rx + vx) - ry.atan2(rx);
            if d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            } else if d <= -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            sum_theta += d;
            n_theta += 1;
        }
    }
    if n_theta == 0 {
        return Err(Error::Degenerate(
            "no mask pixel outside the rotation-centre exclusion radius".into(),
        ));
    }
    Ok(RotationEstimate {
        delta_theta_avg: sum_theta / n_theta as f64,
        v_avg: (svx / n as f64, svy / n as f64),
    })
}

fn finalize(
    i1: &ScalarGrid,
    i2: &ScalarGrid,
    mask: &BinaryMask,
    flow: FlowField,
    illumination: ScalarGrid,
    params: &SolverParams,
) -> Result<FlowResult> {
    let lin = linearize(i1, i2, &flow)?;
    let energy = energy(&illumination, &flow, &flow, &lin, mask, params)?;
    let warped = lin.warped;
    let warped_compensated = warped.zip_map(&illumination, |a, u| a - params.beta * u)?;
    let center = mask
        .centroid()
        .ok_or_else(|| Error::Degenerate("empty data mask".into()))?;
    let rot = estimate_rotation(&flow, mask, center)?;
    if !energy.is_finite() {
        return Err(Error::NonFinite("energy"));
    }
    Ok(FlowResult {
        flow,
        illumination,
        warped,
        warped_compensated,
        energy,
        delta_theta_avg: rot.delta_theta_avg,
        v_avg: rot.v_avg,
        registration: None,
    })
}

/// Coarse-to-fine estimation of flow and illumination over an image pyramid.
pub fn coarse_to_fine(
    i1: &ScalarGrid,
    i2: &ScalarGrid,
    mask: &BinaryMask,
    params: &SolverParams,
) -> Result<FlowResult> {
    params.validate()?;
    check_dims(i1.dims(), i2.dims())?;
    check_dims(i1.dims(), mask.dims())?;
    let (flow, u) = solve_pyramid(i1, i2, mask, params)?;
    finalize(i1, i2, mask, flow, u, params)
}

fn solve_pyramid(
    i1: &ScalarGrid,
    i2: &ScalarGrid,
    mask: &BinaryMask,
    params: &SolverParams,
) -> Result<(FlowField, ScalarGrid)> {
    let dims = pyramid_dims(i1.width(), i1.height(), params)?;
    let mut pyr1 = vec![i1.clone()];
    let mut pyr2 = vec![i2.clone()];
    let mut pyrm = vec![mask.clone()];
    for &(w, h) in &dims[1..] {
        pyr1.push(resample_area(pyr1.last().unwrap(), w, h));
        pyr2.push(resample_area(pyr2.last().unwrap(), w, h));
        pyrm.push(downsample_mask_strict(pyrm.last().unwrap(), w, h));
    }
    let coarsest = dims.len() - 1;
    let (cw, ch) = dims[coarsest];
    let mut flow = FlowField::zeros(cw, ch);
    let mut u = ScalarGrid::zeros(cw, ch);
    for level in (0..=coarsest).rev() {
        let (w, h) = dims[level];
        if flow.dims() != (w, h) {
            let (pw, ph) = flow.dims();
            let fx = w as f64 / pw as f64;
            let fy = h as f64 / ph as f64;
            flow = FlowField {
                vx: resize_bilinear(&flow.vx, w, h).map(|v| v * fx),
                vy: resize_bilinear(&flow.vy, w, h).map(|v| v * fy),
            };
            u = resize_bilinear(&u, w, h);
        }
        let illum = level == 0 || params.illumination_on_coarse_levels;
        let (f, uu) = pd_solve_level(&pyr1[level], &pyr2[level], &pyrm[level], &flow, &u, params, illum)?;
        flow = f;
        u = uu;
    }
    Ok((flow, u))
}

/// Removes the average rigid motion of `result` from the second image, reruns
/// the estimation and composes the rigid motion back into the returned flow.
pub fn rerun_with_registration(
    pair: &AlignedPair,
    result: &FlowResult,
    params: &SolverParams,
) -> Result<FlowResult> {
    let mask = &pair.data_mask;
    let center = mask
        .centroid()
        .ok_or_else(|| Error::Degenerate("empty data mask".into()))?;
    let theta = result.delta_theta_avg;
    let t = result.v_avg;
    let (w, h) = pair.i2.dims();
    let resampled = ScalarGrid::from_fn(w, h, |x, y| {
        let (sx, sy) = rigid_map(center, theta, t, x as f64, y as f64);
        sample_slice(pair.i2.data(), w, h, sx, sy)
    });
    let (residual_flow, u) = solve_pyramid(&pair.i1, &resampled, mask, params)?;
    let residual = estimate_rotation(&residual_flow, mask, center)?;
    let composed = FlowField::from_fn(w, h, |x, y| {
        let px = x as f64 + residual_flow.vx.get(x, y);
        let py = y as f64 + residual_flow.vy.get(x, y);
        let (qx, qy) = rigid_map(center, theta, t, px, py);
        (qx - x as f64, qy - y as f64)
    });
    let mut out = finalize(&pair.i1, &pair.i2, mask, composed, u, params)?;
    out.registration = Some(Registration {
        center,
        theta,
        translation: t,
        residual,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize) -> ScalarGrid {
        ScalarGrid::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (0.7 * x + 0.3 * y).sin() + 0.15 * (0.45 * y - 0.2 * x).cos()
                + 0.1 * (0.9 * x * 0.5 + 1.1 * y * 0.4).sin()
        })
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
        assert_eq!(huber(-0.7, 0.0), 0.7);
    }

    #[test]
    fn residual_at_linearisation_point_is_it() {
        let i1 = texture(10, 8);
        let i2 = texture(10, 8).map(|v| v * 1.1);
        let v0 = FlowField::from_fn(10, 8, |x, _| (0.1 * x as f64, 0.0));
        let lin = linearize(&i1, &i2, &v0).unwrap();
        let u = ScalarGrid::zeros(10, 8);
        let r = data_residual(&u, &v0, &v0, &lin, 0.04).unwrap();
        assert_eq!(r, lin.it);
        let u2 = ScalarGrid::filled(10, 8, 3.0);
        assert_eq!(data_residual(&u2, &v0, &v0, &lin, 0.0).unwrap(), lin.it);
    }

    #[test]
    fn residual_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rg = |w, h| ScalarGrid::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
        let lin = Linearization {
            it: rg(6, 5),
            ix: rg(6, 5),
            iy: rg(6, 5),
            warped: rg(6, 5),
        };
        let u = rg(6, 5);
        let v = FlowField::new(rg(6, 5), rg(6, 5)).unwrap();
        let v0 = FlowField::new(rg(6, 5), rg(6, 5)).unwrap();
        let r = data_residual(&u, &v, &v0, &lin, 0.3).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let e = lin.it.get(x, y)
                    + lin.ix.get(x, y) * (v.vx.get(x, y) - v0.vx.get(x, y))
                    + lin.iy.get(x, y) * (v.vy.get(x, y) - v0.vy.get(x, y))
                    - 0.3 * u.get(x, y);
                assert_eq!(r.get(x, y), e);
            }
        }
    }

    #[test]
    fn energy_zero_and_masked() {
        let z = ScalarGrid::zeros(8, 8);
        let lin = Linearization {
            it: z.clone(),
            ix: z.clone(),
            iy: z.clone(),
            warped: z.clone(),
        };
        let v = FlowField::zeros(8, 8);
        let p = SolverParams::default();
        let m = BinaryMask::filled(8, 8, true);
        assert_eq!(energy(&z, &v, &v, &lin, &m, &p).unwrap(), 0.0);

        let lin2 = Linearization {
            it: ScalarGrid::filled(8, 8, 5.0),
            ..lin
        };
        let vv = FlowField::from_fn(8, 8, |x, y| ((x * y) as f64 * 0.1, x as f64));
        let uu = ScalarGrid::from_fn(8, 8, |x, _| x as f64);
        let e = energy(&uu, &vv, &v, &lin2, &BinaryMask::new(8, 8), &p).unwrap();
        let reg = huber_tv(&uu, p.eps_ilu) + huber_tv(&vv.vx, p.eps_flow) + huber_tv(&vv.vy, p.eps_flow);
        assert_eq!(e, reg);
    }

    #[test]
    fn identical_images_give_zero_flow() {
        let i1 = texture(48, 40);
        let mask = BinaryMask::filled(48, 40, true);
        let p = SolverParams {
            warps: 3,
            pd_iters: 30,
            ..Default::default()
        };
        let (f, u) = pd_solve(&i1, &i1, &mask, &FlowField::zeros(48, 40), &ScalarGrid::zeros(48, 40), &p).unwrap();
        assert!(f.max_magnitude() < 0.05);
        assert!(u.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn beta_zero_keeps_illumination_zero() {
        let i1 = texture(32, 32);
        let i2 = i1.map(|v| v + 0.1);
        let p = SolverParams {
            beta: 0.0,
            warps: 2,
            pd_iters: 20,
            levels: Levels::Fixed(2),
            ..Default::default()
        };
        let r = coarse_to_fine(&i1, &i2, &BinaryMask::filled(32, 32, true), &p).unwrap();
        assert!(r.illumination.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let i1 = texture(16, 16);
        let mut bad = i1.clone();
        bad.data_mut()[3] = f64::NAN;
        let p = SolverParams::default();
        let m = BinaryMask::filled(16, 16, true);
        let z = FlowField::zeros(16, 16);
        let u = ScalarGrid::zeros(16, 16);
        assert!(matches!(pd_solve(&i1, &bad, &m, &z, &u, &p), Err(Error::NonFinite(_))));
        let small = texture(15, 16);
        assert!(matches!(
            pd_solve(&i1, &small, &m, &z, &u, &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn params_validation() {
        assert!(SolverParams::default().validate().is_ok());
        let p = SolverParams { pyramid_scale: 0.3, ..Default::default() };
        assert!(p.validate().is_err());
        let p = SolverParams { lambda: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = SolverParams { warps: 0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn auto_levels_keep_min_size() {
        let p = SolverParams::default();
        let d = pyramid_dims(512, 300, &p).unwrap();
        assert!(d.last().unwrap().1 >= MIN_LEVEL_SIZE);
        let (w, h) = *d.last().unwrap();
        assert!(((h as f64 * p.pyramid_scale).round() as usize) < MIN_LEVEL_SIZE, "{w}x{h}");
    }

    #[test]
    fn levels_serde() {
        #[derive(Serialize, Deserialize)]
        struct W {
            l: Levels,
        }
        let w: W = toml::from_str("l = \"auto\"").unwrap();
        assert_eq!(w.l, Levels::Auto);
        let w: W = toml::from_str("l = 7").unwrap();
        assert_eq!(w.l, Levels::Fixed(7));
        assert!(toml::from_str::<W>("l = \"many\"").is_err());
    }

    #[test]
    fn rotation_of_zero_flow() {
        let f = FlowField::zeros(20, 20);
        let m = BinaryMask::filled(20, 20, true);
        let r = estimate_rotation(&f, &m, (10.0, 10.0)).unwrap();
        assert_eq!(r.delta_theta_avg, 0.0);
        assert_eq!(r.v_avg, (0.0, 0.0));
        let mut tiny = BinaryMask::new(20, 20);
        tiny.set(10, 10, true);
        assert!(estimate_rotation(&f, &tiny, (10.0, 10.0)).is_err());
    }

    #[test]
    fn median_of_constant_and_spike() {
        let mut g = ScalarGrid::filled(5, 5, 1.0);
        g.set(2, 2, 100.0);
        let m = median3x3(&g);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }
}
