//! Strain tensors, humidity-normalised coefficient fields and profiles.
//!
//! Derivatives are taken on the undeformed (first image) lattice with central
//! differences in the interior and one-sided differences at the border. Flow
//! is in pixels, so every strain quantity is dimensionless. Coefficients `k`
//! are relative length change per percent relative humidity, with the
//! humidity change taken as `RH_1 − RH_0` so that swelling under rising
//! humidity yields a positive `k`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::grid::{d_dx, d_dy, BinaryMask, FlowField, ScalarGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }
}

/// Small-strain entries `(ε11, ε22, γ12)`.
pub fn small_strain(flow: &FlowField) -> (ScalarGrid, ScalarGrid, ScalarGrid) {
    let dvx_dy = d_dy(&flow.vx);
    let dvy_dx = d_dx(&flow.vy);
    let gamma12 = dvx_dy.zip_map(&dvy_dx, |a, b| a + b).expect("same dims");
    (d_dx(&flow.vx), d_dy(&flow.vy), gamma12)
}

/// Green-strain normal entries and the derived stretches.
#[derive(Clone, Debug, PartialEq)]
pub struct GreenStrain {
    pub e11: ScalarGrid,
    pub e22: ScalarGrid,
    /// `√(1 + 2·E11) − 1`.
    pub eps1: ScalarGrid,
    /// `√(1 + 2·E22) − 1`.
    pub eps2: ScalarGrid,
    /// Pixels where `1 + 2·E_ii` was negative and clamped to zero.
    pub clamped: BinaryMask,
}

pub fn green_strain(flow: &FlowField) -> GreenStrain {
    let (w, h) = flow.dims();
    let dvx_dx = d_dx(&flow.vx);
    let dvx_dy = d_dy(&flow.vx);
    let dvy_dx = d_dx(&flow.vy);
    let dvy_dy = d_dy(&flow.vy);
    let e11 = ScalarGrid::from_fn(w, h, |x, y| {
        let a = dvx_dx.get(x, y);
        let b = dvy_dx.get(x, y);
        a + 0.5 * (a * a + b * b)
    });
    let e22 = ScalarGrid::from_fn(w, h, |x, y| {
        let a = dvx_dy.get(x, y);
        let b = dvy_dy.get(x, y);
        b + 0.5 * (a * a + b * b)
    });
    let mut clamped = BinaryMask::new(w, h);
    let mut stretch = |e: &ScalarGrid| {
        ScalarGrid::from_fn(w, h, |x, y| {
            let arg = 1.0 + 2.0 * e.get(x, y);
            if arg < 0.0 {
                clamped.set(x, y, true);
            }
            arg.max(0.0).sqrt() - 1.0
        })
    };
    let eps1 = stretch(&e11);
    let eps2 = stretch(&e22);
    GreenStrain {
        e11,
        e22,
        eps1,
        eps2,
        clamped,
    }
}

/// All strain fields of one flow.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainFields {
    pub eps11: ScalarGrid,
    pub eps22: ScalarGrid,
    pub gamma12: ScalarGrid,
    pub green: GreenStrain,
}

impl StrainFields {
    pub fn from_flow(flow: &FlowField) -> Self {
        let (eps11, eps22, gamma12) = small_strain(flow);
        Self {
            eps11,
            eps22,
            gamma12,
            green: green_strain(flow),
        }
    }
}

/// Coefficient fields of one strain variant.
#[derive(Clone, Debug, PartialEq)]
pub struct KFields {
    pub kx: ScalarGrid,
    pub ky: ScalarGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KFieldSet {
    pub small: KFields,
    pub green: KFields,
}

fn check_delta_rh(delta_rh: f64) -> Result<()> {
    if delta_rh == 0.0 || !delta_rh.is_finite() {
        return Err(Error::InvalidParameter("humidity change must be non-zero".into()));
    }
    Ok(())
}

/// Divides the normal strains by the humidity change.
pub fn k_fields(strain: &StrainFields, delta_rh: f64) -> Result<KFieldSet> {
    check_delta_rh(delta_rh)?;
    let div = |g: &ScalarGrid| g.map(|v| v / delta_rh);
    Ok(KFieldSet {
        small: KFields {
            kx: div(&strain.eps11),
            ky: div(&strain.eps22),
        },
        green: KFields {
            kx: div(&strain.green.eps1),
            ky: div(&strain.green.eps2),
        },
    })
}

/// One averaged coefficient profile.
///
/// For `Axis::Y` each position is a column `x` and values are averaged over
/// `y`; for `Axis::X` each position is a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub axis: Axis,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    pub n_averaged: Vec<usize>,
    pub mean: f64,
    /// Population variance of `values`.
    pub variance: f64,
}

impl Profile {
    fn from_entries(axis: Axis, entries: Vec<(usize, f64, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Degenerate(format!(
                "no {}-profile position has enough samples",
                axis.name()
            )));
        }
        let n = entries.len() as f64;
        let mean = entries.iter().map(|e| e.1).sum::<f64>() / n;
        let variance = entries.iter().map(|e| (e.1 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            axis,
            positions: entries.iter().map(|e| e.0).collect(),
            values: entries.iter().map(|e| e.1).collect(),
            n_averaged: entries.iter().map(|e| e.2).collect(),
            mean,
            variance,
        })
    }

    pub fn value_at(&self, position: usize) -> Option<f64> {
        self.positions
            .binary_search(&position)
            .ok()
            .map(|i| self.values[i])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Number of positions along the profile axis and samples across it.
fn axis_extent(axis: Axis, w: usize, h: usize) -> (usize, usize) {
    match axis {
        Axis::Y => (w, h),
        Axis::X => (h, w),
    }
}

#[inline]
fn at(axis: Axis, pos: usize, t: usize) -> (usize, usize) {
    match axis {
        Axis::Y => (pos, t),
        Axis::X => (t, pos),
    }
}

/// Masked mean of `k` across `axis`; positions with fewer than `min_count`
/// samples are dropped.
pub fn k_profile(k: &ScalarGrid, mask: &BinaryMask, axis: Axis, min_count: usize) -> Result<Profile> {
    check_dims(k.dims(), mask.dims())?;
    if mask.is_empty() {
        return Err(Error::Degenerate("profile over an empty mask".into()));
    }
    let (n_pos, n_across) = axis_extent(axis, k.width(), k.height());
    let mut entries = Vec::new();
    for pos in 0..n_pos {
        let (mut sum, mut n) = (0.0, 0usize);
        for t in 0..n_across {
            let (x, y) = at(axis, pos, t);
            if mask.get(x, y) {
                sum += k.get(x, y);
                n += 1;
            }
        }
        if n > 0 && n >= min_count.max(1) {
            entries.push((pos, sum / n as f64, n));
        }
    }
    Profile::from_entries(axis, entries)
}

/// Longest contiguous masked run `[a, b]` (inclusive) along one line.
pub fn longest_run(mask: &BinaryMask, axis: Axis, pos: usize) -> Option<(usize, usize)> {
    let (_, n_across) = axis_extent(axis, mask.width(), mask.height());
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for t in 0..=n_across {
        let inside = t < n_across && {
            let (x, y) = at(axis, pos, t);
            mask.get(x, y)
        };
        match (inside, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                let run = (s, t - 1);
                if best.map_or(true, |b| run.1 - run.0 > b.1 - b.0) {
                    best = Some(run);
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// Endpoint form of the averaged small-strain coefficient:
/// `(v(b) − v(a)) / ((b − a)·ΔRH)` over the longest masked run of each line.
pub fn k_endpoint(
    flow: &FlowField,
    mask: &BinaryMask,
    delta_rh: f64,
    axis: Axis,
    min_span: usize,
) -> Result<Profile> {
    check_delta_rh(delta_rh)?;
    check_dims(flow.dims(), mask.dims())?;
    let comp = match axis {
        Axis::X => &flow.vx,
        Axis::Y => &flow.vy,
    };
    let (n_pos, _) = axis_extent(axis, flow.width(), flow.height());
    let mut entries = Vec::new();
    for pos in 0..n_pos {
        let Some((a, b)) = longest_run(mask, axis, pos) else {
            continue;
        };
        let span = b - a;
        if span == 0 || span < min_span {
            continue;
        }
        let (xa, ya) = at(axis, pos, a);
        let (xb, yb) = at(axis, pos, b);
        let value = (comp.get(xb, yb) - comp.get(xa, ya)) / (span as f64 * delta_rh);
        entries.push((pos, value, span));
    }
    Profile::from_entries(axis, entries)
}

/// Mean forward difference of the axis component over the longest masked run
/// of each line, divided by `ΔRH`. Sums `v(t+1) − v(t)` for `t = a..b−1`, so it
/// telescopes to [`k_endpoint`].
pub fn k_forward_averaged(
    flow: &FlowField,
    mask: &BinaryMask,
    delta_rh: f64,
    axis: Axis,
    min_span: usize,
) -> Result<Profile> {
    check_delta_rh(delta_rh)?;
    check_dims(flow.dims(), mask.dims())?;
    let comp = match axis {
        Axis::X => &flow.vx,
        Axis::Y => &flow.vy,
    };
    let (n_pos, _) = axis_extent(axis, flow.width(), flow.height());
    let mut entries = Vec::new();
    for pos in 0..n_pos {
        let Some((a, b)) = longest_run(mask, axis, pos) else {
            continue;
        };
        let span = b - a;
        if span == 0 || span < min_span {
            continue;
        }
        let mut sum = 0.0;
        for t in a..b {
            let (x0, y0) = at(axis, pos, t);
            let (x1, y1) = at(axis, pos, t + 1);
            sum += comp.get(x1, y1) - comp.get(x0, y0);
        }
        entries.push((pos, sum / (span as f64 * delta_rh), span));
    }
    Profile::from_entries(axis, entries)
}

/// Pixels whose absolute strain exceeds `crack_factor · max|k_small| · |ΔRH|`.
pub fn detect_cracks(
    strain_field: &ScalarGrid,
    k_small_profiles: &[&Profile],
    delta_rh: f64,
    crack_factor: f64,
) -> Result<BinaryMask> {
    if k_small_profiles.is_empty() {
        return Err(Error::InvalidParameter("crack detection needs at least one profile".into()));
    }
    let k_max = k_small_profiles.iter().map(|p| p.max_abs()).fold(0.0, f64::max);
    let threshold = crack_factor * k_max * delta_rh.abs();
    Ok(BinaryMask::threshold(&strain_field.map(f64::abs), threshold))
}

/// Apparent displacement from out-of-plane tilt: `r·(1 − cos(asin(Δy/r)))`.
pub fn projection_error(r: f64, delta_y: f64) -> Result<f64> {
    if !(r > 0.0) || delta_y.abs() > r {
        return Err(Error::Domain(format!(
            "projection error needs |dy| <= r with r > 0, got r={r}, dy={delta_y}"
        )));
    }
    Ok(r * (1.0 - (delta_y / r).asin().cos()))
}

/// Tunables for the strain stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrainParams {
    pub crack_factor: f64,
    pub min_span: usize,
    pub min_averaged: usize,
}

impl Default for StrainParams {
    fn default() -> Self {
        Self {
            crack_factor: 10.0,
            min_span: 10,
            min_averaged: 10,
        }
    }
}

/// Small and Green profiles along one axis plus crack statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientProfile {
    pub axis: Axis,
    pub positions: Vec<usize>,
    pub k_small: Vec<f64>,
    /// `None` where cracks left too few samples for the Green average.
    pub k_green: Vec<Option<f64>>,
    pub n_averaged: Vec<usize>,
    pub near_crack: Vec<bool>,
    pub mean_small: f64,
    pub var_small: f64,
    pub mean_green: f64,
    pub var_green: f64,
    /// Green mean before removing crack pixels.
    pub mean_green_with_cracks: f64,
    pub var_green_with_cracks: f64,
    pub crack_positions: Vec<(usize, usize)>,
}

/// Complete strain analysis of one flow.
#[derive(Clone, Debug)]
pub struct StrainAnalysis {
    pub strain: StrainFields,
    pub k: KFieldSet,
    pub cracks: BinaryMask,
    pub profile_x: CoefficientProfile,
    pub profile_y: CoefficientProfile,
    pub endpoint_x: Option<Profile>,
    pub endpoint_y: Option<Profile>,
}

fn combine(
    axis: Axis,
    small: &Profile,
    green_raw: &Profile,
    green: Option<&Profile>,
    cracks: &BinaryMask,
) -> CoefficientProfile {
    let crack_positions: Vec<(usize, usize)> = (0..cracks.height())
        .flat_map(|y| (0..cracks.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| cracks.get(x, y))
        .collect();
    let near_crack = small
        .positions
        .iter()
        .map(|&p| {
            crack_positions
                .iter()
                .any(|&(x, y)| match axis {
                    Axis::Y => x == p,
                    Axis::X => y == p,
                })
        })
        .collect();
    let (mean_green, var_green) = green.map_or((f64::NAN, f64::NAN), |g| (g.mean, g.variance));
    CoefficientProfile {
        axis,
        positions: small.positions.clone(),
        k_small: small.values.clone(),
        k_green: small
            .positions
            .iter()
            .map(|&p| green.and_then(|g| g.value_at(p)))
            .collect(),
        n_averaged: small.n_averaged.clone(),
        near_crack,
        mean_small: small.mean,
        var_small: small.variance,
        mean_green,
        var_green,
        mean_green_with_cracks: green_raw.mean,
        var_green_with_cracks: green_raw.variance,
        crack_positions,
    }
}

/// Strain fields, coefficient profiles along both axes, crack detection and
/// the crack-free recomputation of the Green profiles.
pub fn analyze(
    flow: &FlowField,
    mask: &BinaryMask,
    delta_rh: f64,
    params: &StrainParams,
) -> Result<StrainAnalysis> {
    check_dims(flow.dims(), mask.dims())?;
    let strain = StrainFields::from_flow(flow);
    let k = k_fields(&strain, delta_rh)?;
    let small_x = k_profile(&k.small.kx, mask, Axis::X, params.min_averaged)?;
    let small_y = k_profile(&k.small.ky, mask, Axis::Y, params.min_averaged)?;
    let cracks = {
        let profiles = [&small_x, &small_y];
        let c1 = detect_cracks(&strain.green.eps1, &profiles, delta_rh, params.crack_factor)?;
        let c2 = detect_cracks(&strain.green.eps2, &profiles, delta_rh, params.crack_factor)?;
        c1.or(&c2)?.and(mask)?
    };
    let clean = mask.and_not(&cracks)?;
    let green_x_raw = k_profile(&k.green.kx, mask, Axis::X, params.min_averaged)?;
    let green_y_raw = k_profile(&k.green.ky, mask, Axis::Y, params.min_averaged)?;
    let green_x = k_profile(&k.green.kx, &clean, Axis::X, params.min_averaged).ok();
    let green_y = k_profile(&k.green.ky, &clean, Axis::Y, params.min_averaged).ok();
    Ok(StrainAnalysis {
        profile_x: combine(Axis::X, &small_x, &green_x_raw, green_x.as_ref(), &cracks),
        profile_y: combine(Axis::Y, &small_y, &green_y_raw, green_y.as_ref(), &cracks),
        endpoint_x: k_endpoint(flow, mask, delta_rh, Axis::X, params.min_span).ok(),
        endpoint_y: k_endpoint(flow, mask, delta_rh, Axis::Y, params.min_span).ok(),
        strain,
        k,
        cracks,
    })
}
