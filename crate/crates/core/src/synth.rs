//! Synthetic image pairs with exact ground-truth flow and illumination.
//!
//! Flows use the backward-warping convention of the solver: a point `x` of the
//! first image moves to `M(x) = x + v(x)` in the second, so
//! `i2(x + v(x)) = i1(x)` up to noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::grid::{bilinear_sample, BinaryMask, FlowField, ScalarGrid};

/// Analytic displacement or illumination field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticField {
    Translation { dx: f64, dy: f64 },
    /// Rotation by `angle` radians about `(cx, cy)`.
    Rotation { angle: f64, cx: f64, cy: f64 },
    UniformStretch { sx: f64, sy: f64, cx: f64, cy: f64 },
    /// `v_x = gamma·(y − cy)`.
    Shear { gamma: f64, cy: f64 },
    /// Background stretch `strain` about `(cx, cy)` plus a jump of `magnitude`
    /// in `v_y`, ramped linearly over `y ∈ [y0, y0 + width]`.
    CrackStep {
        y0: f64,
        width: f64,
        magnitude: f64,
        strain: f64,
        cx: f64,
        cy: f64,
    },
    /// Constant `amplitude` inside `[x0, x1) × [y0, y1)`, zero elsewhere.
    Stain {
        amplitude: f64,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Apply the fields one after another.
    Composite { fields: Vec<AnalyticField> },
}

impl AnalyticField {
    /// Displacement at `(x, y)`. Stains displace nothing.
    pub fn flow(&self, x: f64, y: f64) -> (f64, f64) {
        let (mx, my) = self.map(x, y);
        (mx - x, my - y)
    }

    /// The forward map `x + v(x)`.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            AnalyticField::Translation { dx, dy } => (x + dx, y + dy),
            AnalyticField::Rotation { angle, cx, cy } => {
                let (s, c) = angle.sin_cos();
                let (rx, ry) = (x - cx, y - cy);
                (cx + c * rx - s * ry, cy + s * rx + c * ry)
            }
            AnalyticField::UniformStretch { sx, sy, cx, cy } => (x + sx * (x - cx), y + sy * (y - cy)),
            AnalyticField::Shear { gamma, cy } => (x + gamma * (y - cy), y),
            AnalyticField::CrackStep {
                y0,
                width,
                magnitude,
                strain,
                cx,
                cy,
            } => {
                let ramp = ((y - y0) / width).clamp(0.0, 1.0);
                (x + strain * (x - cx), y + strain * (y - cy) + magnitude * ramp)
            }
            AnalyticField::Stain { .. } => (x, y),
            AnalyticField::Composite { fields } => fields.iter().fold((x, y), |(px, py), f| f.map(px, py)),
        }
    }

    /// Solves `map(x) = (px, py)`.
    pub fn inverse_map(&self, px: f64, py: f64) -> (f64, f64) {
        match self {
            AnalyticField::Translation { dx, dy } => (px - dx, py - dy),
            AnalyticField::Rotation { angle, cx, cy } => AnalyticField::Rotation {
                angle: -angle,
                cx: *cx,
                cy: *cy,
            }
            .map(px, py),
            AnalyticField::UniformStretch { sx, sy, cx, cy } => {
                (cx + (px - cx) / (1.0 + sx), cy + (py - cy) / (1.0 + sy))
            }
            AnalyticField::Shear { gamma, cy } => (px - gamma * (py - cy), py),
            AnalyticField::CrackStep {
                y0,
                width,
                magnitude,
                strain,
                cx,
                cy,
            } => {
                let x = cx + (px - cx) / (1.0 + strain);
                // y ↦ y + v_y is piecewise linear and increasing, so bisection is exact enough
                let fy = |y: f64| y + strain * (y - cy) + magnitude * ((y - y0) / width).clamp(0.0, 1.0);
                let span = magnitude.abs() + strain.abs() * (py - cy).abs() + 1.0;
                let (mut lo, mut hi) = (py - 2.0 * span - 1.0, py + 2.0 * span + 1.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if fy(mid) < py {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (x, 0.5 * (lo + hi))
            }
            AnalyticField::Stain { .. } => (px, py),
            AnalyticField::Composite { fields } => {
                fields.iter().rev().fold((px, py), |(x, y), f| f.inverse_map(x, y))
            }
        }
    }

    /// Illumination offset at `(x, y)`; zero for displacement fields.
    pub fn illumination(&self, x: f64, y: f64) -> f64 {
        match self {
            AnalyticField::Stain {
                amplitude,
                x0,
                y0,
                x1,
                y1,
            } => {
                if x >= *x0 && x < *x1 && y >= *y0 && y < *y1 {
                    *amplitude
                } else {
                    0.0
                }
            }
            AnalyticField::Composite { fields } => fields.iter().map(|f| f.illumination(x, y)).sum(),
            _ => 0.0,
        }
    }

    /// Flow sampled on the pixel lattice.
    pub fn flow_field(&self, width: usize, height: usize) -> FlowField {
        FlowField::from_fn(width, height, |x, y| self.flow(x as f64, y as f64))
    }
}

/// Anything that can be evaluated at real coordinates.
pub trait Texture {
    fn dims(&self) -> (usize, usize);
    fn eval(&self, x: f64, y: f64) -> f64;
}

impl Texture for ScalarGrid {
    fn dims(&self) -> (usize, usize) {
        ScalarGrid::dims(self)
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        bilinear_sample(self, x, y)
    }
}

const OCTAVES: [(f64, f64); 4] = [(32.0, 1.0), (16.0, 0.7), (8.0, 0.5), (6.0, 0.35)];

/// Continuous procedural wood-like texture: growth rings around a pith
/// outside the frame, bent by low-frequency noise, plus multi-octave detail.
#[derive(Clone, Debug)]
pub struct WoodTexture {
    width: usize,
    height: usize,
    keys: [u64; 5],
    pith: (f64, f64),
    ring_period: f64,
    offset: f64,
    scale: f64,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice_value(key: u64, i: i64, j: i64) -> f64 {
    let h = mix64(key ^ mix64((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(key: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (i, j) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - i, gy - j);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (i, j) = (i as i64, j as i64);
    let a = lattice_value(key, i, j);
    let b = lattice_value(key, i + 1, j);
    let c = lattice_value(key, i, j + 1);
    let d = lattice_value(key, i + 1, j + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

impl WoodTexture {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = std::array::from_fn(|_| rng.random::<u64>());
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = 1.5 * width.max(height) as f64;
        let pith = (
            0.5 * width as f64 + dist * angle.cos(),
            0.5 * height as f64 + dist * angle.sin(),
        );
        let ring_period = rng.random_range(9.0..14.0);
        let mut tex = Self {
            width,
            height,
            keys,
            pith,
            ring_period,
            offset: 0.0,
            scale: 1.0,
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..height {
            for x in 0..width {
                let v = tex.raw(x as f64, y as f64);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        tex.offset = lo;
        tex.scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
        tex
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        let r = ((x - self.pith.0).powi(2) + (y - self.pith.1).powi(2)).sqrt();
        let bend = 6.0 * value_noise(self.keys[4], x, y, 48.0);
        let phase = std::f64::consts::TAU * (r + bend) / self.ring_period;
        let ring = 0.5 + 0.5 * phase.sin();
        let detail: f64 = OCTAVES
            .iter()
            .zip(&self.keys)
            .map(|(&(cell, amp), &key)| amp * value_noise(key, x, y, cell))
            .sum();
        ring + 0.6 * detail
    }

    pub fn render(&self) -> ScalarGrid {
        ScalarGrid::from_fn(self.width, self.height, |x, y| self.eval(x as f64, y as f64))
    }
}

impl Texture for WoodTexture {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        (self.raw(x, y) - self.offset) * self.scale
    }
}

/// Wood-like texture sampled on the lattice, values in `[0, 1]`.
pub fn wood_texture(width: usize, height: usize, seed: u64) -> ScalarGrid {
    WoodTexture::new(width, height, seed).render()
}

/// A rendered pair with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub i1: ScalarGrid,
    pub i2: ScalarGrid,
    pub true_flow: FlowField,
    /// Brightness added to the second image, pulled back to first-image
    /// coordinates: `stain(x + v(x))`.
    pub true_illum: ScalarGrid,
}

/// Renders `i1 = texture` and `i2(y) = texture(M⁻¹(y)) + stain(y) + noise`.
pub fn render_pair(
    texture: &impl Texture,
    flow: &AnalyticField,
    illum: Option<&AnalyticField>,
    noise_sigma: f64,
    noise_seed: u64,
) -> Result<SyntheticPair> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let (w, h) = texture.dims();
    let i1 = ScalarGrid::from_fn(w, h, |x, y| texture.eval(x as f64, y as f64));
    let stain = |x: f64, y: f64| illum.map_or(0.0, |f| f.illumination(x, y));
    let mut i2 = ScalarGrid::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64, y as f64);
        let (sx, sy) = flow.inverse_map(px, py);
        texture.eval(sx, sy) + stain(px, py)
    });
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in i2.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let true_flow = flow.flow_field(w, h);
    let true_illum = ScalarGrid::from_fn(w, h, |x, y| {
        let (mx, my) = flow.map(x as f64, y as f64);
        stain(mx, my)
    });
    Ok(SyntheticPair {
        i1,
        i2,
        true_flow,
        true_illum,
    })
}

/// Mean and 95th percentile (nearest rank) of the per-pixel endpoint error.
pub fn endpoint_error(estimated: &FlowField, truth: &FlowField, mask: &BinaryMask) -> Result<(f64, f64)> {
    check_dims(truth.dims(), estimated.dims())?;
    check_dims(truth.dims(), mask.dims())?;
    let mut errs: Vec<f64> = (0..mask.bits().len())
        .filter(|&i| mask.bits()[i])
        .map(|i| {
            let dx = estimated.vx.data()[i] - truth.vx.data()[i];
            let dy = estimated.vy.data()[i] - truth.vy.data()[i];
            dx.hypot(dy)
        })
        .collect();
    if errs.is_empty() {
        return Err(Error::Degenerate("endpoint error over an empty mask".into()));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    let rank = ((0.95 * errs.len() as f64).ceil() as usize).clamp(1, errs.len());
    Ok((mean, errs[rank - 1]))
}

/// Pixels at least `margin` away from every border.
pub fn interior_mask(width: usize, height: usize, margin: f64) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        x >= margin && y >= margin && x <= width as f64 - 1.0 - margin && y <= height as f64 - 1.0 - margin
    })
}

/// Pearson correlation of two fields over the mask; `None` when either is
/// constant there.
pub fn masked_correlation(a: &ScalarGrid, b: &ScalarGrid, mask: &BinaryMask) -> Result<Option<f64>> {
    check_dims(a.dims(), b.dims())?;
    check_dims(a.dims(), mask.dims())?;
    let pairs: Vec<(f64, f64)> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|((&x, &y), _)| (x, y))
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(None);
    }
    Ok(Some(sab / (saa * sbb).sqrt()))
}

/// Interior margin for accuracy metrics: largest displacement plus 2 px.
pub fn evaluation_margin(truth: &FlowField) -> f64 {
    truth.max_magnitude() + 2.0
}

/// A named synthetic case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCase {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub texture_seed: u64,
    pub noise_seed: u64,
    pub noise_sigma: f64,
    pub flow: AnalyticField,
    pub illum: Option<AnalyticField>,
    pub rh0: f64,
    pub rh1: f64,
}

impl SynthCase {
    fn base(name: &str, size: usize, flow: AnalyticField) -> Self {
        Self {
            name: name.to_string(),
            width: size,
            height: size,
            texture_seed: 7,
            noise_seed: 11,
            noise_sigma: 0.0,
            flow,
            illum: None,
            rh0: 20.0,
            rh1: 30.0,
        }
    }

    pub fn delta_rh(&self) -> f64 {
        self.rh1 - self.rh0
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.width as f64 - 1.0), 0.5 * (self.height as f64 - 1.0))
    }

    pub fn render(&self) -> Result<SyntheticPair> {
        let texture = WoodTexture::new(self.width, self.height, self.texture_seed);
        render_pair(&texture, &self.flow, self.illum.as_ref(), self.noise_sigma, self.noise_seed)
    }

    /// Interior region used as the data mask.
    pub fn mask(&self) -> BinaryMask {
        let truth = self.flow.flow_field(self.width, self.height);
        interior_mask(self.width, self.height, evaluation_margin(&truth))
    }
}

/// Names accepted by [`catalog_case`].
pub const CATALOG: [&str; 6] = ["zero", "shift-0.5px", "stretch-1pct", "rot-1deg", "crack-1.5px", "stain-0.1"];

pub fn catalog_case(name: &str) -> Result<SynthCase> {
    let n = 256;
    let c = 0.5 * (n as f64 - 1.0);
    let case = match name {
        "zero" => SynthCase::base(name, n, AnalyticField::Translation { dx: 0.0, dy: 0.0 }),
        "shift-0.5px" => SynthCase::base(name, n, AnalyticField::Translation { dx: 0.5, dy: 0.0 }),
        "stretch-1pct" => {
            let n = 512;
            let c = 0.5 * (n as f64 - 1.0);
            SynthCase::base(
                name,
                n,
                AnalyticField::UniformStretch {
                    sx: 0.01,
                    sy: 0.01,
                    cx: c,
                    cy: c,
                },
            )
        }
        "rot-1deg" => SynthCase::base(
            name,
            n,
            AnalyticField::Rotation {
                angle: 1f64.to_radians(),
                cx: c,
                cy: c,
            },
        ),
        "crack-1.5px" => SynthCase::base(
            name,
            n,
            AnalyticField::CrackStep {
                y0: c.floor(),
                width: 2.0,
                magnitude: 1.5,
                strain: 1e-3,
                cx: c,
                cy: c,
            },
        ),
        "stain-0.1" => {
            let mut case = SynthCase::base(name, n, AnalyticField::Translation { dx: 0.0, dy: 0.0 });
            case.illum = Some(AnalyticField::Stain {
                amplitude: 0.1,
                x0: 64.0,
                y0: 80.0,
                x1: 176.0,
                y1: 168.0,
            });
            case
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown synthetic case {other:?}; known: {}",
                CATALOG.join(", ")
            )))
        }
    };
    Ok(case)
}
