//! Lattice types and the discrete operators shared by every stage.
//!
//! Values are stored row-major in `f64`. Coordinates follow the image
//! convention: `x` runs along a row (column index), `y` down the rows.

use rayon::prelude::*;

use crate::error::{check_dims, Error, Result};

/// A real-valued field on a `width × height` pixel lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
    dpi: Option<f64>,
}

impl ScalarGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            dpi: None,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values"));
        }
        Ok(Self {
            width,
            height,
            data,
            dpi: None,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            dpi: None,
        }
    }

    pub fn with_dpi(mut self, dpi: Option<f64>) -> Self {
        self.dpi = dpi;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dpi(&self) -> Option<f64> {
        self.dpi
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
            dpi: self.dpi,
        }
    }

    /// Element-wise combination of two grids of equal size.
    pub fn zip_map(&self, other: &ScalarGrid, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<Self> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            dpi: self.dpi,
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Sequential sum; the fixed order keeps results bit-reproducible.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean over the pixels selected by `mask`, `None` if the mask is empty.
    pub fn masked_mean(&self, mask: &BinaryMask) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, &m) in self.data.iter().zip(mask.bits()) {
            if m {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Inner product; sequential for reproducibility.
    pub fn dot(&self, other: &ScalarGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Per-pixel displacement in pixels; `vx`, `vy` share dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub vx: ScalarGrid,
    pub vy: ScalarGrid,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            vx: ScalarGrid::zeros(width, height),
            vy: ScalarGrid::zeros(width, height),
        }
    }

    pub fn new(vx: ScalarGrid, vy: ScalarGrid) -> Result<Self> {
        check_dims(vx.dims(), vy.dims())?;
        Ok(Self { vx, vy })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut vx = ScalarGrid::zeros(width, height);
        let mut vy = ScalarGrid::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                vx.set(x, y, a);
                vy.set(x, y, b);
            }
        }
        Self { vx, vy }
    }

    pub fn width(&self) -> usize {
        self.vx.width()
    }

    pub fn height(&self) -> usize {
        self.vx.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vx.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite()
    }

    /// Largest vector magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.vx
            .data()
            .iter()
            .zip(self.vy.data())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

/// Per-pixel boolean field.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(g: &ScalarGrid, threshold: f64) -> Self {
        Self {
            width: g.width(),
            height: g.height(),
            bits: g.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like [`get`](Self::get) but false outside the lattice.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<Self> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<Self> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<Self> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect(),
        })
    }

    pub fn not(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the true pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Mask centroid `(cx, cy)`, `None` if empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Forward differences with a zero difference on the last column / row.
pub fn gradient_forward(g: &ScalarGrid) -> (ScalarGrid, ScalarGrid) {
    let (w, h) = g.dims();
    let mut gx = ScalarGrid::zeros(w, h);
    let mut gy = ScalarGrid::zeros(w, h);
    gradient_forward_into(g.data(), w, h, gx.data_mut(), gy.data_mut());
    (gx, gy)
}

pub(crate) fn gradient_forward_into(
    g: &[f64],
    w: usize,
    h: usize,
    gx: &mut [f64],
    gy: &mut [f64],
) {
    gx.par_chunks_mut(w)
        .zip(gy.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (rx, ry))| {
            let row = &g[y * w..(y + 1) * w];
            for x in 0..w {
                rx[x] = if x + 1 < w { row[x + 1] - row[x] } else { 0.0 };
                ry[x] = if y + 1 < h {
                    g[(y + 1) * w + x] - row[x]
                } else {
                    0.0
                };
            }
        });
}

/// `∂g/∂x`: central in the interior, one-sided on the first and last column.
pub fn d_dx(g: &ScalarGrid) -> ScalarGrid {
    let (w, h) = g.dims();
    ScalarGrid::from_fn(w, h, |x, y| {
        if w < 2 {
            0.0
        } else if x == 0 {
            g.get(1, y) - g.get(0, y)
        } else if x == w - 1 {
            g.get(x, y) - g.get(x - 1, y)
        } else {
            0.5 * (g.get(x + 1, y) - g.get(x - 1, y))
        }
    })
}

/// `∂g/∂y`, same stencil as [`d_dx`].
pub fn d_dy(g: &ScalarGrid) -> ScalarGrid {
    let (w, h) = g.dims();
    ScalarGrid::from_fn(w, h, |x, y| {
        if h < 2 {
            0.0
        } else if y == 0 {
            g.get(x, 1) - g.get(x, 0)
        } else if y == h - 1 {
            g.get(x, y) - g.get(x, y - 1)
        } else {
            0.5 * (g.get(x, y + 1) - g.get(x, y - 1))
        }
    })
}

/// Central-difference gradient, one-sided at the border.
pub fn gradient_central(g: &ScalarGrid) -> (ScalarGrid, ScalarGrid) {
    (d_dx(g), d_dy(g))
}

/// Negative adjoint of [`gradient_forward`].
pub fn divergence(px: &ScalarGrid, py: &ScalarGrid) -> Result<ScalarGrid> {
    check_dims(px.dims(), py.dims())?;
    let (w, h) = px.dims();
    let mut out = ScalarGrid::zeros(w, h);
    divergence_into(px.data(), py.data(), w, h, out.data_mut());
    Ok(out)
}

#[inline]
fn backward_diff(cur: f64, prev: f64, i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else if i == 0 {
        cur
    } else if i == n - 1 {
        -prev
    } else {
        cur - prev
    }
}

pub(crate) fn divergence_into(px: &[f64], py: &[f64], w: usize, h: usize, out: &mut [f64]) {
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let i = y * w + x;
            let dx = backward_diff(px[i], if x > 0 { px[i - 1] } else { 0.0 }, x, w);
            let dy = backward_diff(py[i], if y > 0 { py[i - w] } else { 0.0 }, y, h);
            row[x] = dx + dy;
        }
    });
}

/// Bilinear interpolation; coordinates are clamped to the lattice.
#[inline]
pub fn bilinear_sample(g: &ScalarGrid, x: f64, y: f64) -> f64 {
    sample_slice(g.data(), g.width(), g.height(), x, y)
}

#[inline]
pub(crate) fn sample_slice(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, (w - 1) as f64) };
    let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, (h - 1) as f64) };
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bottom = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Overlap weights of a 1-D area resampling from `n_in` to `n_out` cells.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = ((o + 1) as f64 * ratio).min(n_in as f64);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 1e-12 {
                    w.push((i, overlap / (hi - lo)));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resample to `new_w × new_h`.
pub fn resample_area(g: &ScalarGrid, new_w: usize, new_h: usize) -> ScalarGrid {
    let (w, h) = g.dims();
    let wx = area_weights(w, new_w);
    let wy = area_weights(h, new_h);
    // rows first
    let mut tmp = vec![0.0; new_w * h];
    tmp.par_chunks_mut(new_w).enumerate().for_each(|(y, row)| {
        let src = g.row(y);
        for (x, weights) in wx.iter().enumerate() {
            row[x] = weights.iter().map(|&(i, wt)| src[i] * wt).sum();
        }
    });
    let mut out = ScalarGrid::zeros(new_w, new_h);
    out.data_mut()
        .par_chunks_mut(new_w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = wy[y].iter().map(|&(j, wt)| tmp[j * new_w + x] * wt).sum();
            }
        });
    out.with_dpi(g.dpi())
}

/// Coarsens a mask: a coarse pixel is true iff every overlapped fine pixel is.
pub fn downsample_mask_strict(m: &BinaryMask, new_w: usize, new_h: usize) -> BinaryMask {
    let wx = area_weights(m.width(), new_w);
    let wy = area_weights(m.height(), new_h);
    BinaryMask::from_fn(new_w, new_h, |x, y| {
        wy[y]
            .iter()
            .all(|&(j, _)| wx[x].iter().all(|&(i, _)| m.get(i, j)))
    })
}

/// Bilinear resize using pixel-centre alignment.
pub fn resize_bilinear(g: &ScalarGrid, new_w: usize, new_h: usize) -> ScalarGrid {
    let (w, h) = g.dims();
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let mut out = ScalarGrid::zeros(new_w, new_h);
    out.data_mut()
        .par_chunks_mut(new_w)
        .enumerate()
        .for_each(|(y, row)| {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for (x, v) in row.iter_mut().enumerate() {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                *v = sample_slice(g.data(), w, h, src_x, src_y);
            }
        });
    out.with_dpi(g.dpi())
}
