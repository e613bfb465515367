//! Specimen segmentation, registration and data-mask generation.
//!
//! Each scan is reduced to working resolution, thresholded in the HSV value
//! channel, cleaned, and reduced to the single largest hole-free object. All
//! scans of one face are then translated onto a common centroid and cropped
//! to the union of their masks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::grid::{resample_area, sample_slice, BinaryMask, ScalarGrid};

/// RGB raster with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
    pub dpi: f64,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>, dpi: f64) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "rgb image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if !(dpi > 0.0) {
            return Err(Error::InvalidParameter(format!("dpi must be positive, got {dpi}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            dpi,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3], dpi: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
            dpi,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    fn channel(&self, c: usize) -> ScalarGrid {
        ScalarGrid::from_fn(self.width, self.height, |x, y| self.get(x, y)[c])
    }
}

/// One scan of one specimen face at a known humidity.
#[derive(Clone, Debug)]
pub struct SpecimenScan {
    pub image: RgbImage,
    /// Relative humidity in percent.
    pub humidity: f64,
    pub face_id: String,
    pub state_id: String,
}

impl SpecimenScan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.humidity) {
            return Err(Error::InvalidParameter(format!(
                "humidity {} outside [0, 100]",
                self.humidity
            )));
        }
        if !(self.image.dpi > 0.0) {
            return Err(Error::InvalidParameter("dpi must be positive".into()));
        }
        Ok(())
    }
}

/// Tunables for segmentation and alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub working_dpi: f64,
    pub border: usize,
    pub median_radius: usize,
    pub erosion_radius: usize,
    pub crop_margin: usize,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            working_dpi: 150.0,
            border: 8,
            median_radius: 1,
            erosion_radius: 5,
            crop_margin: 4,
        }
    }
}

/// Two aligned states of one face, ready for flow estimation.
#[derive(Clone, Debug)]
pub struct AlignedPair {
    pub i1: ScalarGrid,
    pub i2: ScalarGrid,
    pub mask1: BinaryMask,
    pub mask2: BinaryMask,
    /// Eroded intersection of the object masks; gates the data term.
    pub data_mask: BinaryMask,
    /// Humidity change `RH_1 − RH_0` in percent.
    pub delta_rh: f64,
    pub dpi: f64,
}

impl AlignedPair {
    /// Builds a pair, deriving the data mask by diamond erosion of `mask1 ∧ mask2`.
    pub fn new(
        i1: ScalarGrid,
        i2: ScalarGrid,
        mask1: BinaryMask,
        mask2: BinaryMask,
        erosion_radius: usize,
        delta_rh: f64,
        dpi: f64,
    ) -> Result<Self> {
        check_dims(i1.dims(), i2.dims())?;
        check_dims(i1.dims(), mask1.dims())?;
        check_dims(i1.dims(), mask2.dims())?;
        if delta_rh == 0.0 || !delta_rh.is_finite() {
            return Err(Error::InvalidParameter("humidity change must be non-zero".into()));
        }
        let data_mask = erode_diamond(&mask1.and(&mask2)?, erosion_radius);
        Ok(Self {
            i1,
            i2,
            mask1,
            mask2,
            data_mask,
            delta_rh,
            dpi,
        })
    }
}

impl AlignedPair {
    /// Builds a pair with an explicitly given data mask.
    #[allow(clippy::too_many_arguments)]
    pub fn with_data_mask(
        i1: ScalarGrid,
        i2: ScalarGrid,
        mask1: BinaryMask,
        mask2: BinaryMask,
        data_mask: BinaryMask,
        delta_rh: f64,
        dpi: f64,
    ) -> Result<Self> {
        let mut pair = Self::new(i1, i2, mask1, mask2, 0, delta_rh, dpi)?;
        check_dims(pair.i1.dims(), data_mask.dims())?;
        pair.data_mask = data_mask;
        Ok(pair)
    }
}

/// Area-averaging downsample to `target_dpi`, then a black frame of `border` px.
pub fn to_working_resolution(scan: &SpecimenScan, target_dpi: f64, border: usize) -> Result<RgbImage> {
    let img = &scan.image;
    if !(target_dpi > 0.0) || target_dpi > img.dpi {
        return Err(Error::InvalidParameter(format!(
            "target dpi {target_dpi} must be in (0, {}]",
            img.dpi
        )));
    }
    let ratio = target_dpi / img.dpi;
    let new_w = ((img.width as f64 * ratio).round() as usize).max(1);
    let new_h = ((img.height as f64 * ratio).round() as usize).max(1);
    let channels: Vec<ScalarGrid> = (0..3)
        .map(|c| {
            let ch = img.channel(c);
            if (new_w, new_h) == (img.width, img.height) {
                ch
            } else {
                resample_area(&ch, new_w, new_h)
            }
        })
        .collect();
    let out_w = new_w + 2 * border;
    let out_h = new_h + 2 * border;
    let mut pixels = vec![[0.0; 3]; out_w * out_h];
    for y in 0..new_h {
        for x in 0..new_w {
            pixels[(y + border) * out_w + x + border] =
                [channels[0].get(x, y), channels[1].get(x, y), channels[2].get(x, y)];
        }
    }
    RgbImage::new(out_w, out_h, pixels, target_dpi)
}

/// HSV value channel, `max(R, G, B)`.
pub fn value_channel(img: &RgbImage) -> ScalarGrid {
    ScalarGrid::from_fn(img.width, img.height, |x, y| {
        let [r, g, b] = img.get(x, y);
        r.max(g).max(b)
    })
    .with_dpi(Some(img.dpi))
}

pub const OTSU_BINS: usize = 256;

/// Histogram bin of `v` for a 256-bin histogram spanning `[lo, hi]`.
#[inline]
pub fn otsu_bin(v: f64, lo: f64, hi: f64) -> usize {
    let t = ((v - lo) / (hi - lo) * OTSU_BINS as f64).floor();
    (t.max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Otsu's threshold on a 256-bin histogram over the value range of `g`.
///
/// Returns the centre of the last bin of the lower class; callers classify
/// foreground as `value > threshold`.
pub fn otsu_threshold(g: &ScalarGrid) -> Result<f64> {
    let (lo, hi) = g.min_max();
    if !(hi > lo) {
        return Err(Error::Degenerate("otsu threshold of a constant image".into()));
    }
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &v in g.data() {
        let b = otsu_bin(v, lo, hi);
        count[b] += 1;
        sum[b] += v;
    }
    let total_n = g.data().len() as f64;
    let total_sum: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0usize, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t in 0..OTSU_BINS - 1 {
        n0 += count[t];
        s0 += sum[t];
        if n0 == 0 || n0 == g.data().len() {
            continue;
        }
        let w0 = n0 as f64 / total_n;
        let w1 = 1.0 - w0;
        let mu0 = s0 / n0 as f64;
        let mu1 = (total_sum - s0) / (total_n - n0 as f64);
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best.0 {
            best = (var, t);
        }
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    Ok(lo + (best.1 as f64 + 0.5) * width)
}

/// Majority filter over a clipped `(2r+1)²` window; ties keep the centre.
pub fn median_filter_mask(m: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(Error::InvalidParameter("median radius must be >= 1".into()));
    }
    let (w, h) = m.dims();
    // summed-area table of true pixels
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0usize;
        for x in 0..w {
            row += m.get(x, y) as usize;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(radius);
        let y0 = y.saturating_sub(radius);
        let x1 = (x + radius + 1).min(w);
        let y1 = (y + radius + 1).min(h);
        let ones = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
            - sat[y0 * (w + 1) + x1]
            - sat[y1 * (w + 1) + x0];
        let n = (x1 - x0) * (y1 - y0);
        match (2 * ones).cmp(&n) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => m.get(x, y),
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Component labels; 0 is background, components are `1..=count` in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl Labels {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label, index 0 is the background.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.count as usize + 1];
        for &l in &self.labels {
            s[l as usize] += 1;
        }
        s
    }
}

/// Labels the true pixels of `m` by connectivity.
pub fn label_components(m: &BinaryMask, connectivity: Connectivity) -> Labels {
    let (w, h) = m.dims();
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !m.bits()[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if m.get_signed(nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if labels[j] == 0 {
                        labels[j] = count;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    Labels {
        width: w,
        height: h,
        labels,
        count,
    }
}

/// Selects the largest hole-free object of a thresholded scan.
///
/// Background is the set of false pixels 4-connected to the image border;
/// everything else is foreground, so interior holes are filled. The largest
/// 8-connected foreground component is returned.
pub fn segment_object(bw: &BinaryMask) -> Result<BinaryMask> {
    let (w, h) = bw.dims();
    let bg_labels = label_components(&bw.not(), Connectivity::Four);
    let mut border_labels = std::collections::BTreeSet::new();
    for x in 0..w {
        border_labels.insert(bg_labels.get(x, 0));
        border_labels.insert(bg_labels.get(x, h - 1));
    }
    for y in 0..h {
        border_labels.insert(bg_labels.get(0, y));
        border_labels.insert(bg_labels.get(w - 1, y));
    }
    border_labels.remove(&0);
    let foreground = BinaryMask::from_fn(w, h, |x, y| {
        let l = bg_labels.get(x, y);
        l == 0 || !border_labels.contains(&l)
    });
    let fg = label_components(&foreground, Connectivity::Eight);
    if fg.count == 0 {
        return Err(Error::SegmentationFailed("no foreground component".into()));
    }
    let sizes = fg.sizes();
    let best = (1..=fg.count as usize)
        .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        .unwrap() as u32;
    Ok(BinaryMask::from_fn(w, h, |x, y| fg.get(x, y) == best))
}

/// Centroid and major-axis orientation of a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub cx: f64,
    pub cy: f64,
    /// Radians in `(−π/2, π/2]`, measured in image coordinates (y down).
    pub theta: f64,
}

pub fn centroid_orientation(m: &BinaryMask) -> Result<Orientation> {
    let (cx, cy) = m
        .centroid()
        .ok_or_else(|| Error::Degenerate("orientation of an empty mask".into()))?;
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                mu20 += dx * dx;
                mu02 += dy * dy;
                mu11 += dx * dy;
            }
        }
    }
    let theta = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);
    Ok(Orientation { cx, cy, theta })
}

/// Rotates image and mask by `−theta` about the mask centroid.
///
/// The image is resampled bilinearly, the mask by nearest neighbour.
pub fn derotate(image: &ScalarGrid, mask: &BinaryMask, theta: f64) -> Result<(ScalarGrid, BinaryMask)> {
    check_dims(image.dims(), mask.dims())?;
    if theta.abs() >= std::f64::consts::FRAC_PI_4 {
        return Err(Error::InvalidParameter(format!(
            "derotation angle {theta} exceeds pi/4"
        )));
    }
    if theta == 0.0 {
        return Ok((image.clone(), mask.clone()));
    }
    let (cx, cy) = mask
        .centroid()
        .ok_or_else(|| Error::Degenerate("derotation of an empty mask".into()))?;
    let (s, c) = theta.sin_cos();
    let (w, h) = image.dims();
    let src = |x: usize, y: usize| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    };
    let out = ScalarGrid::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        sample_slice(image.data(), w, h, sx, sy)
    })
    .with_dpi(image.dpi());
    let out_mask = BinaryMask::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        mask.get_signed(sx.round() as i64, sy.round() as i64)
    });
    Ok((out, out_mask))
}

/// A segmented, grayscale scan ready for alignment.
#[derive(Clone, Debug)]
pub struct SegmentedScan {
    pub gray: ScalarGrid,
    pub mask: BinaryMask,
}

/// An aligned, cropped scan.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedScan {
    pub gray: ScalarGrid,
    pub mask: BinaryMask,
    /// Integer translation applied to this scan, in working-resolution pixels.
    pub shift: (i64, i64),
    /// Origin of the crop window in the reference scan's frame.
    pub crop_origin: (i64, i64),
}

/// Translates all scans onto the first scan's centroid and crops to the
/// union bounding box of the translated masks plus `margin`.
pub fn align_and_crop(scans: &[SegmentedScan], margin: usize) -> Result<Vec<AlignedScan>> {
    if scans.len() < 2 {
        return Err(Error::InvalidParameter("alignment needs at least two scans".into()));
    }
    let mut shifts = Vec::with_capacity(scans.len());
    let mut reference = None;
    for s in scans {
        check_dims(s.gray.dims(), s.mask.dims())?;
        let (cx, cy) = s
            .mask
            .centroid()
            .ok_or_else(|| Error::SegmentationFailed("empty mask in alignment".into()))?;
        let (rx, ry) = *reference.get_or_insert((cx, cy));
        shifts.push(((rx - cx).round() as i64, (ry - cy).round() as i64));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for (s, &(dx, dy)) in scans.iter().zip(&shifts) {
        let (bx0, by0, bx1, by1) = s.mask.bounding_box().unwrap();
        x0 = x0.min(bx0 as i64 + dx);
        y0 = y0.min(by0 as i64 + dy);
        x1 = x1.max(bx1 as i64 + dx);
        y1 = y1.max(by1 as i64 + dy);
    }
    let m = margin as i64;
    let (ox, oy) = (x0 - m, y0 - m);
    let out_w = (x1 - x0 + 1 + 2 * m) as usize;
    let out_h = (y1 - y0 + 1 + 2 * m) as usize;
    Ok(scans
        .iter()
        .zip(&shifts)
        .map(|(s, &(dx, dy))| {
            let (w, h) = s.gray.dims();
            let inside = |sx: i64, sy: i64| sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
            let gray = ScalarGrid::from_fn(out_w, out_h, |x, y| {
                let sx = x as i64 + ox - dx;
                let sy = y as i64 + oy - dy;
                if inside(sx, sy) {
                    s.gray.get(sx as usize, sy as usize)
                } else {
                    0.0
                }
            })
            .with_dpi(s.gray.dpi());
            let mask = BinaryMask::from_fn(out_w, out_h, |x, y| {
                s.mask.get_signed(x as i64 + ox - dx, y as i64 + oy - dy)
            });
            AlignedScan {
                gray,
                mask,
                shift: (dx, dy),
                crop_origin: (ox, oy),
            }
        })
        .collect())
}

/// Erosion with the L1-ball `{|dx| + |dy| <= radius}`; outside counts as false.
pub fn erode_diamond(m: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return m.clone();
    }
    let r = radius as i64;
    let (w, h) = m.dims();
    // distance to the nearest false pixel (or the outside) in L1 metric via two passes
    let big = i64::MAX / 4;
    let mut d = vec![big; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !m.get(x, y) {
                d[i] = 0;
                continue;
            }
            let left = if x > 0 { d[i - 1] } else { 0 };
            let up = if y > 0 { d[i - w] } else { 0 };
            d[i] = left.min(up) + 1;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            let right = if x + 1 < w { d[i + 1] } else { 0 };
            let down = if y + 1 < h { d[i + w] } else { 0 };
            d[i] = d[i].min(right.min(down) + 1);
        }
    }
    BinaryMask::from_fn(w, h, |x, y| d[y * w + x] > r)
}

/// Per-scan segmentation result with the intermediate threshold.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub gray: ScalarGrid,
    pub mask: BinaryMask,
    pub threshold: f64,
    pub orientation: Orientation,
}

/// Runs working-resolution reduction, value channel, Otsu, median cleanup and
/// object selection on one scan.
pub fn segment_scan(scan: &SpecimenScan, params: &PreprocessParams) -> Result<Segmentation> {
    scan.validate()?;
    let working = to_working_resolution(scan, params.working_dpi, params.border)?;
    let gray = value_channel(&working);
    let threshold = otsu_threshold(&gray)?;
    let bw = BinaryMask::threshold(&gray, threshold);
    let bw = median_filter_mask(&bw, params.median_radius)?;
    let mask = segment_object(&bw)?;
    let orientation = centroid_orientation(&mask)?;
    Ok(Segmentation {
        gray,
        mask,
        threshold,
        orientation,
    })
}

/// Segments and aligns all scans of one face; the first scan is the reference
/// and is de-rotated before alignment.
pub fn preprocess_face(
    scans: &[SpecimenScan],
    params: &PreprocessParams,
) -> Result<(Vec<AlignedScan>, Vec<Segmentation>)> {
    let segs = scans
        .iter()
        .map(|s| {
            segment_scan(s, params)
                .map_err(|e| e.context(format!("{}/{}", s.face_id, s.state_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((align_segmented(&segs, params)?, segs))
}

/// Alignment half of [`preprocess_face`] for scans segmented separately.
pub fn align_segmented(segs: &[Segmentation], params: &PreprocessParams) -> Result<Vec<AlignedScan>> {
    let mut segmented: Vec<SegmentedScan> = segs
        .iter()
        .map(|s| SegmentedScan {
            gray: s.gray.clone(),
            mask: s.mask.clone(),
        })
        .collect();
    if let Some(first) = segmented.first_mut() {
        let theta = segs[0].orientation.theta;
        if theta.abs() < std::f64::consts::FRAC_PI_4 {
            let (g, m) = derotate(&first.gray, &first.mask, theta)?;
            first.gray = g;
            first.mask = m;
        }
    }
    align_and_crop(&segmented, params.crop_margin)
}
