//! Visualisations: flow colour coding, diverging heatmaps and profile plots.

use std::fmt::Write as _;

use crate::grid::{BinaryMask, FlowField, ScalarGrid};
use crate::strain::CoefficientProfile;

/// Hue segments of the standard optical-flow colour wheel.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| i as f64 / n as f64;
    wheel.extend((0..RY).map(|i| [1.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [1.0 - ramp(i, YG), 1.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 1.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 1.0 - ramp(i, CB), 1.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 1.0]));
    wheel.extend((0..MR).map(|i| [1.0, 0.0, 1.0 - ramp(i, MR)]));
    wheel
}

/// Colour-codes `flow` (hue = direction, saturation = magnitude / `max_mag`).
/// Returns interleaved RGB bytes and the normalisation actually used.
pub fn flow_to_rgb(flow: &FlowField, max_mag: Option<f64>) -> (Vec<u8>, f64) {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max = max_mag.unwrap_or_else(|| flow.max_magnitude());
    let norm = if max > 0.0 { max } else { 1.0 };
    let mut out = Vec::with_capacity(flow.vx.data().len() * 3);
    for (&u, &v) in flow.vx.data().iter().zip(flow.vy.data()) {
        let (u, v) = (u / norm, v / norm);
        let rad = (u * u + v * v).sqrt();
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = fk.floor() as usize % ncols;
        let k1 = (k0 + 1) % ncols;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            out.push((255.0 * col).round().clamp(0.0, 255.0) as u8);
        }
    }
    (out, norm)
}

/// Diverging blue-white-red map of `g` over `[-scale, scale]`; pixels outside
/// `mask` are grey. Returns RGB bytes and the scale used (max |g| on the mask
/// when `scale` is `None`).
pub fn heatmap_rgb(g: &ScalarGrid, mask: Option<&BinaryMask>, scale: Option<f64>) -> (Vec<u8>, f64) {
    let inside = |i: usize| mask.is_none_or(|m| m.bits()[i]);
    let s = scale.unwrap_or_else(|| {
        g.data()
            .iter()
            .enumerate()
            .filter(|(i, _)| inside(*i))
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()))
    });
    let s = if s > 0.0 { s } else { 1.0 };
    let mut out = Vec::with_capacity(g.data().len() * 3);
    for (i, &v) in g.data().iter().enumerate() {
        let rgb = if !inside(i) {
            [128.0, 128.0, 128.0]
        } else {
            let t = (v / s).clamp(-1.0, 1.0);
            if t >= 0.0 {
                [255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t)]
            } else {
                [255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0]
            }
        };
        out.extend(rgb.iter().map(|c| c.round() as u8));
    }
    (out, s)
}

/// Mean and population standard deviation of the finite entries.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-2 && v.abs() < 1e4 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Line plot of both coefficient variants against position with a shaded
/// mean ± one standard deviation band each, as SVG.
pub fn profile_svg(profile: &CoefficientProfile, title: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const L: f64 = 80.0;
    const R: f64 = 20.0;
    const T: f64 = 36.0;
    const B: f64 = 48.0;
    let pos: Vec<f64> = profile.positions.iter().map(|&p| p as f64).collect();
    let green: Vec<f64> = profile.k_green.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let series = [
        ("k small", &profile.k_small[..], "#1f77b4"),
        ("k green", &green[..], "#d62728"),
    ];
    let stats: Vec<Option<(f64, f64)>> = series.iter().map(|s| mean_std(s.1)).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((_, vals, _), st) in series.iter().zip(&stats) {
        for v in vals.iter().filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if let Some((m, s)) = st {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    if hi - lo < 1e-15 {
        let pad = lo.abs().max(1e-6) * 0.1;
        lo -= pad;
        hi += pad;
    }
    let (x0, x1) = match (pos.first(), pos.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| T + (hi - y) / (hi - lo) * (H - T - B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    for ((name, _, color), st) in series.iter().zip(&stats) {
        if let Some((m, s)) = st {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.15"><title>{name} mean ± std</title></rect>"#,
                sx(x0),
                sy(m + s),
                sx(x1) - sx(x0),
                (sy(m - s) - sy(m + s)).max(0.5)
            );
            let _ = writeln!(
                svg,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                sx(x0),
                sy(*m),
                sx(x1),
                sy(*m)
            );
        }
    }
    for (name, vals, color) in &series {
        let mut d = String::new();
        let mut pen_up = true;
        for (x, y) in pos.iter().zip(vals.iter()) {
            if !y.is_finite() {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_up { "M" } else { "L" }, sx(*x), sy(*y));
            pen_up = false;
        }
        if !d.is_empty() {
            let _ = writeln!(
                svg,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{name}</title></path>"#,
                d.trim_end()
            );
        }
    }
    for c in &profile.crack_positions_along_axis() {
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{T}" x2="{:.2}" y2="{}" stroke="black" stroke-opacity="0.25"/>"#,
            sx(*c as f64),
            sx(*c as f64),
            H - B
        );
    }
    let _ = writeln!(
        svg,
        r#"<path d="M{L},{T} L{L},{yb} L{xr},{yb}" fill="none" stroke="black"/>"#,
        yb = H - B,
        xr = W - R
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{L}" y2="{y:.2}" stroke="black"/>"#, L - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, L - 6.0, y + 4.0, fmt_num(v));
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/>"#, sx(x), H - B, H - B + 4.0);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, sx(x), H - B + 18.0, fmt_num(x));
    }
    let axis = profile.axis.name();
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">position along {axis} [px]</text>"#,
        (L + W - R) / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">k [1/%RH]</text>"#,
        (T + H - B) / 2.0
    );
    for (i, ((name, _, color), st)) in series.iter().zip(&stats).enumerate() {
        let y = T + 14.0 + 16.0 * i as f64;
        let label = match st {
            Some((m, s)) => format!("{name}: mean {} std {}", fmt_num(*m), fmt_num(*s)),
            None => format!("{name}: no data"),
        };
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, W - R - 260.0, W - R - 240.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, W - R - 234.0, y + 4.0, escape(&label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl CoefficientProfile {
    /// Distinct profile positions that contain crack pixels.
    pub fn crack_positions_along_axis(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .crack_positions
            .iter()
            .map(|&(x, y)| match self.axis {
                crate::strain::Axis::Y => x,
                crate::strain::Axis::X => y,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}
