//! Batch pipeline: preprocess, flow, strain, report and the synthetic runner.
//!
//! Everything is written below `out_dir`:
//!
//! ```text
//! manifest.json                       per-stage records, see [`Manifest`]
//! effective_config.toml               configuration of the last command
//! preprocess/{face}_{state}_aligned.png, {face}_{state}_mask.png
//! preprocess/{face}_{from}-{to}_datamask.png
//! pairs/{face}_{from}-{to}/           flow, strain and plot artefacts
//! synth/{case}/                       synthetic inputs, ground truth, same artefacts
//! report_{face}.md, report_synth.md
//! ```
//!
//! Jobs (faces, pairs or synthetic cases) run on up to `workers` threads. Each
//! job returns its records and only the calling thread touches the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{PairId, PipelineConfig};
use crate::error::{Error, Result};
use crate::flow::{coarse_to_fine, rerun_with_registration, FlowResult};
use crate::grid::{BinaryMask, FlowField, ScalarGrid};
use crate::io;
use crate::preprocess::{align_segmented, erode_diamond, segment_scan, AlignedPair, SpecimenScan};
use crate::strain::{analyze, projection_error, Axis, CoefficientProfile, Profile};
use crate::synth::{catalog_case, endpoint_error, evaluation_margin, masked_correlation, SynthCase, CATALOG};
use crate::viz;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

const MM_PER_INCH: f64 = 25.4;

/// 16-bit PNG raster with its code mapping `value = offset + scale * code`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PngRaster {
    pub file: String,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub source: String,
    pub humidity: f64,
    pub scan_dpi: f64,
    pub dpi: f64,
    pub otsu_threshold: f64,
    pub orientation_deg: f64,
    pub centroid: (f64, f64),
    pub shift: (i64, i64),
    pub crop_origin: (i64, i64),
    pub width: usize,
    pub height: usize,
    pub mask_pixels: usize,
    pub aligned: PngRaster,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPreprocessRecord {
    pub delta_rh: f64,
    pub data_mask: String,
    pub data_mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub center: (f64, f64),
    pub theta_deg: f64,
    pub translation: (f64, f64),
    pub residual_delta_theta_deg: f64,
    pub residual_v_avg: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub beta: f64,
    pub energy: f64,
    pub delta_theta_avg_deg: f64,
    pub v_avg: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration: Option<RegistrationRecord>,
    pub flow: String,
    pub flow_color: String,
    /// Displacement mapped to full saturation in `flow_color`.
    pub flow_color_max_magnitude: f64,
    pub illumination: PngRaster,
    pub illumination_tiff: String,
    pub warped: PngRaster,
    pub warped_compensated: PngRaster,
}

/// Mean and variance of the coefficient profiles along one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: Axis,
    pub positions: usize,
    pub near_crack_positions: usize,
    pub mean_small: Option<f64>,
    pub var_small: Option<f64>,
    pub mean_green: Option<f64>,
    pub var_green: Option<f64>,
    pub mean_green_with_cracks: Option<f64>,
    pub var_green_with_cracks: Option<f64>,
    pub mean_endpoint: Option<f64>,
    pub var_endpoint: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainRecord {
    pub delta_rh: f64,
    pub dpi: Option<f64>,
    pub axes: Vec<AxisSummary>,
    pub crack_pixels: usize,
    pub clamped_pixels: usize,
    pub projection_error_mm: f64,
    pub projection_error_px: Option<f64>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub case: SynthCase,
    pub truth_flow: String,
    pub evaluation_margin: f64,
    pub endpoint_error_mean: f64,
    pub endpoint_error_p95: f64,
    /// Correlation of `β·u` with the true illumination change.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illumination_correlation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PairPreprocessRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strain: Option<StrainRecord>,
}

/// Accumulated stage records, keyed by `face/state`, `face/from-to` and case
/// name. File names are relative to the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    pub states: BTreeMap<String, StateRecord>,
    pub pairs: BTreeMap<String, PairRecord>,
    pub synth: BTreeMap<String, PairRecord>,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    /// Reads the manifest, or returns an empty one if there is none yet.
    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::decode(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::decode(&path, e))?;
        text.push('\n');
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty() && self.pairs.is_empty() && self.synth.is_empty()
    }
}

fn state_key(face: &str, state: &str) -> String {
    format!("{face}/{state}")
}

fn pair_dir(out: &Path, pair: &PairId) -> PathBuf {
    out.join("pairs").join(format!("{}_{}-{}", pair.face, pair.from, pair.to))
}

fn rel(out: &Path, path: &Path) -> String {
    let p = path.strip_prefix(out).unwrap_or(path);
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs `f` over `jobs` on up to `workers` threads; results keep job order.
/// Solver internals still use the global rayon pool.
fn run_jobs<T: Sync, R: Send>(workers: usize, jobs: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Vec<Result<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every job slot is filled")
        })
        .collect()
}

/// Pairs each successful result with its job and collects labelled failures.
fn partition<'a, T, R>(jobs: &'a [T], results: Vec<Result<R>>, label: impl Fn(&T) -> String) -> (Vec<(&'a T, R)>, Vec<String>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(v) => ok.push((job, v)),
            Err(e) => {
                log::error!("{}: {e}", label(job));
                failed.push(format!("{}: {e}", label(job)));
            }
        }
    }
    (ok, failed)
}

fn finish(total: usize, failures: Vec<String>) -> Result<()> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::JobsFailed { total, failures })
    }
}

/// Creates the output directory and records the effective configuration.
fn prepare_out(cfg: &PipelineConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(EFFECTIVE_CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
}

fn write_png_scaled(out: &Path, path: &Path, g: &ScalarGrid, lo: f64, hi: f64) -> Result<PngRaster> {
    let hi = if hi > lo { hi } else { lo + 1.0 };
    io::write_gray16_png(path, g, lo, hi)?;
    Ok(PngRaster {
        file: rel(out, path),
        offset: lo,
        scale: (hi - lo) / 65535.0,
    })
}

/// Range covering `[0, 1]` and the data, so intensity images share a scale
/// unless they leave the unit interval.
fn intensity_range(g: &ScalarGrid) -> (f64, f64) {
    let (lo, hi) = g.min_max();
    (lo.min(0.0), hi.max(1.0))
}

fn read_png_raster(out: &Path, r: &PngRaster) -> Result<ScalarGrid> {
    io::read_gray_png(&out.join(&r.file), r.offset, r.scale)
}

// ---------------------------------------------------------------- preprocess

struct FaceOutput {
    states: Vec<(String, StateRecord)>,
    pairs: Vec<(String, PairPreprocessRecord)>,
}

fn preprocess_one_face(cfg: &PipelineConfig, face: &str, pairs: &[PairId]) -> Result<FaceOutput> {
    let out = &cfg.out_dir;
    let entries = cfg.face_scans(face);
    if entries.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "face {face} has {} scan(s); at least two states are needed",
            entries.len()
        )));
    }
    let mut segs = Vec::with_capacity(entries.len());
    let mut scan_dpis = Vec::with_capacity(entries.len());
    for e in &entries {
        let image = io::read_rgb(&e.path, e.dpi)?;
        scan_dpis.push(image.dpi);
        let scan = SpecimenScan {
            image,
            humidity: cfg.humidity_of(e)?,
            face_id: face.to_string(),
            state_id: e.state.clone(),
        };
        let seg = segment_scan(&scan, &cfg.preprocess).map_err(|err| err.context(e.path.display().to_string()))?;
        log::info!("{}: Otsu threshold {:.4}", e.path.display(), seg.threshold);
        segs.push(seg);
    }
    let aligned = align_segmented(&segs, &cfg.preprocess).map_err(|e| e.context(format!("face {face}")))?;

    let dir = out.join("preprocess");
    create_dir(&dir)?;
    let dpi = cfg.preprocess.working_dpi;
    let mut states = Vec::new();
    for (((e, a), seg), scan_dpi) in entries.iter().zip(&aligned).zip(&segs).zip(&scan_dpis) {
        let gray = a.gray.clone().with_dpi(Some(dpi));
        let png = write_png_scaled(out, &dir.join(format!("{face}_{}_aligned.png", e.state)), &gray, 0.0, 1.0)?;
        let mask_path = dir.join(format!("{face}_{}_mask.png", e.state));
        io::write_mask_png(&mask_path, &a.mask)?;
        states.push((
            state_key(face, &e.state),
            StateRecord {
                source: e.path.display().to_string(),
                humidity: cfg.humidity_of(e)?,
                scan_dpi: *scan_dpi,
                dpi,
                otsu_threshold: seg.threshold,
                orientation_deg: seg.orientation.theta.to_degrees(),
                centroid: (seg.orientation.cx, seg.orientation.cy),
                shift: a.shift,
                crop_origin: a.crop_origin,
                width: a.gray.width(),
                height: a.gray.height(),
                mask_pixels: a.mask.count(),
                aligned: png,
                mask: rel(out, &mask_path),
            },
        ));
    }

    let index = |state: &str| entries.iter().position(|e| e.state == state);
    let mut pair_records = Vec::new();
    for p in pairs.iter().filter(|p| p.face == face) {
        let (Some(i), Some(j)) = (index(&p.from), index(&p.to)) else {
            return Err(Error::Config(format!("pair {p} refers to an unknown state")));
        };
        let data = erode_diamond(&aligned[i].mask.and(&aligned[j].mask)?, cfg.preprocess.erosion_radius);
        if data.count() == 0 {
            return Err(Error::SegmentationFailed(format!("pair {p}: data mask is empty after erosion")));
        }
        let path = dir.join(format!("{face}_{}-{}_datamask.png", p.from, p.to));
        io::write_mask_png(&path, &data)?;
        pair_records.push((
            p.key(),
            PairPreprocessRecord {
                delta_rh: cfg.delta_rh(p)?,
                data_mask: rel(out, &path),
                data_mask_pixels: data.count(),
            },
        ));
    }
    Ok(FaceOutput {
        states,
        pairs: pair_records,
    })
}

/// Segments, de-rotates, aligns and crops every configured face.
pub fn cmd_preprocess(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    if cfg.scans.is_empty() {
        return Err(Error::Config("no scans configured".into()));
    }
    let pairs = cfg.select_pairs(&cfg.pairs)?;
    prepare_out(cfg)?;
    let faces = cfg.faces();
    let results = run_jobs(cfg.workers, &faces, |f| preprocess_one_face(cfg, f, &pairs));
    let (done, failures) = partition(&faces, results, |f| format!("face {f}"));
    let mut manifest = Manifest::load(&cfg.out_dir)?;
    for (_, o) in done {
        manifest.states.extend(o.states);
        for (key, rec) in o.pairs {
            // Downstream records describe the previous inputs.
            manifest.pairs.insert(
                key,
                PairRecord {
                    preprocess: Some(rec),
                    ..Default::default()
                },
            );
        }
    }
    manifest.save(&cfg.out_dir)?;
    finish(faces.len(), failures)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------- flow

fn state_record<'a>(manifest: &'a Manifest, face: &str, state: &str) -> Result<&'a StateRecord> {
    manifest
        .states
        .get(&state_key(face, state))
        .ok_or_else(|| Error::InvalidParameter(format!("no preprocess record for {face}/{state}; run `preprocess` first")))
}

fn pair_record<'a>(manifest: &'a Manifest, pair: &PairId) -> Result<&'a PairRecord> {
    manifest
        .pairs
        .get(&pair.key())
        .ok_or_else(|| Error::InvalidParameter(format!("no preprocess record for pair {pair}; run `preprocess` first")))
}

/// Loads the aligned images and masks of a pair from preprocess artefacts.
pub fn load_aligned_pair(cfg: &PipelineConfig, manifest: &Manifest, pair: &PairId) -> Result<AlignedPair> {
    let out = &cfg.out_dir;
    let s1 = state_record(manifest, &pair.face, &pair.from)?;
    let s2 = state_record(manifest, &pair.face, &pair.to)?;
    let pre = pair_record(manifest, pair)?
        .preprocess
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("pair {pair} has no data mask; run `preprocess` first")))?;
    AlignedPair::with_data_mask(
        read_png_raster(out, &s1.aligned)?,
        read_png_raster(out, &s2.aligned)?,
        io::read_mask_png(&out.join(&s1.mask))?,
        io::read_mask_png(&out.join(&s2.mask))?,
        io::read_mask_png(&out.join(&pre.data_mask))?,
        cfg.delta_rh(pair)?,
        s1.dpi,
    )
}

/// Estimates flow and illumination for one pair and writes its artefacts.
pub fn flow_stage(pair: &AlignedPair, cfg: &PipelineConfig, dir: &Path) -> Result<(FlowResult, FlowRecord)> {
    let out = &cfg.out_dir;
    let params = &cfg.solver;
    let mut result = coarse_to_fine(&pair.i1, &pair.i2, &pair.data_mask, params)?;
    if cfg.flow.rerun_registration {
        result = rerun_with_registration(pair, &result, params)?;
    }
    create_dir(dir)?;
    let dpi = Some(pair.dpi);

    let flow_path = dir.join("flow.flo");
    io::write_flo(&flow_path, &result.flow)?;

    let u = result.illumination.clone().with_dpi(dpi);
    let tiff_path = dir.join("illumination.tif");
    io::write_f32_tiff(&tiff_path, &u)?;
    let (lo, hi) = u.min_max();
    let illumination = write_png_scaled(out, &dir.join("illumination.png"), &u, lo, hi)?;

    let w = result.warped.clone().with_dpi(dpi);
    let (lo, hi) = intensity_range(&w);
    let warped = write_png_scaled(out, &dir.join("warped.png"), &w, lo, hi)?;
    let wc = result.warped_compensated.clone().with_dpi(dpi);
    let (lo, hi) = intensity_range(&wc);
    let warped_compensated = write_png_scaled(out, &dir.join("warped_compensated.png"), &wc, lo, hi)?;

    let (rgb, norm) = viz::flow_to_rgb(&result.flow, None);
    let color_path = dir.join("flow_color.png");
    io::write_rgb_png(&color_path, result.flow.width(), result.flow.height(), &rgb)?;

    let registration = result.registration.map(|r| RegistrationRecord {
        center: r.center,
        theta_deg: r.theta.to_degrees(),
        translation: r.translation,
        residual_delta_theta_deg: r.residual.delta_theta_avg.to_degrees(),
        residual_v_avg: r.residual.v_avg,
    });
    let record = FlowRecord {
        beta: params.beta,
        energy: result.energy,
        delta_theta_avg_deg: result.delta_theta_avg.to_degrees(),
        v_avg: result.v_avg,
        registration,
        flow: rel(out, &flow_path),
        flow_color: rel(out, &color_path),
        flow_color_max_magnitude: norm,
        illumination,
        illumination_tiff: rel(out, &tiff_path),
        warped,
        warped_compensated,
    };
    Ok((result, record))
}

/// Runs flow estimation on every selected pair.
pub fn cmd_flow(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let pairs = cfg.select_pairs(&cfg.pairs)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("pair selector {:?} selects no pairs", cfg.pairs)));
    }
    prepare_out(cfg)?;
    let mut manifest = Manifest::load(&cfg.out_dir)?;
    let results = run_jobs(cfg.workers, &pairs, |p| {
        let ap = load_aligned_pair(cfg, &manifest, p)?;
        log::info!("{p}: flow on {}x{}", ap.i1.width(), ap.i1.height());
        flow_stage(&ap, cfg, &pair_dir(&cfg.out_dir, p)).map(|(_, rec)| rec)
    });
    let (done, failures) = partition(&pairs, results, |p| p.key());
    for (p, rec) in done {
        let entry = manifest.pairs.entry(p.key()).or_default();
        entry.flow = Some(rec);
        entry.strain = None;
    }
    manifest.save(&cfg.out_dir)?;
    finish(pairs.len(), failures)?;
    Ok(manifest)
}

// -------------------------------------------------------------------- strain

fn fmt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::decode(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::decode(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn profile_rows(p: &CoefficientProfile, mm_per_px: Option<f64>) -> Vec<Vec<String>> {
    let mut header = vec!["position_px".to_string()];
    if mm_per_px.is_some() {
        header.push("position_mm".into());
    }
    header.extend(["k_small", "k_green", "n_averaged", "is_near_crack"].map(String::from));
    let mut rows = vec![header];
    for i in 0..p.positions.len() {
        let mut row = vec![p.positions[i].to_string()];
        if let Some(s) = mm_per_px {
            row.push((p.positions[i] as f64 * s).to_string());
        }
        row.push(format!("{:e}", p.k_small[i]));
        row.push(fmt_num(p.k_green[i]));
        row.push(p.n_averaged[i].to_string());
        row.push(u8::from(p.near_crack[i]).to_string());
        rows.push(row);
    }
    rows
}

fn axis_summary(p: &CoefficientProfile, endpoint: Option<&Profile>) -> AxisSummary {
    AxisSummary {
        axis: p.axis,
        positions: p.positions.len(),
        near_crack_positions: p.near_crack.iter().filter(|&&c| c).count(),
        mean_small: finite(p.mean_small),
        var_small: finite(p.var_small),
        mean_green: finite(p.mean_green),
        var_green: finite(p.var_green),
        mean_green_with_cracks: finite(p.mean_green_with_cracks),
        var_green_with_cracks: finite(p.var_green_with_cracks),
        mean_endpoint: endpoint.and_then(|e| finite(e.mean)),
        var_endpoint: endpoint.and_then(|e| finite(e.variance)),
    }
}

fn summary_rows(r: &StrainRecord) -> Vec<Vec<String>> {
    let mut rows = vec![[
        "axis",
        "variant",
        "mean_k",
        "variance_k",
        "positions",
        "crack_pixels",
        "projection_error_mm",
        "projection_error_px",
    ]
    .map(String::from)
    .to_vec()];
    for a in &r.axes {
        let variants = [
            ("small", a.mean_small, a.var_small),
            ("green", a.mean_green, a.var_green),
            ("green_with_cracks", a.mean_green_with_cracks, a.var_green_with_cracks),
            ("endpoint", a.mean_endpoint, a.var_endpoint),
        ];
        for (name, mean, var) in variants {
            rows.push(vec![
                a.axis.name().to_string(),
                name.to_string(),
                fmt_num(mean),
                fmt_num(var),
                a.positions.to_string(),
                r.crack_pixels.to_string(),
                format!("{:e}", r.projection_error_mm),
                fmt_num(r.projection_error_px),
            ]);
        }
    }
    rows
}

/// Strain analysis of one flow field with CSV, raster and plot output.
pub fn strain_stage(
    flow: &FlowField,
    mask: &BinaryMask,
    delta_rh: f64,
    dpi: Option<f64>,
    cfg: &PipelineConfig,
    dir: &Path,
    title: &str,
) -> Result<StrainRecord> {
    let out = &cfg.out_dir;
    let a = analyze(flow, mask, delta_rh, &cfg.strain)?;
    create_dir(dir)?;
    let mut files = Vec::new();
    let mm_per_px = dpi.filter(|_| cfg.report.mm_units).map(|d| MM_PER_INCH / d);

    for p in [&a.profile_x, &a.profile_y] {
        let name = format!("profile_{}", p.axis.name());
        let csv_path = dir.join(format!("{name}.csv"));
        write_csv(&csv_path, &profile_rows(p, mm_per_px))?;
        files.push(rel(out, &csv_path));
        let svg_path = dir.join(format!("{name}.svg"));
        let svg = viz::profile_svg(p, &format!("{title}: k along {}", p.axis.name()));
        std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
        files.push(rel(out, &svg_path));
    }

    let cracks_path = dir.join("cracks.png");
    io::write_mask_png(&cracks_path, &a.cracks)?;
    files.push(rel(out, &cracks_path));

    let s = &a.strain;
    let fields: [(&str, &ScalarGrid); 11] = [
        ("eps11", &s.eps11),
        ("eps22", &s.eps22),
        ("gamma12", &s.gamma12),
        ("green_e11", &s.green.e11),
        ("green_e22", &s.green.e22),
        ("green_eps1", &s.green.eps1),
        ("green_eps2", &s.green.eps2),
        ("k_small_x", &a.k.small.kx),
        ("k_small_y", &a.k.small.ky),
        ("k_green_x", &a.k.green.kx),
        ("k_green_y", &a.k.green.ky),
    ];
    for (name, g) in fields {
        let path = dir.join(format!("{name}.tif"));
        io::write_f32_tiff(&path, &g.clone().with_dpi(dpi))?;
        files.push(rel(out, &path));
    }
    for (name, g) in &fields[..3] {
        let (rgb, _) = viz::heatmap_rgb(g, Some(mask), None);
        let path = dir.join(format!("heat_{name}.png"));
        io::write_rgb_png(&path, g.width(), g.height(), &rgb)?;
        files.push(rel(out, &path));
    }

    let pe = projection_error(cfg.report.projection_r_mm, cfg.report.projection_dy_mm)?;
    let mut record = StrainRecord {
        delta_rh,
        dpi,
        axes: vec![
            axis_summary(&a.profile_x, a.endpoint_x.as_ref()),
            axis_summary(&a.profile_y, a.endpoint_y.as_ref()),
        ],
        crack_pixels: a.cracks.count(),
        clamped_pixels: s.green.clamped.count(),
        projection_error_mm: pe,
        projection_error_px: dpi.map(|d| pe * d / MM_PER_INCH),
        files,
    };
    let summary_path = dir.join("summary.csv");
    write_csv(&summary_path, &summary_rows(&record))?;
    record.files.push(rel(out, &summary_path));
    record.files.sort();
    Ok(record)
}

fn strain_pair(cfg: &PipelineConfig, manifest: &Manifest, pair: &PairId) -> Result<StrainRecord> {
    let rec = pair_record(manifest, pair)?;
    let flow = rec
        .flow
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("no flow record for pair {pair}; run `flow` first")))?;
    let pre = rec
        .preprocess
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("pair {pair} has no data mask; run `preprocess` first")))?;
    let out = &cfg.out_dir;
    let field = io::read_flo(&out.join(&flow.flow))?;
    let mask = io::read_mask_png(&out.join(&pre.data_mask))?;
    let dpi = state_record(manifest, &pair.face, &pair.from)?.dpi;
    strain_stage(&field, &mask, cfg.delta_rh(pair)?, Some(dpi), cfg, &pair_dir(out, pair), &pair.key())
}

/// Derives strain fields, coefficient profiles and cracks for every selected pair.
pub fn cmd_strain(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let pairs = cfg.select_pairs(&cfg.pairs)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("pair selector {:?} selects no pairs", cfg.pairs)));
    }
    prepare_out(cfg)?;
    let mut manifest = Manifest::load(&cfg.out_dir)?;
    let results = run_jobs(cfg.workers, &pairs, |p| strain_pair(cfg, &manifest, p));
    let (done, failures) = partition(&pairs, results, |p| p.key());
    for (p, rec) in done {
        manifest.pairs.entry(p.key()).or_default().strain = Some(rec);
    }
    manifest.save(&cfg.out_dir)?;
    finish(pairs.len(), failures)?;
    Ok(manifest)
}

// -------------------------------------------------------------------- report

fn sci(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "n/a".into())
}

fn parameter_section(cfg: &PipelineConfig, doc: &mut String) {
    let s = &cfg.solver;
    let p = &cfg.preprocess;
    let st = &cfg.strain;
    let _ = writeln!(doc, "## Parameters\n");
    let _ = writeln!(doc, "| parameter | value |\n|---|---|");
    let rows: Vec<(&str, String)> = vec![
        ("lambda", s.lambda.to_string()),
        ("beta", s.beta.to_string()),
        ("eps_flow", s.eps_flow.to_string()),
        ("eps_ilu", s.eps_ilu.to_string()),
        ("warps", s.warps.to_string()),
        ("pd_iters", s.pd_iters.to_string()),
        ("pyramid_scale", s.pyramid_scale.to_string()),
        ("levels", s.levels.to_string()),
        ("median_flow_filter", s.median_flow_filter.to_string()),
        ("illumination_on_coarse_levels", s.illumination_on_coarse_levels.to_string()),
        ("rerun_registration", cfg.flow.rerun_registration.to_string()),
        ("working_dpi", p.working_dpi.to_string()),
        ("erosion_radius", p.erosion_radius.to_string()),
        ("crack_factor", st.crack_factor.to_string()),
        ("min_span", st.min_span.to_string()),
        ("min_averaged", st.min_averaged.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(doc, "| {k} | {v} |");
    }
    doc.push('\n');
}

fn flow_lines(f: &FlowRecord, doc: &mut String) {
    let _ = writeln!(
        doc,
        "- rotation estimate: {:.4} deg, mean displacement ({:.4}, {:.4}) px",
        f.delta_theta_avg_deg, f.v_avg.0, f.v_avg.1
    );
    if let Some(r) = &f.registration {
        let _ = writeln!(
            doc,
            "- registration: {:.4} deg, ({:.4}, {:.4}) px; residual rotation {:.4} deg",
            r.theta_deg, r.translation.0, r.translation.1, r.residual_delta_theta_deg
        );
    }
    let _ = writeln!(doc, "- energy: {:.6e}, beta {}", f.energy, f.beta);
    let _ = writeln!(doc, "- flow colour scale: {:.4} px at full saturation", f.flow_color_max_magnitude);
}

fn strain_lines(s: &StrainRecord, doc: &mut String) {
    let _ = writeln!(doc, "- crack pixels: {}", s.crack_pixels);
    let _ = writeln!(doc, "\n| axis | variant | mean k (1/%RH) | variance |\n|---|---|---|---|");
    for a in &s.axes {
        let variants = [
            ("small", a.mean_small, a.var_small),
            ("green", a.mean_green, a.var_green),
            ("green incl. cracks", a.mean_green_with_cracks, a.var_green_with_cracks),
            ("endpoint", a.mean_endpoint, a.var_endpoint),
        ];
        for (name, m, v) in variants {
            let _ = writeln!(doc, "| {} | {name} | {} | {} |", a.axis.name(), sci(m), sci(v));
        }
    }
    doc.push('\n');
}

fn projection_line(cfg: &PipelineConfig, doc: &mut String) {
    let r = &cfg.report;
    let pe = projection_error(r.projection_r_mm, r.projection_dy_mm).unwrap_or(f64::NAN);
    let _ = writeln!(
        doc,
        "## Projection error\n\nr = {} mm, dy = {} mm: bound {:.4} mm\n",
        r.projection_r_mm, r.projection_dy_mm, pe
    );
}

fn expected_files(out: &Path, rec: Option<&PairRecord>) -> Vec<String> {
    let mut missing = Vec::new();
    let Some(rec) = rec else {
        return vec!["preprocess, flow and strain records".into()];
    };
    match &rec.flow {
        Some(f) => {
            for file in [&f.flow, &f.flow_color, &f.illumination.file, &f.warped.file, &f.warped_compensated.file] {
                if !out.join(file).is_file() {
                    missing.push(file.clone());
                }
            }
        }
        None => missing.push("flow record".into()),
    }
    match &rec.strain {
        Some(s) => missing.extend(s.files.iter().filter(|f| !out.join(f).is_file()).cloned()),
        None => missing.push("strain record".into()),
    }
    missing
}

fn face_report(cfg: &PipelineConfig, manifest: &Manifest, face: &str, pairs: &[&PairId]) -> (String, Vec<String>) {
    let out = &cfg.out_dir;
    let mut doc = format!("# Face {face}\n\n");
    parameter_section(cfg, &mut doc);
    let _ = writeln!(doc, "## States\n\n| state | RH (%) | source | Otsu threshold | orientation (deg) |\n|---|---|---|---|---|");
    for scan in cfg.face_scans(face) {
        match manifest.states.get(&state_key(face, &scan.state)) {
            Some(s) => {
                let _ = writeln!(
                    doc,
                    "| {} | {} | {} | {:.4} | {:.3} |",
                    scan.state, s.humidity, s.source, s.otsu_threshold, s.orientation_deg
                );
            }
            None => {
                let _ = writeln!(doc, "| {} | | {} | | |", scan.state, scan.path.display());
            }
        }
    }
    doc.push('\n');
    let mut missing = Vec::new();
    for p in pairs {
        let _ = writeln!(doc, "## Pair {}-{}\n", p.from, p.to);
        let rec = manifest.pairs.get(&p.key());
        if let Ok(d) = cfg.delta_rh(p) {
            let _ = writeln!(doc, "- humidity change: {d} %RH");
        }
        if let Some(f) = rec.and_then(|r| r.flow.as_ref()) {
            flow_lines(f, &mut doc);
        }
        if let Some(s) = rec.and_then(|r| r.strain.as_ref()) {
            strain_lines(s, &mut doc);
        }
        let gaps = expected_files(out, rec);
        if !gaps.is_empty() {
            let _ = writeln!(doc, "- missing: {}\n", gaps.join(", "));
            missing.push(format!("{}: missing {}", p.key(), gaps.join(", ")));
        }
    }
    projection_line(cfg, &mut doc);
    (doc, missing)
}

fn synth_report(cfg: &PipelineConfig, manifest: &Manifest) -> (String, Vec<String>) {
    let mut doc = "# Synthetic cases\n\n".to_string();
    parameter_section(cfg, &mut doc);
    let mut missing = Vec::new();
    for (name, rec) in &manifest.synth {
        let _ = writeln!(doc, "## {name}\n");
        if let Some(s) = &rec.synth {
            let _ = writeln!(doc, "- size: {}x{}, humidity change {} %RH", s.case.width, s.case.height, s.case.delta_rh());
            let _ = writeln!(
                doc,
                "- endpoint error: mean {:.4} px, p95 {:.4} px (margin {:.1} px)",
                s.endpoint_error_mean, s.endpoint_error_p95, s.evaluation_margin
            );
            if let Some(c) = s.illumination_correlation {
                let _ = writeln!(doc, "- illumination correlation: {c:.4}");
            }
        }
        if let Some(f) = &rec.flow {
            flow_lines(f, &mut doc);
        }
        if let Some(s) = &rec.strain {
            strain_lines(s, &mut doc);
        }
        let gaps = expected_files(&cfg.out_dir, Some(rec));
        if !gaps.is_empty() {
            let _ = writeln!(doc, "- missing: {}\n", gaps.join(", "));
            missing.push(format!("synth/{name}: missing {}", gaps.join(", ")));
        }
    }
    projection_line(cfg, &mut doc);
    (doc, missing)
}

/// Writes one markdown summary per face, plus one for synthetic cases.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let manifest = Manifest::load(out)?;
    if manifest.is_empty() {
        return Err(Error::NothingToReport(out.clone()));
    }
    let pairs = cfg.select_pairs(&cfg.pairs)?;
    let mut written = Vec::new();
    let mut missing = Vec::new();
    let mut write = |name: String, doc: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for face in cfg.faces() {
        let face_pairs: Vec<&PairId> = pairs.iter().filter(|p| p.face == face).collect();
        let (doc, gaps) = face_report(cfg, &manifest, &face, &face_pairs);
        write(format!("report_{face}.md"), doc)?;
        missing.extend(gaps);
    }
    if !manifest.synth.is_empty() {
        let (doc, gaps) = synth_report(cfg, &manifest);
        write("report_synth.md".into(), doc)?;
        missing.extend(gaps);
    }
    if written.is_empty() {
        return Err(Error::NothingToReport(out.clone()));
    }
    finish(pairs.len() + manifest.synth.len(), missing)?;
    Ok(written)
}

// --------------------------------------------------------------------- synth

/// Catalog cases for the given names; all cases when `names` is empty.
pub fn resolve_cases(cfg: &PipelineConfig, names: &[String]) -> Result<Vec<SynthCase>> {
    let names: Vec<String> = if !names.is_empty() {
        names.to_vec()
    } else if !cfg.synth.cases.is_empty() {
        cfg.synth.cases.clone()
    } else {
        CATALOG.iter().map(|s| s.to_string()).collect()
    };
    names
        .iter()
        .map(|n| {
            let mut case = catalog_case(n).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(seed) = cfg.seed {
                case.texture_seed = seed;
                case.noise_seed = seed.wrapping_add(1);
            }
            Ok(case)
        })
        .collect()
}

/// Renders one case, runs flow and strain on it and scores the flow against
/// the ground truth.
pub fn run_synth_case(cfg: &PipelineConfig, case: &SynthCase) -> Result<PairRecord> {
    let out = &cfg.out_dir;
    let dir = out.join("synth").join(&case.name);
    create_dir(&dir)?;
    let dpi = cfg.synth.dpi;
    let rendered = case.render()?;
    let mask = case.mask();
    let i1 = rendered.i1.clone().with_dpi(Some(dpi));
    let i2 = rendered.i2.clone().with_dpi(Some(dpi));
    let (lo, hi) = intensity_range(&i1);
    write_png_scaled(out, &dir.join("i1.png"), &i1, lo, hi)?;
    let (lo, hi) = intensity_range(&i2);
    write_png_scaled(out, &dir.join("i2.png"), &i2, lo, hi)?;
    io::write_mask_png(&dir.join("mask.png"), &mask)?;
    let truth_path = dir.join("truth.flo");
    io::write_flo(&truth_path, &rendered.true_flow)?;
    io::write_f32_tiff(&dir.join("truth_illumination.tif"), &rendered.true_illum.clone().with_dpi(Some(dpi)))?;

    let pair = AlignedPair::with_data_mask(i1, i2, mask.clone(), mask.clone(), mask.clone(), case.delta_rh(), dpi)?;
    let (result, flow) = flow_stage(&pair, cfg, &dir)?;
    let (mean, p95) = endpoint_error(&result.flow, &rendered.true_flow, &mask)?;
    let illumination_correlation = match case.illum {
        Some(_) => {
            let beta = cfg.solver.beta;
            masked_correlation(&result.illumination.map(|u| beta * u), &rendered.true_illum, &mask)?
        }
        None => None,
    };
    let strain = strain_stage(&result.flow, &mask, case.delta_rh(), Some(dpi), cfg, &dir, &case.name)?;
    log::info!("synth {}: endpoint error mean {mean:.4} px", case.name);
    Ok(PairRecord {
        preprocess: None,
        synth: Some(SynthRecord {
            case: case.clone(),
            truth_flow: rel(out, &truth_path),
            evaluation_margin: evaluation_margin(&rendered.true_flow),
            endpoint_error_mean: mean,
            endpoint_error_p95: p95,
            illumination_correlation,
        }),
        flow: Some(flow),
        strain: Some(strain),
    })
}

/// Runs the named catalog cases (all when empty) through flow and strain.
pub fn cmd_synth(cfg: &PipelineConfig, names: &[String]) -> Result<Manifest> {
    cfg.validate()?;
    let cases = resolve_cases(cfg, names)?;
    prepare_out(cfg)?;
    let results = run_jobs(cfg.workers, &cases, |c| run_synth_case(cfg, c));
    let (done, failures) = partition(&cases, results, |c| format!("synth/{}", c.name));
    let mut manifest = Manifest::load(&cfg.out_dir)?;
    for (c, rec) in done {
        manifest.synth.insert(c.name.clone(), rec);
    }
    manifest.save(&cfg.out_dir)?;
    finish(cases.len(), failures)?;
    Ok(manifest)
}

/// preprocess, flow, strain and report in sequence; stops at the first
/// failing stage.
pub fn cmd_all(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cmd_preprocess(cfg)?;
    cmd_flow(cfg)?;
    cmd_strain(cfg)?;
    cmd_report(cfg)
}
