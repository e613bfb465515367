//! Pipeline configuration (TOML).
//!
//! ```toml
//! out_dir = "out"
//! workers = 2
//! pairs = "initial"            # initial | chain | all | "S0-S1,S0-S2"
//!
//! [humidity]                   # per-state relative humidity in percent
//! dry = 35.0
//! wet = 85.0
//!
//! [[scans]]
//! path = "scans/face_a_dry.tif"
//! face = "A"
//! state = "dry"
//! dpi = 1200.0                 # optional, overrides file metadata
//!
//! [preprocess]
//! working_dpi = 150.0
//!
//! [solver]
//! lambda = 10.0
//! levels = "auto"
//!
//! [strain]
//! crack_factor = 10.0
//!
//! [report]
//! projection_r_mm = 50.0
//! projection_dy_mm = 2.0
//! ```
//!
//! Relative scan paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::SolverParams;
use crate::preprocess::PreprocessParams;
use crate::strain::StrainParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub path: PathBuf,
    pub face: String,
    pub state: String,
    /// Overrides the `[humidity]` table for this scan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub humidity: Option<f64>,
    /// Overrides the resolution stored in the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportParams {
    /// Adds millimetre columns and values where the resolution is known.
    pub mm_units: bool,
    pub projection_r_mm: f64,
    pub projection_dy_mm: f64,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self {
            mm_units: true,
            projection_r_mm: 50.0,
            projection_dy_mm: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowOptions {
    /// Second pass after removing the average rigid motion.
    pub rerun_registration: bool,
}

impl Default for FlowOptions {
    #[allow(clippy::derivable_impls)]
    fn default() -> Self {
        Self {
            rerun_registration: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Catalog case names; empty means the whole catalog.
    pub cases: Vec<String>,
    /// Nominal resolution assigned to synthetic images.
    pub dpi: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            cases: Vec::new(),
            dpi: 150.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Overrides texture and noise seeds of synthetic cases.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub pairs: String,
    pub humidity: BTreeMap<String, f64>,
    pub scans: Vec<ScanEntry>,
    pub preprocess: PreprocessParams,
    pub solver: SolverParams,
    pub flow: FlowOptions,
    pub strain: StrainParams,
    pub report: ReportParams,
    pub synth: SynthOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            workers: 1,
            seed: None,
            pairs: "initial".into(),
            humidity: BTreeMap::new(),
            scans: Vec::new(),
            preprocess: PreprocessParams::default(),
            solver: SolverParams::default(),
            flow: FlowOptions::default(),
            strain: StrainParams::default(),
            report: ReportParams::default(),
            synth: SynthOptions::default(),
        }
    }
}

/// One state pair of one face, `from` being the reference state.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairId {
    pub face: String,
    pub from: String,
    pub to: String,
}

impl PairId {
    pub fn key(&self) -> String {
        format!("{}/{}-{}", self.face, self.from, self.to)
    }
}

impl std::fmt::Display for PairId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key())
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// Reads and validates a config file, resolving relative scan paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for scan in &mut cfg.scans {
            if scan.path.is_relative() {
                scan.path = base.join(&scan.path);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Checks everything that can be checked before touching any input file.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        self.solver
            .validate()
            .map_err(|e| config_err(format!("[solver] {e}")))?;
        let p = &self.preprocess;
        if !(p.working_dpi > 0.0) {
            return Err(config_err("[preprocess] working_dpi must be positive"));
        }
        if p.median_radius == 0 {
            return Err(config_err("[preprocess] median_radius must be at least 1"));
        }
        let s = &self.strain;
        if !(s.crack_factor > 0.0) {
            return Err(config_err("[strain] crack_factor must be positive"));
        }
        if s.min_averaged == 0 || s.min_span == 0 {
            return Err(config_err("[strain] min_averaged and min_span must be at least 1"));
        }
        let r = &self.report;
        if !(r.projection_r_mm > 0.0) || r.projection_dy_mm.abs() > r.projection_r_mm {
            return Err(config_err("[report] projection needs r > 0 and |dy| <= r"));
        }
        if !(self.synth.dpi > 0.0) {
            return Err(config_err("[synth] dpi must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for scan in &self.scans {
            if scan.face.is_empty() || scan.state.is_empty() {
                return Err(config_err(format!("{}: face and state must be set", scan.path.display())));
            }
            if scan.face.contains(['/', '\\']) || scan.state.contains(['/', '\\', '-', ',']) {
                return Err(config_err(format!(
                    "{}: face must not contain path separators and state must not contain '/', '-' or ','",
                    scan.path.display()
                )));
            }
            if !seen.insert((scan.face.clone(), scan.state.clone())) {
                return Err(config_err(format!("duplicate scan for face {} state {}", scan.face, scan.state)));
            }
            let rh = self.humidity_of(scan)?;
            if !(0.0..=100.0).contains(&rh) {
                return Err(config_err(format!("{}: humidity {rh} outside [0, 100]", scan.path.display())));
            }
            if let Some(d) = scan.dpi {
                if !(d > 0.0) {
                    return Err(config_err(format!("{}: dpi must be positive", scan.path.display())));
                }
            }
        }
        for pair in self.select_pairs(&self.pairs)? {
            let d = self.delta_rh(&pair)?;
            if d == 0.0 {
                return Err(config_err(format!("pair {pair}: humidity change is zero")));
            }
        }
        Ok(())
    }

    pub fn humidity_of(&self, scan: &ScanEntry) -> Result<f64> {
        scan.humidity
            .or_else(|| self.humidity.get(&scan.state).copied())
            .ok_or_else(|| {
                config_err(format!(
                    "{}: no humidity for state {:?} (set [humidity].{} or the scan's humidity)",
                    scan.path.display(),
                    scan.state,
                    scan.state
                ))
            })
    }

    /// Faces in order of first appearance.
    pub fn faces(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.scans {
            if !out.contains(&s.face) {
                out.push(s.face.clone());
            }
        }
        out
    }

    /// Scans of one face in config order; the first is the reference state.
    pub fn face_scans(&self, face: &str) -> Vec<&ScanEntry> {
        self.scans.iter().filter(|s| s.face == face).collect()
    }

    pub fn scan(&self, face: &str, state: &str) -> Result<&ScanEntry> {
        self.scans
            .iter()
            .find(|s| s.face == face && s.state == state)
            .ok_or_else(|| config_err(format!("no scan for face {face} state {state}")))
    }

    /// `RH_to − RH_from`.
    pub fn delta_rh(&self, pair: &PairId) -> Result<f64> {
        let a = self.humidity_of(self.scan(&pair.face, &pair.from)?)?;
        let b = self.humidity_of(self.scan(&pair.face, &pair.to)?)?;
        Ok(b - a)
    }

    /// Resolves a pair selector.
    ///
    /// `initial` pairs every state with the first state of its face, `chain`
    /// pairs consecutive states, `all` every ordered combination `i < j`.
    /// Anything else is a comma-separated list of `FROM-TO` or `FACE/FROM-TO`.
    pub fn select_pairs(&self, selector: &str) -> Result<Vec<PairId>> {
        let mut out = Vec::new();
        let faces = self.faces();
        let pair = |face: &str, a: &ScanEntry, b: &ScanEntry| PairId {
            face: face.to_string(),
            from: a.state.clone(),
            to: b.state.clone(),
        };
        match selector.trim() {
            "initial" | "" => {
                for f in &faces {
                    let s = self.face_scans(f);
                    out.extend(s.iter().skip(1).map(|b| pair(f, s[0], b)));
                }
            }
            "chain" => {
                for f in &faces {
                    let s = self.face_scans(f);
                    out.extend(s.windows(2).map(|w| pair(f, w[0], w[1])));
                }
            }
            "all" => {
                for f in &faces {
                    let s = self.face_scans(f);
                    for i in 0..s.len() {
                        for j in i + 1..s.len() {
                            out.push(pair(f, s[i], s[j]));
                        }
                    }
                }
            }
            list => {
                for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (face_sel, states) = match item.split_once('/') {
                        Some((f, rest)) => (Some(f), rest),
                        None => (None, item),
                    };
                    let (from, to) = states
                        .split_once('-')
                        .ok_or_else(|| config_err(format!("pair selector {item:?}: expected FROM-TO")))?;
                    let mut matched = false;
                    for f in faces.iter().filter(|f| face_sel.is_none_or(|s| s == f.as_str())) {
                        let (Ok(a), Ok(b)) = (self.scan(f, from), self.scan(f, to)) else {
                            continue;
                        };
                        out.push(pair(f, a, b));
                        matched = true;
                    }
                    if !matched {
                        return Err(config_err(format!("pair selector {item:?} matches no configured scans")));
                    }
                }
            }
        }
        out.sort_by_key(|p| {
            (
                faces.iter().position(|f| *f == p.face),
                self.scans.iter().position(|s| s.face == p.face && s.state == p.from),
                self.scans.iter().position(|s| s.face == p.face && s.state == p.to),
            )
        });
        out.dedup();
        Ok(out)
    }
}
