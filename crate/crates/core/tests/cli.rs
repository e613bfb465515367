use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use woodflow::io;
use woodflow::synth::{AnalyticField, Texture, WoodTexture};

const W: usize = 480;
const H: usize = 320;

/// Writes one RGB scan: a textured block on a dark background, optionally
/// deformed by `field` (backward mapped).
fn write_scan(path: &Path, texture: &WoodTexture, field: Option<&AnalyticField>) {
    let mut rgb = Vec::with_capacity(W * H * 3);
    for y in 0..H {
        for x in 0..W {
            let (sx, sy) = match field {
                Some(f) => f.inverse_map(x as f64, y as f64),
                None => (x as f64, y as f64),
            };
            let inside = (60.0..420.0).contains(&sx) && (50.0..270.0).contains(&sy);
            let v = if inside {
                0.45 + 0.5 * texture.eval(sx, sy)
            } else {
                0.06
            };
            rgb.extend([v, 0.8 * v, 0.6 * v].map(|c| (c * 255.0).round() as u8));
        }
    }
    io::write_rgb_png(path, W, H, &rgb).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture(humidity_table: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let texture = WoodTexture::new(W, H, 5);
    let stretch = AnalyticField::UniformStretch {
        sx: 0.01,
        sy: 0.01,
        cx: 240.0,
        cy: 160.0,
    };
    for face in ["A", "B"] {
        write_scan(&root.join(format!("{face}_dry.png")), &texture, None);
        write_scan(&root.join(format!("{face}_wet.png")), &texture, Some(&stretch));
    }
    let mut toml = format!("out_dir = \"out\"\nworkers = 2\n\n{humidity_table}\n");
    for face in ["A", "B"] {
        for state in ["dry", "wet"] {
            toml.push_str(&format!(
                "[[scans]]\npath = \"{face}_{state}.png\"\nface = \"{face}\"\nstate = \"{state}\"\ndpi = 300.0\n\n"
            ));
        }
    }
    toml.push_str("[solver]\nwarps = 4\npd_iters = 40\n");
    let config = root.join("woodflow.toml");
    std::fs::write(&config, toml).unwrap();
    Fixture {
        _dir: dir,
        root,
        config,
    }
}

fn woodflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_woodflow")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const HUMIDITY: &str = "[humidity]\ndry = 30.0\nwet = 80.0\n";

#[test]
fn full_pipeline_writes_every_artifact_and_reruns_identically() {
    let fx = fixture(HUMIDITY);
    let cfg = fx.config.to_str().unwrap();
    let o = woodflow(&["all", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = fx.root.join("out");

    let pre = out.join("preprocess");
    let mut names: Vec<String> = std::fs::read_dir(&pre)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("A_"))
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "A_dry-wet_datamask.png",
            "A_dry_aligned.png",
            "A_dry_mask.png",
            "A_wet_aligned.png",
            "A_wet_mask.png"
        ]
    );
    let pair = out.join("pairs").join("A_dry-wet");
    for f in [
        "flow.flo",
        "illumination.png",
        "warped.png",
        "warped_compensated.png",
        "flow_color.png",
        "profile_x.csv",
        "profile_y.csv",
        "summary.csv",
        "cracks.png",
        "profile_x.svg",
        "heat_eps11.png",
    ] {
        assert!(pair.join(f).is_file(), "missing {f}");
    }

    let report = std::fs::read_to_string(out.join("report_A.md")).unwrap();
    assert_eq!(report.matches("## Pair dry-wet").count(), 1);
    assert!(report.contains("bound 0.0400 mm"), "{report}");
    assert!(!report.contains("missing"));

    // 1 % stretch over 50 %RH.
    let summary = std::fs::read_to_string(pair.join("summary.csv")).unwrap();
    let mean_small_x: f64 = summary
        .lines()
        .find(|l| l.starts_with("x,small,"))
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean_small_x - 2e-4).abs() < 0.15 * 2e-4, "{mean_small_x}");

    let before: Vec<Vec<u8>> = ["A_dry_aligned.png", "A_wet_mask.png", "A_dry-wet_datamask.png"]
        .iter()
        .map(|f| std::fs::read(pre.join(f)).unwrap())
        .chain([std::fs::read(pair.join("flow.flo")).unwrap()])
        .collect();
    let manifest = std::fs::read(out.join("manifest.json")).unwrap();
    let o = woodflow(&["all", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let after: Vec<Vec<u8>> = ["A_dry_aligned.png", "A_wet_mask.png", "A_dry-wet_datamask.png"]
        .iter()
        .map(|f| std::fs::read(pre.join(f)).unwrap())
        .chain([std::fs::read(pair.join("flow.flo")).unwrap()])
        .collect();
    assert!(before == after);
    assert!(manifest == std::fs::read(out.join("manifest.json")).unwrap());

    // The effective config reproduces the run.
    let eff = out.join("effective_config.toml");
    let o = woodflow(&["flow", "--config", eff.to_str().unwrap(), "--pairs", "A/dry-wet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(pair.join("flow.flo")).unwrap(), before[3]);

    // Without illumination compensation the emitted u is zero.
    let o = woodflow(&["flow", "--config", cfg, "--pairs", "B/dry-wet", "--no-illum"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let u = io::read_f32_tiff(&out.join("pairs").join("B_dry-wet").join("illumination.tif")).unwrap();
    assert!(u.data().iter().all(|&v| v == 0.0));
}

#[test]
fn missing_humidity_is_a_config_error() {
    let fx = fixture("[humidity]\ndry = 30.0\n");
    let o = woodflow(&["preprocess", "--config", fx.config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("A_wet.png") && msg.contains("wet"), "{msg}");
    assert!(!fx.root.join("out").exists());
}

#[test]
fn flow_before_preprocess_names_the_pair() {
    let fx = fixture(HUMIDITY);
    let o = woodflow(&["flow", "--config", fx.config.to_str().unwrap(), "--pairs", "A/dry-wet"]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("A/dry-wet") && msg.contains("preprocess"), "{msg}");
}

#[test]
fn undecodable_scan_is_reported_with_its_path() {
    let fx = fixture(HUMIDITY);
    std::fs::write(fx.root.join("B_wet.png"), b"not an image").unwrap();
    let o = woodflow(&["preprocess", "--config", fx.config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("B_wet.png") && msg.contains("1 of 2"), "{msg}");
    // The healthy face is still processed.
    assert!(fx.root.join("out/preprocess/A_dry_aligned.png").is_file());
}

#[test]
fn empty_output_dir_has_nothing_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = woodflow(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nothing to report"));
}

#[test]
fn unknown_case_and_bad_flags_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = woodflow(&["synth", "--out", out, "--case", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
    let o = woodflow(&["synth", "--out", out, "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = woodflow(&["synth", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_runner_records_endpoint_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = woodflow(&["synth", "--out", out.to_str().unwrap(), "--case", "zero"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let epe = manifest["synth"]["zero"]["synth"]["endpoint_error_mean"].as_f64().unwrap();
    assert!(epe < 0.02, "{epe}");
    let o = woodflow(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report_synth.md")).unwrap();
    assert_eq!(report.matches("## zero").count(), 1);
}
