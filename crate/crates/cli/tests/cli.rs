#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use unicp::container::decode_state;
use unicp::dws::{capture_baseline, default_calib_ticks, CacheMap};
use unicp::model::{init_model, ModelConfig, UnitId};

const TINY: &str = "\
[model]
num_blocks = 2
model_dim = 16
tokens_per_frame = 16
num_frames = 2
num_steps = 8
seed = 7

[scheduler]
delta = 0.05
window = 4
";

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        model_dim: 16,
        tokens_per_frame: 16,
        num_frames: 2,
        num_steps: 8,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn unicp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unicp"))
        .args(args)
        .env_remove("UNICP_THREADS")
        .output()
        .expect("spawn unicp")
}

fn ok(args: &[&str]) -> String {
    let out = unicp(args);
    assert!(
        out.status.success(),
        "unicp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    unicp(args).status.code().expect("exit code")
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self { dir: TempDir::new().unwrap() };
        std::fs::write(w.path("tiny.toml"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .collect()
}

#[test]
fn bad_config_exits_2() {
    let w = Work::new();
    std::fs::write(w.path("typo.toml"), "[model]\nnum_blockz = 2\n").unwrap();
    assert_eq!(code(&["baseline", "--config", &w.s("typo.toml"), "--out", &w.s("o")]), 2);
    std::fs::write(w.path("neg.toml"), "[scheduler]\ndelta = -0.1\n").unwrap();
    assert_eq!(code(&["baseline", "--config", &w.s("neg.toml"), "--out", &w.s("o")]), 2);
    assert_eq!(
        code(&["baseline", "--config", &w.s("tiny.toml"), "--window", "0", "--out", &w.s("o")]),
        2
    );
    assert_eq!(
        code(&["calibrate", "--config", &w.s("tiny.toml"), "--ratio-lo", "0.5", "--ratio-hi", "0.2", "--out", &w.s("o")]),
        2
    );
}

#[test]
fn missing_replay_artifacts_exit_3() {
    let w = Work::new();
    let cfg = w.s("tiny.toml");
    assert_eq!(code(&["run", "--config", &cfg, "--mode", "replay", "--out", &w.s("empty")]), 3);
    // online pruning also needs the sliced weights
    assert_eq!(code(&["run", "--config", &cfg, "--out", &w.s("empty")]), 3);
    assert_eq!(code(&["compare", "--reference", &w.s("nope.state"), "--candidate", &w.s("nope.state")]), 3);
}

#[test]
fn calibration_for_another_threshold_is_rejected() {
    let w = Work::new();
    let (cfg, out) = (w.s("tiny.toml"), w.s("o"));
    ok(&["calibrate", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&["run", "--config", &cfg, "--delta", "0.1", "--out", &out]), 2);
    assert_eq!(code(&["run", "--config", &cfg, "--mode", "replay", "--no-prune", "--out", &out]), 2);
}

#[test]
fn compare_rejects_shape_mismatch() {
    let w = Work::new();
    ok(&["baseline", "--config", &w.s("tiny.toml"), "--out", &w.s("a")]);
    std::fs::write(w.path("wide.toml"), TINY.replace("num_frames = 2", "num_frames = 3")).unwrap();
    ok(&["baseline", "--config", &w.s("wide.toml"), "--out", &w.s("b")]);
    let (a, b) = (w.s("a/baseline.state"), w.s("b/baseline.state"));
    assert_eq!(code(&["compare", "--reference", &a, "--candidate", &b]), 2);
}

#[test]
fn compare_against_itself() {
    let w = Work::new();
    ok(&["baseline", "--config", &w.s("tiny.toml"), "--out", &w.s("a")]);
    let a = w.s("a/baseline.state");
    let r = kv(&ok(&["compare", "--reference", &a, "--candidate", &a]));
    assert_eq!(r["ssim"], "1");
    assert_eq!(r["rel_l2"], "0");
    assert_eq!(r["psnr_db"], "99");
}

#[test]
fn flags_override_preset_which_overrides_config() {
    let w = Work::new();
    let cfg = w.s("tiny.toml");
    let out = w.s("o");
    let manifest = || std::fs::read_to_string(w.path("o/baseline.spec.toml")).unwrap();

    ok(&["baseline", "--config", &cfg, "--out", &out]);
    let m = manifest();
    assert!(m.contains("delta = 0.05") && m.contains("window = 4") && m.contains("num_blocks = 2"));

    ok(&["baseline", "--config", &cfg, "--preset", "E5", "--out", &out]);
    assert!(manifest().contains("delta = 0.175"));

    ok(&["baseline", "--config", &cfg, "--preset", "E5", "--delta", "0.3", "--window", "2", "--out", &out]);
    let m = manifest();
    assert!(m.contains("delta = 0.3") && m.contains("window = 2"));

    // a preset inside the config file loses to an explicit --delta
    std::fs::write(w.path("pre.toml"), format!("preset = \"E3\"\n{TINY}")).unwrap();
    ok(&["baseline", "--config", &w.s("pre.toml"), "--out", &out]);
    assert!(manifest().contains("delta = 0.075"));
    ok(&["baseline", "--config", &w.s("pre.toml"), "--delta", "0.75", "--out", &out]);
    assert!(manifest().contains("delta = 0.75"));
}

#[test]
fn every_command_is_deterministic() {
    let w = Work::new();
    let cfg = w.s("tiny.toml");
    for out in ["x", "y"] {
        let o = w.s(out);
        ok(&["baseline", "--config", &cfg, "--preset", "E4", "--out", &o]);
        ok(&["calibrate", "--config", &cfg, "--preset", "E4", "--out", &o]);
        ok(&["run", "--config", &cfg, "--preset", "E4", "--out", &o]);
        let r = w.s(&format!("{out}/replay"));
        ok(&["run", "--config", &cfg, "--preset", "E4", "--mode", "replay", "--calibration", &o, "--out", &r]);
        ok(&["harness", "--config", &cfg, "--out", &o]);
        let c = w.s(&format!("{out}/cmp"));
        let (base, run) = (format!("{o}/baseline.state"), format!("{o}/run.state"));
        ok(&["compare", "--reference", &base, "--candidate", &run, "--out", &c]);
    }
    for sub in ["", "replay", "cmp"] {
        let (x, y) = (files(&w.path("x").join(sub)), files(&w.path("y").join(sub)));
        assert!(!x.is_empty());
        assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>());
        for (name, bytes) in &x {
            let mut bytes = bytes.clone();
            if name.ends_with(".spec.toml") {
                // manifests name their input directories
                bytes = String::from_utf8(bytes).unwrap().replace(&w.s("x"), &w.s("y")).into_bytes();
            }
            assert!(bytes == y[name], "{sub}/{name} differs");
        }
    }
}

#[test]
fn threads_do_not_change_calibration() {
    let w = Work::new();
    let cfg = w.s("tiny.toml");
    ok(&["calibrate", "--config", &cfg, "--out", &w.s("one")]);
    let out = Command::new(env!("CARGO_BIN_EXE_unicp"))
        .args(["calibrate", "--config", &cfg, "--out", &w.s("four")])
        .env("UNICP_THREADS", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["cache_map.txt", "sliced.bin", "calibration.csv"] {
        assert_eq!(std::fs::read(w.path("one").join(f)).unwrap(), std::fs::read(w.path("four").join(f)).unwrap());
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_unicp"))
        .args(["calibrate", "--config", &cfg, "--out", &w.s("bad")])
        .env("UNICP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn calibrate_matches_exhaustive_search() {
    let w = Work::new();
    let cfg = tiny_model();
    let m = cfg.model_dim;
    let model = init_model(&cfg).unwrap();
    let cap = capture_baseline(&model, 4, &default_calib_ticks(cfg.num_steps)).unwrap();
    for (preset, delta) in [("E1", 0.025), ("E3", 0.075), ("E5", 0.175)] {
        let out = w.s(preset);
        let table = ok(&["calibrate", "--config", &w.s("tiny.toml"), "--preset", preset, "--out", &out]);
        let map = CacheMap::from_text(&std::fs::read_to_string(w.path(preset).join("cache_map.txt")).unwrap()).unwrap();
        let (lo_n, hi_n) = ((0.6 * m as f64).ceil() as usize, (0.9 * m as f64).floor() as usize);
        for u in UnitId::all(cfg.num_blocks) {
            let samples = &cap.samples[u.index()];
            let inputs: Vec<_> = samples.iter().map(|s| s.input.clone()).collect();
            let w = model.blocks[u.block].attention(u.kind);
            let want = samples
                .iter()
                .map(|s| {
                    let errs: Vec<(usize, f64)> = (lo_n..=hi_n)
                        .map(|n| (n, oracle::rel(&oracle::sliced_output(&s.input, s.seq_len, w, &inputs, n), s.full_output.data())))
                        .collect();
                    oracle::exhaustive_min_n(&errs, delta, m)
                })
                .max()
                .unwrap();
            assert_eq!(map.final_n[u.index()], Some(want), "{preset} {u:?}");
            let line = format!("{} {} {} ", u.block, u.kind.as_str(), want);
            assert!(table.lines().any(|l| l.starts_with(&line)), "{preset}: missing `{line}`");
        }
    }
}

#[test]
fn run_reports_mac_ratio_and_tallies() {
    let w = Work::new();
    let (cfg, out) = (w.s("tiny.toml"), w.s("o"));
    ok(&["baseline", "--config", &cfg, "--preset", "E5", "--out", &out]);
    ok(&["calibrate", "--config", &cfg, "--preset", "E5", "--out", &out]);
    let printed = kv(&ok(&["run", "--config", &cfg, "--preset", "E5", "--mode", "replay", "--out", &out]));
    let ratio: f64 = printed["mac_ratio"].parse().unwrap();
    assert!(ratio > 0.0 && ratio <= 1.0);

    let trace = unicp::metrics::RunTrace::from_csv(&std::fs::read_to_string(w.path("o/run_trace.csv")).unwrap()).unwrap();
    let map = CacheMap::from_text(&std::fs::read_to_string(w.path("o/cache_map.txt")).unwrap()).unwrap();
    assert_eq!(trace.attention_counts(), map.tally());
    let base = unicp::metrics::RunTrace::from_csv(&std::fs::read_to_string(w.path("o/baseline_trace.csv")).unwrap()).unwrap();
    assert_eq!(ratio, trace.totals().macs_total as f64 / base.totals().macs_total as f64);
}

#[test]
fn compare_report_matches_metric_formulas() {
    let w = Work::new();
    let (cfg, out) = (w.s("tiny.toml"), w.s("o"));
    ok(&["baseline", "--config", &cfg, "--preset", "E5", "--out", &out]);
    ok(&["calibrate", "--config", &cfg, "--preset", "E5", "--out", &out]);
    ok(&["run", "--config", &cfg, "--preset", "E5", "--out", &out]);
    let (base, run) = (w.s("o/baseline.state"), w.s("o/run.state"));
    let r = kv(&ok(&["compare", "--reference", &base, "--candidate", &run]));

    let (a, _) = decode_state(&std::fs::read(&base).unwrap()).unwrap();
    let (b, _) = decode_state(&std::fs::read(&run).unwrap()).unwrap();
    let want = oracle::metrics(&a, &b);
    let close = |key: &str, v: f64| {
        let got: f64 = r[key].parse().unwrap();
        assert!((got - v).abs() <= 1e-9 * v.abs().max(1.0), "{key}: {got} vs {v}");
    };
    assert!(want.rel_l2 > 0.0, "E5 should differ from the baseline");
    close("mse", want.mse);
    close("psnr_db", want.psnr);
    close("ssim", want.ssim);
    close("rel_l2", want.rel_l2);
}

#[test]
fn harness_reports_the_default_spike() {
    let w = Work::new();
    let r = kv(&ok(&["harness", "--preset", "E2", "--window", "4", "--out", &w.s("h")]));
    let edcw: f64 = r["edcw_accumulated_error"].parse().unwrap();
    for k in [2, 3, 4] {
        let fixed: f64 = r[&format!("fixed_{k}_accumulated_error")].parse().unwrap();
        assert!(edcw < fixed);
    }
    assert_eq!(r["spike_15_matched_windows_spanning"], "0");

    std::fs::write(w.path("p.txt"), "T = 6\ndelta = 0.05\nwindow = 2\n0\n0.01\n0.01\n0.01\n0.01\n0.01\n@3 0.4\n").unwrap();
    let r = kv(&ok(&["harness", "--profile", &w.s("p.txt"), "--fixed", "2", "--out", &w.s("h")]));
    assert!(r.contains_key("fixed_2_accumulated_error"));
    assert_eq!(r["spike_3_matched_windows_spanning"], "0");
    let csv = std::fs::read_to_string(w.path("h/harness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(4).unwrap().starts_with("3,0.4,"));
}
