use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use unicp::container::{decode_sliced, decode_state, encode_sliced, encode_state};
use unicp::dws::{
    capture_baseline, default_calib_ticks, dws_calibrate, run_dispatched, CacheMap,
    CalibrationOptions, DispatchMode, Dispatcher,
};
use unicp::edcw::SchedulerConfig;
use unicp::harness::{run_scheduler_on_profile, DriftProfile, HarnessRun, ProfileSpec};
use unicp::metrics::{QualityReport, RunTrace};
use unicp::model::{init_model, FullDispatch, LatentState, Model, UnitId};
use unicp::pcas::SlicedWeights;

use crate::spec::{manifest, resolve, threads, CommonArgs, RunSpec};
use crate::CliError;

pub const BASELINE_STATE: &str = "baseline.state";
pub const BASELINE_TRACE: &str = "baseline_trace.csv";
pub const CACHE_MAP: &str = "cache_map.txt";
pub const SLICED: &str = "sliced.bin";
pub const CALIBRATION_LOG: &str = "calibration.csv";
pub const RUN_STATE: &str = "run.state";
pub const RUN_TRACE: &str = "run_trace.csv";
pub const RUN_MAP: &str = "run_cache_map.txt";
pub const HARNESS_CSV: &str = "harness.csv";
pub const COMPARE_REPORT: &str = "compare.txt";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::missing(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read(path)?)
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))
}

fn write_manifest(
    out: &Path,
    command: &str,
    spec: &RunSpec,
    inputs: &[(&str, &Path)],
) -> Result<(), CliError> {
    write(&out.join(format!("{command}.spec.toml")), manifest(command, spec, inputs)?)
}

fn state_bytes(model: &Model, state: &LatentState) -> Vec<u8> {
    encode_state(state, &model.cfg.to_kv())
}

fn load_state(path: &Path) -> Result<LatentState, CliError> {
    let (state, _) = decode_state(&read(path)?)?;
    Ok(state)
}

fn print_totals(trace: &RunTrace) {
    let [full, reuse_output, reuse_map, pruned] = trace.attention_counts();
    println!("macs_total = {}", trace.totals().macs_total);
    println!("attention_cells full = {full} reuse_output = {reuse_output} reuse_map = {reuse_map} pruned = {pruned}");
}

pub fn baseline(args: &CommonArgs) -> Result<(), CliError> {
    let spec = resolve(args)?;
    prepare_out(&args.out)?;
    let model = init_model(&spec.model)?;
    let (state, trace) = model.denoise(&mut FullDispatch)?;
    write(&args.out.join(BASELINE_STATE), state_bytes(&model, &state))?;
    write(&args.out.join(BASELINE_TRACE), trace.to_csv())?;
    write_manifest(&args.out, "baseline", &spec, &[])?;
    print_totals(&trace);
    Ok(())
}

pub fn calibrate(args: &CommonArgs) -> Result<(), CliError> {
    let spec = resolve(args)?;
    prepare_out(&args.out)?;
    let model = init_model(&spec.model)?;
    let capture = capture_baseline(
        &model,
        spec.scheduler.window,
        &default_calib_ticks(spec.model.num_steps),
    )?;
    let opts = CalibrationOptions {
        bounds: spec.bounds(),
        aggregation: spec.calibration.aggregation,
        threads: threads()?,
    };
    let cal = dws_calibrate(&model, &capture, &spec.scheduler, &opts)?;

    let mut log = String::from("block,kind,step,candidate_n,measured_error,accepted\n");
    for r in &cal.records {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{}",
            r.block,
            r.kind.as_str(),
            r.step,
            r.candidate_n,
            r.measured_error,
            r.accepted
        );
    }
    let meta = format!("{}delta = {}\n", model.cfg.to_kv(), spec.scheduler.delta);
    write(&args.out.join(CACHE_MAP), cal.cache_map.to_text())?;
    write(&args.out.join(SLICED), encode_sliced(&cal.sliced, &meta))?;
    write(&args.out.join(CALIBRATION_LOG), log)?;
    write_manifest(&args.out, "calibrate", &spec, &[])?;

    let m = spec.model.model_dim;
    println!("block kind final_n pruned_fraction");
    for u in UnitId::all(spec.model.num_blocks) {
        let n = cal.cache_map.final_n[u.index()].unwrap_or(m);
        println!("{} {} {} {}", u.block, u.kind.as_str(), n, 1.0 - n as f64 / m as f64);
    }
    Ok(())
}

/// Loads calibration artifacts from `dir` and checks they match `spec`.
fn load_calibration(dir: &Path, spec: &RunSpec) -> Result<(CacheMap, Vec<SlicedWeights>), CliError> {
    let map_path = dir.join(CACHE_MAP);
    let sliced_path = dir.join(SLICED);
    let map = CacheMap::from_text(&read_text(&map_path)?)?;
    let (sliced, _) = decode_sliced(&read(&sliced_path)?)?;
    if map.header.model != spec.model {
        return Err(CliError::Config(format!(
            "{} was calibrated for a different model config",
            map_path.display()
        )));
    }
    if map.header.delta != spec.scheduler.delta {
        return Err(CliError::Config(format!(
            "{} was calibrated at delta {}, run asks for {}",
            map_path.display(),
            map.header.delta,
            spec.scheduler.delta
        )));
    }
    if sliced.len() != map.grid.len() {
        return Err(CliError::Config(format!(
            "{} holds {} units, cache map has {}",
            sliced_path.display(),
            sliced.len(),
            map.grid.len()
        )));
    }
    Ok((map, sliced))
}

pub fn run(
    args: &CommonArgs,
    calibration: Option<&Path>,
    baseline_trace: Option<&Path>,
) -> Result<(), CliError> {
    let spec = resolve(args)?;
    prepare_out(&args.out)?;
    let model = init_model(&spec.model)?;
    let cal_dir = calibration.unwrap_or(&args.out).to_path_buf();
    let mut inputs: Vec<(&str, PathBuf)> = Vec::new();

    let mut bounds = spec.bounds();
    let mut aggregation = spec.calibration.aggregation;
    let mut dispatcher = match (spec.mode, spec.prune) {
        (DispatchMode::Online, false) => {
            Dispatcher::online(&spec.model, spec.scheduler.clone(), Vec::new())?
        }
        (DispatchMode::Replay, false) => {
            return Err(CliError::Config("replay executes calibrated cells; drop --no-prune".into()))
        }
        (mode, true) => {
            let (map, sliced) = load_calibration(&cal_dir, &spec)?;
            inputs.push(("calibration", cal_dir.clone()));
            bounds = map.header.bounds;
            aggregation = map.header.aggregation;
            let sliced = sliced.into_iter().map(Some).collect();
            if mode == DispatchMode::Online {
                Dispatcher::online(&spec.model, spec.scheduler.clone(), sliced)?
            } else {
                Dispatcher::replay(&spec.model, &map, sliced)?
            }
        }
    };
    let run = run_dispatched(&model, &mut dispatcher, bounds, aggregation)?;

    write(&args.out.join(RUN_STATE), state_bytes(&model, &run.final_state))?;
    write(&args.out.join(RUN_TRACE), run.trace.to_csv())?;
    write(&args.out.join(RUN_MAP), run.cache_map.to_text())?;
    let input_refs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    write_manifest(&args.out, "run", &spec, &input_refs)?;

    print_totals(&run.trace);
    let default_trace = args.out.join(BASELINE_TRACE);
    let base_path = match baseline_trace {
        Some(p) => Some(p.to_path_buf()),
        None => default_trace.exists().then_some(default_trace),
    };
    if let Some(p) = base_path {
        let base = RunTrace::from_csv(&read_text(&p)?)?;
        let ratio = run.trace.totals().macs_total as f64 / base.totals().macs_total as f64;
        println!("mac_ratio = {ratio}");
    }
    Ok(())
}

/// The default harness profile: drift 0.2 over the outer fifth at each end,
/// 0.01 in between, and a 0.3 spike at the midpoint.
pub fn default_profile(steps: usize) -> DriftProfile {
    DriftProfile::u_shape(steps, 0.2, 0.2, 0.01).with_spike(steps / 2, 0.3)
}

fn spanning(run: &HarnessRun, spike: usize) -> (usize, usize) {
    let armed = run.armed_windows();
    let behind = armed.iter().filter(|&&(t, k)| t >= spike && t - k < spike).count();
    let ahead = armed.iter().filter(|&&(t, k)| t < spike && t + k > spike).count();
    (behind, ahead)
}

pub fn harness(args: &CommonArgs, profile: Option<&Path>, fixed: &[usize]) -> Result<(), CliError> {
    let mut spec = resolve(args)?;
    prepare_out(&args.out)?;
    let (profile_spec, inputs) = match profile {
        Some(p) => (ProfileSpec::parse(&read_text(p)?)?, vec![("profile", p)]),
        None => (
            ProfileSpec {
                profile: default_profile(spec.model.num_steps),
                sched: SchedulerConfig::new(spec.scheduler.delta, spec.scheduler.window),
            },
            Vec::new(),
        ),
    };
    spec.scheduler = profile_spec.sched.clone();
    let shape = (spec.model.tokens_per_frame, spec.model.model_dim);
    let cmp = run_scheduler_on_profile(
        &profile_spec.profile,
        &profile_spec.sched,
        fixed,
        shape,
        spec.model.seed,
    )?;

    let drifts = profile_spec.profile.effective();
    let mut csv = String::from("step,drift,edcw,edcw_k,edcw_error");
    for (k, _) in &cmp.fixed {
        let _ = write!(csv, ",fixed_{k},fixed_{k}_error");
    }
    csv.push('\n');
    for (t, s) in cmp.edcw.steps.iter().enumerate() {
        let k = s.window.map(|k| k.to_string()).unwrap_or_default();
        let _ = write!(csv, "{t},{},{},{k},{}", drifts[t], s.cell.symbol(), s.reuse_error);
        for (_, run) in &cmp.fixed {
            let f = &run.steps[t];
            let _ = write!(csv, ",{},{}", f.cell.symbol(), f.reuse_error);
        }
        csv.push('\n');
    }
    write(&args.out.join(HARNESS_CSV), csv)?;
    write_manifest(&args.out, "harness", &spec, &inputs)?;

    println!("edcw_accumulated_error = {}", cmp.edcw.accumulated_error);
    for (k, run) in &cmp.fixed {
        println!("fixed_{k}_accumulated_error = {}", run.accumulated_error);
    }
    for &(step, magnitude) in &profile_spec.profile.spikes {
        if magnitude > profile_spec.sched.delta {
            let (behind, ahead) = spanning(&cmp.edcw, step);
            println!("spike_{step}_matched_windows_spanning = {behind}");
            println!("spike_{step}_served_windows_spanning = {ahead}");
        }
    }
    Ok(())
}

pub fn compare(reference: &Path, candidate: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let a = load_state(reference)?;
    let b = load_state(candidate)?;
    let report = QualityReport::compute(&a, &b)?;
    let text = report.to_text();
    if let Some(dir) = out {
        prepare_out(dir)?;
        write(&dir.join(COMPARE_REPORT), &text)?;
    }
    print!("{text}");
    Ok(())
}
