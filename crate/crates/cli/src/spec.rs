//! Run specification: config file, presets, and flag overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use unicp::dws::{Aggregation, DispatchMode, RatioBounds};
use unicp::edcw::SchedulerConfig;
use unicp::model::ModelConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Preset {
    #[value(name = "E1", alias = "e1")]
    E1,
    #[value(name = "E2", alias = "e2")]
    E2,
    #[value(name = "E3", alias = "e3")]
    E3,
    #[value(name = "E4", alias = "e4")]
    E4,
    #[value(name = "E5", alias = "e5")]
    E5,
}

impl Preset {
    pub fn delta(self) -> f64 {
        match self {
            Preset::E1 => 0.025,
            Preset::E2 => 0.05,
            // 0.75 would break the monotone ladder; reachable with --delta
            Preset::E3 => 0.075,
            Preset::E4 => 0.125,
            Preset::E5 => 0.175,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Online,
    Replay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Conservative,
    Smallest,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub aggregation: Aggregation,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let b = RatioBounds::default();
        Self {
            ratio_lo: b.lo,
            ratio_hi: b.hi,
            aggregation: Aggregation::default(),
        }
    }
}

/// Everything a command needs; also the manifest written next to its artifacts.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub preset: Option<Preset>,
    pub mode: DispatchMode,
    /// Slicing enabled for `run`.
    pub prune: bool,
    pub model: ModelConfig,
    pub scheduler: SchedulerConfig,
    pub calibration: CalibrationSection,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            preset: None,
            mode: DispatchMode::default(),
            prune: true,
            model: ModelConfig::default(),
            scheduler: SchedulerConfig::default(),
            calibration: CalibrationSection::default(),
        }
    }
}

impl RunSpec {
    pub fn bounds(&self) -> RatioBounds {
        RatioBounds {
            lo: self.calibration.ratio_lo,
            hi: self.calibration.ratio_hi,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Threshold preset: E1=0.025 E2=0.05 E3=0.075 E4=0.125 E5=0.175.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Relative drift threshold (overrides any preset).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Search window K.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub ratio_lo: Option<f64>,
    #[arg(long)]
    pub ratio_hi: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    /// Disable query/key slicing in `run`.
    #[arg(long)]
    pub no_prune: bool,
}

fn read_config(path: &Path) -> Result<RunSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Merges defaults, config file, preset, and flags, in increasing priority.
pub fn resolve(args: &CommonArgs) -> Result<RunSpec, CliError> {
    let mut spec = match &args.config {
        Some(p) => read_config(p)?,
        None => RunSpec::default(),
    };
    if let Some(p) = args.preset {
        spec.preset = Some(p);
    }
    if let Some(p) = spec.preset {
        spec.scheduler.delta = p.delta();
    }
    if let Some(d) = args.delta {
        spec.scheduler.delta = d;
    }
    if let Some(w) = args.window {
        spec.scheduler.window = w;
    }
    if let Some(v) = args.ratio_lo {
        spec.calibration.ratio_lo = v;
    }
    if let Some(v) = args.ratio_hi {
        spec.calibration.ratio_hi = v;
    }
    if let Some(s) = args.seed {
        spec.model.seed = s;
    }
    if let Some(m) = args.mode {
        spec.mode = match m {
            ModeArg::Online => DispatchMode::Online,
            ModeArg::Replay => DispatchMode::Replay,
        };
    }
    if let Some(a) = args.aggregation {
        spec.calibration.aggregation = match a {
            AggregationArg::Conservative => Aggregation::Conservative,
            AggregationArg::Smallest => Aggregation::Smallest,
        };
    }
    if args.no_prune {
        spec.prune = false;
    }
    spec.model.validate()?;
    spec.scheduler.validate(spec.model.num_steps)?;
    spec.bounds().validate()?;
    Ok(spec)
}

/// Manifest text for `command`: the resolved spec as TOML.
pub fn manifest(command: &str, spec: &RunSpec, inputs: &[(&str, &Path)]) -> Result<String, CliError> {
    let body = toml::to_string(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = format!("# unicp {command}\n");
    for (name, path) in inputs {
        out.push_str(&format!("# input {name} = {}\n", path.display()));
    }
    out.push_str(&body);
    Ok(out)
}

/// Worker count from `UNICP_THREADS` (default 1).
pub fn threads() -> Result<usize, CliError> {
    match std::env::var("UNICP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("UNICP_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}
