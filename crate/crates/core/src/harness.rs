//! Scripted drift rig: synthesizes attention-result sequences whose
//! step-to-step relative drift follows a prescribed profile and runs the
//! scheduler on them next to a fixed-window comparator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::edcw::{consume_cache, edcw_decide, BlockCacheState, CacheKind, Decision, DecisionKind, SchedulerConfig};
use crate::error::{Error, Result};
use crate::linalg::{rel_l2, Mat};
use crate::model::AttentionResult;

/// Largest relative drift a single step may request.
pub const MAX_DRIFT: f64 = 2.0;

/// Ratio of map drift to output drift in synthesized sequences.
pub const DEFAULT_MAP_RATIO: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DriftProfile {
    /// Target drift between step `t - 1` and `t`; entry 0 is unused.
    pub drifts: Vec<f64>,
    /// `(step, magnitude)` overrides.
    pub spikes: Vec<(usize, f64)>,
}

impl DriftProfile {
    pub fn new(drifts: Vec<f64>, spikes: Vec<(usize, f64)>) -> Result<Self> {
        let p = Self { drifts, spikes };
        p.validate()?;
        Ok(p)
    }

    /// Outer `edge_frac` of the steps at `edge`, the rest at `mid`.
    pub fn u_shape(steps: usize, edge_frac: f64, edge: f64, mid: f64) -> Self {
        let cut = (edge_frac * steps as f64).round() as usize;
        let drifts = (0..steps)
            .map(|t| if t < cut || t >= steps.saturating_sub(cut) { edge } else { mid })
            .collect();
        Self {
            drifts,
            spikes: Vec::new(),
        }
    }

    pub fn with_spike(mut self, step: usize, magnitude: f64) -> Self {
        self.spikes.push((step, magnitude));
        self
    }

    pub fn len(&self) -> usize {
        self.drifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drifts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.drifts.is_empty() {
            return Err(Error::Config("drift profile is empty".into()));
        }
        if let Some(v) = self.drifts.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Config(format!("drift {v} is negative or not a number")));
        }
        for &(s, v) in &self.spikes {
            if s == 0 || s >= self.drifts.len() {
                return Err(Error::Config(format!("spike step {s} outside 1..{}", self.drifts.len())));
            }
            if !(v >= 0.0) {
                return Err(Error::Config(format!("spike magnitude {v} is negative")));
            }
        }
        Ok(())
    }

    /// Drift per step with spikes applied.
    pub fn effective(&self) -> Vec<f64> {
        let mut d = self.drifts.clone();
        for &(s, v) in &self.spikes {
            d[s] = v;
        }
        if let Some(first) = d.first_mut() {
            *first = 0.0;
        }
        d
    }
}

/// A profile file: the profile plus the scheduler it is meant to run under.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSpec {
    pub profile: DriftProfile,
    pub sched: SchedulerConfig,
}

impl ProfileSpec {
    /// Header `T = `, `delta = `, `window = `; then one drift per line and
    /// `@step magnitude` spike lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let (mut steps, mut delta, mut window) = (None, None, None);
        let mut drifts = Vec::new();
        let mut spikes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "T" => steps = Some(v.parse::<usize>().map_err(|_| err(i, format!("bad T `{v}`")))?),
                    "delta" => delta = Some(v.parse::<f64>().map_err(|_| err(i, format!("bad delta `{v}`")))?),
                    "window" => window = Some(v.parse::<usize>().map_err(|_| err(i, format!("bad window `{v}`")))?),
                    other => return Err(err(i, format!("unknown key `{other}`"))),
                }
            } else if let Some(rest) = line.strip_prefix('@') {
                let mut f = rest.split_whitespace();
                let (Some(s), Some(v), None) = (f.next(), f.next(), f.next()) else {
                    return Err(err(i, "expected `@step magnitude`".into()));
                };
                let s = s.parse().map_err(|_| err(i, format!("bad spike step `{s}`")))?;
                let v = v.parse().map_err(|_| err(i, format!("bad spike magnitude `{v}`")))?;
                spikes.push((s, v));
            } else {
                drifts.push(line.parse::<f64>().map_err(|_| err(i, format!("bad drift `{line}`")))?);
            }
        }
        let steps = steps.ok_or_else(|| err(0, "missing `T`".into()))?;
        if drifts.len() != steps {
            return Err(err(0, format!("{} drifts listed, T = {steps}", drifts.len())));
        }
        let sched = SchedulerConfig::new(
            delta.ok_or_else(|| err(0, "missing `delta`".into()))?,
            window.ok_or_else(|| err(0, "missing `window`".into()))?,
        );
        sched.validate(steps)?;
        Ok(Self {
            profile: DriftProfile::new(drifts, spikes)?,
            sched,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "T = {}\ndelta = {}\nwindow = {}\n",
            self.profile.len(),
            self.sched.delta,
            self.sched.window
        );
        for d in &self.profile.drifts {
            out.push_str(&format!("{d}\n"));
        }
        for (s, v) in &self.profile.spikes {
            out.push_str(&format!("@{s} {v}\n"));
        }
        out
    }
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Builds `profile.len()` results with `rel_l2(o_t, o_{t-1}) = drift[t]` and
/// map drift `map_ratio · drift[t]`.
///
/// Outputs move along a fixed unit direction orthogonal to a random base.
/// Maps move back and forth between the identity and a cyclic shift, so they
/// stay row-stochastic.
pub fn synthesize_sequence(
    profile: &DriftProfile,
    shape: (usize, usize),
    seed: u64,
    map_ratio: f64,
) -> Result<Vec<AttentionResult>> {
    profile.validate()?;
    let (s, m) = shape;
    if s < 2 || m == 0 {
        return Err(Error::Config(format!("harness shape {s}×{m} too small")));
    }
    let drifts = profile.effective();
    if let Some((t, v)) = drifts.iter().enumerate().find(|(_, v)| **v > MAX_DRIFT) {
        return Err(Error::InfeasibleDrift { step: t, value: *v });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_mat(s, m, &mut rng);
    let mut dir = random_mat(s, m, &mut rng);
    let along = dot(&dir, &base) / dot(&base, &base);
    dir = dir.sub(&base.scale(along))?;
    dir = dir.scale(1.0 / dir.frobenius());
    let base_sq = dot(&base, &base);

    let a0 = Mat::identity(s);
    let a1 = Mat::from_fn(s, s, |i, j| if j == (i + 1) % s { 1.0 } else { 0.0 });
    let gap = a1.sub(&a0)?.frobenius();
    let mix = |l: f64| a0.scale(1.0 - l).add(&a1.scale(l)).expect("same shape");

    let mut out = Vec::with_capacity(drifts.len());
    let (mut c, mut lambda) = (0.0f64, 0.0f64);
    for (t, &d) in drifts.iter().enumerate() {
        if t > 0 {
            c += d * (base_sq + c * c).sqrt();
            let prev_norm = mix(lambda).frobenius();
            let step = map_ratio * d * prev_norm / gap;
            lambda = if lambda + step <= 1.0 {
                lambda + step
            } else if lambda - step >= 0.0 {
                lambda - step
            } else {
                return Err(Error::InfeasibleDrift {
                    step: t,
                    value: map_ratio * d,
                });
            };
        }
        out.push(AttentionResult {
            map: mix(lambda),
            output: base.add(&dir.scale(c))?,
            macs: 0,
        });
    }
    Ok(out)
}

/// One step of a harness run.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessStep {
    /// Executed cell: `Full` for computed steps, a reuse kind otherwise.
    pub cell: DecisionKind,
    /// Scheduler verdict on computed steps.
    pub decision: Option<Decision>,
    /// Window serving a reuse step.
    pub window: Option<usize>,
    /// Relative error of the reused value against the true one.
    pub reuse_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessRun {
    pub steps: Vec<HarnessStep>,
    pub accumulated_error: f64,
}

impl HarnessRun {
    /// `(arming step, k)` for every armed cache.
    pub fn armed_windows(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(t, s)| {
                let d = s.decision.as_ref()?;
                d.kind.is_reuse().then(|| (t, d.k.expect("reuse has k")))
            })
            .collect()
    }
}

/// Feeds `seq` through the scheduler step by step.
pub fn run_edcw(seq: &[AttentionResult], sched: &SchedulerConfig) -> Result<HarnessRun> {
    sched.validate(seq.len())?;
    let mut state = BlockCacheState::new(sched.window);
    let mut steps = Vec::with_capacity(seq.len());
    let mut total = 0.0;
    for (t, truth) in seq.iter().enumerate() {
        if let Some(hit) = consume_cache(&mut state, t) {
            let err = match hit.kind {
                CacheKind::Output => rel_l2(&hit.payload, &truth.output)?,
                CacheKind::Map => rel_l2(&hit.payload, &truth.map)?,
            };
            total += err;
            steps.push(HarnessStep {
                cell: hit.kind.decision(),
                decision: None,
                window: Some(hit.window),
                reuse_error: err,
            });
            continue;
        }
        let d = edcw_decide(&mut state, truth, t, sched);
        steps.push(HarnessStep {
            cell: DecisionKind::Full,
            window: d.k,
            decision: Some(d),
            reuse_error: 0.0,
        });
    }
    Ok(HarnessRun {
        steps,
        accumulated_error: total,
    })
}

/// Computes every `k_fixed`-th step and reuses that output in between.
pub fn run_fixed_window(seq: &[AttentionResult], k_fixed: usize) -> Result<HarnessRun> {
    if k_fixed == 0 {
        return Err(Error::Config("fixed window must be at least 1".into()));
    }
    let mut steps = Vec::with_capacity(seq.len());
    let mut total = 0.0;
    let mut last = 0;
    for (t, truth) in seq.iter().enumerate() {
        if t % k_fixed == 0 {
            last = t;
            steps.push(HarnessStep {
                cell: DecisionKind::Full,
                decision: None,
                window: Some(k_fixed),
                reuse_error: 0.0,
            });
        } else {
            let err = rel_l2(&seq[last].output, &truth.output)?;
            total += err;
            steps.push(HarnessStep {
                cell: DecisionKind::ReuseOutput,
                decision: None,
                window: Some(k_fixed),
                reuse_error: err,
            });
        }
    }
    Ok(HarnessRun {
        steps,
        accumulated_error: total,
    })
}

/// Scheduler and fixed-window runs on one synthesized profile.
#[derive(Clone, Debug)]
pub struct ProfileComparison {
    pub edcw: HarnessRun,
    /// `(k_fixed, run)` for each requested fixed window.
    pub fixed: Vec<(usize, HarnessRun)>,
}

pub fn run_scheduler_on_profile(
    profile: &DriftProfile,
    sched: &SchedulerConfig,
    fixed_windows: &[usize],
    shape: (usize, usize),
    seed: u64,
) -> Result<ProfileComparison> {
    let seq = synthesize_sequence(profile, shape, seed, DEFAULT_MAP_RATIO)?;
    Ok(ProfileComparison {
        edcw: run_edcw(&seq, sched)?,
        fixed: fixed_windows
            .iter()
            .map(|&k| Ok((k, run_fixed_window(&seq, k)?)))
            .collect::<Result<_>>()?,
    })
}
