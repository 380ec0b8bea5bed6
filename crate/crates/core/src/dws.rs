//! Dynamic weight shift: calibrates a retained query/key dimension per
//! attention unit, builds the block × step cache map, and dispatches every
//! unit at every step to full compute, output reuse, map reuse, or sliced
//! compute while holding both the original and the sliced weights.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::edcw::{
    consume_cache, edcw_decide, scan_window, BlockCacheState, CacheKind, DecisionKind,
    SchedulerConfig,
};
use crate::error::{Error, Result};
use crate::linalg::{rel_l2, Mat};
use crate::metrics::{RunTrace, TraceRow};
use crate::model::{
    unit_attention, unit_attention_with_map, AttentionKind, AttentionResult, AttentionWeights,
    Dispatch, LatentState, Model, ModelConfig, UnitCtx, UnitId, UnitStep,
};
use crate::pcas::{compute_basis_at, slice_weights, unit_sliced_attention, SlicedWeights};

/// Increment of the pruned-fraction sweep.
pub const RATIO_STEP: f64 = 0.05;

const GRID_EPS: f64 = 1e-9;

/// Bounds on the pruned fraction `1 - n/m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for RatioBounds {
    fn default() -> Self {
        Self { lo: 0.1, hi: 0.4 }
    }
}

impl RatioBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo <= self.hi && self.hi < 1.0) {
            return Err(Error::Config(format!(
                "ratio bounds must satisfy 0 <= lo <= hi < 1, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Retained dimensions to try, largest first: one per `RATIO_STEP` of
    /// pruned fraction from `lo`, ending at `hi`, restricted to dimensions
    /// whose pruned fraction lies in `[lo, hi]`.
    pub fn candidate_dims(&self, m: usize) -> Vec<usize> {
        let mf = m as f64;
        let top = ((mf * (1.0 - self.lo) + GRID_EPS).floor() as usize).min(m);
        let bottom = ((mf * (1.0 - self.hi) - GRID_EPS).ceil() as usize).max(1);
        let to_n = |p: f64| ((mf * (1.0 - p) - GRID_EPS).ceil() as usize).min(top);
        let mut fractions = Vec::new();
        let mut j = 0;
        loop {
            let p = self.lo + RATIO_STEP * j as f64;
            if p > self.hi + GRID_EPS {
                break;
            }
            fractions.push(p);
            j += 1;
        }
        fractions.push(self.hi);
        let mut out: Vec<usize> = Vec::new();
        for p in fractions {
            let n = to_n(p);
            if n >= bottom && n <= top && out.last() != Some(&n) && !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Largest per-step minimal passing dimension: sound at every calibration step.
    #[default]
    Conservative,
    /// Smallest per-step minimal passing dimension.
    Smallest,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Conservative => "conservative",
            Aggregation::Smallest => "smallest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conservative" => Some(Aggregation::Conservative),
            "smallest" => Some(Aggregation::Smallest),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchMode {
    /// The scheduler decides live; the cache map is a record of what ran.
    #[default]
    Online,
    /// A precomputed cache map drives execution.
    Replay,
}

impl DispatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DispatchMode::Online => "online",
            DispatchMode::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "online" => Some(DispatchMode::Online),
            "replay" => Some(DispatchMode::Replay),
            _ => None,
        }
    }
}

/// Default calibration points: the first step of each third of the schedule.
pub fn default_calib_ticks(num_steps: usize) -> Vec<usize> {
    let mut ticks: Vec<usize> = (0..3)
        .map(|i| (i * num_steps).div_ceil(3))
        .filter(|&t| t < num_steps)
        .collect();
    ticks.dedup();
    ticks
}

/// One unit's input and full-compute output at a calibration step.
#[derive(Clone, Debug)]
pub struct CalibSample {
    pub tick: usize,
    pub input: Mat,
    pub seq_len: usize,
    pub full_output: Mat,
}

/// Everything calibration needs from one full-compute pass, independent of
/// the threshold.
#[derive(Clone, Debug)]
pub struct Capture {
    pub cfg: ModelConfig,
    /// Largest window for which drifts were recorded.
    pub window: usize,
    pub calib_ticks: Vec<usize>,
    /// Per unit index, one sample per calibration tick.
    pub samples: Vec<Vec<CalibSample>>,
    /// `drifts[unit][tick][k - 1]` = (output drift, map drift) between the
    /// results at `tick` and `tick - k`.
    pub drifts: Vec<Vec<Vec<(f64, f64)>>>,
    pub final_state: LatentState,
    pub trace: RunTrace,
}

struct CaptureDispatch {
    window: usize,
    calib_ticks: Vec<usize>,
    recent: Vec<Vec<AttentionResult>>,
    samples: Vec<Vec<CalibSample>>,
    drifts: Vec<Vec<Vec<(f64, f64)>>>,
}

impl Dispatch for CaptureDispatch {
    fn attend(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        weights: &AttentionWeights,
    ) -> Result<UnitStep> {
        let r = unit_attention(x, seq_len, weights)?;
        let u = ctx.unit.index();
        let recent = &mut self.recent[u];
        let mut row = Vec::with_capacity(recent.len());
        for k in 1..=recent.len() {
            let past = &recent[recent.len() - k];
            row.push((rel_l2(&r.output, &past.output)?, rel_l2(&r.map, &past.map)?));
        }
        self.drifts[u].push(row);
        if self.calib_ticks.contains(&ctx.tick) {
            self.samples[u].push(CalibSample {
                tick: ctx.tick,
                input: x.clone(),
                seq_len,
                full_output: r.output.clone(),
            });
        }
        if recent.len() == self.window {
            recent.remove(0);
        }
        recent.push(r.clone());
        Ok(UnitStep {
            row: TraceRow::compute(ctx, DecisionKind::Full, r.macs),
            output: r.output,
        })
    }
}

/// Runs the full-compute baseline and records calibration inputs and the
/// per-window drift table.
pub fn capture_baseline(model: &Model, window: usize, calib_ticks: &[usize]) -> Result<Capture> {
    let cfg = &model.cfg;
    if calib_ticks.is_empty() || calib_ticks.iter().any(|&t| t >= cfg.num_steps) {
        return Err(Error::EmptyCalibration);
    }
    let units = 2 * cfg.num_blocks;
    let mut d = CaptureDispatch {
        window: window.max(1),
        calib_ticks: calib_ticks.to_vec(),
        recent: vec![Vec::new(); units],
        samples: vec![Vec::new(); units],
        drifts: vec![Vec::new(); units],
    };
    let (final_state, trace) = model.denoise(&mut d)?;
    Ok(Capture {
        cfg: cfg.clone(),
        window: window.max(1),
        calib_ticks: calib_ticks.to_vec(),
        samples: d.samples,
        drifts: d.drifts,
        final_state,
        trace,
    })
}

/// One (unit, step, candidate) measurement of the calibration sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRecord {
    pub block: usize,
    pub kind: AttentionKind,
    /// Denoising timestep.
    pub step: usize,
    pub candidate_n: usize,
    pub measured_error: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub bounds: RatioBounds,
    pub aggregation: Aggregation,
    /// Worker threads for the per-unit sweep.
    pub threads: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            bounds: RatioBounds::default(),
            aggregation: Aggregation::default(),
            threads: 1,
        }
    }
}

/// Header of a cache map: enough to rebuild the model and the scheduler.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheMapHeader {
    pub model: ModelConfig,
    pub delta: f64,
    pub window: usize,
    pub bounds: RatioBounds,
    pub mode: DispatchMode,
    pub aggregation: Aggregation,
}

/// Block × kind × step grid of executed strategies plus the retained
/// dimension of each unit. Columns run in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheMap {
    pub header: CacheMapHeader,
    /// Indexed by [`UnitId::index`], one cell per step.
    pub grid: Vec<Vec<DecisionKind>>,
    pub final_n: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub cache_map: CacheMap,
    /// Indexed by [`UnitId::index`].
    pub sliced: Vec<SlicedWeights>,
    pub records: Vec<CalibrationRecord>,
    /// Minimal passing dimension per unit and calibration step (`m` if none).
    pub per_step_n: Vec<Vec<usize>>,
}

impl Calibration {
    pub fn sliced_for_dispatch(&self) -> Vec<Option<SlicedWeights>> {
        self.sliced.iter().cloned().map(Some).collect()
    }
}

struct UnitCalibration {
    sliced: SlicedWeights,
    records: Vec<CalibrationRecord>,
    per_step_n: Vec<usize>,
    final_n: usize,
}

fn calibrate_unit(
    model: &Model,
    unit: UnitId,
    samples: &[CalibSample],
    delta: f64,
    opts: &CalibrationOptions,
) -> Result<UnitCalibration> {
    let m = model.dim();
    let w = model.blocks[unit.block].attention(unit.kind);
    let inputs: Vec<Mat> = samples.iter().map(|s| s.input.clone()).collect();
    let steps = samples.iter().map(|s| model.cfg.timestep(s.tick)).collect();
    let basis = Arc::new(compute_basis_at(&inputs, steps)?);
    let candidates = opts.bounds.candidate_dims(m);
    let sliced_by_n: Vec<SlicedWeights> = candidates
        .iter()
        .map(|&n| slice_weights(w, basis.clone(), n))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut per_step_n = Vec::with_capacity(samples.len());
    for s in samples {
        let mut best = m;
        for sw in &sliced_by_n {
            let out = unit_sliced_attention(&s.input, s.seq_len, w, sw)?;
            let err = rel_l2(&out.output, &s.full_output)?;
            let accepted = err <= delta;
            records.push(CalibrationRecord {
                block: unit.block,
                kind: unit.kind,
                step: model.cfg.timestep(s.tick),
                candidate_n: sw.n,
                measured_error: err,
                accepted,
            });
            if !accepted {
                break;
            }
            best = sw.n;
        }
        per_step_n.push(best);
    }
    let final_n = match opts.aggregation {
        Aggregation::Conservative => per_step_n.iter().copied().max(),
        Aggregation::Smallest => per_step_n.iter().copied().min(),
    }
    .unwrap_or(m);
    Ok(UnitCalibration {
        sliced: slice_weights(w, basis, final_n)?,
        records,
        per_step_n,
        final_n,
    })
}

/// Replays the two-tier window scan over a drift table and lays out the
/// resulting cells: the arming step computes in full, the following `k - 1`
/// steps reuse, and unmatched steps are sliced when `n < m`.
pub fn simulate_grid(
    drifts: &[Vec<(f64, f64)>],
    sched: &SchedulerConfig,
    prunable: bool,
) -> Vec<DecisionKind> {
    let steps = drifts.len();
    let mut cells = Vec::with_capacity(steps);
    let mut computed = vec![false; steps];
    let mut serving: Option<(CacheKind, usize)> = None;
    for tick in 0..steps {
        if let Some((kind, expires)) = serving {
            if tick <= expires {
                cells.push(kind.decision());
                continue;
            }
            serving = None;
        }
        let lookup = |k: usize, pick: fn(&(f64, f64)) -> f64| -> Option<f64> {
            let past = tick.checked_sub(k)?;
            if !computed[past] {
                return None;
            }
            drifts[tick].get(k - 1).map(pick)
        };
        let d = scan_window(
            sched.window,
            sched.delta_at(tick),
            |k| lookup(k, |p| p.0),
            |k| lookup(k, |p| p.1),
        );
        computed[tick] = true;
        match (d.kind, d.k) {
            (DecisionKind::ReuseOutput, Some(k)) => {
                serving = Some((CacheKind::Output, tick + k - 1));
                cells.push(DecisionKind::Full);
            }
            (DecisionKind::ReuseMap, Some(k)) => {
                serving = Some((CacheKind::Map, tick + k - 1));
                cells.push(DecisionKind::Full);
            }
            _ if prunable => cells.push(DecisionKind::Pruned),
            _ => cells.push(DecisionKind::Full),
        }
    }
    cells
}

/// Calibrates every unit against `sched.delta` and builds the replay grid.
pub fn dws_calibrate(
    model: &Model,
    capture: &Capture,
    sched: &SchedulerConfig,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    let cfg = &model.cfg;
    sched.validate(cfg.num_steps)?;
    opts.bounds.validate()?;
    if capture.cfg != *cfg {
        return Err(Error::Config("capture was taken from a different model".into()));
    }
    if sched.window > capture.window {
        return Err(Error::Config(format!(
            "window {} exceeds the captured window {}",
            sched.window, capture.window
        )));
    }
    if capture.samples.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyCalibration);
    }
    let units: Vec<UnitId> = UnitId::all(cfg.num_blocks).collect();
    let threads = opts.threads.clamp(1, units.len());
    let mut results: Vec<Option<Result<UnitCalibration>>> = (0..units.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = units.len().div_ceil(threads);
        let handles: Vec<_> = units
            .chunks(chunk)
            .map(|group| {
                scope.spawn(move || {
                    group
                        .iter()
                        .map(|&u| {
                            let delta = sched.delta;
                            (u.index(), calibrate_unit(model, u, &capture.samples[u.index()], delta, opts))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("calibration worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let m = cfg.model_dim;
    let mut sliced = Vec::with_capacity(units.len());
    let mut records = Vec::new();
    let mut per_step_n = Vec::with_capacity(units.len());
    let mut final_n = Vec::with_capacity(units.len());
    let mut grid = Vec::with_capacity(units.len());
    for (u, r) in units.iter().zip(results) {
        let r = r.expect("every unit calibrated")?;
        grid.push(simulate_grid(&capture.drifts[u.index()], sched, r.final_n < m));
        final_n.push(Some(r.final_n));
        sliced.push(r.sliced);
        records.extend(r.records);
        per_step_n.push(r.per_step_n);
    }
    Ok(Calibration {
        cache_map: CacheMap {
            header: CacheMapHeader {
                model: cfg.clone(),
                delta: sched.delta,
                window: sched.window,
                bounds: opts.bounds,
                mode: DispatchMode::Replay,
                aggregation: opts.aggregation,
            },
            grid,
            final_n,
        },
        sliced,
        records,
        per_step_n,
    })
}

/// A computed (not reused) unit result kept for conformance checks.
#[derive(Clone, Debug)]
pub struct ComputedResult {
    pub tick: usize,
    pub result: AttentionResult,
}

/// Dispatch context holding the original weights (through the model), the
/// sliced weights, and the per-unit scheduler state.
pub struct Dispatcher {
    mode: DispatchMode,
    sched: SchedulerConfig,
    sliced: Vec<Option<SlicedWeights>>,
    grid: Option<Vec<Vec<DecisionKind>>>,
    windows: Vec<Vec<Option<usize>>>,
    states: Vec<BlockCacheState>,
    last_decision: Vec<Option<DecisionKind>>,
    last_computed: Vec<Option<AttentionResult>>,
    computed: Option<Vec<Vec<ComputedResult>>>,
}

impl Dispatcher {
    /// Live scheduling. `sliced` is indexed by [`UnitId::index`]; an empty
    /// vector disables slicing.
    pub fn online(
        cfg: &ModelConfig,
        sched: SchedulerConfig,
        sliced: Vec<Option<SlicedWeights>>,
    ) -> Result<Self> {
        sched.validate(cfg.num_steps)?;
        let units = 2 * cfg.num_blocks;
        Self::check_sliced(cfg, &sliced)?;
        Ok(Self {
            mode: DispatchMode::Online,
            states: (0..units).map(|_| BlockCacheState::new(sched.window)).collect(),
            sched,
            sliced: Self::pad(sliced, units),
            grid: None,
            windows: Vec::new(),
            last_decision: vec![None; units],
            last_computed: vec![None; units],
            computed: None,
        })
    }

    /// Executes a precomputed cache map.
    pub fn replay(
        cfg: &ModelConfig,
        map: &CacheMap,
        sliced: Vec<Option<SlicedWeights>>,
    ) -> Result<Self> {
        map.validate()?;
        if map.header.model != *cfg {
            return Err(Error::Config("cache map was built for a different model".into()));
        }
        Self::check_sliced(cfg, &sliced)?;
        let units = 2 * cfg.num_blocks;
        let sched = SchedulerConfig::new(map.header.delta, map.header.window);
        Ok(Self {
            mode: DispatchMode::Replay,
            states: Vec::new(),
            sched,
            sliced: Self::pad(sliced, units),
            windows: map.grid.iter().map(|row| reuse_windows(row)).collect(),
            grid: Some(map.grid.clone()),
            last_decision: vec![None; units],
            last_computed: vec![None; units],
            computed: None,
        })
    }

    fn pad(mut sliced: Vec<Option<SlicedWeights>>, units: usize) -> Vec<Option<SlicedWeights>> {
        sliced.resize(units, None);
        sliced
    }

    fn check_sliced(cfg: &ModelConfig, sliced: &[Option<SlicedWeights>]) -> Result<()> {
        if sliced.len() > 2 * cfg.num_blocks {
            return Err(Error::Config("more sliced weights than attention units".into()));
        }
        if sliced.iter().flatten().any(|s| s.dim() != cfg.model_dim) {
            return Err(Error::Config("sliced weights do not match model_dim".into()));
        }
        Ok(())
    }

    /// Keep every computed result for later conformance checks.
    pub fn record_computed(mut self) -> Self {
        self.computed = Some(vec![Vec::new(); self.last_computed.len()]);
        self
    }

    pub fn mode(&self) -> DispatchMode {
        self.mode
    }

    pub fn scheduler(&self) -> &SchedulerConfig {
        &self.sched
    }

    pub fn take_computed(&mut self) -> Option<Vec<Vec<ComputedResult>>> {
        self.computed.take()
    }

    fn prunable(&self, u: usize) -> Option<&SlicedWeights> {
        self.sliced[u].as_ref().filter(|s| s.n < s.dim())
    }

    fn compute(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        w: &AttentionWeights,
        sliced: bool,
    ) -> Result<(AttentionResult, DecisionKind)> {
        let u = ctx.unit.index();
        let (r, cell) = match (sliced, self.prunable(u)) {
            (true, Some(sw)) => (unit_sliced_attention(x, seq_len, w, sw)?, DecisionKind::Pruned),
            _ => (unit_attention(x, seq_len, w)?, DecisionKind::Full),
        };
        if let Some(c) = self.computed.as_mut() {
            c[u].push(ComputedResult {
                tick: ctx.tick,
                result: r.clone(),
            });
        }
        Ok((r, cell))
    }

    fn reuse(
        ctx: UnitCtx,
        kind: CacheKind,
        payload: &AttentionResult,
        x: &Mat,
        seq_len: usize,
        w: &AttentionWeights,
    ) -> Result<(Mat, u64)> {
        match kind {
            CacheKind::Output => {
                if payload.output.shape() != x.shape() {
                    return Err(Error::Shape {
                        op: "reuse output",
                        left: payload.output.shape(),
                        right: x.shape(),
                    });
                }
                let _ = ctx;
                Ok((payload.output.clone(), 0))
            }
            CacheKind::Map => {
                let r = unit_attention_with_map(x, seq_len, &payload.map, w)?;
                Ok((r.output, r.macs))
            }
        }
    }

    fn attend_online(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        w: &AttentionWeights,
    ) -> Result<UnitStep> {
        let u = ctx.unit.index();
        if let Some(hit) = consume_cache(&mut self.states[u], ctx.tick) {
            let payload = match hit.kind {
                CacheKind::Output => AttentionResult {
                    map: Mat::zeros(0, 0),
                    output: hit.payload,
                    macs: 0,
                },
                CacheKind::Map => AttentionResult {
                    map: hit.payload,
                    output: Mat::zeros(0, 0),
                    macs: 0,
                },
            };
            let (output, macs) = Self::reuse(ctx, hit.kind, &payload, x, seq_len, w)?;
            let mut row = TraceRow::compute(ctx, hit.kind.decision(), macs);
            row.k = Some(hit.window);
            return Ok(UnitStep { output, row });
        }
        let want_sliced = self.last_decision[u] == Some(DecisionKind::Pruned);
        let (r, cell) = self.compute(ctx, x, seq_len, w, want_sliced)?;
        let d = edcw_decide(&mut self.states[u], &r, ctx.tick, &self.sched);
        self.last_decision[u] = Some(d.kind);
        let mut row = TraceRow::compute(ctx, cell, r.macs);
        row.decision = Some(d.kind);
        row.k = d.k;
        row.drift_output = d.drift_output;
        row.drift_map = d.drift_map;
        Ok(UnitStep {
            output: r.output,
            row,
        })
    }

    fn attend_replay(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        w: &AttentionWeights,
    ) -> Result<UnitStep> {
        let u = ctx.unit.index();
        let grid = self.grid.as_ref().expect("replay dispatcher has a grid");
        let cell = *grid[u].get(ctx.tick).ok_or_else(|| {
            Error::Config(format!("cache map does not cover step index {}", ctx.tick))
        })?;
        let k = self.windows[u][ctx.tick];
        let (output, macs) = match cell {
            DecisionKind::Full | DecisionKind::Pruned => {
                if cell == DecisionKind::Pruned && self.sliced[u].is_none() {
                    return Err(Error::MissingSliced {
                        block: ctx.unit.block,
                        kind: ctx.unit.kind.as_str(),
                    });
                }
                let (r, _) = self.compute(ctx, x, seq_len, w, cell == DecisionKind::Pruned)?;
                let out = (r.output.clone(), r.macs);
                self.last_computed[u] = Some(r);
                out
            }
            DecisionKind::ReuseOutput | DecisionKind::ReuseMap => {
                let payload = self.last_computed[u].as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "reuse cell at step index {} of block {} {} has no preceding compute",
                        ctx.tick,
                        ctx.unit.block,
                        ctx.unit.kind.as_str()
                    ))
                })?;
                let kind = if cell == DecisionKind::ReuseOutput {
                    CacheKind::Output
                } else {
                    CacheKind::Map
                };
                Self::reuse(ctx, kind, payload, x, seq_len, w)?
            }
        };
        let mut row = TraceRow::compute(ctx, cell, macs);
        row.k = k;
        Ok(UnitStep { output, row })
    }
}

impl Dispatch for Dispatcher {
    fn attend(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        weights: &AttentionWeights,
    ) -> Result<UnitStep> {
        match self.mode {
            DispatchMode::Online => self.attend_online(ctx, x, seq_len, weights),
            DispatchMode::Replay => self.attend_replay(ctx, x, seq_len, weights),
        }
    }
}

/// Window length served by each compute cell (1 + following reuse cells)
/// and by each reuse cell (that of its arming cell).
fn reuse_windows(row: &[DecisionKind]) -> Vec<Option<usize>> {
    let mut out = vec![None; row.len()];
    let mut i = 0;
    while i < row.len() {
        if row[i].is_reuse() {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < row.len() && row[j].is_reuse() {
            j += 1;
        }
        if j > i + 1 {
            for w in out.iter_mut().take(j).skip(i) {
                *w = Some(j - i);
            }
        }
        i = j;
    }
    out
}

/// Advances the denoising loop by one step under `dispatcher`, returning the
/// next state and the trace rows of that step.
pub fn dispatch_step(
    model: &Model,
    state: &LatentState,
    tick: usize,
    dispatcher: &mut Dispatcher,
) -> Result<(LatentState, Vec<TraceRow>)> {
    let mut trace = RunTrace::default();
    let next = model.step(state, tick, dispatcher, &mut trace)?;
    Ok((next, trace.rows))
}

/// Output of a dispatched run.
#[derive(Clone, Debug)]
pub struct UnicpRun {
    pub final_state: LatentState,
    pub trace: RunTrace,
    /// What executed, as a cache map.
    pub cache_map: CacheMap,
}

/// Runs the denoising loop under `dispatcher` and records the executed map.
pub fn run_dispatched(
    model: &Model,
    dispatcher: &mut Dispatcher,
    bounds: RatioBounds,
    aggregation: Aggregation,
) -> Result<UnicpRun> {
    let (final_state, trace) = model.denoise(dispatcher)?;
    let sliced_n: Vec<Option<usize>> = dispatcher.sliced.iter().map(|s| s.as_ref().map(|s| s.n)).collect();
    let cache_map = CacheMap::from_trace(
        CacheMapHeader {
            model: model.cfg.clone(),
            delta: dispatcher.sched.delta,
            window: dispatcher.sched.window,
            bounds,
            mode: dispatcher.mode,
            aggregation,
        },
        &trace,
        &sliced_n,
    )?;
    Ok(UnicpRun {
        final_state,
        trace,
        cache_map,
    })
}

const MAP_MAGIC: &str = "# unicp cache map v1";

impl CacheMap {
    /// All-full grid with no retained dimensions recorded.
    pub fn all_full(header: CacheMapHeader) -> Self {
        let units = 2 * header.model.num_blocks;
        let steps = header.model.num_steps;
        Self {
            grid: vec![vec![DecisionKind::Full; steps]; units],
            final_n: vec![None; units],
            header,
        }
    }

    /// Builds the executed map from a run trace. Retained dimensions are
    /// taken from `sliced_n`.
    pub fn from_trace(
        header: CacheMapHeader,
        trace: &RunTrace,
        sliced_n: &[Option<usize>],
    ) -> Result<Self> {
        let mut map = Self::all_full(header);
        let t = map.header.model.num_steps;
        for row in trace.attention_rows() {
            let kind = row.kind.attention().expect("attention row");
            let u = UnitId::new(row.block, kind).index();
            if row.step == 0 || row.step > t || u >= map.grid.len() {
                return Err(Error::Config(format!(
                    "trace row outside the model grid: step {} block {}",
                    row.step, row.block
                )));
            }
            map.grid[u][t - row.step] = row.cell;
        }
        for (dst, n) in map.final_n.iter_mut().zip(sliced_n) {
            *dst = *n;
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.header.model;
        let units = 2 * cfg.num_blocks;
        if self.grid.len() != units || self.final_n.len() != units {
            return Err(Error::Config(format!(
                "cache map has {} rows, expected {units}",
                self.grid.len()
            )));
        }
        for (u, row) in self.grid.iter().enumerate() {
            if row.len() != cfg.num_steps {
                return Err(Error::Config(format!(
                    "cache map row {u} has {} cells, expected {}",
                    row.len(),
                    cfg.num_steps
                )));
            }
            if let Some(n) = self.final_n[u] {
                if n == 0 || n > cfg.model_dim {
                    return Err(Error::Config(format!("final_n {n} outside 1..={}", cfg.model_dim)));
                }
            }
            if row.contains(&DecisionKind::Pruned) && self.final_n[u].is_none() {
                return Err(Error::Config(format!("row {u} prunes without a final_n")));
            }
            if row.first().is_some_and(|c| c.is_reuse()) {
                return Err(Error::Config(format!("row {u} starts with a reuse cell")));
            }
        }
        Ok(())
    }

    /// Number of cells of each kind.
    pub fn tally(&self) -> [usize; 4] {
        let mut t = [0; 4];
        for row in &self.grid {
            for c in row {
                t[DecisionKind::ALL.iter().position(|k| k == c).unwrap()] += 1;
            }
        }
        t
    }

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let c = &h.model;
        let mut out = String::new();
        let _ = writeln!(out, "{MAP_MAGIC}");
        out.push_str(&c.to_kv());
        let _ = writeln!(out, "delta = {}", h.delta);
        let _ = writeln!(out, "window = {}", h.window);
        let _ = writeln!(out, "ratio_lo = {}", h.bounds.lo);
        let _ = writeln!(out, "ratio_hi = {}", h.bounds.hi);
        let _ = writeln!(out, "mode = {}", h.mode.as_str());
        let _ = writeln!(out, "aggregation = {}", h.aggregation.as_str());
        out.push_str("\n[grid]\n");
        for u in UnitId::all(c.num_blocks) {
            let cells: String = self.grid[u.index()].iter().map(|d| d.symbol()).collect();
            let _ = writeln!(out, "{} {} {}", u.block, u.kind.as_str(), cells);
        }
        out.push_str("\n[final_n]\n");
        for u in UnitId::all(c.num_blocks) {
            if let Some(n) = self.final_n[u.index()] {
                let _ = writeln!(out, "{} {} {}", u.block, u.kind.as_str(), n);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        match lines.next() {
            Some((_, l)) if l == MAP_MAGIC => {}
            _ => return Err(err(0, format!("expected `{MAP_MAGIC}`"))),
        }
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| err(i, "expected `key = value`".into()))?;
            kv.insert(k.to_string(), (i, v.to_string()));
        }
        fn get<T: std::str::FromStr>(
            kv: &std::collections::BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<T> {
            let (i, v) = kv.get(key).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing header key `{key}`"),
            })?;
            v.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad value for `{key}`: {v}"),
            })
        }
        let model = ModelConfig {
            num_blocks: get(&kv, "num_blocks")?,
            model_dim: get(&kv, "model_dim")?,
            tokens_per_frame: get(&kv, "tokens_per_frame")?,
            num_frames: get(&kv, "num_frames")?,
            num_steps: get(&kv, "num_steps")?,
            seed: get(&kv, "seed")?,
            eta_edge: get(&kv, "eta_edge")?,
            eta_mid: get(&kv, "eta_mid")?,
            taper: get(&kv, "taper")?,
            embed_scale: get(&kv, "embed_scale")?,
        };
        let mode_s: String = get(&kv, "mode")?;
        let agg_s: String = get(&kv, "aggregation")?;
        let header = CacheMapHeader {
            delta: get(&kv, "delta")?,
            window: get(&kv, "window")?,
            bounds: RatioBounds {
                lo: get(&kv, "ratio_lo")?,
                hi: get(&kv, "ratio_hi")?,
            },
            mode: DispatchMode::parse(&mode_s)
                .ok_or_else(|| err(0, format!("unknown mode `{mode_s}`")))?,
            aggregation: Aggregation::parse(&agg_s)
                .ok_or_else(|| err(0, format!("unknown aggregation `{agg_s}`")))?,
            model,
        };
        if kv.len() != 16 {
            return Err(err(0, "unexpected header keys".into()));
        }
        header.model.validate()?;
        let mut map = Self::all_full(header);
        let units = map.grid.len();
        let mut seen = vec![false; units];

        let parse_unit = |i: usize, b: &str, k: &str| -> Result<usize> {
            let block: usize = b.parse().map_err(|_| err(i, format!("bad block `{b}`")))?;
            let kind = AttentionKind::parse(k).ok_or_else(|| err(i, format!("bad kind `{k}`")))?;
            let u = UnitId::new(block, kind).index();
            if u >= units {
                return Err(err(i, format!("block {block} out of range")));
            }
            Ok(u)
        };

        match lines.next() {
            Some((_, "[grid]")) => {}
            other => return Err(err(other.map_or(0, |o| o.0), "expected [grid]".into())),
        }
        for (i, line) in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 {
                return Err(err(i, "expected `block kind cells`".into()));
            }
            let u = parse_unit(i, f[0], f[1])?;
            let cells = f[2]
                .chars()
                .map(|c| {
                    DecisionKind::from_symbol(&c.to_string())
                        .ok_or_else(|| err(i, format!("bad cell `{c}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            map.grid[u] = cells;
            seen[u] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(err(0, "grid is missing rows".into()));
        }
        match lines.next() {
            Some((_, "[final_n]")) => {}
            other => return Err(err(other.map_or(0, |o| o.0), "expected [final_n]".into())),
        }
        for (i, line) in lines {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 {
                return Err(err(i, "expected `block kind n`".into()));
            }
            let u = parse_unit(i, f[0], f[1])?;
            map.final_n[u] = Some(f[2].parse().map_err(|_| err(i, format!("bad n `{}`", f[2])))?);
        }
        map.validate()?;
        Ok(map)
    }
}
