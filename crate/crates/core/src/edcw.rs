//! Error-aware dynamic cache window.
//!
//! After every freshly computed attention result the scheduler looks back
//! over the last `K` computed results of the same unit, from the farthest
//! (`k = K`) to the nearest (`k = 1`). The first distance whose relative output
//! drift is within the threshold arms an output cache; failing that, the same
//! scan over attention maps arms a map cache; failing both, the unit is
//! handed to query/key slicing. A cache armed at window `k` serves the `k - 1`
//! steps after the arming step, so one full compute covers `k` steps.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rel_l2, Mat};
use crate::model::AttentionResult;

/// What a cell of the cache map did, or what the scheduler decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecisionKind {
    Full,
    ReuseOutput,
    ReuseMap,
    Pruned,
}

impl DecisionKind {
    pub const ALL: [DecisionKind; 4] = [
        DecisionKind::Full,
        DecisionKind::ReuseOutput,
        DecisionKind::ReuseMap,
        DecisionKind::Pruned,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            DecisionKind::Full => "F",
            DecisionKind::ReuseOutput => "O",
            DecisionKind::ReuseMap => "M",
            DecisionKind::Pruned => "P",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "F" => Some(DecisionKind::Full),
            "O" => Some(DecisionKind::ReuseOutput),
            "M" => Some(DecisionKind::ReuseMap),
            "P" => Some(DecisionKind::Pruned),
            _ => None,
        }
    }

    pub fn is_reuse(self) -> bool {
        matches!(self, DecisionKind::ReuseOutput | DecisionKind::ReuseMap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheKind {
    Output,
    Map,
}

impl CacheKind {
    pub fn decision(self) -> DecisionKind {
        match self {
            CacheKind::Output => DecisionKind::ReuseOutput,
            CacheKind::Map => DecisionKind::ReuseMap,
        }
    }
}

/// Cache status flag of one unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    /// No cache active; the next computed result will be judged.
    Idle,
    /// A cache is armed.
    Armed,
    /// The unit was judged this step and found uncachable.
    Processed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Relative drift threshold.
    pub delta: f64,
    /// Search window `K`.
    pub window: usize,
    /// Per-execution-step thresholds overriding `delta`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step_delta: Option<Vec<f64>>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            window: 4,
            per_step_delta: None,
        }
    }
}

impl SchedulerConfig {
    pub fn new(delta: f64, window: usize) -> Self {
        Self {
            delta,
            window,
            per_step_delta: None,
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if let Some(d) = &self.per_step_delta {
            if d.len() != num_steps {
                return Err(Error::Config(format!(
                    "per_step_delta has {} entries, expected {num_steps}",
                    d.len()
                )));
            }
            if d.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("per_step_delta entries must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Threshold in force at execution index `tick`.
    pub fn delta_at(&self, tick: usize) -> f64 {
        self.per_step_delta
            .as_ref()
            .and_then(|d| d.get(tick).copied())
            .unwrap_or(self.delta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub kind: DecisionKind,
    /// Matched window, present exactly for the reuse kinds.
    pub k: Option<usize>,
    /// Output drift at the matched window, or the smallest one scanned.
    pub drift_output: Option<f64>,
    /// Map drift at the matched window, or the smallest one scanned.
    pub drift_map: Option<f64>,
}

/// Runs the two-tier scan over distances `K..=1`.
///
/// `output_drift(k)` and `map_drift(k)` return `None` when no computed result
/// exists `k` steps back.
pub fn scan_window(
    window: usize,
    delta: f64,
    mut output_drift: impl FnMut(usize) -> Option<f64>,
    mut map_drift: impl FnMut(usize) -> Option<f64>,
) -> Decision {
    let mut min_out: Option<f64> = None;
    for k in (1..=window).rev() {
        if let Some(d) = output_drift(k) {
            if d <= delta {
                return Decision {
                    kind: DecisionKind::ReuseOutput,
                    k: Some(k),
                    drift_output: Some(d),
                    drift_map: map_drift(k),
                };
            }
            min_out = Some(min_out.map_or(d, |m| m.min(d)));
        }
    }
    let mut min_map: Option<f64> = None;
    for k in (1..=window).rev() {
        if let Some(d) = map_drift(k) {
            if d <= delta {
                return Decision {
                    kind: DecisionKind::ReuseMap,
                    k: Some(k),
                    drift_output: min_out,
                    drift_map: Some(d),
                };
            }
            min_map = Some(min_map.map_or(d, |m| m.min(d)));
        }
    }
    Decision {
        kind: DecisionKind::Pruned,
        k: None,
        drift_output: min_out,
        drift_map: min_map,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveCache {
    pub kind: CacheKind,
    pub payload: Mat,
    pub window: usize,
    pub armed_at: usize,
    /// Last execution index served by this cache.
    pub expires_at: usize,
}

/// A cached payload handed back for one reuse step.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheHit {
    pub kind: CacheKind,
    pub payload: Mat,
    pub window: usize,
}

/// Per-unit scheduler state. Steps are execution indices (0 = first step).
#[derive(Clone, Debug)]
pub struct BlockCacheState {
    status: CacheStatus,
    capacity: usize,
    history: VecDeque<(usize, AttentionResult)>,
    active: Option<ActiveCache>,
}

impl BlockCacheState {
    pub fn new(window: usize) -> Self {
        Self {
            status: CacheStatus::Idle,
            capacity: window.max(1),
            history: VecDeque::with_capacity(window.max(1)),
            active: None,
        }
    }

    pub fn status(&self) -> CacheStatus {
        self.status
    }

    pub fn active(&self) -> Option<&ActiveCache> {
        self.active.as_ref()
    }

    /// Computed results still inside the window, oldest first.
    pub fn history(&self) -> impl Iterator<Item = (usize, &AttentionResult)> {
        self.history.iter().map(|(s, r)| (*s, r))
    }

    fn at_distance(&self, step: usize, k: usize) -> Option<&AttentionResult> {
        let target = step.checked_sub(k)?;
        self.history
            .iter()
            .find(|(s, _)| *s == target)
            .map(|(_, r)| r)
    }

    fn record(&mut self, step: usize, current: AttentionResult) {
        while let Some((s, _)) = self.history.front() {
            if step - s > self.capacity || self.history.len() >= self.capacity {
                self.history.pop_front();
            } else {
                break;
            }
        }
        self.history.push_back((step, current));
    }
}

/// Judges a freshly computed result at `step` and updates `state`.
///
/// On a hit the cache is armed with the current payload for the following
/// `k - 1` steps. `current` is appended to the history in every case.
pub fn edcw_decide(
    state: &mut BlockCacheState,
    current: &AttentionResult,
    step: usize,
    cfg: &SchedulerConfig,
) -> Decision {
    debug_assert!(state.active.is_none(), "decision taken while a cache is armed");
    state.active = None;
    state.capacity = cfg.window.max(1);
    let delta = cfg.delta_at(step);

    let decision = scan_window(
        cfg.window,
        delta,
        |k| {
            state
                .at_distance(step, k)
                .map(|h| rel_l2(&current.output, &h.output).unwrap_or(f64::INFINITY))
        },
        |k| {
            state
                .at_distance(step, k)
                .map(|h| rel_l2(&current.map, &h.map).unwrap_or(f64::INFINITY))
        },
    );

    match (decision.kind, decision.k) {
        (DecisionKind::ReuseOutput, Some(k)) | (DecisionKind::ReuseMap, Some(k)) => {
            let kind = if decision.kind == DecisionKind::ReuseOutput {
                CacheKind::Output
            } else {
                CacheKind::Map
            };
            state.active = Some(ActiveCache {
                kind,
                payload: match kind {
                    CacheKind::Output => current.output.clone(),
                    CacheKind::Map => current.map.clone(),
                },
                window: k,
                armed_at: step,
                expires_at: step + k - 1,
            });
            state.status = CacheStatus::Armed;
        }
        _ => state.status = CacheStatus::Processed,
    }
    state.record(step, current.clone());
    decision
}

/// Serves the armed cache at `step` if it is still live; clears it once `step`
/// passes the expiry and returns the unit to [`CacheStatus::Idle`].
pub fn consume_cache(state: &mut BlockCacheState, step: usize) -> Option<CacheHit> {
    match &state.active {
        Some(a) if step > a.armed_at && step <= a.expires_at => Some(CacheHit {
            kind: a.kind,
            payload: a.payload.clone(),
            window: a.window,
        }),
        Some(a) if step > a.expires_at => {
            state.active = None;
            state.status = CacheStatus::Idle;
            None
        }
        Some(_) => None,
        None => {
            if state.status == CacheStatus::Processed {
                state.status = CacheStatus::Idle;
            }
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::macs_map_reuse;

    fn result(out: f64, map: f64) -> AttentionResult {
        AttentionResult {
            map: Mat::from_rows(&[[1.0 - map, map], [0.5, 0.5]]),
            output: Mat::from_rows(&[[1.0, out], [2.0, 0.0]]),
            macs: 0,
        }
    }

    fn seeded(window: usize, entries: &[(usize, AttentionResult)]) -> BlockCacheState {
        let mut s = BlockCacheState::new(window);
        let mut entries = entries.to_vec();
        entries.sort_by_key(|(step, _)| *step);
        for (step, r) in &entries {
            s.record(*step, r.clone());
        }
        s
    }

    #[test]
    fn identical_entry_at_full_window_hits_output() {
        let cur = result(0.3, 0.2);
        let mut st = seeded(3, &[(0, cur.clone()), (1, result(5.0, 0.9)), (2, result(7.0, 0.1))]);
        let d = edcw_decide(&mut st, &cur, 3, &SchedulerConfig::new(0.0, 3));
        assert_eq!(d.kind, DecisionKind::ReuseOutput);
        assert_eq!(d.k, Some(3));
        assert_eq!(d.drift_output, Some(0.0));
        assert_eq!(st.status(), CacheStatus::Armed);
    }

    #[test]
    fn map_tier_when_outputs_drift() {
        // history outputs [[1, c], [2, 0]] with c = √(5/3) have norm √(20/3)
        // and differ from the current output by c, so every drift is 0.5
        let cur = result(0.0, 0.2);
        let off = (5.0f64 / 3.0).sqrt();
        let hist: Vec<(usize, AttentionResult)> = (1..=4)
            .map(|k| {
                let map = if k == 2 { 0.2 } else { 0.2 + 0.1 * k as f64 };
                (10 - k, result(off, map))
            })
            .collect();
        let mut st = seeded(4, &hist);
        let d = edcw_decide(&mut st, &cur, 10, &SchedulerConfig::new(0.025, 4));
        assert_eq!(d.kind, DecisionKind::ReuseMap);
        assert_eq!(d.k, Some(2));
        assert_eq!(d.drift_map, Some(0.0));
        let out = d.drift_output.unwrap();
        assert!((out - 0.5).abs() < 1e-15, "{out}");
        assert_eq!(st.active().unwrap().kind, CacheKind::Map);
    }

    #[test]
    fn empty_history_prunes() {
        let mut st = BlockCacheState::new(4);
        let d = edcw_decide(&mut st, &result(0.0, 0.0), 0, &SchedulerConfig::new(1e9, 4));
        assert_eq!(d.kind, DecisionKind::Pruned);
        assert_eq!(d.k, None);
        assert_eq!(d.drift_output, None);
        assert_eq!(st.status(), CacheStatus::Processed);
        assert_eq!(st.history().count(), 1);
    }

    #[test]
    fn largest_qualifying_window_wins() {
        let cur = result(1.0, 0.0);
        let hist: Vec<_> = (1..=4).map(|k| (8 - k, result(1.0, 0.0))).collect();
        let mut st = seeded(4, &hist);
        let d = edcw_decide(&mut st, &cur, 8, &SchedulerConfig::new(0.01, 4));
        assert_eq!((d.kind, d.k), (DecisionKind::ReuseOutput, Some(4)));
    }

    #[test]
    fn output_tier_beats_map_tier() {
        // k = 1 passes on outputs, k = 4 passes on maps: output wins
        let cur = result(1.0, 0.3);
        let hist = vec![
            (4, result(9.0, 0.3)),
            (5, result(9.0, 0.9)),
            (6, result(9.0, 0.9)),
            (7, result(1.0, 0.9)),
        ];
        let mut st = seeded(4, &hist);
        let d = edcw_decide(&mut st, &cur, 8, &SchedulerConfig::new(0.01, 4));
        assert_eq!((d.kind, d.k), (DecisionKind::ReuseOutput, Some(1)));
    }

    #[test]
    fn cache_serves_k_minus_one_following_steps() {
        // with T = 20, execution indices 10, 11, 12 are timesteps 10, 9, 8;
        // armed at index 10 with k = 3
        let cur = result(1.0, 0.0);
        let mut st = seeded(3, &[(7, cur.clone())]);
        let d = edcw_decide(&mut st, &cur, 10, &SchedulerConfig::new(0.0, 3));
        assert_eq!(d.k, Some(3));
        assert!(consume_cache(&mut st, 11).is_some());
        assert!(consume_cache(&mut st, 12).is_some());
        assert!(consume_cache(&mut st, 13).is_none());
        assert_eq!(st.status(), CacheStatus::Idle);
        assert!(st.active().is_none());

        assert!(consume_cache(&mut BlockCacheState::new(3), 8).is_none());
    }

    #[test]
    fn window_one_hit_serves_nothing() {
        let cur = result(1.0, 0.0);
        let mut st = seeded(1, &[(4, cur.clone())]);
        let d = edcw_decide(&mut st, &cur, 5, &SchedulerConfig::new(0.0, 1));
        assert_eq!(d.k, Some(1));
        assert!(consume_cache(&mut st, 6).is_none());
        assert_eq!(st.status(), CacheStatus::Idle);
    }

    #[test]
    fn map_reuse_mac_count() {
        // remaining work: X·W_v and (a·V)·W_o at s·m² each, a·V at s²·m
        let (s, m) = (5usize, 3usize);
        assert_eq!(macs_map_reuse(s, m), (2 * s * m * m + s * s * m) as u64);
    }

    #[test]
    fn history_is_bounded_and_ordered() {
        let mut st = BlockCacheState::new(2);
        let cfg = SchedulerConfig::new(0.0, 2);
        for step in 0..6 {
            let r = result(step as f64 * 10.0 + 1.0, 0.0);
            if consume_cache(&mut st, step).is_none() {
                edcw_decide(&mut st, &r, step, &cfg);
            }
            let steps: Vec<usize> = st.history().map(|(s, _)| s).collect();
            assert!(steps.len() <= 2);
            assert!(steps.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn per_step_delta_overrides() {
        let mut cfg = SchedulerConfig::new(0.0, 2);
        cfg.per_step_delta = Some(vec![0.0, 1.0, 0.0]);
        assert!(cfg.validate(3).is_ok());
        assert!(cfg.validate(4).is_err());
        assert_eq!(cfg.delta_at(1), 1.0);
        let cur = result(1.0, 0.0);
        let mut st = seeded(2, &[(0, result(1.5, 0.0))]);
        let d = edcw_decide(&mut st, &cur, 1, &cfg);
        assert_eq!(d.kind, DecisionKind::ReuseOutput);
    }

    #[test]
    fn invalid_configs() {
        assert!(SchedulerConfig::new(-0.1, 2).validate(3).is_err());
        assert!(SchedulerConfig::new(f64::NAN, 2).validate(3).is_err());
        assert!(SchedulerConfig::new(0.1, 0).validate(3).is_err());
    }
}
