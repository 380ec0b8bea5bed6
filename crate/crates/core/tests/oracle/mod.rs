//! Brute-force reference implementations used to check the library.
//! Shared by the core integration tests and the CLI acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;

use unicp::edcw::DecisionKind;
use unicp::linalg::{sym_eig, Mat};
use unicp::metrics::{RowKind, TraceRow};
use unicp::model::{
    unit_attention, AttentionWeights, Dispatch, LatentState, ModelConfig, UnitCtx, UnitStep,
};
use unicp::pcas::{unit_sliced_attention, SlicedWeights};
use unicp::Result;

/// `‖a − b‖ / max(‖b‖, 1e-12)` on raw slices.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    num.sqrt() / den.sqrt().max(1e-12)
}

#[derive(Clone, Debug)]
pub struct Computed {
    pub tick: usize,
    pub output: Vec<f64>,
    pub map: Vec<f64>,
}

/// One decision of the reference scheduler: scan `k = K..1` over computed
/// results `k` steps back, outputs first, then maps.
pub fn decide(
    history: &[Computed],
    output: &[f64],
    map: &[f64],
    tick: usize,
    delta: f64,
    window: usize,
) -> (DecisionKind, Option<usize>) {
    let back = |k: usize| {
        let t = tick.checked_sub(k)?;
        history.iter().find(|h| h.tick == t)
    };
    for k in (1..=window).rev() {
        if let Some(h) = back(k) {
            if rel(output, &h.output) <= delta {
                return (DecisionKind::ReuseOutput, Some(k));
            }
        }
    }
    for k in (1..=window).rev() {
        if let Some(h) = back(k) {
            if rel(map, &h.map) <= delta {
                return (DecisionKind::ReuseMap, Some(k));
            }
        }
    }
    (DecisionKind::Pruned, None)
}

/// Whole-sequence reference run: a hit at window `k` skips the next `k - 1`
/// steps. Returns, per step, the verdict on computed steps (`None` on
/// skipped ones).
pub fn simulate(
    outputs: &[Vec<f64>],
    maps: &[Vec<f64>],
    delta: f64,
    window: usize,
) -> Vec<Option<(DecisionKind, Option<usize>)>> {
    let mut history: Vec<Computed> = Vec::new();
    let mut out = Vec::new();
    let mut skip_until = None;
    for t in 0..outputs.len() {
        if let Some(end) = skip_until {
            if t <= end {
                out.push(None);
                continue;
            }
        }
        let d = decide(&history, &outputs[t], &maps[t], t, delta, window);
        if let (DecisionKind::ReuseOutput | DecisionKind::ReuseMap, Some(k)) = d {
            skip_until = Some(t + k - 1);
        }
        history.push(Computed {
            tick: t,
            output: outputs[t].clone(),
            map: maps[t].clone(),
        });
        out.push(Some(d));
    }
    out
}

/// Wraps a dispatcher and re-judges every computed unit result with
/// [`decide`], against a history rebuilt by recomputing each executed cell.
pub struct ConformanceProbe<'a, D: Dispatch> {
    pub inner: D,
    pub sliced: &'a [Option<SlicedWeights>],
    pub delta: f64,
    pub window: usize,
    history: HashMap<usize, Vec<Computed>>,
    pub checked: usize,
    pub mismatches: Vec<String>,
}

impl<'a, D: Dispatch> ConformanceProbe<'a, D> {
    pub fn new(inner: D, sliced: &'a [Option<SlicedWeights>], delta: f64, window: usize) -> Self {
        Self {
            inner,
            sliced,
            delta,
            window,
            history: HashMap::new(),
            checked: 0,
            mismatches: Vec::new(),
        }
    }
}

impl<D: Dispatch> Dispatch for ConformanceProbe<'_, D> {
    fn attend(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        weights: &AttentionWeights,
    ) -> Result<UnitStep> {
        let step = self.inner.attend(ctx, x, seq_len, weights)?;
        let Some(verdict) = step.row.decision else {
            return Ok(step);
        };
        let u = ctx.unit.index();
        let r = match step.row.cell {
            DecisionKind::Pruned => {
                let sw = self.sliced[u].as_ref().expect("pruned cell has sliced weights");
                unit_sliced_attention(x, seq_len, weights, sw)?
            }
            _ => unit_attention(x, seq_len, weights)?,
        };
        let history = self.history.entry(u).or_default();
        let (kind, k) = decide(
            history,
            r.output.data(),
            r.map.data(),
            ctx.tick,
            self.delta,
            self.window,
        );
        self.checked += 1;
        if kind != verdict || k != step.row.k {
            self.mismatches.push(format!(
                "tick {} block {} {}: got {:?}/{:?}, reference {:?}/{:?}",
                ctx.tick,
                ctx.unit.block,
                ctx.unit.kind.as_str(),
                verdict,
                step.row.k,
                kind,
                k
            ));
        }
        if r.output.data() != step.output.data() {
            self.mismatches.push(format!("tick {} unit {u}: recomputed output differs", ctx.tick));
        }
        history.retain(|h| ctx.tick - h.tick < self.window);
        history.push(Computed {
            tick: ctx.tick,
            output: r.output.into_vec(),
            map: r.map.into_vec(),
        });
        Ok(step)
    }
}

/// MACs of one trace row from first principles: `s` = sequence length,
/// `q` = number of sequences in the unit.
pub fn row_macs(cfg: &ModelConfig, row: &TraceRow, final_n: &[Option<usize>]) -> u64 {
    let m = cfg.model_dim as u64;
    let (s, q) = match row.kind {
        RowKind::Spatial => (cfg.tokens_per_frame as u64, cfg.num_frames as u64),
        RowKind::Temporal => (cfg.num_frames as u64, cfg.tokens_per_frame as u64),
        RowKind::Mlp => {
            let tokens = (cfg.tokens_per_frame * cfg.num_frames) as u64;
            // m → 2m and 2m → m
            return tokens * m * 2 * m + tokens * 2 * m * m;
        }
    };
    let per_seq = match row.cell {
        // q, k, v, o projections + scores + map·v
        DecisionKind::Full => 4 * s * m * m + s * s * m + s * s * m,
        DecisionKind::ReuseOutput => 0,
        // v, o projections + map·v
        DecisionKind::ReuseMap => 2 * s * m * m + s * s * m,
        DecisionKind::Pruned => {
            let unit = 2 * row.block + usize::from(row.kind == RowKind::Temporal);
            let n = final_n[unit].expect("pruned row has n") as u64;
            2 * s * m * n + 2 * s * m * m + s * s * n + s * s * m
        }
    };
    q * per_seq
}

/// Per-step minimal passing retained dimension by testing every `n` in
/// `[ceil(m(1−hi)), floor(m(1−lo))]`: the smallest `n` such that every
/// dimension from it up to the top of the range passes. `m` if none pass.
pub fn exhaustive_min_n(errors_by_n: &[(usize, f64)], delta: f64, m: usize) -> usize {
    let mut sorted = errors_by_n.to_vec();
    sorted.sort_by(|a, b| b.0.cmp(&a.0));
    let mut best = m;
    for (n, e) in sorted {
        if e > delta {
            break;
        }
        best = n;
    }
    best
}

/// Sliced attention output over stacked sequences, computed with plain loops
/// from the unit weights and the leading `n` eigenvectors of `Σ XᵀX`.
pub fn sliced_output(x: &Mat, seq_len: usize, w: &AttentionWeights, cov_inputs: &[Mat], n: usize) -> Vec<f64> {
    let m = x.cols();
    let mut cov = Mat::zeros(m, m);
    for xi in cov_inputs {
        for r in 0..xi.rows() {
            let row = xi.row(r);
            for i in 0..m {
                for j in 0..m {
                    cov.set(i, j, cov.get(i, j) + row[i] * row[j]);
                }
            }
        }
    }
    let eig = sym_eig(&cov).expect("eigendecomposition");
    let proj = |wm: &Mat, row: &[f64]| -> Vec<f64> {
        // (row · W) · R_n
        let full: Vec<f64> = (0..m).map(|j| (0..m).map(|i| row[i] * wm.get(i, j)).sum()).collect();
        (0..n)
            .map(|c| (0..m).map(|j| full[j] * eig.eigenvectors.get(j, c)).sum())
            .collect()
    };
    let lin = |wm: &Mat, row: &[f64]| -> Vec<f64> {
        (0..m).map(|j| (0..m).map(|i| row[i] * wm.get(i, j)).sum()).collect()
    };
    let mut out = Vec::with_capacity(x.rows() * m);
    for start in (0..x.rows()).step_by(seq_len) {
        let rows: Vec<&[f64]> = (start..start + seq_len).map(|r| x.row(r)).collect();
        let zq: Vec<Vec<f64>> = rows.iter().map(|r| proj(&w.w_q, r)).collect();
        let zk: Vec<Vec<f64>> = rows.iter().map(|r| proj(&w.w_k, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&w.w_v, r)).collect();
        for i in 0..seq_len {
            let scores: Vec<f64> = (0..seq_len)
                .map(|j| zq[i].iter().zip(&zk[j]).map(|(a, b)| a * b).sum::<f64>() / (m as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..m).map(|c| (0..seq_len).map(|j| e[j] / z * v[j][c]).sum()).collect();
            out.extend(lin(&w.w_o, &mixed));
        }
    }
    out
}

/// Mean squared error, PSNR against the reference value range, and SSIM on
/// each frame's token grid per channel, written from the textbook formulas.
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub rel_l2: f64,
}

pub fn metrics(reference: &LatentState, candidate: &LatentState) -> Metrics {
    let r = reference.values.data();
    let c = candidate.values.data();
    let mse = r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.len() as f64;
    let hi = r.iter().copied().fold(f64::MIN, f64::max);
    let lo = r.iter().copied().fold(f64::MAX, f64::min);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let psnr = if mse == 0.0 { 99.0 } else { 20.0 * range.log10() - 10.0 * mse.log10() };

    let side = (reference.tokens as f64).sqrt() as usize;
    let win = side.min(8);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let m = reference.dim();
    let mut scores = Vec::new();
    for f in 0..reference.frames {
        for ch in 0..m {
            let px = |v: &LatentState, y: usize, x: usize| v.values.get(f * v.tokens + y * side + x, ch);
            for y0 in 0..=side - win {
                for x0 in 0..=side - win {
                    let mut a = Vec::new();
                    let mut b = Vec::new();
                    for y in y0..y0 + win {
                        for x in x0..x0 + win {
                            a.push(px(candidate, y, x));
                            b.push(px(reference, y, x));
                        }
                    }
                    let k = a.len() as f64;
                    let ma = a.iter().sum::<f64>() / k;
                    let mb = b.iter().sum::<f64>() / k;
                    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / k;
                    let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / k;
                    let cv = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / k;
                    scores.push(
                        ((2.0 * ma * mb + c1) * (2.0 * cv + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                    );
                }
            }
        }
    }
    Metrics {
        mse,
        psnr,
        ssim: scores.iter().sum::<f64>() / scores.len() as f64,
        rel_l2: rel(c, r),
    }
}
