//! MAC accounting, run traces, and output-quality metrics (PSNR, SSIM, relative L2).

use std::fmt::Write as _;

use crate::edcw::DecisionKind;
use crate::error::{Error, Result};
use crate::linalg::rel_l2;
use crate::model::{AttentionKind, LatentState, UnitCtx};

/// MACs of full attention over one sequence of `s` tokens at width `m`:
/// the Q, K, V and output projections plus the two `s×s` products.
pub fn macs_full_attention(s: usize, m: usize) -> u64 {
    let (s, m) = (s as u64, m as u64);
    4 * s * m * m + 2 * s * s * m
}

/// MACs of attention with query/key sliced to `n` columns.
pub fn macs_sliced(s: usize, m: usize, n: usize) -> u64 {
    let (s, m, n) = (s as u64, m as u64, n as u64);
    2 * s * m * n + 2 * s * m * m + s * s * n + s * s * m
}

/// MACs of attention that reuses a cached map: value and output projections
/// plus the map-value product.
pub fn macs_map_reuse(s: usize, m: usize) -> u64 {
    let (s, m) = (s as u64, m as u64);
    2 * s * m * m + s * s * m
}

/// Reusing a cached output skips the attention unit entirely.
pub fn macs_output_reuse(_s: usize, _m: usize) -> u64 {
    0
}

/// MACs of the `m → 2m → m` MLP over `tokens` tokens.
pub fn macs_mlp(tokens: usize, m: usize) -> u64 {
    4 * tokens as u64 * (m as u64) * (m as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKind {
    Spatial,
    Temporal,
    Mlp,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Spatial => "spatial",
            RowKind::Temporal => "temporal",
            RowKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial" => Some(RowKind::Spatial),
            "temporal" => Some(RowKind::Temporal),
            "mlp" => Some(RowKind::Mlp),
            _ => None,
        }
    }

    pub fn attention(self) -> Option<AttentionKind> {
        match self {
            RowKind::Spatial => Some(AttentionKind::Spatial),
            RowKind::Temporal => Some(AttentionKind::Temporal),
            RowKind::Mlp => None,
        }
    }
}

impl From<AttentionKind> for RowKind {
    fn from(k: AttentionKind) -> Self {
        match k {
            AttentionKind::Spatial => RowKind::Spatial,
            AttentionKind::Temporal => RowKind::Temporal,
        }
    }
}

/// One executed unit at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    /// Denoising timestep.
    pub step: usize,
    pub block: usize,
    pub kind: RowKind,
    /// What actually executed in this cell (the cache-map symbol).
    pub cell: DecisionKind,
    /// The scheduler's verdict on a freshly computed result. `None` for
    /// reuse cells and MLP rows.
    pub decision: Option<DecisionKind>,
    pub k: Option<usize>,
    pub drift_output: Option<f64>,
    pub drift_map: Option<f64>,
    pub macs: u64,
}

impl TraceRow {
    pub fn compute(ctx: UnitCtx, cell: DecisionKind, macs: u64) -> Self {
        Self {
            step: ctx.step,
            block: ctx.unit.block,
            kind: ctx.unit.kind.into(),
            cell,
            decision: None,
            k: None,
            drift_output: None,
            drift_map: None,
            macs,
        }
    }

    pub fn mlp(step: usize, block: usize, macs: u64) -> Self {
        Self {
            step,
            block,
            kind: RowKind::Mlp,
            cell: DecisionKind::Full,
            decision: None,
            k: None,
            drift_output: None,
            drift_map: None,
            macs,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceTotals {
    pub macs_total: u64,
    pub full: usize,
    pub reuse_output: usize,
    pub reuse_map: usize,
    pub pruned: usize,
}

impl TraceTotals {
    pub fn count(&self, kind: DecisionKind) -> usize {
        match kind {
            DecisionKind::Full => self.full,
            DecisionKind::ReuseOutput => self.reuse_output,
            DecisionKind::ReuseMap => self.reuse_map,
            DecisionKind::Pruned => self.pruned,
        }
    }
}

/// Rows in execution order: step, then block, then spatial/temporal/mlp.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "step,block,kind,decision,verdict,k,drift_output,drift_map,macs";

fn opt_to_string<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl RunTrace {
    pub fn totals(&self) -> TraceTotals {
        let mut t = TraceTotals::default();
        for r in &self.rows {
            t.macs_total += r.macs;
            match r.cell {
                DecisionKind::Full => t.full += 1,
                DecisionKind::ReuseOutput => t.reuse_output += 1,
                DecisionKind::ReuseMap => t.reuse_map += 1,
                DecisionKind::Pruned => t.pruned += 1,
            }
        }
        t
    }

    pub fn attention_rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| r.kind != RowKind::Mlp)
    }

    /// Executed cells of attention rows, in [`DecisionKind::ALL`] order.
    pub fn attention_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in self.attention_rows() {
            c[DecisionKind::ALL.iter().position(|k| *k == r.cell).expect("known kind")] += 1;
        }
        c
    }

    /// CSV with the fixed header; floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.block,
                r.kind.as_str(),
                r.cell.symbol(),
                r.decision.map(|d| d.symbol()).unwrap_or(""),
                opt_to_string(r.k),
                opt_to_string(r.drift_output),
                opt_to_string(r.drift_map),
                r.macs
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == TRACE_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{TRACE_HEADER}`"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(what));
            let opt_f = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| bad(what))
                }
            };
            rows.push(TraceRow {
                step: int(f[0], "step")? as usize,
                block: int(f[1], "block")? as usize,
                kind: RowKind::parse(f[2]).ok_or_else(|| bad("kind"))?,
                cell: DecisionKind::from_symbol(f[3]).ok_or_else(|| bad("decision"))?,
                decision: match f[4] {
                    "" => None,
                    v => Some(DecisionKind::from_symbol(v).ok_or_else(|| bad("verdict"))?),
                },
                k: if f[5].is_empty() {
                    None
                } else {
                    Some(int(f[5], "k")? as usize)
                },
                drift_output: opt_f(f[6], "drift_output")?,
                drift_map: opt_f(f[7], "drift_map")?,
                macs: int(f[8], "macs")?,
            });
        }
        Ok(Self { rows })
    }
}

/// PSNR returned when the two inputs are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;

fn check_shapes(a: &LatentState, b: &LatentState, op: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape {
            op,
            left: a.values.shape(),
            right: b.values.shape(),
        });
    }
    Ok(())
}

pub fn mse(a: &LatentState, b: &LatentState) -> Result<f64> {
    check_shapes(a, b, "mse")?;
    let d = a.values.data();
    let e = b.values.data();
    Ok(d.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d.len() as f64)
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`] when the MSE is zero.
pub fn psnr(a: &LatentState, b: &LatentState, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be > 0, got {peak}")));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Mean SSIM over frames, channels and sliding windows.
///
/// Each frame's `s` tokens are laid out on a `√s × √s` grid and every channel
/// is treated as one image plane. Windows are `8×8` (or the whole grid when it
/// is smaller) with uniform weights, stride 1.
pub fn ssim(a: &LatentState, b: &LatentState, dynamic_range: f64) -> Result<f64> {
    check_shapes(a, b, "ssim")?;
    if !(dynamic_range > 0.0) {
        return Err(Error::Config(format!(
            "ssim dynamic range must be > 0, got {dynamic_range}"
        )));
    }
    let side = (a.tokens as f64).sqrt().round() as usize;
    if side * side != a.tokens {
        return Err(Error::NonSquareTokens { tokens: a.tokens });
    }
    let win = SSIM_WINDOW.min(side);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let m = a.dim();
    let n = (win * win) as f64;

    let mut total = 0.0;
    let mut count = 0usize;
    let mut wa = vec![0.0; win * win];
    let mut wb = vec![0.0; win * win];
    for fr in 0..a.frames {
        for ch in 0..m {
            for y0 in 0..=side - win {
                for x0 in 0..=side - win {
                    for dy in 0..win {
                        for dx in 0..win {
                            let tok = (y0 + dy) * side + x0 + dx;
                            let row = fr * a.tokens + tok;
                            wa[dy * win + dx] = a.values.get(row, ch);
                            wb[dy * win + dx] = b.values.get(row, ch);
                        }
                    }
                    total += window_ssim(&wa, &wb, n, c1, c2);
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

fn window_ssim(a: &[f64], b: &[f64], n: f64, c1: f64, c2: f64) -> f64 {
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - mu_a, y - mu_b);
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
    num / den
}

/// Fidelity of a candidate latent against a reference latent.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rel_l2: f64,
    /// Value range (max − min) of the reference, used as PSNR peak and SSIM `L`.
    pub peak: f64,
    pub window: usize,
    pub mse: f64,
}

impl QualityReport {
    /// Compares `candidate` against `reference`. SSIM is `NaN` when the token
    /// count is not a perfect square.
    pub fn compute(reference: &LatentState, candidate: &LatentState) -> Result<Self> {
        check_shapes(reference, candidate, "compare")?;
        let data = reference.values.data();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = data.iter().copied().fold(f64::INFINITY, f64::min);
        let peak = if max > min { max - min } else { 1.0 };
        let ssim = match ssim(candidate, reference, peak) {
            Ok(v) => v,
            Err(Error::NonSquareTokens { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok(Self {
            psnr_db: psnr(candidate, reference, peak)?,
            ssim,
            rel_l2: rel_l2(&candidate.values, &reference.values)?,
            peak,
            window: SSIM_WINDOW.min((reference.tokens as f64).sqrt() as usize),
            mse: mse(candidate, reference)?,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "# unicp quality report v1\n\
             psnr_cap_db = {}\n\
             peak = {}\n\
             dynamic_range = {}\n\
             ssim_window = {}\n\
             ssim_c1 = {}\n\
             ssim_c2 = {}\n\
             mse = {}\n\
             psnr_db = {}\n\
             ssim = {}\n\
             rel_l2 = {}\n",
            PSNR_CAP_DB,
            self.peak,
            self.peak,
            self.window,
            (0.01 * self.peak).powi(2),
            (0.03 * self.peak).powi(2),
            self.mse,
            self.psnr_db,
            self.ssim,
            self.rel_l2,
        )
    }
}
