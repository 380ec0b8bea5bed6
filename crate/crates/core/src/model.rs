//! A small isotropic video diffusion transformer and its denoising loop.
//!
//! Each block runs spatial attention (over the `s` tokens of one frame),
//! temporal attention (over the `f` frames at one token position) and a
//! two-layer MLP, all pre-normalized and residual. Attention calls are routed
//! through a [`Dispatch`] so a scheduler can substitute cached or sliced
//! computation per unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::edcw::DecisionKind;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, softmax_rows_in_place, Mat};
use crate::metrics::{macs_full_attention, macs_mlp, RunTrace, TraceRow};

const NORM_EPS: f64 = 1e-6;

/// Model shape, seed, and the step-size profile of the denoising loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub tokens_per_frame: usize,
    pub num_frames: usize,
    pub num_steps: usize,
    pub seed: u64,
    /// Step size at the first and last steps.
    pub eta_edge: f64,
    /// Step size across the flat middle of the schedule.
    pub eta_mid: f64,
    /// Fraction of the schedule at each end over which the step size tapers
    /// from `eta_edge` down to `eta_mid`.
    pub taper: f64,
    /// Amplitude of the sinusoidal timestep embedding.
    pub embed_scale: f64,
}

fn default_eta_edge() -> f64 {
    0.35
}
fn default_eta_mid() -> f64 {
    0.01
}
fn default_taper() -> f64 {
    0.2
}
fn default_embed_scale() -> f64 {
    0.05
}

impl Default for ModelConfig {
    /// The desk configuration: 6 blocks, m = 64, 64 tokens, 8 frames, 30 steps.
    fn default() -> Self {
        Self {
            num_blocks: 6,
            model_dim: 64,
            tokens_per_frame: 64,
            num_frames: 8,
            num_steps: 30,
            seed: 42,
            eta_edge: default_eta_edge(),
            eta_mid: default_eta_mid(),
            taper: default_taper(),
            embed_scale: default_embed_scale(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_blocks", self.num_blocks),
            ("tokens_per_frame", self.tokens_per_frame),
            ("num_frames", self.num_frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim < 4 {
            return Err(Error::Config("model_dim must be at least 4".into()));
        }
        if self.num_steps < 2 {
            return Err(Error::Config("num_steps must be at least 2".into()));
        }
        let reals = [
            ("eta_edge", self.eta_edge),
            ("eta_mid", self.eta_mid),
            ("embed_scale", self.embed_scale),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=0.5).contains(&self.taper) {
            return Err(Error::Config("taper must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Step size for execution index `tick` (0 is the first, noisiest step).
    pub fn step_size(&self, tick: usize) -> f64 {
        let u = tick as f64 / (self.num_steps - 1) as f64;
        let d = u.min(1.0 - u);
        let w = if self.taper <= 0.0 || d >= self.taper {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * d / self.taper).cos())
        };
        self.eta_mid + (self.eta_edge - self.eta_mid) * w
    }

    /// Denoising timestep for execution index `tick` (`T` down to 1).
    pub fn timestep(&self, tick: usize) -> usize {
        self.num_steps - tick
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_frame * self.num_frames
    }

    /// One `key = value` line per field, in declaration order.
    pub fn to_kv(&self) -> String {
        format!(
            "num_blocks = {}\nmodel_dim = {}\ntokens_per_frame = {}\nnum_frames = {}\n\
             num_steps = {}\nseed = {}\neta_edge = {}\neta_mid = {}\ntaper = {}\n\
             embed_scale = {}\n",
            self.num_blocks,
            self.model_dim,
            self.tokens_per_frame,
            self.num_frames,
            self.num_steps,
            self.seed,
            self.eta_edge,
            self.eta_mid,
            self.taper,
            self.embed_scale
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Spatial,
    Temporal,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 2] = [AttentionKind::Spatial, AttentionKind::Temporal];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Spatial => "spatial",
            AttentionKind::Temporal => "temporal",
        }
    }

    pub fn index(self) -> usize {
        match self {
            AttentionKind::Spatial => 0,
            AttentionKind::Temporal => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial" => Some(AttentionKind::Spatial),
            "temporal" => Some(AttentionKind::Temporal),
            _ => None,
        }
    }
}

/// One attention unit of the model: a block's spatial or temporal attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId {
    pub block: usize,
    pub kind: AttentionKind,
}

impl UnitId {
    pub fn new(block: usize, kind: AttentionKind) -> Self {
        Self { block, kind }
    }

    /// Dense index `2 * block + kind`.
    pub fn index(self) -> usize {
        2 * self.block + self.kind.index()
    }

    pub fn all(num_blocks: usize) -> impl Iterator<Item = UnitId> {
        (0..num_blocks).flat_map(|b| AttentionKind::ALL.map(|k| UnitId::new(b, k)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl AttentionWeights {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn random(m: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_q: random_mat(m, m, rng),
            w_k: random_mat(m, m, rng),
            w_v: random_mat(m, m, rng),
            w_o: random_mat(m, m, rng),
        }
    }

    /// `[w_q, w_k, w_v, w_o]`.
    pub fn mats(&self) -> [&Mat; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }
}

/// `m → 2m → m` feed-forward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spatial: AttentionWeights,
    pub temporal: AttentionWeights,
    pub mlp: MlpWeights,
}

impl Block {
    pub fn attention(&self, kind: AttentionKind) -> &AttentionWeights {
        match kind {
            AttentionKind::Spatial => &self.spatial,
            AttentionKind::Temporal => &self.temporal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub blocks: Vec<Block>,
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let scale = 1.0 / (rows as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Deterministically builds the model weights from `cfg.seed`.
///
/// Entries are standard normal scaled by `1/√m`; MLP biases start at zero.
pub fn init_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let m = cfg.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks = (0..cfg.num_blocks)
        .map(|_| Block {
            spatial: AttentionWeights::random(m, &mut rng),
            temporal: AttentionWeights::random(m, &mut rng),
            mlp: MlpWeights {
                w1: random_mat(m, 2 * m, &mut rng),
                b1: vec![0.0; 2 * m],
                w2: random_mat(2 * m, m, &mut rng),
                b2: vec![0.0; m],
            },
        })
        .collect();
    Ok(Model {
        cfg: cfg.clone(),
        blocks,
    })
}

/// Video latent of `f` frames × `s` tokens × `m` channels, stored frame-major
/// as one `(f·s) × m` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub frames: usize,
    pub tokens: usize,
    pub values: Mat,
}

impl LatentState {
    pub fn zeros(frames: usize, tokens: usize, dim: usize) -> Self {
        Self {
            frames,
            tokens,
            values: Mat::zeros(frames * tokens, dim),
        }
    }

    pub fn new(frames: usize, tokens: usize, values: Mat) -> Result<Self> {
        if values.rows() != frames * tokens {
            return Err(Error::Shape {
                op: "LatentState::new",
                left: (frames, tokens),
                right: values.shape(),
            });
        }
        Ok(Self {
            frames,
            tokens,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Initial noise `x_T` for a config, drawn from a stream independent of the weights.
    pub fn noise(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let values = Mat::from_fn(cfg.num_tokens(), cfg.model_dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        Self {
            frames: cfg.num_frames,
            tokens: cfg.tokens_per_frame,
            values,
        }
    }

    pub fn same_shape(&self, other: &LatentState) -> bool {
        self.frames == other.frames
            && self.tokens == other.tokens
            && self.values.shape() == other.values.shape()
    }
}

/// Attention map, output, and matmul MAC count of one attention call.
///
/// For a whole unit (many sequences) the maps and outputs of the individual
/// sequences are stacked vertically.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub map: Mat,
    pub output: Mat,
    pub macs: u64,
}

/// Single-sequence attention:
/// `a = softmax((X·W_q)(X·W_k)ᵀ/√m)`, `o = (a·(X·W_v))·W_o`.
pub fn attention_forward(x: &Mat, w: &AttentionWeights) -> Result<AttentionResult> {
    let m = w.dim();
    if x.cols() != m {
        return Err(Error::Shape {
            op: "attention_forward",
            left: x.shape(),
            right: w.w_q.shape(),
        });
    }
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let mut map = matmul_nt(&q, &k)?;
    scale_in_place(&mut map, 1.0 / (m as f64).sqrt());
    softmax_rows_in_place(&mut map);
    let output = project_with_map(x, &map, w)?;
    Ok(AttentionResult {
        map,
        output,
        macs: macs_full_attention(x.rows(), m),
    })
}

/// `(a·(X·W_v))·W_o` for a given map.
pub(crate) fn project_with_map(x: &Mat, map: &Mat, w: &AttentionWeights) -> Result<Mat> {
    let v = matmul(x, &w.w_v)?;
    let av = matmul(map, &v)?;
    matmul(&av, &w.w_o)
}

pub(crate) fn scale_in_place(m: &mut Mat, k: f64) {
    for v in m.data_mut() {
        *v *= k;
    }
}

/// Runs `f` over consecutive `seq_len`-row chunks of `x` and stacks the results.
pub(crate) fn per_sequence(
    x: &Mat,
    seq_len: usize,
    mut f: impl FnMut(usize, &Mat) -> Result<AttentionResult>,
) -> Result<AttentionResult> {
    if seq_len == 0 || x.rows() % seq_len != 0 {
        return Err(Error::Shape {
            op: "per_sequence",
            left: x.shape(),
            right: (seq_len, 0),
        });
    }
    let n = x.rows() / seq_len;
    let mut maps = Vec::with_capacity(n);
    let mut outs = Vec::with_capacity(n);
    let mut macs = 0;
    for i in 0..n {
        let r = f(i, &x.row_block(i * seq_len, seq_len))?;
        macs += r.macs;
        maps.push(r.map);
        outs.push(r.output);
    }
    Ok(AttentionResult {
        map: Mat::vstack(&maps)?,
        output: Mat::vstack(&outs)?,
        macs,
    })
}

/// Full attention over every `seq_len`-row sequence of a stacked unit input.
pub fn unit_attention(x: &Mat, seq_len: usize, w: &AttentionWeights) -> Result<AttentionResult> {
    per_sequence(x, seq_len, |_, xs| attention_forward(xs, w))
}

/// Recomputes values and output projection against cached stacked maps.
pub fn unit_attention_with_map(
    x: &Mat,
    seq_len: usize,
    map: &Mat,
    w: &AttentionWeights,
) -> Result<AttentionResult> {
    let m = w.dim();
    per_sequence(x, seq_len, |i, xs| {
        let a = map.row_block(i * seq_len, seq_len);
        let output = project_with_map(xs, &a, w)?;
        Ok(AttentionResult {
            map: a,
            output,
            macs: crate::metrics::macs_map_reuse(seq_len, m),
        })
    })
}

/// Position of one attention unit in the denoising loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitCtx {
    pub unit: UnitId,
    /// Execution index, 0-based.
    pub tick: usize,
    /// Denoising timestep `T - tick`.
    pub step: usize,
}

/// What a dispatcher did for one unit: the attention output to add back into
/// the residual stream and the trace row describing it.
#[derive(Clone, Debug)]
pub struct UnitStep {
    pub output: Mat,
    pub row: TraceRow,
}

/// Routes each attention unit to full, cached, or sliced computation.
pub trait Dispatch {
    /// `x` holds the normalized unit input with sequences stacked
    /// vertically, `seq_len` rows each.
    fn attend(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        weights: &AttentionWeights,
    ) -> Result<UnitStep>;
}

/// Always computes full attention.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullDispatch;

impl Dispatch for FullDispatch {
    fn attend(
        &mut self,
        ctx: UnitCtx,
        x: &Mat,
        seq_len: usize,
        weights: &AttentionWeights,
    ) -> Result<UnitStep> {
        let r = unit_attention(x, seq_len, weights)?;
        Ok(UnitStep {
            row: TraceRow::compute(ctx, DecisionKind::Full, r.macs),
            output: r.output,
        })
    }
}

/// Per-token RMS normalization.
pub fn rms_norm(x: &Mat) -> Mat {
    let mut out = x.clone();
    let m = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / m;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Reorders a frame-major latent into token-major sequences of length `f`.
fn to_temporal(h: &Mat, frames: usize, tokens: usize) -> Mat {
    let m = h.cols();
    let mut out = Mat::zeros(h.rows(), m);
    for p in 0..tokens {
        for fr in 0..frames {
            out.row_mut(p * frames + fr)
                .copy_from_slice(h.row(fr * tokens + p));
        }
    }
    out
}

fn add_temporal(h: &mut Mat, o: &Mat, frames: usize, tokens: usize) {
    for p in 0..tokens {
        for fr in 0..frames {
            let src = o.row(p * frames + fr);
            for (d, s) in h.row_mut(fr * tokens + p).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

fn add_assign(h: &mut Mat, o: &Mat) {
    for (d, s) in h.data_mut().iter_mut().zip(o.data()) {
        *d += s;
    }
}

impl Model {
    pub fn dim(&self) -> usize {
        self.cfg.model_dim
    }

    /// The normalized stacked input of `kind` attention for the residual `h`,
    /// and its sequence length.
    pub fn unit_input(&self, h: &LatentState, kind: AttentionKind) -> (Mat, usize) {
        let normed = rms_norm(&h.values);
        match kind {
            AttentionKind::Spatial => (normed, h.tokens),
            AttentionKind::Temporal => (to_temporal(&normed, h.frames, h.tokens), h.frames),
        }
    }

    fn add_unit_output(h: &mut LatentState, kind: AttentionKind, o: &Mat) {
        match kind {
            AttentionKind::Spatial => add_assign(&mut h.values, o),
            AttentionKind::Temporal => add_temporal(&mut h.values, o, h.frames, h.tokens),
        }
    }

    fn mlp(&self, block: usize, h: &mut LatentState) -> Result<u64> {
        let w = &self.blocks[block].mlp;
        let normed = rms_norm(&h.values);
        let mut hidden = matmul(&normed, &w.w1)?;
        for r in 0..hidden.rows() {
            for (v, b) in hidden.row_mut(r).iter_mut().zip(&w.b1) {
                *v = gelu(*v + b);
            }
        }
        let mut out = matmul(&hidden, &w.w2)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&w.b2) {
                *v += b;
            }
        }
        add_assign(&mut h.values, &out);
        Ok(macs_mlp(normed.rows(), self.dim()))
    }

    /// One block: spatial attention, temporal attention, MLP, each residual.
    pub fn block_forward(
        &self,
        block: usize,
        state: &LatentState,
        tick: usize,
        dispatch: &mut dyn Dispatch,
        trace: &mut RunTrace,
    ) -> Result<LatentState> {
        let mut h = state.clone();
        let step = self.cfg.timestep(tick);
        for kind in AttentionKind::ALL {
            let (x, seq_len) = self.unit_input(&h, kind);
            let ctx = UnitCtx {
                unit: UnitId::new(block, kind),
                tick,
                step,
            };
            let out = dispatch.attend(ctx, &x, seq_len, self.blocks[block].attention(kind))?;
            Self::add_unit_output(&mut h, kind, &out.output);
            trace.rows.push(out.row);
        }
        let macs = self.mlp(block, &mut h)?;
        trace.rows.push(TraceRow::mlp(step, block, macs));
        Ok(h)
    }

    /// Sinusoidal embedding of timestep `t`, one value per channel.
    pub fn timestep_embedding(&self, t: usize) -> Vec<f64> {
        let m = self.dim();
        let tau = t as f64 / self.cfg.num_steps as f64;
        (0..m)
            .map(|j| {
                let freq = 1.0 + 3.0 * (j / 2) as f64 / (m / 2) as f64;
                let phase = freq * tau * std::f64::consts::PI;
                let v = if j % 2 == 0 { phase.sin() } else { phase.cos() };
                self.cfg.embed_scale * v
            })
            .collect()
    }

    fn embed(&self, x: &LatentState, tick: usize) -> LatentState {
        let emb = self.timestep_embedding(self.cfg.timestep(tick));
        let mut h = x.clone();
        for r in 0..h.values.rows() {
            for (v, e) in h.values.row_mut(r).iter_mut().zip(&emb) {
                *v += e;
            }
        }
        h
    }

    /// The model's update direction at execution index `tick`.
    pub fn predict(
        &self,
        x: &LatentState,
        tick: usize,
        dispatch: &mut dyn Dispatch,
        trace: &mut RunTrace,
    ) -> Result<LatentState> {
        let mut h = self.embed(x, tick);
        for b in 0..self.blocks.len() {
            h = self.block_forward(b, &h, tick, dispatch, trace)?;
        }
        h.values = rms_norm(&h.values);
        Ok(h)
    }

    /// Scheduler-free forward pass, used as the reference for dispatchers.
    pub fn predict_reference(&self, x: &LatentState, tick: usize) -> Result<LatentState> {
        let mut h = self.embed(x, tick);
        for b in 0..self.blocks.len() {
            for kind in AttentionKind::ALL {
                let (xin, seq_len) = self.unit_input(&h, kind);
                let r = unit_attention(&xin, seq_len, self.blocks[b].attention(kind))?;
                Self::add_unit_output(&mut h, kind, &r.output);
            }
            self.mlp(b, &mut h)?;
        }
        h.values = rms_norm(&h.values);
        Ok(h)
    }

    fn apply_step(&self, x: &mut LatentState, eps: &LatentState, tick: usize) -> Result<()> {
        let eta = self.cfg.step_size(tick);
        for (v, e) in x.values.data_mut().iter_mut().zip(eps.values.data()) {
            *v -= eta * e;
        }
        if !x.values.is_finite() {
            return Err(Error::NonFinite {
                step: self.cfg.timestep(tick),
                what: "latent state".into(),
            });
        }
        Ok(())
    }

    /// One denoising update at execution index `tick`.
    pub fn step(
        &self,
        x: &LatentState,
        tick: usize,
        dispatch: &mut dyn Dispatch,
        trace: &mut RunTrace,
    ) -> Result<LatentState> {
        let eps = self.predict(x, tick, dispatch, trace)?;
        let mut next = x.clone();
        self.apply_step(&mut next, &eps, tick)?;
        Ok(next)
    }

    /// Runs `x_{t-1} = x_t - η(t)·model(x_t, t)` for `t = T..1` from the seeded noise.
    pub fn denoise(&self, dispatch: &mut dyn Dispatch) -> Result<(LatentState, RunTrace)> {
        let mut x = LatentState::noise(&self.cfg);
        let mut trace = RunTrace::default();
        for tick in 0..self.cfg.num_steps {
            x = self.step(&x, tick, dispatch, &mut trace)?;
        }
        Ok((x, trace))
    }

    /// [`Model::denoise`] without any dispatcher or trace.
    pub fn denoise_reference(&self) -> Result<LatentState> {
        let mut x = LatentState::noise(&self.cfg);
        for tick in 0..self.cfg.num_steps {
            let eps = self.predict_reference(&x, tick)?;
            self.apply_step(&mut x, &eps, tick)?;
        }
        Ok(x)
    }
}

/// Builds the model for `cfg` and runs the denoising loop under `dispatch`.
pub fn denoise_run(
    cfg: &ModelConfig,
    dispatch: &mut dyn Dispatch,
) -> Result<(LatentState, RunTrace)> {
    init_model(cfg)?.denoise(dispatch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_l2;
    use crate::metrics::RowKind;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            model_dim: 4,
            tokens_per_frame: 3,
            num_frames: 2,
            num_steps: 3,
            seed,
            ..ModelConfig::default()
        }
    }

    fn weight_bytes(model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &model.blocks {
            for w in [&b.spatial, &b.temporal] {
                for m in w.mats() {
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_model(&tiny(5)).unwrap();
        let b = init_model(&tiny(5)).unwrap();
        assert_eq!(weight_bytes(&a), weight_bytes(&b));
        for blk in &a.blocks {
            for w in blk.spatial.mats().into_iter().chain(blk.temporal.mats()) {
                assert_eq!(w.shape(), (4, 4));
            }
        }
        let c = init_model(&tiny(6)).unwrap();
        assert_ne!(weight_bytes(&a), weight_bytes(&c));
    }

    #[test]
    fn validate_rejects_degenerate_configs() {
        let mut cfg = tiny(1);
        cfg.model_dim = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(1);
        cfg.num_steps = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(1);
        cfg.num_frames = 0;
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn attention_on_zero_input_is_uniform() {
        let model = init_model(&tiny(1)).unwrap();
        let r = attention_forward(&Mat::zeros(3, 4), &model.blocks[0].spatial).unwrap();
        for &v in r.map.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(r.output.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.macs, 4 * 3 * 16 + 2 * 9 * 4);
    }

    #[test]
    fn attention_singleton_sequence() {
        let model = init_model(&tiny(2)).unwrap();
        let w = &model.blocks[0].spatial;
        let x = Mat::from_rows(&[[0.3, -1.0, 2.0, 0.5]]);
        let r = attention_forward(&x, w).unwrap();
        assert_eq!(r.map.data(), &[1.0]);
        let expect = matmul(&matmul(&x, &w.w_v).unwrap(), &w.w_o).unwrap();
        assert!(rel_l2(&r.output, &expect).unwrap() < 1e-15);
    }

    #[test]
    fn attention_rejects_wrong_width() {
        let model = init_model(&tiny(2)).unwrap();
        assert!(attention_forward(&Mat::zeros(3, 5), &model.blocks[0].spatial).is_err());
    }

    #[test]
    fn step_size_profile_is_u_shaped() {
        let cfg = ModelConfig::default();
        let first = cfg.step_size(0);
        let last = cfg.step_size(cfg.num_steps - 1);
        let mid = cfg.step_size(cfg.num_steps / 2);
        assert!((first - cfg.eta_edge).abs() < 1e-12);
        assert!((last - cfg.eta_edge).abs() < 1e-12);
        assert!((mid - cfg.eta_mid).abs() < 1e-12);
        for tick in 0..cfg.num_steps / 2 {
            assert!(cfg.step_size(tick) >= cfg.step_size(tick + 1));
        }
    }

    #[test]
    fn zero_state_passes_through_block() {
        let model = init_model(&tiny(3)).unwrap();
        let state = LatentState::zeros(2, 3, 4);
        let mut trace = RunTrace::default();
        let out = model
            .block_forward(0, &state, 0, &mut FullDispatch, &mut trace)
            .unwrap();
        assert_eq!(out, state);
        assert_eq!(trace.rows.len(), 3);
    }

    #[test]
    fn single_frame_temporal_attention_is_identity_map() {
        let cfg = ModelConfig {
            num_frames: 1,
            ..tiny(4)
        };
        let model = init_model(&cfg).unwrap();
        let x = LatentState::noise(&cfg);
        let (xin, seq_len) = model.unit_input(&x, AttentionKind::Temporal);
        assert_eq!(seq_len, 1);
        let r = unit_attention(&xin, seq_len, &model.blocks[0].temporal).unwrap();
        assert!(r.map.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn temporal_layout_round_trips() {
        let h = Mat::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let t = to_temporal(&h, 2, 3);
        // token 1 of frame 0 sits in row 1 of the latent and row 2 of the temporal view
        assert_eq!(t.row(2), h.row(1));
        let mut back = Mat::zeros(6, 2);
        add_temporal(&mut back, &t, 2, 3);
        assert_eq!(back, h);
    }

    #[test]
    fn zero_step_size_is_a_fixed_point() {
        let cfg = ModelConfig {
            eta_edge: 0.0,
            eta_mid: 0.0,
            ..tiny(9)
        };
        let (x, _) = denoise_run(&cfg, &mut FullDispatch).unwrap();
        assert_eq!(x, LatentState::noise(&cfg));
    }

    #[test]
    fn full_dispatch_matches_reference_bitwise() {
        let cfg = tiny(11);
        let model = init_model(&cfg).unwrap();
        let (x, trace) = model.denoise(&mut FullDispatch).unwrap();
        assert_eq!(x, model.denoise_reference().unwrap());
        let attention_rows = trace.rows.iter().filter(|r| r.kind != RowKind::Mlp).count();
        assert_eq!(attention_rows, cfg.num_steps * cfg.num_blocks * 2);
    }
}
