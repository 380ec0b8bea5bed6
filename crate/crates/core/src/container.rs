//! Little-endian binary container for latent states and sliced weights.
//!
//! Layout: magic, format version (u32), payload kind (u32), a UTF-8 metadata
//! block (u32 length + bytes), then the payload. Matrices are written as
//! rows (u32), cols (u32), and row-major f64 values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{AttentionKind, LatentState, UnitId};
use crate::pcas::{PcaBasis, SlicedWeights};

pub const MAGIC: &[u8; 8] = b"UNICPBIN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum PayloadKind {
    State = 1,
    Sliced = 2,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: PayloadKind, meta: &str) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(kind as usize);
        w.u32(meta.len());
        w.0.extend_from_slice(meta.as_bytes());
        w
    }

    fn u32(&mut self, v: usize) -> &mut Self {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
        self
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn mat(&mut self, m: &Mat) {
        self.u32(m.rows()).u32(m.cols());
        self.f64s(m.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], kind: PayloadKind) -> Result<(Self, String)> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let k = r.u32()?;
        if k != kind as usize {
            return Err(Error::Container(format!("payload kind {k}, expected {}", kind as u32)));
        }
        let len = r.u32()?;
        let meta = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Container("metadata is not UTF-8".into()))?
            .to_string();
        Ok((r, meta))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Container("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Container("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mat(&mut self) -> Result<Mat> {
        let (rows, cols) = (self.u32()?, self.u32()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Container("size overflow".into()))?;
        Mat::from_vec(rows, cols, self.f64s(n)?)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_state(state: &LatentState, meta: &str) -> Vec<u8> {
    let mut w = Writer::new(PayloadKind::State, meta);
    w.u32(state.frames).u32(state.tokens);
    w.mat(&state.values);
    w.0
}

pub fn decode_state(bytes: &[u8]) -> Result<(LatentState, String)> {
    let (mut r, meta) = Reader::open(bytes, PayloadKind::State)?;
    let (frames, tokens) = (r.u32()?, r.u32()?);
    let values = r.mat()?;
    r.finish()?;
    Ok((LatentState::new(frames, tokens, values)?, meta))
}

/// Sliced weights of every unit, in [`UnitId::index`] order.
pub fn encode_sliced(sliced: &[SlicedWeights], meta: &str) -> Vec<u8> {
    let mut w = Writer::new(PayloadKind::Sliced, meta);
    w.u32(sliced.len());
    for (i, sw) in sliced.iter().enumerate() {
        let unit = UnitId::new(i / 2, AttentionKind::ALL[i % 2]);
        w.u32(unit.block).u32(unit.kind.index()).u32(sw.dim()).u32(sw.n);
        w.u32(sw.basis.calib_steps.len());
        for &s in &sw.basis.calib_steps {
            w.u32(s);
        }
        w.f64s(&sw.basis.eigenvalues);
        w.mat(&sw.basis.r);
        w.mat(&sw.wq_sliced);
        w.mat(&sw.wk_sliced);
    }
    w.0
}

pub fn decode_sliced(bytes: &[u8]) -> Result<(Vec<SlicedWeights>, String)> {
    let (mut r, meta) = Reader::open(bytes, PayloadKind::Sliced)?;
    let units = r.u32()?;
    let mut out = Vec::with_capacity(units.min(1 << 16));
    for i in 0..units {
        let (block, kind, m, n) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        if block != i / 2 || kind != i % 2 {
            return Err(Error::Container(format!("unit {i} recorded as block {block} kind {kind}")));
        }
        let steps = r.u32()?;
        let calib_steps = (0..steps).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let eigenvalues = r.f64s(m)?;
        let basis = PcaBasis {
            r: r.mat()?,
            eigenvalues,
            calib_steps,
        };
        let wq_sliced = r.mat()?;
        let wk_sliced = r.mat()?;
        if n == 0
            || n > m
            || basis.r.shape() != (m, m)
            || wq_sliced.shape() != (m, n)
            || wk_sliced.shape() != (m, n)
        {
            return Err(Error::Container(format!("unit {i} has inconsistent shapes")));
        }
        out.push(SlicedWeights {
            n,
            wq_sliced,
            wk_sliced,
            basis: Arc::new(basis),
        });
    }
    r.finish()?;
    Ok((out, meta))
}
