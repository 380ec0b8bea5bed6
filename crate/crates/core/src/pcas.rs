//! PCA-based query/key slicing.
//!
//! The eigenvectors `R` of the pooled input covariance `Σ XᵀX` define a
//! rotation of the channel space in which the leading `n` directions carry
//! the most input energy. Folding `R·D` (its first `n` columns) into `W_q` and
//! `W_k` gives `Z_q = X·W_q·R·D` and `Z_k = X·W_k·R·D`, and the attention
//! scores are taken as `Z_q·Z_kᵀ`. Because `R` is orthogonal the scores are
//! exact at `n = m`; below that the query/key products shrink from `m` to `n`
//! columns. Values and the output projection are never sliced.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{gram, matmul, matmul_nt, softmax_rows_in_place, sym_eig, Mat};
use crate::metrics::macs_sliced;
use crate::model::{per_sequence, project_with_map, scale_in_place, AttentionResult, AttentionWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// Orthonormal eigenvectors as columns, by nonincreasing eigenvalue.
    pub r: Mat,
    pub eigenvalues: Vec<f64>,
    /// Execution indices whose inputs were pooled.
    pub calib_steps: Vec<usize>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    /// `R·D`, the leading `n` eigenvectors.
    pub fn leading(&self, n: usize) -> Mat {
        self.r.leading_cols(n)
    }

    /// The rank-`n` projector `R·D·Dᵀ·Rᵀ`, invariant to the choice of basis
    /// within repeated eigenvalues.
    pub fn projector(&self, n: usize) -> Mat {
        let rd = self.leading(n);
        matmul_nt(&rd, &rd).expect("square by construction")
    }
}

/// Eigenbasis of the pooled covariance `Σ XᵀX` of `inputs`.
pub fn compute_basis(inputs: &[Mat]) -> Result<PcaBasis> {
    compute_basis_at(inputs, Vec::new())
}

/// [`compute_basis`] recording which steps the inputs came from.
pub fn compute_basis_at(inputs: &[Mat], calib_steps: Vec<usize>) -> Result<PcaBasis> {
    let first = inputs.first().ok_or(Error::EmptyCalibration)?;
    let m = first.cols();
    let mut cov = Mat::zeros(m, m);
    for x in inputs {
        if x.cols() != m {
            return Err(Error::Shape {
                op: "compute_basis",
                left: first.shape(),
                right: x.shape(),
            });
        }
        cov = cov.add(&gram(x))?;
    }
    let eig = sym_eig(&cov)?;
    Ok(PcaBasis {
        r: eig.eigenvectors,
        eigenvalues: eig.eigenvalues,
        calib_steps,
    })
}

/// Query/key weights folded with the leading `n` eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicedWeights {
    pub n: usize,
    /// `W_q·R·D`, `m × n`.
    pub wq_sliced: Mat,
    /// `W_k·R·D`, `m × n`.
    pub wk_sliced: Mat,
    pub basis: Arc<PcaBasis>,
}

impl SlicedWeights {
    pub fn dim(&self) -> usize {
        self.wq_sliced.rows()
    }
}

pub fn slice_weights(w: &AttentionWeights, basis: Arc<PcaBasis>, n: usize) -> Result<SlicedWeights> {
    let m = w.dim();
    if n == 0 || n > m {
        return Err(Error::Config(format!("retained dimension {n} outside 1..={m}")));
    }
    if basis.dim() != m {
        return Err(Error::Shape {
            op: "slice_weights",
            left: w.w_q.shape(),
            right: basis.r.shape(),
        });
    }
    let rd = basis.leading(n);
    Ok(SlicedWeights {
        n,
        wq_sliced: matmul(&w.w_q, &rd)?,
        wk_sliced: matmul(&w.w_k, &rd)?,
        basis,
    })
}

/// Attention over one sequence with sliced query/key:
/// `a = softmax(Z_q·Z_kᵀ/√m)` with the original `m`; values unchanged.
pub fn sliced_attention_forward(
    x: &Mat,
    w: &AttentionWeights,
    sw: &SlicedWeights,
) -> Result<AttentionResult> {
    let m = w.dim();
    if x.cols() != m || sw.dim() != m {
        return Err(Error::Shape {
            op: "sliced_attention_forward",
            left: x.shape(),
            right: sw.wq_sliced.shape(),
        });
    }
    let zq = matmul(x, &sw.wq_sliced)?;
    let zk = matmul(x, &sw.wk_sliced)?;
    let mut map = matmul_nt(&zq, &zk)?;
    scale_in_place(&mut map, 1.0 / (m as f64).sqrt());
    softmax_rows_in_place(&mut map);
    let output = project_with_map(x, &map, w)?;
    Ok(AttentionResult {
        map,
        output,
        macs: macs_sliced(x.rows(), m, sw.n),
    })
}

/// Sliced attention over every `seq_len`-row sequence of a stacked unit input.
pub fn unit_sliced_attention(
    x: &Mat,
    seq_len: usize,
    w: &AttentionWeights,
    sw: &SlicedWeights,
) -> Result<AttentionResult> {
    per_sequence(x, seq_len, |_, xs| sliced_attention_forward(xs, w, sw))
}

/// `‖X − X·R·D·Dᵀ·Rᵀ‖_F`.
pub fn reconstruction_error(x: &Mat, basis: &PcaBasis, n: usize) -> Result<f64> {
    if x.cols() != basis.dim() {
        return Err(Error::Shape {
            op: "reconstruction_error",
            left: x.shape(),
            right: basis.r.shape(),
        });
    }
    if n > basis.dim() {
        return Err(Error::Config(format!(
            "retained dimension {n} exceeds {}",
            basis.dim()
        )));
    }
    let rd = basis.leading(n);
    let z = matmul(x, &rd)?;
    let recon = matmul_nt(&z, &rd)?;
    Ok(x.sub(&recon)?.frobenius())
}
