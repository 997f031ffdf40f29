//! Compressive-sensing view of the sketch.
//!
//! Ingesting a stream *is* a linear measurement: with one column per
//! registered key holding a single ±1/0/1 entry per counter row (at that
//! key's hashed position), the counter array satisfies `y = A·x` exactly,
//! where `x` is the per-key volume that entered the sketch. `A` is never
//! materialized on the hot path — [`SketchOperator`] stores just the hashed
//! positions (and signs, in signed mode) and exposes matrix-free
//! `apply`/`apply_transpose`. Dense materialization exists for toy-scale
//! diagnostics only, guarded by a size limit.
//!
//! Also here: a pivoted-elimination rank diagnostic for stacked transformed
//! operators (the identifiability condition behind ground-truth-free
//! training) and a closed-form MAP per-key point estimate under a Gaussian
//! prior.

use crate::error::{Error, Result};
use crate::hash::{hash_bytes, sign_of, Seeds};
use crate::key::KeyBytes;

/// Matrix-free linear operator. `column` has a generic (allocating) default
/// used only at diagnostic scales; sparse implementations override it.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `y = A x`; `x.len() == cols()`, `y.len() == rows()`. Overwrites `y`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `x = Aᵀ y`; overwrites `x`.
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]);

    fn column(&self, i: usize, out: &mut [f64]) {
        let mut e = vec![0.0; self.cols()];
        e[i] = 1.0;
        self.apply(&e, out);
    }
}

/// Whether counter updates carry a ±1 sign (count-sketch) or are plain
/// increments (count-min).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignMode {
    Unsigned,
    Signed,
}

/// The implicit measurement operator for an ordered key list. Column `i`
/// has `depth` nonzeros: row-block `j` at position `H_j(key_i)`, value
/// `sign_j(key_i)` (always `+1` unsigned).
///
/// The operator is a frozen view: it is valid for the key ordering it was
/// built from and must be rebuilt when the registry grows.
#[derive(Debug, Clone)]
pub struct SketchOperator {
    depth: usize,
    width: usize,
    n: usize,
    /// `n * depth` hashed positions, key-major: `positions[i*depth + j]`.
    positions: Vec<u32>,
    /// `n * depth` signs, same layout (all `+1` in unsigned mode).
    signs: Vec<i8>,
    mode: SignMode,
}

/// Dense materialization refuses to allocate more entries than this.
pub const MATERIALIZE_GUARD: usize = 4_000_000;

impl SketchOperator {
    pub fn new(
        keys: &[KeyBytes],
        depth: usize,
        width: usize,
        seeds: &Seeds,
        mode: SignMode,
    ) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::Shape("operator needs depth >= 1 and width >= 1".into()));
        }
        if seeds.rows.len() < depth || seeds.signs.len() < depth {
            return Err(Error::Shape(format!(
                "need {depth} row/sign seeds, have {}/{}",
                seeds.rows.len(),
                seeds.signs.len()
            )));
        }
        let n = keys.len();
        let mut positions = Vec::with_capacity(n * depth);
        let mut signs = Vec::with_capacity(n * depth);
        for key in keys {
            for j in 0..depth {
                positions.push((hash_bytes(seeds.rows[j], key.as_slice()) % width as u64) as u32);
                signs.push(match mode {
                    SignMode::Unsigned => 1,
                    SignMode::Signed => sign_of(seeds.signs[j], key.as_slice()) as i8,
                });
            }
        }
        Ok(SketchOperator { depth, width, n, positions, signs, mode })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> SignMode {
        self.mode
    }

    /// Hashed position of key `i` in row `j`.
    pub fn position(&self, i: usize, j: usize) -> usize {
        self.positions[i * self.depth + j] as usize
    }

    pub fn sign(&self, i: usize, j: usize) -> i64 {
        self.signs[i * self.depth + j] as i64
    }

    /// Exact integer form of `y = A x` (unsigned mode): this reproduces the
    /// counter array bit-for-bit from per-key sketch volumes.
    pub fn apply_counts(&self, x: &[u64]) -> Result<Vec<u64>> {
        if self.mode != SignMode::Unsigned {
            return Err(Error::Shape("apply_counts is defined for unsigned operators".into()));
        }
        if x.len() != self.n {
            return Err(Error::Shape(format!("x has {} entries, operator has {}", x.len(), self.n)));
        }
        let mut y = vec![0u64; self.depth * self.width];
        for i in 0..self.n {
            let v = x[i];
            if v == 0 {
                continue;
            }
            for j in 0..self.depth {
                y[j * self.width + self.position(i, j)] += v;
            }
        }
        Ok(y)
    }

    /// Dense copy for diagnostics; refuses at non-toy sizes.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        let entries = self.rows() * self.cols();
        if entries > MATERIALIZE_GUARD {
            return Err(Error::SizeGuard(format!(
                "dense {}x{} operator ({} entries) exceeds {MATERIALIZE_GUARD}",
                self.rows(),
                self.cols(),
                entries
            )));
        }
        let mut m = DenseMatrix::zeros(self.rows(), self.cols());
        for i in 0..self.n {
            for j in 0..self.depth {
                *m.at_mut(j * self.width + self.position(i, j), i) = self.sign(i, j) as f64;
            }
        }
        Ok(m)
    }
}

impl LinearOperator for SketchOperator {
    fn rows(&self) -> usize {
        self.depth * self.width
    }

    fn cols(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols());
        debug_assert_eq!(y.len(), self.rows());
        y.fill(0.0);
        for i in 0..self.n {
            let v = x[i];
            if v == 0.0 {
                continue;
            }
            for j in 0..self.depth {
                y[j * self.width + self.position(i, j)] += self.sign(i, j) as f64 * v;
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows());
        debug_assert_eq!(x.len(), self.cols());
        for i in 0..self.n {
            let mut acc = 0.0;
            for j in 0..self.depth {
                acc += self.sign(i, j) as f64 * y[j * self.width + self.position(i, j)];
            }
            x[i] = acc;
        }
    }

    fn column(&self, i: usize, out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.depth {
            out[j * self.width + self.position(i, j)] = self.sign(i, j) as f64;
        }
    }
}

/// Row-major dense matrix for toy-scale diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(DenseMatrix { rows: r, cols: c, data: rows.concat() })
    }

    /// Identity-plus-diagonal constructors live with the transforms; here
    /// only the generic pieces.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            *m.at_mut(i, i) = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * other`
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    *out.at_mut(i, j) += a * other.at(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Numerical rank by Gaussian elimination with partial pivoting;
    /// pivots below `tol` count as zero.
    pub fn rank(&self, tol: f64) -> usize {
        let mut m = self.clone();
        let mut rank = 0;
        let mut pivot_row = 0;
        for col in 0..m.cols {
            if pivot_row >= m.rows {
                break;
            }
            let (best_row, best_val) = (pivot_row..m.rows)
                .map(|r| (r, m.at(r, col).abs()))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if best_val <= tol {
                continue;
            }
            m.data.swap_chunks(pivot_row, best_row, m.cols);
            let pivot = m.at(pivot_row, col);
            for r in pivot_row + 1..m.rows {
                let factor = m.at(r, col) / pivot;
                if factor == 0.0 {
                    continue;
                }
                for c in col..m.cols {
                    let v = m.at(pivot_row, c);
                    *m.at_mut(r, c) -= factor * v;
                }
            }
            pivot_row += 1;
            rank += 1;
        }
        rank
    }
}

trait SwapChunks {
    fn swap_chunks(&mut self, a: usize, b: usize, chunk: usize);
}

impl SwapChunks for Vec<f64> {
    fn swap_chunks(&mut self, a: usize, b: usize, chunk: usize) {
        if a == b {
            return;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (left, right) = self.split_at_mut(hi * chunk);
        left[lo * chunk..(lo + 1) * chunk].swap_with_slice(&mut right[..chunk]);
    }
}

impl LinearOperator for DenseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (i, out) in y.iter_mut().enumerate() {
            *out = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        x.fill(0.0);
        for i in 0..self.rows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for (j, xj) in x.iter_mut().enumerate() {
                *xj += self.at(i, j) * yi;
            }
        }
    }

    fn column(&self, i: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            out[r] = self.at(r, i);
        }
    }
}

/// Relative pivot tolerance for [`rank_diagnostic`].
pub const RANK_TOL_REL: f64 = 1e-9;

/// Identifiability diagnostic: rank of the stacked matrix
/// `[A; A·T_1; ...; A·T_k]`. Training can only pin down the true volumes if
/// the stack reaches full column rank. Toy sizes only.
pub fn rank_diagnostic(a: &DenseMatrix, transforms: &[DenseMatrix]) -> Result<(usize, bool)> {
    let n = a.cols;
    for t in transforms {
        if t.rows != n || t.cols != n {
            return Err(Error::Shape(format!(
                "transform must be {n}x{n}, got {}x{}",
                t.rows, t.cols
            )));
        }
    }
    let total_rows = a.rows * (1 + transforms.len());
    if total_rows * n > MATERIALIZE_GUARD {
        return Err(Error::SizeGuard(format!(
            "stacked {total_rows}x{n} exceeds {MATERIALIZE_GUARD} entries"
        )));
    }
    let mut stacked = DenseMatrix::zeros(total_rows, n);
    stacked.data[..a.data.len()].copy_from_slice(&a.data);
    for (k, t) in transforms.iter().enumerate() {
        let at = a.matmul(t)?;
        let offset = (k + 1) * a.rows * n;
        stacked.data[offset..offset + at.data.len()].copy_from_slice(&at.data);
    }
    let tol = RANK_TOL_REL * stacked.max_abs().max(1.0);
    let rank = stacked.rank(tol);
    Ok((rank, rank == n))
}

/// Gaussian prior and global vector statistics for the MAP point estimate.
#[derive(Debug, Clone, Copy)]
pub struct MapPrior {
    /// Prior mean for the queried key's volume.
    pub mu: f64,
    /// Prior variance (> 0).
    pub sigma2: f64,
    /// `‖x‖₁` of the full volume vector.
    pub l1: f64,
    /// `‖x‖₂²` of the full volume vector (> 0).
    pub l2sq: f64,
}

/// Closed-form MAP estimate of one key's volume from its `depth` counters:
///
/// `x̂ = (μ·‖x‖₂² + σ²·(w·Σ_j y_j − d·‖x‖₁)) / (‖x‖₂² + σ²·d·(w−1))`
///
/// where `y_j` is the counter at the key's hashed position in row `j`.
/// With `w = 1` every counter equals `‖x‖₁` and the estimate degenerates to
/// the prior mean exactly.
pub fn map_estimate(
    row_positions: &[usize],
    y: &[f64],
    prior: &MapPrior,
    depth: usize,
    width: usize,
) -> Result<f64> {
    if !(prior.sigma2.is_finite() && prior.sigma2 > 0.0) {
        return Err(Error::InvalidPrior(format!("sigma2 must be > 0, got {}", prior.sigma2)));
    }
    if !(prior.l2sq.is_finite() && prior.l2sq > 0.0) {
        return Err(Error::InvalidPrior(format!("l2sq must be > 0, got {}", prior.l2sq)));
    }
    if depth == 0 || width == 0 || row_positions.len() != depth || y.len() != depth * width {
        return Err(Error::Shape(format!(
            "map_estimate: {depth} rows x {width}, {} positions, {} counters",
            row_positions.len(),
            y.len()
        )));
    }
    if row_positions.iter().any(|&p| p >= width) {
        return Err(Error::Shape("row position out of range".into()));
    }
    let sum_y: f64 = row_positions.iter().enumerate().map(|(j, &p)| y[j * width + p]).sum();
    let d = depth as f64;
    let w = width as f64;
    let numerator = prior.mu * prior.l2sq + prior.sigma2 * (w * sum_y - d * prior.l1);
    let denominator = prior.l2sq + prior.sigma2 * d * (w - 1.0);
    Ok(numerator / denominator)
}
