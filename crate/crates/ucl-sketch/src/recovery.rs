//! Classical sparse-recovery baselines over the same measurement operator
//! the learned solver uses: LSQR, orthogonal matching pursuit, and the
//! count-min / count-sketch point queries. All are matrix-free apart from
//! OMP's cached support columns.

use crate::error::{Error, Result};
use crate::hash::{hash_bytes, sign_of, Seeds};
use crate::key::KeyBytes;
use crate::sensing::LinearOperator;

// ---------------------------------------------------------------------------
// LSQR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LsqrConfig {
    /// 0 means automatic: `2 * (rows + cols) + 50`.
    pub max_iters: usize,
    /// Stop when the residual drops below `rtol * ‖y‖`.
    pub rtol: f64,
}

impl Default for LsqrConfig {
    fn default() -> Self {
        LsqrConfig { max_iters: 0, rtol: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct LsqrResult {
    pub x: Vec<f64>,
    /// Actual `‖y - A x‖₂` of the returned iterate.
    pub residual_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn scale_into(v: &mut [f64], s: f64) {
    for a in v.iter_mut() {
        *a *= s;
    }
}

/// Golub–Kahan bidiagonalization LSQR. Starting from `x = 0` the iterates
/// stay in `range(Aᵀ)`, so on consistent underdetermined systems the limit
/// is the minimum-norm solution. Output is *not* clamped; nonnegativity is
/// applied by the decode layer.
pub fn lsqr(a: &dyn LinearOperator, y: &[f64], cfg: &LsqrConfig) -> Result<LsqrResult> {
    let (m, n) = (a.rows(), a.cols());
    if y.len() != m {
        return Err(Error::Shape(format!("lsqr: y has {} entries, operator has {m} rows", y.len())));
    }
    let max_iters = if cfg.max_iters == 0 { 2 * (m + n) + 50 } else { cfg.max_iters };

    let mut x = vec![0.0; n];
    let mut u = y.to_vec();
    let beta1 = norm2(&u);
    if beta1 == 0.0 {
        return Ok(LsqrResult { x, residual_norm: 0.0, iters: 0, converged: true });
    }
    scale_into(&mut u, 1.0 / beta1);

    let mut v = vec![0.0; n];
    a.apply_transpose(&u, &mut v);
    let mut alpha = norm2(&v);
    if alpha == 0.0 {
        // y is orthogonal to range(A): x = 0 already minimizes the residual.
        return Ok(LsqrResult { x, residual_norm: beta1, iters: 0, converged: true });
    }
    scale_into(&mut v, 1.0 / alpha);

    let mut w = v.clone();
    let mut phibar = beta1;
    let mut rhobar = alpha;
    let mut converged = false;
    let mut iters = 0;

    let mut tmp_m = vec![0.0; m];
    let mut tmp_n = vec![0.0; n];

    for iter in 1..=max_iters {
        iters = iter;

        // u = A v - alpha u
        a.apply(&v, &mut tmp_m);
        for (ui, ti) in u.iter_mut().zip(&tmp_m) {
            *ui = ti - alpha * *ui;
        }
        let beta = norm2(&u);
        if beta > 0.0 {
            scale_into(&mut u, 1.0 / beta);
        }

        // v = Aᵀ u - beta v
        a.apply_transpose(&u, &mut tmp_n);
        for (vi, ti) in v.iter_mut().zip(&tmp_n) {
            *vi = ti - beta * *vi;
        }
        alpha = norm2(&v);
        if alpha > 0.0 {
            scale_into(&mut v, 1.0 / alpha);
        }

        // Givens rotation eliminating beta from the bidiagonal system.
        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar = s * phibar;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        for i in 0..n {
            x[i] += t1 * w[i];
            w[i] = v[i] + t2 * w[i];
        }

        if phibar <= cfg.rtol * beta1 {
            converged = true;
            break;
        }
        if beta == 0.0 || alpha == 0.0 {
            // Krylov space exhausted; the current iterate is the solution.
            converged = phibar <= cfg.rtol * beta1 || phibar <= 1e-10 * beta1;
            break;
        }
    }

    a.apply(&x, &mut tmp_m);
    let residual_norm = y
        .iter()
        .zip(&tmp_m)
        .map(|(yi, ai)| (yi - ai) * (yi - ai))
        .sum::<f64>()
        .sqrt();
    Ok(LsqrResult { x, residual_norm, iters, converged })
}

// ---------------------------------------------------------------------------
// OMP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OmpConfig {
    /// Support-size cap; 0 means automatic: `min(rows, cols)`.
    pub max_sparsity: usize,
    /// Stop when the residual drops below `rtol * ‖y‖`.
    pub rtol: f64,
}

impl Default for OmpConfig {
    fn default() -> Self {
        OmpConfig { max_sparsity: 0, rtol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct OmpResult {
    /// Full-length solution, zero off the support, clamped to `>= 0` after
    /// the final least-squares re-fit.
    pub x: Vec<f64>,
    pub support: Vec<usize>,
    /// `‖y - A x‖₂` of the returned (clamped) solution.
    pub residual_norm: f64,
    /// Residual norm after each accepted column (pre-clamp).
    pub residual_history: Vec<f64>,
}

/// Try to extend a Cholesky factor `L` (row-packed lower triangle of the
/// support Gram matrix) with a new column whose correlations against the
/// support are `g` and whose squared norm is `norm_sq`. Returns the new row
/// or `None` when the extended Gram matrix is (numerically) singular.
fn try_extend_cholesky(l: &[Vec<f64>], g: &[f64], norm_sq: f64) -> Option<Vec<f64>> {
    let k = l.len();
    debug_assert_eq!(g.len(), k);
    // Forward-substitute L q = g.
    let mut q = vec![0.0; k];
    for i in 0..k {
        let mut acc = g[i];
        for j in 0..i {
            acc -= l[i][j] * q[j];
        }
        q[i] = acc / l[i][i];
    }
    let diag_sq = norm_sq - q.iter().map(|v| v * v).sum::<f64>();
    let floor = 1e-12 * norm_sq.max(1e-300);
    if diag_sq <= floor {
        return None;
    }
    q.push(diag_sq.sqrt());
    Some(q)
}

/// Solve `L Lᵀ z = b` (forward then backward substitution).
fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = l.len();
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[i][j] * z[j];
        }
        z[i] = acc / l[i][i];
    }
    for i in (0..k).rev() {
        let mut acc = z[i];
        for j in i + 1..k {
            acc -= l[j][i] * z[j];
        }
        z[i] = acc / l[i][i];
    }
    z
}

/// Orthogonal matching pursuit: greedily pick the column with the largest
/// absolute correlation to the residual (ties broken toward the lowest
/// index), re-fit by least squares on the support, and stop on residual
/// tolerance, support cap, or vanishing correlations. Columns that would
/// make the support Gram matrix singular are dropped from consideration.
pub fn omp(a: &dyn LinearOperator, y: &[f64], cfg: &OmpConfig) -> Result<OmpResult> {
    let (m, n) = (a.rows(), a.cols());
    if y.len() != m {
        return Err(Error::Shape(format!("omp: y has {} entries, operator has {m} rows", y.len())));
    }
    let max_sparsity = if cfg.max_sparsity == 0 { m.min(n) } else { cfg.max_sparsity.min(n) };
    let y_norm = norm2(y);
    let corr_floor = 1e-12 * y_norm.max(1.0);

    let mut support: Vec<usize> = Vec::new();
    let mut in_support = vec![false; n];
    let mut excluded = vec![false; n];
    let mut columns: Vec<Vec<f64>> = Vec::new(); // cached support columns
    let mut chol: Vec<Vec<f64>> = Vec::new(); // row-packed lower triangle
    let mut rhs: Vec<f64> = Vec::new(); // A_Sᵀ y
    let mut z: Vec<f64> = Vec::new(); // current support coefficients
    let mut residual = y.to_vec();
    let mut residual_history = Vec::new();
    let mut corr = vec![0.0; n];
    let mut col_buf = vec![0.0; m];

    while support.len() < max_sparsity {
        a.apply_transpose(&residual, &mut corr);
        let mut best: Option<(usize, f64)> = None;
        for (i, &c) in corr.iter().enumerate() {
            if in_support[i] || excluded[i] {
                continue;
            }
            let mag = c.abs();
            if best.map_or(true, |(_, bm)| mag > bm) {
                best = Some((i, mag));
            }
        }
        let Some((pick, mag)) = best else { break };
        if mag <= corr_floor {
            break;
        }

        a.column(pick, &mut col_buf);
        let norm_sq: f64 = col_buf.iter().map(|v| v * v).sum();
        let g: Vec<f64> = columns.iter().map(|c| dot(c, &col_buf)).collect();
        match try_extend_cholesky(&chol, &g, norm_sq) {
            None => {
                excluded[pick] = true;
                continue;
            }
            Some(row) => chol.push(row),
        }
        support.push(pick);
        in_support[pick] = true;
        columns.push(col_buf.clone());
        rhs.push(dot(&col_buf, y));

        z = cholesky_solve(&chol, &rhs);
        // residual = y - A_S z
        residual.copy_from_slice(y);
        for (zk, col) in z.iter().zip(&columns) {
            for (r, c) in residual.iter_mut().zip(col) {
                *r -= zk * c;
            }
        }
        let rn = norm2(&residual);
        residual_history.push(rn);
        if rn <= cfg.rtol * y_norm {
            break;
        }
    }

    let mut x = vec![0.0; n];
    for (&i, &zi) in support.iter().zip(&z) {
        x[i] = zi.max(0.0);
    }
    // Residual of the clamped solution actually returned.
    let mut ax = vec![0.0; m];
    a.apply(&x, &mut ax);
    let residual_norm = y.iter().zip(&ax).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();

    Ok(OmpResult { x, support, residual_norm, residual_history })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Post-hoc nonnegativity for decode outputs.
pub fn clamp_nonneg(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Point queries
// ---------------------------------------------------------------------------

/// Count-min point query: minimum over rows of the counter at the key's
/// hashed position. Never underestimates the key's true sketch volume.
pub fn cm_point_query(
    counters: &[u32],
    depth: usize,
    width: usize,
    row_seeds: &[u64],
    key: &KeyBytes,
) -> u64 {
    debug_assert_eq!(counters.len(), depth * width);
    debug_assert!(row_seeds.len() >= depth);
    (0..depth)
        .map(|j| {
            let pos = (hash_bytes(row_seeds[j], key.as_slice()) % width as u64) as usize;
            counters[j * width + pos] as u64
        })
        .min()
        .unwrap_or(0)
}

/// Signed (count-sketch) counter array fed from the data plane's sketch
/// inserts: row `j` adds `sign_j(key) * v` at the key's hashed position.
#[derive(Debug, Clone)]
pub struct SignedCounters {
    depth: usize,
    width: usize,
    counters: Vec<i64>,
    row_seeds: Vec<u64>,
    sign_seeds: Vec<u64>,
}

impl SignedCounters {
    pub fn new(depth: usize, width: usize, seeds: &Seeds) -> Result<Self> {
        if seeds.rows.len() < depth || seeds.signs.len() < depth {
            return Err(Error::Shape(format!(
                "need {depth} row/sign seeds, have {}/{}",
                seeds.rows.len(),
                seeds.signs.len()
            )));
        }
        Ok(SignedCounters {
            depth,
            width,
            counters: vec![0i64; depth * width],
            row_seeds: seeds.rows[..depth].to_vec(),
            sign_seeds: seeds.signs[..depth].to_vec(),
        })
    }

    pub fn insert(&mut self, key: &KeyBytes, v: u64) {
        for j in 0..self.depth {
            let pos = (hash_bytes(self.row_seeds[j], key.as_slice()) % self.width as u64) as usize;
            let sign = sign_of(self.sign_seeds[j], key.as_slice());
            self.counters[j * self.width + pos] += sign * v as i64;
        }
    }

    /// Count-sketch point query: median over rows of `sign_j(key) *
    /// counter_j`. For even depth the two middle values are averaged with
    /// the result rounded toward zero.
    pub fn point_query(&self, key: &KeyBytes) -> i64 {
        let mut ests: Vec<i64> = (0..self.depth)
            .map(|j| {
                let pos =
                    (hash_bytes(self.row_seeds[j], key.as_slice()) % self.width as u64) as usize;
                let sign = sign_of(self.sign_seeds[j], key.as_slice());
                sign * self.counters[j * self.width + pos]
            })
            .collect();
        ests.sort_unstable();
        let d = self.depth;
        if d % 2 == 1 {
            ests[d / 2]
        } else {
            // Integer division truncates toward zero, as required.
            (ests[d / 2 - 1] + ests[d / 2]) / 2
        }
    }

    pub fn counters(&self) -> &[i64] {
        &self.counters
    }
}
