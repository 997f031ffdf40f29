//! The learned solver: a bucket-shared decoder network that maps normalized
//! sketch counters to per-key frequencies, the positive transform group used
//! for ground-truth-free training, the sliding snapshot window, and the
//! training loop itself.
//!
//! The network decodes one logical bucket of `L` keys per forward pass; a
//! sinusoidal embedding of the bucket id modulates a shared trunk, so the
//! parameter count is independent of how many keys the stream has produced.
//! Training needs no ground truth: the loss combines measurement consistency
//! `‖A·x − y‖²`, an equivariance term that re-senses a proportionally
//! inflated copy of the estimate, and an L1 sparsity penalty.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AppConfig;
use crate::dataplane::{read_u16, read_u32, read_u64, truncated, Snapshot};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::nn::{
    relu, relu_backward, sigmoid, sigmoid_backward, silu, sinusoidal_embed, AdamConfig, AdamState,
    Linear,
};
use crate::sensing::{DenseMatrix, LinearOperator, SketchOperator};

pub const MODEL_MAGIC: [u8; 4] = *b"UCLM";
pub const MODEL_VERSION: u16 = 1;

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// A snapshot scaled into the network's input domain.
#[derive(Debug, Clone)]
pub struct NormalizedSample {
    pub y_norm: Vec<f64>,
    pub scale: u64,
}

/// Divide the counters by the snapshot's frozen scale (the minimum over rows
/// of the row maximum), so every key's true sketch volume maps into `[0, 1]`.
/// Returns `None` when the sketch is still empty — no training signal.
pub fn normalize(snap: &Snapshot) -> Option<NormalizedSample> {
    if snap.scale == 0 {
        return None;
    }
    let s = snap.scale as f64;
    Some(NormalizedSample {
        y_norm: snap.y_raw.iter().map(|&c| c as f64 / s).collect(),
        scale: snap.scale,
    })
}

// ---------------------------------------------------------------------------
// Solver network
// ---------------------------------------------------------------------------

/// The decoder `D`. Two per-row linear blocks (each two FCs with ReLU,
/// parameters shared across the `d` sketch rows), a fuse layer producing the
/// shallow representation, a bucket-id conditioning branch (sinusoidal
/// embedding → SiLU → FC → per-feature scale/shift), a two-layer trunk, and
/// a sigmoid head of width `L`.
#[derive(Debug, Clone)]
pub struct SolverModel {
    depth: usize,
    width: usize,
    hidden: usize,
    bucket_len: usize,
    seed: u64,
    row_fc1: Linear,
    row_fc2: Linear,
    row2_fc1: Linear,
    row2_fc2: Linear,
    fuse: Linear,
    embed_fc: Linear,
    trunk1: Linear,
    trunk2: Linear,
    head: Linear,
}

/// Cached intermediate activations of one bucket forward pass.
#[derive(Debug, Clone)]
struct BucketTrace {
    r1: Vec<f64>, // d·h, post-ReLU
    r2: Vec<f64>,
    r3: Vec<f64>,
    r4: Vec<f64>,
    s: Vec<f64>,    // h, fuse output (shallow representation)
    se: Vec<f64>,   // h, SiLU of the bucket embedding
    ms: Vec<f64>,   // 2h, [scale_i ; shift_i]
    modv: Vec<f64>, // h, modulated representation
    t1: Vec<f64>,   // h, post-ReLU
    t2: Vec<f64>,
    out: Vec<f64>, // L, post-sigmoid
}

impl SolverModel {
    pub fn new(depth: usize, width: usize, hidden: usize, bucket_len: usize, seed: u64) -> Result<Self> {
        if depth == 0 || width == 0 || bucket_len == 0 {
            return Err(Error::Config("solver dims must be >= 1".into()));
        }
        if hidden < 2 || hidden % 2 != 0 {
            return Err(Error::Config("solver hidden dim must be even and >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init", 0));
        let row_fc1 = Linear::new(width, hidden, &mut rng);
        let row_fc2 = Linear::new(hidden, hidden, &mut rng);
        let row2_fc1 = Linear::new(hidden, hidden, &mut rng);
        let row2_fc2 = Linear::new(hidden, hidden, &mut rng);
        let fuse = Linear::new(depth * hidden, hidden, &mut rng);
        let mut embed_fc = Linear::new(hidden, 2 * hidden, &mut rng);
        // Conditioning starts as a near-identity: scale ≈ 1, shift ≈ 0, with
        // weights small but nonzero so distinct buckets differ from step 0.
        for w in embed_fc.w.iter_mut() {
            *w = rng.random_range(-0.01..0.01);
        }
        for (i, b) in embed_fc.b.iter_mut().enumerate() {
            *b = if i < hidden { 1.0 } else { 0.0 };
        }
        let trunk1 = Linear::new(hidden, hidden, &mut rng);
        let trunk2 = Linear::new(hidden, hidden, &mut rng);
        let head = Linear::new(hidden, bucket_len, &mut rng);
        Ok(SolverModel {
            depth,
            width,
            hidden,
            bucket_len,
            seed,
            row_fc1,
            row_fc2,
            row2_fc1,
            row2_fc2,
            fuse,
            embed_fc,
            trunk1,
            trunk2,
            head,
        })
    }

    pub fn from_config(cfg: &AppConfig, seed: u64) -> Result<Self> {
        SolverModel::new(
            cfg.sketch.depth as usize,
            cfg.sketch.width as usize,
            cfg.buckets.hidden as usize,
            cfg.buckets.length as usize,
            seed,
        )
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn bucket_len(&self) -> usize {
        self.bucket_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_buckets(&self, n: usize) -> usize {
        n.div_ceil(self.bucket_len)
    }

    fn layers(&self) -> [&Linear; 9] {
        [
            &self.row_fc1,
            &self.row_fc2,
            &self.row2_fc1,
            &self.row2_fc2,
            &self.fuse,
            &self.embed_fc,
            &self.trunk1,
            &self.trunk2,
            &self.head,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 9] {
        [
            &mut self.row_fc1,
            &mut self.row_fc2,
            &mut self.row2_fc1,
            &mut self.row2_fc2,
            &mut self.fuse,
            &mut self.embed_fc,
            &mut self.trunk1,
            &mut self.trunk2,
            &mut self.head,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Closed-form parameter count; independent of the number of stream keys.
    pub fn expected_param_count(depth: usize, width: usize, hidden: usize, bucket_len: usize) -> usize {
        let fc = |i: usize, o: usize| i * o + o;
        fc(width, hidden)
            + 3 * fc(hidden, hidden)
            + fc(depth * hidden, hidden)
            + fc(hidden, 2 * hidden)
            + 2 * fc(hidden, hidden)
            + fc(hidden, bucket_len)
    }

    pub fn zero_grads(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for l in self.layers_mut() {
            for g in l.gw.iter_mut() {
                *g *= factor;
            }
            for g in l.gb.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Visit `(params, grads)` tensor pairs in canonical order (the order
    /// the checkpoint format and the optimizer both rely on).
    pub fn visit_param_grads(&mut self, mut f: impl FnMut(&mut [f64], &[f64])) {
        for l in self.layers_mut() {
            f(&mut l.w, &l.gw);
            f(&mut l.b, &l.gb);
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.gw);
            out.extend_from_slice(&l.gb);
        }
        out
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        let mut base = 0;
        for l in self.layers() {
            if idx < base + l.w.len() {
                return l.w[idx - base];
            }
            base += l.w.len();
            if idx < base + l.b.len() {
                return l.b[idx - base];
            }
            base += l.b.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let mut base = 0;
        for l in self.layers_mut() {
            if idx < base + l.w.len() {
                l.w[idx - base] = v;
                return;
            }
            base += l.w.len();
            if idx < base + l.b.len() {
                l.b[idx - base] = v;
                return;
            }
            base += l.b.len();
        }
        panic!("parameter index {idx} out of range");
    }

    fn forward_traced(&self, y_norm: &[f64], bucket: usize) -> Result<BucketTrace> {
        let (d, w, h, l) = (self.depth, self.width, self.hidden, self.bucket_len);
        if y_norm.len() != d * w {
            return Err(Error::Shape(format!(
                "solver input has {} entries, expected {}",
                y_norm.len(),
                d * w
            )));
        }
        let mut r1 = vec![0.0; d * h];
        let mut r2 = vec![0.0; d * h];
        let mut r3 = vec![0.0; d * h];
        let mut r4 = vec![0.0; d * h];
        for j in 0..d {
            let span = j * h..(j + 1) * h;
            self.row_fc1.forward(&y_norm[j * w..(j + 1) * w], &mut r1[span.clone()]);
            relu(&mut r1[span.clone()]);
            self.row_fc2.forward(&r1[span.clone()], &mut r2[span.clone()]);
            relu(&mut r2[span.clone()]);
            self.row2_fc1.forward(&r2[span.clone()], &mut r3[span.clone()]);
            relu(&mut r3[span.clone()]);
            self.row2_fc2.forward(&r3[span.clone()], &mut r4[span.clone()]);
            relu(&mut r4[span]);
        }
        let mut s = vec![0.0; h];
        self.fuse.forward(&r4, &mut s);

        let mut emb = vec![0.0; h];
        sinusoidal_embed(bucket, &mut emb);
        let mut se = vec![0.0; h];
        silu(&emb, &mut se);
        let mut ms = vec![0.0; 2 * h];
        self.embed_fc.forward(&se, &mut ms);

        let mut modv = vec![0.0; h];
        for i in 0..h {
            modv[i] = ms[i] * s[i] + ms[h + i];
        }
        let mut t1 = vec![0.0; h];
        self.trunk1.forward(&modv, &mut t1);
        relu(&mut t1);
        let mut t2 = vec![0.0; h];
        self.trunk2.forward(&t1, &mut t2);
        relu(&mut t2);
        let mut out = vec![0.0; l];
        self.head.forward(&t2, &mut out);
        sigmoid(&mut out);
        Ok(BucketTrace { r1, r2, r3, r4, s, se, ms, modv, t1, t2, out })
    }

    /// Decode one logical bucket; output lies strictly inside `(0,1)^L`.
    pub fn forward_bucket(&self, y_norm: &[f64], bucket: usize) -> Result<Vec<f64>> {
        Ok(self.forward_traced(y_norm, bucket)?.out)
    }

    /// Reverse pass for one bucket. `g_out` is the loss gradient at the
    /// sigmoid output; parameter gradients accumulate into the layers, and
    /// when `g_y` is given the input gradient is *added* into it.
    fn backward_bucket(
        &mut self,
        trace: &BucketTrace,
        y_norm: &[f64],
        g_out: &[f64],
        mut g_y: Option<&mut [f64]>,
    ) {
        let (d, w, h) = (self.depth, self.width, self.hidden);
        let mut g = g_out.to_vec();
        sigmoid_backward(&trace.out, &mut g);
        let mut g_t2 = vec![0.0; h];
        self.head.backward(&trace.t2, &g, Some(&mut g_t2));
        relu_backward(&trace.t2, &mut g_t2);
        let mut g_t1 = vec![0.0; h];
        self.trunk2.backward(&trace.t1, &g_t2, Some(&mut g_t1));
        relu_backward(&trace.t1, &mut g_t1);
        let mut g_mod = vec![0.0; h];
        self.trunk1.backward(&trace.modv, &g_t1, Some(&mut g_mod));

        // modv = scale ⊙ s + shift with [scale ; shift] = ms.
        let mut g_ms = vec![0.0; 2 * h];
        let mut g_s = vec![0.0; h];
        for i in 0..h {
            g_ms[i] = g_mod[i] * trace.s[i];
            g_ms[h + i] = g_mod[i];
            g_s[i] = g_mod[i] * trace.ms[i];
        }
        // The embedding itself is a constant of the bucket id, so the
        // conditioning branch ends here.
        self.embed_fc.backward(&trace.se, &g_ms, None);

        let mut g_flat = vec![0.0; d * h];
        self.fuse.backward(&trace.r4, &g_s, Some(&mut g_flat));
        let mut g_a = vec![0.0; h];
        let mut g_b = vec![0.0; h];
        let mut g_row = vec![0.0; w];
        for j in 0..d {
            let span = j * h..(j + 1) * h;
            let gr4 = &mut g_flat[span.clone()];
            relu_backward(&trace.r4[span.clone()], gr4);
            self.row2_fc2.backward(&trace.r3[span.clone()], gr4, Some(&mut g_a));
            relu_backward(&trace.r3[span.clone()], &mut g_a);
            self.row2_fc1.backward(&trace.r2[span.clone()], &g_a, Some(&mut g_b));
            relu_backward(&trace.r2[span.clone()], &mut g_b);
            self.row_fc2.backward(&trace.r1[span.clone()], &g_b, Some(&mut g_a));
            relu_backward(&trace.r1[span], &mut g_a);
            let row_in = &y_norm[j * w..(j + 1) * w];
            match g_y.as_deref_mut() {
                Some(gy) => {
                    self.row_fc1.backward(row_in, &g_a, Some(&mut g_row));
                    for (acc, v) in gy[j * w..(j + 1) * w].iter_mut().zip(&g_row) {
                        *acc += v;
                    }
                }
                None => self.row_fc1.backward(row_in, &g_a, None),
            }
        }
    }

    fn recover_traced(&self, y_norm: &[f64], n: usize) -> Result<(Vec<f64>, Vec<BucketTrace>)> {
        recover_traced_multi(std::slice::from_ref(self), y_norm, n)
    }

    /// Concatenated decode of all `ceil(n/L)` buckets, truncated to the `n`
    /// real keys. Output stays in the normalized domain (training wants the
    /// raw reals).
    pub fn recover_norm(&self, y_norm: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.recover_traced(y_norm, n)?.0)
    }

    /// Count-unit recovery for reporting: `scale ×` network output, rounded
    /// to the nearest nonnegative integer.
    pub fn recover_full(&self, y_norm: &[f64], n: usize, scale: u64) -> Result<Vec<u64>> {
        let x = self.recover_norm(y_norm, n)?;
        Ok(x.iter().map(|&v| ((scale as f64 * v).round()).max(0.0) as u64).collect())
    }

    fn same_dims(&self, other: &SolverModel) -> bool {
        (self.depth, self.width, self.hidden, self.bucket_len)
            == (other.depth, other.width, other.hidden, other.bucket_len)
    }

    // -- checkpoints --------------------------------------------------------

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.depth as u16).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.hidden as u32).to_le_bytes())?;
        w.write_all(&(self.bucket_len as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.param_count() as u64).to_le_bytes())?;
        for l in self.layers() {
            for &v in l.w.iter().chain(&l.b) {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated())?;
        if magic != MODEL_MAGIC {
            return Err(Error::Parse {
                location: "model header".into(),
                msg: "bad magic bytes".into(),
            });
        }
        let version = read_u16(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Parse {
                location: "model header".into(),
                msg: format!("unsupported version {version}"),
            });
        }
        let depth = read_u16(r)? as usize;
        let width = read_u32(r)? as usize;
        let hidden = read_u32(r)? as usize;
        let bucket_len = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let declared = read_u64(r)?;
        if depth == 0 || depth > 64 || width == 0 || width > 1 << 24 {
            return Err(Error::Parse {
                location: "model header".into(),
                msg: format!("implausible sketch dims {depth}x{width}"),
            });
        }
        if hidden < 2 || hidden > 1 << 16 || hidden % 2 != 0 || bucket_len == 0 || bucket_len > 1 << 24 {
            return Err(Error::Parse {
                location: "model header".into(),
                msg: format!("implausible model dims h={hidden} L={bucket_len}"),
            });
        }
        let expected = SolverModel::expected_param_count(depth, width, hidden, bucket_len);
        if declared != expected as u64 {
            return Err(Error::Parse {
                location: "model header".into(),
                msg: format!("parameter count {declared} does not match dims (expected {expected})"),
            });
        }
        let mut model = SolverModel::new(depth, width, hidden, bucket_len, seed)?;
        let mut buf = [0u8; 4];
        for l in model.layers_mut() {
            for slot in l.w.iter_mut().chain(l.b.iter_mut()) {
                r.read_exact(&mut buf).map_err(|_| truncated())?;
                let v = f32::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(Error::Parse {
                        location: "model parameters".into(),
                        msg: "non-finite parameter".into(),
                    });
                }
                *slot = v as f64;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        SolverModel::read_from(&mut BufReader::new(File::open(path)?))
    }
}

// ---------------------------------------------------------------------------
// Transform group
// ---------------------------------------------------------------------------

/// One positive transform: a budget `c` split proportionally over the hot
/// keys plus a unit bump on a random sliver of the cold ones.
#[derive(Debug, Clone)]
pub struct TransformSpec {
    /// Total hot increment, usually the sampling interval.
    pub c: u64,
    /// Registry positions flagged hot (exchanged out of the heavy filter).
    pub hot_indices: Vec<usize>,
    /// Fraction of the non-hot keys that receive a unit bump.
    pub cold_fraction: f64,
    /// Minimum update increment.
    pub unit: u64,
    pub seed: u64,
}

/// Split `total` across `weights` proportionally, rounding by largest
/// remainder (ties to the lowest index) so the shares sum to `total`
/// exactly. Non-positive weight vectors fall back to a uniform split.
pub fn largest_remainder(total: u64, weights: &[f64]) -> Vec<u64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let clamped: Vec<f64> = weights.iter().map(|&w| w.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let uniform = vec![1.0; clamped.len()];
    let eff = if sum > 0.0 { &clamped } else { &uniform };
    let eff_sum: f64 = eff.iter().sum();

    let mut shares: Vec<u64> = Vec::with_capacity(eff.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(eff.len());
    let mut allocated: u64 = 0;
    for (i, &w) in eff.iter().enumerate() {
        let quota = total as f64 * w / eff_sum;
        let floor = quota.floor().min(total as f64) as u64;
        allocated += floor;
        shares.push(floor);
        fracs.push((i, quota - floor as f64));
    }
    // Hand the leftover units to the largest fractional parts; lowest index
    // wins ties. (Floating-point drift can in principle leave `allocated`
    // above `total`; walk it back from the smallest fractions.)
    if allocated <= total {
        let mut rem = total - allocated;
        fracs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut k = 0usize;
        while rem > 0 {
            shares[fracs[k % fracs.len()].0] += 1;
            rem -= 1;
            k += 1;
        }
    } else {
        let mut excess = allocated - total;
        fracs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut k = 0usize;
        while excess > 0 {
            let i = fracs[k % fracs.len()].0;
            if shares[i] > 0 {
                shares[i] -= 1;
                excess -= 1;
            }
            k += 1;
        }
    }
    debug_assert_eq!(shares.iter().sum::<u64>(), total);
    shares
}

impl TransformSpec {
    /// Produce the count-unit increment vector over `x` (any domain whose
    /// ratios reflect the hot volumes — normalized works). Hot keys share
    /// `c` proportionally; `⌈cold_fraction · (n − |hot|)⌉` random non-hot
    /// keys gain `unit`.
    pub fn materialize(&self, x: &[f64]) -> Result<Vec<u64>> {
        let n = x.len();
        if let Some(&bad) = self.hot_indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("hot index {bad} out of range for {n} keys")));
        }
        if !(0.0..=1.0).contains(&self.cold_fraction) {
            return Err(Error::Config(format!("cold_fraction {} outside [0,1]", self.cold_fraction)));
        }
        let mut delta = vec![0u64; n];
        let mut hot_mask = vec![false; n];
        for &i in &self.hot_indices {
            hot_mask[i] = true;
        }
        if !self.hot_indices.is_empty() && self.c > 0 {
            let weights: Vec<f64> = self.hot_indices.iter().map(|&i| x[i]).collect();
            let shares = largest_remainder(self.c, &weights);
            for (&i, &s) in self.hot_indices.iter().zip(&shares) {
                delta[i] += s;
            }
        }
        let mut candidates: Vec<u32> =
            (0..n as u32).filter(|&i| !hot_mask[i as usize]).collect();
        let k_cold = (self.cold_fraction * candidates.len() as f64).ceil() as usize;
        if k_cold > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for i in 0..k_cold {
                let j = rng.random_range(i..candidates.len());
                candidates.swap(i, j);
                delta[candidates[i] as usize] += self.unit;
            }
        }
        Ok(delta)
    }
}

/// `x' = x + Δ/scale` in the normalized domain; also returns the count-unit
/// increments Δ.
pub fn apply_transform(x: &[f64], spec: &TransformSpec, scale: u64) -> Result<(Vec<f64>, Vec<u64>)> {
    if scale == 0 {
        return Err(Error::Shape("transform scale must be positive".into()));
    }
    let delta = spec.materialize(x)?;
    let s = scale as f64;
    let x_prime: Vec<f64> = x.iter().zip(&delta).map(|(&xi, &d)| xi + d as f64 / s).collect();
    Ok((x_prime, delta))
}

/// Diagonal matrix form `T = diag(x'_i / x_i)` of a transform observed as a
/// before/after pair, for rank diagnostics. Every reference entry must be
/// positive.
pub fn transform_matrix(x_ref: &[f64], x_prime: &[f64]) -> Result<DenseMatrix> {
    if x_ref.len() != x_prime.len() {
        return Err(Error::Shape("transform pair length mismatch".into()));
    }
    let n = x_ref.len();
    let mut t = DenseMatrix::zeros(n, n);
    for i in 0..n {
        if x_ref[i] <= 0.0 {
            return Err(Error::Shape(format!(
                "transform matrix needs positive reference entries (index {i})"
            )));
        }
        *t.at_mut(i, i) = x_prime[i] / x_ref[i];
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Sliding window
// ---------------------------------------------------------------------------

/// Fixed-capacity window over the most recent snapshots (normalized form);
/// the eldest sample is evicted first.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    cap: usize,
    items: VecDeque<NormalizedSample>,
}

impl SlidingWindow {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1, "window capacity must be >= 1");
        SlidingWindow { cap, items: VecDeque::with_capacity(cap) }
    }

    pub fn push(&mut self, sample: NormalizedSample) {
        if self.items.len() == self.cap {
            self.items.pop_front();
        }
        self.items.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn get(&self, i: usize) -> &NormalizedSample {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NormalizedSample> {
        self.items.iter()
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub measurement: f64,
    pub equiv: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossTerms {
    fn add(&mut self, other: &LossTerms) {
        self.measurement += other.measurement;
        self.equiv += other.equiv;
        self.sparse += other.sparse;
        self.total += other.total;
    }

    fn scale(&mut self, f: f64) {
        self.measurement *= f;
        self.equiv *= f;
        self.sparse *= f;
        self.total *= f;
    }
}

// ---------------------------------------------------------------------------
// Bucket ensembles
// ---------------------------------------------------------------------------
//
// The unshared-buckets ablation trains one independent network per logical
// bucket. Everywhere below, bucket `b` is decoded by
// `models[b % models.len()]`, so a singleton slice reproduces the shared
// decoder exactly.

fn ensemble_guard(models: &[SolverModel]) -> Result<&SolverModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::Shape("model ensemble is empty".into()))?;
    if models.iter().any(|m| !m.same_dims(first)) {
        return Err(Error::Shape("ensemble models disagree on dimensions".into()));
    }
    Ok(first)
}

fn recover_traced_multi(
    models: &[SolverModel],
    y_norm: &[f64],
    n: usize,
) -> Result<(Vec<f64>, Vec<BucketTrace>)> {
    let first = ensemble_guard(models)?;
    if n == 0 {
        return Err(Error::Shape("cannot recover an empty key set".into()));
    }
    let l = first.bucket_len;
    let buckets = first.num_buckets(n);
    let mut x = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(buckets);
    for b in 0..buckets {
        let trace = models[b % models.len()].forward_traced(y_norm, b)?;
        let take = l.min(n - b * l);
        x.extend_from_slice(&trace.out[..take]);
        traces.push(trace);
    }
    Ok((x, traces))
}

/// Normalized-domain decode where bucket `b` uses `models[b % len]`.
pub fn recover_norm_multi(models: &[SolverModel], y_norm: &[f64], n: usize) -> Result<Vec<f64>> {
    Ok(recover_traced_multi(models, y_norm, n)?.0)
}

/// Forward-only objective evaluation with a *frozen* normalized-domain
/// increment `delta_norm` (the transform is piecewise constant in `x`, so
/// freezing it is exactly what the analytic gradient differentiates).
pub fn sample_loss(
    model: &SolverModel,
    op: &SketchOperator,
    y_norm: &[f64],
    delta_norm: Option<&[f64]>,
    lambda: f64,
) -> Result<LossTerms> {
    let n = op.cols();
    let x = model.recover_norm(y_norm, n)?;
    loss_terms_only(model, op, y_norm, &x, delta_norm, lambda)
}

fn loss_terms_only(
    model: &SolverModel,
    op: &SketchOperator,
    y_norm: &[f64],
    x: &[f64],
    delta_norm: Option<&[f64]>,
    lambda: f64,
) -> Result<LossTerms> {
    let m = op.rows();
    let mut ax = vec![0.0; m];
    op.apply(x, &mut ax);
    let measurement: f64 = ax.iter().zip(y_norm).map(|(a, y)| (a - y) * (a - y)).sum();
    let sparse: f64 = lambda * x.iter().map(|v| v.abs()).sum::<f64>();
    let equiv = match delta_norm {
        None => 0.0,
        Some(delta) => {
            if delta.len() != x.len() {
                return Err(Error::Shape("delta length mismatch".into()));
            }
            let x_prime: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
            let mut y_prime = vec![0.0; m];
            op.apply(&x_prime, &mut y_prime);
            let x_hat = model.recover_norm(&y_prime, x.len())?;
            x_hat.iter().zip(&x_prime).map(|(a, b)| (a - b) * (a - b)).sum()
        }
    };
    Ok(LossTerms { measurement, equiv, sparse, total: measurement + equiv + sparse })
}

/// Objective + gradient accumulation for one sample. Parameter gradients
/// are *added* to the model's accumulators (callers zero them per batch).
pub fn sample_loss_and_grad(
    model: &mut SolverModel,
    op: &SketchOperator,
    y_norm: &[f64],
    delta_norm: Option<&[f64]>,
    lambda: f64,
) -> Result<LossTerms> {
    sample_loss_and_grad_multi(std::slice::from_mut(model), op, y_norm, delta_norm, lambda)
}

/// [`sample_loss_and_grad`] over a bucket ensemble.
pub fn sample_loss_and_grad_multi(
    models: &mut [SolverModel],
    op: &SketchOperator,
    y_norm: &[f64],
    delta_norm: Option<&[f64]>,
    lambda: f64,
) -> Result<LossTerms> {
    let n = op.cols();
    let m = op.rows();
    if y_norm.len() != m {
        return Err(Error::Shape(format!("y has {} entries, operator has {m} rows", y_norm.len())));
    }
    let (x, traces) = recover_traced_multi(models, y_norm, n)?;

    let mut ax = vec![0.0; m];
    op.apply(&x, &mut ax);
    let r1: Vec<f64> = ax.iter().zip(y_norm).map(|(a, y)| a - y).collect();
    let measurement: f64 = r1.iter().map(|v| v * v).sum();
    let sparse: f64 = lambda * x.iter().map(|v| v.abs()).sum::<f64>();

    // dL/dx from the measurement term (2 Aᵀ r1) and the sparsity term.
    let mut g_x = vec![0.0; n];
    op.apply_transpose(&r1, &mut g_x);
    for (g, &xi) in g_x.iter_mut().zip(&x) {
        *g = 2.0 * *g + lambda * xi.signum();
    }

    let mut equiv = 0.0;
    if let Some(delta) = delta_norm {
        if delta.len() != n {
            return Err(Error::Shape("delta length mismatch".into()));
        }
        let x_prime: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
        let mut y_prime = vec![0.0; m];
        op.apply(&x_prime, &mut y_prime);
        let (x_hat, traces2) = recover_traced_multi(models, &y_prime, n)?;
        let e: Vec<f64> = x_hat.iter().zip(&x_prime).map(|(a, b)| a - b).collect();
        equiv = e.iter().map(|v| v * v).sum();

        // Second decoder pass: ∂/∂θ directly, plus the input gradient that
        // flows back through A into x' (and so into x, since Δ is frozen).
        let mut g_y2 = vec![0.0; m];
        let l = models[0].bucket_len;
        let mut g_out = vec![0.0; l];
        for (b, trace) in traces2.iter().enumerate() {
            let start = b * l;
            let take = l.min(n - start);
            g_out.fill(0.0);
            for (slot, &ei) in g_out[..take].iter_mut().zip(&e[start..start + take]) {
                *slot = 2.0 * ei;
            }
            let k = b % models.len();
            models[k].backward_bucket(trace, &y_prime, &g_out, Some(&mut g_y2));
        }
        let mut g_x2 = vec![0.0; n];
        op.apply_transpose(&g_y2, &mut g_x2);
        for ((g, g2), &ei) in g_x.iter_mut().zip(&g_x2).zip(&e) {
            *g += g2 - 2.0 * ei;
        }
    }

    // First decoder pass.
    let l = models[0].bucket_len;
    let mut g_out = vec![0.0; l];
    for (b, trace) in traces.iter().enumerate() {
        let start = b * l;
        let take = l.min(n - start);
        g_out.fill(0.0);
        g_out[..take].copy_from_slice(&g_x[start..start + take]);
        models[b % models.len()].backward_bucket(trace, y_norm, &g_out, None);
    }

    Ok(LossTerms { measurement, equiv, sparse, total: measurement + equiv + sparse })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lambda: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cold_fraction: f64,
    /// Total hot increment per transform.
    pub transform_budget: u64,
    /// Disabled by the no-equivariance ablation.
    pub equivariance: bool,
}

impl TrainSettings {
    pub fn from_config(cfg: &AppConfig) -> Self {
        TrainSettings {
            lambda: cfg.training.lambda,
            epochs: cfg.training.epochs as usize,
            patience: cfg.training.patience as usize,
            batch_size: cfg.training.batch_size as usize,
            lr: cfg.training.lr,
            cold_fraction: cfg.training.cold_fraction,
            transform_budget: cfg.transform_budget(),
            equivariance: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLoss {
    pub epoch: usize,
    pub measurement: f64,
    pub equiv: f64,
    pub sparse: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    pub early_stopped: bool,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.total).unwrap_or(f64::NAN)
    }

    /// CSV rows `(epoch, loss_measurement[, loss_equiv], loss_sparse,
    /// total)`; the equivariance column is dropped when the term was
    /// disabled.
    pub fn to_csv(&self, include_equiv: bool) -> String {
        let mut out = String::new();
        if include_equiv {
            out.push_str("epoch,loss_measurement,loss_equiv,loss_sparse,total\n");
        } else {
            out.push_str("epoch,loss_measurement,loss_sparse,total\n");
        }
        for e in &self.epochs {
            if include_equiv {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.epoch, e.measurement, e.equiv, e.sparse, e.total
                ));
            } else {
                out.push_str(&format!("{},{},{},{}\n", e.epoch, e.measurement, e.sparse, e.total));
            }
        }
        out
    }
}

/// Ground-truth-free training over the sliding window. `hot_flags[i]` marks
/// registry position `i` as hot (exchanged); the registry is frozen for the
/// duration of the call. Snapshot order is reshuffled per epoch, one Adam
/// step is taken per mini-batch, and training stops early once the epoch
/// loss has not improved for `patience` epochs.
pub fn train(
    model: &mut SolverModel,
    window: &SlidingWindow,
    op: &SketchOperator,
    hot_flags: &[bool],
    st: &TrainSettings,
    master_seed: u64,
) -> Result<TrainReport> {
    train_ensemble(std::slice::from_mut(model), window, op, hot_flags, st, master_seed)
}

/// [`train`] over a bucket ensemble: bucket `b` is decoded (and its
/// gradients applied) by `models[b % models.len()]`. One optimizer spans the
/// concatenated parameter vectors.
pub fn train_ensemble(
    models: &mut [SolverModel],
    window: &SlidingWindow,
    op: &SketchOperator,
    hot_flags: &[bool],
    st: &TrainSettings,
    master_seed: u64,
) -> Result<TrainReport> {
    ensemble_guard(models)?;
    if window.is_empty() {
        return Err(Error::Shape("training window is empty".into()));
    }
    let n = op.cols();
    if hot_flags.len() != n {
        return Err(Error::Shape(format!(
            "hot flags cover {} keys, operator has {n} columns",
            hot_flags.len()
        )));
    }
    if st.batch_size == 0 || st.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }
    let hot_indices: Vec<usize> =
        hot_flags.iter().enumerate().filter_map(|(i, &h)| h.then_some(i)).collect();

    let total_params: usize = models.iter().map(|m| m.param_count()).sum();
    let mut adam = AdamState::new(total_params, AdamConfig::with_lr(st.lr));
    let mut report = TrainReport { epochs: Vec::new(), early_stopped: false, best_epoch: 0 };
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..st.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "train-epoch", epoch as u64));
        let mut order: Vec<usize> = (0..window.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_sum = LossTerms::default();
        for chunk in order.chunks(st.batch_size) {
            models.iter_mut().for_each(SolverModel::zero_grads);
            for &idx in chunk {
                let sample = window.get(idx);
                let delta_norm: Option<Vec<f64>> = if st.equivariance {
                    let x = recover_norm_multi(models, &sample.y_norm, n)?;
                    // Cap the hot budget per sample: the decoder's outputs
                    // live in (0, 1) after normalization, so an increment
                    // worth more than a fraction of this sample's scale sets
                    // an unreachable target and the term would only saturate
                    // the outputs instead of teaching shift structure.
                    let c_cap = (sample.scale / 4).max(1);
                    let spec = TransformSpec {
                        c: st.transform_budget.min(c_cap),
                        hot_indices: hot_indices.clone(),
                        cold_fraction: st.cold_fraction,
                        unit: 1,
                        seed: rng.random::<u64>(),
                    };
                    let delta = spec.materialize(&x)?;
                    let s = sample.scale as f64;
                    Some(delta.iter().map(|&d| d as f64 / s).collect())
                } else {
                    None
                };
                let terms = sample_loss_and_grad_multi(
                    models,
                    op,
                    &sample.y_norm,
                    delta_norm.as_deref(),
                    st.lambda,
                )?;
                if !terms.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch} (measurement {}, equiv {}, sparse {})",
                        terms.measurement, terms.equiv, terms.sparse
                    )));
                }
                epoch_sum.add(&terms);
            }
            let inv = 1.0 / chunk.len() as f64;
            models.iter_mut().for_each(|m| m.scale_grads(inv));
            adam.step(|sink| {
                for m in models.iter_mut() {
                    m.visit_param_grads(|p, g| sink(p, g));
                }
            })?;
        }

        epoch_sum.scale(1.0 / window.len() as f64);
        report.epochs.push(EpochLoss {
            epoch,
            measurement: epoch_sum.measurement,
            equiv: epoch_sum.equiv,
            sparse: epoch_sum.sparse,
            total: epoch_sum.total,
        });
        if epoch_sum.total < best {
            best = epoch_sum.total;
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= st.patience {
                report.early_stopped = true;
                break;
            }
        }
    }
    Ok(report)
}
