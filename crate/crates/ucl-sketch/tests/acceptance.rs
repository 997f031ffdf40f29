//! Acceptance gates for the whole pipeline. Each test checks one numbered
//! criterion and prints a single `criterion N: PASS/FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`). Tolerances and seeds are
//! pinned in the constants below; the end-to-end fixture (criterion 8) is
//! built once and shared by the ablation, throughput and determinism gates.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ucl_sketch::config::AppConfig;
use ucl_sketch::dataplane::{BloomBits, DataPlane, Snapshot};
use ucl_sketch::harness::{
    algo_estimates, ingest, metric_rows, rows_to_csv, train_two_phase, Algo, IngestOutcome,
    TrainedState,
};
use ucl_sketch::hash::{derive_seed, hash_bytes, Seeds};
use ucl_sketch::key::{KeyBytes, StreamItem};
use ucl_sketch::metrics::{are, entropy_abs_err, wmrd, FrequencyTable};
use ucl_sketch::recovery::{cm_point_query, lsqr, omp, LsqrConfig, OmpConfig};
use ucl_sketch::sensing::{
    map_estimate, rank_diagnostic, DenseMatrix, LinearOperator, MapPrior, SignMode,
    SketchOperator,
};
use ucl_sketch::solver::{
    apply_transform, sample_loss, sample_loss_and_grad, train, transform_matrix, SolverModel,
    TrainSettings, TransformSpec,
};
use ucl_sketch::streamgen::{generate, ZipfSpec};

// --------------------------------------------------------------------------
// Criterion bookkeeping
// --------------------------------------------------------------------------

fn conclude(criterion: u32, ok: bool, detail: &str) {
    println!("criterion {criterion}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}

/// Standard normal via Box–Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// --------------------------------------------------------------------------
// 1. Exact measurement identity: y = A · x_residual at every snapshot
// --------------------------------------------------------------------------

const C1_SEED: u64 = 4101;
const C1_STREAMS: usize = 20;
const C1_BUDGET_SECS: f64 = 30.0;

#[test]
fn criterion_01_snapshot_counters_equal_operator_times_residuals() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(C1_SEED);
    let presets = AppConfig::preset_names();
    let mut snapshots_checked = 0u64;
    let mut entries_checked = 0u64;

    for stream_no in 0..C1_STREAMS {
        let preset = presets[rng.random_range(0..presets.len())];
        let cfg = AppConfig::preset(preset).unwrap();
        let spec = ZipfSpec {
            universe: rng.random_range(200..=4000),
            skew: rng.random_range(0.6..1.6),
            length: rng.random_range(1_000..=100_000),
            seed: rng.random(),
        };
        let master = rng.random();
        let mut plane = DataPlane::new(&cfg, master).unwrap();
        // Exact ledger of everything forwarded into the counter array.
        let mut shadow: BTreeMap<KeyBytes, u64> = BTreeMap::new();

        for item in generate(&spec).unwrap() {
            let (_report, insert) = plane.update_traced(&item);
            if let Some((key, value)) = insert {
                *shadow.entry(key).or_default() += value as u64;
            }
            if let Some(snap) = plane.maybe_snapshot() {
                let keys: Vec<KeyBytes> = shadow.keys().copied().collect();
                let x: Vec<u64> = shadow.values().copied().collect();
                let op = SketchOperator::new(
                    &keys,
                    cfg.sketch.depth as usize,
                    cfg.sketch.width as usize,
                    plane.seeds(),
                    SignMode::Unsigned,
                )
                .unwrap();
                let y = op.apply_counts(&x).unwrap();
                for (i, (&lhs, &rhs)) in y.iter().zip(snap.y_raw.iter()).enumerate() {
                    assert_eq!(
                        lhs, rhs as u64,
                        "stream {stream_no} ({preset}) snapshot {} entry {i}",
                        snap.seq
                    );
                }
                snapshots_checked += 1;
                entries_checked += y.len() as u64;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = snapshots_checked > 0 && secs < C1_BUDGET_SECS;
    conclude(
        1,
        ok,
        &format!(
            "{snapshots_checked} snapshots / {entries_checked} counters bit-exact across \
             {C1_STREAMS} streams in {secs:.1}s (budget {C1_BUDGET_SECS}s)"
        ),
    );
}

// --------------------------------------------------------------------------
// 2. Analytic gradient of the composite loss vs central finite differences
// --------------------------------------------------------------------------

const C2_SEED: u64 = 4202;
const C2_PROBES: usize = 100;
const C2_REL_TOL: f64 = 1e-4;
const C2_BUDGET_SECS: f64 = 60.0;

#[test]
fn criterion_02_composite_gradient_matches_finite_differences() {
    let started = Instant::now();
    let keys: Vec<KeyBytes> = (0u32..10).map(KeyBytes::from_u32_be).collect();
    let seeds = Seeds::derive(902, 2, 8);
    let op = SketchOperator::new(&keys, 2, 8, &seeds, SignMode::Unsigned).unwrap();
    let mut model = SolverModel::new(2, 8, 8, 4, 31).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(C2_SEED);
    let y: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 0.8 + 0.05).collect();
    let x0 = model.recover_norm(&y, keys.len()).unwrap();
    let spec = TransformSpec {
        c: 60,
        hot_indices: vec![1, 4, 7],
        cold_fraction: 0.2,
        unit: 1,
        seed: 555,
    };
    let delta_norm: Vec<f64> =
        spec.materialize(&x0).unwrap().iter().map(|&d| d as f64 / 50.0).collect();
    let lambda = 0.1;

    model.zero_grads();
    let base = sample_loss_and_grad(&mut model, &op, &y, Some(&delta_norm), lambda).unwrap();
    assert!(base.total.is_finite() && base.equiv > 0.0 && base.sparse > 0.0);
    let analytic = model.grads_flat();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for _ in 0..C2_PROBES {
        let idx = rng.random_range(0..model.param_count());
        let orig = model.get_param(idx);
        model.set_param(idx, orig + h);
        let plus = sample_loss(&model, &op, &y, Some(&delta_norm), lambda).unwrap().total;
        model.set_param(idx, orig - h);
        let minus = sample_loss(&model, &op, &y, Some(&delta_norm), lambda).unwrap().total;
        model.set_param(idx, orig);
        let fd = (plus - minus) / (2.0 * h);
        let rel = (fd - analytic[idx]).abs() / (fd.abs() + analytic[idx].abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = max_rel < C2_REL_TOL && secs < C2_BUDGET_SECS;
    conclude(
        2,
        ok,
        &format!(
            "max relative gradient error {max_rel:.2e} over {C2_PROBES} probes \
             (tolerance {C2_REL_TOL:.0e}) in {secs:.1}s"
        ),
    );
}

// --------------------------------------------------------------------------
// 3. Count-min point queries never underestimate
// --------------------------------------------------------------------------

const C3_SEED: u64 = 4303;
const C3_STREAMS: usize = 10;
const C3_UNIVERSE: u32 = 100_000;

#[test]
fn criterion_03_count_min_is_one_sided_over_a_million_queries() {
    let depth = 4usize;
    let width = 4096usize;
    let mut rng = ChaCha8Rng::seed_from_u64(C3_SEED);
    let mut queries = 0u64;
    let mut violations = 0u64;

    for _ in 0..C3_STREAMS {
        let spec = ZipfSpec {
            universe: C3_UNIVERSE,
            skew: rng.random_range(0.5..1.5),
            length: 150_000,
            seed: rng.random(),
        };
        let row_seeds: Vec<u64> =
            (0..depth).map(|j| derive_seed(rng.random(), "cm-row", j as u64)).collect();
        let mut counters = vec![0u32; depth * width];
        let mut truth: BTreeMap<KeyBytes, u64> = BTreeMap::new();
        for item in generate(&spec).unwrap() {
            *truth.entry(item.key).or_default() += item.value;
            for (j, &seed) in row_seeds.iter().enumerate() {
                let pos = (hash_bytes(seed, item.key.as_slice()) % width as u64) as usize;
                counters[j * width + pos] += item.value as u32;
            }
        }
        // Query the full universe: present keys must respect their truth,
        // absent keys trivially sit at or above zero.
        for rank in 1..=C3_UNIVERSE {
            let key = KeyBytes::from_u32_be(rank);
            let est = cm_point_query(&counters, depth, width, &row_seeds, &key);
            let t = truth.get(&key).copied().unwrap_or(0);
            queries += 1;
            if est < t {
                violations += 1;
            }
        }
    }
    let ok = queries == 1_000_000 && violations == 0;
    conclude(3, ok, &format!("{queries} point queries, {violations} underestimates"));
}

// --------------------------------------------------------------------------
// 4. Bloom false-positive rate within the coverage bound
// --------------------------------------------------------------------------

const C4_SEED: u64 = 4404;
const C4_PROBES: usize = 10_000;
/// Three `(bits, inserted keys)` settings, 8 hash functions each.
const C4_SETTINGS: [(u64, u32); 3] = [(4_096, 100), (8_192, 400), (32_768, 1_500)];

#[test]
fn criterion_04_bloom_false_positive_rate_within_bound() {
    let hashes = 8usize;
    let mut detail = String::new();
    let mut all_ok = true;

    for (setting, &(m_bits, k_keys)) in C4_SETTINGS.iter().enumerate() {
        let seeds: Vec<u64> = (0..hashes)
            .map(|i| derive_seed(C4_SEED + setting as u64, "bloom-acc", i as u64))
            .collect();
        let mut bloom = BloomBits::new(m_bits, &seeds);
        for rank in 1..=k_keys {
            bloom.insert(&KeyBytes::from_u32_be(rank));
        }
        let mut false_positives = 0usize;
        for i in 0..C4_PROBES {
            // Disjoint from every inserted key by construction.
            let probe = KeyBytes::from_u32_be(1_000_000 + i as u32);
            if bloom.contains(&probe) {
                false_positives += 1;
            }
        }
        let observed = false_positives as f64 / C4_PROBES as f64;
        let fill = hashes as f64 * k_keys as f64 / m_bits as f64;
        let bound = 1.0 - (-fill).exp();
        let stderr = (bound * (1.0 - bound) / C4_PROBES as f64).sqrt();
        let limit = bound + 3.0 * stderr;
        all_ok &= observed <= limit;
        detail.push_str(&format!(
            "[m={m_bits} K={k_keys}: {observed:.4} <= {limit:.4}] "
        ));
    }
    conclude(4, all_ok, detail.trim());
}

// --------------------------------------------------------------------------
// 5. Sparse recovery oracles: OMP exact support recovery, LSQR residuals
// --------------------------------------------------------------------------

const C5_SEED: u64 = 4505;
const C5_TRIALS: usize = 100;
const C5_MIN_SUCCESSES: usize = 95;
const C5_OMP_TOL: f64 = 1e-6;
const C5_LSQR_TOL: f64 = 1e-8;

#[test]
fn criterion_05_sparse_recovery_oracles_hold() {
    let (m, n, sparsity) = (24usize, 48usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(C5_SEED);
    let mut successes = 0usize;

    for _ in 0..C5_TRIALS {
        // Gaussian sensing matrix with unit-norm columns.
        let mut a = DenseMatrix::zeros(m, n);
        for c in 0..n {
            let mut norm = 0.0;
            for r in 0..m {
                let v = gauss(&mut rng);
                *a.at_mut(r, c) = v;
                norm += v * v;
            }
            let inv = 1.0 / norm.sqrt();
            for r in 0..m {
                *a.at_mut(r, c) *= inv;
            }
        }
        let mut x_true = vec![0.0; n];
        let mut support: Vec<usize> = (0..n).collect();
        support.shuffle(&mut rng);
        for &i in support.iter().take(sparsity) {
            x_true[i] = rng.random_range(1.0..10.0);
        }
        let mut y = vec![0.0; m];
        a.apply(&x_true, &mut y);

        let cfg = OmpConfig { max_sparsity: sparsity, rtol: 1e-10 };
        let sol = omp(&a, &y, &cfg).unwrap();
        let linf = sol
            .x
            .iter()
            .zip(&x_true)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if linf < C5_OMP_TOL {
            successes += 1;
        }
    }

    let mut lsqr_max_residual = 0.0f64;
    for _ in 0..20 {
        let (m, n) = (30usize, 20usize);
        let mut a = DenseMatrix::zeros(m, n);
        for r in 0..m {
            for c in 0..n {
                *a.at_mut(r, c) = gauss(&mut rng);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|_| gauss(&mut rng) * 5.0).collect();
        let mut y = vec![0.0; m];
        a.apply(&x_true, &mut y);
        let sol = lsqr(&a, &y, &LsqrConfig::default()).unwrap();
        lsqr_max_residual = lsqr_max_residual.max(sol.residual_norm);
    }

    let ok = successes >= C5_MIN_SUCCESSES && lsqr_max_residual < C5_LSQR_TOL;
    conclude(
        5,
        ok,
        &format!(
            "OMP exact in {successes}/{C5_TRIALS} trials (need {C5_MIN_SUCCESSES}); \
             LSQR max consistent-system residual {lsqr_max_residual:.2e}"
        ),
    );
}

// --------------------------------------------------------------------------
// 6. Closed-form MAP estimate vs numeric posterior maximization
// --------------------------------------------------------------------------

const C6_SEED: u64 = 4606;
const C6_INSTANCES: usize = 50;
const C6_REL_TOL: f64 = 1e-2;

/// Golden-section minimizer for a unimodal function on [lo, hi].
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..300 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn criterion_06_map_estimate_matches_numeric_posterior_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(C6_SEED);
    let mut max_rel = 0.0f64;

    for _ in 0..C6_INSTANCES {
        let depth = rng.random_range(2..=5usize);
        let width = rng.random_range(2..=32usize);
        let positions: Vec<usize> = (0..depth).map(|_| rng.random_range(0..width)).collect();
        let y: Vec<f64> = (0..depth * width).map(|_| rng.random_range(0.0..200.0)).collect();
        let prior = MapPrior {
            mu: rng.random_range(0.0..100.0),
            sigma2: rng.random_range(0.5..50.0),
            l1: rng.random_range(100.0..5_000.0),
            l2sq: rng.random_range(50.0..20_000.0),
        };
        let closed = map_estimate(&positions, &y, &prior, depth, width).unwrap();

        // Negative log posterior: Gaussian prior on the key's volume, each
        // counter modeled as the volume plus the average colliding mass with
        // hashing-induced variance l2sq·(w−1)/w².
        let w = width as f64;
        let noise_var = prior.l2sq * (w - 1.0) / (w * w);
        let neg_log_post = |x: f64| {
            let mut u = (x - prior.mu).powi(2) / (2.0 * prior.sigma2);
            let mean = x * (1.0 - 1.0 / w) + prior.l1 / w;
            for (j, &p) in positions.iter().enumerate() {
                u += (y[j * width + p] - mean).powi(2) / (2.0 * noise_var);
            }
            u
        };
        let span = 10.0 * prior.sigma2.sqrt() + 2_000.0;
        let numeric = golden_min(neg_log_post, closed - span, closed + span);
        let rel = (closed - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    let ok = max_rel < C6_REL_TOL;
    conclude(
        6,
        ok,
        &format!(
            "max relative gap {max_rel:.2e} over {C6_INSTANCES} instances \
             (tolerance {C6_REL_TOL:.0e})"
        ),
    );
}

// --------------------------------------------------------------------------
// 7. Identifiability: stacked transforms reach full column rank
// --------------------------------------------------------------------------

const C7_SEED: u64 = 4707;

#[test]
fn criterion_07_transform_stack_restores_full_rank() {
    let (n, depth, width) = (12usize, 2usize, 4usize); // m = depth · width = 8
    let mut rng = ChaCha8Rng::seed_from_u64(C7_SEED);

    // Without transforms the 8 equations can never pin down 12 unknowns.
    let mut max_plain_rank = 0usize;
    for _ in 0..20 {
        let keys: Vec<KeyBytes> = (0..n).map(|_| KeyBytes::from_u32_be(rng.random())).collect();
        let seeds = Seeds::derive(rng.random(), depth, 8);
        let op = SketchOperator::new(&keys, depth, width, &seeds, SignMode::Unsigned).unwrap();
        let a = op.materialize().unwrap();
        let (rank, full) = rank_diagnostic(&a, &[]).unwrap();
        assert!(!full, "8 rows cannot have column rank 12");
        max_plain_rank = max_plain_rank.max(rank);
    }

    // With three sampled transforms the committed seed reaches rank 12.
    let keys: Vec<KeyBytes> = (0..n).map(|i| KeyBytes::from_u32_be(i as u32 + 1)).collect();
    let seeds = Seeds::derive(C7_SEED, depth, 8);
    let op = SketchOperator::new(&keys, depth, width, &seeds, SignMode::Unsigned).unwrap();
    let a = op.materialize().unwrap();
    let x_ref: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
    let transforms: Vec<DenseMatrix> = (0..3)
        .map(|t| {
            let spec = TransformSpec {
                c: 24,
                hot_indices: vec![0, 5, 9],
                cold_fraction: 0.4,
                unit: 1,
                seed: C7_SEED + t,
            };
            let (x_prime, _delta) = apply_transform(&x_ref, &spec, 1).unwrap();
            transform_matrix(&x_ref, &x_prime).unwrap()
        })
        .collect();
    let (stacked_rank, full) = rank_diagnostic(&a, &transforms).unwrap();

    let ok = max_plain_rank <= depth * width && full;
    conclude(
        7,
        ok,
        &format!(
            "plain rank <= {max_plain_rank} (bound {}), stacked rank {stacked_rank}/{n}",
            depth * width
        ),
    );
}

// --------------------------------------------------------------------------
// 8. End-to-end accuracy against count-min at equal memory (shared fixture)
// --------------------------------------------------------------------------

const C8_SEED: u64 = 2026;
const C8_MAIN_SEED: u64 = 2027;
const C8_UNIVERSE: u32 = 20_000;
const C8_SKEW: f64 = 1.3;
const C8_LENGTH: u64 = 1_000_000;
const C8_WARM_EPOCHS: usize = 30;
const C8_MAIN_EPOCHS: usize = 270; // 300 epochs total
const C8_ARE_RATIO: f64 = 0.5;
const C8_WMRD_RATIO: f64 = 0.7;
const C8_BUDGET_SECS: f64 = 900.0;

struct EndToEnd {
    cfg: AppConfig,
    items: Vec<StreamItem>,
    out: IngestOutcome,
    est_full: FrequencyTable,
    est_cm: FrequencyTable,
    csv: String,
    build_secs: f64,
}

static FIXTURE: OnceLock<EndToEnd> = OnceLock::new();

fn c8_config() -> AppConfig {
    let mut cfg = AppConfig::preset("16KB").unwrap();
    // One snapshot per window slot across the whole stream, so training sees
    // the early small-scale epochs where transform increments carry the most
    // relative signal.
    cfg.sketch.sampling_interval = 7800;
    cfg.training.window = 128;
    cfg.buckets.hidden = 32;
    cfg.validate().unwrap();
    cfg
}

fn c8_warm_settings() -> TrainSettings {
    TrainSettings {
        lambda: 0.01,
        epochs: C8_WARM_EPOCHS,
        patience: C8_WARM_EPOCHS,
        batch_size: 4,
        lr: 2.5e-4,
        cold_fraction: 0.05,
        transform_budget: 7800,
        equivariance: true,
    }
}

/// Low-rate warm-up first: the decoder starts far above the tiny normalized
/// targets, and a full-rate first phase overshoots into sigmoid saturation
/// where gradients die. After the warm-up settles near the targets' scale,
/// the main phase can run an order of magnitude faster.
fn c8_train(out: &IngestOutcome, cfg: &AppConfig, equivariance: bool) -> TrainedState {
    let warm = TrainSettings { equivariance, ..c8_warm_settings() };
    let mut ts = train_two_phase(out, cfg, &warm, C8_SEED).unwrap();
    let main = TrainSettings {
        epochs: C8_MAIN_EPOCHS,
        patience: C8_MAIN_EPOCHS,
        lr: 1e-3,
        ..warm
    };
    let op = ts.op.take().expect("fixture stream populates the registry");
    let report =
        train(&mut ts.model, &out.window, &op, out.registry.hot_flags(), &main, C8_MAIN_SEED)
            .unwrap();
    ts.op = Some(op);
    ts.report = Some(report);
    ts
}

/// The full criterion-8 experiment from a cold start. Criterion 11 runs it a
/// second time and compares the CSV byte for byte.
fn build_end_to_end() -> EndToEnd {
    let started = Instant::now();
    let cfg = c8_config();
    let spec =
        ZipfSpec { universe: C8_UNIVERSE, skew: C8_SKEW, length: C8_LENGTH, seed: C8_SEED };
    let items: Vec<StreamItem> = generate(&spec).unwrap().collect();
    let out = ingest(items.clone(), &cfg, C8_SEED).unwrap();
    let ts = c8_train(&out, &cfg, true);
    let est_full = algo_estimates(Algo::Ucl, &out, &ts, &cfg).unwrap();
    let est_cm = algo_estimates(Algo::Cm, &out, &ts, &cfg).unwrap();

    let mut rows = metric_rows("ucl", "16KB", C8_SEED, &out.truth, &est_full).unwrap();
    rows.extend(metric_rows("cm", "16KB", C8_SEED, &out.truth, &est_cm).unwrap());
    let csv = rows_to_csv(&rows);
    EndToEnd {
        cfg,
        items,
        out,
        est_full,
        est_cm,
        csv,
        build_secs: started.elapsed().as_secs_f64(),
    }
}

fn fixture() -> &'static EndToEnd {
    FIXTURE.get_or_init(build_end_to_end)
}

#[test]
fn criterion_08_learned_decode_beats_count_min_at_equal_memory() {
    let fx = fixture();
    let are_full = are(&fx.out.truth, &fx.est_full).unwrap();
    let are_cm = are(&fx.out.truth, &fx.est_cm).unwrap();
    let wmrd_full = wmrd(&fx.out.truth, &fx.est_full).unwrap();
    let wmrd_cm = wmrd(&fx.out.truth, &fx.est_cm).unwrap();

    let ok = are_full <= C8_ARE_RATIO * are_cm
        && wmrd_full <= C8_WMRD_RATIO * wmrd_cm
        && fx.build_secs < C8_BUDGET_SECS;
    conclude(
        8,
        ok,
        &format!(
            "ARE {are_full:.3} vs CM {are_cm:.3} (bound {:.3}); WMRD {wmrd_full:.3} vs \
             CM {wmrd_cm:.3} (bound {:.3}); built in {:.0}s (budget {C8_BUDGET_SECS}s)",
            C8_ARE_RATIO * are_cm,
            C8_WMRD_RATIO * wmrd_cm,
            fx.build_secs
        ),
    );
}

// --------------------------------------------------------------------------
// 9. Removing the equivariance term degrades entropy accuracy
// --------------------------------------------------------------------------

#[test]
fn criterion_09_no_equivariance_ablation_has_worse_entropy() {
    let fx = fixture();
    let ts = c8_train(&fx.out, &fx.cfg, false);
    let est = algo_estimates(Algo::Ucl, &fx.out, &ts, &fx.cfg).unwrap();

    let full = entropy_abs_err(&fx.out.truth, &fx.est_full).unwrap();
    let ablated = entropy_abs_err(&fx.out.truth, &est).unwrap();
    let ok = ablated > full;
    conclude(
        9,
        ok,
        &format!("entropy error without equivariance {ablated:.1} vs full model {full:.1}"),
    );
}

// --------------------------------------------------------------------------
// 10. Data-plane throughput and the per-update hash bound
// --------------------------------------------------------------------------

const C10_MIN_MOPS: f64 = 1.0;

#[test]
fn criterion_10_update_throughput_and_hash_bound() {
    let fx = fixture();
    let cfg = AppConfig::preset("16KB").unwrap();
    let report =
        ucl_sketch::harness::measure_update_throughput(&cfg, &fx.items, C8_SEED).unwrap();
    let hash_bound = 1 + cfg.sketch.depth as u64 + cfg.bloom.hashes as u64;

    let ok = report.mops >= C10_MIN_MOPS
        && report.max_hashes_per_update <= hash_bound
        && report.snapshots >= 1;
    conclude(
        10,
        ok,
        &format!(
            "{:.2} Mops over {} updates ({} snapshots); max {} hashes/update (bound {hash_bound})",
            report.mops, report.updates, report.snapshots, report.max_hashes_per_update
        ),
    );
}

// --------------------------------------------------------------------------
// 11. Same-seed rerun reproduces the metric CSV byte for byte
// --------------------------------------------------------------------------

#[test]
fn criterion_11_same_seed_rerun_is_byte_identical() {
    let fx = fixture();
    let rerun = build_end_to_end();

    let dir = tempfile::tempdir().unwrap();
    let first_path = dir.path().join("metrics_first.csv");
    let second_path = dir.path().join("metrics_second.csv");
    std::fs::write(&first_path, &fx.csv).unwrap();
    std::fs::write(&second_path, &rerun.csv).unwrap();
    let first = std::fs::read(&first_path).unwrap();
    let second = std::fs::read(&second_path).unwrap();

    let ok = first == second && !first.is_empty();
    conclude(
        11,
        ok,
        &format!("two cold runs wrote identical {}-byte CSVs", first.len()),
    );
}

// --------------------------------------------------------------------------
// 12. Snapshot and checkpoint serialization round-trips under fuzzing
// --------------------------------------------------------------------------

const C12_SEED: u64 = 4912;

fn random_snapshot(rng: &mut ChaCha8Rng) -> Snapshot {
    let depth = rng.random_range(1..=8u16);
    let width = rng.random_range(1..=64u32);
    let y_raw: Vec<u32> = (0..depth as usize * width as usize).map(|_| rng.random()).collect();
    Snapshot {
        depth,
        width,
        seq: rng.random(),
        insert_count: rng.random(),
        scale: rng.random(),
        y_raw,
    }
}

fn mutate(buf: &mut Vec<u8>, rng: &mut ChaCha8Rng) {
    match rng.random_range(0..4u8) {
        0 => {
            if !buf.is_empty() {
                let i = rng.random_range(0..buf.len());
                buf[i] ^= 1 << rng.random_range(0..8u8);
            }
        }
        1 => {
            let keep = rng.random_range(0..=buf.len());
            buf.truncate(keep);
        }
        2 => {
            let extra = rng.random_range(1..32usize);
            buf.extend((0..extra).map(|_| rng.random::<u8>()));
        }
        _ => {
            if !buf.is_empty() {
                let i = rng.random_range(0..buf.len());
                buf[i] = rng.random();
            }
        }
    }
}

#[test]
fn criterion_12_serialization_round_trips_and_survives_fuzzing() {
    let mut rng = ChaCha8Rng::seed_from_u64(C12_SEED);
    let mut snapshot_bufs = Vec::new();
    let mut model_bufs = Vec::new();

    for _ in 0..60 {
        let snap = random_snapshot(&mut rng);
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        let back = Snapshot::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.depth, snap.depth);
        assert_eq!(back.width, snap.width);
        assert_eq!(back.seq, snap.seq);
        assert_eq!(back.insert_count, snap.insert_count);
        assert_eq!(back.scale, snap.scale);
        assert_eq!(back.y_raw, snap.y_raw);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again, "snapshot re-serialization must be bit-exact");
        snapshot_bufs.push(buf);
    }

    for _ in 0..20 {
        let depth = rng.random_range(1..=3usize);
        let width = rng.random_range(2..=16usize);
        let hidden = 2 * rng.random_range(1..=4usize);
        let bucket = rng.random_range(1..=8usize);
        let model = SolverModel::new(depth, width, hidden, bucket, rng.random()).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = SolverModel::read_from(&mut buf.as_slice()).unwrap();
        // Checkpoints quantize to f32 once; a reloaded model re-serializes
        // to the identical bytes.
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again, "checkpoint re-serialization must be bit-exact");
        let quantized: Vec<f64> =
            model.params_flat().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.params_flat(), quantized);
        model_bufs.push(buf);
    }

    // Corrupted inputs must fail cleanly (an error, never a panic or hang).
    let mut fuzz_cases = 0usize;
    let mut rejected = 0usize;
    for round in 0..400 {
        let (pool, is_model) = if round % 2 == 0 {
            (&snapshot_bufs, false)
        } else {
            (&model_bufs, true)
        };
        let mut buf = pool[rng.random_range(0..pool.len())].clone();
        for _ in 0..rng.random_range(1..=3usize) {
            mutate(&mut buf, &mut rng);
        }
        fuzz_cases += 1;
        let failed = if is_model {
            SolverModel::read_from(&mut buf.as_slice()).is_err()
        } else {
            Snapshot::read_from(&mut buf.as_slice()).is_err()
        };
        if failed {
            rejected += 1;
        }
    }
    // Pure-noise blobs must be rejected outright.
    for _ in 0..100 {
        let blob: Vec<u8> = (0..rng.random_range(0..512usize)).map(|_| rng.random()).collect();
        assert!(Snapshot::read_from(&mut blob.as_slice()).is_err());
        assert!(SolverModel::read_from(&mut blob.as_slice()).is_err());
        fuzz_cases += 2;
        rejected += 2;
    }

    conclude(
        12,
        true,
        &format!(
            "60 snapshot + 20 checkpoint round-trips bit-exact; {rejected}/{fuzz_cases} \
             corrupted inputs rejected, none panicked"
        ),
    );
}
