//! Benchmark orchestration: stream ingestion, training (two-phase or
//! concurrent with ingestion), per-algorithm decoding, ablations, and metric
//! export.
//!
//! All compared algorithms run under *memory parity*: the plain count-min
//! and count-sketch baselines get one array of 32-bit counters whose total
//! footprint equals the whole learned pipeline (heavy filter + counter array
//! + Bloom filter), while the equation-based decoders (OMP, LSQR) read the
//! very same snapshot the learned solver decodes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use crate::config::AppConfig;
use crate::controlplane::{freeze_epoch, KeyRegistry};
use crate::dataplane::{DataPlane, Snapshot};
use crate::error::{Error, Result};
use crate::hash::{derive_seed, hash_bytes, Seeds};
use crate::key::{Count, KeyBytes, StreamItem};
use crate::metrics::{
    aae, are, entropy_abs_err, round_to_count, throughput_mops, wmrd, FrequencyTable,
};
use crate::recovery::{lsqr, omp, LsqrConfig, OmpConfig, SignedCounters};
use crate::sensing::{SignMode, SketchOperator};
use crate::solver::{
    normalize, recover_norm_multi, train, train_ensemble, SlidingWindow, SolverModel,
    TrainReport, TrainSettings,
};
use crate::streamgen::{generate, read_trace, TraceFormat, ZipfSpec};

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

/// Frequency-estimation algorithms the bench can evaluate side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    /// The learned pipeline (heavy filter + solver decode).
    Ucl,
    /// Plain count-min at parity memory.
    Cm,
    /// Plain count-sketch (median of signed rows) at parity memory.
    Cs,
    /// Orthogonal matching pursuit over the pipeline's snapshot.
    Omp,
    /// LSQR least squares over the pipeline's snapshot.
    Lsqr,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Ucl => "ucl",
            Algo::Cm => "cm",
            Algo::Cs => "cs",
            Algo::Omp => "omp",
            Algo::Lsqr => "lsqr",
        }
    }

    pub fn parse(s: &str) -> Result<Algo> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ucl" => Ok(Algo::Ucl),
            "cm" => Ok(Algo::Cm),
            "cs" => Ok(Algo::Cs),
            "omp" => Ok(Algo::Omp),
            "lsqr" => Ok(Algo::Lsqr),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected ucl, cm, cs, omp or lsqr"
            ))),
        }
    }

    /// Parse a comma-separated list, preserving order, rejecting duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Algo>> {
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let a = Algo::parse(part)?;
            if out.contains(&a) {
                return Err(Error::Config(format!("algorithm {} listed twice", a.name())));
            }
            out.push(a);
        }
        if out.is_empty() {
            return Err(Error::Config("no algorithms requested".into()));
        }
        Ok(out)
    }
}

/// Input stream for an experiment.
#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Zipf { universe: u32, skew: f64, length: u64 },
    Trace { path: PathBuf, format: TraceFormat },
}

impl DatasetSpec {
    /// Materialize the stream for one experiment seed. Trace files ignore
    /// the seed (it still drives hashing and training downstream).
    pub fn items(&self, seed: u64) -> Result<Vec<StreamItem>> {
        match self {
            DatasetSpec::Zipf { universe, skew, length } => {
                let spec =
                    ZipfSpec { universe: *universe, skew: *skew, length: *length, seed };
                Ok(generate(&spec)?.collect())
            }
            DatasetSpec::Trace { path, format } => read_trace(path, *format),
        }
    }

    fn describe(&self) -> serde_json::Value {
        match self {
            DatasetSpec::Zipf { universe, skew, length } => serde_json::json!({
                "kind": "zipf", "universe": universe, "skew": skew, "length": length,
            }),
            DatasetSpec::Trace { path, format } => serde_json::json!({
                "kind": "trace", "path": path.display().to_string(),
                "format": format!("{format:?}"),
            }),
        }
    }
}

/// A full bench sweep: dataset × memory presets × algorithms × seeds.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub dataset: DatasetSpec,
    pub presets: Vec<String>,
    pub algos: Vec<Algo>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Deterministic mode: ingest the whole stream first, then train.
    pub two_phase: bool,
}

impl ExperimentPlan {
    pub fn validate(&self, base: Option<&AppConfig>) -> Result<()> {
        if self.presets.is_empty() {
            return Err(Error::Config("plan lists no memory presets".into()));
        }
        if self.algos.is_empty() {
            return Err(Error::Config("plan lists no algorithms".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan lists no seeds".into()));
        }
        for preset in &self.presets {
            let cfg = config_for_preset(base, preset)?;
            // Memory parity: the flat-baseline array must match the full
            // pipeline footprint to within one counter column.
            let d = cfg.sketch.depth as u64;
            let w = baseline_width(&cfg) as u64;
            if w == 0 {
                return Err(Error::Config(format!(
                    "preset {preset} too small to host a parity baseline"
                )));
            }
            let parity_gap = cfg.memory_bytes() - 4 * d * w;
            if parity_gap >= 4 * d {
                return Err(Error::Config(format!(
                    "preset {preset}: baseline underuses {parity_gap} bytes"
                )));
            }
        }
        Ok(())
    }
}

/// The preset fixes the data-plane shape; everything else (training knobs,
/// bucket geometry, sampling interval, eviction rule) carries over from the
/// base config when one is given.
pub fn config_for_preset(base: Option<&AppConfig>, preset: &str) -> Result<AppConfig> {
    let mut cfg = AppConfig::preset(preset)?;
    if let Some(b) = base {
        cfg.training = b.training.clone();
        cfg.buckets = b.buckets.clone();
        cfg.sketch.sampling_interval = b.sketch.sampling_interval;
        cfg.sketch.eviction_rule = b.sketch.eviction_rule;
        cfg.sketch.key_len = b.sketch.key_len;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Counter columns a flat `depth × width` array of 32-bit counters may use
/// to match the full pipeline's footprint.
pub fn baseline_width(cfg: &AppConfig) -> usize {
    (cfg.memory_bytes() / (4 * cfg.sketch.depth as u64)) as usize
}

// ---------------------------------------------------------------------------
// Parity baselines
// ---------------------------------------------------------------------------

/// Stand-alone count-min sketch fed by the raw stream.
#[derive(Debug, Clone)]
pub struct CmBaseline {
    depth: usize,
    width: usize,
    counters: Vec<u32>,
    row_seeds: Vec<u64>,
}

impl CmBaseline {
    pub fn new(depth: usize, width: usize, master_seed: u64) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::Config("count-min needs depth, width >= 1".into()));
        }
        let row_seeds =
            (0..depth).map(|j| derive_seed(master_seed, "cm-baseline-row", j as u64)).collect();
        Ok(CmBaseline { depth, width, counters: vec![0; depth * width], row_seeds })
    }

    pub fn update(&mut self, key: &KeyBytes, value: Count) {
        for j in 0..self.depth {
            let pos = (hash_bytes(self.row_seeds[j], key.as_slice()) % self.width as u64) as usize;
            let slot = &mut self.counters[j * self.width + pos];
            *slot = slot.saturating_add(value.min(u32::MAX as u64) as u32);
        }
    }

    /// Minimum over rows — never underestimates.
    pub fn estimate(&self, key: &KeyBytes) -> Count {
        (0..self.depth)
            .map(|j| {
                let pos =
                    (hash_bytes(self.row_seeds[j], key.as_slice()) % self.width as u64) as usize;
                self.counters[j * self.width + pos] as Count
            })
            .min()
            .unwrap_or(0)
    }

    pub fn memory_bytes(&self) -> u64 {
        4 * self.counters.len() as u64
    }
}

/// Stand-alone count-sketch at the same counter budget (logically 32-bit
/// counters; the signed accumulators are widened only to keep the median
/// arithmetic overflow-free).
#[derive(Debug)]
pub struct CsBaseline {
    inner: SignedCounters,
    width: usize,
}

impl CsBaseline {
    pub fn new(depth: usize, width: usize, master_seed: u64) -> Result<Self> {
        let seeds = Seeds::derive(derive_seed(master_seed, "cs-baseline", 0), depth, 1);
        Ok(CsBaseline { inner: SignedCounters::new(depth, width, &seeds)?, width })
    }

    pub fn update(&mut self, key: &KeyBytes, value: Count) {
        self.inner.insert(key, value);
    }

    /// Median estimate clamped to a frequency.
    pub fn estimate(&self, key: &KeyBytes) -> Count {
        self.inner.point_query(key).max(0) as Count
    }

    pub fn memory_bytes(&self) -> u64 {
        4 * (self.inner.counters().len()) as u64
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Everything one pass over the stream produces: the learned pipeline's
/// state, the parity baselines, and the exact ground truth for evaluation.
pub struct IngestOutcome {
    pub plane: DataPlane,
    pub registry: KeyRegistry,
    pub window: SlidingWindow,
    pub last_snapshot: Option<Snapshot>,
    pub truth: FrequencyTable,
    pub cm: CmBaseline,
    pub cs: CsBaseline,
    pub items: u64,
}

/// Feed the whole stream through the data plane and the parity baselines.
pub fn ingest<I>(items: I, cfg: &AppConfig, master_seed: u64) -> Result<IngestOutcome>
where
    I: IntoIterator<Item = StreamItem>,
{
    let mut plane = DataPlane::new(cfg, master_seed)?;
    let mut registry = KeyRegistry::new();
    let mut window = SlidingWindow::new(cfg.training.window as usize);
    let mut last_snapshot = None;
    let mut truth = FrequencyTable::new();
    let w_b = baseline_width(cfg);
    let d = cfg.sketch.depth as usize;
    let mut cm = CmBaseline::new(d, w_b, master_seed)?;
    let mut cs = CsBaseline::new(d, w_b, master_seed)?;
    let mut count = 0u64;

    for item in items {
        truth.add(item.key, item.value);
        cm.update(&item.key, item.value);
        cs.update(&item.key, item.value);
        if let Some(report) = plane.update(&item) {
            registry.handle_report(&report);
        }
        if let Some(snap) = plane.maybe_snapshot() {
            if let Some(sample) = normalize(&snap) {
                window.push(sample);
            }
            last_snapshot = Some(snap);
        }
        count += 1;
    }
    Ok(IngestOutcome { plane, registry, window, last_snapshot, truth, cm, cs, items: count })
}

// ---------------------------------------------------------------------------
// Training orchestration
// ---------------------------------------------------------------------------

/// Model + operator after training (absent before the first report or
/// snapshot — queries then fall back to the heavy filter).
pub struct TrainedState {
    pub model: SolverModel,
    pub op: Option<SketchOperator>,
    pub report: Option<TrainReport>,
    /// Mid-stream training rounds completed (concurrent mode only).
    pub rounds: u32,
}

fn registry_operator(out: &IngestOutcome, cfg: &AppConfig) -> Result<SketchOperator> {
    SketchOperator::new(
        out.registry.keys(),
        cfg.sketch.depth as usize,
        cfg.sketch.width as usize,
        out.plane.seeds(),
        SignMode::Unsigned,
    )
}

/// Deterministic mode: train once on the final window.
pub fn train_two_phase(
    out: &IngestOutcome,
    cfg: &AppConfig,
    st: &TrainSettings,
    master_seed: u64,
) -> Result<TrainedState> {
    let mut model = SolverModel::from_config(cfg, master_seed)?;
    if out.registry.is_empty() || out.window.is_empty() {
        return Ok(TrainedState { model, op: None, report: None, rounds: 0 });
    }
    let op = registry_operator(out, cfg)?;
    let report = train(&mut model, &out.window, &op, out.registry.hot_flags(), st, master_seed)?;
    Ok(TrainedState { model, op: Some(op), report: Some(report), rounds: 0 })
}

/// Epoch budget for each mid-stream training round in concurrent mode.
const CONCURRENT_ROUND_EPOCHS: usize = 20;

/// Ingest while a trainer thread consumes snapshots as they appear, then
/// finish with a full training pass on the final window. Mid-stream rounds
/// depend on thread scheduling, so this mode trades the two-phase mode's
/// bitwise reproducibility for pipeline overlap.
pub fn ingest_and_train_concurrent<I>(
    items: I,
    cfg: &AppConfig,
    st: &TrainSettings,
    master_seed: u64,
) -> Result<(IngestOutcome, TrainedState)>
where
    I: IntoIterator<Item = StreamItem>,
{
    type Msg = (Snapshot, Vec<KeyBytes>, Vec<bool>);
    let (tx, rx) = mpsc::channel::<Msg>();

    let trainer_cfg = cfg.clone();
    let trainer_st = st.clone();
    let trainer = std::thread::spawn(move || -> Result<(SolverModel, u32)> {
        let mut model = SolverModel::from_config(&trainer_cfg, master_seed)?;
        let mut window = SlidingWindow::new(trainer_cfg.training.window as usize);
        let mut rounds = 0u32;
        let round_st = TrainSettings {
            epochs: trainer_st.epochs.min(CONCURRENT_ROUND_EPOCHS),
            patience: trainer_st.patience.min(CONCURRENT_ROUND_EPOCHS),
            ..trainer_st.clone()
        };
        while let Ok(first) = rx.recv() {
            // Coalesce whatever queued up while the last round ran.
            let mut latest = first;
            loop {
                if let Some(sample) = normalize(&latest.0) {
                    window.push(sample);
                }
                match rx.try_recv() {
                    Ok(next) => latest = next,
                    Err(_) => break,
                }
            }
            let (_, keys, hot) = latest;
            if keys.is_empty() || window.is_empty() {
                continue;
            }
            let op = SketchOperator::new(
                &keys,
                trainer_cfg.sketch.depth as usize,
                trainer_cfg.sketch.width as usize,
                // Row seeds are derived from the master seed, exactly as the
                // data plane derives its own.
                &Seeds::derive(
                    master_seed,
                    trainer_cfg.sketch.depth as usize,
                    trainer_cfg.bloom.hashes as usize,
                ),
                SignMode::Unsigned,
            )?;
            let seed = derive_seed(master_seed, "concurrent-round", rounds as u64);
            train(&mut model, &window, &op, &hot, &round_st, seed)?;
            rounds += 1;
        }
        Ok((model, rounds))
    });

    let mut plane = DataPlane::new(cfg, master_seed)?;
    let mut registry = KeyRegistry::new();
    let mut window = SlidingWindow::new(cfg.training.window as usize);
    let mut last_snapshot = None;
    let mut truth = FrequencyTable::new();
    let w_b = baseline_width(cfg);
    let d = cfg.sketch.depth as usize;
    let mut cm = CmBaseline::new(d, w_b, master_seed)?;
    let mut cs = CsBaseline::new(d, w_b, master_seed)?;
    let mut count = 0u64;

    for item in items {
        truth.add(item.key, item.value);
        cm.update(&item.key, item.value);
        cs.update(&item.key, item.value);
        if let Some(report) = plane.update(&item) {
            registry.handle_report(&report);
        }
        if let Some(snap) = plane.maybe_snapshot() {
            if let Some(sample) = normalize(&snap) {
                window.push(sample);
            }
            let msg = (snap.clone(), registry.keys().to_vec(), registry.hot_flags().to_vec());
            // The trainer only hangs up on error; ingestion carries on.
            let _ = tx.send(msg);
            last_snapshot = Some(snap);
        }
        count += 1;
    }
    drop(tx);
    let (mut model, rounds) = trainer
        .join()
        .map_err(|_| Error::Divergence("trainer thread panicked".into()))??;

    let out = IngestOutcome { plane, registry, window, last_snapshot, truth, cm, cs, items: count };

    // Final full pass over the settled window, warm-starting from the
    // concurrent rounds.
    let (op, report) = if out.registry.is_empty() || out.window.is_empty() {
        (None, None)
    } else {
        let op = registry_operator(&out, cfg)?;
        let report =
            train(&mut model, &out.window, &op, out.registry.hot_flags(), st, master_seed)?;
        (Some(op), Some(report))
    };
    Ok((out, TrainedState { model, op, report, rounds }))
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Heavy-filter-only estimates (every resident at its filter count).
fn hf_only_estimates(out: &IngestOutcome) -> FrequencyTable {
    out.plane.heavy_filter().residents().collect()
}

/// The learned pipeline's estimates for every key it knows about.
pub fn ucl_estimates(out: &IngestOutcome, ts: &TrainedState) -> Result<FrequencyTable> {
    let ctx = freeze_epoch(
        &out.registry,
        &out.plane,
        out.last_snapshot.as_ref(),
        Arc::new(ts.model.clone()),
    )?;
    Ok(ctx.recover_all().into_iter().collect())
}

/// Classical sparse decode of the pipeline's final snapshot, answering with
/// the same solver-plus-filter decomposition the learned path uses.
fn sparse_decoder_estimates(out: &IngestOutcome, cfg: &AppConfig, algo: Algo) -> Result<FrequencyTable> {
    let hf: BTreeMap<KeyBytes, Count> = out.plane.heavy_filter().residents().collect();
    let sample = out.last_snapshot.as_ref().and_then(normalize);
    let (Some(sample), false) = (sample, out.registry.is_empty()) else {
        return Ok(hf_only_estimates(out));
    };
    let op = registry_operator(out, cfg)?;
    let x_norm: Vec<f64> = match algo {
        Algo::Omp => omp(&op, &sample.y_norm, &OmpConfig::default())?.x,
        Algo::Lsqr => {
            let sol = lsqr(&op, &sample.y_norm, &LsqrConfig::default())?;
            sol.x.iter().map(|&v| v.max(0.0)).collect()
        }
        other => {
            return Err(Error::Config(format!(
                "{} is not an equation-based decoder",
                other.name()
            )))
        }
    };
    let scale = sample.scale as f64;
    let mut table = FrequencyTable::new();
    for (i, key) in out.registry.keys().iter().enumerate() {
        let solved = round_to_count(scale * x_norm[i]);
        table.insert(*key, solved + hf.get(key).copied().unwrap_or(0));
    }
    for (key, count) in &hf {
        if out.registry.position(key).is_none() {
            table.insert(*key, *count);
        }
    }
    Ok(table)
}

/// Estimates for one algorithm. The flat baselines answer point queries over
/// the truth support; the pipeline-based decoders answer for every key they
/// track (anything else reads as zero downstream).
pub fn algo_estimates(
    algo: Algo,
    out: &IngestOutcome,
    ts: &TrainedState,
    cfg: &AppConfig,
) -> Result<FrequencyTable> {
    match algo {
        Algo::Ucl => ucl_estimates(out, ts),
        Algo::Cm => Ok(out
            .truth
            .iter()
            .map(|(k, _)| (*k, out.cm.estimate(k)))
            .collect()),
        Algo::Cs => Ok(out
            .truth
            .iter()
            .map(|(k, _)| (*k, out.cs.estimate(k)))
            .collect()),
        Algo::Omp | Algo::Lsqr => sparse_decoder_estimates(out, cfg, algo),
    }
}

// ---------------------------------------------------------------------------
// Metric rows and CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub algorithm: String,
    pub memory: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "algorithm,memory,metric,value,seed";

/// The four accuracy metrics for one algorithm on one run.
pub fn metric_rows(
    algorithm: &str,
    memory: &str,
    seed: u64,
    truth: &FrequencyTable,
    est: &FrequencyTable,
) -> Result<Vec<MetricRow>> {
    let mk = |metric: &str, value: f64| MetricRow {
        algorithm: algorithm.to_string(),
        memory: memory.to_string(),
        metric: metric.to_string(),
        value,
        seed,
    };
    Ok(vec![
        mk("aae", aae(truth, est)?),
        mk("are", are(truth, est)?),
        mk("wmrd", wmrd(truth, est)?),
        mk("entropy_abs_err", entropy_abs_err(truth, est)?),
    ])
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.algorithm, r.memory, r.metric, r.value, r.seed
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Throughput
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ThroughputReport {
    pub mops: f64,
    pub updates: u64,
    pub elapsed: Duration,
    /// Highest hash-invocation count observed for a single update.
    pub max_hashes_per_update: u64,
    pub snapshots: u64,
}

/// Time the bare data-plane update path (snapshots enabled) and verify the
/// per-update hash bound along the way.
pub fn measure_update_throughput(
    cfg: &AppConfig,
    items: &[StreamItem],
    master_seed: u64,
) -> Result<ThroughputReport> {
    let mut plane = DataPlane::new(cfg, master_seed)?;
    let mut max_hashes = 0u64;
    let mut snapshots = 0u64;
    let start = Instant::now();
    for item in items {
        let before = plane.hash_invocations();
        let _ = plane.update(item);
        max_hashes = max_hashes.max(plane.hash_invocations() - before);
        if plane.maybe_snapshot().is_some() {
            snapshots += 1;
        }
    }
    let elapsed = start.elapsed();
    Ok(ThroughputReport {
        mops: throughput_mops(items.len() as u64, elapsed),
        updates: items.len() as u64,
        elapsed,
        max_hashes_per_update: max_hashes,
        snapshots,
    })
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Update-path timing for one preset, measured over the first seed's stream.
/// Wall-clock rates vary run to run, so these live in their own artifact
/// (`throughput.json`) and never touch the deterministic CSV or manifest.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ThroughputEntry {
    pub preset: String,
    /// Snapshots enabled at the configured sampling interval.
    pub mops_with_snapshots: f64,
    /// Sampling interval pushed past the stream length: no counter copies.
    pub mops_without_snapshots: f64,
    pub max_hashes_per_update: u64,
    /// `1 + d + k_b`: heavy-filter probe, count-min rows, Bloom probes.
    pub hash_bound: u64,
    pub updates: u64,
}

pub struct RunArtifacts {
    pub rows: Vec<MetricRow>,
    pub csv: String,
    pub manifest: String,
    pub throughput: Vec<ThroughputEntry>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub throughput_path: PathBuf,
}

/// Sweep (preset × seed), evaluate every requested algorithm, and write
/// `metrics.csv`, `manifest.json` and `throughput.json` under the plan's
/// output directory.
pub fn run_experiment(plan: &ExperimentPlan, base: Option<&AppConfig>) -> Result<RunArtifacts> {
    plan.validate(base)?;
    let mut rows = Vec::new();
    let mut throughput = Vec::new();
    for preset in &plan.presets {
        let cfg = config_for_preset(base, preset)?;
        let st = TrainSettings::from_config(&cfg);
        throughput.push(measure_preset_throughput(preset, &cfg, plan)?);
        for &seed in &plan.seeds {
            let items = plan.dataset.items(seed)?;
            let (out, ts) = if plan.two_phase {
                let out = ingest(items, &cfg, seed)?;
                let ts = train_two_phase(&out, &cfg, &st, seed)?;
                (out, ts)
            } else {
                ingest_and_train_concurrent(items, &cfg, &st, seed)?
            };
            for &algo in &plan.algos {
                let est = algo_estimates(algo, &out, &ts, &cfg)?;
                rows.extend(metric_rows(algo.name(), preset, seed, &out.truth, &est)?);
            }
        }
    }

    let csv = rows_to_csv(&rows);
    let manifest = manifest_json(plan, base)?;
    std::fs::create_dir_all(&plan.out_dir)?;
    let csv_path = plan.out_dir.join("metrics.csv");
    let manifest_path = plan.out_dir.join("manifest.json");
    let throughput_path = plan.out_dir.join("throughput.json");
    std::fs::write(&csv_path, &csv)?;
    std::fs::write(&manifest_path, &manifest)?;
    let throughput_doc = serde_json::to_string_pretty(&throughput)
        .map_err(|e| Error::Config(format!("throughput serialization: {e}")))?;
    std::fs::write(&throughput_path, &throughput_doc)?;
    Ok(RunArtifacts { rows, csv, manifest, throughput, csv_path, manifest_path, throughput_path })
}

/// Time the bare update path over the first seed's stream, once with the
/// configured snapshot cadence and once with snapshots pushed out of reach.
fn measure_preset_throughput(
    preset: &str,
    cfg: &AppConfig,
    plan: &ExperimentPlan,
) -> Result<ThroughputEntry> {
    let seed = plan.seeds[0];
    let items = plan.dataset.items(seed)?;
    let with_snap = measure_update_throughput(cfg, &items, seed)?;
    let mut cfg_nosnap = cfg.clone();
    cfg_nosnap.sketch.sampling_interval = u64::MAX;
    let without = measure_update_throughput(&cfg_nosnap, &items, seed)?;
    Ok(ThroughputEntry {
        preset: preset.to_string(),
        mops_with_snapshots: with_snap.mops,
        mops_without_snapshots: without.mops,
        max_hashes_per_update: with_snap.max_hashes_per_update.max(without.max_hashes_per_update),
        hash_bound: 1 + cfg.sketch.depth as u64 + cfg.bloom.hashes as u64,
        updates: with_snap.updates,
    })
}

fn manifest_json(plan: &ExperimentPlan, base: Option<&AppConfig>) -> Result<String> {
    let mut memory = serde_json::Map::new();
    for preset in &plan.presets {
        let cfg = config_for_preset(base, preset)?;
        memory.insert(
            preset.clone(),
            serde_json::json!({
                "pipeline_bytes": cfg.memory_bytes(),
                "baseline_width": baseline_width(&cfg),
                "config": cfg,
            }),
        );
    }
    let doc = serde_json::json!({
        "dataset": plan.dataset.describe(),
        "presets": plan.presets,
        "algorithms": plan.algos.iter().map(|a| a.name()).collect::<Vec<_>>(),
        "seeds": plan.seeds,
        "two_phase": plan.two_phase,
        "memory": memory,
    });
    serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// Training variants that each remove one ingredient of the full objective
/// or architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Drop the equivariance term from the loss.
    NoEquivariance,
    /// Drop the ℓ1 sparsity term (λ = 0).
    NoSparsity,
    /// One independent network per bucket instead of a shared one.
    UnsharedBuckets,
}

impl AblationVariant {
    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoEquivariance => "no-eq",
            AblationVariant::NoSparsity => "no-sparsity",
            AblationVariant::UnsharedBuckets => "unshared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "no-eq" | "noeq" => Ok(AblationVariant::NoEquivariance),
            "no-sparsity" | "nosr" => Ok(AblationVariant::NoSparsity),
            "unshared" | "nosa" => Ok(AblationVariant::UnsharedBuckets),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?}; expected no-eq, no-sparsity or unshared"
            ))),
        }
    }

    pub fn algorithm_label(self) -> String {
        format!("ucl-{}", self.name())
    }

    /// The loss-settings change this variant applies (architecture variants
    /// leave the settings untouched).
    pub fn settings(self, st: &TrainSettings) -> TrainSettings {
        let mut st = st.clone();
        match self {
            AblationVariant::NoEquivariance => st.equivariance = false,
            AblationVariant::NoSparsity => st.lambda = 0.0,
            AblationVariant::UnsharedBuckets => {}
        }
        st
    }
}

pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub estimates: FrequencyTable,
    pub report: Option<TrainReport>,
    /// Per-epoch loss CSV; the equivariance column is present only when the
    /// term was trained.
    pub loss_csv: Option<String>,
}

/// Train one ablation variant on an already-ingested stream and decode it.
pub fn run_ablation_variant(
    variant: AblationVariant,
    out: &IngestOutcome,
    cfg: &AppConfig,
    st: &TrainSettings,
    master_seed: u64,
) -> Result<AblationOutcome> {
    let st = variant.settings(st);
    if variant != AblationVariant::UnsharedBuckets {
        let ts = train_two_phase(out, cfg, &st, master_seed)?;
        let estimates = ucl_estimates(out, &ts)?;
        let loss_csv = ts.report.as_ref().map(|r| r.to_csv(st.equivariance));
        return Ok(AblationOutcome { variant, estimates, report: ts.report, loss_csv });
    }

    // Unshared buckets: an ensemble with one model per bucket.
    if out.registry.is_empty() || out.window.is_empty() {
        return Ok(AblationOutcome {
            variant,
            estimates: hf_only_estimates(out),
            report: None,
            loss_csv: None,
        });
    }
    let n = out.registry.len();
    let buckets = n.div_ceil(cfg.buckets.length as usize);
    let mut models = (0..buckets)
        .map(|b| SolverModel::from_config(cfg, derive_seed(master_seed, "bucket-model", b as u64)))
        .collect::<Result<Vec<_>>>()?;
    let op = registry_operator(out, cfg)?;
    let report =
        train_ensemble(&mut models, &out.window, &op, out.registry.hot_flags(), &st, master_seed)?;

    let hf: BTreeMap<KeyBytes, Count> = out.plane.heavy_filter().residents().collect();
    let mut estimates = FrequencyTable::new();
    if let Some(sample) = out.last_snapshot.as_ref().and_then(normalize) {
        let x = recover_norm_multi(&models, &sample.y_norm, n)?;
        let scale = sample.scale as f64;
        for (i, key) in out.registry.keys().iter().enumerate() {
            let solved = round_to_count(scale * x[i]);
            estimates.insert(*key, solved + hf.get(key).copied().unwrap_or(0));
        }
    } else {
        for key in out.registry.keys() {
            estimates.insert(*key, hf.get(key).copied().unwrap_or(0));
        }
    }
    for (key, count) in &hf {
        if out.registry.position(key).is_none() {
            estimates.insert(*key, *count);
        }
    }
    let loss_csv = Some(report.to_csv(st.equivariance));
    Ok(AblationOutcome { variant, estimates, report: Some(report), loss_csv })
}

/// Write one experiment's training-loss CSV next to the metric outputs.
pub fn write_loss_csv(dir: &Path, label: &str, csv: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("loss_{label}.csv"));
    std::fs::write(&path, csv)?;
    Ok(path)
}
