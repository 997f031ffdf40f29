//! `ucl` — command-line front end: trace generation, end-to-end runs with
//! saved artifacts, a stdin query service, benchmark sweeps, ablations, and
//! artifact inspection.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ucl_sketch::config::{resolve_seed, AppConfig};
use ucl_sketch::controlplane::{freeze_from_parts, KeyRegistry};
use ucl_sketch::dataplane::{
    read_reports, write_reports, KeyReport, ReportFlag, Snapshot, SNAPSHOT_MAGIC,
};
use ucl_sketch::harness::{
    algo_estimates, ingest, ingest_and_train_concurrent, metric_rows, run_ablation_variant,
    run_experiment, rows_to_csv, train_two_phase, AblationVariant, Algo, DatasetSpec,
    ExperimentPlan, IngestOutcome, MetricRow, TrainedState,
};
use ucl_sketch::metrics::FrequencyTable;
use ucl_sketch::solver::{SolverModel, TrainSettings, MODEL_MAGIC};
use ucl_sketch::streamgen::{generate, generate_permuted, write_trace, TraceFormat, ZipfSpec};
use ucl_sketch::{Count, Error, KeyBytes, Result};

#[derive(Parser)]
#[command(
    name = "ucl",
    version,
    about = "Learned sketch for per-key frequency estimation on streams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic Zipf trace file (.csv, .csv.gz or raw records).
    Generate(GenerateArgs),
    /// Ingest a stream, train the solver, report accuracy and save artifacts.
    Run(RunArgs),
    /// Answer point queries from saved run artifacts (hex keys on stdin).
    Query(QueryArgs),
    /// Sweep algorithms x memory presets x seeds and write metric CSVs.
    Bench(BenchArgs),
    /// Train an ablated variant and compare it against the full model.
    Ablate(AblateArgs),
    /// Identify an artifact or trace file by its magic bytes and summarize it.
    Inspect(InspectArgs),
}

/// Where the input stream comes from: synthetic Zipf or a trace file.
#[derive(Args, Clone)]
struct DatasetArgs {
    /// Synthetic Zipf stream as `skew:length`, e.g. `1.3:2000000`.
    #[arg(long, value_name = "SKEW:LEN", conflicts_with = "trace")]
    zipf: Option<String>,

    /// Key universe size for synthetic streams.
    #[arg(long, default_value_t = 20_000)]
    universe: u32,

    /// Read the stream from a trace file instead (csv / csv.gz / raw).
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,

    /// Treat the trace as fixed-length raw records with this key size.
    #[arg(long, value_name = "BYTES")]
    raw_key_len: Option<u8>,

    /// Raw records carry a little-endian u32 value after each key.
    #[arg(long, default_value_t = false)]
    raw_values: bool,
}

impl DatasetArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        if let Some(z) = &self.zipf {
            let (skew, length) = parse_zipf(z)?;
            return Ok(DatasetSpec::Zipf { universe: self.universe, skew, length });
        }
        if let Some(path) = &self.trace {
            return Ok(DatasetSpec::Trace { path: path.clone(), format: self.trace_format() });
        }
        Err(Error::Config("no input stream: pass --zipf SKEW:LEN or --trace PATH".into()))
    }

    fn trace_format(&self) -> TraceFormat {
        match self.raw_key_len {
            Some(len) => TraceFormat::Raw { key_len: len as usize, has_values: self.raw_values },
            None => TraceFormat::Csv,
        }
    }
}

fn parse_zipf(s: &str) -> Result<(f64, u64)> {
    let bad = || Error::Config(format!("--zipf wants SKEW:LEN (e.g. 1.3:2000000), got {s:?}"));
    let (skew, len) = s.split_once(':').ok_or_else(bad)?;
    Ok((skew.trim().parse().map_err(|_| bad())?, len.trim().parse().map_err(|_| bad())?))
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,

    /// Output path; `.gz` compresses, `--raw-key-len` switches to raw records.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,

    /// Master seed (overrides the UCL_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,

    /// Shuffle the rank-to-key mapping with this extra seed.
    #[arg(long, value_name = "SEED")]
    permute: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,

    /// JSON config file; section defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Memory preset fixing the data-plane shape.
    #[arg(long, default_value = "16KB")]
    preset: String,

    /// Master seed (overrides the UCL_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,

    /// Artifact directory (model, snapshot, registry, filter, metrics).
    #[arg(long, value_name = "DIR", default_value = "ucl-run")]
    out: PathBuf,

    /// Ingest the whole stream first, then train (deterministic); the
    /// default trains concurrently with ingestion.
    #[arg(long, default_value_t = false)]
    two_phase: bool,
}

#[derive(Args)]
struct QueryArgs {
    /// Artifact directory produced by `ucl run`.
    #[arg(long, value_name = "DIR", default_value = "ucl-run")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    dataset: DatasetArgs,

    /// JSON config file supplying training/bucket settings for all presets.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Comma-separated memory presets.
    #[arg(long, default_value = "16KB")]
    preset: String,

    /// Comma-separated algorithms: ucl, cm, cs, omp, lsqr.
    #[arg(long, default_value = "ucl,cm")]
    algo: String,

    /// Number of independent seeds (base seed, base+1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,

    /// Base master seed (overrides the UCL_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for metrics.csv, manifest.json and throughput.json.
    #[arg(long, value_name = "DIR", default_value = "bench-out")]
    out: PathBuf,

    /// Deterministic two-phase mode (ingest fully, then train).
    #[arg(long, default_value_t = false)]
    two_phase: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,

    /// Which ingredient to remove: no-eq, no-sparsity or unshared.
    #[arg(long)]
    variant: String,

    /// JSON config file; section defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Memory preset fixing the data-plane shape.
    #[arg(long, default_value = "16KB")]
    preset: String,

    /// Master seed (overrides the UCL_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for loss curves and the comparison CSV.
    #[arg(long, value_name = "DIR", default_value = "ablate-out")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// File to identify (snapshot, checkpoint, report log or trace).
    path: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let DatasetSpec::Zipf { universe, skew, length } = a.dataset.spec()? else {
        return Err(Error::Config("generate writes synthetic streams; pass --zipf".into()));
    };
    let spec = ZipfSpec { universe, skew, length, seed };
    let items: Vec<_> = match a.permute {
        Some(p) => generate_permuted(&spec, p)?.collect(),
        None => generate(&spec)?.collect(),
    };
    write_trace(&a.out, a.dataset.trace_format(), &items)?;
    println!(
        "wrote {} items (universe {universe}, skew {skew}, seed {seed}) to {}",
        items.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn load_config(path: Option<&Path>, preset: &str) -> Result<AppConfig> {
    match path {
        Some(p) => {
            let base = AppConfig::load(p)?;
            ucl_sketch::harness::config_for_preset(Some(&base), preset)
        }
        None => ucl_sketch::harness::config_for_preset(None, preset),
    }
}

fn print_metric_rows(rows: &[MetricRow]) {
    for r in rows {
        println!("{:<16} {:>6}  {:<16} {}", r.algorithm, r.memory, r.metric, r.value);
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let cfg = load_config(a.config.as_deref(), &a.preset)?;
    let st = TrainSettings::from_config(&cfg);
    let items = a.dataset.spec()?.items(seed)?;
    let started = Instant::now();
    let (out, ts) = if a.two_phase {
        let out = ingest(items, &cfg, seed)?;
        let ts = train_two_phase(&out, &cfg, &st, seed)?;
        (out, ts)
    } else {
        ingest_and_train_concurrent(items, &cfg, &st, seed)?
    };
    let elapsed = started.elapsed();

    let est = algo_estimates(Algo::Ucl, &out, &ts, &cfg)?;
    let rows = metric_rows("ucl", &a.preset, seed, &out.truth, &est)?;
    print_metric_rows(&rows);
    println!(
        "{} items, {} tracked keys, {} training rounds, {:.2}s",
        out.items,
        out.registry.len(),
        ts.rounds,
        elapsed.as_secs_f64()
    );

    save_artifacts(&a.out, &cfg, &out, &ts, &st, seed, &rows)?;
    println!("artifacts in {}", a.out.display());
    Ok(())
}

/// On-disk layout one `run` leaves behind for `query` and `inspect`.
fn save_artifacts(
    dir: &Path,
    cfg: &AppConfig,
    out: &IngestOutcome,
    ts: &TrainedState,
    st: &TrainSettings,
    seed: u64,
    rows: &[MetricRow],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("config.json"), cfg_json)?;
    ts.model.save(&dir.join("model.bin"))?;
    if let Some(snap) = &out.last_snapshot {
        snap.save(&dir.join("snapshot.bin"))?;
    }

    // One report per key with its final flag reconstructs the registry.
    let reports: Vec<KeyReport> = out
        .registry
        .keys()
        .iter()
        .zip(out.registry.hot_flags())
        .enumerate()
        .map(|(i, (key, &hot))| KeyReport {
            key: *key,
            flag: if hot { ReportFlag::Hot } else { ReportFlag::Cold },
            seq: i as u64,
        })
        .collect();
    let mut buf = Vec::new();
    write_reports(&mut buf, &reports)?;
    std::fs::write(dir.join("reports.bin"), buf)?;

    save_filter(&dir.join("filter.csv"), out)?;
    std::fs::write(dir.join("metrics.csv"), rows_to_csv(rows))?;
    if let Some(report) = &ts.report {
        std::fs::write(dir.join("loss.csv"), report.to_csv(st.equivariance))?;
    }
    let manifest = serde_json::json!({
        "seed": seed,
        "items": out.items,
        "tracked_keys": out.registry.len(),
        "hot_keys": out.registry.hot_count(),
        "training_rounds": ts.rounds,
        "memory_bytes": cfg.memory_bytes(),
    });
    std::fs::write(dir.join("manifest.json"), format!("{manifest:#}"))?;
    Ok(())
}

/// Heavy-filter residents as `hexkey,count` lines (counts are 64-bit, which
/// rules out the u32-valued trace format).
fn save_filter(path: &Path, out: &IngestOutcome) -> Result<()> {
    let residents: BTreeMap<KeyBytes, Count> = out.plane.heavy_filter().residents().collect();
    let mut s = String::new();
    for (key, count) in residents {
        s.push_str(&key.to_hex());
        s.push(',');
        s.push_str(&count.to_string());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn load_filter(path: &Path) -> Result<BTreeMap<KeyBytes, Count>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            location: format!("{}:{}", path.display(), lineno + 1),
            msg: msg.into(),
        };
        let (hex, count) = line.split_once(',').ok_or_else(|| err("missing comma"))?;
        let key = KeyBytes::from_hex(hex.trim())?;
        let count: Count = count.trim().parse().map_err(|_| err("bad count"))?;
        map.insert(key, count);
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// query
// ---------------------------------------------------------------------------

fn cmd_query(a: QueryArgs) -> Result<()> {
    let dir = &a.out;
    if !dir.join("model.bin").exists() {
        return Err(Error::Config(format!(
            "{} holds no run artifacts (model.bin missing); run `ucl run --out ...` first",
            dir.display()
        )));
    }
    let model = SolverModel::load(&dir.join("model.bin"))?;
    let snapshot = match dir.join("snapshot.bin") {
        p if p.exists() => Some(Snapshot::load(&p)?),
        _ => None,
    };
    let mut registry = KeyRegistry::new();
    let reports_path = dir.join("reports.bin");
    if reports_path.exists() {
        let bytes = std::fs::read(&reports_path)?;
        for report in read_reports(&mut bytes.as_slice())? {
            registry.handle_report(&report);
        }
    }
    let filter_path = dir.join("filter.csv");
    let hf = if filter_path.exists() { load_filter(&filter_path)? } else { BTreeMap::new() };

    let ctx = freeze_from_parts(&registry, hf, snapshot.as_ref(), Arc::new(model))?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut output = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line?;
        let hex = line.trim();
        if hex.is_empty() {
            continue;
        }
        let key = KeyBytes::from_hex(hex)?;
        writeln!(output, "{}", ctx.query(&key))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let base_seed = resolve_seed(a.seed)?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let base_cfg = a.config.as_deref().map(AppConfig::load).transpose()?;
    let presets: Vec<String> = a
        .preset
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let plan = ExperimentPlan {
        dataset: a.dataset.spec()?,
        presets,
        algos: Algo::parse_list(&a.algo)?,
        seeds: (base_seed..base_seed + a.seeds).collect(),
        out_dir: a.out.clone(),
        two_phase: a.two_phase,
    };
    let artifacts = run_experiment(&plan, base_cfg.as_ref())?;
    print_metric_rows(&artifacts.rows);
    for tp in &artifacts.throughput {
        println!(
            "{:<6} update path: {:.2} Mops with snapshots, {:.2} Mops without \
             (max {} hashes/update, bound {})",
            tp.preset,
            tp.mops_with_snapshots,
            tp.mops_without_snapshots,
            tp.max_hashes_per_update,
            tp.hash_bound
        );
    }
    println!(
        "{} rows -> {} and {}",
        artifacts.rows.len(),
        artifacts.csv_path.display(),
        artifacts.manifest_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let variant = AblationVariant::parse(&a.variant)?;
    let cfg = load_config(a.config.as_deref(), &a.preset)?;
    let st = TrainSettings::from_config(&cfg);
    let items = a.dataset.spec()?.items(seed)?;
    let out = ingest(items, &cfg, seed)?;

    // Full model and the ablated variant on the same ingested stream.
    let full = train_two_phase(&out, &cfg, &st, seed)?;
    let full_est = algo_estimates(Algo::Ucl, &out, &full, &cfg)?;
    let mut rows = metric_rows("ucl", &a.preset, seed, &out.truth, &full_est)?;

    let ablated = run_ablation_variant(variant, &out, &cfg, &st, seed)?;
    rows.extend(metric_rows(
        &variant.algorithm_label(),
        &a.preset,
        seed,
        &out.truth,
        &ablated.estimates,
    )?);

    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("metrics.csv"), rows_to_csv(&rows))?;
    if let Some(report) = &full.report {
        std::fs::write(a.out.join("loss_full.csv"), report.to_csv(st.equivariance))?;
    }
    if let Some(csv) = &ablated.loss_csv {
        std::fs::write(a.out.join(format!("loss_{}.csv", variant.name())), csv)?;
    }
    print_metric_rows(&rows);
    println!("wrote comparison to {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path)?;
    let header: &[u8] = &bytes[..bytes.len().min(4)];

    if header.starts_with(&SNAPSHOT_MAGIC) {
        let snap = Snapshot::read_from(&mut bytes.as_slice())?;
        let volume: u64 = snap.y_raw.iter().map(|&c| c as u64).sum();
        println!("kind: counter snapshot");
        println!("shape: {} x {}", snap.depth, snap.width);
        println!("sequence: {}", snap.seq);
        println!("insert_count: {}", snap.insert_count);
        println!("scale: {}", snap.scale);
        println!("total volume: {volume}");
        return Ok(());
    }
    if header.starts_with(&MODEL_MAGIC) {
        let model = SolverModel::read_from(&mut bytes.as_slice())?;
        println!("kind: solver checkpoint");
        println!(
            "measurement: {} x {}, hidden {}, bucket length {}",
            model.depth(),
            model.width(),
            model.hidden(),
            model.bucket_len()
        );
        println!("parameters: {}", model.param_count());
        println!("init seed: {}", model.seed());
        return Ok(());
    }
    if header.starts_with(&[0x1f, 0x8b]) {
        let items = ucl_sketch::streamgen::read_trace(&a.path, TraceFormat::Csv)?;
        let distinct = items.iter().map(|i| i.key).collect::<std::collections::HashSet<_>>();
        println!("kind: gzip-compressed csv trace");
        println!("items: {}", items.len());
        println!("distinct keys: {}", distinct.len());
        return Ok(());
    }
    if let Ok(reports) = read_reports(&mut bytes.as_slice()) {
        if !reports.is_empty() {
            let hot = reports.iter().filter(|r| r.flag == ReportFlag::Hot).count();
            println!("kind: key report log");
            println!("reports: {} ({hot} hot)", reports.len());
            return Ok(());
        }
    }
    if let Ok(items) = ucl_sketch::streamgen::read_trace(&a.path, TraceFormat::Csv) {
        if !items.is_empty() {
            let truth: FrequencyTable = items.iter().map(|i| (i.key, i.value)).fold(
                FrequencyTable::new(),
                |mut t, (k, v)| {
                    t.add(k, v);
                    t
                },
            );
            println!("kind: csv trace");
            println!("items: {}", items.len());
            println!("distinct keys: {}", truth.support());
            return Ok(());
        }
    }
    Err(Error::Parse {
        location: a.path.display().to_string(),
        msg: "unrecognized file: not a snapshot, checkpoint, report log or trace".into(),
    })
}
