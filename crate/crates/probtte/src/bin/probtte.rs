//! Command-line pipeline: synthesize corpora, train link representations,
//! evaluate checkpoints, predict travel times, export embeddings, and
//! contract networks.
//!
//! Every subcommand writes a `run-manifest.json` capturing the arguments,
//! seed, crate version, and SHA-256 of each input. With `--deterministic`,
//! outputs contain no wall-clock fields, so identical inputs and seeds
//! produce byte-identical artifacts. Exit codes: 2 for validation failures,
//! 3 for numerical failures, with a machine-readable JSON line on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use probtte::data::{load_trips, write_trips, Trip, TripFilter};
use probtte::error::{Error, Result};
use probtte::export::embedding_table;
use probtte::inference::GaussianPrediction;
use probtte::metrics::ScoringMode;
use probtte::model::{load_checkpoint, save_checkpoint};
use probtte::network::{
    apply_contraction, contract, load_network, write_network, ContractionMap, RoadNetwork,
};
use probtte::synth::{gen_ground_truth, gen_network, gen_trips};
use probtte::training::{
    evaluate, predict_trip, split_trips, train, EvalPolicy, TrainConfig, TrainOutcome,
};

#[derive(Parser, Debug)]
#[command(name = "probtte", version, about = "Probabilistic travel-time estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Zero wall-clock fields in outputs for byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic grid network, trip corpus, and ground-truth checkpoint.
    Synth(SynthArgs),
    /// Fit link representations by maximum likelihood (70/15/15 internal split).
    Train(TrainArgs),
    /// Score a checkpoint on a trip set.
    Eval(EvalArgs),
    /// Predict travel-time distributions for query trips.
    Predict(PredictArgs),
    /// Export per-link embedding rows plus a 2-D principal projection.
    ExportEmbeddings(ExportArgs),
    /// Contract a network and checkpoint onto link groups.
    Contract(ContractArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Grid size as WIDTHxHEIGHT, e.g. 10x10.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 20)]
    days: usize,
    #[arg(long, default_value_t = 200)]
    trips_per_day: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    rank_l: usize,
    #[arg(long, default_value_t = 8)]
    rank_h: usize,
    /// Radial-basis length scale in grid units; defaults to 0.3 max(W, H).
    #[arg(long)]
    length_scale: Option<f64>,
    /// Walk length range as MIN:MAX links.
    #[arg(long, value_parser = parse_range, default_value = "10:30")]
    walk_len: (usize, usize),
    /// Checkpoint every Nth link.
    #[arg(long, default_value_t = 2)]
    checkpoint_rate: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Directory holding links.csv and edges.csv.
    #[arg(long)]
    network: PathBuf,
    /// Trips JSONL file.
    #[arg(long)]
    trips: PathBuf,
    /// TOML or JSON file with training settings (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, short = 'b')]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Time buckets per day.
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    rank_l: Option<usize>,
    #[arg(long)]
    rank_h: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on raw seconds without internal standardization.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    min_duration_s: Option<f64>,
    #[arg(long)]
    max_duration_s: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PolicyArg {
    Prior,
    Conditional,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScoringArg {
    Mean,
    Sample,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SubsetArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    trips: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Prior)]
    policy: PolicyArg,
    /// Cap on conditioning trips per query.
    #[arg(long, default_value_t = 32)]
    max_obs: usize,
    /// Sub-trips per conditioning trip.
    #[arg(long, default_value_t = 0)]
    cond_k: usize,
    /// Pool of completed trips; defaults to the evaluated file itself.
    #[arg(long)]
    conditioning: Option<PathBuf>,
    /// split.json from `train`, to evaluate one subset only.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split")]
    subset: Option<SubsetArg>,
    #[arg(long, value_enum, default_value_t = ScoringArg::Mean)]
    scoring: ScoringArg,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long)]
    min_duration_s: Option<f64>,
    #[arg(long)]
    max_duration_s: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query trips JSONL (their checkpoint times are ignored).
    #[arg(long)]
    queries: PathBuf,
    /// Completed trips to condition on; omit for prior predictions.
    #[arg(long)]
    conditioning: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_obs: usize,
    #[arg(long, default_value_t = 0)]
    cond_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    bucket: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ContractArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV with header `link_id,group_id`.
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT, e.g. 10x10")?;
    Ok((
        w.parse().map_err(|_| format!("bad width `{w}`"))?,
        h.parse().map_err(|_| format!("bad height `{h}`"))?,
    ))
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX, e.g. 10:30")?;
    Ok((
        a.parse().map_err(|_| format!("bad min `{a}`"))?,
        b.parse().map_err(|_| format!("bad max `{b}`"))?,
    ))
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::validation(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    deterministic: bool,
    args: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    args: &impl Serialize,
    inputs: &[PathBuf],
    deterministic: bool,
    force: bool,
) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        deterministic,
        args: serde_json::to_value(args).map_err(|e| Error::parse(e.to_string()))?,
        inputs: hashes,
    };
    let path = dir.join("run-manifest.json");
    ensure_writable(&path, force)?;
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize, force: bool) -> Result<()> {
    ensure_writable(path, force)?;
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

fn trip_filter(min: Option<f64>, max: Option<f64>) -> TripFilter {
    let mut f = TripFilter::default();
    if let Some(m) = min {
        f.min_duration_s = m;
    }
    if let Some(m) = max {
        f.max_duration_s = m;
    }
    f
}

fn run_synth(args: &SynthArgs, deterministic: bool, force: bool) -> Result<()> {
    let (w, h) = args.grid;
    let net = gen_network(w, h)?;
    let ls = args.length_scale.unwrap_or(0.3 * w.max(h) as f64);
    let truth = gen_ground_truth(&net, args.rank_l, args.rank_h, args.seed, ls)?;
    let trips = gen_trips(
        &truth,
        args.days,
        args.trips_per_day,
        args.walk_len,
        args.checkpoint_rate,
        args.seed,
    )?;

    std::fs::create_dir_all(&args.out)?;
    for name in ["links.csv", "edges.csv", "trips.jsonl", "truth.ckpt"] {
        ensure_writable(&args.out.join(name), force)?;
    }
    write_network(&net, &args.out)?;
    write_trips(&trips, &args.out.join("trips.jsonl"))?;
    save_checkpoint(&truth.params, &args.out.join("truth.ckpt"), true)?;
    write_run_manifest(&args.out, "synth", args, &[], deterministic, force)?;
    println!(
        "synth: {} links, {} trips over {} days -> {}",
        net.link_count(),
        trips.len(),
        args.days,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitIds {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        None => TrainConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                serde_json::from_str(&text)
                    .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&text)
                    .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?
            }
        }
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.b = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if args.eta.is_some() {
        config.eta = args.eta;
    }
    if let Some(v) = args.buckets {
        config.p = v;
    }
    if let Some(v) = args.rank_l {
        config.r_l = v;
    }
    if let Some(v) = args.rank_h {
        config.r_h = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.patience {
        config.patience = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.no_standardize {
        config.standardize = false;
    }
    Ok(config)
}

fn run_train(args: &TrainArgs, deterministic: bool, force: bool) -> Result<()> {
    let config = build_train_config(args)?;
    let net = load_network(&args.network)?;
    let trips = load_trips(
        &args.trips,
        &net,
        trip_filter(args.min_duration_s, args.max_duration_s),
    )?;
    let TrainOutcome { params, mut report } = train(&trips, &net, &config)?;
    if deterministic {
        report.epoch_seconds.iter_mut().for_each(|s| *s = 0.0);
    }

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    ensure_writable(&ckpt, force)?;
    save_checkpoint(&params, &ckpt, false)?;
    write_json(&args.out.join("train-report.json"), &report, force)?;

    let (tr, va, te) = split_trips(&trips, config.seed);
    let ids = |v: &[Trip]| v.iter().map(|t| t.trip_id.clone()).collect();
    write_json(
        &args.out.join("split.json"),
        &SplitIds { train: ids(&tr), val: ids(&va), test: ids(&te) },
        force,
    )?;
    write_run_manifest(
        &args.out,
        "train",
        args,
        &[
            args.network.join("links.csv"),
            args.network.join("edges.csv"),
            args.trips.clone(),
        ],
        deterministic,
        force,
    )?;

    if let Some(msg) = &report.diverged {
        eprintln!(
            "{}",
            serde_json::json!({"error": {"kind": "numerical", "message": msg}})
        );
        std::process::exit(3);
    }
    println!(
        "train: best epoch {} (val NLL {:.4}) -> {}",
        report.best_epoch,
        report.val_nll.get(report.best_epoch).copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn load_subset(trips: Vec<Trip>, args: &EvalArgs) -> Result<Vec<Trip>> {
    let Some(split_path) = &args.split else {
        return Ok(trips);
    };
    let text = std::fs::read_to_string(split_path)?;
    let split: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("{}: {e}", split_path.display())))?;
    let key = match args.subset.unwrap_or(SubsetArg::Test) {
        SubsetArg::Train => "train",
        SubsetArg::Val => "val",
        SubsetArg::Test => "test",
    };
    let wanted: std::collections::HashSet<&str> = split[key]
        .as_array()
        .ok_or_else(|| Error::parse(format!("split file lacks `{key}` array")))?
        .iter()
        .filter_map(|v| v.as_str())
        .collect();
    Ok(trips
        .into_iter()
        .filter(|t| wanted.contains(t.trip_id.as_str()))
        .collect())
}

fn run_eval(args: &EvalArgs, deterministic: bool, force: bool) -> Result<()> {
    let net = load_network(&args.network)?;
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let filter = trip_filter(args.min_duration_s, args.max_duration_s);
    let trips = load_trips(&args.trips, &net, filter)?;
    let test = load_subset(trips, args)?;

    let pool = match &args.conditioning {
        Some(path) => load_trips(path, &net, filter)?,
        None => load_trips(&args.trips, &net, filter)?,
    };
    let policy = match args.policy {
        PolicyArg::Prior => EvalPolicy::Prior,
        PolicyArg::Conditional => EvalPolicy::Conditional {
            pool: &pool,
            max_obs: args.max_obs,
            k: args.cond_k,
            eta: 1.0 / (args.cond_k as f64 + 1.0),
        },
    };
    let scoring = match args.scoring {
        ScoringArg::Mean => ScoringMode::MeanBased,
        ScoringArg::Sample => ScoringMode::SampleBased { seed: args.sample_seed },
    };
    let (metrics, records) = evaluate(&test, &params, policy, scoring)?;

    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("metrics.json"), &metrics, force)?;
    let csv_path = args.out.join("per-trip.csv");
    ensure_writable(&csv_path, force)?;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::parse(e.to_string()))?;
    w.write_record(["trip_id", "truth_s", "mean_s", "var_s2", "n_conditioning"])
        .map_err(|e| Error::parse(e.to_string()))?;
    for r in &records {
        w.write_record([
            r.trip_id.clone(),
            r.truth_s.to_string(),
            r.mean_s.to_string(),
            r.var_s2.to_string(),
            r.n_conditioning.to_string(),
        ])
        .map_err(|e| Error::parse(e.to_string()))?;
    }
    w.flush()?;

    let mut inputs = vec![
        args.network.join("links.csv"),
        args.network.join("edges.csv"),
        args.trips.clone(),
        args.checkpoint.clone(),
    ];
    if let Some(c) = &args.conditioning {
        inputs.push(c.clone());
    }
    write_run_manifest(&args.out, "eval", args, &inputs, deterministic, force)?;
    println!(
        "eval: n={} rmse={:.2}s mae={:.2}s mape={:.2}% crps={:.2}s coverage90={:.3}",
        metrics.n,
        metrics.rmse_s,
        metrics.mae_s,
        100.0 * metrics.mape,
        metrics.crps_s,
        metrics.coverage90
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    trip_id: &'a str,
    mean_s: f64,
    var_s2: f64,
    interval90: [f64; 2],
    n_conditioning: usize,
}

fn run_predict(args: &PredictArgs, deterministic: bool, force: bool) -> Result<()> {
    use std::io::Write;
    let net = load_network(&args.network)?;
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let queries = load_trips(&args.queries, &net, TripFilter::unbounded())?;
    let pool = match &args.conditioning {
        Some(path) => load_trips(path, &net, TripFilter::unbounded())?,
        None => Vec::new(),
    };

    std::fs::create_dir_all(&args.out)?;
    let out_path = args.out.join("predictions.jsonl");
    ensure_writable(&out_path, force)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    for trip in &queries {
        let policy = if pool.is_empty() {
            EvalPolicy::Prior
        } else {
            EvalPolicy::Conditional {
                pool: &pool,
                max_obs: args.max_obs,
                k: args.cond_k,
                eta: 1.0 / (args.cond_k as f64 + 1.0),
            }
        };
        let (pred, n_obs): (GaussianPrediction, usize) = predict_trip(trip, &params, policy)?;
        let (lo, hi) = pred.interval(0.9);
        let line = PredictionLine {
            trip_id: &trip.trip_id,
            mean_s: pred.mean_s,
            var_s2: pred.var_s2,
            interval90: [lo, hi],
            n_conditioning: n_obs,
        };
        serde_json::to_writer(&mut f, &line).map_err(|e| Error::parse(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let mut inputs = vec![args.queries.clone(), args.checkpoint.clone()];
    if let Some(c) = &args.conditioning {
        inputs.push(c.clone());
    }
    write_run_manifest(&args.out, "predict", args, &inputs, deterministic, force)?;
    println!("predict: {} queries -> {}", queries.len(), out_path.display());
    Ok(())
}

fn run_export(args: &ExportArgs, deterministic: bool, force: bool) -> Result<()> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let (header, rows) = embedding_table(&params, args.bucket)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("embeddings.csv");
    ensure_writable(&path, force)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::parse(e.to_string()))?;
    w.write_record(&header).map_err(|e| Error::parse(e.to_string()))?;
    for row in &rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::parse(e.to_string()))?;
    }
    w.flush()?;
    write_run_manifest(
        &args.out,
        "export-embeddings",
        args,
        &[args.checkpoint.clone()],
        deterministic,
        force,
    )?;
    println!("export-embeddings: {} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn load_groups(path: &Path, net: &RoadNetwork) -> Result<ContractionMap> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::parse(e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "link_id" || &headers[1] != "group_id" {
        return Err(Error::parse(format!(
            "{}: expected header `link_id,group_id`",
            path.display()
        )));
    }
    let mut by_group: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(e.to_string()))?;
        let link: u32 = rec[0]
            .parse()
            .map_err(|_| Error::parse(format!("bad link_id `{}`", &rec[0])))?;
        let group: u64 = rec[1]
            .parse()
            .map_err(|_| Error::parse(format!("bad group_id `{}`", &rec[1])))?;
        by_group.entry(group).or_default().push(link);
    }
    ContractionMap::new(by_group.into_values().collect(), net.link_count())
}

fn run_contract(args: &ContractArgs, deterministic: bool, force: bool) -> Result<()> {
    let net = load_network(&args.network)?;
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let map = load_groups(&args.groups, &net)?;
    let contracted_net = contract(&net, &map)?;
    let contracted_params = apply_contraction(&params, &map)?;

    std::fs::create_dir_all(&args.out)?;
    for name in ["links.csv", "edges.csv", "model.ckpt"] {
        ensure_writable(&args.out.join(name), force)?;
    }
    write_network(&contracted_net, &args.out)?;
    save_checkpoint(&contracted_params, &args.out.join("model.ckpt"), false)?;
    write_run_manifest(
        &args.out,
        "contract",
        args,
        &[
            args.network.join("links.csv"),
            args.network.join("edges.csv"),
            args.checkpoint.clone(),
            args.groups.clone(),
        ],
        deterministic,
        force,
    )?;
    println!(
        "contract: {} links -> {} super-links",
        net.link_count(),
        contracted_net.link_count()
    );
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::Parse(_) => "parse",
        Error::Validation(_) => "validation",
        Error::Dimension(_) => "dimension",
        Error::Numerical(_) => "numerical",
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args, cli.deterministic, cli.force),
        Command::Train(args) => run_train(args, cli.deterministic, cli.force),
        Command::Eval(args) => run_eval(args, cli.deterministic, cli.force),
        Command::Predict(args) => run_predict(args, cli.deterministic, cli.force),
        Command::ExportEmbeddings(args) => run_export(args, cli.deterministic, cli.force),
        Command::Contract(args) => run_contract(args, cli.deterministic, cli.force),
    };
    if let Err(e) = result {
        eprintln!(
            "{}",
            serde_json::json!({"error": {"kind": kind(&e), "message": e.to_string()}})
        );
        std::process::exit(exit_code(&e));
    }
}
