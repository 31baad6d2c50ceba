//! Command-line front end: `train`, `sweep`, `verify`, `analyze`, `compare`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
//! numeric failure (including failed verification checks).

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytics::{grid_dims, render_sequence, write_map_csv, write_modality_csv, write_polarization_csv};
use crate::checkpoint;
use crate::copy_study::{run_comparison, StudyConfig};
use crate::error::Error;
use crate::numerics::Real;
use crate::trainer::run::{config_to_toml, evaluate, train, RunConfig, RunDir, RunSummary};
use crate::trainer::synth::SynthWorld;
use crate::verify::{format_report, run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping worker threads for sweeps and comparisons.
pub const THREADS_ENV: &str = "NULLMOE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nullmoe", version, about = "Mixture-of-experts with zero-compute null experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its run directory.
    Train(TrainArgs),
    /// Train every (k_max, rho) cell of a grid for each seed.
    Sweep(SweepArgs),
    /// Run the built-in oracle and gradient checks.
    Verify(VerifyArgs),
    /// Replay eval batches through a run's latest checkpoint.
    Analyze(AnalyzeArgs),
    /// Train matched zero- and copy-variant arms.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cells as `k_max:rho` pairs, comma separated, e.g. `2:1.0,4:0.5`.
    #[arg(long)]
    pub grid: String,
    /// Seeds, comma separated; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to `<run>/analysis`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sequences rendered as SVG heatmaps.
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seed: Vec<u64>,
    /// Disable the copy arm's dense and null-copy warmup.
    #[arg(long)]
    pub no_copy_warmup: bool,
    #[arg(long, default_value_t = 100)]
    pub null_warmup_steps: u64,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses a run config, reporting errors as `path:line:col: message`.
pub fn parse_config(text: &str, origin: &str) -> CliResult<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, col) = e
            .span()
            .map(|s| line_col(text, s.start))
            .unwrap_or((1, 1));
        CliError::usage(format!("{origin}:{line}:{col}: {}", e.message()))
    })?;
    cfg.validate().map_err(|e| CliError::usage(format!("{origin}: {e}")))?;
    Ok(cfg)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

/// Canonical text of a config: the serializer's own rendering.
pub fn canonicalize(cfg: &RunConfig) -> CliResult<String> {
    config_to_toml(cfg).map_err(CliError::from)
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &RunConfig) -> CliResult<String> {
    let canon = canonicalize(cfg)?;
    let digest = Sha256::digest(canon.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub realized_rho: Real,
    pub realized_ek: Real,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub summary: RunSummary,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn version_string() -> String {
    format!("nullmoe v{}", env!("CARGO_PKG_VERSION"))
}

fn train_run(cfg: &RunConfig, out: &Path) -> CliResult<RunManifest> {
    let started = unix_now();
    let hash = config_hash(cfg)?;
    let outcome = train(cfg, Some(out))?;
    let manifest = RunManifest {
        run_id: format!("{}-s{}", &hash[..12], cfg.seed),
        config_hash: hash,
        realized_rho: outcome.model.routing.realized_rho(),
        realized_ek: outcome.summary.realized_ek,
        version: version_string(),
        started_unix: started,
        finished_unix: unix_now(),
        summary: outcome.summary,
    };
    let path = RunDir::new(out).manifest();
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let m = train_run(&cfg, &args.out)?;
    Ok(format!(
        "run {} done: final_loss={:.6} realized_ek={:.4} r0_fraction={:.4}\n",
        m.run_id, m.summary.final_loss, m.summary.realized_ek, m.summary.r0_fraction
    ))
}

/// Parses `k:rho,k:rho`. Empty grids and repeated cells are errors.
pub fn parse_grid(spec: &str) -> CliResult<Vec<(usize, Real)>> {
    let mut cells = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, rho) = part
            .split_once(':')
            .ok_or_else(|| CliError::usage(format!("grid cell {part:?} is not k_max:rho")))?;
        let k: usize = k
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad k_max in grid cell {part:?}")))?;
        let rho: Real = rho
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad rho in grid cell {part:?}")))?;
        cells.push((k, rho));
    }
    if cells.is_empty() {
        return Err(CliError::usage("grid is empty"));
    }
    Ok(cells)
}

fn cell_dir(out: &Path, k: usize, rho: Real, seed: u64) -> PathBuf {
    out.join(format!("k{k}_rho{rho}")).join(format!("seed{seed}"))
}

/// Worker threads from `NULLMOE_THREADS` (default 1).
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs `jobs` on up to `threads` workers; results keep job order.
fn run_parallel<T, R, F>(jobs: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k_max: usize,
    pub rho: Real,
    pub seed: u64,
    pub final_loss: Real,
    pub realized_ek: Real,
    pub r0_fraction: Real,
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<String> {
    let base = load_config(&args.config)?;
    let cells = parse_grid(&args.grid)?;
    let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed.clone() };
    let mut jobs = Vec::new();
    let mut dirs = BTreeSet::new();
    for &(k, rho) in &cells {
        for &seed in &seeds {
            let dir = cell_dir(&args.out, k, rho, seed);
            if !dirs.insert(dir.clone()) {
                return Err(CliError::usage(format!(
                    "grid cell k_max={k} rho={rho} seed={seed} overlaps another cell's output directory"
                )));
            }
            let mut cfg = base.clone();
            cfg.model.k_max = k;
            cfg.model.rho = rho;
            cfg.seed = seed;
            cfg.validate()
                .map_err(|e| CliError::usage(format!("grid cell k_max={k} rho={rho}: {e}")))?;
            jobs.push((cfg, dir));
        }
    }
    let threads = thread_cap()?;
    let results = run_parallel(&jobs, threads, |(cfg, dir)| train_run(cfg, dir));
    fs::create_dir_all(&args.out).map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    let path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::runtime(e.to_string()))?;
    let mut report = String::new();
    for ((cfg, _), res) in jobs.iter().zip(results) {
        let m = res?;
        let row = SweepRow {
            k_max: cfg.model.k_max,
            rho: cfg.model.rho,
            seed: cfg.seed,
            final_loss: m.summary.final_loss,
            realized_ek: m.summary.realized_ek,
            r0_fraction: m.summary.r0_fraction,
        };
        w.serialize(&row).map_err(|e| CliError::runtime(e.to_string()))?;
        report.push_str(&format!(
            "k_max={} rho={} seed={} final_loss={:.6} realized_ek={:.4} r0_fraction={:.4}\n",
            row.k_max, row.rho, row.seed, row.final_loss, row.realized_ek, row.r0_fraction
        ));
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(report)
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<String> {
    let suite: Suite = args.suite.parse().map_err(CliError::from)?;
    let results = run_suite(suite, args.seed)?;
    let report = format_report(&results);
    if results.iter().all(|r| r.passed) {
        Ok(report)
    } else {
        Err(CliError::runtime(report))
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<String> {
    let run = RunDir::new(&args.run);
    let cfg = load_config(&run.config())?;
    let (step, ckpt) = run.latest_checkpoint().map_err(|e| CliError::runtime(e.to_string()))?;
    let model = checkpoint::load(&ckpt)?;
    let expected = cfg.model.routing()?;
    if model.routing != expected || model.d_model() != cfg.model.d_model || model.layers.len() != cfg.model.n_layers {
        return Err(CliError::runtime(format!(
            "checkpoint {} does not match the run's config",
            ckpt.display()
        )));
    }
    let world = SynthWorld::new(&cfg.data, cfg.model.d_model, cfg.seed)?;
    let eval = evaluate(&model, &world, cfg.train.eval_batches.max(1))?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join("analysis"));
    fs::create_dir_all(&out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    write_modality_csv(&out.join("modality.csv"), &[(step, &eval.modality)])?;
    write_polarization_csv(&out.join("polarization.csv"), &[(step, &eval.polarization)])?;
    write_map_csv(&out.join("map.csv"), &eval.map)?;
    let seq_len = cfg.data.seq_len;
    let (rows, cols) = grid_dims(cfg.data.vision_per_seq().max(1));
    let n_seqs = eval.map.entries.len() / seq_len;
    for seq in 0..args.sequences.min(n_seqs) {
        let svg = render_sequence(&eval.map, seq, rows, cols)?;
        let path = out.join(format!("map_seq{seq}.svg"));
        fs::write(&path, svg).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    }
    let mut report = format!("checkpoint step {step}\n");
    for g in &eval.modality.groups {
        report.push_str(&format!(
            "{}: token_share={:.4} compute_share={:.4} intensity={:.4}\n",
            g.name, g.token_share, g.compute_share, g.compute_intensity
        ));
    }
    report.push_str(&format!("r0_fraction={:.4}\n", eval.r0_fraction));
    Ok(report)
}

fn cmd_compare(args: &CompareArgs) -> CliResult<String> {
    let base = load_config(&args.config)?;
    let mut study = StudyConfig::new(base);
    study.copy_warmup = !args.no_copy_warmup;
    study.null_warmup_steps = args.null_warmup_steps;
    let cmp = run_comparison(&study, &args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    cmp.write_csv(&args.out.join("comparison.csv"))?;
    let mut report = String::new();
    for (z, c) in cmp.zero.iter().zip(&cmp.copy) {
        report.push_str(&format!(
            "seed={} zero: loss={:.6} extremes={:.4} | copy: loss={:.6} extremes={:.4} dilution={:.4}\n",
            z.seed,
            z.final_loss,
            z.extreme_mass(),
            c.final_loss,
            c.extreme_mass(),
            c.dilution
        ));
    }
    Ok(report)
}

pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

/// Parses arguments, runs the command, prints its report, and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(report) => {
            print!("{report}");
            EXIT_OK
        }
        Err(e) => {
            if e.code == EXIT_RUNTIME && e.message.starts_with("name\t") {
                print!("{}", e.message);
            } else {
                eprintln!("error: {}", e.message);
            }
            e.code
        }
    }
}
