//! Training driver: configs, the step loop, run artifacts, evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{compute_map, group_report, modality_report, polarization_hist, ComputeMap, ModalityReport};
use crate::checkpoint;
use crate::dispatch::{build_plan, flop_report, FlopCount};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::Real;
use crate::router::{Routing, RoutingConfig};
use crate::trainer::model::{Model, ModelConfig, StepLosses};
use crate::trainer::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::trainer::schedule::Wsd;
use crate::trainer::synth::{Modality, SynthConfig, SynthWorld};

pub const CONFIG_VERSION: u32 = 1;

fn d_lr_peak() -> Real {
    2e-5
}
fn d_lr_multiplier() -> Real {
    100.0
}
fn d_warmup() -> u64 {
    20
}
fn d_decay_fraction() -> Real {
    0.1
}
fn d_decay_floor() -> Real {
    0.1
}
fn d_dense_warmup() -> u64 {
    200
}
fn d_stats_every() -> u64 {
    100
}
fn d_eval_batches() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default = "d_lr_peak")]
    pub lr_peak: Real,
    /// Scales `lr_peak`; the base value is tuned for much larger models.
    #[serde(default = "d_lr_multiplier")]
    pub lr_multiplier: Real,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "d_decay_fraction")]
    pub decay_fraction: Real,
    #[serde(default = "d_decay_floor")]
    pub decay_floor: Real,
    /// Steps with null slots masked out (`M` treated as 0).
    #[serde(default = "d_dense_warmup")]
    pub dense_warmup_steps: u64,
    /// After dense warmup, ramp `M` linearly from 0 to its target over
    /// this many steps (0 = switch on at once).
    #[serde(default)]
    pub null_warmup_steps: u64,
    #[serde(default = "d_stats_every")]
    pub stats_every: u64,
    /// 0 keeps only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "d_eval_batches")]
    pub eval_batches: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_peak: d_lr_peak(),
            lr_multiplier: d_lr_multiplier(),
            warmup_steps: d_warmup(),
            decay_fraction: d_decay_fraction(),
            decay_floor: d_decay_floor(),
            dense_warmup_steps: d_dense_warmup(),
            null_warmup_steps: 0,
            stats_every: d_stats_every(),
            checkpoint_every: 0,
            eval_batches: d_eval_batches(),
            adamw: AdamWConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Wsd {
        Wsd {
            peak: self.lr_peak * self.lr_multiplier,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            decay_fraction: self.decay_fraction,
            floor: self.decay_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr_peak > 0.0 && self.lr_multiplier > 0.0) {
            return bad("lr_peak and lr_multiplier must be positive");
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return bad("decay_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.decay_floor) {
            return bad("decay_floor must lie in [0, 1]");
        }
        if self.steps > 0 && self.warmup_steps > self.schedule().decay_start() {
            return bad("warmup must end before the decay window starts");
        }
        if self.dense_warmup_steps > self.steps {
            return bad("dense_warmup_steps exceeds steps");
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adamw betas must lie in [0, 1), eps > 0, weight_decay >= 0");
        }
        if !(self.loss_weights.balance >= 0.0 && self.loss_weights.z >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// Active null copies at `step` given the target count.
    pub fn null_copies_at(&self, step: u64, target: usize) -> usize {
        if step < self.dense_warmup_steps {
            return 0;
        }
        let into = step - self.dense_warmup_steps;
        if self.null_warmup_steps == 0 || into >= self.null_warmup_steps {
            return target;
        }
        ((target as Real) * (into + 1) as Real / self.null_warmup_steps as Real).round() as usize
    }
}

fn d_version() -> u32 {
    CONFIG_VERSION
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            data: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: Real,
    pub loss: Real,
    pub task_loss: Real,
    pub bal_loss: Real,
    pub z_loss: Real,
    pub realized_ek: Real,
    pub null_fraction: Real,
    pub r0_fraction: Real,
    pub null_copies: usize,
    pub dense_phase: u8,
}

/// Evaluation of a model on held-out batches with its full null pool.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub map: ComputeMap,
    pub modality: ModalityReport,
    pub polarization: Vec<Real>,
    pub realized_ek: Real,
    pub r0_fraction: Real,
    /// Mean compute score of redundant vision tokens and of text tokens.
    pub redundant_vision_intensity: Real,
    pub text_intensity: Real,
    pub flops: FlopCount,
}

/// What a finished run reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    /// Mean task loss over the final 10% of steps.
    pub final_loss: Real,
    pub realized_ek: Real,
    pub r0_fraction: Real,
    pub polarization: Vec<Real>,
    pub redundant_vision_intensity: Real,
    pub text_intensity: Real,
    pub null_copies: usize,
    pub realized_rho: Real,
    pub param_count: usize,
    pub flops: FlopCount,
}

/// Result of [`train`]: the trained model plus its history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub eval: Option<EvalReport>,
    pub summary: RunSummary,
}

fn step_row(step: u64, lr: Real, losses: &StepLosses, routings: &[&Routing], m: usize, dense: bool) -> Result<MetricsRow> {
    let n_layers = routings.len() as Real;
    let realized_ek = routings.iter().map(|r| r.mean_active()).sum::<Real>() / n_layers;
    let null_fraction = losses.stats.iter().map(|s| s.null_fraction()).sum::<Real>() / n_layers;
    let hist = polarization_hist(routings)?;
    Ok(MetricsRow {
        step,
        lr,
        loss: losses.total,
        task_loss: losses.task,
        bal_loss: losses.bal,
        z_loss: losses.z,
        realized_ek,
        null_fraction,
        r0_fraction: hist[0],
        null_copies: m,
        dense_phase: u8::from(dense),
    })
}

fn write_stats(path: &Path, losses: &StepLosses) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["layer", "slot", "kind", "f", "p"])?;
    for (l, s) in losses.stats.iter().enumerate() {
        for (i, (f, p)) in s.f.iter().zip(&s.p).enumerate() {
            let kind = if i < s.n_experts { "real" } else { "null" };
            w.serialize((l, i, kind, f, p))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Run directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn stats_dir(&self) -> PathBuf {
        self.root.join("stats")
    }
    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("{step}.bin"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Highest-numbered `checkpoints/<step>.bin`.
    pub fn latest_checkpoint(&self) -> Result<(u64, PathBuf)> {
        let dir = self.checkpoints_dir();
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_stem()
                .and_then(|s| s.to_str())
                .filter(|_| path.extension().is_some_and(|e| e == "bin"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().map_or(true, |(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        best.ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", dir.display())))
    }
}

/// Serializes a run config as TOML.
pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Trains a model. With `out`, writes `config.toml`, `metrics.csv`,
/// `stats/<step>.csv` and `checkpoints/<step>.bin` under it.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = out.map(RunDir::new);
    if let Some(d) = &dir {
        mkdir(&d.root)?;
        mkdir(&d.stats_dir())?;
        mkdir(&d.checkpoints_dir())?;
        let text = config_to_toml(cfg)?;
        fs::write(d.config(), text).map_err(|e| Error::io(d.config(), e))?;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let mut model = Model::new(&cfg.model, &mut init_rng)?;
    let world = SynthWorld::new(&cfg.data, cfg.model.d_model, cfg.seed)?;
    let full = model.routing.clone();
    let schedule = cfg.train.schedule();
    let mut opt = AdamWState::new(&model.matrices());
    let mut metrics = Vec::with_capacity(cfg.train.steps as usize);
    let mut metrics_writer = match &dir {
        Some(d) => {
            let path = d.metrics();
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record([
                "step",
                "lr",
                "loss",
                "task_loss",
                "bal_loss",
                "z_loss",
                "realized_ek",
                "null_fraction",
                "r0_fraction",
                "null_copies",
                "dense_phase",
            ])?;
            Some(w)
        }
        None => None,
    };
    if let Some(d) = &dir {
        checkpoint::save(&model, &d.checkpoint(0))?;
    }

    for step in 0..cfg.train.steps {
        let m = cfg.train.null_copies_at(step, full.n_null);
        let dense = step < cfg.train.dense_warmup_steps;
        let rcfg = full.with_null_copies(m);
        let batch = world.batch(step);
        let lr = schedule.lr(step);
        let (losses, grads, fwd) = model.loss_and_grads(&batch.x, &batch.targets, &rcfg, &cfg.train.loss_weights)?;
        let finite = losses.total.is_finite() && grads.iter().all(|g| g.matrices().iter().all(|m| m.is_finite()));
        if !finite {
            let snapshot = match &dir {
                Some(d) => {
                    let p = d.checkpoints_dir().join(format!("diverged_{step}.bin"));
                    checkpoint::save(&model, &p)?;
                    Some(p)
                }
                None => None,
            };
            return Err(Error::Diverged { step, snapshot });
        }
        let routings: Vec<&Routing> = fwd.states.iter().map(|s| &s.routing).collect();
        let row = step_row(step, lr, &losses, &routings, m, dense)?;
        if let Some(w) = metrics_writer.as_mut() {
            w.serialize(&row)?;
        }
        metrics.push(row);
        if let Some(d) = &dir {
            if cfg.train.stats_every > 0 && step % cfg.train.stats_every == 0 {
                write_stats(&d.stats_dir().join(format!("{step}.csv")), &losses)?;
            }
        }
        let grad_refs: Vec<&crate::numerics::Matrix> = grads.iter().flat_map(|g| g.matrices()).collect();
        let mut params = model.matrices_mut();
        adamw_step(&mut params, &grad_refs, &mut opt, &cfg.train.adamw, lr)?;
        if let Some(d) = &dir {
            let next = step + 1;
            if cfg.train.checkpoint_every > 0 && next % cfg.train.checkpoint_every == 0 && next != cfg.train.steps {
                checkpoint::save(&model, &d.checkpoint(next))?;
            }
        }
    }
    if let Some(w) = metrics_writer.as_mut() {
        w.flush().map_err(|e| Error::io(dir.as_ref().map(|d| d.metrics()).unwrap_or_default(), e))?;
    }
    if let Some(d) = &dir {
        if cfg.train.steps > 0 {
            checkpoint::save(&model, &d.checkpoint(cfg.train.steps))?;
        }
    }

    let eval = if cfg.train.eval_batches > 0 {
        Some(evaluate(&model, &world, cfg.train.eval_batches)?)
    } else {
        None
    };
    let summary = summarize(cfg, &model, &metrics, eval.as_ref());
    Ok(TrainOutcome {
        model,
        metrics,
        eval,
        summary,
    })
}

fn summarize(cfg: &RunConfig, model: &Model, metrics: &[MetricsRow], eval: Option<&EvalReport>) -> RunSummary {
    let tail = final_window(metrics.len());
    let tail_rows = &metrics[metrics.len() - tail..];
    let mean = |f: fn(&MetricsRow) -> Real| {
        if tail_rows.is_empty() {
            Real::NAN
        } else {
            tail_rows.iter().map(f).sum::<Real>() / tail_rows.len() as Real
        }
    };
    RunSummary {
        steps: cfg.train.steps,
        final_loss: mean(|r| r.task_loss),
        realized_ek: eval.map_or_else(|| mean(|r| r.realized_ek), |e| e.realized_ek),
        r0_fraction: eval.map_or_else(|| mean(|r| r.r0_fraction), |e| e.r0_fraction),
        polarization: eval.map(|e| e.polarization.clone()).unwrap_or_default(),
        redundant_vision_intensity: eval.map_or(Real::NAN, |e| e.redundant_vision_intensity),
        text_intensity: eval.map_or(Real::NAN, |e| e.text_intensity),
        null_copies: model.routing.n_null,
        realized_rho: model.routing.realized_rho(),
        param_count: model.param_count(),
        flops: eval.map(|e| e.flops).unwrap_or_default(),
    }
}

/// Number of trailing steps averaged for the final loss: 10%, at least 1.
pub fn final_window(steps: usize) -> usize {
    if steps == 0 {
        0
    } else {
        (steps / 10).max(1)
    }
}

/// Replays `n_batches` held-out batches through `model` with its full
/// routing configuration.
pub fn evaluate(model: &Model, world: &SynthWorld, n_batches: u64) -> Result<EvalReport> {
    evaluate_with(model, &model.routing, world, n_batches)
}

pub fn evaluate_with(model: &Model, routing: &RoutingConfig, world: &SynthWorld, n_batches: u64) -> Result<EvalReport> {
    if n_batches == 0 {
        return Err(Error::Report("evaluation needs at least one batch".into()));
    }
    let mut all_entries = Vec::new();
    let mut real_selections = 0;
    let mut hist_acc: Vec<Real> = vec![0.0; routing.k_max + 1];
    let mut flops = FlopCount::default();
    let seqs_per_batch = world.cfg.tokens_per_batch / world.cfg.seq_len;
    for b in 0..n_batches {
        let batch = world.eval_batch(b);
        let fwd = model.forward(&batch.x, routing)?;
        let routings: Vec<&Routing> = fwd.states.iter().map(|s| &s.routing).collect();
        let mut map = compute_map(&routings, &batch.meta)?;
        for e in &mut map.entries {
            e.seq_id += b as usize * seqs_per_batch;
        }
        real_selections += map.real_selections;
        all_entries.extend(map.entries);
        let hist = polarization_hist(&routings)?;
        for (a, h) in hist_acc.iter_mut().zip(&hist) {
            *a += h / n_batches as Real;
        }
        for st in &fwd.states {
            let plan = build_plan(&st.routing)?;
            flops.accumulate(&flop_report(&plan, model.d_model(), model.d_hidden()));
        }
    }
    let map = ComputeMap {
        k_max: routing.k_max,
        n_layers: model.layers.len(),
        real_selections,
        entries: all_entries,
    };
    let modality = modality_report(&map)?;
    let groups = group_report(&map, |e| match (e.modality, e.redundant) {
        (Modality::Vision, true) => "vision_redundant".into(),
        (Modality::Vision, false) => "vision_informative".into(),
        (Modality::Text, _) => "text".into(),
    })?;
    let intensity = |name: &str| groups.get(name).map_or(Real::NAN, |g| g.compute_intensity);
    let realized_ek = crate::analytics::hist_mean(&hist_acc);
    Ok(EvalReport {
        redundant_vision_intensity: intensity("vision_redundant"),
        text_intensity: intensity("text"),
        r0_fraction: hist_acc[0],
        realized_ek,
        polarization: hist_acc,
        modality,
        map,
        flops,
    })
}
