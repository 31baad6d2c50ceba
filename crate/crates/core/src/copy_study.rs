//! Matched zero-variant vs copy-variant trainings and their polarization.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::analytics::extreme_mass;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::router::{NullVariant, Routing};
use crate::trainer::run::{train, RunConfig};
use crate::trainer::synth::SynthWorld;
use crate::trainer::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Shared by both arms; its `null_variant` is overridden per arm.
    pub base: RunConfig,
    /// Dense warmup plus a null-copy ramp for the copy arm.
    pub copy_warmup: bool,
    pub null_warmup_steps: u64,
}

impl StudyConfig {
    pub fn new(base: RunConfig) -> Self {
        Self {
            base,
            copy_warmup: true,
            null_warmup_steps: 100,
        }
    }

    /// Run config of one arm.
    pub fn arm(&self, variant: NullVariant, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.model.null_variant = variant;
        if variant == NullVariant::Copy {
            if self.copy_warmup {
                cfg.train.null_warmup_steps = self.null_warmup_steps;
            } else {
                cfg.train.dense_warmup_steps = 0;
                cfg.train.null_warmup_steps = 0;
            }
        }
        cfg
    }
}

/// Outcome of one arm at one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantStats {
    pub variant: NullVariant,
    pub seed: u64,
    pub final_loss: Real,
    pub polarization: Vec<Real>,
    pub r0_fraction: Real,
    pub rk_fraction: Real,
    /// Mean gate mass on null slots; the copy arm's output carries this
    /// fraction of the input.
    pub dilution: Real,
}

impl VariantStats {
    pub fn extreme_mass(&self) -> Real {
        extreme_mass(&self.polarization)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantComparison {
    pub zero: Vec<VariantStats>,
    pub copy: Vec<VariantStats>,
}

impl VariantComparison {
    /// Per seed: copy-arm mass at `r ∈ {0, k_max}` minus the zero arm's.
    pub fn gaps(&self) -> Vec<Real> {
        self.zero
            .iter()
            .zip(&self.copy)
            .map(|(z, c)| c.extreme_mass() - z.extreme_mass())
            .collect()
    }

    pub fn median_extreme_mass(&self, variant: NullVariant) -> Real {
        let arm = match variant {
            NullVariant::Zero => &self.zero,
            NullVariant::Copy => &self.copy,
        };
        median(arm.iter().map(VariantStats::extreme_mass).collect())
    }

    pub fn median_final_loss(&self, variant: NullVariant) -> Real {
        let arm = match variant {
            NullVariant::Zero => &self.zero,
            NullVariant::Copy => &self.copy,
        };
        median(arm.iter().map(|s| s.final_loss).collect())
    }

    /// `comparison.csv`: `variant,seed,final_loss,r0_fraction,rk_fraction,polarization_gap`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["variant", "seed", "final_loss", "r0_fraction", "rk_fraction", "polarization_gap"])?;
        for ((z, c), gap) in self.zero.iter().zip(&self.copy).zip(self.gaps()) {
            for s in [z, c] {
                w.serialize((s.variant.as_str(), s.seed, s.final_loss, s.r0_fraction, s.rk_fraction, gap))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Median with the upper middle element for even lengths; NaN when empty.
pub fn median(mut v: Vec<Real>) -> Real {
    if v.is_empty() {
        return Real::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Mean null gate mass over eval batches, tokens and layers.
pub fn dilution_coefficient(model: &Model, world: &SynthWorld, n_batches: u64) -> Result<Real> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in 0..n_batches {
        let batch = world.eval_batch(b);
        let fwd = model.forward(&batch.x, &model.routing)?;
        for st in &fwd.states {
            let r: &Routing = &st.routing;
            for t in 0..r.n_tokens() {
                sum += r.null_gate_mass(t);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as Real })
}

fn run_arm(cfg: &StudyConfig, variant: NullVariant, seed: u64) -> Result<VariantStats> {
    let run = cfg.arm(variant, seed);
    let out = train(&run, None)?;
    let eval = out
        .eval
        .as_ref()
        .ok_or_else(|| Error::Config("copy study needs eval_batches >= 1".into()))?;
    let world = SynthWorld::new(&run.data, run.model.d_model, run.seed)?;
    let hist = eval.polarization.clone();
    Ok(VariantStats {
        variant,
        seed,
        final_loss: out.summary.final_loss,
        r0_fraction: hist[0],
        rk_fraction: hist[hist.len() - 1],
        dilution: dilution_coefficient(&out.model, &world, run.train.eval_batches)?,
        polarization: hist,
    })
}

/// Trains both arms for every seed.
pub fn run_comparison(cfg: &StudyConfig, seeds: &[u64]) -> Result<VariantComparison> {
    if seeds.len() < 3 {
        return Err(Error::Config("copy study needs at least 3 seeds".into()));
    }
    cfg.base.validate()?;
    let mut zero = Vec::with_capacity(seeds.len());
    let mut copy = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        zero.push(run_arm(cfg, NullVariant::Zero, seed)?);
        copy.push(run_arm(cfg, NullVariant::Copy, seed)?);
    }
    Ok(VariantComparison { zero, copy })
}
