//! Synthetic two-modality token stream.
//!
//! Each sequence holds a block of vision-like tokens followed by text-like
//! tokens. Text tokens are random vectors whose target is a fixed random
//! tanh network. A vision token is, with probability `redundancy`, a noisy
//! copy of one of a few templates whose target is a fixed linear map of the
//! input; otherwise it is an informative random vector with the same
//! nonlinear target as text. Every token carries a constant bias channel
//! in its last coordinate.
//!
//! With `n_tasks > 1` each sequence starts with a task-id token, every
//! token of the sequence is shifted by the task embedding, and the task
//! decides which templates are informative: under task `τ`, template `c`
//! takes the nonlinear target iff `c % n_tasks == τ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub tokens_per_batch: usize,
    pub seq_len: usize,
    /// Share of non-task tokens that are vision-like; text gets the rest.
    pub vision_fraction: Real,
    pub redundancy: Real,
    pub n_templates: usize,
    pub template_noise: Real,
    pub teacher_hidden: usize,
    pub n_tasks: usize,
    /// Seed of the fixed world (templates, teacher, linear map). The run
    /// seed only picks the token stream.
    #[serde(default)]
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tokens_per_batch: 256,
            seq_len: 64,
            vision_fraction: 0.78,
            redundancy: 1.0,
            n_templates: 4,
            template_noise: 0.05,
            teacher_hidden: 32,
            n_tasks: 1,
            world_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.seq_len == 0 || self.tokens_per_batch == 0 {
            return bad("seq_len and tokens_per_batch must be positive");
        }
        if self.tokens_per_batch % self.seq_len != 0 {
            return bad("tokens_per_batch must be a multiple of seq_len");
        }
        if !(0.0..=1.0).contains(&self.vision_fraction) || !(0.0..=1.0).contains(&self.redundancy) {
            return bad("vision_fraction and redundancy must lie in [0, 1]");
        }
        if self.n_templates == 0 || self.n_tasks == 0 || self.teacher_hidden == 0 {
            return bad("n_templates, n_tasks and teacher_hidden must be positive");
        }
        if self.n_tasks > 1 && self.seq_len < 2 {
            return bad("task-id tokens need seq_len >= 2");
        }
        if !(self.template_noise >= 0.0) {
            return bad("template_noise must be non-negative");
        }
        Ok(())
    }

    fn task_slots(&self) -> usize {
        usize::from(self.n_tasks > 1)
    }

    /// Vision tokens per sequence.
    pub fn vision_per_seq(&self) -> usize {
        let body = self.seq_len - self.task_slots();
        ((body as Real * self.vision_fraction).round() as usize).min(body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vision => "vision",
            Self::Text => "text",
        }
    }
}

/// Per-token bookkeeping carried alongside the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMeta {
    pub seq_id: usize,
    pub pos: usize,
    pub modality: Modality,
    /// Near-duplicate of a template with a linear target.
    pub redundant: bool,
    pub template: Option<usize>,
    pub task: usize,
    pub task_token: bool,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub targets: Matrix,
    pub meta: Vec<TokenMeta>,
}

impl Batch {
    pub fn n_tokens(&self) -> usize {
        self.x.rows()
    }
}

/// The fixed random "world": templates, teacher network, linear map and
/// task embeddings, all drawn from `world_seed`.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub cfg: SynthConfig,
    pub d_model: usize,
    pub seed: u64,
    templates: Matrix,
    teacher_in: Matrix,
    teacher_bias: Vec<Real>,
    teacher_out: Matrix,
    linear: Matrix,
    task_emb: Matrix,
}

const EVAL_STREAM: u64 = 1 << 62;

fn normal<R: Rng>(rng: &mut R) -> Real {
    rng.sample::<f64, _>(StandardNormal) as Real
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig, d_model: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if d_model < 2 {
            return Err(Error::Config("synth: d_model must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        rng.set_stream(0);
        let d = d_model - 1;
        let mut templates = Matrix::random_normal(cfg.n_templates, d, 1.0, &mut rng);
        // templates have the same norm as a typical random token
        for r in 0..templates.rows() {
            let row = templates.row_mut(r);
            let norm: Real = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            let scale = (d as Real).sqrt() / norm.max(1e-12);
            for v in row {
                *v *= scale;
            }
        }
        let h = cfg.teacher_hidden;
        let teacher_in = Matrix::random_normal(h, d, 1.5 / (d as Real).sqrt(), &mut rng);
        let teacher_bias = (0..h).map(|_| 0.5 * normal(&mut rng)).collect();
        let teacher_out = Matrix::random_normal(d_model, h, 1.5 / (h as Real).sqrt(), &mut rng);
        let linear = Matrix::random_normal(d_model, d_model, 0.5 / (d_model as Real).sqrt(), &mut rng);
        let task_emb = Matrix::random_normal(cfg.n_tasks, d, 0.5, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            d_model,
            seed,
            templates,
            teacher_in,
            teacher_bias,
            teacher_out,
            linear,
            task_emb,
        })
    }

    /// Nonlinear target: `W_out · tanh(W_in · x[..D-1] + b)`.
    pub fn teacher(&self, x: &[Real]) -> Vec<Real> {
        let d = self.d_model - 1;
        let hidden: Vec<Real> = (0..self.cfg.teacher_hidden)
            .map(|j| {
                let pre: Real = self.teacher_in.row(j).iter().zip(&x[..d]).map(|(a, b)| a * b).sum();
                (pre + self.teacher_bias[j]).tanh()
            })
            .collect();
        (0..self.d_model)
            .map(|i| self.teacher_out.row(i).iter().zip(&hidden).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Linear target `A · x` for redundant tokens.
    pub fn linear_target(&self, x: &[Real]) -> Vec<Real> {
        (0..self.d_model)
            .map(|i| self.linear.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn template(&self, c: usize) -> &[Real] {
        self.templates.row(c)
    }

    /// Whether template `c` carries the nonlinear target under `task`.
    pub fn template_informative(&self, c: usize, task: usize) -> bool {
        self.cfg.n_tasks > 1 && c % self.cfg.n_tasks == task
    }

    /// Training batch for `step`; depends only on `(world_seed, seed, step)`.
    pub fn batch(&self, step: u64) -> Batch {
        self.generate(step + 1)
    }

    /// Held-out batch `index`, disjoint from every training stream.
    pub fn eval_batch(&self, index: u64) -> Batch {
        self.generate(EVAL_STREAM + index)
    }

    fn generate(&self, stream: u64) -> Batch {
        let cfg = &self.cfg;
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.cfg.world_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        let t_count = cfg.tokens_per_batch;
        let d = self.d_model - 1;
        let mut x = Matrix::zeros(t_count, self.d_model);
        let mut targets = Matrix::zeros(t_count, self.d_model);
        let mut meta = Vec::with_capacity(t_count);
        let n_vision = cfg.vision_per_seq();
        let task_slots = cfg.task_slots();
        for seq in 0..t_count / cfg.seq_len {
            let task = if cfg.n_tasks > 1 { rng.gen_range(0..cfg.n_tasks) } else { 0 };
            for pos in 0..cfg.seq_len {
                let row = seq * cfg.seq_len + pos;
                let mut v = vec![0.0; self.d_model];
                v[d] = 1.0;
                let mut m = TokenMeta {
                    seq_id: seq,
                    pos,
                    modality: Modality::Text,
                    redundant: false,
                    template: None,
                    task,
                    task_token: false,
                };
                let mut linear = false;
                if pos < task_slots {
                    m.task_token = true;
                    for (j, e) in self.task_emb.row(task).iter().enumerate() {
                        v[j] = 2.0 * e;
                    }
                } else {
                    let is_vision = pos - task_slots < n_vision;
                    m.modality = if is_vision { Modality::Vision } else { Modality::Text };
                    if is_vision && rng.gen::<Real>() < cfg.redundancy {
                        let c = rng.gen_range(0..cfg.n_templates);
                        for (j, tv) in self.templates.row(c).iter().enumerate() {
                            v[j] = tv + cfg.template_noise * normal(&mut rng);
                        }
                        m.template = Some(c);
                        linear = !self.template_informative(c, task);
                        m.redundant = linear;
                    } else {
                        for vj in v.iter_mut().take(d) {
                            *vj = normal(&mut rng);
                        }
                    }
                    if cfg.n_tasks > 1 {
                        for (j, e) in self.task_emb.row(task).iter().enumerate() {
                            v[j] += e;
                        }
                    }
                }
                let y = if linear { self.linear_target(&v) } else { self.teacher(&v) };
                x.row_mut(row).copy_from_slice(&v);
                targets.row_mut(row).copy_from_slice(&y);
                meta.push(m);
            }
        }
        Batch { x, targets, meta }
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    fn world(cfg: SynthConfig) -> SynthWorld {
        SynthWorld::new(&cfg, 16, 7).unwrap()
    }

    #[test]
    fn deterministic_per_step() {
        let w = world(SynthConfig::default());
        let a = w.batch(3);
        let b = w.batch(3);
        assert_eq!(a.x, b.x);
        assert_eq!(a.targets, b.targets);
        assert_ne!(w.batch(4).x, a.x);
        assert_ne!(w.eval_batch(3).x, a.x);
        let w2 = SynthWorld::new(&SynthConfig::default(), 16, 7).unwrap();
        assert_eq!(w2.batch(3).x, a.x);
    }

    #[test]
    fn full_redundancy_puts_vision_near_templates() {
        let w = world(SynthConfig {
            redundancy: 1.0,
            ..Default::default()
        });
        let b = w.batch(0);
        let mut seen = 0;
        for (r, m) in b.meta.iter().enumerate() {
            if m.modality != Modality::Vision {
                continue;
            }
            seen += 1;
            let tmpl = w.template(m.template.unwrap());
            let dist: Real = b.x.row(r)[..15]
                .iter()
                .zip(tmpl)
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<Real>()
                .sqrt();
            // 0.05 noise in 15 dims: distance concentrates near 0.05·√15
            assert!(dist < 0.05 * 15f64.sqrt() * 2.0, "{dist}");
            assert!(m.redundant);
        }
        assert!(seen > 0);
    }

    #[test]
    fn single_modality_stream() {
        let w = world(SynthConfig {
            vision_fraction: 1.0,
            ..Default::default()
        });
        assert!(w.batch(1).meta.iter().all(|m| m.modality == Modality::Vision));
        let w = world(SynthConfig {
            vision_fraction: 0.0,
            ..Default::default()
        });
        assert!(w.batch(1).meta.iter().all(|m| m.modality == Modality::Text));
    }

    #[test]
    fn default_mix_and_bias_channel() {
        let w = world(SynthConfig::default());
        let b = w.batch(0);
        let vision = b.meta.iter().filter(|m| m.modality == Modality::Vision).count();
        assert_eq!(vision, 4 * 50);
        assert!((0..b.n_tokens()).all(|r| b.x.get(r, 15) == 1.0));
        assert!(b.meta.iter().all(|m| m.pos < 64 && m.seq_id < 4));
    }

    #[test]
    fn task_tokens_and_informative_templates() {
        let w = world(SynthConfig {
            n_tasks: 2,
            redundancy: 1.0,
            ..Default::default()
        });
        let b = w.batch(2);
        for m in &b.meta {
            assert_eq!(m.task_token, m.pos == 0);
            if let Some(c) = m.template {
                assert_eq!(m.redundant, c % 2 != m.task);
            }
        }
    }

    #[test]
    fn run_seed_changes_stream_not_world() {
        let cfg = SynthConfig::default();
        let a = SynthWorld::new(&cfg, 16, 1).unwrap();
        let b = SynthWorld::new(&cfg, 16, 2).unwrap();
        assert_eq!(a.template(3), b.template(3));
        let probe = a.batch(0).x.row(0).to_vec();
        assert_eq!(a.teacher(&probe), b.teacher(&probe));
        assert_ne!(a.batch(0).x, b.batch(0).x);
        let other = SynthWorld::new(&SynthConfig { world_seed: 5, ..cfg }, 16, 1).unwrap();
        assert_ne!(other.template(3), a.template(3));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SynthConfig::default();
        c.tokens_per_batch = 100;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.vision_fraction = 1.5;
        assert!(c.validate().is_err());
    }
}
