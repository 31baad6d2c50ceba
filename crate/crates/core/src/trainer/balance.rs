//! Router-only training against the load-balancing loss alone.
//!
//! Tokens are a fixed random sample with a constant last coordinate, so the
//! router has a bias term. Only the router moves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{aux_logit_grad, load_balance_loss, RoutingStats};
use crate::numerics::{matmul_at, Matrix, Real};
use crate::router::{fold_expanded_grad, route, NullVariant, RoutingConfig};
use crate::trainer::optim::{adamw_step, AdamWConfig, AdamWState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub n_experts: usize,
    pub k_max: usize,
    pub rho: Real,
    pub d_model: usize,
    pub n_tokens: usize,
    pub steps: u64,
    pub lr: Real,
    pub router_init_std: Real,
    pub seed: u64,
}

impl BalanceConfig {
    pub fn new(n_experts: usize, k_max: usize, rho: Real) -> Self {
        Self {
            n_experts,
            k_max,
            rho,
            d_model: 16,
            n_tokens: 1024,
            steps: 600,
            lr: 0.02,
            router_init_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    /// `k_max · N / (N + M)`.
    pub target: Real,
    /// Mean active experts per token, averaged over the last 10% of steps.
    pub realized_ek: Real,
    pub initial_ek: Real,
    pub final_loss: Real,
    pub history: Vec<Real>,
}

impl BalanceOutcome {
    pub fn rel_err(&self) -> Real {
        (self.realized_ek - self.target).abs() / self.target
    }
}

pub fn train_balance(cfg: &BalanceConfig) -> Result<BalanceOutcome> {
    if cfg.d_model < 2 || cfg.n_tokens == 0 || cfg.steps == 0 {
        return Err(Error::Config("balance: d_model >= 2, n_tokens >= 1, steps >= 1".into()));
    }
    let rcfg = RoutingConfig::new(cfg.n_experts, cfg.k_max, cfg.rho, NullVariant::Zero)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Matrix::random_normal(cfg.n_tokens, cfg.d_model, 1.0, &mut rng);
    for t in 0..cfg.n_tokens {
        x.set(t, cfg.d_model - 1, 1.0);
    }
    let mut w = Matrix::random_normal(cfg.n_experts + 1, cfg.d_model, cfg.router_init_std, &mut rng);
    let opt_cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::new(&[&w]);
    let mut history = Vec::with_capacity(cfg.steps as usize);
    let mut final_loss = 0.0;
    for _ in 0..cfg.steps {
        let routing = route(&x, &w, &rcfg)?;
        let stats = RoutingStats::from_routing(&routing);
        history.push(routing.mean_active());
        final_loss = load_balance_loss(&stats);
        let dz = aux_logit_grad(&routing, &stats, 1.0, 0.0)?;
        let dw = matmul_at(&fold_expanded_grad(&dz, cfg.n_experts)?, &x)?;
        adamw_step(&mut [&mut w], &[&dw], &mut opt, &opt_cfg, cfg.lr)?;
    }
    let tail = (history.len() / 10).max(1);
    let realized_ek = history[history.len() - tail..].iter().sum::<Real>() / tail as Real;
    Ok(BalanceOutcome {
        target: rcfg.k_max as Real * rcfg.realized_rho(),
        realized_ek,
        initial_ek: history[0],
        final_loss,
        history,
    })
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    #[test]
    fn dense_cell_is_exact() {
        let out = train_balance(&BalanceConfig {
            steps: 20,
            ..BalanceConfig::new(8, 2, 1.0)
        })
        .unwrap();
        assert!(out.history.iter().all(|&e| e == 2.0));
        assert_eq!(out.target, 2.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut c = BalanceConfig::new(8, 2, 0.5);
        c.steps = 0;
        assert!(train_balance(&c).is_err());
    }
}
