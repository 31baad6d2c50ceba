//! Auxiliary routing objectives: global load balancing over the `N + M`
//! expanded slots and the router z-loss.
//!
//! `f` counts slot selections (each token contributes `k_max`), so
//! `Σ f = 1`. Null selections are pooled and split evenly across the `M`
//! copies: which copy a token lands on is an artifact of the tie order,
//! and all copies share one logit. `f` is a constant for differentiation;
//! gradients flow through the mean probabilities `P`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{log_sum_exp_rows, softmax_rows_backward, Matrix, Real};
use crate::router::Routing;

/// Per-slot load fractions and mean routing probabilities for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    pub n_experts: usize,
    pub n_null: usize,
    pub k_max: usize,
    pub n_tokens: usize,
    /// Fraction of selections per expanded slot, length `N + M`.
    pub f: Vec<Real>,
    /// Mean softmax probability per expanded slot, length `N + M`.
    pub p: Vec<Real>,
}

impl RoutingStats {
    pub fn from_routing(routing: &Routing) -> Self {
        let (n, m, k) = (routing.n_experts, routing.n_null, routing.k_max);
        let t = routing.n_tokens();
        let mut counts = vec![0usize; n];
        let mut nulls = 0usize;
        for tok in &routing.tokens {
            for &e in &tok.selected_real {
                counts[e] += 1;
            }
            nulls += tok.null_slots();
        }
        let total = (t * k).max(1) as Real;
        let mut f: Vec<Real> = counts.iter().map(|&c| c as Real / total).collect();
        if m > 0 {
            let per_copy = nulls as Real / total / m as Real;
            f.extend(std::iter::repeat(per_copy).take(m));
        }
        let mut p = vec![0.0; n + m];
        for row in 0..t {
            for (acc, v) in p.iter_mut().zip(routing.probs.row(row)) {
                *acc += v;
            }
        }
        if t > 0 {
            for v in &mut p {
                *v /= t as Real;
            }
        }
        Self {
            n_experts: n,
            n_null: m,
            k_max: k,
            n_tokens: t,
            f,
            p,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.n_experts + self.n_null
    }

    /// Fraction of all selections that went to null copies.
    pub fn null_fraction(&self) -> Real {
        self.f[self.n_experts..].iter().sum()
    }

    /// Mean real experts per token, `k_max · Σ_real f`.
    pub fn realized_active(&self) -> Real {
        self.k_max as Real * self.f[..self.n_experts].iter().sum::<Real>()
    }
}

/// `(N + M) · Σ_i f_i P_i`.
pub fn load_balance_loss(stats: &RoutingStats) -> Real {
    let dot: Real = stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum();
    stats.n_slots() as Real * dot
}

/// Mean over tokens of the squared log-partition of the expanded logits.
pub fn z_loss(expanded_logits: &Matrix) -> Result<Real> {
    let lse = log_sum_exp_rows(expanded_logits)?;
    if lse.is_empty() {
        return Ok(0.0);
    }
    Ok(lse.iter().map(|v| v * v).sum::<Real>() / lse.len() as Real)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub balance: Real,
    pub z: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            balance: 2e-2,
            z: 1e-3,
        }
    }
}

/// `task + w_bal · bal + w_z · z`.
pub fn total_loss(task: Real, bal: Real, z: Real, weights: &LossWeights) -> Real {
    task + weights.balance * bal + weights.z * z
}

/// Gradient of `balance · L_bal + z · L_z` w.r.t. the expanded logits.
pub fn aux_logit_grad(routing: &Routing, stats: &RoutingStats, balance: Real, z: Real) -> Result<Matrix> {
    let t = routing.n_tokens();
    let slots = routing.n_slots();
    let mut dz = Matrix::zeros(t, slots);
    if t == 0 {
        return Ok(dz);
    }
    if balance != 0.0 {
        let scale = balance * slots as Real / t as Real;
        let mut dp = Matrix::zeros(t, slots);
        for row in 0..t {
            for (d, f) in dp.row_mut(row).iter_mut().zip(&stats.f) {
                *d = scale * f;
            }
        }
        dz = softmax_rows_backward(&routing.probs, &dp)?;
    }
    if z != 0.0 {
        let lse = log_sum_exp_rows(&routing.expanded_logits)?;
        for (row, l) in lse.iter().enumerate() {
            let c = z * 2.0 * l / t as Real;
            for (d, p) in dz.row_mut(row).iter_mut().zip(routing.probs.row(row)) {
                *d += c * p;
            }
        }
    }
    Ok(dz)
}
