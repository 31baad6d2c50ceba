//! Null-expanded token-choice routing.
//!
//! The router weight matrix has `N + 1` rows: one per real expert plus a
//! single null row. The null logit is repeated `M` times to form an
//! `N + M` slot vector, softmax and top-`k_max` run over the expanded
//! vector, and only real slots are kept. Zero-variant gates are
//! renormalized over the kept real slots.
//!
//! Ranking key for the expanded top-k: logit descending, then real before
//! null, then index ascending. A real logit equal to the null logit is
//! therefore selected as real.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{log_sum_exp, softmax_in_place, topk_row_into};
use crate::numerics::{matmul_bt, Matrix, Real, TieBreak};

/// What a selected null slot computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NullVariant {
    /// Output is identically zero; real gates are renormalized.
    #[default]
    Zero,
    /// Output equals the input; gates keep their expanded-softmax values.
    Copy,
}

impl NullVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            NullVariant::Zero => "zero",
            NullVariant::Copy => "copy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    pub n_experts: usize,
    pub k_max: usize,
    /// Target fraction of slots filled by real experts, in (0, 1].
    pub rho: Real,
    pub null_variant: NullVariant,
    /// Number of null-logit copies. Normally derived from `rho`.
    pub n_null: usize,
    pub use_shared_expert: bool,
}

/// `round(n (1 − ρ) / ρ)`.
pub fn compute_null_copies(n: usize, rho: Real) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1], got {rho}")));
    }
    if n == 0 {
        return Err(Error::Config("need at least one real expert".into()));
    }
    let m = (n as f64) * (1.0 - rho as f64) / rho as f64;
    Ok(m.round() as usize)
}

impl RoutingConfig {
    pub fn new(n_experts: usize, k_max: usize, rho: Real, null_variant: NullVariant) -> Result<Self> {
        let n_null = compute_null_copies(n_experts, rho)?;
        if k_max == 0 || k_max > n_experts {
            return Err(Error::Config(format!(
                "k_max must lie in 1..={n_experts}, got {k_max}"
            )));
        }
        Ok(Self {
            n_experts,
            k_max,
            rho,
            null_variant,
            n_null,
            use_shared_expert: true,
        })
    }

    pub fn with_shared_expert(mut self, on: bool) -> Self {
        self.use_shared_expert = on;
        self
    }

    /// Same config with `m` null copies; used for dense warmup (`m = 0`)
    /// and the null-copy ramp.
    pub fn with_null_copies(&self, m: usize) -> Self {
        Self {
            n_null: m,
            ..self.clone()
        }
    }

    /// `N + M`.
    pub fn n_slots(&self) -> usize {
        self.n_experts + self.n_null
    }

    /// `N / (N + M)`; differs from `rho` when `M` was rounded.
    pub fn realized_rho(&self) -> Real {
        self.n_experts as Real / self.n_slots() as Real
    }

    pub fn expected_active(&self) -> Real {
        expected_active(self)
    }
}

/// Target expected number of real experts per token, `k_max · ρ`.
pub fn expected_active(cfg: &RoutingConfig) -> Real {
    cfg.k_max as Real * cfg.rho
}

/// Routing result for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    /// Selected expanded slot ids in rank order; ids `>= N` are null copies.
    pub slots: Vec<usize>,
    /// Selected real experts in rank order.
    pub selected_real: Vec<usize>,
    /// Gate per entry of `selected_real`.
    pub gates: Vec<Real>,
}

impl TokenRoute {
    /// Real-slot count.
    pub fn r(&self) -> usize {
        self.selected_real.len()
    }

    pub fn null_slots(&self) -> usize {
        self.slots.len() - self.selected_real.len()
    }
}

/// Routing decisions for a batch plus the distributions the losses need.
#[derive(Debug, Clone)]
pub struct Routing {
    pub n_experts: usize,
    pub n_null: usize,
    pub k_max: usize,
    pub variant: NullVariant,
    /// `T × (N + 1)` raw router logits.
    pub logits: Matrix,
    /// `T × (N + M)` logits with the null column repeated `M` times.
    pub expanded_logits: Matrix,
    /// Row softmax of `expanded_logits`.
    pub probs: Matrix,
    pub tokens: Vec<TokenRoute>,
}

impl Routing {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_slots(&self) -> usize {
        self.n_experts + self.n_null
    }

    /// Expanded-softmax mass on one null copy for token `t` (0 when `M = 0`).
    pub fn null_prob(&self, t: usize) -> Real {
        if self.n_null == 0 {
            0.0
        } else {
            self.probs.get(t, self.n_experts)
        }
    }

    /// Copy-variant residual coefficient: total gate mass on selected nulls.
    pub fn null_gate_mass(&self, t: usize) -> Real {
        match self.variant {
            NullVariant::Zero => 0.0,
            NullVariant::Copy => self.tokens[t].null_slots() as Real * self.null_prob(t),
        }
    }

    pub fn real_counts(&self) -> Vec<usize> {
        self.tokens.iter().map(TokenRoute::r).collect()
    }

    /// Mean real-slot count over the batch.
    pub fn mean_active(&self) -> Real {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.tokens.iter().map(|t| t.r() as Real).sum::<Real>() / self.tokens.len() as Real
    }
}

/// `[z_1..z_N, z_null × M]` per row.
pub fn expand_logits(logits: &Matrix, n_experts: usize, n_null: usize) -> Result<Matrix> {
    if logits.cols() != n_experts + 1 {
        return Err(Error::shape(
            "expand_logits",
            format!("expected {} logit columns, got {}", n_experts + 1, logits.cols()),
        ));
    }
    let mut out = Matrix::zeros(logits.rows(), n_experts + n_null);
    for t in 0..logits.rows() {
        let src = logits.row(t);
        let dst = out.row_mut(t);
        dst[..n_experts].copy_from_slice(&src[..n_experts]);
        dst[n_experts..].fill(src[n_experts]);
    }
    Ok(out)
}

/// Adjoint of [`expand_logits`]: null-copy columns are summed into column `N`.
pub fn fold_expanded_grad(dz: &Matrix, n_experts: usize) -> Result<Matrix> {
    if dz.cols() < n_experts {
        return Err(Error::shape("fold_expanded_grad", "fewer columns than real experts"));
    }
    let mut out = Matrix::zeros(dz.rows(), n_experts + 1);
    for t in 0..dz.rows() {
        let src = dz.row(t);
        let dst = out.row_mut(t);
        dst[..n_experts].copy_from_slice(&src[..n_experts]);
        dst[n_experts] = src[n_experts..].iter().sum();
    }
    Ok(out)
}

/// Routes every token of `x` (`T × D`) with router weights `w` (`(N+1) × D`).
pub fn route(x: &Matrix, w: &Matrix, cfg: &RoutingConfig) -> Result<Routing> {
    if w.rows() != cfg.n_experts + 1 {
        return Err(Error::shape(
            "route",
            format!(
                "router needs {} rows (N + 1 null row), got {}",
                cfg.n_experts + 1,
                w.rows()
            ),
        ));
    }
    let logits = matmul_bt(x, w)?;
    route_logits(logits, cfg)
}

/// Expanded-softmax routing from precomputed `T × (N + 1)` logits.
pub fn route_logits(logits: Matrix, cfg: &RoutingConfig) -> Result<Routing> {
    logits.ensure_finite("route")?;
    let (n, m, k) = (cfg.n_experts, cfg.n_null, cfg.k_max);
    if k > n + m || k > n {
        return Err(Error::Config(format!("k_max {k} exceeds {n} real experts")));
    }
    let expanded_logits = expand_logits(&logits, n, m)?;
    let mut probs = expanded_logits.clone();
    let mut tokens = Vec::with_capacity(logits.rows());
    let mut scratch = Vec::with_capacity(n + m);
    for t in 0..logits.rows() {
        let z = expanded_logits.row(t);
        // index order in the expanded vector already puts reals before nulls
        topk_row_into(z, k, TieBreak::LowerIndexFirst, &mut scratch);
        let p = probs.row_mut(t);
        softmax_in_place(p);
        let selected_real: Vec<usize> = scratch.iter().copied().filter(|&s| s < n).collect();
        let gates = gate_values(z, p, &selected_real, cfg.null_variant);
        tokens.push(TokenRoute {
            slots: scratch.clone(),
            selected_real,
            gates,
        });
    }
    Ok(Routing {
        n_experts: n,
        n_null: m,
        k_max: k,
        variant: cfg.null_variant,
        logits,
        expanded_logits,
        probs,
        tokens,
    })
}

/// Zero variant: softmax over the selected real logits, which equals the
/// expanded probabilities renormalized over the selection but never touches
/// the null logit, so it is unaffected by it even in rounding. Copy
/// variant: the expanded probabilities as they are.
fn gate_values(z: &[Real], p: &[Real], selected_real: &[usize], variant: NullVariant) -> Vec<Real> {
    match variant {
        NullVariant::Zero => {
            let mut g: Vec<Real> = selected_real.iter().map(|&i| z[i]).collect();
            if !g.is_empty() {
                softmax_in_place(&mut g);
            }
            g
        }
        NullVariant::Copy => selected_real.iter().map(|&i| p[i]).collect(),
    }
}

/// Threshold form of the same routing, computed without the expanded
/// vector: a real expert is kept when its logit is at least the null logit,
/// up to `k_max`; when `M < k_max` the slots nulls cannot fill fall back to
/// the next-best real experts. Zero-variant gates are the softmax over the
/// kept real logits directly.
pub fn route_by_threshold(logits: &Matrix, cfg: &RoutingConfig) -> Result<Vec<TokenRoute>> {
    logits.ensure_finite("route_by_threshold")?;
    let (n, m, k) = (cfg.n_experts, cfg.n_null, cfg.k_max);
    if logits.cols() != n + 1 {
        return Err(Error::shape("route_by_threshold", "expected N + 1 logit columns"));
    }
    let mut out = Vec::with_capacity(logits.rows());
    let mut order = Vec::with_capacity(n);
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let real = &row[..n];
        topk_row_into(real, n, TieBreak::LowerIndexFirst, &mut order);
        let null = row[n];
        let above = if m == 0 {
            n
        } else {
            real.iter().filter(|&&z| z >= null).count()
        };
        let r = if above >= k {
            k
        } else {
            above + (k - above).saturating_sub(m)
        };
        let selected_real = order[..r].to_vec();

        // slot list: reals at or above the null, then null copies, then the rest
        let nulls_taken = k - r;
        let lead = above.min(r);
        let mut slots: Vec<usize> = order[..lead].to_vec();
        slots.extend(n..n + nulls_taken);
        slots.extend_from_slice(&order[lead..r]);

        let gates = match cfg.null_variant {
            NullVariant::Zero => {
                let mut g: Vec<Real> = selected_real.iter().map(|&i| real[i]).collect();
                if !g.is_empty() {
                    softmax_in_place(&mut g);
                }
                g
            }
            NullVariant::Copy => {
                // log of Σ_real e^z + M e^null, without materializing copies
                let mut terms: Vec<Real> = real.to_vec();
                if m > 0 {
                    terms.push(null + (m as Real).ln());
                }
                let lse = log_sum_exp(&terms);
                selected_real.iter().map(|&i| (real[i] - lse).exp()).collect()
            }
        };
        out.push(TokenRoute {
            slots,
            selected_real,
            gates,
        });
    }
    Ok(out)
}
