//! One mixture-of-experts layer: router, grouped routed experts, optional
//! shared expert, and the hand-written backward pass.

use rand::Rng;

use crate::dispatch::{build_plan, grouped_backward, grouped_forward, DispatchPlan, GroupedForward};
use crate::error::{Error, Result};
use crate::expert::{ExpertBank, FfnCache};
use crate::numerics::{matmul, matmul_at, softmax_rows_backward, Matrix, Real};
use crate::router::{fold_expanded_grad, route, NullVariant, Routing, RoutingConfig};

/// Router weights `(N + 1) × D` (last row is the shared null logit) and
/// the expert bank.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: Matrix,
    pub bank: ExpertBank,
}

/// Gradients with the same layout as [`MoeLayer`].
pub type LayerGrads = MoeLayer;

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub x: Matrix,
    pub routing: Routing,
    pub plan: DispatchPlan,
    grouped: GroupedForward,
    shared: Option<FfnCache>,
}

impl MoeLayer {
    pub fn random<R: Rng + ?Sized>(
        n_experts: usize,
        d_model: usize,
        d_hidden: usize,
        router_std: Real,
        rng: &mut R,
    ) -> Self {
        let router = Matrix::random_normal(n_experts + 1, d_model, router_std, rng);
        let bank = ExpertBank::random(n_experts, d_model, d_hidden, rng);
        Self { router, bank }
    }

    pub fn zeros(n_experts: usize, d_model: usize, d_hidden: usize) -> Self {
        Self {
            router: Matrix::zeros(n_experts + 1, d_model),
            bank: ExpertBank::zeros(n_experts, d_model, d_hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_experts(), self.d_model(), self.bank.d_hidden())
    }

    pub fn n_experts(&self) -> usize {
        self.bank.n_experts()
    }

    pub fn d_model(&self) -> usize {
        self.bank.d_model()
    }

    pub fn param_count(&self) -> usize {
        self.router.len() + self.bank.param_count()
    }

    /// Router first, then the bank in its declared order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.router];
        v.extend(self.bank.matrices());
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.router];
        v.extend(self.bank.matrices_mut());
        v
    }

    fn check(&self, x: &Matrix, cfg: &RoutingConfig) -> Result<()> {
        if cfg.n_experts != self.n_experts() {
            return Err(Error::Config(format!(
                "routing config has {} experts, layer has {}",
                cfg.n_experts,
                self.n_experts()
            )));
        }
        self.bank.check_input(x, "moe_forward")
    }

    /// `y = shared(x) + Σ g_i E_i(x)` plus, for the copy variant, the
    /// null-slot residual `Σ_null p_null · x`.
    pub fn forward(&self, x: &Matrix, cfg: &RoutingConfig) -> Result<(Matrix, LayerState)> {
        self.check(x, cfg)?;
        x.ensure_finite("moe_forward")?;
        let routing = route(x, &self.router, cfg)?;
        self.forward_routed(x, routing, cfg.use_shared_expert)
    }

    /// Forward with routing decisions supplied by the caller.
    pub fn forward_routed(&self, x: &Matrix, routing: Routing, use_shared: bool) -> Result<(Matrix, LayerState)> {
        self.bank.check_input(x, "moe_forward")?;
        if routing.n_tokens() != x.rows() || routing.n_experts != self.n_experts() {
            return Err(Error::shape("moe_forward", "routing does not match batch or layer"));
        }
        let plan = build_plan(&routing)?;
        let grouped = grouped_forward(x, &plan, &self.bank)?;
        let (mut y, shared) = if use_shared {
            let (out, cache) = self.bank.shared.forward_cached(x)?;
            (out, Some(cache))
        } else {
            (Matrix::zeros(x.rows(), x.cols()), None)
        };
        y.add_assign(&grouped.y)?;
        if routing.variant == NullVariant::Copy {
            for (t, g) in plan.null_tail() {
                let src = x.row(t).to_vec();
                for (yv, xv) in y.row_mut(t).iter_mut().zip(&src) {
                    *yv += g * xv;
                }
            }
        }
        let state = LayerState {
            x: x.clone(),
            routing,
            plan,
            grouped,
            shared,
        };
        Ok((y, state))
    }

    /// Backward of [`MoeLayer::forward`]. `aux_dz` is an extra gradient on
    /// the expanded `T × (N + M)` logits, e.g. from the auxiliary losses.
    pub fn backward(&self, state: &LayerState, dy: &Matrix, aux_dz: Option<&Matrix>) -> Result<(Matrix, LayerGrads)> {
        let x = &state.x;
        let routing = &state.routing;
        let plan = &state.plan;
        if dy.shape() != x.shape() {
            return Err(Error::shape("moe_backward", "dy must match the input shape"));
        }
        let (t_count, n, m) = (x.rows(), routing.n_experts, routing.n_null);
        let mut grads = self.zeros_like();

        let mut dx = match &state.shared {
            Some(cache) => self.bank.shared.backward(cache, dy, &mut grads.bank.shared)?,
            None => Matrix::zeros(t_count, x.cols()),
        };
        let (dx_routed, dgate_sorted) = grouped_backward(plan, &state.grouped, &self.bank, dy, &mut grads.bank.experts)?;
        dx.add_assign(&dx_routed)?;

        let mut dgate: Vec<Vec<Real>> = routing.tokens.iter().map(|t| vec![0.0; t.r()]).collect();
        for (j, &dg) in dgate_sorted.iter().enumerate() {
            dgate[plan.sorted_tokens[j]][plan.sorted_gate_index[j]] = dg;
        }

        // zero variant: gates are a softmax over the selected real logits,
        // so their gradient lands on those logits directly; copy variant:
        // gates are expanded probabilities and go through the full softmax
        let mut dz = match routing.variant {
            NullVariant::Zero => Matrix::zeros(t_count, n + m),
            NullVariant::Copy => {
                let mut dp = Matrix::zeros(t_count, n + m);
                for (t, tok) in routing.tokens.iter().enumerate() {
                    let row = dp.row_mut(t);
                    for (&i, &d) in tok.selected_real.iter().zip(&dgate[t]) {
                        row[i] = d;
                    }
                    if tok.null_slots() > 0 {
                        let dot: Real = dy.row(t).iter().zip(x.row(t)).map(|(a, b)| a * b).sum();
                        for &s in tok.slots.iter().filter(|&&s| s >= n) {
                            row[s] = dot;
                        }
                        let mass = routing.null_gate_mass(t);
                        let src = dy.row(t).to_vec();
                        for (d, v) in dx.row_mut(t).iter_mut().zip(&src) {
                            *d += mass * v;
                        }
                    }
                }
                softmax_rows_backward(&routing.probs, &dp)?
            }
        };
        if routing.variant == NullVariant::Zero {
            for (t, tok) in routing.tokens.iter().enumerate() {
                let dg = &dgate[t];
                let inner: Real = dg.iter().zip(&tok.gates).map(|(a, b)| a * b).sum();
                let row = dz.row_mut(t);
                for ((&i, &d), &g) in tok.selected_real.iter().zip(dg).zip(&tok.gates) {
                    row[i] = g * (d - inner);
                }
            }
        }
        if let Some(aux) = aux_dz {
            dz.add_assign(aux)?;
        }
        let dlogits = fold_expanded_grad(&dz, n)?;
        grads.router = matmul_at(&dlogits, x)?;
        dx.add_assign(&matmul(&dlogits, &self.router)?)?;
        Ok((dx, grads))
    }
}
