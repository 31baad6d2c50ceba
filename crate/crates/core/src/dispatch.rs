//! Routed expert execution.
//!
//! The grouped path flattens every `(token, slot)` selection, stable-sorts
//! it by expanded slot id, and since null ids (`>= N`) sort last, truncates
//! the sorted list to its first `num_real` entries. Each real expert then
//! runs once over its contiguous block and results are scatter-added back
//! to token order. [`naive_execute`] is the per-token reference loop.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expert::{ExpertBank, Ffn, FfnCache};
use crate::numerics::{gather_rows, scatter_add_into, stable_argsort_bins, Matrix, Real};
use crate::router::{NullVariant, Routing};

/// Sorted view of every slot selection in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub n_tokens: usize,
    pub k_max: usize,
    pub n_experts: usize,
    pub n_null: usize,
    /// Stable permutation of flat selection ids `t * k_max + s` by slot id.
    pub order: Vec<usize>,
    /// Selection count per expanded slot, length `N + M`.
    pub num_per_expert: Vec<usize>,
    /// Selections landing on real experts; the sorted prefix length.
    pub num_real: usize,
    pub sorted_tokens: Vec<usize>,
    /// Gate per sorted selection. Null entries carry the copy-variant slot
    /// weight, or zero for the zero variant.
    pub sorted_gates: Vec<Real>,
    /// For real entries, index into the token's `selected_real`/`gates`.
    pub sorted_gate_index: Vec<usize>,
}

impl DispatchPlan {
    /// `[start, end)` of expert `e`'s block in the sorted order.
    pub fn expert_range(&self, e: usize) -> (usize, usize) {
        let start: usize = self.num_per_expert[..e].iter().sum();
        (start, start + self.num_per_expert[e])
    }

    /// Start offset of every real expert's block, plus the end sentinel.
    pub fn expert_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.n_experts + 1);
        let mut acc = 0;
        offs.push(0);
        for &c in &self.num_per_expert[..self.n_experts] {
            acc += c;
            offs.push(acc);
        }
        offs
    }

    /// Sorted null selections `(token, gate)`; the tail past `num_real`.
    pub fn null_tail(&self) -> impl Iterator<Item = (usize, Real)> + '_ {
        self.sorted_tokens[self.num_real..]
            .iter()
            .copied()
            .zip(self.sorted_gates[self.num_real..].iter().copied())
    }
}

pub fn build_plan(routing: &Routing) -> Result<DispatchPlan> {
    let (n, m, k) = (routing.n_experts, routing.n_null, routing.k_max);
    let t_count = routing.n_tokens();
    let mut flat_ids = Vec::with_capacity(t_count * k);
    let mut flat_gates = Vec::with_capacity(t_count * k);
    let mut flat_gate_index = Vec::with_capacity(t_count * k);
    for (t, tok) in routing.tokens.iter().enumerate() {
        if tok.slots.len() != k {
            return Err(Error::shape(
                "build_plan",
                format!("token {t} has {} slots, expected {k}", tok.slots.len()),
            ));
        }
        let null_gate = match routing.variant {
            NullVariant::Zero => 0.0,
            NullVariant::Copy => routing.null_prob(t),
        };
        let mut j = 0;
        for &s in &tok.slots {
            flat_ids.push(s);
            if s < n {
                flat_gates.push(tok.gates[j]);
                flat_gate_index.push(j);
                j += 1;
            } else {
                flat_gates.push(null_gate);
                flat_gate_index.push(usize::MAX);
            }
        }
    }
    let (order, num_per_expert) = stable_argsort_bins(&flat_ids, n + m)?;
    let num_real = num_per_expert[..n].iter().sum();
    let sorted_tokens = order.iter().map(|&i| i / k).collect();
    let sorted_gates = order.iter().map(|&i| flat_gates[i]).collect();
    let sorted_gate_index = order.iter().map(|&i| flat_gate_index[i]).collect();
    Ok(DispatchPlan {
        n_tokens: t_count,
        k_max: k,
        n_experts: n,
        n_null: m,
        order,
        num_per_expert,
        num_real,
        sorted_tokens,
        sorted_gates,
        sorted_gate_index,
    })
}

/// Grouped forward plus what its backward needs.
#[derive(Debug, Clone)]
pub struct GroupedForward {
    /// `T × D` routed output.
    pub y: Matrix,
    /// Ungated expert outputs for the first `num_real` sorted entries.
    pub expert_out: Matrix,
    /// Per real expert; `None` when the expert received no tokens.
    pub caches: Vec<Option<FfnCache>>,
}

fn check_plan(x: &Matrix, plan: &DispatchPlan, experts: &ExpertBank) -> Result<()> {
    if plan.n_tokens != x.rows() {
        return Err(Error::shape(
            "grouped_execute",
            format!("plan for {} tokens, batch has {}", plan.n_tokens, x.rows()),
        ));
    }
    if plan.n_experts != experts.n_experts() {
        return Err(Error::shape(
            "grouped_execute",
            format!(
                "plan for {} experts, bank has {}",
                plan.n_experts,
                experts.n_experts()
            ),
        ));
    }
    experts.check_input(x, "grouped_execute")
}

/// `y[t] = Σ_{i ∈ selected_real(t)} g_i · E_i(x_t)` via the sorted plan.
pub fn grouped_execute(x: &Matrix, plan: &DispatchPlan, experts: &ExpertBank) -> Result<Matrix> {
    Ok(grouped_forward(x, plan, experts)?.y)
}

pub fn grouped_forward(x: &Matrix, plan: &DispatchPlan, experts: &ExpertBank) -> Result<GroupedForward> {
    check_plan(x, plan, experts)?;
    let d = x.cols();
    let offsets = plan.expert_offsets();
    let mut expert_out = Matrix::zeros(plan.num_real, d);
    let mut caches = Vec::with_capacity(plan.n_experts);
    for (e, ffn) in experts.experts.iter().enumerate() {
        let (start, end) = (offsets[e], offsets[e + 1]);
        if start == end {
            caches.push(None);
            continue;
        }
        let x_in = gather_rows(x, &plan.sorted_tokens[start..end])?;
        let (out, cache) = ffn.forward_cached(&x_in)?;
        expert_out.data_mut()[start * d..end * d].copy_from_slice(out.data());
        caches.push(Some(cache));
    }
    let mut gated = expert_out.clone();
    for j in 0..plan.num_real {
        let g = plan.sorted_gates[j];
        for v in gated.row_mut(j) {
            *v *= g;
        }
    }
    let mut y = Matrix::zeros(x.rows(), d);
    scatter_add_into(&mut y, &plan.sorted_tokens[..plan.num_real], &gated)?;
    Ok(GroupedForward {
        y,
        expert_out,
        caches,
    })
}

/// Backward of [`grouped_forward`] given `dy = ∂L/∂y`.
///
/// Accumulates expert gradients into `grads` and returns `(dx, dgate)`
/// where `dgate[j]` belongs to sorted real entry `j`.
pub fn grouped_backward(
    plan: &DispatchPlan,
    fwd: &GroupedForward,
    experts: &ExpertBank,
    dy: &Matrix,
    grads: &mut [Ffn],
) -> Result<(Matrix, Vec<Real>)> {
    let d = dy.cols();
    let offsets = plan.expert_offsets();
    let real_tokens = &plan.sorted_tokens[..plan.num_real];
    let dy_sorted = gather_rows(dy, real_tokens)?;
    let dgate: Vec<Real> = (0..plan.num_real)
        .map(|j| {
            dy_sorted
                .row(j)
                .iter()
                .zip(fwd.expert_out.row(j))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let mut dx_sorted = Matrix::zeros(plan.num_real, d);
    for (e, ffn) in experts.experts.iter().enumerate() {
        let Some(cache) = &fwd.caches[e] else { continue };
        let (start, end) = (offsets[e], offsets[e + 1]);
        let mut d_out = Matrix::zeros(end - start, d);
        for (i, j) in (start..end).enumerate() {
            let g = plan.sorted_gates[j];
            for (o, v) in d_out.row_mut(i).iter_mut().zip(dy_sorted.row(j)) {
                *o = g * v;
            }
        }
        let dx_e = ffn.backward(cache, &d_out, &mut grads[e])?;
        dx_sorted.data_mut()[start * d..end * d].copy_from_slice(dx_e.data());
    }
    let mut dx = Matrix::zeros(dy.rows(), d);
    scatter_add_into(&mut dx, real_tokens, &dx_sorted)?;
    Ok((dx, dgate))
}

/// Per-token reference loop over the routing decisions.
pub fn naive_execute(x: &Matrix, routing: &Routing, experts: &ExpertBank) -> Result<Matrix> {
    experts.check_input(x, "naive_execute")?;
    if routing.n_tokens() != x.rows() {
        return Err(Error::shape("naive_execute", "routing/batch token count mismatch"));
    }
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    for (t, tok) in routing.tokens.iter().enumerate() {
        let xt = Matrix::new(1, d, x.row(t).to_vec())?;
        for (&e, &g) in tok.selected_real.iter().zip(&tok.gates) {
            let out = experts.experts[e].forward(&xt)?;
            for (yv, ov) in y.row_mut(t).iter_mut().zip(out.data()) {
                *yv += g * ov;
            }
        }
    }
    Ok(y)
}

/// Multiply-accumulate counts for the routed experts of one plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub num_real: usize,
    pub num_selections: usize,
    /// Routed-expert MACs actually executed; nulls cost nothing.
    pub routed_macs: u64,
    /// Routed MACs had every slot been a real expert.
    pub dense_macs: u64,
    pub shared_macs: u64,
}

impl FlopCount {
    pub fn routed_fraction(&self) -> f64 {
        if self.dense_macs == 0 {
            0.0
        } else {
            self.routed_macs as f64 / self.dense_macs as f64
        }
    }

    pub fn accumulate(&mut self, other: &FlopCount) {
        self.num_real += other.num_real;
        self.num_selections += other.num_selections;
        self.routed_macs += other.routed_macs;
        self.dense_macs += other.dense_macs;
        self.shared_macs += other.shared_macs;
    }
}

pub fn flop_report(plan: &DispatchPlan, d_model: usize, d_hidden: usize) -> FlopCount {
    let per_expert = 2 * d_model as u64 * d_hidden as u64;
    let selections = plan.n_tokens * plan.k_max;
    FlopCount {
        num_real: plan.num_real,
        num_selections: selections,
        routed_macs: plan.num_real as u64 * per_expert,
        dense_macs: selections as u64 * per_expert,
        shared_macs: plan.n_tokens as u64 * per_expert,
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::router::{route, route_logits, RoutingConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize, k: usize, rho: Real) -> RoutingConfig {
        RoutingConfig::new(n, k, rho, NullVariant::Zero).unwrap()
    }

    fn one_token(real: &[Real], null: Real, c: &RoutingConfig) -> Routing {
        let mut row = real.to_vec();
        row.push(null);
        route_logits(Matrix::new(1, row.len(), row).unwrap(), c).unwrap()
    }

    #[test]
    fn plan_for_one_real_one_null() {
        let c = cfg(4, 2, 0.5);
        let r = one_token(&[2.0, 1.0, 0.0, -1.0], 1.5, &c);
        let plan = build_plan(&r).unwrap();
        assert_eq!(plan.num_real, 1);
        assert_eq!(plan.num_per_expert[0], 1);
        assert_eq!(plan.num_per_expert.iter().sum::<usize>(), 2);
        assert_eq!(plan.order.len() - plan.num_real, 1);
        assert_eq!(plan.sorted_gates[0], 1.0);
    }

    #[test]
    fn all_null_batch_has_empty_grouped_compute() {
        let c = cfg(4, 2, 0.5);
        let r = one_token(&[0.0; 4], 10.0, &c);
        let plan = build_plan(&r).unwrap();
        assert_eq!(plan.num_real, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = ExpertBank::random(4, 3, 5, &mut rng);
        let x = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let y = grouped_execute(&x, &plan, &bank).unwrap();
        assert_eq!(y, Matrix::zeros(1, 3));
        assert_eq!(flop_report(&plan, 3, 5).routed_macs, 0);
    }

    #[test]
    fn single_token_single_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = ExpertBank::random(4, 3, 5, &mut rng);
        let x = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let c = RoutingConfig::new(4, 1, 1.0, NullVariant::Zero).unwrap();
        let r = one_token(&[0.0, 3.0, 0.0, 0.0], 0.0, &c);
        let plan = build_plan(&r).unwrap();
        let y = grouped_execute(&x, &plan, &bank).unwrap();
        assert_eq!(y, bank.experts[1].forward(&x).unwrap());
    }

    #[test]
    fn histogram_and_stability_against_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(8, 4, 0.5);
        let x = Matrix::random_normal(64, 6, 1.0, &mut rng);
        let w = Matrix::random_normal(9, 6, 1.0, &mut rng);
        let r = route(&x, &w, &c).unwrap();
        let plan = build_plan(&r).unwrap();
        let mut counts = vec![0usize; c.n_slots()];
        for tok in &r.tokens {
            for &s in &tok.slots {
                counts[s] += 1;
            }
        }
        assert_eq!(plan.num_per_expert, counts);
        assert_eq!(counts.iter().sum::<usize>(), 64 * 4);
        assert_eq!(plan.num_real, counts[..8].iter().sum::<usize>());
        // keys non-decreasing, equal keys in input order
        let key = |i: usize| r.tokens[i / 4].slots[i % 4];
        for w in plan.order.windows(2) {
            assert!(key(w[0]) < key(w[1]) || (key(w[0]) == key(w[1]) && w[0] < w[1]));
        }
        // null tail
        assert!(plan.order[plan.num_real..].iter().all(|&i| key(i) >= 8));
        // gates of real entries sum to one per token with r >= 1
        let mut sums = vec![0.0; 64];
        for j in 0..plan.num_real {
            sums[plan.sorted_tokens[j]] += plan.sorted_gates[j];
        }
        for (t, tok) in r.tokens.iter().enumerate() {
            if tok.r() > 0 {
                assert!((sums[t] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grouped_matches_naive_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen_r = [false; 5];
        for _ in 0..100 {
            let c = cfg(8, 4, 0.5);
            let x = Matrix::random_normal(64, 6, 1.0, &mut rng);
            let mut w = Matrix::random_normal(9, 6, 1.0, &mut rng);
            // shift the null row to sweep r across 0..=k
            let bias: Real = rng.gen_range(-3.0..3.0);
            for v in w.row_mut(8) {
                *v += bias * 0.3;
            }
            let bank = ExpertBank::random(8, 6, 10, &mut rng);
            let r = route(&x, &w, &c).unwrap();
            for tok in &r.tokens {
                seen_r[tok.r()] = true;
            }
            let plan = build_plan(&r).unwrap();
            let g = grouped_execute(&x, &plan, &bank).unwrap();
            let n = naive_execute(&x, &r, &bank).unwrap();
            assert!(g.max_abs_diff(&n).unwrap() < 1e-9);
        }
        assert!(seen_r.iter().all(|&s| s), "{seen_r:?}");
    }

    #[test]
    fn outputs_do_not_depend_on_null_copy_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_normal(32, 6, 1.0, &mut rng);
        let w = Matrix::random_normal(9, 6, 1.0, &mut rng);
        let bank = ExpertBank::random(8, 6, 10, &mut rng);
        // with k = 4 and M >= 4, any M >= k gives the same decisions
        let a = route(&x, &w, &cfg(8, 4, 1.0).with_null_copies(4)).unwrap();
        let b = route(&x, &w, &cfg(8, 4, 1.0).with_null_copies(40)).unwrap();
        for (ta, tb) in a.tokens.iter().zip(&b.tokens) {
            assert_eq!(ta.selected_real, tb.selected_real);
        }
        let ya = grouped_execute(&x, &build_plan(&a).unwrap(), &bank).unwrap();
        let yb = grouped_execute(&x, &build_plan(&b).unwrap(), &bank).unwrap();
        assert!(ya.max_abs_diff(&yb).unwrap() < 1e-12);
    }

    /// Routing where each token draws k distinct expanded slots uniformly.
    fn uniform_slot_routing(t: usize, c: &RoutingConfig, rng: &mut ChaCha8Rng) -> Routing {
        let mut r = route_logits(Matrix::zeros(t, c.n_experts + 1), c).unwrap();
        for tok in &mut r.tokens {
            let mut pool: Vec<usize> = (0..c.n_slots()).collect();
            for i in 0..c.k_max {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            tok.slots = pool[..c.k_max].to_vec();
            tok.selected_real = tok.slots.iter().copied().filter(|&s| s < c.n_experts).collect();
            let g = 1.0 / tok.selected_real.len().max(1) as Real;
            tok.gates = vec![g; tok.selected_real.len()];
        }
        r
    }

    #[test]
    fn flop_report_scales_with_num_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dense = build_plan(&uniform_slot_routing(4096, &cfg(16, 4, 1.0), &mut rng)).unwrap();
        let fd = flop_report(&dense, 8, 16);
        assert_eq!(fd.routed_macs, fd.dense_macs);
        assert_eq!(fd.dense_macs, 4096 * 4 * 2 * 8 * 16);
        let sparse = build_plan(&uniform_slot_routing(4096, &cfg(16, 4, 0.5), &mut rng)).unwrap();
        let fs = flop_report(&sparse, 8, 16);
        assert_eq!(fs.routed_macs, fs.num_real as u64 * 2 * 8 * 16);
        assert!((fs.routed_fraction() / 0.5 - 1.0).abs() < 0.10, "{}", fs.routed_fraction());
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(4, 2, 0.5);
        let r = one_token(&[0.0; 4], 0.0, &c);
        let plan = build_plan(&r).unwrap();
        let bank = ExpertBank::random(4, 3, 5, &mut rng);
        let x = Matrix::random_normal(2, 3, 1.0, &mut rng);
        assert!(matches!(grouped_execute(&x, &plan, &bank), Err(Error::Shape { .. })));
    }
}
