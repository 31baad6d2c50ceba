//! Oracle checks shared by the `verify` command and the test suites.
//!
//! Every check compares the production path against something computed a
//! different way: a per-token reverse-mode tape, a textbook top-k layer,
//! central finite differences, or a closed form.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::{build_plan, grouped_execute, naive_execute};
use crate::error::{Error, Result};
use crate::expert::{ExpertBank, Ffn};
use crate::losses::{aux_logit_grad, load_balance_loss, z_loss, RoutingStats};
use crate::moe_layer::{LayerGrads, MoeLayer};
use crate::numerics::gradcheck::{central_diff, rel_err};
use crate::numerics::{matmul_bt, GradTape, Matrix, NodeId, Real};
use crate::router::{route_by_threshold, route_logits, NullVariant, Routing, RoutingConfig};

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_err: Real,
}

impl CheckResult {
    fn within(name: impl Into<String>, err: Real, tol: Real) -> Self {
        Self {
            name: name.into(),
            passed: err.is_finite() && err < tol,
            max_err: err,
        }
    }

    fn exact(name: impl Into<String>, mismatches: usize) -> Self {
        Self {
            name: name.into(),
            passed: mismatches == 0,
            max_err: mismatches as Real,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Dispatch,
    Router,
    Losses,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Self::Gradients),
            "dispatch" => Ok(Self::Dispatch),
            "router" => Ok(Self::Router),
            "losses" => Ok(Self::Losses),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown suite '{other}' (expected gradients, dispatch, router, losses, all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Gradients => "gradients",
            Self::Dispatch => "dispatch",
            Self::Router => "router",
            Self::Losses => "losses",
            Self::All => "all",
        };
        f.write_str(s)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Router | Suite::All) {
        out.push(threshold_equivalence(20_000, seed)?);
        out.push(solution_space_recovery(seed)?.zero_check());
        out.push(solution_space_recovery(seed)?.copy_check());
    }
    if matches!(suite, Suite::Dispatch | Suite::All) {
        out.extend(dispatch_equivalence(seed)?);
        out.push(dense_fallback(20, seed)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(finite_difference_checks(20, seed)?);
    }
    if matches!(suite, Suite::Losses | Suite::All) {
        out.extend(loss_anchors()?);
    }
    Ok(out)
}

/// Tab-separated report: `name<TAB>pass|FAIL<TAB>max_err`.
pub fn format_report(results: &[CheckResult]) -> String {
    let mut s = String::from("name\tstatus\tmax_err\n");
    for r in results {
        let status = if r.passed { "pass" } else { "FAIL" };
        s.push_str(&format!("{}\t{}\t{:.3e}\n", r.name, status, r.max_err));
    }
    s
}

// ---------------------------------------------------------------------------
// Per-token tape reference
// ---------------------------------------------------------------------------

/// Output and gradients of the per-token tape reference.
#[derive(Debug, Clone)]
pub struct ReferencePass {
    pub y: Matrix,
    pub dx: Matrix,
    pub grads: LayerGrads,
}

struct FfnNodes {
    w_in: NodeId,
    w_out: NodeId,
}

fn ffn_on_tape(tape: &mut GradTape, f: &FfnNodes, x: NodeId) -> Result<NodeId> {
    let pre = tape.matmul_bt(x, f.w_in)?;
    let act = tape.silu(pre);
    tape.matmul_bt(act, f.w_out)
}

/// Re-derives the layer on a [`GradTape`], one token and one selected slot
/// at a time, reusing only the (non-differentiable) selection sets from
/// `routing`. The scalar loss is `⟨dy, y⟩ + balance·L_bal + z·L_z` with the
/// load fractions held fixed.
pub fn reference_pass(
    layer: &MoeLayer,
    x: &Matrix,
    routing: &Routing,
    use_shared: bool,
    dy: &Matrix,
    balance: Real,
    z: Real,
) -> Result<ReferencePass> {
    let (n, m) = (routing.n_experts, routing.n_null);
    let t_count = x.rows();
    let d = x.cols();
    let mut tape = GradTape::new();
    let xn = tape.leaf(x.clone());
    let wn = tape.leaf(layer.router.clone());
    let experts: Vec<FfnNodes> = layer
        .bank
        .experts
        .iter()
        .map(|f| FfnNodes {
            w_in: tape.leaf(f.w_in.clone()),
            w_out: tape.leaf(f.w_out.clone()),
        })
        .collect();
    let shared = FfnNodes {
        w_in: tape.leaf(layer.bank.shared.w_in.clone()),
        w_out: tape.leaf(layer.bank.shared.w_out.clone()),
    };

    let logits = tape.matmul_bt(xn, wn)?;
    let cols: Vec<usize> = (0..n).chain(std::iter::repeat(n).take(m)).collect();
    let expanded = tape.select_cols(logits, cols)?;
    let probs = tape.softmax_rows(expanded)?;

    let mut rows = Vec::with_capacity(t_count);
    for (t, tok) in routing.tokens.iter().enumerate() {
        let xt = tape.gather_rows(xn, vec![t])?;
        let mut acc = if use_shared {
            ffn_on_tape(&mut tape, &shared, xt)?
        } else {
            tape.leaf(Matrix::zeros(1, d))
        };
        let at: Vec<(usize, usize)> = tok.selected_real.iter().map(|&i| (t, i)).collect();
        if !at.is_empty() {
            let gates = match routing.variant {
                NullVariant::Zero => {
                    let picked = tape.gather(expanded, at)?;
                    tape.softmax_rows(picked)?
                }
                NullVariant::Copy => tape.gather(probs, at)?,
            };
            for (j, &e) in tok.selected_real.iter().enumerate() {
                let g = tape.gather(gates, vec![(0, j)])?;
                let out = ffn_on_tape(&mut tape, &experts[e], xt)?;
                let scaled = tape.scale_by(g, out)?;
                acc = tape.add(acc, scaled)?;
            }
        }
        if routing.variant == NullVariant::Copy {
            for &s in tok.slots.iter().filter(|&&s| s >= n) {
                let g = tape.gather(probs, vec![(t, s)])?;
                let scaled = tape.scale_by(g, xt)?;
                acc = tape.add(acc, scaled)?;
            }
        }
        rows.push(acc);
    }
    let y = tape.stack_rows(rows)?;
    let mut loss = tape.weighted_sum(y, dy.clone())?;
    if t_count > 0 && balance != 0.0 {
        let stats = RoutingStats::from_routing(routing);
        let c = balance * (n + m) as Real / t_count as Real;
        let mut w = Matrix::zeros(t_count, n + m);
        for t in 0..t_count {
            for (v, f) in w.row_mut(t).iter_mut().zip(&stats.f) {
                *v = c * f;
            }
        }
        let bal = tape.weighted_sum(probs, w)?;
        loss = tape.add(loss, bal)?;
    }
    if t_count > 0 && z != 0.0 {
        let lse = tape.log_sum_exp_rows(expanded)?;
        let sq = tape.square(lse);
        let zl = tape.weighted_sum(sq, Matrix::filled(t_count, 1, z / t_count as Real))?;
        loss = tape.add(loss, zl)?;
    }
    let g = tape.backward(loss, Matrix::filled(1, 1, 1.0))?;
    let grad_or_zero = |id: NodeId, like: &Matrix| {
        g.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    };
    let bank = ExpertBank {
        experts: experts
            .iter()
            .zip(&layer.bank.experts)
            .map(|(nodes, f)| Ffn {
                w_in: grad_or_zero(nodes.w_in, &f.w_in),
                w_out: grad_or_zero(nodes.w_out, &f.w_out),
            })
            .collect(),
        shared: Ffn {
            w_in: grad_or_zero(shared.w_in, &layer.bank.shared.w_in),
            w_out: grad_or_zero(shared.w_out, &layer.bank.shared.w_out),
        },
    };
    Ok(ReferencePass {
        y: tape.value(y).clone(),
        dx: grad_or_zero(xn, x),
        grads: MoeLayer {
            router: grad_or_zero(wn, &layer.router),
            bank,
        },
    })
}

/// Largest absolute difference across every gradient of two layer passes.
pub fn max_grad_diff(a: &LayerGrads, b: &LayerGrads) -> Result<Real> {
    let mut worst: Real = 0.0;
    for (x, y) in a.matrices().into_iter().zip(b.matrices()) {
        worst = worst.max(x.max_abs_diff(y)?);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Standard top-k layer
// ---------------------------------------------------------------------------

/// Textbook top-k token-choice MoE over `N` experts: pick the `k` largest
/// router logits (ties to the lower index), softmax over just those, and
/// add `g · E(x)` on top of the shared expert. Forward and backward are
/// written out per token without the dispatch machinery. The router
/// matrix's last (null) row is ignored and receives a zero gradient.
pub fn standard_topk_layer(
    layer: &MoeLayer,
    x: &Matrix,
    k: usize,
    use_shared: bool,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, LayerGrads)> {
    let n = layer.n_experts();
    let (t_count, d) = x.shape();
    let mut grads = layer.zeros_like();
    let mut y = Matrix::zeros(t_count, d);
    let mut dx = Matrix::zeros(t_count, d);
    let mut dlogits = Matrix::zeros(t_count, n + 1);
    let (shared_y, shared_cache) = layer.bank.shared.forward_cached(x)?;
    if use_shared {
        y = shared_y;
        dx = layer.bank.shared.backward(&shared_cache, dy, &mut grads.bank.shared)?;
    }
    let logits = matmul_bt(x, &layer.router)?;
    let mut routed = Matrix::zeros(t_count, d);
    let mut routed_dx = Matrix::zeros(t_count, d);
    // per expert, so that accumulation order matches a grouped layout
    let mut picks: Vec<Vec<(usize, Real)>> = vec![Vec::new(); n];
    let mut token_sel: Vec<(Vec<usize>, Vec<Real>)> = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let z = &logits.row(t)[..n];
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        let top = z[idx[0]];
        let mut gates: Vec<Real> = idx.iter().map(|&i| (z[i] - top).exp()).collect();
        let mut s = 0.0;
        for g in &gates {
            s += g;
        }
        for g in gates.iter_mut() {
            *g /= s;
        }
        for (&i, &g) in idx.iter().zip(&gates) {
            picks[i].push((t, g));
        }
        token_sel.push((idx, gates));
    }
    let mut dgate: Vec<Vec<Real>> = token_sel.iter().map(|(i, _)| vec![0.0; i.len()]).collect();
    for (e, list) in picks.iter().enumerate() {
        let ffn = &layer.bank.experts[e];
        for &(t, g) in list {
            let xt = Matrix::new(1, d, x.row(t).to_vec())?;
            let (out, cache) = ffn.forward_cached(&xt)?;
            for (yv, ov) in routed.row_mut(t).iter_mut().zip(out.data()) {
                *yv += g * ov;
            }
            let dyt: Vec<Real> = dy.row(t).to_vec();
            let j = token_sel[t].0.iter().position(|&i| i == e).unwrap_or(0);
            dgate[t][j] = dyt.iter().zip(out.data()).map(|(a, b)| a * b).sum();
            let d_out = Matrix::new(1, d, dyt.iter().map(|v| g * v).collect())?;
            let dxt = ffn.backward(&cache, &d_out, &mut grads.bank.experts[e])?;
            for (a, b) in routed_dx.row_mut(t).iter_mut().zip(dxt.data()) {
                *a += b;
            }
        }
    }
    y.add_assign(&routed)?;
    dx.add_assign(&routed_dx)?;
    for t in 0..t_count {
        let (idx, gates) = &token_sel[t];
        let inner: Real = dgate[t].iter().zip(gates).map(|(a, b)| a * b).sum();
        for ((&i, &dg), &g) in idx.iter().zip(&dgate[t]).zip(gates) {
            dlogits.set(t, i, g * (dg - inner));
        }
    }
    for i in 0..=n {
        for c in 0..d {
            let mut acc = 0.0;
            for t in 0..t_count {
                acc += dlogits.get(t, i) * x.get(t, c);
            }
            grads.router.set(i, c, acc);
        }
    }
    for t in 0..t_count {
        for c in 0..d {
            let mut acc = 0.0;
            for i in 0..=n {
                acc += dlogits.get(t, i) * layer.router.get(i, c);
            }
            let v = dx.get(t, c) + acc;
            dx.set(t, c, v);
        }
    }
    Ok((y, dx, grads))
}

/// Bitwise comparison of the `M = 0` layer against [`standard_topk_layer`].
pub fn dense_fallback(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15e);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.gen_range(2..10);
        let k = rng.gen_range(1..=n);
        let d = rng.gen_range(2..8);
        let h = rng.gen_range(2..8);
        let t = rng.gen_range(1..24);
        let use_shared = rng.gen_bool(0.7);
        let cfg = RoutingConfig::new(n, k, 1.0, NullVariant::Zero)?.with_shared_expert(use_shared);
        let layer = MoeLayer::random(n, d, h, 1.0, &mut rng);
        let x = Matrix::random_normal(t, d, 1.0, &mut rng);
        let dy = Matrix::random_normal(t, d, 1.0, &mut rng);
        let (y, st) = layer.forward(&x, &cfg)?;
        let (dx, g) = layer.backward(&st, &dy, None)?;
        let (ry, rdx, rg) = standard_topk_layer(&layer, &x, k, use_shared, &dy)?;
        let same = y.data() == ry.data()
            && dx.data() == rdx.data()
            && g.matrices().iter().zip(rg.matrices()).all(|(a, b)| a.data() == b.data());
        if !same {
            mismatches += 1;
        }
    }
    Ok(CheckResult::exact("dense_fallback_bitwise", mismatches))
}

// ---------------------------------------------------------------------------
// Router checks
// ---------------------------------------------------------------------------

/// Expanded-softmax routing vs the threshold rule on random tokens with
/// `M >= k_max`. Half of the tokens are drawn on a coarse lattice so that
/// ties between real and null logits are common.
pub fn threshold_equivalence(tokens: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e5);
    let mut mismatches = 0;
    let mut done = 0;
    while done < tokens {
        let n = rng.gen_range(2..=16);
        let k = rng.gen_range(1..=n.min(8));
        let rho = [1.0, 0.75, 0.67, 0.5, 0.25, 0.17][rng.gen_range(0..6)];
        let variant = if rng.gen_bool(0.5) { NullVariant::Zero } else { NullVariant::Copy };
        let mut cfg = RoutingConfig::new(n, k, rho, variant)?;
        if cfg.n_null < k {
            cfg = cfg.with_null_copies(k + rng.gen_range(0..4));
        }
        let batch = 256.min(tokens - done);
        let lattice = rng.gen_bool(0.5);
        let mut logits = Matrix::zeros(batch, n + 1);
        for v in logits.data_mut() {
            *v = if lattice {
                rng.gen_range(-2i32..=2) as Real * 0.5
            } else {
                rng.gen::<Real>() * 4.0 - 2.0
            };
        }
        let expanded = route_logits(logits.clone(), &cfg)?;
        let thresh = route_by_threshold(&logits, &cfg)?;
        for (a, b) in expanded.tokens.iter().zip(&thresh) {
            let gates_match = a.gates.len() == b.gates.len()
                && a.gates.iter().zip(&b.gates).all(|(x, y)| (x - y).abs() <= 1e-12);
            let null_match = a.null_slots() == b.null_slots();
            if a.selected_real != b.selected_real || !gates_match || !null_match {
                mismatches += 1;
            }
        }
        done += batch;
    }
    Ok(CheckResult::exact("threshold_vs_expansion", mismatches))
}

/// Outcome of the constructed solution-space instance.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryOutcome {
    /// max |y(K4, ρ=0.5, zero) − y(K2, ρ=1)|
    pub zero_err: Real,
    /// max |y(K4, ρ=0.5, copy) − y(K2, ρ=1)|
    pub copy_gap: Real,
    /// Lower bound the copy gap must clear: the smallest per-token norm of
    /// the null residual term, scaled down by √D for the max-abs norm.
    pub margin: Real,
    /// Every token selected exactly two real experts.
    pub all_two_real: bool,
}

impl RecoveryOutcome {
    pub fn zero_check(&self) -> CheckResult {
        let mut c = CheckResult::within("solution_space_recovery_zero", self.zero_err, 1e-10);
        c.passed &= self.all_two_real;
        c
    }

    pub fn copy_check(&self) -> CheckResult {
        CheckResult {
            name: "solution_space_violation_copy".into(),
            passed: self.all_two_real && self.copy_gap > self.margin && self.margin > 0.0,
            max_err: self.copy_gap,
        }
    }
}

/// Solves `a · w = b` for square `a` by partial-pivot Gaussian elimination.
fn solve(mut a: Vec<Vec<Real>>, mut b: Vec<Real>) -> Result<Vec<Real>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap_or(col);
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Config("singular system in recovery construction".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut w = vec![0.0; n];
    for r in (0..n).rev() {
        let s: Real = (r + 1..n).map(|c| a[r][c] * w[c]).sum();
        w[r] = (b[r] - s) / a[r][r];
    }
    Ok(w)
}

/// Builds a layer whose null row places every token's null logit midway
/// between its 2nd and 3rd real logits, so `K4 ρ=0.5` routes exactly two
/// real experts per token, and compares against the dense `K2` layer with
/// the same weights.
pub fn solution_space_recovery(seed: u64) -> Result<RecoveryOutcome> {
    let (n, d, h, t) = (8, 12, 10, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50a5);
    let mut layer = MoeLayer::random(n, d, h, 1.0, &mut rng);
    let x = Matrix::random_normal(t, d, 1.0, &mut rng);
    let real_logits = matmul_bt(&x, &layer.router)?;
    let mut mid = Vec::with_capacity(t);
    for r in 0..t {
        let mut z: Vec<Real> = real_logits.row(r)[..n].to_vec();
        z.sort_by(|a, b| b.partial_cmp(a).unwrap());
        mid.push(0.5 * (z[1] + z[2]));
    }
    // minimum-norm null row: w = Xᵀ (X Xᵀ)⁻¹ mid
    let gram: Vec<Vec<Real>> = (0..t)
        .map(|i| {
            (0..t)
                .map(|j| x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let alpha = solve(gram, mid)?;
    for c in 0..d {
        let v: Real = (0..t).map(|i| alpha[i] * x.get(i, c)).sum();
        layer.router.set(n, c, v);
    }

    let dense = RoutingConfig::new(n, 2, 1.0, NullVariant::Zero)?;
    let sparse = RoutingConfig::new(n, 4, 0.5, NullVariant::Zero)?;
    let copy = RoutingConfig::new(n, 4, 0.5, NullVariant::Copy)?;
    let (y_dense, _) = layer.forward(&x, &dense)?;
    let (y_zero, st) = layer.forward(&x, &sparse)?;
    let (y_copy, st_copy) = layer.forward(&x, &copy)?;
    let all_two_real = st.routing.tokens.iter().all(|tok| tok.r() == 2)
        && st_copy.routing.tokens.iter().all(|tok| tok.r() == 2);
    let margin = (0..t)
        .map(|r| {
            let mass = st_copy.routing.null_gate_mass(r);
            let norm: Real = x.row(r).iter().map(|v| v * v).sum::<Real>().sqrt();
            mass * norm / (d as Real).sqrt()
        })
        .fold(Real::INFINITY, Real::min)
        * 1e-3;
    Ok(RecoveryOutcome {
        zero_err: y_zero.max_abs_diff(&y_dense)?,
        copy_gap: y_copy.max_abs_diff(&y_dense)?,
        margin,
        all_two_real,
    })
}

// ---------------------------------------------------------------------------
// Dispatch checks
// ---------------------------------------------------------------------------

/// Layer and batch whose router sends token `t` to exactly `targets[t]`
/// real experts: inputs are near one-hot, so logits are set column by
/// column through the router matrix.
pub fn forced_r_instance(
    cfg: &RoutingConfig,
    targets: &[usize],
    d_hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(MoeLayer, Matrix)> {
    let n = cfg.n_experts;
    let t = targets.len();
    let d = t + 2;
    let mut layer = MoeLayer::random(n, d, d_hidden, 1.0, rng);
    let mut x = Matrix::random_normal(t, d, 0.01, rng);
    for r in 0..t {
        x.set(r, r, 1.0 + x.get(r, r));
    }
    layer.router.fill(0.0);
    for (r, &want) in targets.iter().enumerate() {
        if want > cfg.k_max {
            return Err(Error::Config(format!("target r {want} exceeds k_max")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (rank, &e) in order.iter().enumerate() {
            let v = if rank < want {
                1.0 + rng.gen::<Real>()
            } else {
                -1.0 - rng.gen::<Real>()
            };
            layer.router.set(e, r, v);
        }
        layer.router.set(n, r, 0.0);
    }
    // small extra weight on the noise columns keeps every path non-trivial
    for i in 0..=n {
        for c in t..d {
            layer.router.set(i, c, 0.1 * (rng.gen::<Real>() - 0.5));
        }
    }
    Ok((layer, x))
}

/// Grouped vs per-token execution across every real-slot count, both
/// variants, with and without auxiliary losses, including all-null batches.
pub fn dispatch_equivalence(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd159);
    let mut fwd_err: Real = 0.0;
    let mut layer_fwd_err: Real = 0.0;
    let mut grad_err: Real = 0.0;
    let mut r_seen = std::collections::BTreeSet::new();
    let mut all_null_batches = 0;
    for variant in [NullVariant::Zero, NullVariant::Copy] {
        for k in [1usize, 2, 4] {
            for case in 0..6 {
                let cfg = RoutingConfig::new(8, k, 0.5, variant)?.with_shared_expert(case % 2 == 0);
                let t = 10;
                let targets: Vec<usize> = if case == 0 {
                    vec![0; t]
                } else {
                    (0..t).map(|i| (i + case) % (k + 1)).collect()
                };
                if targets.iter().all(|&r| r == 0) {
                    all_null_batches += 1;
                }
                let (layer, x) = forced_r_instance(&cfg, &targets, 6, &mut rng)?;
                let (y, st) = layer.forward(&x, &cfg)?;
                let got: Vec<usize> = st.routing.real_counts();
                if got != targets {
                    return Err(Error::Config("forced routing construction failed".into()));
                }
                r_seen.extend(got);
                let plan = build_plan(&st.routing)?;
                let grouped = grouped_execute(&x, &plan, &layer.bank)?;
                let naive = naive_execute(&x, &st.routing, &layer.bank)?;
                fwd_err = fwd_err.max(grouped.max_abs_diff(&naive)?);

                let dy = Matrix::random_normal(t, x.cols(), 1.0, &mut rng);
                let (bal, z) = if case >= 3 { (0.3, 0.05) } else { (0.0, 0.0) };
                let stats = RoutingStats::from_routing(&st.routing);
                let aux = aux_logit_grad(&st.routing, &stats, bal, z)?;
                let (dx, g) = layer.backward(&st, &dy, Some(&aux))?;
                let reference = reference_pass(&layer, &x, &st.routing, cfg.use_shared_expert, &dy, bal, z)?;
                layer_fwd_err = layer_fwd_err.max(y.max_abs_diff(&reference.y)?);
                grad_err = grad_err
                    .max(dx.max_abs_diff(&reference.dx)?)
                    .max(max_grad_diff(&g, &reference.grads)?);
            }
        }
    }
    let coverage = r_seen.len() == 5 && all_null_batches > 0;
    let mut cov = CheckResult::exact("dispatch_r_coverage", usize::from(!coverage));
    cov.max_err = 0.0;
    Ok(vec![
        cov,
        CheckResult::within("grouped_vs_naive_forward", fwd_err, 1e-9),
        CheckResult::within("layer_vs_tape_forward", layer_fwd_err, 1e-9),
        CheckResult::within("layer_vs_tape_gradients", grad_err, 1e-8),
    ])
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Which differentiable path a finite-difference instance targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradPath {
    Router,
    Experts,
    Input,
    Balance,
    ZLoss,
}

impl GradPath {
    pub const ALL: [GradPath; 5] = [Self::Router, Self::Experts, Self::Input, Self::Balance, Self::ZLoss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Router => "router_weights",
            Self::Experts => "expert_weights",
            Self::Input => "inputs",
            Self::Balance => "balance_loss",
            Self::ZLoss => "z_loss",
        }
    }
}

/// Worst relative error of one random instance along `path`.
pub fn finite_difference_instance(path: GradPath, variant: NullVariant, seed: u64) -> Result<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 5;
    let k = rng.gen_range(1..=3);
    let cfg = RoutingConfig::new(n, k, 0.5, variant)?.with_shared_expert(rng.gen_bool(0.5));
    let layer = MoeLayer::random(n, 4, 5, 1.0, &mut rng);
    let x = Matrix::random_normal(6, 4, 1.0, &mut rng);
    let (task, bal, zw) = match path {
        GradPath::Balance => (0.0, 1.0, 0.0),
        GradPath::ZLoss => (0.0, 0.0, 1.0),
        _ => (1.0, 0.02, 0.001),
    };
    let mut w = Matrix::random_normal(6, 4, 1.0, &mut rng);
    w.scale(task);
    let (_, st) = layer.forward(&x, &cfg)?;
    let stats = RoutingStats::from_routing(&st.routing);
    let aux = aux_logit_grad(&st.routing, &stats, bal, zw)?;
    let (dx, g) = layer.backward(&st, &w, Some(&aux))?;
    let base: Vec<Vec<usize>> = st.routing.tokens.iter().map(|t| t.slots.clone()).collect();
    let frozen_f = stats.f.clone();
    let mut moved = false;
    let mut loss = |l: &MoeLayer, x: &Matrix| -> Real {
        let Ok((y, st)) = l.forward(x, &cfg) else { return Real::NAN };
        if st.routing.tokens.iter().zip(&base).any(|(t, b)| &t.slots != b) {
            moved = true;
        }
        let mut s = RoutingStats::from_routing(&st.routing);
        s.f = frozen_f.clone();
        let task_term: Real = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let z = z_loss(&st.routing.expanded_logits).unwrap_or(Real::NAN);
        task_term + bal * load_balance_loss(&s) + zw * z
    };
    let h = 1e-6;
    let err = match path {
        GradPath::Input => rel_err(&dx, &central_diff(&x, h, |p| loss(&layer, p))),
        GradPath::Router | GradPath::Balance | GradPath::ZLoss => {
            let num = central_diff(&layer.router, h, |p| {
                let mut l = layer.clone();
                l.router = p.clone();
                loss(&l, &x)
            });
            rel_err(&g.router, &num)
        }
        GradPath::Experts => {
            let mut worst: Real = 0.0;
            let count = layer.bank.matrices().len();
            for i in 0..count {
                let base_m = layer.bank.matrices()[i].clone();
                let num = central_diff(&base_m, h, |p| {
                    let mut l = layer.clone();
                    *l.bank.matrices_mut()[i] = p.clone();
                    loss(&l, &x)
                });
                let ana = g.bank.matrices()[i];
                let e = if num.max_abs() < 1e-12 && ana.max_abs() < 1e-12 {
                    0.0
                } else {
                    rel_err(ana, &num)
                };
                worst = worst.max(e);
            }
            worst
        }
    };
    if moved {
        // a step crossed a routing boundary; the instance is not smooth
        return Ok(Real::NAN);
    }
    Ok(err)
}

/// `instances` smooth instances per path and variant; instances whose FD
/// step crosses a routing boundary are redrawn.
pub fn finite_difference_checks(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for path in GradPath::ALL {
        for variant in [NullVariant::Zero, NullVariant::Copy] {
            let mut worst: Real = 0.0;
            let mut accepted = 0;
            let mut s = seed.wrapping_mul(1000) + path as u64 * 100_000 + variant as u64 * 50_000;
            while accepted < instances {
                let e = finite_difference_instance(path, variant, s)?;
                s += 1;
                if e.is_nan() {
                    continue;
                }
                worst = worst.max(e);
                accepted += 1;
            }
            out.push(CheckResult::within(
                format!("fd_{}_{}", path.name(), variant.as_str()),
                worst,
                1e-5,
            ));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss anchors
// ---------------------------------------------------------------------------

pub fn loss_anchors() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut worst: Real = 0.0;
    for (n, m) in [(16usize, 16usize), (8, 24), (16, 0), (60, 68)] {
        let slots = n + m;
        let u = 1.0 / slots as Real;
        let stats = RoutingStats {
            n_experts: n,
            n_null: m,
            k_max: 1,
            n_tokens: 1,
            f: vec![u; slots],
            p: vec![u; slots],
        };
        worst = worst.max((load_balance_loss(&stats) - 1.0).abs());
    }
    out.push(CheckResult {
        name: "balance_uniform_is_one".into(),
        passed: worst == 0.0,
        max_err: worst,
    });
    let mut worst: Real = 0.0;
    for slots in [2usize, 17, 32, 128] {
        let z = z_loss(&Matrix::zeros(5, slots))?;
        worst = worst.max((z - (slots as Real).ln().powi(2)).abs());
    }
    out.push(CheckResult::within("z_loss_zero_logits", worst, 1e-10));
    Ok(out)
}
