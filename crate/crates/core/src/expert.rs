//! Expert networks: two-matrix SiLU feed-forward blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_at, matmul_bt, silu, silu_backward, Matrix, Real};

/// `E(x) = silu(x · W_inᵀ) · W_outᵀ`, with `W_in: H × D` and `W_out: D × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// Activations saved by [`Ffn::forward_cached`].
#[derive(Debug, Clone)]
pub struct FfnCache {
    pub x: Matrix,
    pub pre: Matrix,
    pub act: Matrix,
}

impl Ffn {
    pub fn zeros(d_model: usize, d_hidden: usize) -> Self {
        Self {
            w_in: Matrix::zeros(d_hidden, d_model),
            w_out: Matrix::zeros(d_model, d_hidden),
        }
    }

    pub fn random<R: Rng + ?Sized>(d_model: usize, d_hidden: usize, rng: &mut R) -> Self {
        let in_std = 1.0 / (d_model as Real).sqrt();
        let out_std = 0.5 / (d_hidden as Real).sqrt();
        Self {
            w_in: Matrix::random_normal(d_hidden, d_model, in_std, rng),
            w_out: Matrix::random_normal(d_model, d_hidden, out_std, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w_in.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, FfnCache)> {
        let pre = matmul_bt(x, &self.w_in)?;
        let act = silu(&pre);
        let out = matmul_bt(&act, &self.w_out)?;
        Ok((
            out,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns `dx`.
    pub fn backward(&self, cache: &FfnCache, dy: &Matrix, grads: &mut Ffn) -> Result<Matrix> {
        let d_act = matmul(dy, &self.w_out)?;
        grads.w_out.add_assign(&matmul_at(dy, &cache.act)?)?;
        let d_pre = silu_backward(&cache.pre, &d_act)?;
        grads.w_in.add_assign(&matmul_at(&d_pre, &cache.x)?)?;
        matmul(&d_pre, &self.w_in)
    }

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.w_out.len()
    }
}

/// `N` routed experts plus one shared expert of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<Ffn>,
    pub shared: Ffn,
}

impl ExpertBank {
    pub fn zeros(n_experts: usize, d_model: usize, d_hidden: usize) -> Self {
        Self {
            experts: (0..n_experts).map(|_| Ffn::zeros(d_model, d_hidden)).collect(),
            shared: Ffn::zeros(d_model, d_hidden),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        n_experts: usize,
        d_model: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let experts = (0..n_experts)
            .map(|_| Ffn::random(d_model, d_hidden, rng))
            .collect();
        let shared = Ffn::random(d_model, d_hidden, rng);
        Self { experts, shared }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.shared.d_model()
    }

    pub fn d_hidden(&self) -> usize {
        self.shared.d_hidden()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_experts(), self.d_model(), self.d_hidden())
    }

    /// `(N + 1) · 2 · D · H`.
    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Ffn::param_count).sum::<usize>() + self.shared.param_count()
    }

    pub(crate) fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(Error::shape(
                op,
                format!("input width {} != d_model {}", x.cols(), self.d_model()),
            ));
        }
        Ok(())
    }

    /// Parameter matrices in declared order: experts 0..N (w_in, w_out), then shared.
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.experts
            .iter()
            .chain(std::iter::once(&self.shared))
            .flat_map(|f| [&f.w_in, &f.w_out])
            .collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.experts
            .iter_mut()
            .chain(std::iter::once(&mut self.shared))
            .flat_map(|f| [&mut f.w_in, &mut f.w_out])
            .collect()
    }
}
