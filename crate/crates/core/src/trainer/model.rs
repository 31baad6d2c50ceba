//! Residual stack of MoE layers trained on a mean-squared-error target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{aux_logit_grad, load_balance_loss, total_loss, z_loss, LossWeights, RoutingStats};
use crate::moe_layer::{LayerGrads, LayerState, MoeLayer};
use crate::numerics::{Matrix, Real};
use crate::router::{NullVariant, RoutingConfig};

fn default_true() -> bool {
    true
}

fn default_router_std() -> Real {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub k_max: usize,
    pub rho: Real,
    #[serde(default)]
    pub null_variant: NullVariant,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    #[serde(default = "default_true")]
    pub use_shared_expert: bool,
    /// Overrides the null-copy count derived from `rho`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_copies: Option<usize>,
    #[serde(default = "default_router_std")]
    pub router_init_std: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_experts: 16,
            k_max: 4,
            rho: 0.5,
            null_variant: NullVariant::Zero,
            d_model: 32,
            d_hidden: 64,
            n_layers: 2,
            use_shared_expert: true,
            null_copies: None,
            router_init_std: default_router_std(),
        }
    }
}

impl ModelConfig {
    pub fn routing(&self) -> Result<RoutingConfig> {
        let mut r = RoutingConfig::new(self.n_experts, self.k_max, self.rho, self.null_variant)?
            .with_shared_expert(self.use_shared_expert);
        if let Some(m) = self.null_copies {
            r = r.with_null_copies(m);
        }
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.routing()?;
        if self.d_model < 2 || self.d_hidden == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "model: d_model >= 2, d_hidden >= 1 and n_layers >= 1 required".into(),
            ));
        }
        if !(self.router_init_std >= 0.0) {
            return Err(Error::Config("model: router_init_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub routing: RoutingConfig,
    pub layers: Vec<MoeLayer>,
}

/// Forward activations of every layer.
#[derive(Debug, Clone)]
pub struct ModelForward {
    pub out: Matrix,
    pub states: Vec<LayerState>,
}

/// Loss terms of one step; `bal` and `z` are layer means.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub task: Real,
    pub bal: Real,
    pub z: Real,
    pub total: Real,
    pub stats: Vec<RoutingStats>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|_| MoeLayer::random(cfg.n_experts, cfg.d_model, cfg.d_hidden, cfg.router_init_std, rng))
            .collect();
        Ok(Self {
            routing: cfg.routing()?,
            layers,
        })
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].d_model()
    }

    pub fn d_hidden(&self) -> usize {
        self.layers[0].bank.d_hidden()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MoeLayer::param_count).sum()
    }

    /// Every parameter matrix, layer by layer in each layer's declared order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(MoeLayer::matrices).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(MoeLayer::matrices_mut).collect()
    }

    /// `h_{l+1} = h_l + layer_l(h_l)` with the given routing configuration
    /// (which may differ from `self.routing` in its null-copy count).
    pub fn forward(&self, x: &Matrix, routing: &RoutingConfig) -> Result<ModelForward> {
        let mut h = x.clone();
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, st) = layer.forward(&h, routing)?;
            h.add_assign(&y)?;
            states.push(st);
        }
        Ok(ModelForward { out: h, states })
    }

    /// Losses and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        targets: &Matrix,
        routing: &RoutingConfig,
        weights: &LossWeights,
    ) -> Result<(StepLosses, Vec<LayerGrads>, ModelForward)> {
        let fwd = self.forward(x, routing)?;
        if targets.shape() != fwd.out.shape() {
            return Err(Error::shape("loss", "targets must match the model output"));
        }
        let (task, mut dh) = mse(&fwd.out, targets);
        let n_layers = self.layers.len() as Real;
        let mut stats = Vec::with_capacity(self.layers.len());
        let (mut bal, mut z) = (0.0, 0.0);
        for st in &fwd.states {
            let s = RoutingStats::from_routing(&st.routing);
            bal += load_balance_loss(&s) / n_layers;
            z += z_loss(&st.routing.expanded_logits)? / n_layers;
            stats.push(s);
        }
        let mut grads = vec![None; self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let st = &fwd.states[l];
            let aux = aux_logit_grad(&st.routing, &stats[l], weights.balance / n_layers, weights.z / n_layers)?;
            let (dx, g) = layer.backward(st, &dh, Some(&aux))?;
            dh.add_assign(&dx)?;
            grads[l] = Some(g);
        }
        let grads = grads.into_iter().map(|g| g.expect("every layer visited")).collect();
        let losses = StepLosses {
            task,
            bal,
            z,
            total: total_loss(task, bal, z, weights),
            stats,
        };
        Ok((losses, grads, fwd))
    }
}

/// Mean squared error over all entries, with its gradient.
pub fn mse(pred: &Matrix, target: &Matrix) -> (Real, Matrix) {
    let n = pred.len().max(1) as Real;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let diff = *g - t;
        loss += diff * diff;
        *g = 2.0 * diff / n;
    }
    (loss / n, grad)
}
