//! A toy MoE feed-forward layer.
//!
//! Router projection, N small expert FFNs (two layers, silu in between), and
//! the sparse combination h_t = sum_i gate[t][i] * E_i(x_t) + x_t. Experts are
//! only evaluated for selected (token, expert) pairs; the invocation count is
//! reported as a compute proxy and always equals the routing budget.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::online::{online_mask, ExpertCache, OnlineStepResult};
use crate::routing::{
    route_offline, softmax_scores, BudgetConfig, RoutingMask, RoutingStrategy, ScoreMatrix,
};

/// How gate weights are applied when combining expert outputs. The default
/// uses the raw softmax scores of the selected experts; renormalizing them to
/// sum to one per token is available but off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GateMode {
    #[default]
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "renormalized")]
    Renormalized,
}

/// One expert: a two-layer FFN d_model -> d_hidden -> d_model with silu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertFfn {
    pub w1: Mat, // d_hidden x d_model
    pub b1: Vec<f64>,
    pub w2: Mat, // d_model x d_hidden
    pub b2: Vec<f64>,
}

impl ExpertFfn {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = self.w1.matvec(x);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h += b;
            *h = silu(*h);
        }
        let mut out = self.w2.matvec(&hidden);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        out
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Router weights plus the expert parameter sets of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayerParams {
    pub d_model: usize,
    pub d_hidden: usize,
    pub router: Mat, // n_experts x d_model
    pub experts: Vec<ExpertFfn>,
}

impl MoeLayerParams {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Deterministic initialization: Gaussian entries scaled by 1/sqrt(fan_in),
    /// drawn from the supplied generator in field order (router, then each
    /// expert's w1, b1, w2, b2).
    pub fn init(d_model: usize, d_hidden: usize, n_experts: usize, rng: &mut ChaCha8Rng) -> Self {
        let router = random_mat(n_experts, d_model, 1.0 / (d_model as f64).sqrt(), rng);
        let experts = (0..n_experts)
            .map(|_| ExpertFfn {
                w1: random_mat(d_hidden, d_model, 1.0 / (d_model as f64).sqrt(), rng),
                b1: vec![0.0; d_hidden],
                w2: random_mat(d_model, d_hidden, 1.0 / (d_hidden as f64).sqrt(), rng),
                b2: vec![0.0; d_model],
            })
            .collect();
        MoeLayerParams {
            d_model,
            d_hidden,
            router,
            experts,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.router.all_finite()
            && self.experts.iter().all(|e| {
                e.w1.all_finite()
                    && e.w2.all_finite()
                    && e.b1.iter().all(|v| v.is_finite())
                    && e.b2.iter().all(|v| v.is_finite())
            })
    }

    /// Softmax router scores for a whole sequence of inputs (rows of `inputs`).
    pub fn router_scores(&self, inputs: &Mat) -> Result<ScoreMatrix> {
        if inputs.n_cols() != self.d_model {
            return Err(Error::InvalidInput(format!(
                "input width {} does not match d_model {}",
                inputs.n_cols(),
                self.d_model
            )));
        }
        let mut logits = Mat::zeros(inputs.n_rows(), self.n_experts());
        for t in 0..inputs.n_rows() {
            let row = self.router.matvec(inputs.row(t));
            logits.row_mut(t).copy_from_slice(&row);
        }
        softmax_scores(&logits)
    }
}

fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * scale;
    }
    m
}

/// Output of a full-sequence layer forward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub hidden: Mat,
    pub mask: RoutingMask,
    /// Number of expert-forward invocations; equals the mask total.
    pub flop_estimate: usize,
}

/// Routes scores through any strategy, including the causal online variant.
pub fn mask_for(
    scores: &ScoreMatrix,
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
) -> Result<RoutingMask> {
    match strategy {
        RoutingStrategy::OnlineSeqTopK => online_mask(scores, budget),
        _ => route_offline(scores, strategy, budget),
    }
}

/// Per-token gate weights for one row of a mask under the given mode.
pub fn gate_values(mask: &RoutingMask, t: usize, mode: GateMode) -> Vec<(usize, f64)> {
    let experts = mask.selected_experts(t);
    match mode {
        GateMode::Raw => experts.iter().map(|&i| (i, mask.gate(t, i))).collect(),
        GateMode::Renormalized => {
            let sum: f64 = experts.iter().map(|&i| mask.gate(t, i)).sum();
            if sum > 0.0 {
                experts.iter().map(|&i| (i, mask.gate(t, i) / sum)).collect()
            } else {
                experts.iter().map(|&i| (i, mask.gate(t, i))).collect()
            }
        }
    }
}

/// Full-sequence MoE forward under the chosen routing strategy.
///
/// Only selected experts are evaluated. A token with zero selected experts
/// (possible under unbounded sequence routing) passes through on the residual
/// path unchanged.
pub fn moe_forward(
    params: &MoeLayerParams,
    inputs: &Mat,
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
    gate_mode: GateMode,
) -> Result<LayerOutput> {
    let scores = params.router_scores(inputs)?;
    let mask = mask_for(&scores, strategy, budget)?;
    let mut hidden = Mat::zeros(inputs.n_rows(), params.d_model);
    let mut invocations = 0usize;
    for t in 0..inputs.n_rows() {
        let x = inputs.row(t);
        let mut h: Vec<f64> = x.to_vec();
        for (i, gate) in gate_values(&mask, t, gate_mode) {
            let out = params.experts[i].forward(x);
            for (hv, ov) in h.iter_mut().zip(&out) {
                *hv += gate * ov;
            }
            invocations += 1;
        }
        hidden.row_mut(t).copy_from_slice(&h);
    }
    debug_assert_eq!(invocations, mask.total_selected());
    Ok(LayerOutput {
        hidden,
        mask,
        flop_estimate: invocations,
    })
}

/// Decoding session state for one sequence: the expert cache of a single
/// layer. Single writer; move it between threads only between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSession {
    cache: ExpertCache,
}

impl OnlineSession {
    pub fn new(n_experts: usize) -> Result<Self> {
        Ok(OnlineSession {
            cache: ExpertCache::new(n_experts)?,
        })
    }

    pub fn cache(&self) -> &ExpertCache {
        &self.cache
    }
}

/// One decoding step: scores the new input, routes it against the cached
/// history, and combines the activated experts exactly as `moe_forward` does
/// for a single token.
pub fn moe_forward_online(
    params: &MoeLayerParams,
    session: &mut OnlineSession,
    input: &[f64],
    budget: &BudgetConfig,
) -> Result<(OnlineStepResult, Vec<f64>)> {
    if input.len() != params.d_model {
        return Err(Error::InvalidInput(format!(
            "input width {} does not match d_model {}",
            input.len(),
            params.d_model
        )));
    }
    if session.cache.n_experts() != params.n_experts() {
        return Err(Error::InvalidInput(
            "session expert count does not match layer".into(),
        ));
    }
    let logits = params.router.matvec(input);
    let mut row = vec![0.0; params.n_experts()];
    crate::routing::softmax_row_into(&logits, &mut row);
    let step = session.cache.route_step(&row, budget)?;

    let mut h: Vec<f64> = input.to_vec();
    for (&i, &gate) in step.selected_experts.iter().zip(&step.gate_weights) {
        let out = params.experts[i].forward(input);
        for (hv, ov) in h.iter_mut().zip(&out) {
            *hv += gate * ov;
        }
    }
    Ok((step, h))
}
