//! Stacked toy language model: L MoE layers plus a linear head over a small
//! vocabulary.
//!
//! Inputs are already feature vectors (rows of a T x D matrix), so there is
//! no embedding or attention; each layer applies its routed expert FFNs with
//! a residual connection and the head produces a softmax distribution over
//! the vocabulary per token. Small by design — wide enough to exercise every
//! routing strategy and the gradient machinery, nothing more.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{gate_values, mask_for, GateMode, MoeLayerParams};
use crate::mat::Mat;
use crate::routing::{softmax_row_into, BudgetConfig, RoutingMask, RoutingStrategy, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_experts: usize,
    pub n_layers: usize,
    pub vocab: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.d_hidden == 0
            || self.n_experts == 0
            || self.n_layers == 0
            || self.vocab == 0
        {
            return Err(Error::InvalidInput("model dims must all be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLm {
    pub dims: ModelDims,
    pub layers: Vec<MoeLayerParams>,
    pub head_w: Mat, // vocab x d_model
    pub head_b: Vec<f64>,
}

impl ToyLm {
    /// Deterministic initialization from a 64-bit seed: one ChaCha8 stream,
    /// consumed in layer order then head order.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..dims.n_layers)
            .map(|_| MoeLayerParams::init(dims.d_model, dims.d_hidden, dims.n_experts, &mut rng))
            .collect();
        let mut head_w = Mat::zeros(dims.vocab, dims.d_model);
        let scale = 1.0 / (dims.d_model as f64).sqrt();
        for v in head_w.data_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = g * scale;
        }
        Ok(ToyLm {
            dims,
            layers,
            head_w,
            head_b: vec![0.0; dims.vocab],
        })
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.all_finite())
            && self.head_w.all_finite()
            && self.head_b.iter().all(|v| v.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.to_flat().len()
    }

    /// Flattens every parameter in a fixed order (per layer: router, then
    /// each expert's w1, b1, w2, b2; finally head_w, head_b). The recorded
    /// forward pass and the SGD update both rely on this order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.router.data());
            for e in &layer.experts {
                out.extend_from_slice(e.w1.data());
                out.extend_from_slice(&e.b1);
                out.extend_from_slice(e.w2.data());
                out.extend_from_slice(&e.b2);
            }
        }
        out.extend_from_slice(self.head_w.data());
        out.extend_from_slice(&self.head_b);
        out
    }

    pub fn from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut pos = 0usize;
        let mut take = |dst: &mut [f64]| -> Result<()> {
            let end = pos + dst.len();
            if end > flat.len() {
                return Err(Error::InvalidInput("flat parameter vector too short".into()));
            }
            dst.copy_from_slice(&flat[pos..end]);
            pos = end;
            Ok(())
        };
        for layer in &mut self.layers {
            take(layer.router.data_mut())?;
            for e in &mut layer.experts {
                take(e.w1.data_mut())?;
                take(&mut e.b1)?;
                take(e.w2.data_mut())?;
                take(&mut e.b2)?;
            }
        }
        take(self.head_w.data_mut())?;
        take(&mut self.head_b)?;
        if pos != flat.len() {
            return Err(Error::InvalidInput(format!(
                "flat parameter vector has {} extra values",
                flat.len() - pos
            )));
        }
        Ok(())
    }
}

/// Value-path forward over a whole sequence.
#[derive(Debug, Clone)]
pub struct LmForward {
    /// T x vocab softmax rows from the head.
    pub prob_rows: Mat,
    /// Final hidden states after the last layer.
    pub hidden: Mat,
    /// One routing mask per layer.
    pub masks: Vec<RoutingMask>,
    /// One score matrix per layer.
    pub scores: Vec<ScoreMatrix>,
}

pub fn lm_forward(
    model: &ToyLm,
    inputs: &Mat,
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
    gate_mode: GateMode,
) -> Result<LmForward> {
    if inputs.n_cols() != model.dims.d_model {
        return Err(Error::InvalidInput(format!(
            "input width {} does not match d_model {}",
            inputs.n_cols(),
            model.dims.d_model
        )));
    }
    let t_tokens = inputs.n_rows();
    let mut hidden = inputs.clone();
    let mut masks = Vec::with_capacity(model.layers.len());
    let mut scores_per_layer = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let scores = layer.router_scores(&hidden)?;
        let mask = mask_for(&scores, strategy, budget)?;
        let mut next = Mat::zeros(t_tokens, model.dims.d_model);
        for t in 0..t_tokens {
            let x = hidden.row(t);
            let mut h: Vec<f64> = x.to_vec();
            for (i, gate) in gate_values(&mask, t, gate_mode) {
                let out = layer.experts[i].forward(x);
                for (hv, ov) in h.iter_mut().zip(&out) {
                    *hv += gate * ov;
                }
            }
            next.row_mut(t).copy_from_slice(&h);
        }
        masks.push(mask);
        scores_per_layer.push(scores);
        hidden = next;
    }

    let mut prob_rows = Mat::zeros(t_tokens, model.dims.vocab);
    for t in 0..t_tokens {
        let mut logits = model.head_w.matvec(hidden.row(t));
        for (l, b) in logits.iter_mut().zip(&model.head_b) {
            *l += b;
        }
        softmax_row_into(&logits, prob_rows.row_mut(t));
    }
    Ok(LmForward {
        prob_rows,
        hidden,
        masks,
        scores: scores_per_layer,
    })
}

/// Shannon entropy (nats) of one probability row, with 0 ln 0 = 0.
pub fn token_entropy(prob_row: &[f64]) -> f64 {
    prob_row
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// One row of the probability-shift table: how much the probability assigned
/// to token t's target moves between budget `k` and the reference budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbShift {
    pub token_index: usize,
    pub k: usize,
    pub shift: f64,
}

/// Probability shift of each target token under per-token TopK at budgets
/// `k_values`, relative to `reference_k`.
pub fn token_logprob_shift(
    model: &ToyLm,
    inputs: &Mat,
    targets: &[usize],
    k_values: &[usize],
    reference_k: usize,
) -> Result<Vec<ProbShift>> {
    if targets.len() != inputs.n_rows() {
        return Err(Error::InvalidInput(
            "targets length does not match sequence length".into(),
        ));
    }
    if targets.iter().any(|&y| y >= model.dims.vocab) {
        return Err(Error::InvalidInput("target token outside vocabulary".into()));
    }
    let n = model.dims.n_experts;
    for &k in k_values.iter().chain(std::iter::once(&reference_k)) {
        if k == 0 || k > n {
            return Err(Error::BudgetInfeasible(format!(
                "k = {} outside [1, {}]",
                k, n
            )));
        }
    }

    let probs_at = |k: usize| -> Result<Vec<f64>> {
        let budget = BudgetConfig::with_bounds(k, 1, n, n)?;
        let fwd = lm_forward(model, inputs, RoutingStrategy::TopK, &budget, GateMode::Raw)?;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(t, &y)| fwd.prob_rows.get(t, y))
            .collect())
    };

    let reference = probs_at(reference_k)?;
    let mut out = Vec::with_capacity(k_values.len() * targets.len());
    for &k in k_values {
        let probs = probs_at(k)?;
        for t in 0..targets.len() {
            out.push(ProbShift {
                token_index: t,
                k,
                shift: probs[t] - reference[t],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            d_hidden: 12,
            n_experts: 4,
            n_layers: 2,
            vocab: 5,
        }
    }

    fn random_inputs(t: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(t, d);
        for v in m.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyLm::init(dims(), 7).unwrap();
        let b = ToyLm::init(dims(), 7).unwrap();
        assert_eq!(a, b);
        let c = ToyLm::init(dims(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_round_trip() {
        let a = ToyLm::init(dims(), 3).unwrap();
        let flat = a.to_flat();
        let mut b = ToyLm::init(dims(), 99).unwrap();
        b.from_flat(&flat).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), flat.len());
    }

    #[test]
    fn forward_rows_are_distributions() {
        let model = ToyLm::init(dims(), 5).unwrap();
        let inputs = random_inputs(6, 8, 6);
        let budget = BudgetConfig::new(2, 4).unwrap();
        let fwd = lm_forward(
            &model,
            &inputs,
            RoutingStrategy::SeqTopKBounded,
            &budget,
            GateMode::Raw,
        )
        .unwrap();
        for t in 0..6 {
            let sum: f64 = fwd.prob_rows.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(fwd.masks.len(), 2);
        for mask in &fwd.masks {
            assert_eq!(mask.total_selected(), 12);
        }
    }

    #[test]
    fn token_entropy_bounds() {
        assert_eq!(token_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let u = token_entropy(&[0.25; 4]);
        assert!((u - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shift_is_zero_at_reference_k() {
        let model = ToyLm::init(dims(), 13).unwrap();
        let inputs = random_inputs(5, 8, 14);
        let targets = vec![0, 1, 2, 3, 4];
        let shifts = token_logprob_shift(&model, &inputs, &targets, &[2], 2).unwrap();
        assert!(shifts.iter().all(|s| s.shift == 0.0));
        let shifts = token_logprob_shift(&model, &inputs, &targets, &[4], 4).unwrap();
        assert!(shifts.iter().all(|s| s.shift == 0.0));
    }

    #[test]
    fn shift_table_covers_all_k() {
        let model = ToyLm::init(dims(), 13).unwrap();
        let inputs = random_inputs(4, 8, 15);
        let targets = vec![0, 1, 2, 3];
        let shifts = token_logprob_shift(&model, &inputs, &targets, &[1, 2, 4], 4).unwrap();
        assert_eq!(shifts.len(), 12);
        assert!(shifts.iter().all(|s| s.shift.is_finite()));
        // k out of range is rejected.
        assert!(token_logprob_shift(&model, &inputs, &targets, &[5], 4).is_err());
    }
}
