//! Training harness: a recorded (autodiff) forward pass, the auxiliary
//! load-balance loss, plain-SGD training on the synthetic task, and held-out
//! evaluation.
//!
//! Selection is treated as a constant mask in the backward pass — the argtop
//! operator is non-differentiable — so gradients reach the router only
//! through the softmax scores of *selected* entries (and through the mean
//! scores inside the auxiliary loss). Switching the routing strategy changes
//! nothing else about the loop.
//!
//! Everything is deterministic in the config seed: fixed initialization,
//! fixed task stream, fixed summation order, single thread.

use serde::{Deserialize, Serialize};

use crate::analytics::normalized_entropy;
use crate::error::{Error, Result};
use crate::layer::mask_for;
use crate::model::ToyLm;
use crate::online::online_mask;
use crate::routing::{batchtopk_route, BudgetConfig, RoutingMask, RoutingStrategy, ScoreMatrix};
use crate::tape::{Tape, Var};
use crate::task::{Difficulty, SequenceSample, SyntheticTask};

/// Default coefficient for the auxiliary load-balance loss.
pub const DEFAULT_AUX_LOSS_COEFFICIENT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub aux_loss_coefficient: f64,
    pub strategy: RoutingStrategy,
    pub budget: BudgetConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !self.aux_loss_coefficient.is_finite() || self.aux_loss_coefficient < 0.0 {
            return Err(Error::InvalidInput(
                "aux_loss_coefficient must be >= 0".into(),
            ));
        }
        self.budget.validate(n_experts)
    }
}

/// One row of the training trace (the metrics CSV).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub mean_experts_per_token: f64,
    pub entropy_normalized: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyLm,
    pub trace: Vec<MetricsRow>,
}

// ---------------------------------------------------------------------------
// Auxiliary load-balance loss
// ---------------------------------------------------------------------------

/// Switch-style balance penalty: N * sum_i f_i * P_i, where f_i is the
/// fraction of selected entries landing on expert i and P_i is expert i's
/// mean score over the sequence. Equals 1.0 exactly when both are uniform
/// and N when all traffic and all probability mass hit one expert.
pub fn load_balance_loss(mask: &RoutingMask, scores: &ScoreMatrix) -> f64 {
    let n = scores.n_experts();
    let t = scores.n_tokens();
    let total = mask.total_selected();
    let mut acc = 0.0;
    for i in 0..n {
        let f_i = if total == 0 {
            1.0 / n as f64
        } else {
            let count: usize = (0..t).filter(|&tok| mask.is_selected(tok, i)).count();
            count as f64 / total as f64
        };
        let mut col_sum = 0.0;
        for tok in 0..t {
            col_sum += scores.get(tok, i);
        }
        acc += f_i * (col_sum / t as f64);
    }
    n as f64 * acc
}

// ---------------------------------------------------------------------------
// Recorded forward
// ---------------------------------------------------------------------------

struct TapedExpert {
    w1: Vec<Var>,
    b1: Vec<Var>,
    w2: Vec<Var>,
    b2: Vec<Var>,
}

struct TapedLayer {
    router: Vec<Var>, // n_experts * d_model, row-major
    experts: Vec<TapedExpert>,
}

struct TapedModel {
    layers: Vec<TapedLayer>,
    head_w: Vec<Var>, // vocab * d_model, row-major
    head_b: Vec<Var>,
}

/// Pushes every parameter as a leaf, in exactly the order of
/// [`ToyLm::to_flat`], so adjoints of the first `param_count` tape nodes are
/// the flat gradient.
fn record_params(tape: &mut Tape, model: &ToyLm) -> TapedModel {
    let mut leaf_slice = |data: &[f64]| -> Vec<Var> { data.iter().map(|&v| tape.leaf(v)).collect() };
    let layers = model
        .layers
        .iter()
        .map(|layer| TapedLayer {
            router: leaf_slice(layer.router.data()),
            experts: layer
                .experts
                .iter()
                .map(|e| TapedExpert {
                    w1: leaf_slice(e.w1.data()),
                    b1: leaf_slice(&e.b1),
                    w2: leaf_slice(e.w2.data()),
                    b2: leaf_slice(&e.b2),
                })
                .collect(),
        })
        .collect();
    let head_w = leaf_slice(model.head_w.data());
    let head_b = leaf_slice(&model.head_b);
    TapedModel {
        layers,
        head_w,
        head_b,
    }
}

/// Aggregate statistics of one recorded batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub mean_experts_per_token: f64,
    pub entropy_normalized: f64,
    /// Per sequence, per token: selected-expert count averaged over layers.
    pub per_token_counts: Vec<Vec<f64>>,
    pub difficulties: Vec<Vec<Difficulty>>,
}

fn routed_masks(
    batch_scores: &[ScoreMatrix],
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
) -> Result<Vec<RoutingMask>> {
    match strategy {
        RoutingStrategy::BatchTopK => batchtopk_route(batch_scores, budget.k_tok),
        RoutingStrategy::OnlineSeqTopK => batch_scores
            .iter()
            .map(|s| online_mask(s, budget))
            .collect(),
        _ => batch_scores
            .iter()
            .map(|s| mask_for(s, strategy, budget))
            .collect(),
    }
}

/// Records the full objective of one batch on the tape and returns the loss
/// variable plus value-level statistics. Layers are processed across the
/// whole batch so that batch-level routing sees every sequence.
fn record_batch_objective(
    tape: &mut Tape,
    tm: &TapedModel,
    model: &ToyLm,
    samples: &[SequenceSample],
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
    aux_coeff: f64,
) -> Result<(Var, BatchStats)> {
    let dims = &model.dims;
    let d = dims.d_model;
    let n = dims.n_experts;
    let n_layers = dims.n_layers;
    let b_size = samples.len();

    for s in samples {
        if s.inputs.n_cols() != d {
            return Err(Error::InvalidInput(
                "sample feature width does not match d_model".into(),
            ));
        }
        if s.targets.iter().any(|&y| y >= dims.vocab) {
            return Err(Error::InvalidInput("target outside vocabulary".into()));
        }
    }

    // Hidden states per sequence, as tape variables.
    let mut hidden: Vec<Vec<Vec<Var>>> = samples
        .iter()
        .map(|s| {
            (0..s.inputs.n_rows())
                .map(|t| s.inputs.row(t).iter().map(|&v| tape.constant(v)).collect())
                .collect()
        })
        .collect();

    let mut aux_terms: Vec<Var> = Vec::new();
    let mut selected_total = 0usize;
    let mut token_total = 0usize;
    let mut pooled_rows: Vec<Vec<f64>> = Vec::new();
    let mut per_token_counts: Vec<Vec<f64>> =
        samples.iter().map(|s| vec![0.0; s.inputs.n_rows()]).collect();

    for layer_idx in 0..n_layers {
        let tl = &tm.layers[layer_idx];

        // Router scores for every sequence at this depth.
        let mut score_vars: Vec<Vec<Vec<Var>>> = Vec::with_capacity(b_size);
        let mut score_vals: Vec<ScoreMatrix> = Vec::with_capacity(b_size);
        for seq in hidden.iter() {
            let mut rows_vars = Vec::with_capacity(seq.len());
            let mut rows_vals = Vec::with_capacity(seq.len());
            for x in seq.iter() {
                let logits: Vec<Var> = (0..n)
                    .map(|i| tape.dot(&tl.router[i * d..(i + 1) * d], x))
                    .collect();
                let probs = tape.softmax(&logits);
                rows_vals.push(probs.iter().map(|&p| tape.value(p)).collect::<Vec<f64>>());
                rows_vars.push(probs);
            }
            score_vals.push(ScoreMatrix::from_rows(&rows_vals)?);
            score_vars.push(rows_vars);
        }

        let masks = routed_masks(&score_vals, strategy, budget)?;

        for (b, mask) in masks.iter().enumerate() {
            let t_tokens = hidden[b].len();
            for t in 0..t_tokens {
                per_token_counts[b][t] += mask.counts()[t] as f64 / n_layers as f64;
            }
            selected_total += mask.total_selected();
            token_total += t_tokens;
            pooled_rows.extend((0..t_tokens).map(|t| score_vals[b].row(t).to_vec()));

            // Auxiliary balance term of this (sequence, layer): constant
            // selection fractions against differentiable mean scores.
            let total_sel = mask.total_selected();
            let mut acc: Option<Var> = None;
            for i in 0..n {
                let f_i = if total_sel == 0 {
                    1.0 / n as f64
                } else {
                    let count: usize = (0..t_tokens).filter(|&t| mask.is_selected(t, i)).count();
                    count as f64 / total_sel as f64
                };
                let col: Vec<Var> = (0..t_tokens).map(|t| score_vars[b][t][i]).collect();
                let col_sum = tape.sum(&col);
                let mean = tape.mul_const(col_sum, 1.0 / t_tokens as f64);
                let term = tape.mul_const(mean, f_i);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
            let balance = tape.mul_const(acc.expect("n >= 1"), n as f64);
            aux_terms.push(balance);

            // Expert combination with the mask held constant; gates are the
            // raw score variables of the selected entries.
            for t in 0..t_tokens {
                let x: Vec<Var> = hidden[b][t].clone();
                let mut h = x.clone();
                for i in mask.selected_experts(t) {
                    let e = &tl.experts[i];
                    let f_dim = model.dims.d_hidden;
                    let mut act = Vec::with_capacity(f_dim);
                    for fi in 0..f_dim {
                        let z = tape.dot(&e.w1[fi * d..(fi + 1) * d], &x);
                        let z = tape.add(z, e.b1[fi]);
                        act.push(tape.silu(z));
                    }
                    let gate = score_vars[b][t][i];
                    for dd in 0..d {
                        let z = tape.dot(&e.w2[dd * f_dim..(dd + 1) * f_dim], &act);
                        let z = tape.add(z, e.b2[dd]);
                        let contrib = tape.mul(gate, z);
                        h[dd] = tape.add(h[dd], contrib);
                    }
                }
                hidden[b][t] = h;
            }
        }
    }

    // Head + cross-entropy per sequence, averaged over tokens then batch.
    let mut seq_losses = Vec::with_capacity(b_size);
    for (b, sample) in samples.iter().enumerate() {
        let t_tokens = hidden[b].len();
        let mut token_losses = Vec::with_capacity(t_tokens);
        for t in 0..t_tokens {
            let logits: Vec<Var> = (0..dims.vocab)
                .map(|v| {
                    let z = tape.dot(&tm.head_w[v * d..(v + 1) * d], &hidden[b][t]);
                    tape.add(z, tm.head_b[v])
                })
                .collect();
            let probs = tape.softmax(&logits);
            let p_target = probs[sample.targets[t]];
            let lp = tape.ln(p_target);
            token_losses.push(tape.neg(lp));
        }
        let total = tape.sum(&token_losses);
        seq_losses.push(tape.mul_const(total, 1.0 / t_tokens as f64));
    }
    let task_sum = tape.sum(&seq_losses);
    let task_loss = tape.mul_const(task_sum, 1.0 / b_size as f64);

    let aux_sum = tape.sum(&aux_terms);
    let aux_loss = tape.mul_const(aux_sum, 1.0 / aux_terms.len() as f64);

    let weighted_aux = tape.mul_const(aux_loss, aux_coeff);
    let total_loss = tape.add(task_loss, weighted_aux);

    let stats = BatchStats {
        task_loss: tape.value(task_loss),
        aux_loss: tape.value(aux_loss),
        total_loss: tape.value(total_loss),
        mean_experts_per_token: selected_total as f64 / token_total as f64,
        entropy_normalized: normalized_entropy(&mean_assignment(&pooled_rows, n)),
        per_token_counts,
        difficulties: samples.iter().map(|s| s.difficulty.clone()).collect(),
    };
    Ok((total_loss, stats))
}

fn mean_assignment(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n];
    for row in rows {
        for (acc, &v) in p.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for acc in p.iter_mut() {
        *acc /= rows.len() as f64;
    }
    p
}

/// Loss and flat gradient of one batch. The gradient order matches
/// [`ToyLm::to_flat`].
pub fn batch_gradient(
    model: &ToyLm,
    samples: &[SequenceSample],
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
    aux_coeff: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let tm = record_params(&mut tape, model);
    let n_params = model.param_count();
    let (loss, _) = record_batch_objective(&mut tape, &tm, model, samples, strategy, budget, aux_coeff)?;
    let loss_value = tape.value(loss);
    if !loss_value.is_finite() {
        return Err(Error::TrainingDiverged {
            step: 0,
            reason: format!("non-finite loss {}", loss_value),
        });
    }
    let adj = tape.backward(loss);
    Ok((loss_value, adj[..n_params].to_vec()))
}

/// Batch objective value without a backward pass (used by finite differences
/// and evaluation).
pub fn batch_loss(
    model: &ToyLm,
    samples: &[SequenceSample],
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
    aux_coeff: f64,
) -> Result<(f64, BatchStats)> {
    let mut tape = Tape::new();
    let tm = record_params(&mut tape, model);
    let (loss, stats) =
        record_batch_objective(&mut tape, &tm, model, samples, strategy, budget, aux_coeff)?;
    Ok((tape.value(loss), stats))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Plain-SGD training. Step s consumes task sequences s*B .. s*B+B-1, so two
/// runs with the same seed and config see bit-identical data and produce
/// bit-identical traces and parameters. `steps = 0` returns the model
/// untouched with an empty trace.
pub fn train(model: ToyLm, task: &SyntheticTask, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate(model.dims.n_experts)?;
    if task.n_features != model.dims.d_model || task.vocab != model.dims.vocab {
        return Err(Error::InvalidInput(
            "task feature/vocab spec does not match model dims".into(),
        ));
    }

    let mut current = model;
    let mut flat = current.to_flat();
    let n_params = flat.len();
    let mut tape = Tape::with_capacity(1 << 16);
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let samples: Vec<SequenceSample> = (0..config.batch_size)
            .map(|j| task.sample(step as u64 * config.batch_size as u64 + j as u64))
            .collect();

        tape.clear();
        let tm = record_params(&mut tape, &current);
        let (loss, stats) = record_batch_objective(
            &mut tape,
            &tm,
            &current,
            &samples,
            config.strategy,
            &config.budget,
            config.aux_loss_coefficient,
        )?;
        let loss_value = tape.value(loss);
        if !loss_value.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                reason: format!("non-finite loss {}", loss_value),
            });
        }

        trace.push(MetricsRow {
            step,
            task_loss: stats.task_loss,
            aux_loss: stats.aux_loss,
            total_loss: stats.total_loss,
            mean_experts_per_token: stats.mean_experts_per_token,
            entropy_normalized: stats.entropy_normalized,
        });

        let adj = tape.backward(loss);
        for (p, g) in flat.iter_mut().zip(&adj[..n_params]) {
            *p -= config.learning_rate * g;
        }
        current.from_flat(&flat)?;
        if !current.all_finite() {
            return Err(Error::TrainingDiverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
    }

    Ok(TrainOutcome {
        model: current,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Held-out evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task_loss: f64,
    pub aux_loss: f64,
    pub mean_experts_per_token: f64,
    pub mean_experts_easy: f64,
    pub mean_experts_hard: f64,
}

/// Evaluation sequences start at this index so they never collide with any
/// realistic training stream.
pub const EVAL_SEQUENCE_OFFSET: u64 = 1 << 32;

/// Evaluates the model on `n_sequences` held-out task sequences, routed with
/// the given strategy in chunks of `batch_size` (chunking only matters for
/// batch-level routing).
pub fn evaluate(
    model: &ToyLm,
    task: &SyntheticTask,
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
    aux_coeff: f64,
    n_sequences: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    if n_sequences == 0 || batch_size == 0 {
        return Err(Error::InvalidInput("evaluation needs sequences".into()));
    }
    let mut task_sum = 0.0;
    let mut aux_sum = 0.0;
    let mut chunks = 0usize;
    let mut sel_sum = 0.0;
    let mut tok_count = 0usize;
    let mut easy_sum = 0.0;
    let mut easy_count = 0usize;
    let mut hard_sum = 0.0;
    let mut hard_count = 0usize;

    let mut start = 0usize;
    while start < n_sequences {
        let end = (start + batch_size).min(n_sequences);
        let samples: Vec<SequenceSample> = (start..end)
            .map(|i| task.sample(EVAL_SEQUENCE_OFFSET + i as u64))
            .collect();
        let (_, stats) = batch_loss(model, &samples, strategy, budget, aux_coeff)?;
        task_sum += stats.task_loss;
        aux_sum += stats.aux_loss;
        chunks += 1;
        for (counts, labels) in stats.per_token_counts.iter().zip(&stats.difficulties) {
            for (&c, &label) in counts.iter().zip(labels) {
                sel_sum += c;
                tok_count += 1;
                match label {
                    Difficulty::Easy => {
                        easy_sum += c;
                        easy_count += 1;
                    }
                    Difficulty::Hard => {
                        hard_sum += c;
                        hard_count += 1;
                    }
                }
            }
        }
        start = end;
    }

    Ok(EvalReport {
        task_loss: task_sum / chunks as f64,
        aux_loss: aux_sum / chunks as f64,
        mean_experts_per_token: sel_sum / tok_count as f64,
        mean_experts_easy: if easy_count > 0 {
            easy_sum / easy_count as f64
        } else {
            0.0
        },
        mean_experts_hard: if hard_count > 0 {
            hard_sum / hard_count as f64
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::GateMode;
    use crate::model::{lm_forward, ModelDims};

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            d_hidden: 10,
            n_experts: 4,
            n_layers: 1,
            vocab: 6,
        }
    }

    fn small_task() -> SyntheticTask {
        SyntheticTask::new(11, 6, 8, 6).unwrap()
    }

    fn config(strategy: RoutingStrategy) -> TrainConfig {
        TrainConfig {
            steps: 3,
            learning_rate: 0.05,
            batch_size: 2,
            aux_loss_coefficient: DEFAULT_AUX_LOSS_COEFFICIENT,
            strategy,
            budget: BudgetConfig::new(2, 4).unwrap(),
            seed: 7,
        }
    }

    // --- load_balance_loss ---

    #[test]
    fn balance_loss_uniform_is_one() {
        // f_i = P_i = 1/N plugged into N * sum f P gives exactly 1. With
        // uniform scores P is uniform, so any selection pattern scores 1.
        let s = ScoreMatrix::uniform(4, 4);
        let pairs: Vec<(usize, usize)> = (0..4).map(|t| (t, t)).collect();
        let mask_uniform = RoutingMask::from_selected(&s, &pairs);
        assert_eq!(load_balance_loss(&mask_uniform, &s), 1.0);
        let mask_topk = crate::routing::topk_route(&s, 1).unwrap();
        assert_eq!(load_balance_loss(&mask_topk, &s), 1.0);
        // Skewed scores with matching concentrated selection exceed 1.
        let skewed =
            ScoreMatrix::from_rows(&[vec![0.7, 0.1, 0.1, 0.1], vec![0.7, 0.1, 0.1, 0.1]]).unwrap();
        let mask = crate::routing::topk_route(&skewed, 1).unwrap();
        assert!(load_balance_loss(&mask, &skewed) > 1.0);
    }

    #[test]
    fn balance_loss_one_hot_is_n() {
        let s = ScoreMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let mask = RoutingMask::from_selected(&s, &[(0, 0), (1, 0)]);
        assert_eq!(load_balance_loss(&mask, &s), 3.0);
    }

    #[test]
    fn balance_loss_single_expert_is_one() {
        let s = ScoreMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let mask = RoutingMask::from_selected(&s, &[(0, 0), (1, 0)]);
        assert_eq!(load_balance_loss(&mask, &s), 1.0);
    }

    // --- recorded path consistency ---

    #[test]
    fn recorded_scores_match_value_path() {
        // The recorded router scores and masks must agree bit-for-bit with
        // the value-path forward, so analysis of a trained checkpoint sees
        // exactly the routing that training saw.
        let model = ToyLm::init(dims(), 5).unwrap();
        let task = small_task();
        let sample = task.sample(0);
        let budget = BudgetConfig::new(2, 4).unwrap();

        let (_, stats) = batch_loss(
            &model,
            std::slice::from_ref(&sample),
            RoutingStrategy::SeqTopKBounded,
            &budget,
            0.01,
        )
        .unwrap();
        let fwd = lm_forward(
            &model,
            &sample.inputs,
            RoutingStrategy::SeqTopKBounded,
            &budget,
            GateMode::Raw,
        )
        .unwrap();
        for t in 0..6 {
            assert_eq!(
                stats.per_token_counts[0][t],
                fwd.masks[0].counts()[t] as f64
            );
        }
    }

    #[test]
    fn zero_loss_target_has_zero_gradient_structure() {
        // A model whose output already matches a one-hot target exactly is a
        // stationary point of the cross-entropy; verify gradients vanish in
        // the limit by checking a perfectly confident toy construction is
        // finite and small. (The exact-zero case needs probability 1, which
        // softmax only reaches asymptotically; the dense single-expert case
        // below is the exact check.)
        let model = ToyLm::init(dims(), 5).unwrap();
        let task = small_task();
        let samples = vec![task.sample(0)];
        let budget = BudgetConfig::new(2, 4).unwrap();
        let (loss, grad) =
            batch_gradient(&model, &samples, RoutingStrategy::TopK, &budget, 0.0).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grad.len(), model.param_count());
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn single_expert_gradient_matches_dense_ffn() {
        // N = 1, k = 1: routing has no freedom, the gate is the constant 1
        // (softmax over one expert), so the gradient equals that of the
        // dense residual FFN with the same parameters.
        let d = ModelDims {
            d_model: 6,
            d_hidden: 8,
            n_experts: 1,
            n_layers: 1,
            vocab: 5,
        };
        let model = ToyLm::init(d, 9).unwrap();
        let task = SyntheticTask::new(2, 4, 6, 5).unwrap();
        let samples = vec![task.sample(0)];
        let budget = BudgetConfig::with_bounds(1, 1, 1, 1).unwrap();
        let (_, grad) =
            batch_gradient(&model, &samples, RoutingStrategy::TopK, &budget, 0.0).unwrap();
        // Finite-difference spot check on a handful of coordinates.
        let flat = model.to_flat();
        let h = 1e-5;
        for &idx in &[0usize, 7, 40, flat.len() - 3, flat.len() - 1] {
            let mut plus = model.clone();
            let mut f = flat.clone();
            f[idx] += h;
            plus.from_flat(&f).unwrap();
            let (lp, _) =
                batch_loss(&plus, &samples, RoutingStrategy::TopK, &budget, 0.0).unwrap();
            let mut minus = model.clone();
            let mut f = flat.clone();
            f[idx] -= h;
            minus.from_flat(&f).unwrap();
            let (lm, _) =
                batch_loss(&minus, &samples, RoutingStrategy::TopK, &budget, 0.0).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-6) < 1e-4,
                "coord {}: analytic {} vs fd {}",
                idx,
                grad[idx],
                fd
            );
        }
    }

    // --- train ---

    #[test]
    fn zero_steps_returns_initialization() {
        let model = ToyLm::init(dims(), 5).unwrap();
        let snapshot = model.clone();
        let task = small_task();
        let mut cfg = config(RoutingStrategy::TopK);
        cfg.steps = 0;
        let out = train(model, &task, &cfg).unwrap();
        assert_eq!(out.model, snapshot);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let task = small_task();
        let cfg = config(RoutingStrategy::SeqTopKBounded);
        let a = train(ToyLm::init(dims(), cfg.seed).unwrap(), &task, &cfg).unwrap();
        let b = train(ToyLm::init(dims(), cfg.seed).unwrap(), &task, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn every_strategy_trains_without_other_changes() {
        let task = small_task();
        for strategy in RoutingStrategy::ALL {
            let cfg = config(strategy);
            let out = train(ToyLm::init(dims(), cfg.seed).unwrap(), &task, &cfg).unwrap();
            assert_eq!(out.trace.len(), 3, "{:?}", strategy);
            assert!(out.trace.iter().all(|r| r.total_loss.is_finite()));
        }
    }

    #[test]
    fn budget_during_training_is_conserved() {
        let task = small_task();
        let cfg = config(RoutingStrategy::SeqTopKBounded);
        let out = train(ToyLm::init(dims(), cfg.seed).unwrap(), &task, &cfg).unwrap();
        for row in &out.trace {
            assert!((row.mean_experts_per_token - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_reports_per_difficulty_counts() {
        let task = small_task();
        let model = ToyLm::init(dims(), 5).unwrap();
        let budget = BudgetConfig::new(2, 4).unwrap();
        let report = evaluate(
            &model,
            &task,
            RoutingStrategy::SeqTopKBounded,
            &budget,
            0.01,
            8,
            4,
        )
        .unwrap();
        assert!((report.mean_experts_per_token - 2.0).abs() < 1e-12);
        assert!(report.mean_experts_easy > 0.0);
        assert!(report.mean_experts_hard > 0.0);
    }
}
