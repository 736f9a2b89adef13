//! Routing metrics: normalized entropy, expert-load vectors, experts-per-token
//! histograms, the token-entropy/activation correlation, and the batch-size
//! sensitivity sweep.
//!
//! Entropy uses natural log with 0 ln 0 = 0; normalization by ln(N) makes the
//! base irrelevant. All aggregation is a pure fold over immutable records in
//! a fixed order.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::routing::{
    batchtopk_route, route_offline, BudgetConfig, RoutingMask, RoutingStrategy, ScoreMatrix,
};
use crate::task::Difficulty;

/// Normalized Shannon entropy of a distribution: -sum p ln p / ln(len).
/// Returns 1.0 for the single-outcome distribution (maximum entropy of a
/// one-point space is zero; the ratio is defined as 1, perfectly balanced).
pub fn normalized_entropy(dist: &[f64]) -> f64 {
    if dist.len() <= 1 {
        return 1.0;
    }
    let h: f64 = dist
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    h / (dist.len() as f64).ln()
}

/// Per-layer routing statistics over a corpus of (score row, mask) pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingStats {
    /// Mean assignment probability per expert; sums to one.
    pub per_expert_load: Vec<f64>,
    /// H(per_expert_load) / ln(N), in [0, 1].
    pub normalized_entropy: f64,
    /// histogram[c] = number of tokens with exactly c selected experts.
    pub activation_histogram: Vec<usize>,
    pub layer_index: usize,
}

/// Mean assignment probabilities and normalized entropy of a corpus of score
/// rows, together with the experts-per-token histogram of the matching masks.
pub fn routing_entropy(
    score_rows: &[Vec<f64>],
    masks: &[RoutingMask],
    layer_index: usize,
) -> Result<RoutingStats> {
    if score_rows.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let n = score_rows[0].len();
    if score_rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("ragged score rows".into()));
    }
    let mut load = vec![0.0; n];
    for row in score_rows {
        for (acc, &v) in load.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for acc in load.iter_mut() {
        *acc /= score_rows.len() as f64;
    }

    let mut histogram = vec![0usize; n + 1];
    for mask in masks {
        for &c in mask.counts() {
            histogram[c] += 1;
        }
    }

    Ok(RoutingStats {
        normalized_entropy: normalized_entropy(&load),
        per_expert_load: load,
        activation_histogram: histogram,
        layer_index,
    })
}

/// Experts-per-token histogram over a corpus of masks, keyed by count.
pub fn activation_distribution(masks: &[RoutingMask]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for mask in masks {
        for &c in mask.counts() {
            *hist.entry(c).or_insert(0) += 1;
        }
    }
    hist
}

/// One token's prediction entropy and activation count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenEntropyRecord {
    pub token_index: usize,
    pub entropy: f64,
    pub activated_experts: usize,
    pub difficulty: Option<Difficulty>,
}

/// Mean activation count per entropy decile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyBin {
    pub entropy_low: f64,
    pub entropy_high: f64,
    pub mean_entropy: f64,
    pub mean_activated: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyExpertReport {
    pub correlation: f64,
    pub bins: Vec<EntropyBin>,
}

/// Pearson correlation between token entropy and activation count, plus
/// decile-binned means. Errors when either variable is degenerate.
pub fn token_entropy_vs_experts(records: &[TokenEntropyRecord]) -> Result<EntropyExpertReport> {
    let n = records.len();
    if n < 2 {
        return Err(Error::CorrelationUndefined(
            "need at least two records".into(),
        ));
    }
    let xs: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.activated_experts as f64).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::CorrelationUndefined(
            "all token entropies identical".into(),
        ));
    }
    if syy == 0.0 {
        return Err(Error::CorrelationUndefined(
            "all activation counts identical".into(),
        ));
    }
    let correlation = sxy / (sxx.sqrt() * syy.sqrt());

    // Decile bins over the entropy order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap().then(a.cmp(&b)));
    let n_bins = 10.min(n);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let lo = b * n / n_bins;
        let hi = ((b + 1) * n / n_bins).max(lo + 1);
        let idx = &order[lo..hi.min(n)];
        if idx.is_empty() {
            continue;
        }
        let e: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let a: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        bins.push(EntropyBin {
            entropy_low: e.iter().copied().fold(f64::INFINITY, f64::min),
            entropy_high: e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_entropy: mean(&e),
            mean_activated: mean(&a),
            tokens: idx.len(),
        });
    }

    Ok(EntropyExpertReport { correlation, bins })
}

/// Per-batch-size outcome of the sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSensitivityEntry {
    pub batch_size: usize,
    /// Whether every sequence's mask is bit-identical to its batch-of-one mask.
    pub masks_match_baseline: bool,
    pub mean_experts_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSensitivityReport {
    pub strategy: String,
    pub entries: Vec<BatchSensitivityEntry>,
}

/// Routes a fixed corpus of sequences under different batch groupings.
///
/// Sequence-local strategies produce identical masks no matter how the corpus
/// is partitioned; batch-level routing may not, and the report records both.
/// The corpus length must be divisible by every requested batch size.
pub fn batch_sensitivity_sweep(
    strategy: RoutingStrategy,
    batch_sizes: &[usize],
    corpus: &[ScoreMatrix],
    budget: &BudgetConfig,
) -> Result<BatchSensitivityReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let route_group = |group: &[ScoreMatrix]| -> Result<Vec<RoutingMask>> {
        match strategy {
            RoutingStrategy::BatchTopK => batchtopk_route(group, budget.k_tok),
            RoutingStrategy::OnlineSeqTopK => group
                .iter()
                .map(|s| crate::online::online_mask(s, budget))
                .collect(),
            _ => group
                .iter()
                .map(|s| route_offline(s, strategy, budget))
                .collect(),
        }
    };

    // Baseline: every sequence routed as a batch of one.
    let mut baseline = Vec::with_capacity(corpus.len());
    for s in corpus {
        baseline.extend(route_group(std::slice::from_ref(s))?);
    }

    let token_total: usize = corpus.iter().map(|s| s.n_tokens()).sum();
    let mut entries = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        if b == 0 || corpus.len() % b != 0 {
            return Err(Error::InvalidInput(format!(
                "corpus of {} sequences is not partitionable into batches of {}",
                corpus.len(),
                b
            )));
        }
        let mut masks = Vec::with_capacity(corpus.len());
        for group in corpus.chunks(b) {
            masks.extend(route_group(group)?);
        }
        let selected: usize = masks.iter().map(|m| m.total_selected()).sum();
        entries.push(BatchSensitivityEntry {
            batch_size: b,
            masks_match_baseline: masks == baseline,
            mean_experts_per_token: selected as f64 / token_total as f64,
        });
    }

    Ok(BatchSensitivityReport {
        strategy: strategy.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::topk_route;

    // --- normalized_entropy ---

    #[test]
    fn entropy_uniform_is_one() {
        for n in [2usize, 4, 8, 16] {
            let p = vec![1.0 / n as f64; n];
            assert!((normalized_entropy(&p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn entropy_half_half_is_exactly_half() {
        // H([0.5, 0.5, 0, 0]) = ln 2 and ln 4 = 2 ln 2, so the ratio is 0.5.
        assert_eq!(normalized_entropy(&[0.5, 0.5, 0.0, 0.0]), 0.5);
    }

    // --- routing_entropy ---

    #[test]
    fn routing_entropy_rejects_empty_corpus() {
        assert!(matches!(
            routing_entropy(&[], &[], 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn routing_entropy_load_is_mean_of_rows() {
        let rows = vec![vec![0.8, 0.2], vec![0.2, 0.8]];
        let stats = routing_entropy(&rows, &[], 3).unwrap();
        assert_eq!(stats.per_expert_load, vec![0.5, 0.5]);
        assert!((stats.normalized_entropy - 1.0).abs() < 1e-12);
        assert_eq!(stats.layer_index, 3);
    }

    // --- activation_distribution ---

    #[test]
    fn topk_histogram_is_a_spike_at_k() {
        let s = ScoreMatrix::uniform(100, 4);
        let mask = topk_route(&s, 2).unwrap();
        let hist = activation_distribution(&[mask]);
        assert_eq!(hist.get(&2), Some(&100));
        assert_eq!(hist.len(), 1);
    }

    #[test]
    fn unbounded_seqtopk_histogram_on_crafted_scores() {
        // Token 0 holds the two largest of the six entries, so with k = 1 the
        // histogram is one token at 0 experts and one at 2.
        let s = ScoreMatrix::from_rows(&[vec![0.5, 0.45, 0.05], vec![0.34, 0.33, 0.33]]).unwrap();
        let mask = crate::routing::seqtopk_route_unbounded(&s, 1).unwrap();
        let hist = activation_distribution(&[mask]);
        assert_eq!(hist.get(&0), Some(&1));
        assert_eq!(hist.get(&2), Some(&1));
    }

    #[test]
    fn histogram_conserves_budget() {
        let s = ScoreMatrix::from_rows(&[
            vec![0.5, 0.2, 0.2, 0.1],
            vec![0.3, 0.3, 0.3, 0.1],
            vec![0.7, 0.1, 0.1, 0.1],
        ])
        .unwrap();
        let budget = BudgetConfig::new(2, 4).unwrap();
        let mask = crate::routing::seqtopk_route_bounded(&s, &budget).unwrap();
        let hist = activation_distribution(&[mask.clone()]);
        let weighted: usize = hist.iter().map(|(c, n)| c * n).sum();
        assert_eq!(weighted, mask.total_selected());
        assert_eq!(weighted, 6);
        // Bound compliance restated: support within [lower, upper].
        assert!(hist.keys().all(|&c| c >= 1 && c <= budget.upper_bound));
    }

    // --- token_entropy_vs_experts ---

    #[test]
    fn degenerate_records_are_an_error() {
        let records: Vec<TokenEntropyRecord> = (0..5)
            .map(|i| TokenEntropyRecord {
                token_index: i,
                entropy: 1.0,
                activated_experts: 2,
                difficulty: None,
            })
            .collect();
        assert!(matches!(
            token_entropy_vs_experts(&records),
            Err(Error::CorrelationUndefined(_))
        ));
    }

    #[test]
    fn perfect_linearity_gives_unit_correlation() {
        let records: Vec<TokenEntropyRecord> = [(1.0, 2), (2.0, 4), (3.0, 6)]
            .iter()
            .enumerate()
            .map(|(i, &(h, c))| TokenEntropyRecord {
                token_index: i,
                entropy: h,
                activated_experts: c,
                difficulty: None,
            })
            .collect();
        let report = token_entropy_vs_experts(&records).unwrap();
        assert!((report.correlation - 1.0).abs() < 1e-12);
    }

    // --- batch_sensitivity_sweep ---

    fn corpus() -> Vec<ScoreMatrix> {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        (0..16)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|_| {
                        let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.01).collect();
                        let sum: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / sum).collect()
                    })
                    .collect();
                ScoreMatrix::from_rows(&rows).unwrap()
            })
            .collect()
    }

    #[test]
    fn sequence_local_strategies_are_batch_invariant() {
        let corpus = corpus();
        let budget = BudgetConfig::new(2, 5).unwrap();
        for strategy in [RoutingStrategy::TopK, RoutingStrategy::SeqTopK] {
            let report =
                batch_sensitivity_sweep(strategy, &[1, 4, 16], &corpus, &budget).unwrap();
            assert!(report.entries.iter().all(|e| e.masks_match_baseline));
        }
    }

    #[test]
    fn batchtopk_masks_vary_with_composition() {
        // A dominant sequence drags budget away from a weak one once they
        // share a batch.
        let strong = ScoreMatrix::from_rows(&[vec![0.49, 0.48, 0.03], vec![0.47, 0.46, 0.07]])
            .unwrap();
        let weak =
            ScoreMatrix::from_rows(&[vec![0.4, 0.3, 0.3], vec![0.35, 0.33, 0.32]]).unwrap();
        let corpus = vec![strong, weak];
        let budget = BudgetConfig::new(1, 3).unwrap();
        let report =
            batch_sensitivity_sweep(RoutingStrategy::BatchTopK, &[1, 2], &corpus, &budget)
                .unwrap();
        assert!(report.entries[0].masks_match_baseline);
        assert!(!report.entries[1].masks_match_baseline);
    }

    #[test]
    fn sweep_rejects_unpartitionable_sizes() {
        let corpus = corpus();
        let budget = BudgetConfig::new(1, 5).unwrap();
        assert!(batch_sensitivity_sweep(RoutingStrategy::TopK, &[3], &corpus, &budget).is_err());
    }
}
