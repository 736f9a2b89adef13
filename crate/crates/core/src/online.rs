//! Causal sequence-level routing for autoregressive decoding.
//!
//! The [`ExpertCache`] stores every past token's router score row (and the
//! realized activation sets) so that step m can be routed against the full
//! score history without recomputation — the routing analogue of a KV cache,
//! at steps x N values per layer instead of steps x hidden-size.
//!
//! The step rule: token m's candidate experts are those of its entries that
//! fall inside the global top-(m*k) of the cached score matrix; it may
//! activate at most `remaining = m*k - consumed_so_far` of them (and never
//! more than `upper_bound`). With `lower_bound = 1` the cumulative activation
//! count therefore never exceeds m*k at any prefix length m, and decisions for
//! earlier tokens are immutable. A configured `lower_bound > 1` may override
//! the remaining budget so every token still computes through enough experts;
//! that override cannot trigger at `lower_bound = 1`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{validate_prob_row, BudgetConfig, RoutingMask, ScoreMatrix};

/// Version tag for serialized cache snapshots.
pub const CACHE_SNAPSHOT_VERSION: u32 = 1;

/// Append-only per-session store of past routing scores and realized
/// activations.
///
/// `rows` may run one ahead of `activated` while a step's scores have been
/// appended but not yet routed (see [`ExpertCache::append_scores`]); every
/// routed step keeps both lists in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCache {
    n_experts: usize,
    rows: Vec<Vec<f64>>,
    activated: Vec<Vec<usize>>,
}

/// Outcome of routing one new token against the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStepResult {
    /// Activated expert indices for the new token, ascending.
    pub selected_experts: Vec<usize>,
    /// Scores of the activated experts, matching `selected_experts` order.
    pub gate_weights: Vec<f64>,
    /// Total activations across all steps including this one.
    pub cumulative_count: usize,
    /// Activations consumed by this step.
    pub remaining_budget_used: usize,
}

/// Per-step budget audit: cumulative counts and their ratio to m*k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub per_step_cumulative: Vec<usize>,
    pub per_step_ratio: Vec<f64>,
    pub max_ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheSnapshot {
    format_version: u32,
    n_experts: usize,
    rows: Vec<Vec<f64>>,
    activated: Vec<Vec<usize>>,
}

impl ExpertCache {
    pub fn new(n_experts: usize) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::InvalidInput("cache needs at least one expert".into()));
        }
        Ok(ExpertCache {
            n_experts,
            rows: Vec::new(),
            activated: Vec::new(),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    /// Number of cached score rows (decoded tokens).
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    /// Number of steps whose activation set has been recorded.
    pub fn routed_steps(&self) -> usize {
        self.activated.len()
    }

    pub fn score_row(&self, step: usize) -> &[f64] {
        &self.rows[step]
    }

    pub fn activated_set(&self, step: usize) -> &[usize] {
        &self.activated[step]
    }

    pub fn cumulative_activations(&self) -> usize {
        self.activated.iter().map(|a| a.len()).sum()
    }

    /// Appends one score row without routing it. Prior rows and all recorded
    /// activation sets are untouched. Used for score-stream replay; decoding
    /// goes through [`ExpertCache::route_step`], which appends and routes in
    /// one move.
    pub fn append_scores(&mut self, row: &[f64]) -> Result<()> {
        validate_prob_row(row, self.n_experts)?;
        self.rows.push(row.to_vec());
        Ok(())
    }

    /// The cached score history as a matrix (requires at least one row).
    pub fn score_matrix(&self) -> Result<ScoreMatrix> {
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("cache is empty".into()));
        }
        ScoreMatrix::from_rows(&self.rows)
    }

    /// Routes a new token: appends its score row as step m, then activates
    /// experts per the cumulative-budget rule described in the module docs.
    pub fn route_step(
        &mut self,
        new_row: &[f64],
        budget: &BudgetConfig,
    ) -> Result<OnlineStepResult> {
        budget.validate(self.n_experts)?;
        if self.rows.len() != self.activated.len() {
            return Err(Error::InvalidInput(
                "cache has unrouted score rows; route_step appends its own row".into(),
            ));
        }
        self.append_scores(new_row)?;

        let m = self.rows.len();
        let n = self.n_experts;
        let seq_budget = m * budget.k_tok;

        // Global top-(m*k) over the cached matrix; ties break to the earlier
        // row, then the lower expert index.
        let mut entries: Vec<(usize, usize)> = (0..m)
            .flat_map(|t| (0..n).map(move |i| (t, i)))
            .collect();
        entries.sort_by(|&(t1, i1), &(t2, i2)| {
            self.rows[t2][i2]
                .partial_cmp(&self.rows[t1][i1])
                .unwrap()
                .then(t1.cmp(&t2))
                .then(i1.cmp(&i2))
        });
        let top_len = seq_budget.min(m * n);

        // Candidates: the new token's experts inside the top set, ordered by
        // descending score (lower index first on ties).
        let mut candidates: Vec<usize> = entries[..top_len]
            .iter()
            .filter(|&&(t, _)| t == m - 1)
            .map(|&(_, i)| i)
            .collect();
        candidates.sort_by(|&a, &b| {
            new_row[b]
                .partial_cmp(&new_row[a])
                .unwrap()
                .then(a.cmp(&b))
        });

        let consumed = self.cumulative_activations();
        let remaining = seq_budget.saturating_sub(consumed);
        let take = candidates.len().min(remaining).min(budget.upper_bound);
        let mut chosen: Vec<usize> = candidates[..take].to_vec();

        // Lower bound overrides the budget: a token must compute through at
        // least lower_bound experts. With lower_bound = 1 this branch cannot
        // fire while the budget still has room, and remaining >= 1 always
        // holds (consumed <= (m-1)*k implies remaining >= k >= 1).
        if chosen.len() < budget.lower_bound {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                new_row[b]
                    .partial_cmp(&new_row[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            chosen = order[..budget.lower_bound].to_vec();
        }

        chosen.sort_unstable();
        let gate_weights: Vec<f64> = chosen.iter().map(|&i| new_row[i]).collect();
        let used = chosen.len();
        self.activated.push(chosen.clone());

        Ok(OnlineStepResult {
            selected_experts: chosen,
            gate_weights,
            cumulative_count: consumed + used,
            remaining_budget_used: used,
        })
    }

    /// The argtop-(m*k) selection over the cached score matrix: the set the
    /// unbounded sequence-level route would pick given the whole history.
    pub fn selection_set_at_horizon(&self, k: usize) -> Result<BTreeSet<(usize, usize)>> {
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("cache is empty".into()));
        }
        if k == 0 || k > self.n_experts {
            return Err(Error::BudgetInfeasible(format!(
                "k = {} outside [1, {}]",
                k, self.n_experts
            )));
        }
        let m = self.rows.len();
        let n = self.n_experts;
        let mut entries: Vec<(usize, usize)> = (0..m)
            .flat_map(|t| (0..n).map(move |i| (t, i)))
            .collect();
        entries.sort_by(|&(t1, i1), &(t2, i2)| {
            self.rows[t2][i2]
                .partial_cmp(&self.rows[t1][i1])
                .unwrap()
                .then(t1.cmp(&t2))
                .then(i1.cmp(&i2))
        });
        Ok(entries[..(m * k).min(m * n)].iter().copied().collect())
    }

    /// Per-step cumulative activation counts against the m*k budget line.
    pub fn audit_budget(&self, k: usize) -> Result<BudgetAudit> {
        if self.activated.is_empty() {
            return Err(Error::InvalidInput("no routed steps to audit".into()));
        }
        if k == 0 {
            return Err(Error::BudgetInfeasible("k must be >= 1".into()));
        }
        let mut cumulative = Vec::with_capacity(self.activated.len());
        let mut ratios = Vec::with_capacity(self.activated.len());
        let mut running = 0usize;
        let mut max_ratio = 0.0f64;
        for (step, set) in self.activated.iter().enumerate() {
            running += set.len();
            cumulative.push(running);
            let ratio = running as f64 / ((step + 1) * k) as f64;
            if ratio > max_ratio {
                max_ratio = ratio;
            }
            ratios.push(ratio);
        }
        Ok(BudgetAudit {
            per_step_cumulative: cumulative,
            per_step_ratio: ratios,
            max_ratio,
        })
    }

    // --- snapshot serialization ---

    pub fn to_json(&self) -> String {
        let snap = CacheSnapshot {
            format_version: CACHE_SNAPSHOT_VERSION,
            n_experts: self.n_experts,
            rows: self.rows.clone(),
            activated: self.activated.clone(),
        };
        serde_json::to_string(&snap).expect("cache snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: CacheSnapshot =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if snap.format_version != CACHE_SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "unsupported cache snapshot version {}",
                snap.format_version
            )));
        }
        let mut cache = ExpertCache::new(snap.n_experts)?;
        for row in &snap.rows {
            cache.append_scores(row)?;
        }
        if snap.activated.len() > snap.rows.len() {
            return Err(Error::Format(
                "snapshot has more activation sets than score rows".into(),
            ));
        }
        for (step, set) in snap.activated.iter().enumerate() {
            if set.iter().any(|&i| i >= snap.n_experts) {
                return Err(Error::Format(format!(
                    "snapshot step {} activates an out-of-range expert",
                    step
                )));
            }
        }
        cache.activated = snap.activated;
        Ok(cache)
    }
}

/// Simulates causal routing over a full score matrix and returns the realized
/// activations as a mask. This is the strategy used when training with the
/// online variant: selection sees only the prefix, exactly as at decode time.
pub fn online_mask(scores: &ScoreMatrix, budget: &BudgetConfig) -> Result<RoutingMask> {
    let mut cache = ExpertCache::new(scores.n_experts())?;
    let mut pairs = Vec::new();
    for t in 0..scores.n_tokens() {
        let step = cache.route_step(scores.row(t), budget)?;
        for i in step.selected_experts {
            pairs.push((t, i));
        }
    }
    Ok(RoutingMask::from_selected(scores, &pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{seqtopk_route_unbounded, topk_route};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|v| v / sum).collect()
    }

    // --- append_scores ---

    #[test]
    fn append_to_empty_cache() {
        let mut cache = ExpertCache::new(2).unwrap();
        cache.append_scores(&[0.6, 0.4]).unwrap();
        assert_eq!(cache.steps(), 1);
        assert_eq!(cache.score_row(0), &[0.6, 0.4]);
    }

    #[test]
    fn append_preserves_insertion_order() {
        let mut cache = ExpertCache::new(2).unwrap();
        cache.append_scores(&[0.6, 0.4]).unwrap();
        cache.append_scores(&[0.1, 0.9]).unwrap();
        assert_eq!(cache.score_row(0), &[0.6, 0.4]);
        assert_eq!(cache.score_row(1), &[0.1, 0.9]);
    }

    #[test]
    fn append_rejects_non_stochastic_row() {
        let mut cache = ExpertCache::new(2).unwrap();
        assert!(cache.append_scores(&[0.5, 0.6]).is_err()); // sum 1.1
        assert!(cache.append_scores(&[0.5, 0.3, 0.2]).is_err()); // wrong length
        assert_eq!(cache.steps(), 0);
    }

    // --- route_step ---

    #[test]
    fn first_step_equals_topk() {
        let row = vec![0.1, 0.5, 0.15, 0.25];
        for k in 1..=4usize {
            let mut cache = ExpertCache::new(4).unwrap();
            let budget = BudgetConfig::new(k, 4).unwrap();
            let step = cache.route_step(&row, &budget).unwrap();
            let s = ScoreMatrix::from_rows(&[row.clone()]).unwrap();
            let mask = topk_route(&s, k).unwrap();
            assert_eq!(step.selected_experts, mask.selected_experts(0));
            assert_eq!(step.cumulative_count, k);
        }
    }

    #[test]
    fn lower_bound_forces_activation_for_starved_token() {
        // Hand ranking of S_2 = [[0.5, 0.45, 0.05], [0.34, 0.33, 0.33]] with
        // budget 2*1 = 2: top entries are (t0,e0) and (t0,e1), so token 1 has
        // no candidate and the lower bound forces its best expert e0.
        let mut cache = ExpertCache::new(3).unwrap();
        let budget = BudgetConfig::with_bounds(1, 1, 3, 3).unwrap();
        cache.route_step(&[0.5, 0.45, 0.05], &budget).unwrap();
        let step = cache.route_step(&[0.34, 0.33, 0.33], &budget).unwrap();
        assert_eq!(step.selected_experts, vec![0]);
        assert_eq!(step.remaining_budget_used, 1);
        assert_eq!(step.cumulative_count, 2);
    }

    #[test]
    fn dominant_new_token_stays_within_budget() {
        // Token 1 activated e0; new row holds the global max 0.9. Top-2 of
        // S_2 admits only one candidate slot for token 2 under remaining
        // budget 1, so exactly {e0} activates and the cumulative stays at 2.
        let mut cache = ExpertCache::new(3).unwrap();
        let budget = BudgetConfig::with_bounds(1, 1, 3, 3).unwrap();
        cache.route_step(&[0.5, 0.45, 0.05], &budget).unwrap();
        let step = cache.route_step(&[0.9, 0.05, 0.05], &budget).unwrap();
        assert_eq!(step.selected_experts, vec![0]);
        assert_eq!(step.cumulative_count, 2);
    }

    #[test]
    fn route_step_rejects_pending_rows() {
        let mut cache = ExpertCache::new(2).unwrap();
        cache.append_scores(&[0.5, 0.5]).unwrap();
        let budget = BudgetConfig::new(1, 2).unwrap();
        assert!(cache.route_step(&[0.5, 0.5], &budget).is_err());
    }

    // --- selection_set_at_horizon ---

    #[test]
    fn horizon_selection_on_single_row() {
        let mut cache = ExpertCache::new(4).unwrap();
        cache.append_scores(&[0.1, 0.5, 0.15, 0.25]).unwrap();
        let set = cache.selection_set_at_horizon(2).unwrap();
        assert_eq!(set, [(0, 1), (0, 3)].into_iter().collect());
    }

    #[test]
    fn horizon_selection_hand_ranked() {
        let mut cache = ExpertCache::new(3).unwrap();
        cache.append_scores(&[0.5, 0.45, 0.05]).unwrap();
        cache.append_scores(&[0.34, 0.33, 0.33]).unwrap();
        let set = cache.selection_set_at_horizon(1).unwrap();
        assert_eq!(set, [(0, 0), (0, 1)].into_iter().collect());
    }

    #[test]
    fn horizon_selection_matches_unbounded_seqtopk() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let t = rng.random_range(1..=8);
            let n = rng.random_range(1..=6usize);
            let k = rng.random_range(1..=n);
            let rows: Vec<Vec<f64>> = (0..t).map(|_| random_row(&mut rng, n)).collect();
            let mut cache = ExpertCache::new(n).unwrap();
            for row in &rows {
                cache.append_scores(row).unwrap();
            }
            let horizon = cache.selection_set_at_horizon(k).unwrap();
            let s = ScoreMatrix::from_rows(&rows).unwrap();
            let mask = seqtopk_route_unbounded(&s, k).unwrap();
            let offline: BTreeSet<(usize, usize)> = mask.selected_pairs().into_iter().collect();
            assert_eq!(horizon, offline);
        }
    }

    // --- audit_budget ---

    #[test]
    fn audit_exact_budget_gives_unit_ratios() {
        let mut cache = ExpertCache::new(4).unwrap();
        let budget = BudgetConfig::with_bounds(2, 1, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            cache.route_step(&random_row(&mut rng, 4), &budget).unwrap();
        }
        let audit = cache.audit_budget(2).unwrap();
        assert!(audit.max_ratio <= 1.0);
        // Step 1 always activates exactly k, so the first ratio is 1.0.
        assert_eq!(audit.per_step_ratio[0], 1.0);
    }

    #[test]
    fn audit_underfull_first_step_ratio() {
        // One activation against k = 2 gives ratio 1/2 at step 1.
        let mut cache = ExpertCache::new(2).unwrap();
        cache.append_scores(&[0.9, 0.1]).unwrap();
        cache.activated.push(vec![0]);
        let audit = cache.audit_budget(2).unwrap();
        assert_eq!(audit.per_step_ratio[0], 0.5);
    }

    #[test]
    fn fuzzed_sessions_never_exceed_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(2..=8usize);
            let k = rng.random_range(1..=2.min(n));
            let budget = BudgetConfig::new(k, n).unwrap();
            let mut cache = ExpertCache::new(n).unwrap();
            let steps = rng.random_range(1..=30);
            for _ in 0..steps {
                cache.route_step(&random_row(&mut rng, n), &budget).unwrap();
            }
            let audit = cache.audit_budget(k).unwrap();
            assert!(audit.max_ratio <= 1.0, "budget exceeded: {:?}", audit);
        }
    }

    // --- replay and snapshots ---

    #[test]
    fn rebuild_from_same_stream_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let budget = BudgetConfig::new(2, n).unwrap();
        let rows: Vec<Vec<f64>> = (0..12).map(|_| random_row(&mut rng, n)).collect();
        let mut a = ExpertCache::new(n).unwrap();
        let mut b = ExpertCache::new(n).unwrap();
        for row in &rows {
            a.route_step(row, &budget).unwrap();
        }
        for row in &rows {
            b.route_step(row, &budget).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_decisions_are_immutable() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let budget = BudgetConfig::new(1, n).unwrap();
        let mut cache = ExpertCache::new(n).unwrap();
        let mut history: Vec<Vec<usize>> = Vec::new();
        for _ in 0..20 {
            cache.route_step(&random_row(&mut rng, n), &budget).unwrap();
            for (step, past) in history.iter().enumerate() {
                assert_eq!(cache.activated_set(step), &past[..]);
            }
            history.push(cache.activated_set(cache.routed_steps() - 1).to_vec());
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let budget = BudgetConfig::new(2, n).unwrap();
        let mut cache = ExpertCache::new(n).unwrap();
        for _ in 0..6 {
            cache.route_step(&random_row(&mut rng, n), &budget).unwrap();
        }
        let json = cache.to_json();
        let restored = ExpertCache::from_json(&json).unwrap();
        assert_eq!(cache, restored);
        assert_eq!(json, restored.to_json());
    }

    // --- online_mask ---

    #[test]
    fn online_mask_matches_step_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 6;
        let budget = BudgetConfig::new(2, n).unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| random_row(&mut rng, n)).collect();
        let s = ScoreMatrix::from_rows(&rows).unwrap();
        let mask = online_mask(&s, &budget).unwrap();
        let mut cache = ExpertCache::new(n).unwrap();
        for (t, row) in rows.iter().enumerate() {
            let step = cache.route_step(row, &budget).unwrap();
            assert_eq!(step.selected_experts, mask.selected_experts(t));
        }
    }
}
