//! Pure expert-selection algorithms.
//!
//! Four strategies over a row-stochastic score matrix:
//! - `topk_route` — each token independently keeps its k best experts;
//! - `seqtopk_route_unbounded` — the t*k globally largest entries of the
//!   whole sequence's score matrix, so tokens compete for the shared budget;
//! - `seqtopk_route_bounded` — same sequence budget but every token is
//!   guaranteed at least `lower_bound` experts and capped at `upper_bound`;
//! - `batchtopk_route` — selection across every token of every sequence in a
//!   batch, which makes masks depend on batch composition.
//!
//! All selection is deterministic: score ties break to the lower token index,
//! then the lower expert index (and the lower batch index for batch routing).
//! Scores are compared in f64 throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Tolerance for "row sums to one" checks.
pub const ROW_SUM_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// ScoreMatrix
// ---------------------------------------------------------------------------

/// A T x N matrix of router probabilities for one sequence: row t holds the
/// softmax scores of token t over the N experts. Every row sums to one within
/// [`ROW_SUM_TOL`] and every entry lies in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    data: Mat,
}

/// Validates a single probability row: length, finiteness, range, sum.
pub(crate) fn validate_prob_row(row: &[f64], n_experts: usize) -> Result<()> {
    if row.len() != n_experts {
        return Err(Error::InvalidInput(format!(
            "score row has {} entries, expected {}",
            row.len(),
            n_experts
        )));
    }
    let mut sum = 0.0;
    for (i, &v) in row.iter().enumerate() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!(
                "score entry {} = {} outside [0, 1]",
                i, v
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidInput(format!(
            "score row sums to {} (must be 1 within {})",
            sum, ROW_SUM_TOL
        )));
    }
    Ok(())
}

impl ScoreMatrix {
    /// Wraps a matrix after checking the row-stochastic invariants.
    pub fn new(data: Mat) -> Result<Self> {
        if data.n_rows() == 0 || data.n_cols() == 0 {
            return Err(Error::InvalidInput(
                "score matrix needs at least one token and one expert".into(),
            ));
        }
        for t in 0..data.n_rows() {
            validate_prob_row(data.row(t), data.n_cols())
                .map_err(|e| Error::InvalidInput(format!("row {}: {}", t, e)))?;
        }
        Ok(ScoreMatrix { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    /// The uniform matrix (1/N everywhere).
    pub fn uniform(n_tokens: usize, n_experts: usize) -> Self {
        let mut m = Mat::zeros(n_tokens, n_experts);
        let p = 1.0 / n_experts as f64;
        m.data_mut().fill(p);
        ScoreMatrix { data: m }
    }

    pub fn n_tokens(&self) -> usize {
        self.data.n_rows()
    }

    pub fn n_experts(&self) -> usize {
        self.data.n_cols()
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.data.get(t, i)
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }
}

/// Numerically stable softmax over each row of a logit matrix.
///
/// Subtracts the row maximum before exponentiating, so large-magnitude logits
/// cannot overflow. Rejects non-finite input.
pub fn softmax_scores(logits: &Mat) -> Result<ScoreMatrix> {
    if logits.n_rows() == 0 || logits.n_cols() == 0 {
        return Err(Error::InvalidInput(
            "logit matrix needs at least one token and one expert".into(),
        ));
    }
    if !logits.all_finite() {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let mut out = Mat::zeros(logits.n_rows(), logits.n_cols());
    for t in 0..logits.n_rows() {
        let row = logits.row(t);
        softmax_row_into(row, out.row_mut(t));
    }
    ScoreMatrix::new(out)
}

/// Softmax of one logit row into `out`. Shared by the value and the recorded
/// (autodiff) forward paths so both produce bit-identical probabilities.
pub fn softmax_row_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
    }
    let mut sum = out[0];
    for &e in &out[1..] {
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

// ---------------------------------------------------------------------------
// BudgetConfig
// ---------------------------------------------------------------------------

/// Per-token budget k plus the token-level bounds used by bounded and online
/// sequence routing. The sequence budget is always derived as t * k_tok.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub k_tok: usize,
    pub lower_bound: usize,
    pub upper_bound: usize,
}

impl BudgetConfig {
    /// Default bounds: at least one expert per token, at most k + 2 (capped
    /// at the expert count).
    pub fn new(k_tok: usize, n_experts: usize) -> Result<Self> {
        Self::with_bounds(k_tok, 1, (k_tok + 2).min(n_experts), n_experts)
    }

    pub fn with_bounds(
        k_tok: usize,
        lower_bound: usize,
        upper_bound: usize,
        n_experts: usize,
    ) -> Result<Self> {
        let cfg = BudgetConfig {
            k_tok,
            lower_bound,
            upper_bound,
        };
        cfg.validate(n_experts)?;
        Ok(cfg)
    }

    /// Re-checks the invariants against a concrete expert count.
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.k_tok == 0 || self.k_tok > n_experts {
            return Err(Error::BudgetInfeasible(format!(
                "k_tok = {} outside [1, {}]",
                self.k_tok, n_experts
            )));
        }
        if self.lower_bound < 1 {
            return Err(Error::BudgetInfeasible("lower_bound must be >= 1".into()));
        }
        if self.upper_bound > n_experts {
            return Err(Error::BudgetInfeasible(format!(
                "upper_bound = {} exceeds expert count {}",
                self.upper_bound, n_experts
            )));
        }
        if self.lower_bound > self.k_tok || self.k_tok > self.upper_bound {
            return Err(Error::BudgetInfeasible(format!(
                "bounds [{}, {}] must bracket k_tok = {}",
                self.lower_bound, self.upper_bound, self.k_tok
            )));
        }
        Ok(())
    }

    /// Sequence budget t * k.
    pub fn seq_budget(&self, n_tokens: usize) -> usize {
        n_tokens * self.k_tok
    }
}

// ---------------------------------------------------------------------------
// RoutingMask
// ---------------------------------------------------------------------------

/// The outcome of a selection pass: a binary T x N mask, the gating weights
/// (the raw softmax score where selected, zero elsewhere), and per-token
/// selection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMask {
    n_tokens: usize,
    n_experts: usize,
    selected: Vec<bool>,
    gate_weights: Vec<f64>,
    counts: Vec<usize>,
}

impl RoutingMask {
    /// Builds a mask from a list of selected (token, expert) pairs.
    pub fn from_selected(scores: &ScoreMatrix, pairs: &[(usize, usize)]) -> Self {
        let (t, n) = (scores.n_tokens(), scores.n_experts());
        let mut selected = vec![false; t * n];
        let mut gate_weights = vec![0.0; t * n];
        let mut counts = vec![0usize; t];
        for &(tok, exp) in pairs {
            let idx = tok * n + exp;
            if !selected[idx] {
                selected[idx] = true;
                gate_weights[idx] = scores.get(tok, exp);
                counts[tok] += 1;
            }
        }
        RoutingMask {
            n_tokens: t,
            n_experts: n,
            selected,
            gate_weights,
            counts,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    #[inline]
    pub fn is_selected(&self, t: usize, i: usize) -> bool {
        self.selected[t * self.n_experts + i]
    }

    #[inline]
    pub fn gate(&self, t: usize, i: usize) -> f64 {
        self.gate_weights[t * self.n_experts + i]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total_selected(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Selected expert indices for one token, ascending.
    pub fn selected_experts(&self, t: usize) -> Vec<usize> {
        (0..self.n_experts)
            .filter(|&i| self.is_selected(t, i))
            .collect()
    }

    /// All selected (token, expert) pairs in row-major order.
    pub fn selected_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total_selected());
        for t in 0..self.n_tokens {
            for i in 0..self.n_experts {
                if self.is_selected(t, i) {
                    out.push((t, i));
                }
            }
        }
        out
    }

    /// Sum of the gate weights of one token's selected experts.
    pub fn gate_row_sum(&self, t: usize) -> f64 {
        let row = &self.gate_weights[t * self.n_experts..(t + 1) * self.n_experts];
        row.iter().sum()
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// Routing strategy identifiers as they appear on the command line and in
/// config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingStrategy {
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "seqtopk")]
    SeqTopK,
    #[serde(rename = "seqtopk-bounded")]
    SeqTopKBounded,
    #[serde(rename = "batchtopk")]
    BatchTopK,
    #[serde(rename = "online-seqtopk")]
    OnlineSeqTopK,
}

impl RoutingStrategy {
    pub const ALL: [RoutingStrategy; 5] = [
        RoutingStrategy::TopK,
        RoutingStrategy::SeqTopK,
        RoutingStrategy::SeqTopKBounded,
        RoutingStrategy::BatchTopK,
        RoutingStrategy::OnlineSeqTopK,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoutingStrategy::TopK => "topk",
            RoutingStrategy::SeqTopK => "seqtopk",
            RoutingStrategy::SeqTopKBounded => "seqtopk-bounded",
            RoutingStrategy::BatchTopK => "batchtopk",
            RoutingStrategy::OnlineSeqTopK => "online-seqtopk",
        }
    }
}

impl std::fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoutingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(RoutingStrategy::TopK),
            "seqtopk" => Ok(RoutingStrategy::SeqTopK),
            "seqtopk-bounded" => Ok(RoutingStrategy::SeqTopKBounded),
            "batchtopk" => Ok(RoutingStrategy::BatchTopK),
            "online-seqtopk" => Ok(RoutingStrategy::OnlineSeqTopK),
            other => Err(Error::InvalidInput(format!(
                "unknown strategy '{}' (expected topk|seqtopk|seqtopk-bounded|batchtopk|online-seqtopk)",
                other
            ))),
        }
    }
}

fn check_k(k: usize, n_experts: usize) -> Result<()> {
    if k == 0 || k > n_experts {
        return Err(Error::BudgetInfeasible(format!(
            "k = {} outside [1, {}]",
            k, n_experts
        )));
    }
    Ok(())
}

/// Expert indices of one score row ordered by descending score, ties to the
/// lower index.
fn row_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// All (token, expert) entries ordered by descending score, ties to the lower
/// token index then the lower expert index.
fn ranked_entries(scores: &ScoreMatrix) -> Vec<(usize, usize)> {
    let mut entries: Vec<(usize, usize)> =
        (0..scores.n_tokens())
            .flat_map(|t| (0..scores.n_experts()).map(move |i| (t, i)))
            .collect();
    entries.sort_by(|&(t1, i1), &(t2, i2)| {
        scores
            .get(t2, i2)
            .partial_cmp(&scores.get(t1, i1))
            .unwrap()
            .then(t1.cmp(&t2))
            .then(i1.cmp(&i2))
    });
    entries
}

/// Standard per-token TopK: each row keeps its k largest scores.
pub fn topk_route(scores: &ScoreMatrix, k: usize) -> Result<RoutingMask> {
    check_k(k, scores.n_experts())?;
    let mut pairs = Vec::with_capacity(scores.n_tokens() * k);
    for t in 0..scores.n_tokens() {
        for &i in row_order(scores.row(t)).iter().take(k) {
            pairs.push((t, i));
        }
    }
    Ok(RoutingMask::from_selected(scores, &pairs))
}

/// Sequence-level TopK without token bounds: the t*k globally largest score
/// entries. A token may receive anywhere from zero to N experts.
pub fn seqtopk_route_unbounded(scores: &ScoreMatrix, k: usize) -> Result<RoutingMask> {
    check_k(k, scores.n_experts())?;
    let budget = (scores.n_tokens() * k).min(scores.n_tokens() * scores.n_experts());
    let ranked = ranked_entries(scores);
    Ok(RoutingMask::from_selected(scores, &ranked[..budget]))
}

/// Sequence-level TopK with per-token bounds.
///
/// Phase 1 grants every token its `lower_bound` highest-scoring experts;
/// phase 2 fills the remaining budget greedily with the globally largest
/// unselected entries whose token is still below `upper_bound`. Under the
/// budget invariants this greedy is score-maximal (the partition caps form a
/// matroid), which the enumeration oracle in the tests pins down.
pub fn seqtopk_route_bounded(scores: &ScoreMatrix, budget: &BudgetConfig) -> Result<RoutingMask> {
    budget.validate(scores.n_experts())?;
    let t_tokens = scores.n_tokens();
    let target = budget.seq_budget(t_tokens);
    if t_tokens * budget.upper_bound < target {
        return Err(Error::BudgetInfeasible(format!(
            "caps admit at most {} selections, budget needs {}",
            t_tokens * budget.upper_bound,
            target
        )));
    }

    let n = scores.n_experts();
    let mut selected = vec![false; t_tokens * n];
    let mut counts = vec![0usize; t_tokens];
    let mut total = 0usize;

    for t in 0..t_tokens {
        for &i in row_order(scores.row(t)).iter().take(budget.lower_bound) {
            selected[t * n + i] = true;
            counts[t] += 1;
            total += 1;
        }
    }

    for (t, i) in ranked_entries(scores) {
        if total == target {
            break;
        }
        if selected[t * n + i] || counts[t] >= budget.upper_bound {
            continue;
        }
        selected[t * n + i] = true;
        counts[t] += 1;
        total += 1;
    }

    if total != target {
        return Err(Error::BudgetInfeasible(format!(
            "could only place {} of {} selections",
            total, target
        )));
    }

    let pairs: Vec<(usize, usize)> = (0..t_tokens)
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .filter(|&(t, i)| selected[t * n + i])
        .collect();
    Ok(RoutingMask::from_selected(scores, &pairs))
}

/// Batch-level TopK: the globally largest entries across every token of every
/// sequence in the batch. Ties break to the lower batch index, then token,
/// then expert. All sequences must share the expert count.
pub fn batchtopk_route(batch: &[ScoreMatrix], k: usize) -> Result<Vec<RoutingMask>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("batch needs at least one sequence".into()));
    }
    let n = batch[0].n_experts();
    for (b, s) in batch.iter().enumerate() {
        if s.n_experts() != n {
            return Err(Error::InvalidInput(format!(
                "sequence {} has {} experts, expected {}",
                b,
                s.n_experts(),
                n
            )));
        }
    }
    check_k(k, n)?;

    let mut entries: Vec<(usize, usize, usize)> = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        for t in 0..s.n_tokens() {
            for i in 0..n {
                entries.push((b, t, i));
            }
        }
    }
    entries.sort_by(|&(b1, t1, i1), &(b2, t2, i2)| {
        batch[b2]
            .get(t2, i2)
            .partial_cmp(&batch[b1].get(t1, i1))
            .unwrap()
            .then(b1.cmp(&b2))
            .then(t1.cmp(&t2))
            .then(i1.cmp(&i2))
    });

    let budget: usize = batch.iter().map(|s| s.n_tokens() * k).sum();
    let mut per_seq: Vec<Vec<(usize, usize)>> = vec![Vec::new(); batch.len()];
    for &(b, t, i) in entries.iter().take(budget) {
        per_seq[b].push((t, i));
    }
    Ok(batch
        .iter()
        .zip(per_seq)
        .map(|(s, pairs)| RoutingMask::from_selected(s, &pairs))
        .collect())
}

/// Dispatches one sequence through an offline strategy. `BatchTopK` routes the
/// sequence as a batch of one, which coincides with unbounded sequence TopK.
/// Online routing lives in [`crate::online`] and is dispatched there.
pub fn route_offline(
    scores: &ScoreMatrix,
    strategy: RoutingStrategy,
    budget: &BudgetConfig,
) -> Result<RoutingMask> {
    match strategy {
        RoutingStrategy::TopK => topk_route(scores, budget.k_tok),
        RoutingStrategy::SeqTopK => seqtopk_route_unbounded(scores, budget.k_tok),
        RoutingStrategy::SeqTopKBounded => seqtopk_route_bounded(scores, budget),
        RoutingStrategy::BatchTopK => {
            Ok(batchtopk_route(std::slice::from_ref(scores), budget.k_tok)?
                .pop()
                .expect("batch of one"))
        }
        RoutingStrategy::OnlineSeqTopK => Err(Error::InvalidInput(
            "online-seqtopk is not an offline strategy; use online::online_mask".into(),
        )),
    }
}
