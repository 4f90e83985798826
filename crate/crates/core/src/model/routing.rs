//! Expert selection: top-k, expert bias, Sinkhorn and balanced assignment,
//! plus the reference mask and capacity dropping.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::balancing::{balanced_assignment, sinkhorn_normalize, AuctionOptions, BalanceStats};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, top_k_into, Matrix};

use super::batch::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionMode {
    TopK,
    /// Top-k on `z + b`; the bias never enters the combination weights.
    ExpertBias,
    Sinkhorn { iters: usize, tol: f64 },
    Balanced(AuctionOptions),
}

/// Which slots go first when an expert overflows its capacity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropPolicy {
    /// Lowest router probability dropped first.
    #[default]
    Probability,
    /// Latest token position dropped first.
    Position,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingPolicy {
    pub selection: SelectionMode,
    pub reference_mask: bool,
    /// `f64::INFINITY` disables dropping.
    pub capacity_factor: f64,
    pub drop_policy: DropPolicy,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            selection: SelectionMode::TopK,
            reference_mask: false,
            capacity_factor: f64::INFINITY,
            drop_policy: DropPolicy::Probability,
        }
    }
}

/// Router projection `d × E` and the expert-bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Routing of every occurrence in a batch for one MoE layer.
///
/// Router logits are stored per row; `token_row` maps occurrences to rows so
/// occurrences with identical inputs can share one.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub num_experts: usize,
    pub top_k: usize,
    pub logits: Matrix,
    /// Full softmax of `logits`, row by row.
    pub probs: Matrix,
    pub token_row: Vec<u32>,
    /// `N × k`, row-major.
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub dropped: Vec<bool>,
    pub domains: Vec<usize>,
    pub in_td: Vec<bool>,
}

impl RoutingDecision {
    pub fn num_tokens(&self) -> usize {
        self.token_row.len()
    }

    pub fn logits_of(&self, i: usize) -> &[f64] {
        self.logits.row(self.token_row[i] as usize)
    }

    pub fn probs_of(&self, i: usize) -> &[f64] {
        self.probs.row(self.token_row[i] as usize)
    }

    pub fn selected_of(&self, i: usize) -> &[usize] {
        &self.selected[i * self.top_k..(i + 1) * self.top_k]
    }

    pub fn weights_of(&self, i: usize) -> &[f64] {
        &self.weights[i * self.top_k..(i + 1) * self.top_k]
    }

    pub fn dropped_of(&self, i: usize) -> &[bool] {
        &self.dropped[i * self.top_k..(i + 1) * self.top_k]
    }

    pub fn drop_fraction(&self) -> f64 {
        if self.dropped.is_empty() {
            return 0.0;
        }
        self.dropped.iter().filter(|&&d| d).count() as f64 / self.dropped.len() as f64
    }

    /// Selections (dropped or not) and summed probabilities over `range`.
    pub fn balance_stats(&self, range: Range<usize>) -> BalanceStats {
        let mut s = BalanceStats::new(self.num_experts, self.top_k);
        for i in range {
            for &e in self.selected_of(i) {
                s.counts[e] += 1;
            }
            for (acc, p) in s.prob_sums.iter_mut().zip(self.probs_of(i)) {
                *acc += p;
            }
            s.tokens += 1;
        }
        s
    }

    fn recompute_weights(&mut self) {
        let k = self.top_k;
        for i in 0..self.num_tokens() {
            let row = self.token_row[i] as usize;
            let z = self.logits.row(row);
            let w = &mut self.weights[i * k..(i + 1) * k];
            for (slot, &e) in self.selected[i * k..(i + 1) * k].iter().enumerate() {
                w[slot] = z[e];
            }
            softmax_in_place(w);
        }
    }
}

/// Row-wise softmax of a logits matrix.
pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    p
}

/// Restrict a domain-specific token from domain `domain` to experts
/// `i` with `i / k == domain`. Generic tokens are left alone.
pub fn apply_reference_mask(scores: &mut [f64], in_td: bool, domain: usize, k: usize) -> Result<()> {
    let e = scores.len();
    if k == 0 || e % k != 0 {
        return Err(Error::config(format!("reference routing needs E divisible by k (E={}, k={})", e, k)));
    }
    if domain >= e / k {
        return Err(Error::config(format!(
            "reference routing needs E = k·D; domain {} has no expert block among {} experts",
            domain, e
        )));
    }
    if in_td {
        for (i, s) in scores.iter_mut().enumerate() {
            if i / k != domain {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    Ok(())
}

/// Select experts for one set of tokens sharing a single scope.
pub fn route(router: &RouterState, hidden: &Matrix, k: usize, mode: &SelectionMode) -> Result<RoutingDecision> {
    let n = hidden.rows();
    let logits = hidden.matmul(&router.weight);
    let batch = TokenBatch {
        tokens: vec![0; n],
        targets: vec![super::batch::NO_TARGET; n],
        positions: (0..n).collect(),
        domains: vec![0; n],
        in_td: vec![false; n],
        seq_len: n.max(1),
        micro_batches: vec![0..n],
        groups: vec![0..1],
    };
    let policy = RoutingPolicy {
        selection: *mode,
        ..Default::default()
    };
    select(logits, (0..n as u32).collect(), &batch, &router.bias, k, &policy)
}

/// Full routing for a batch: selection per scope group, weights, then capacity.
pub fn select(
    logits: Matrix,
    token_row: Vec<u32>,
    batch: &TokenBatch,
    bias: &[f64],
    k: usize,
    policy: &RoutingPolicy,
) -> Result<RoutingDecision> {
    let e = logits.cols();
    let n = token_row.len();
    if k == 0 || k > e {
        return Err(Error::input(format!("top-k {} invalid for {} experts", k, e)));
    }
    if bias.len() != e {
        return Err(Error::input("expert bias length differs from expert count"));
    }
    if !logits.is_finite() {
        return Err(Error::Divergence {
            layer: 0,
            reason: "non-finite router logits".into(),
        });
    }
    let probs = row_softmax(&logits);
    let mut d = RoutingDecision {
        num_experts: e,
        top_k: k,
        logits,
        probs,
        token_row,
        selected: vec![0; n * k],
        weights: vec![0.0; n * k],
        dropped: vec![false; n * k],
        domains: batch.domains.clone(),
        in_td: batch.in_td.clone(),
    };
    let mut scratch = Vec::with_capacity(e);
    for g in 0..batch.groups.len() {
        let range = batch.group_tokens(g);
        let t = range.len();
        let mut scores = Matrix::zeros(t, e);
        for (local, i) in range.clone().enumerate() {
            let z = d.logits_of(i);
            let row = scores.row_mut(local);
            row.copy_from_slice(z);
            if policy.selection == SelectionMode::ExpertBias {
                for (s, b) in row.iter_mut().zip(bias) {
                    *s += b;
                }
            }
            if policy.reference_mask {
                apply_reference_mask(row, batch.in_td[i], batch.domains[i], k)?;
            }
        }
        match policy.selection {
            SelectionMode::TopK | SelectionMode::ExpertBias => {
                for (local, i) in range.clone().enumerate() {
                    top_k_into(scores.row(local), k, &mut scratch);
                    d.selected[i * k..(i + 1) * k].copy_from_slice(&scratch);
                }
            }
            SelectionMode::Sinkhorn { iters, tol } => {
                soften_mask(&mut scores, 30.0);
                let out = sinkhorn_normalize(&scores, iters, tol)?;
                for (local, i) in range.clone().enumerate() {
                    top_k_into(out.scores.row(local), k, &mut scratch);
                    d.selected[i * k..(i + 1) * k].copy_from_slice(&scratch);
                }
            }
            SelectionMode::Balanced(opts) => {
                if t % e != 0 {
                    return Err(Error::config(format!(
                        "balanced assignment needs the scope token count {} divisible by {} experts",
                        t, e
                    )));
                }
                soften_mask(&mut scores, 1.0);
                let picks = balanced_assignment(&scores, k, &opts)?;
                d.selected[range.start * k..range.end * k].copy_from_slice(&picks);
            }
        }
    }
    d.recompute_weights();
    if policy.capacity_factor.is_finite() {
        apply_capacity(&mut d, &batch.micro_batches, policy.capacity_factor, policy.drop_policy)?;
    }
    Ok(d)
}

/// Replace masked (-inf) entries by a finite value below every allowed score,
/// for solvers that need finite inputs.
fn soften_mask(scores: &mut Matrix, margin: f64) {
    let finite = scores.data().iter().copied().filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return;
    }
    let floor = lo - margin * (hi - lo + 1.0);
    for x in scores.data_mut() {
        if *x == f64::NEG_INFINITY {
            *x = floor;
        }
    }
}

/// Per-expert capacity `ceil(c k T / E)` over each local group; overflow slots
/// are marked dropped. Weights of surviving slots are not renormalized.
pub fn apply_capacity(decision: &mut RoutingDecision, groups: &[Range<usize>], capacity_factor: f64, policy: DropPolicy) -> Result<()> {
    if capacity_factor.is_nan() || capacity_factor <= 0.0 {
        return Err(Error::config("capacity factor must be positive"));
    }
    let e = decision.num_experts;
    let k = decision.top_k;
    for g in groups {
        let t = g.len();
        let cap = (capacity_factor * (k * t) as f64 / e as f64).ceil();
        let cap = if cap.is_finite() { cap as usize } else { usize::MAX };
        let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); e];
        for i in g.clone() {
            for slot in 0..k {
                let s = i * k + slot;
                if !decision.dropped[s] {
                    per_expert[decision.selected[s]].push(s);
                }
            }
        }
        for (ex, slots) in per_expert.iter_mut().enumerate() {
            if slots.len() <= cap {
                continue;
            }
            // Order by keep-priority, best first; slots are already in position order.
            if policy == DropPolicy::Probability {
                slots.sort_by(|&a, &b| {
                    let pa = decision.probs_of(a / k)[ex];
                    let pb = decision.probs_of(b / k)[ex];
                    pb.total_cmp(&pa).then(a.cmp(&b))
                });
            }
            for &s in &slots[cap..] {
                decision.dropped[s] = true;
            }
        }
    }
    Ok(())
}

/// Replace selections and drop flags with those of `frozen`, recomputing the
/// weights from the current logits.
pub fn freeze_into(decision: &mut RoutingDecision, frozen: &RoutingDecision) -> Result<()> {
    if frozen.selected.len() != decision.selected.len() || frozen.top_k != decision.top_k {
        return Err(Error::input("frozen routing does not match the batch"));
    }
    decision.selected.copy_from_slice(&frozen.selected);
    decision.dropped.copy_from_slice(&frozen.dropped);
    decision.recompute_weights();
    Ok(())
}
