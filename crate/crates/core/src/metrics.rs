//! Routing purity, expert utilization, validation loss and rank correlation.
//!
//! Purity and utilization are computed from integer selection counts, so
//! accumulating micro-batch by micro-batch gives exactly the same value as
//! counting the whole global batch at once.

use crate::datagen::PackedSequence;
use crate::error::{Error, Result};
use crate::model::{Model, RoutingDecision, RoutingPolicy, TokenBatch};

/// Kept-selection counts for one MoE layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingCounts {
    pub num_experts: usize,
    pub num_domains: usize,
    /// Kept selections per expert, all tokens.
    pub kept: Vec<u64>,
    /// Kept selections of domain-specific tokens, `E × D` row-major.
    pub td: Vec<u64>,
    pub slots: u64,
    pub dropped: u64,
}

impl RoutingCounts {
    pub fn new(num_experts: usize, num_domains: usize) -> Self {
        RoutingCounts {
            num_experts,
            num_domains,
            kept: vec![0; num_experts],
            td: vec![0; num_experts * num_domains],
            slots: 0,
            dropped: 0,
        }
    }

    /// Count tokens `range` of a decision.
    pub fn absorb_range(&mut self, dec: &RoutingDecision, range: std::ops::Range<usize>) -> Result<()> {
        if dec.num_experts != self.num_experts {
            return Err(Error::input("decision expert count differs from the accumulator"));
        }
        for i in range {
            let dom = dec.domains[i];
            if dom >= self.num_domains {
                return Err(Error::input(format!("domain {} out of range", dom)));
            }
            for (&e, &dropped) in dec.selected_of(i).iter().zip(dec.dropped_of(i)) {
                self.slots += 1;
                if dropped {
                    self.dropped += 1;
                    continue;
                }
                self.kept[e] += 1;
                if dec.in_td[i] {
                    self.td[e * self.num_domains + dom] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn absorb(&mut self, dec: &RoutingDecision) -> Result<()> {
        self.absorb_range(dec, 0..dec.num_tokens())
    }

    pub fn merge(&mut self, other: &RoutingCounts) {
        for (a, b) in self.kept.iter_mut().zip(&other.kept) {
            *a += b;
        }
        for (a, b) in self.td.iter_mut().zip(&other.td) {
            *a += b;
        }
        self.slots += other.slots;
        self.dropped += other.dropped;
    }

    /// `(1/E) Σ_i max_d f_i^d / f_i` over domain-specific selections; experts
    /// without any count `1/D`.
    pub fn purity(&self) -> Result<f64> {
        let d = self.num_domains;
        if self.td.iter().all(|&c| c == 0) {
            return Err(Error::UndefinedMetric("no domain-specific tokens were routed"));
        }
        let mut sum = 0.0;
        for e in 0..self.num_experts {
            let row = &self.td[e * d..(e + 1) * d];
            let total: u64 = row.iter().sum();
            sum += if total == 0 {
                1.0 / d as f64
            } else {
                *row.iter().max().expect("at least one domain") as f64 / total as f64
            };
        }
        Ok(sum / self.num_experts as f64)
    }

    /// `Σ_i min(f_i, 1/E)` with `f` the share of kept selections.
    pub fn utilization(&self) -> f64 {
        let total: u64 = self.kept.iter().sum();
        let e = self.num_experts as f64;
        if total == 0 {
            return 1.0 / e;
        }
        self.kept
            .iter()
            .map(|&c| (c as f64 / total as f64).min(1.0 / e))
            .sum()
    }

    pub fn drop_fraction(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.dropped as f64 / self.slots as f64
        }
    }
}

pub fn routing_purity(decisions: &[&RoutingDecision], num_domains: usize) -> Result<f64> {
    counts_of(decisions, num_domains)?.purity()
}

pub fn expert_utilization(decisions: &[&RoutingDecision]) -> Result<f64> {
    // Domains play no part in utilization; any positive count works.
    let d = decisions.iter().flat_map(|d| d.domains.iter()).max().map_or(1, |m| m + 1);
    Ok(counts_of(decisions, d)?.utilization())
}

fn counts_of(decisions: &[&RoutingDecision], num_domains: usize) -> Result<RoutingCounts> {
    let first = decisions.first().ok_or_else(|| Error::input("no routing decisions"))?;
    let mut c = RoutingCounts::new(first.num_experts, num_domains);
    for d in decisions {
        c.absorb(d)?;
    }
    Ok(c)
}

/// Metrics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub drop_fraction: f64,
    /// `(layer, utilization, purity)`; purity is `None` when undefined.
    pub layers: Vec<(usize, f64, Option<f64>)>,
    pub validation_loss: Option<f64>,
}

/// Mean held-out cross-entropy, evaluated in chunks of `scope` sequences so
/// that scope-dependent routing sees the same layout as in training.
pub fn validation_loss(
    model: &Model,
    held_out: &[PackedSequence],
    scope: usize,
    micro_batch: usize,
    td_membership: &[bool],
    policy: &RoutingPolicy,
) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::config("held-out set is empty"));
    }
    let chunk = scope * 16usize.div_ceil(scope);
    let mut total = 0.0;
    let mut count = 0usize;
    for part in held_out.chunks(chunk) {
        let batch = TokenBatch::from_sequences(part, scope, micro_batch.min(scope), td_membership)?;
        let (loss, n) = model.evaluate(&batch, policy)?;
        total += loss * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho (average ranks for ties) and Kendall's tau-b.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::input("rank correlation needs two lists of equal length >= 3"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::input("rank correlation needs finite values"));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::UndefinedMetric("rank correlation of a constant list"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let (a, b) = (rx[i] - mx, ry[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    let rho = sxy / (sxx * syy).sqrt();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                ties_x += 1;
            }
            if dy == 0 {
                ties_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let n0 = (x.len() * (x.len() - 1) / 2) as i64;
    let tau = (concordant - discordant) as f64 / (((n0 - ties_x) * (n0 - ties_y)) as f64).sqrt();
    Ok((rho, tau))
}
