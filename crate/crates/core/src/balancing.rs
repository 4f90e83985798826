//! Load-balancing methods and the statistics they consume.
//!
//! * load-balancing loss (LBL), plain and scope-aggregated
//! * balanced assignment (BA) via an epsilon-scaling auction
//! * Sinkhorn normalization (SH) for selection
//! * expert bias (EB) sign updates

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// No balancing at all.
    None,
    Lbl,
    Ba,
    Sh,
    Eb,
}

impl Method {
    pub fn has_strength(self) -> bool {
        matches!(self, Method::Lbl | Method::Eb)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Lbl => "lbl",
            Method::Ba => "ba",
            Method::Sh => "sh",
            Method::Eb => "eb",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Method::None),
            "lbl" => Ok(Method::Lbl),
            "ba" => Ok(Method::Ba),
            "sh" => Ok(Method::Sh),
            "eb" => Ok(Method::Eb),
            other => Err(Error::config(format!("unknown balancing method '{}'", other))),
        }
    }
}

/// Whether balanced assignment maximizes or minimizes the total routing score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Maximize,
    Minimize,
}

/// Per-expert load statistics over one set of tokens.
///
/// `counts` are expert selections (k per token), `prob_sums` the summed
/// full-softmax router probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceStats {
    pub counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    pub tokens: usize,
    pub top_k: usize,
}

impl BalanceStats {
    pub fn new(num_experts: usize, top_k: usize) -> Self {
        BalanceStats {
            counts: vec![0; num_experts],
            prob_sums: vec![0.0; num_experts],
            tokens: 0,
            top_k,
        }
    }

    /// Build from explicit fractions; used where the caller already has f and P.
    pub fn from_fractions(f: &[f64], p: &[f64], tokens: usize, top_k: usize) -> Self {
        let scale = (tokens * top_k) as f64;
        BalanceStats {
            counts: f.iter().map(|x| (x * scale).round() as u64).collect(),
            prob_sums: p.iter().map(|x| x * tokens as f64).collect(),
            tokens,
            top_k,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Token fractions `f_i = count_i / (k T)`.
    pub fn fractions(&self) -> Vec<f64> {
        let denom = (self.tokens * self.top_k) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }

    /// Mean router probabilities `P_i`.
    pub fn mean_probs(&self) -> Vec<f64> {
        let t = self.tokens as f64;
        self.prob_sums.iter().map(|&p| p / t).collect()
    }

    pub fn merge(&mut self, other: &BalanceStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        self.tokens += other.tokens;
    }
}

/// Value of an auxiliary loss plus its gradient with respect to each `P_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LblValue {
    pub loss: f64,
    pub grad_mean_probs: Vec<f64>,
}

/// `E · Σ f_i P_i`. `f` is treated as a constant.
pub fn lbl_loss(stats: &BalanceStats) -> LblValue {
    let e = stats.num_experts() as f64;
    let f = stats.fractions();
    let p = stats.mean_probs();
    let loss = e * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    LblValue {
        loss,
        grad_mean_probs: f.iter().map(|x| e * x).collect(),
    }
}

/// Scope-aggregated LBL over the micro-batches of one scope.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopedLbl {
    pub loss: f64,
    /// Gradient with respect to each micro-batch's `P_i`.
    pub grad_mean_probs: Vec<Vec<f64>>,
}

/// `f` is pooled over all micro-batches, each micro-batch pairs it with its own
/// local `P`, and the per-micro-batch losses are averaged.
pub fn scoped_lbl(micro: &[BalanceStats]) -> Result<ScopedLbl> {
    let first = micro.first().ok_or_else(|| Error::input("scoped LBL needs at least one micro-batch"))?;
    let mut pooled = BalanceStats::new(first.num_experts(), first.top_k);
    for s in micro {
        pooled.merge(s);
    }
    let e = first.num_experts() as f64;
    let f = pooled.fractions();
    let n = micro.len() as f64;
    let mut loss = 0.0;
    for s in micro {
        let p = s.mean_probs();
        loss += e * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    }
    let grad: Vec<f64> = f.iter().map(|x| e * x / n).collect();
    Ok(ScopedLbl {
        loss: loss / n,
        grad_mean_probs: vec![grad; micro.len()],
    })
}

/// `b_i ← b_i + λ sign(1/E − f_i)` with `sign(0) = 0`.
pub fn expert_bias_update(bias: &mut [f64], f: &[f64], strength: f64) {
    let target = 1.0 / bias.len() as f64;
    for (b, &fi) in bias.iter_mut().zip(f) {
        let err = target - fi;
        let s = if err > 0.0 {
            1.0
        } else if err < 0.0 {
            -1.0
        } else {
            0.0
        };
        *b += strength * s;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOutput {
    pub scores: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternate row (sum 1) and column (sum T/E) normalization of `exp(logits)`,
/// carried out in the log domain. Stops after `iters` rounds or once every
/// column sum is within `tol · T/E` of its target after a row step. The
/// returned matrix is the last row-normalized iterate.
pub fn sinkhorn_normalize(logits: &Matrix, iters: usize, tol: f64) -> Result<SinkhornOutput> {
    if iters == 0 {
        return Err(Error::input("sinkhorn needs at least one iteration"));
    }
    let (t, e) = (logits.rows(), logits.cols());
    if t == 0 || e == 0 {
        return Err(Error::input("empty logit matrix"));
    }
    if logits.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Numeric("sinkhorn input contains NaN or +inf".into()));
    }
    let target = t as f64 / e as f64;
    let log_target = target.ln();
    let mut col_pot = vec![0.0; e];
    let mut out = Matrix::zeros(t, e);
    let mut buf = vec![0.0; e];
    let mut col_buf = vec![0.0; t];
    let mut row_lse = vec![0.0; t];
    for it in 1..=iters {
        // row step
        for r in 0..t {
            let z = logits.row(r);
            for j in 0..e {
                buf[j] = z[j] + col_pot[j];
            }
            let lse = log_sum_exp(&buf);
            row_lse[r] = lse;
            let row = out.row_mut(r);
            for j in 0..e {
                row[j] = (buf[j] - lse).exp();
            }
        }
        if !out.is_finite() {
            return Err(Error::Numeric(format!("non-finite value in sinkhorn iteration {}", it)));
        }
        let mut worst: f64 = 0.0;
        for j in 0..e {
            let s: f64 = (0..t).map(|r| out.get(r, j)).sum();
            worst = worst.max((s - target).abs());
        }
        if worst < tol * target || it == iters {
            return Ok(SinkhornOutput {
                scores: out,
                iterations: it,
                converged: worst < tol * target,
            });
        }
        // column step: pick b_j with Σ_r exp(z_rj - lse_r + b_j) = T/E
        for j in 0..e {
            for r in 0..t {
                col_buf[r] = logits.get(r, j) - row_lse[r];
            }
            let lse = log_sum_exp(&col_buf);
            if lse.is_finite() {
                col_pot[j] = log_target - lse;
            }
        }
    }
    unreachable!("loop returns on the final iteration")
}

/// Knobs for the epsilon-scaling auction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuctionOptions {
    /// First epsilon as a fraction of the score range.
    pub start_fraction: f64,
    /// Epsilon is divided by this factor between phases.
    pub scaling_factor: f64,
    /// Final epsilon times the token count, as a fraction of the score range;
    /// bounds the gap to the optimal total score.
    pub tolerance: f64,
    /// Bid budget per phase, in multiples of the token count.
    pub max_bids_per_token: usize,
    pub objective: Objective,
}

impl Default for AuctionOptions {
    fn default() -> Self {
        AuctionOptions {
            start_fraction: 0.25,
            scaling_factor: 5.0,
            tolerance: 1e-7,
            max_bids_per_token: 100_000,
            objective: Objective::Maximize,
        }
    }
}

/// Give every token `k` distinct experts with exactly `T/E` tokens per expert
/// in each of `k` sequential rounds. Returns a `T × k` row-major list.
pub fn balanced_assignment(scores: &Matrix, k: usize, opts: &AuctionOptions) -> Result<Vec<usize>> {
    let (t, e) = (scores.rows(), scores.cols());
    if e == 0 || t == 0 {
        return Err(Error::input("empty score matrix"));
    }
    if t % e != 0 {
        return Err(Error::input(format!("{} experts do not divide {} tokens", e, t)));
    }
    if k == 0 || k > e {
        return Err(Error::input(format!("k = {} out of range for {} experts", k, e)));
    }
    if scores.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::input("scores contain NaN or +inf"));
    }
    let sign = match opts.objective {
        Objective::Maximize => 1.0,
        Objective::Minimize => -1.0,
    };
    let mut work = Matrix::zeros(t, e);
    for (w, s) in work.data_mut().iter_mut().zip(scores.data()) {
        *w = if s.is_finite() { sign * s } else { f64::NEG_INFINITY };
    }
    let mut out = vec![0usize; t * k];
    for round in 0..k {
        let assign = auction_round(&work, opts).ok_or(Error::Solver { round })?;
        for (tok, &ex) in assign.iter().enumerate() {
            out[tok * k + round] = ex;
            work.set(tok, ex, f64::NEG_INFINITY);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Price(f64);

impl Eq for Price {}

impl PartialOrd for Price {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Price {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

const UNOWNED: usize = usize::MAX;

/// One balanced round: each expert owns `T/E` slots, tokens bid for the
/// cheapest slot of their best expert. Returns `None` if the bid budget runs out.
fn auction_round(a: &Matrix, opts: &AuctionOptions) -> Option<Vec<usize>> {
    let (t, e) = (a.rows(), a.cols());
    let cap = t / e;
    let finite = a.data().iter().copied().filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
    if lo > hi {
        return None;
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    // stand-in gap when a token has a single reachable slot
    let no_rival_gap = range + 1.0;

    // slot s of expert j has id j * cap + s
    let mut price = vec![0.0f64; t];
    let mut owner = vec![UNOWNED; t];
    let mut slots: Vec<BTreeSet<(Price, usize)>> = (0..e)
        .map(|j| (0..cap).map(|s| (Price(0.0), j * cap + s)).collect())
        .collect();
    let mut assigned = vec![UNOWNED; t];

    let eps_final = opts.tolerance * range / (t as f64 + 1.0);
    let mut eps = (opts.start_fraction * range).max(eps_final);
    let budget = opts.max_bids_per_token.saturating_mul(t);
    loop {
        owner.iter_mut().for_each(|o| *o = UNOWNED);
        assigned.iter_mut().for_each(|x| *x = UNOWNED);
        let mut queue: VecDeque<usize> = (0..t).collect();
        let mut bids = 0usize;
        while let Some(tok) = queue.pop_front() {
            bids += 1;
            if bids > budget {
                return None;
            }
            let row = a.row(tok);
            let mut best: Option<(usize, f64)> = None;
            let mut second = f64::NEG_INFINITY;
            for j in 0..e {
                if row[j] == f64::NEG_INFINITY {
                    continue;
                }
                let cheapest = slots[j].first().expect("cap > 0").0 .0;
                let v = row[j] - cheapest;
                match best {
                    Some((_, bv)) if v <= bv => second = second.max(v),
                    Some((_, bv)) => {
                        second = second.max(bv);
                        best = Some((j, v));
                    }
                    None => best = Some((j, v)),
                }
            }
            let (j, v1) = best?;
            if let Some(&(p2, _)) = slots[j].iter().nth(1) {
                second = second.max(row[j] - p2.0);
            }
            let gap = if second == f64::NEG_INFINITY { no_rival_gap } else { v1 - second };
            let (Price(old), slot) = slots[j].pop_first().expect("cap > 0");
            let new_price = old + gap + eps;
            price[slot] = new_price;
            slots[j].insert((Price(new_price), slot));
            let prev = owner[slot];
            owner[slot] = tok;
            assigned[tok] = j;
            if prev != UNOWNED {
                assigned[prev] = UNOWNED;
                queue.push_back(prev);
            }
        }
        if eps <= eps_final {
            return Some(assigned);
        }
        eps = (eps / opts.scaling_factor).max(eps_final);
    }
}
