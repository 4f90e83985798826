//! Property tests for routing, balancing, metrics and the token split.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mrtb_core::balancing::{balanced_assignment, lbl_loss, sinkhorn_normalize, AuctionOptions, BalanceStats};
use mrtb_core::datagen::{generate_synthetic_mix, pack_sequences, DocLength, SyntheticSpec, TokenClass};
use mrtb_core::metrics::{expert_utilization, routing_purity};
use mrtb_core::model::{apply_capacity, select, DropPolicy, RoutingDecision, RoutingPolicy, SelectionMode, TokenBatch};
use mrtb_core::numerics::Matrix;
use mrtb_core::splitter::{
    derive_token_split, train_token_classifier, ClassifierConfig, DomainCounts, RatioWeighting, SplitTarget,
};

/// A batch of `n` tokens in one micro-batch and one scope group.
fn flat_batch(domains: Vec<usize>, in_td: Vec<bool>) -> TokenBatch {
    let n = domains.len();
    TokenBatch {
        tokens: vec![0; n],
        targets: vec![u32::MAX; n],
        positions: (0..n).collect(),
        domains,
        in_td,
        seq_len: n,
        micro_batches: vec![0..n],
        groups: vec![0..1],
    }
}

fn logits_strategy(max_rows: usize, e: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows).prop_flat_map(move |n| {
        prop::collection::vec(-4.0f64..4.0, n * e).prop_map(move |v| Matrix::from_vec(n, e, v).unwrap())
    })
}

fn route_plain(logits: &Matrix, bias: &[f64], k: usize, policy: &RoutingPolicy) -> RoutingDecision {
    let n = logits.rows();
    select(logits.clone(), (0..n as u32).collect(), &flat_batch(vec![0; n], vec![false; n]), bias, k, policy).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_are_softmax_of_selected_raw_logits(
        logits in logits_strategy(24, 6),
        bias in prop::collection::vec(-3.0f64..3.0, 6),
        k in 1usize..=3,
    ) {
        let policy = RoutingPolicy { selection: SelectionMode::ExpertBias, ..Default::default() };
        let dec = route_plain(&logits, &bias, k, &policy);
        for i in 0..dec.num_tokens() {
            let sel = dec.selected_of(i);
            let w = dec.weights_of(i);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let z: Vec<f64> = sel.iter().map(|&x| logits.get(i, x)).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for (wj, zj) in w.iter().zip(&z) {
                prop_assert!((wj - (zj - m).exp() / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expert_bias_never_changes_weights_of_a_fixed_selection(
        logits in logits_strategy(16, 4),
        b1 in prop::collection::vec(-3.0f64..3.0, 4),
        b2 in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let policy = RoutingPolicy { selection: SelectionMode::ExpertBias, ..Default::default() };
        let d1 = route_plain(&logits, &b1, 2, &policy);
        let d2 = route_plain(&logits, &b2, 2, &policy);
        for i in 0..d1.num_tokens() {
            let mut s1: Vec<(usize, f64)> = d1.selected_of(i).iter().copied().zip(d1.weights_of(i).iter().copied()).collect();
            let mut s2: Vec<(usize, f64)> = d2.selected_of(i).iter().copied().zip(d2.weights_of(i).iter().copied()).collect();
            s1.sort_by_key(|p| p.0);
            s2.sort_by_key(|p| p.0);
            if s1.iter().map(|p| p.0).eq(s2.iter().map(|p| p.0)) {
                for (a, b) in s1.iter().zip(&s2) {
                    prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
                }
            }
        }
    }

    #[test]
    fn reference_mask_keeps_domain_tokens_in_their_block(
        logits in logits_strategy(32, 8),
        seed in any::<u64>(),
        mode in 0usize..3,
    ) {
        use rand::Rng;
        let n = logits.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domains: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let in_td: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let selection = match mode {
            0 => SelectionMode::TopK,
            1 => SelectionMode::Sinkhorn { iters: 50, tol: 1e-3 },
            _ => SelectionMode::ExpertBias,
        };
        let policy = RoutingPolicy { selection, reference_mask: true, ..Default::default() };
        let batch = flat_batch(domains.clone(), in_td.clone());
        let dec = select(logits, (0..n as u32).collect(), &batch, &[0.0; 8], 2, &policy).unwrap();
        for i in 0..n {
            if in_td[i] {
                for &x in dec.selected_of(i) {
                    prop_assert_eq!(x / 2, domains[i]);
                }
            }
        }
    }

    #[test]
    fn lower_capacity_never_drops_fewer_slots(
        logits in logits_strategy(40, 4),
        c1 in 0.1f64..3.0,
        c2 in 0.1f64..3.0,
        position in any::<bool>(),
    ) {
        let (hi, lo) = if c1 >= c2 { (c1, c2) } else { (c2, c1) };
        let drop_policy = if position { DropPolicy::Position } else { DropPolicy::Probability };
        let base = route_plain(&logits, &[0.0; 4], 2, &RoutingPolicy::default());
        let groups = vec![0..base.num_tokens()];
        let count = |c: f64| {
            let mut d = base.clone();
            apply_capacity(&mut d, &groups, c, drop_policy).unwrap();
            d.dropped.iter().filter(|x| **x).count()
        };
        prop_assert!(count(lo) >= count(hi));
    }

    #[test]
    fn lbl_is_at_least_one_when_f_equals_p(counts in prop::collection::vec(0u64..50, 2..12)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        // k = 1 keeps f = counts / T and P = counts / T identical.
        let t: u64 = counts.iter().sum();
        let stats = BalanceStats {
            prob_sums: counts.iter().map(|&c| c as f64).collect(),
            counts: counts.clone(),
            tokens: t as usize,
            top_k: 1,
        };
        let loss = lbl_loss(&stats).loss;
        let uniform = counts.iter().all(|&c| c == counts[0]);
        if uniform {
            prop_assert!((loss - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(loss > 1.0);
        }
    }

    #[test]
    fn balanced_assignment_counts_are_exact(
        e in 1usize..6,
        per in 1usize..10,
        k_raw in 1usize..4,
        seed in any::<u64>(),
    ) {
        let k = k_raw.min(e);
        let t = e * per;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = Matrix::randn(t, e, 1.0, &mut rng);
        let got = balanced_assignment(&scores, k, &AuctionOptions::default()).unwrap();
        let mut counts = vec![0usize; e];
        for tok in 0..t {
            let row = &got[tok * k..(tok + 1) * k];
            let mut uniq = row.to_vec();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
            for &x in row {
                counts[x] += 1;
            }
        }
        prop_assert!(counts.iter().all(|&c| c == k * per));
    }

    #[test]
    fn sinkhorn_columns_balance_after_convergence(logits in logits_strategy(64, 4)) {
        let out = sinkhorn_normalize(&logits, 500, 1e-4).unwrap();
        let target = logits.rows() as f64 / 4.0;
        if out.converged {
            for j in 0..4 {
                let s: f64 = (0..logits.rows()).map(|r| out.scores.get(r, j)).sum();
                prop_assert!((s - target).abs() < 1e-4 * target);
            }
        }
        for r in 0..logits.rows() {
            prop_assert!((out.scores.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_invariant_under_relabeling(
        logits in logits_strategy(48, 6),
        seed in any::<u64>(),
        expert_perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        domain_perm in Just((0..3).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        use rand::Rng;
        let n = logits.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dec = route_plain(&logits, &[0.0; 6], 2, &RoutingPolicy::default());
        dec.domains = (0..n).map(|_| rng.gen_range(0..3)).collect();
        dec.in_td = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        dec.dropped = (0..2 * n).map(|_| rng.gen_bool(0.2)).collect();
        let mut moved = dec.clone();
        moved.selected = dec.selected.iter().map(|&x| expert_perm[x]).collect();
        moved.domains = dec.domains.iter().map(|&d| domain_perm[d]).collect();
        let u = expert_utilization(&[&dec]).unwrap();
        prop_assert!((u - expert_utilization(&[&moved]).unwrap()).abs() < 1e-12);
        if let Ok(p) = routing_purity(&[&dec], 3) {
            prop_assert!((p - routing_purity(&[&moved], 3).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_utilization_means_load_within_one_selection(logits in logits_strategy(40, 4), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dec = route_plain(&logits, &[0.0; 4], 2, &RoutingPolicy::default());
        dec.dropped = (0..dec.dropped.len()).map(|_| rng.gen_bool(0.1)).collect();
        let kept: Vec<usize> = dec.selected.iter().zip(&dec.dropped).filter(|(_, d)| !**d).map(|(s, _)| *s).collect();
        prop_assume!(!kept.is_empty());
        let total = kept.len() as f64;
        let max_dev = (0..4)
            .map(|x| (kept.iter().filter(|&&s| s == x).count() as f64 / total - 0.25).abs())
            .fold(0.0, f64::max);
        let u = expert_utilization(&[&dec]).unwrap();
        if u == 1.0 {
            prop_assert!(max_dev <= 1.0 / total + 1e-12);
        }
        if kept.len() % 4 == 0 {
            prop_assert_eq!(u == 1.0, max_dev < 1e-12);
        }
    }
}

struct SplitFixture {
    classifier: mrtb_core::splitter::TokenClassifier,
    held_out: DomainCounts,
    spec: SyntheticSpec,
}

fn split_fixture() -> &'static SplitFixture {
    static CELL: std::sync::OnceLock<SplitFixture> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SyntheticSpec {
            domains: 4,
            tokens_per_domain: 16,
            generic_tokens: 16,
            generic_rate: 0.3,
            doc_length: DocLength::Uniform { min: 64, max: 256 },
            tokens_per_domain_total: 16_384,
            branching: 3,
            seed: 17,
        };
        let corpus = generate_synthetic_mix(&spec).unwrap();
        let seqs = pack_sequences(&corpus, 64).unwrap();
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, s) in seqs.into_iter().enumerate() {
            if i % 5 == 0 {
                held.push(s);
            } else {
                train.push(s);
            }
        }
        let v = spec.vocab_size();
        let classifier = train_token_classifier(&train, &held, v, 4, &ClassifierConfig::default(), 3).unwrap();
        let held_out = DomainCounts::from_sequences(&held, v, 4).unwrap();
        SplitFixture { classifier, held_out, spec }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_threshold_never_grows_td(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let f = split_fixture();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let split = |t: f64| derive_token_split(&f.classifier, &f.held_out, SplitTarget::Threshold(t), RatioWeighting::Occurrence).unwrap();
        let (s_lo, s_hi) = (split(lo), split(hi));
        prop_assert!(s_hi.split_ratio <= s_lo.split_ratio);
        for (x, y) in s_hi.assignment.iter().zip(&s_lo.assignment) {
            if x.is_some() {
                prop_assert_eq!(x, y);
            }
        }
    }
}

#[test]
fn split_at_true_ratio_recovers_domain_tokens() {
    let f = split_fixture();
    let offset = f.spec.generic_offset();
    let total: u64 = (0..f.spec.vocab_size()).map(|t| f.held_out.total(t)).sum();
    let domain_occ: u64 = (0..offset).map(|t| f.held_out.total(t)).sum();
    let ratio = domain_occ as f64 / total as f64;
    let split = derive_token_split(&f.classifier, &f.held_out, SplitTarget::Ratio(ratio), RatioWeighting::Occurrence).unwrap();
    let truth = generate_synthetic_mix(&f.spec).unwrap().vocab_domain_truth.unwrap();
    let members: Vec<(usize, usize)> = split.assignment.iter().enumerate().filter_map(|(t, a)| a.map(|d| (t, d))).collect();
    let correct = members.iter().filter(|(t, d)| truth[*t] == TokenClass::Domain(*d)).count();
    assert!(!members.is_empty());
    assert!(
        correct as f64 >= 0.95 * members.len() as f64,
        "{correct} of {} T_D members are correctly labelled domain tokens",
        members.len()
    );
}
