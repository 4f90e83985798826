//! Per-token domain classifier and the confidence-based split of the
//! vocabulary into domain-specific (T_D) and generic (T_G) tokens.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{PackedSequence, TokenClass};
use crate::error::{Error, Result};
use crate::numerics::{gemm, log_sum_exp, rng_for, softmax_in_place, Matrix, Stream};
use crate::optim::{AdamW, OptimConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub ffn: usize,
    pub epochs: usize,
    /// Token occurrences per optimizer step.
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 32,
            ffn: 64,
            epochs: 2,
            batch_size: 128,
            optim: OptimConfig {
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.01,
                warmup: 50,
            },
        }
    }
}

/// Context-free classifier: embedding, one ReLU hidden layer, domain logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenClassifier {
    pub emb: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub trained: bool,
    /// Held-out per-occurrence accuracy after training.
    pub held_out_accuracy: f64,
}

/// Occurrence counts per (token, domain), `V × D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCounts {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub counts: Vec<u64>,
}

impl DomainCounts {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a PackedSequence>, vocab_size: usize, num_domains: usize) -> Result<Self> {
        let mut counts = vec![0u64; vocab_size * num_domains];
        for s in seqs {
            if s.domain >= num_domains {
                return Err(Error::input(format!("domain {} out of range", s.domain)));
            }
            for &t in &s.tokens {
                let t = t as usize;
                if t >= vocab_size {
                    return Err(Error::input(format!("token {} outside vocabulary", t)));
                }
                counts[t * num_domains + s.domain] += 1;
            }
        }
        Ok(DomainCounts {
            vocab_size,
            num_domains,
            counts,
        })
    }

    pub fn row(&self, token: usize) -> &[u64] {
        &self.counts[token * self.num_domains..(token + 1) * self.num_domains]
    }

    pub fn total(&self, token: usize) -> u64 {
        self.row(token).iter().sum()
    }
}

struct Grads {
    emb: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

impl TokenClassifier {
    fn init(vocab: usize, domains: usize, cfg: &ClassifierConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Classifier);
        let (h, f) = (cfg.hidden, cfg.ffn);
        TokenClassifier {
            emb: Matrix::randn(vocab, h, 1.0 / (h as f64).sqrt(), &mut rng),
            w1: Matrix::randn(h, f, 1.0 / (h as f64).sqrt(), &mut rng),
            b1: Matrix::zeros(1, f),
            w2: Matrix::randn(f, domains, 1.0 / (f as f64).sqrt(), &mut rng),
            b2: Matrix::zeros(1, domains),
            trained: false,
            held_out_accuracy: 0.0,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.w2.cols()
    }

    fn hidden(&self, tokens: &[usize]) -> (Matrix, Matrix) {
        let x = self.emb.gather_rows(tokens);
        let mut a = Matrix::zeros(tokens.len(), self.w1.cols());
        for r in 0..a.rows() {
            a.row_mut(r).copy_from_slice(self.b1.row(0));
        }
        gemm(1.0, &x, false, &self.w1, false, 1.0, &mut a);
        (x, a)
    }

    fn logits(&self, a: &Matrix) -> (Matrix, Matrix) {
        let mut h = a.clone();
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = Matrix::zeros(a.rows(), self.w2.cols());
        for r in 0..z.rows() {
            z.row_mut(r).copy_from_slice(self.b2.row(0));
        }
        gemm(1.0, &h, false, &self.w2, false, 1.0, &mut z);
        (h, z)
    }

    /// Class probabilities for each token id.
    pub fn predict(&self, tokens: &[usize]) -> Matrix {
        let (_, a) = self.hidden(tokens);
        let (_, mut z) = self.logits(&a);
        for r in 0..z.rows() {
            softmax_in_place(z.row_mut(r));
        }
        z
    }

    /// Loss over aggregated counts (`counts[u][d]` occurrences of token `tokens[u]`
    /// with label `d`) normalized by `total`, with gradients.
    fn loss_and_grads(&self, tokens: &[usize], counts: &[Vec<u64>], total: f64) -> (f64, Grads) {
        let (x, a) = self.hidden(tokens);
        let (h, z) = self.logits(&a);
        let mut loss = 0.0;
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        for (u, c) in counts.iter().enumerate() {
            let lse = log_sum_exp(z.row(u));
            let n: u64 = c.iter().sum();
            let zr = z.row(u);
            let dr = dz.row_mut(u);
            for d in 0..c.len() {
                let p = (zr[d] - lse).exp();
                loss += c[d] as f64 * (lse - zr[d]);
                dr[d] = (n as f64 * p - c[d] as f64) / total;
            }
        }
        let mut g = Grads {
            emb: Matrix::zeros(self.emb.rows(), self.emb.cols()),
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        };
        gemm(1.0, &h, true, &dz, false, 0.0, &mut g.w2);
        for r in 0..dz.rows() {
            for (o, v) in g.b2.data_mut().iter_mut().zip(dz.row(r)) {
                *o += v;
            }
        }
        let mut dh = Matrix::zeros(h.rows(), h.cols());
        gemm(1.0, &dz, false, &self.w2, true, 0.0, &mut dh);
        for (dv, &av) in dh.data_mut().iter_mut().zip(a.data()) {
            if av <= 0.0 {
                *dv = 0.0;
            }
        }
        for r in 0..dh.rows() {
            for (o, v) in g.b1.data_mut().iter_mut().zip(dh.row(r)) {
                *o += v;
            }
        }
        gemm(1.0, &x, true, &dh, false, 0.0, &mut g.w1);
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        gemm(1.0, &dh, false, &self.w1, true, 0.0, &mut dx);
        for (u, &t) in tokens.iter().enumerate() {
            for (o, v) in g.emb.row_mut(t).iter_mut().zip(dx.row(u)) {
                *o += v;
            }
        }
        (loss / total, g)
    }

    /// Fraction of held-out occurrences whose domain is the predicted argmax.
    pub fn accuracy(&self, held_out: &DomainCounts) -> f64 {
        let tokens: Vec<usize> = (0..held_out.vocab_size).filter(|&t| held_out.total(t) > 0).collect();
        if tokens.is_empty() {
            return 0.0;
        }
        let p = self.predict(&tokens);
        let mut correct = 0u64;
        let mut total = 0u64;
        for (u, &t) in tokens.iter().enumerate() {
            correct += held_out.row(t)[argmax(p.row(u))];
            total += held_out.total(t);
        }
        correct as f64 / total as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Train on every token occurrence of `train`, labelled by its sequence's domain.
pub fn train_token_classifier(
    train: &[PackedSequence],
    held_out: &[PackedSequence],
    vocab_size: usize,
    num_domains: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<TokenClassifier> {
    if num_domains < 2 {
        return Err(Error::config("the token classifier needs at least two domains"));
    }
    if held_out.is_empty() {
        return Err(Error::config("the token classifier needs a held-out split"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.hidden == 0 || cfg.ffn == 0 {
        return Err(Error::config("classifier sizes, epochs and batch size must be positive"));
    }
    let mut occ: Vec<(u32, u32)> = Vec::new();
    for s in train {
        if s.domain >= num_domains {
            return Err(Error::input(format!("domain {} out of range", s.domain)));
        }
        occ.extend(s.tokens.iter().map(|&t| (t, s.domain as u32)));
    }
    if occ.is_empty() {
        return Err(Error::config("no training occurrences for the classifier"));
    }
    let mut model = TokenClassifier::init(vocab_size, num_domains, cfg, seed);
    let steps_per_epoch = occ.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let shapes = [
        model.emb.data().len(),
        model.w1.data().len(),
        model.b1.data().len(),
        model.w2.data().len(),
        model.b2.data().len(),
    ];
    let mut opt = AdamW::new(cfg.optim, Schedule::LinearDecay { total_steps }, &shapes);
    let mut rng = rng_for(seed, Stream::Classifier);
    let mut local = vec![u32::MAX; vocab_size];
    for _ in 0..cfg.epochs {
        occ.shuffle(&mut rng);
        for chunk in occ.chunks(cfg.batch_size) {
            let step = opt.steps_taken();
            let mut tokens = Vec::new();
            let mut counts: Vec<Vec<u64>> = Vec::new();
            for &(t, d) in chunk {
                let t = t as usize;
                if t >= vocab_size {
                    return Err(Error::input(format!("token {} outside vocabulary", t)));
                }
                if local[t] == u32::MAX {
                    local[t] = tokens.len() as u32;
                    tokens.push(t);
                    counts.push(vec![0; num_domains]);
                }
                counts[local[t] as usize][d as usize] += 1;
            }
            for &t in &tokens {
                local[t] = u32::MAX;
            }
            let (loss, g) = model.loss_and_grads(&tokens, &counts, chunk.len() as f64);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: "classifier loss is not finite".into(),
                });
            }
            let TokenClassifier { emb, w1, b1, w2, b2, .. } = &mut model;
            opt.update(
                &mut [emb, w1, b1, w2, b2],
                &[&g.emb, &g.w1, &g.b1, &g.w2, &g.b2],
                &[true, true, false, true, false],
            );
        }
    }
    model.trained = true;
    let counts = DomainCounts::from_sequences(held_out, vocab_size, num_domains)?;
    model.held_out_accuracy = model.accuracy(&counts);
    log::info!(
        "token classifier: {} steps, held-out accuracy {:.4}",
        total_steps,
        model.held_out_accuracy
    );
    Ok(model)
}

/// How split ratios are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioWeighting {
    /// Share of held-out token occurrences.
    #[default]
    Occurrence,
    /// Share of token types seen in the held-out set.
    Type,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitTarget {
    Threshold(f64),
    Ratio(f64),
}

/// Assignment of every vocabulary entry to T_D (with a domain) or T_G.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSplit {
    /// `Some(domain)` for T_D members.
    pub assignment: Vec<Option<usize>>,
    pub mean_confidence: Vec<f64>,
    pub occurrences: Vec<u64>,
    pub split_ratio: f64,
    pub threshold: f64,
}

impl TokenSplit {
    pub fn vocab_size(&self) -> usize {
        self.assignment.len()
    }

    pub fn membership(&self) -> Vec<bool> {
        self.assignment.iter().map(|a| a.is_some()).collect()
    }

    pub fn domain_specific_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    /// No token is domain-specific.
    pub fn empty(vocab_size: usize) -> Self {
        TokenSplit {
            assignment: vec![None; vocab_size],
            mean_confidence: vec![0.0; vocab_size],
            occurrences: vec![0; vocab_size],
            split_ratio: 0.0,
            threshold: f64::INFINITY,
        }
    }

    /// Split taken from generator ground truth.
    pub fn from_truth(truth: &[TokenClass], held_out: &DomainCounts, weighting: RatioWeighting) -> Self {
        let assignment: Vec<Option<usize>> = truth
            .iter()
            .map(|c| match c {
                TokenClass::Domain(d) => Some(*d),
                TokenClass::Generic => None,
            })
            .collect();
        let occurrences: Vec<u64> = (0..truth.len()).map(|t| held_out.total(t)).collect();
        let split_ratio = ratio(&assignment, &occurrences, weighting);
        TokenSplit {
            mean_confidence: assignment.iter().map(|a| if a.is_some() { 1.0 } else { 0.0 }).collect(),
            assignment,
            occurrences,
            split_ratio,
            threshold: 1.0,
        }
    }

    /// Every token domain-specific, labelled with the classifier's prediction:
    /// the naive all-tokens routing rule.
    pub fn all_domain_specific(mut self, classifier: &TokenClassifier) -> Self {
        let tokens: Vec<usize> = (0..self.vocab_size()).collect();
        let probs = classifier.predict(&tokens);
        for (t, a) in self.assignment.iter_mut().enumerate() {
            if a.is_none() {
                *a = Some(argmax(probs.row(t)));
            }
        }
        self.split_ratio = 1.0;
        self.threshold = f64::NEG_INFINITY;
        self
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "token_id\tassignment\tmean_confidence\toccurrences")?;
        for t in 0..self.vocab_size() {
            let a = match self.assignment[t] {
                Some(d) => format!("D{}", d),
                None => "G".to_string(),
            };
            writeln!(w, "{}\t{}\t{}\t{}", t, a, self.mean_confidence[t], self.occurrences[t])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the TSV back; the ratio is recomputed with `weighting`.
    pub fn read_tsv(path: &Path, weighting: RatioWeighting) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut split = TokenSplit::empty(0);
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if n == 0 {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("malformed split row {}: {}", n + 1, line));
            if cols.len() != 4 || cols[0].parse::<usize>().ok() != Some(n - 1) {
                return Err(bad());
            }
            let a = match cols[1] {
                "G" => None,
                s => Some(s.strip_prefix('D').and_then(|d| d.parse().ok()).ok_or_else(bad)?),
            };
            split.assignment.push(a);
            split.mean_confidence.push(cols[2].parse().map_err(|_| bad())?);
            split.occurrences.push(cols[3].parse().map_err(|_| bad())?);
        }
        split.split_ratio = ratio(&split.assignment, &split.occurrences, weighting);
        Ok(split)
    }
}

fn ratio(assignment: &[Option<usize>], occurrences: &[u64], weighting: RatioWeighting) -> f64 {
    let w = |t: usize| match weighting {
        RatioWeighting::Occurrence => occurrences[t] as f64,
        RatioWeighting::Type => (occurrences[t] > 0) as u8 as f64,
    };
    let total: f64 = (0..assignment.len()).map(w).sum();
    if total == 0.0 {
        return 0.0;
    }
    (0..assignment.len()).filter(|&t| assignment[t].is_some()).map(w).sum::<f64>() / total
}

/// Tolerance on a requested split ratio.
pub const RATIO_TOLERANCE: f64 = 0.02;

/// Token types whose predicted domain is correct for a plurality of their
/// held-out occurrences and whose mean correct-class confidence reaches the
/// threshold go to T_D; everything else to T_G. A ratio target picks the
/// threshold by weighted quantile.
pub fn derive_token_split(
    classifier: &TokenClassifier,
    held_out: &DomainCounts,
    target: SplitTarget,
    weighting: RatioWeighting,
) -> Result<TokenSplit> {
    let v = held_out.vocab_size;
    if classifier.emb.rows() != v || classifier.num_domains() != held_out.num_domains {
        return Err(Error::input("classifier and held-out counts disagree on vocabulary or domains"));
    }
    let tokens: Vec<usize> = (0..v).collect();
    let probs = classifier.predict(&tokens);
    let mut conf = vec![0.0; v];
    let mut predicted = vec![0usize; v];
    let mut eligible = vec![false; v];
    let occurrences: Vec<u64> = (0..v).map(|t| held_out.total(t)).collect();
    let mut unseen = 0usize;
    for t in 0..v {
        let row = held_out.row(t);
        let n = occurrences[t];
        predicted[t] = argmax(probs.row(t));
        if n == 0 {
            unseen += 1;
            continue;
        }
        conf[t] = row.iter().zip(probs.row(t)).map(|(&c, &p)| c as f64 * p).sum::<f64>() / n as f64;
        let best = *row.iter().max().expect("at least one domain");
        eligible[t] = row[predicted[t]] == best;
    }
    if unseen > 0 {
        log::info!("{} token types have no held-out occurrences and go to T_G", unseen);
    }
    let threshold = match target {
        SplitTarget::Threshold(th) => th,
        SplitTarget::Ratio(r) => threshold_for_ratio(r, &conf, &eligible, &occurrences, weighting)?,
    };
    let assignment: Vec<Option<usize>> = (0..v)
        .map(|t| (eligible[t] && conf[t] >= threshold).then_some(predicted[t]))
        .collect();
    let split_ratio = ratio(&assignment, &occurrences, weighting);
    Ok(TokenSplit {
        assignment,
        mean_confidence: conf,
        occurrences,
        split_ratio,
        threshold,
    })
}

fn threshold_for_ratio(target: f64, conf: &[f64], eligible: &[bool], occ: &[u64], weighting: RatioWeighting) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::config(format!("split ratio {} outside [0, 1]", target)));
    }
    let w = |t: usize| match weighting {
        RatioWeighting::Occurrence => occ[t] as f64,
        RatioWeighting::Type => (occ[t] > 0) as u8 as f64,
    };
    let total: f64 = (0..conf.len()).map(w).sum();
    if total == 0.0 {
        return Err(Error::config("held-out set has no token occurrences"));
    }
    let mut order: Vec<usize> = (0..conf.len()).filter(|&t| eligible[t]).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    // Candidate cut points sit between distinct confidence values.
    let mut best = (target.abs(), f64::INFINITY);
    let mut cum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let c = conf[order[i]];
        while i < order.len() && conf[order[i]] == c {
            cum += w(order[i]);
            i += 1;
        }
        let gap = (cum / total - target).abs();
        if gap < best.0 {
            best = (gap, c);
        }
    }
    if best.0 > RATIO_TOLERANCE {
        return Err(Error::config(format!(
            "split ratio {} is unattainable: closest achievable differs by {:.4}",
            target, best.0
        )));
    }
    Ok(best.1)
}
