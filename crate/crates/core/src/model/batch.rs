use std::ops::Range;

use crate::datagen::{GlobalBatch, PackedSequence};
use crate::error::{Error, Result};

/// Marks a position without a next-token target (last token of a sequence).
pub const NO_TARGET: u32 = u32::MAX;

/// A global batch flattened to token occurrences, sequence-major.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub positions: Vec<usize>,
    /// Sequence domain of every occurrence.
    pub domains: Vec<usize>,
    /// Whether the occurrence's token type belongs to the domain-specific set.
    pub in_td: Vec<bool>,
    pub seq_len: usize,
    /// Token ranges of the micro-batches, in order.
    pub micro_batches: Vec<Range<usize>>,
    /// For each scope group, the indices into `micro_batches` it covers.
    pub groups: Vec<Range<usize>>,
}

impl TokenBatch {
    /// `td_membership[v]` says whether vocabulary id `v` is domain-specific.
    pub fn from_global(batch: &GlobalBatch, td_membership: &[bool]) -> Result<Self> {
        let mut out = TokenBatch::empty(0);
        for g in &batch.groups {
            let total: usize = g.micro_batches.iter().sum();
            if total != g.sequences.len() {
                return Err(Error::input("micro-batch sizes do not cover the scope group"));
            }
            let start_mb = out.micro_batches.len();
            let mut cursor = 0;
            for &m in &g.micro_batches {
                out.push_micro_batch(&g.sequences[cursor..cursor + m], td_membership)?;
                cursor += m;
            }
            out.groups.push(start_mb..out.micro_batches.len());
        }
        Ok(out)
    }

    /// Held-out evaluation layout: consecutive chunks of `scope` sequences,
    /// each split into micro-batches of `micro_batch` sequences.
    pub fn from_sequences(seqs: &[PackedSequence], scope: usize, micro_batch: usize, td_membership: &[bool]) -> Result<Self> {
        if scope == 0 || micro_batch == 0 {
            return Err(Error::input("scope and micro-batch must be positive"));
        }
        let mut out = TokenBatch::empty(0);
        for chunk in seqs.chunks(scope) {
            let start_mb = out.micro_batches.len();
            for mb in chunk.chunks(micro_batch) {
                out.push_micro_batch(mb, td_membership)?;
            }
            out.groups.push(start_mb..out.micro_batches.len());
        }
        Ok(out)
    }

    fn empty(seq_len: usize) -> Self {
        TokenBatch {
            tokens: Vec::new(),
            targets: Vec::new(),
            positions: Vec::new(),
            domains: Vec::new(),
            in_td: Vec::new(),
            seq_len,
            micro_batches: Vec::new(),
            groups: Vec::new(),
        }
    }

    fn push_micro_batch(&mut self, seqs: &[PackedSequence], td: &[bool]) -> Result<()> {
        let start = self.tokens.len();
        for s in seqs {
            let l = s.tokens.len();
            if self.seq_len == 0 {
                self.seq_len = l;
            }
            if l != self.seq_len || l == 0 {
                return Err(Error::input("all sequences in a batch must share one positive length"));
            }
            for (p, &t) in s.tokens.iter().enumerate() {
                let member = *td
                    .get(t as usize)
                    .ok_or_else(|| Error::input(format!("token {} outside the vocabulary", t)))?;
                self.tokens.push(t);
                self.targets.push(if p + 1 < l { s.tokens[p + 1] } else { NO_TARGET });
                self.positions.push(p);
                self.domains.push(s.domain);
                self.in_td.push(member);
            }
        }
        self.micro_batches.push(start..self.tokens.len());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_predictions(&self) -> usize {
        self.targets.iter().filter(|&&t| t != NO_TARGET).count()
    }

    /// Token range covered by scope group `g`.
    pub fn group_tokens(&self, g: usize) -> Range<usize> {
        let mbs = &self.groups[g];
        self.micro_batches[mbs.start].start..self.micro_batches[mbs.end - 1].end
    }

    /// Micro-batch index of every occurrence.
    pub fn micro_batch_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (i, r) in self.micro_batches.iter().enumerate() {
            out[r.clone()].iter_mut().for_each(|x| *x = i);
        }
        out
    }
}
