//! Testbed data mix: synthetic domain corpora, plain-text ingestion,
//! single-domain packing and the equal-mix scope stream.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{rng_for, Stream};

pub type TokenId = u32;

/// Ground-truth role of a vocabulary entry in a synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Domain(usize),
    Generic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub domain: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub domain_names: Vec<String>,
    pub documents: Vec<Document>,
    /// Present for synthetic corpora only.
    pub vocab_domain_truth: Option<Vec<TokenClass>>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("corpus has no domains"));
        }
        let mut seen = vec![false; self.num_domains];
        for doc in &self.documents {
            if doc.domain >= self.num_domains {
                return Err(Error::input(format!("document domain {} out of range", doc.domain)));
            }
            if let Some(&t) = doc.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::input(format!("token {} outside vocabulary {}", t, self.vocab_size)));
            }
            seen[doc.domain] = true;
        }
        if let Some(d) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!("domain {} has no documents", d)));
        }
        Ok(())
    }

    pub fn tokens_in_domain(&self, domain: usize) -> usize {
        self.documents
            .iter()
            .filter(|d| d.domain == domain)
            .map(|d| d.tokens.len())
            .sum()
    }
}

/// Document length law for the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DocLength {
    Fixed(usize),
    Uniform { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub tokens_per_domain: usize,
    pub generic_tokens: usize,
    pub generic_rate: f64,
    pub doc_length: DocLength,
    /// Total tokens generated per domain (documents are drawn until reached).
    pub tokens_per_domain_total: usize,
    /// Number of successors each domain token has in its bigram table.
    pub branching: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn vocab_size(&self) -> usize {
        self.domains * self.tokens_per_domain + self.generic_tokens
    }

    /// First id of the shared generic block.
    pub fn generic_offset(&self) -> usize {
        self.domains * self.tokens_per_domain
    }
}

/// Per-domain bigram chains over disjoint vocabulary blocks with generic
/// tokens injected at `generic_rate`. The chain state survives generic
/// insertions, so generic tokens carry no next-token signal of their own.
pub fn generate_synthetic_mix(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.domains < 2 {
        return Err(Error::config("synthetic mix needs at least 2 domains"));
    }
    if spec.tokens_per_domain == 0 || spec.generic_tokens == 0 {
        return Err(Error::config("vocabulary blocks must be non-empty"));
    }
    if !(0.0..1.0).contains(&spec.generic_rate) {
        return Err(Error::config("generic_rate must lie in [0, 1)"));
    }
    match spec.doc_length {
        DocLength::Fixed(0) => return Err(Error::config("document length must be positive")),
        DocLength::Uniform { min, max } if min == 0 || max < min => {
            return Err(Error::config("invalid document length range"))
        }
        _ => {}
    }
    let branching = spec.branching.clamp(1, spec.tokens_per_domain);
    let mut rng = rng_for(spec.seed, Stream::Corpus);

    let mut truth = Vec::with_capacity(spec.vocab_size());
    for d in 0..spec.domains {
        truth.extend(std::iter::repeat(TokenClass::Domain(d)).take(spec.tokens_per_domain));
    }
    truth.extend(std::iter::repeat(TokenClass::Generic).take(spec.generic_tokens));

    let mut documents = Vec::new();
    for d in 0..spec.domains {
        let base = (d * spec.tokens_per_domain) as TokenId;
        let table = BigramTable::random(spec.tokens_per_domain, branching, &mut rng);
        let mut produced = 0;
        while produced < spec.tokens_per_domain_total {
            let len = match spec.doc_length {
                DocLength::Fixed(n) => n,
                DocLength::Uniform { min, max } => rng.gen_range(min..=max),
            };
            let mut tokens = Vec::with_capacity(len);
            let mut state = rng.gen_range(0..spec.tokens_per_domain);
            let mut fresh = true;
            while tokens.len() < len {
                if rng.gen::<f64>() < spec.generic_rate {
                    let g = rng.gen_range(0..spec.generic_tokens);
                    tokens.push((spec.generic_offset() + g) as TokenId);
                } else {
                    if !fresh {
                        state = table.next(state, &mut rng);
                    }
                    fresh = false;
                    tokens.push(base + state as TokenId);
                }
            }
            produced += len;
            documents.push(Document { domain: d, tokens });
        }
    }
    Ok(Corpus {
        vocab_size: spec.vocab_size(),
        num_domains: spec.domains,
        domain_names: (0..spec.domains).map(|d| format!("domain{}", d)).collect(),
        documents,
        vocab_domain_truth: Some(truth),
    })
}

struct BigramTable {
    successors: Vec<Vec<(usize, f64)>>,
}

impl BigramTable {
    fn random(n: usize, branching: usize, rng: &mut ChaCha8Rng) -> Self {
        let all: Vec<usize> = (0..n).collect();
        let successors = (0..n)
            .map(|_| {
                let picks: Vec<usize> = all.choose_multiple(rng, branching).copied().collect();
                let weights: Vec<f64> = picks.iter().map(|_| rng.gen::<f64>() + 0.1).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(p, w)| {
                        acc += w / total;
                        (p, acc)
                    })
                    .collect()
            })
            .collect();
        BigramTable { successors }
    }

    fn next(&self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let row = &self.successors[state];
        row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().expect("non-empty")).0
    }
}

pub const UNK_TOKEN: &str = "<unk>";

/// Vocabulary produced by text ingestion; id 0 is the unknown token.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

/// Read `<root>/<domain>/*.txt`, one domain per subdirectory in name order.
pub fn ingest_text_corpus(root: &Path, max_vocab: usize) -> Result<(Corpus, Vocabulary)> {
    if max_vocab < 2 {
        return Err(Error::config("max_vocab must leave room for the unknown token"));
    }
    let mut domains: Vec<(String, Vec<std::path::PathBuf>)> = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|source| Error::Ingestion {
        path: root.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|source| Error::Ingestion { path: dir.clone(), source })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        domains.push((name, files));
    }
    if domains.len() < 2 {
        return Err(Error::config(format!(
            "{} has {} domain directories, need at least 2",
            root.display(),
            domains.len()
        )));
    }

    let mut raw_docs: Vec<(usize, Vec<String>)> = Vec::new();
    let mut freq: HashMap<String, usize> = HashMap::new();
    for (d, (name, files)) in domains.iter().enumerate() {
        let before = raw_docs.len();
        for path in files {
            let mut text = String::new();
            File::open(path)
                .and_then(|mut f| f.read_to_string(&mut text))
                .map_err(|source| Error::Ingestion { path: path.clone(), source })?;
            let words = tokenize_text(&text);
            if words.is_empty() {
                continue;
            }
            for w in &words {
                *freq.entry(w.clone()).or_insert(0) += 1;
            }
            raw_docs.push((d, words));
        }
        if raw_docs.len() == before {
            return Err(Error::config(format!("domain directory '{}' has no text", name)));
        }
    }

    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - 1);
    let mut tokens = vec![UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(w, _)| w));
    let index: HashMap<&str, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i as TokenId))
        .collect();

    let documents = raw_docs
        .iter()
        .map(|(d, words)| Document {
            domain: *d,
            tokens: words.iter().map(|w| index.get(w.as_str()).copied().unwrap_or(0)).collect(),
        })
        .collect();
    let corpus = Corpus {
        vocab_size: tokens.len(),
        num_domains: domains.len(),
        domain_names: domains.into_iter().map(|(n, _)| n).collect(),
        documents,
        vocab_domain_truth: None,
    };
    Ok((corpus, Vocabulary { tokens }))
}

/// Scripts written without spaces between words are split per character.
fn is_unspaced_script(c: char) -> bool {
    matches!(c as u32,
        0x0E00..=0x0E7F      // Thai
        | 0x3040..=0x30FF    // Hiragana, Katakana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xF900..=0xFAFF)
}

/// Whitespace-and-punctuation tokenizer.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() && !is_unspaced_script(c) || is_combining_mark(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Combining marks used by Devanagari, Arabic, Hebrew and Thai vowel signs.
fn is_combining_mark(c: char) -> bool {
    matches!(c as u32,
        0x0300..=0x036F
        | 0x0591..=0x05C7
        | 0x0610..=0x061A
        | 0x064B..=0x065F
        | 0x0900..=0x0903
        | 0x093A..=0x094F
        | 0x0962..=0x0963)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub domain: usize,
    pub tokens: Vec<TokenId>,
}

/// Concatenate each domain's documents and cut them into length-`seq_len` chunks.
/// Remainders are dropped.
pub fn pack_sequences(corpus: &Corpus, seq_len: usize) -> Result<Vec<PackedSequence>> {
    if seq_len == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    let mut out = Vec::new();
    for d in 0..corpus.num_domains {
        let stream: Vec<TokenId> = corpus
            .documents
            .iter()
            .filter(|doc| doc.domain == d)
            .flat_map(|doc| doc.tokens.iter().copied())
            .collect();
        if stream.len() < seq_len {
            return Err(Error::config(format!(
                "domain {} has {} tokens, fewer than one sequence of {}",
                d,
                stream.len(),
                seq_len
            )));
        }
        out.extend(stream.chunks_exact(seq_len).map(|c| PackedSequence {
            domain: d,
            tokens: c.to_vec(),
        }));
    }
    Ok(out)
}

/// One balancing scope: `S` sequences, split into micro-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopeGroup {
    pub sequences: Vec<PackedSequence>,
    pub micro_batches: Vec<usize>,
}

impl ScopeGroup {
    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }
}

/// All scope groups making up one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalBatch {
    pub groups: Vec<ScopeGroup>,
}

impl GlobalBatch {
    pub fn sequences(&self) -> impl Iterator<Item = &PackedSequence> {
        self.groups.iter().flat_map(|g| g.sequences.iter())
    }

    pub fn num_sequences(&self) -> usize {
        self.groups.iter().map(|g| g.sequences.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamSpec {
    pub batch_size: usize,
    pub scope: usize,
    pub micro_batch: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

/// Endless equal-mix stream of global batches plus a held-out split.
#[derive(Debug)]
pub struct ScopeStream {
    spec: StreamSpec,
    pools: Vec<Vec<PackedSequence>>,
    cursors: Vec<usize>,
    orders: Vec<Vec<usize>>,
    validation: Vec<PackedSequence>,
    rng: ChaCha8Rng,
}

pub fn build_scope_stream(sequences: Vec<PackedSequence>, num_domains: usize, spec: StreamSpec) -> Result<ScopeStream> {
    let StreamSpec {
        batch_size: b,
        scope: s,
        micro_batch: m,
        ..
    } = spec;
    if b == 0 || s == 0 || m == 0 {
        return Err(Error::config("batch, scope and micro-batch sizes must be positive"));
    }
    if b % s != 0 {
        return Err(Error::config(format!("scope {} does not divide batch {}", s, b)));
    }
    if s % m != 0 {
        return Err(Error::config(format!("micro-batch {} does not divide scope {}", m, s)));
    }
    if num_domains == 0 || b % num_domains != 0 {
        return Err(Error::config(format!("batch {} is not a multiple of {} domains", b, num_domains)));
    }
    if !(0.0..1.0).contains(&spec.validation_fraction) {
        return Err(Error::config("validation fraction must lie in [0, 1)"));
    }
    let mut rng = rng_for(spec.seed, Stream::Shuffle);
    let mut by_domain: Vec<Vec<PackedSequence>> = vec![Vec::new(); num_domains];
    for seq in sequences {
        if seq.domain >= num_domains {
            return Err(Error::input(format!("sequence domain {} out of range", seq.domain)));
        }
        by_domain[seq.domain].push(seq);
    }
    let mut held_out = Vec::with_capacity(num_domains);
    for (d, pool) in by_domain.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        let held = if spec.validation_fraction > 0.0 {
            ((pool.len() as f64 * spec.validation_fraction).round() as usize).max(1)
        } else {
            0
        };
        if pool.len() <= held {
            return Err(Error::config(format!("domain {} has too few sequences to hold out validation", d)));
        }
        held_out.push(pool.drain(..held).collect::<Vec<_>>());
    }
    // Interleave domains round-robin.
    let longest = held_out.iter().map(Vec::len).max().unwrap_or(0);
    let validation = (0..longest)
        .flat_map(|i| held_out.iter().filter_map(move |h| h.get(i).cloned()))
        .collect();
    let orders = by_domain.iter().map(|p| (0..p.len()).collect()).collect();
    let mut stream = ScopeStream {
        spec,
        cursors: vec![usize::MAX; num_domains],
        pools: by_domain,
        orders,
        validation,
        rng,
    };
    for d in 0..num_domains {
        stream.reshuffle(d);
    }
    Ok(stream)
}

impl ScopeStream {
    pub fn validation(&self) -> &[PackedSequence] {
        &self.validation
    }

    pub fn training_pool(&self) -> impl Iterator<Item = &PackedSequence> {
        self.pools.iter().flatten()
    }

    fn reshuffle(&mut self, d: usize) {
        self.orders[d].shuffle(&mut self.rng);
        self.cursors[d] = 0;
    }

    fn take(&mut self, d: usize) -> PackedSequence {
        if self.cursors[d] >= self.orders[d].len() {
            self.reshuffle(d);
        }
        let idx = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        self.pools[d][idx].clone()
    }

    pub fn next_batch(&mut self) -> GlobalBatch {
        let per_domain = self.spec.batch_size / self.pools.len();
        let mut seqs = Vec::with_capacity(self.spec.batch_size);
        for d in 0..self.pools.len() {
            for _ in 0..per_domain {
                seqs.push(self.take(d));
            }
        }
        seqs.shuffle(&mut self.rng);
        let s = self.spec.scope;
        let m = self.spec.micro_batch;
        let groups = seqs
            .chunks(s)
            .map(|chunk| ScopeGroup {
                sequences: chunk.to_vec(),
                micro_batches: vec![m; s / m],
            })
            .collect();
        GlobalBatch { groups }
    }
}

impl Iterator for ScopeStream {
    type Item = GlobalBatch;

    fn next(&mut self) -> Option<GlobalBatch> {
        Some(self.next_batch())
    }
}

const CACHE_MAGIC: &[u8; 4] = b"MRTB";
const CACHE_VERSION: u16 = 1;
const GENERIC_MARKER: u32 = u32::MAX;

/// Packed corpus as stored in the binary cache.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedCorpus {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub seq_len: usize,
    pub truth: Option<Vec<TokenClass>>,
    pub sequences: Vec<PackedSequence>,
}

/// Little-endian layout:
/// `"MRTB" | u16 version | u32 vocab | u32 domains | u32 seq_len | u64 count |
/// u8 has_truth | [u32; vocab] truth (domain or 0xFFFFFFFF) | count × (u32 domain, [u32; seq_len])`.
pub fn write_packed_cache(path: &Path, packed: &PackedCorpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(packed.vocab_size as u32).to_le_bytes())?;
    w.write_all(&(packed.num_domains as u32).to_le_bytes())?;
    w.write_all(&(packed.seq_len as u32).to_le_bytes())?;
    w.write_all(&(packed.sequences.len() as u64).to_le_bytes())?;
    match &packed.truth {
        Some(truth) => {
            w.write_all(&[1])?;
            for class in truth {
                let v = match class {
                    TokenClass::Domain(d) => *d as u32,
                    TokenClass::Generic => GENERIC_MARKER,
                };
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    for seq in &packed.sequences {
        if seq.tokens.len() != packed.seq_len {
            return Err(Error::input("sequence length differs from header"));
        }
        w.write_all(&(seq.domain as u32).to_le_bytes())?;
        for t in &seq.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_packed_cache(path: &Path) -> Result<PackedCorpus> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {}", version)));
    }
    let vocab_size = read_u32(&mut r)? as usize;
    let num_domains = read_u32(&mut r)? as usize;
    let seq_len = read_u32(&mut r)? as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let truth = if flag[0] == 1 {
        let mut t = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            let v = read_u32(&mut r)?;
            t.push(if v == GENERIC_MARKER {
                TokenClass::Generic
            } else {
                TokenClass::Domain(v as usize)
            });
        }
        Some(t)
    } else {
        None
    };
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let domain = read_u32(&mut r)? as usize;
        let mut tokens = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            tokens.push(read_u32(&mut r)?);
        }
        sequences.push(PackedSequence { domain, tokens });
    }
    Ok(PackedCorpus {
        vocab_size,
        num_domains,
        seq_len,
        truth,
        sequences,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Occurrence counts of every token, split by the domain of the sequence it sits in.
pub fn token_domain_counts(sequences: &[PackedSequence], vocab_size: usize, num_domains: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; num_domains]; vocab_size];
    for seq in sequences {
        for &t in &seq.tokens {
            counts[t as usize][seq.domain] += 1;
        }
    }
    counts
}

/// Count of sequences per domain; handy for checking the equal-mix property.
pub fn domain_histogram<'a>(seqs: impl Iterator<Item = &'a PackedSequence>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for s in seqs {
        *h.entry(s.domain).or_insert(0) += 1;
    }
    h
}
