//! Single-run driver.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::balancing::Method;
use crate::datagen::{
    build_scope_stream, generate_synthetic_mix, ingest_text_corpus, pack_sequences, read_packed_cache, write_packed_cache,
    PackedCorpus, PackedSequence, ScopeStream, StreamSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{validation_loss, MetricsRecord, RoutingCounts};
use crate::model::{Balance, Model, TokenBatch};
use crate::optim::{AdamW, Schedule};
use crate::splitter::{derive_token_split, train_token_classifier, DomainCounts, SplitTarget, TokenClassifier, TokenSplit};

use super::config::{DataSource, RunConfig, SplitMode};

/// Generate or ingest the corpus and pack it, honouring the cache file.
pub fn prepare_corpus(cfg: &RunConfig) -> Result<PackedCorpus> {
    if let Some(path) = &cfg.data.cache {
        if path.exists() {
            let packed = read_packed_cache(path)?;
            if packed.seq_len != cfg.data.seq_len {
                return Err(Error::config(format!(
                    "cache {} holds sequences of length {}, config wants {}",
                    path.display(),
                    packed.seq_len,
                    cfg.data.seq_len
                )));
            }
            return Ok(packed);
        }
    }
    let corpus = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_mix(&cfg.synthetic_spec())?,
        DataSource::Text => ingest_text_corpus(&cfg.data.text_root, cfg.data.max_vocab)?.0,
    };
    corpus.validate()?;
    let sequences = pack_sequences(&corpus, cfg.data.seq_len)?;
    Ok(PackedCorpus {
        vocab_size: corpus.vocab_size,
        num_domains: corpus.num_domains,
        seq_len: cfg.data.seq_len,
        truth: corpus.vocab_domain_truth,
        sequences,
    })
}

/// Write the packed corpus to the configured cache path.
pub fn generate_data(cfg: &RunConfig) -> Result<PackedCorpus> {
    let path = cfg
        .data
        .cache
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("corpus.mrtb"));
    let mut fresh = cfg.clone();
    fresh.data.cache = None;
    let packed = prepare_corpus(&fresh)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_packed_cache(&path, &packed)?;
    log::info!("wrote {} sequences to {}", packed.sequences.len(), path.display());
    Ok(packed)
}

/// Corpus, held-out split and token split shared by runs with the same data.
pub struct Prepared {
    pub corpus: PackedCorpus,
    pub split: TokenSplit,
    pub classifier: Option<TokenClassifier>,
    pub held_out: DomainCounts,
}

fn stream_for(cfg: &RunConfig, corpus: &PackedCorpus) -> Result<ScopeStream> {
    build_scope_stream(
        corpus.sequences.clone(),
        corpus.num_domains,
        StreamSpec {
            batch_size: cfg.train.batch_size,
            scope: cfg.balancing.scope,
            micro_batch: cfg.micro_batch(),
            validation_fraction: cfg.data.validation_fraction,
            seed: cfg.seed,
        },
    )
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = prepare_corpus(cfg)?;
    if cfg.train.batch_size % corpus.num_domains != 0 {
        return Err(Error::config(format!(
            "batch size {} is not a multiple of {} domains",
            cfg.train.batch_size, corpus.num_domains
        )));
    }
    let stream = stream_for(cfg, &corpus)?;
    let held_out = DomainCounts::from_sequences(stream.validation(), corpus.vocab_size, corpus.num_domains)?;
    let mut classifier = None;
    let split = match cfg.split.mode {
        SplitMode::None => TokenSplit::empty(corpus.vocab_size),
        SplitMode::Truth => {
            let truth = corpus
                .truth
                .as_ref()
                .ok_or_else(|| Error::config("split mode 'truth' needs a corpus with ground truth"))?;
            TokenSplit::from_truth(truth, &held_out, cfg.split.weighting)
        }
        SplitMode::Classifier => {
            let train: Vec<PackedSequence> = stream.training_pool().cloned().collect();
            let c = train_token_classifier(
                &train,
                stream.validation(),
                corpus.vocab_size,
                corpus.num_domains,
                &cfg.split.classifier,
                cfg.seed,
            )?;
            let target = match cfg.split.target_ratio {
                Some(r) => SplitTarget::Ratio(r),
                None => SplitTarget::Threshold(cfg.split.threshold),
            };
            let s = derive_token_split(&c, &held_out, target, cfg.split.weighting)?;
            classifier = Some(c);
            s
        }
    };
    Ok(Prepared {
        corpus,
        split,
        classifier,
        held_out,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
    Failed(String),
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("ok"),
            RunStatus::Diverged { step } => write!(f, "diverged@{}", step),
            RunStatus::Failed(m) => write!(f, "failed:{}", m.replace(['\t', '\n'], " ")),
        }
    }
}

impl RunStatus {
    pub fn parse(s: &str) -> Self {
        if s == "ok" {
            RunStatus::Completed
        } else if let Some(step) = s.strip_prefix("diverged@").and_then(|x| x.parse().ok()) {
            RunStatus::Diverged { step }
        } else {
            RunStatus::Failed(s.strip_prefix("failed:").unwrap_or(s).to_string())
        }
    }
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub method: Method,
    pub scope: usize,
    /// `None` for methods without a strength.
    pub strength: Option<f64>,
    pub capacity: f64,
    pub utilization: f64,
    pub purity: Option<f64>,
    pub val_loss: Option<f64>,
    pub drop_frac: f64,
    pub status: RunStatus,
}

pub const SUMMARY_HEADER: &str = "method\tscope\tstrength\tcapacity\tutilization\tpurity\tval_loss\tdrop_frac\tstatus";

fn na(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" || s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Format(format!("not a number: {}", s)))
    }
}

impl RunSummary {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.method,
            self.scope,
            self.strength.map_or("-".to_string(), |s| s.to_string()),
            self.capacity,
            self.utilization,
            na(self.purity),
            na(self.val_loss),
            self.drop_frac,
            self.status
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 9 {
            return Err(Error::Format(format!("summary row needs 9 columns: {}", line)));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("not a number: {}", s))) };
        Ok(RunSummary {
            method: c[0].parse().map_err(|_| Error::Format(format!("unknown method {}", c[0])))?,
            scope: c[1].parse().map_err(|_| Error::Format(format!("bad scope {}", c[1])))?,
            strength: parse_opt(c[2])?,
            capacity: num(c[3])?,
            utilization: num(c[4])?,
            purity: parse_opt(c[5])?,
            val_loss: parse_opt(c[6])?,
            drop_frac: num(c[7])?,
            status: RunStatus::parse(c[8]),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub digest: String,
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRecord>,
    pub evaluations: Vec<(usize, f64)>,
    pub wall_seconds: f64,
}

pub const STEP_HEADER: &str = "step\tlm_loss\taux_loss\tdrop_frac\tlayer\tutilization\tpurity";

/// Prepare the data and train one model.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunRecord> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

/// Train one model on already prepared data, writing `config.toml`,
/// `steps.tsv`, `eval.tsv` and `record.tsv` into the output directory.
pub fn run_prepared(cfg: &RunConfig, prepared: &Prepared) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let digest = cfg.digest()?;
    let corpus = &prepared.corpus;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab_size;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    if cfg.balancing.reference && model.config.num_experts() != model.config.active_experts() * corpus.num_domains {
        return Err(Error::config(format!(
            "reference routing needs E = k·D ({} experts, k={}, {} domains)",
            model.config.num_experts(),
            model.config.active_experts(),
            corpus.num_domains
        )));
    }
    if cfg.balancing.collapse_bias != 0.0 {
        let k = model.config.active_experts();
        for l in model.moe_layers() {
            for b in model.biases[l].iter_mut().take(k) {
                *b += cfg.balancing.collapse_bias;
            }
        }
    }
    let mut stream = stream_for(cfg, corpus)?;
    let membership = prepared.split.membership();
    let policy = cfg.routing_policy();
    let balance = Balance {
        method: cfg.balancing.method,
        strength: if cfg.balancing.method.has_strength() { cfg.balancing.strength } else { 0.0 },
    };
    let shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.data().len()).collect();
    let mut opt = AdamW::new(cfg.optim, Schedule::Constant, &shapes);

    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    prepared.split.write_tsv(&cfg.output_dir.join("split.tsv"))?;
    let mut steps_out = BufWriter::new(File::create(cfg.output_dir.join("steps.tsv"))?);
    writeln!(steps_out, "{}", STEP_HEADER)?;
    let mut eval_out = BufWriter::new(File::create(cfg.output_dir.join("eval.tsv"))?);
    writeln!(eval_out, "step\tval_loss")?;

    let held_out = stream.validation().to_vec();
    let eval = |model: &Model| {
        validation_loss(
            model,
            &held_out,
            cfg.balancing.scope,
            cfg.micro_batch(),
            &membership,
            &policy,
        )
    };
    let mut metrics = Vec::new();
    let mut evaluations = Vec::new();
    let mut status = RunStatus::Completed;
    for step in 0..cfg.train.steps {
        let batch = TokenBatch::from_global(&stream.next_batch(), &membership)?;
        let report = match model.train_step(&batch, &policy, balance, &mut opt) {
            Ok(r) => r,
            Err(Error::Divergence { layer, reason }) => {
                log::warn!("step {}: layer {} diverged: {}", step, layer, reason);
                status = RunStatus::Diverged { step };
                break;
            }
            Err(Error::Training { reason, .. }) => {
                log::warn!("step {}: {}", step, reason);
                status = RunStatus::Diverged { step };
                break;
            }
            Err(e) => return Err(e),
        };
        let mut rec = MetricsRecord {
            step,
            lm_loss: report.lm_loss,
            aux_loss: report.aux_loss,
            drop_fraction: 0.0,
            layers: Vec::new(),
            validation_loss: None,
        };
        let mut total = RoutingCounts::new(model.config.num_experts(), corpus.num_domains);
        for (l, dec) in report.decisions.iter().enumerate() {
            if let Some(dec) = dec {
                let mut c = RoutingCounts::new(dec.num_experts, corpus.num_domains);
                c.absorb(dec)?;
                rec.layers.push((l, c.utilization(), c.purity().ok()));
                if step % cfg.train.metric_every == 0 {
                    writeln!(
                        steps_out,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        step,
                        report.lm_loss,
                        report.aux_loss,
                        c.drop_fraction(),
                        l,
                        c.utilization(),
                        na(c.purity().ok())
                    )?;
                }
                total.merge(&c);
            }
        }
        rec.drop_fraction = total.drop_fraction();
        if cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0 && step + 1 < cfg.train.steps {
            let v = eval(&model)?;
            writeln!(eval_out, "{}\t{}", step + 1, v)?;
            eval_out.flush()?;
            evaluations.push((step + 1, v));
            rec.validation_loss = Some(v);
        }
        metrics.push(rec);
        if step % 100 == 99 {
            steps_out.flush()?;
            log::debug!("step {} lm_loss {:.4}", step + 1, report.lm_loss);
        }
    }
    steps_out.flush()?;
    let val_loss = if status == RunStatus::Completed {
        let v = eval(&model)?;
        writeln!(eval_out, "{}\t{}", cfg.train.steps, v)?;
        evaluations.push((cfg.train.steps, v));
        Some(v)
    } else {
        None
    };
    eval_out.flush()?;
    let window: Vec<&MetricsRecord> = metrics
        .iter()
        .rev()
        .take(cfg.train.final_window.max(1))
        .filter(|m| m.step % cfg.train.metric_every == 0)
        .collect();
    let mean = |vals: Vec<f64>| -> Option<f64> {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let per_step = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| mean(window.iter().filter_map(|m| f(m)).collect());
    let summary = RunSummary {
        method: cfg.balancing.method,
        scope: cfg.balancing.scope,
        strength: cfg.balancing.method.has_strength().then_some(cfg.balancing.strength),
        capacity: cfg.balancing.capacity_factor,
        utilization: per_step(&|m| mean(m.layers.iter().map(|l| l.1).collect())).unwrap_or(f64::NAN),
        purity: per_step(&|m| mean(m.layers.iter().filter_map(|l| l.2).collect())),
        val_loss,
        drop_frac: per_step(&|m| Some(m.drop_fraction)).unwrap_or(0.0),
        status,
    };
    let record = RunRecord {
        digest,
        summary,
        metrics,
        evaluations,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_record(&cfg.output_dir.join("record.tsv"), &record)?;
    log::info!(
        "{}: utilization {:.4} purity {} val_loss {} in {:.1}s",
        cfg.output_dir.display(),
        record.summary.utilization,
        na(record.summary.purity),
        na(record.summary.val_loss),
        record.wall_seconds
    );
    Ok(record)
}

/// `record.tsv`: the config digest, wall time and the summary row.
fn write_record(path: &Path, r: &RunRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "digest\twall_seconds\t{}", SUMMARY_HEADER)?;
    writeln!(w, "{}\t{:.3}\t{}", r.digest, r.wall_seconds, r.summary.to_row())?;
    w.flush()?;
    Ok(())
}

/// Reads back `(digest, summary)` from a finished run directory.
pub fn read_record(dir: &Path) -> Result<(String, RunSummary)> {
    let text = fs::read_to_string(dir.join("record.tsv"))?;
    let line = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Format("record.tsv has no data row".into()))?;
    let (digest, rest) = line
        .split_once('\t')
        .ok_or_else(|| Error::Format("malformed record.tsv".into()))?;
    let (_, row) = rest
        .split_once('\t')
        .ok_or_else(|| Error::Format("malformed record.tsv".into()))?;
    Ok((digest.to_string(), RunSummary::parse_row(row)?))
}
