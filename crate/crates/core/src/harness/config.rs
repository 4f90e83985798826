//! Run configuration: typed TOML with dotted sections, presets and overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balancing::{AuctionOptions, Method};
use crate::datagen::{DocLength, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{DropPolicy, ModelConfig, RoutingPolicy, SelectionMode};
use crate::optim::OptimConfig;
use crate::splitter::{ClassifierConfig, RatioWeighting};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub domains: usize,
    pub tokens_per_domain: usize,
    pub generic_tokens: usize,
    pub generic_rate: f64,
    pub doc_length_min: usize,
    pub doc_length_max: usize,
    pub tokens_per_domain_total: usize,
    pub branching: usize,
    /// One subdirectory of `*.txt` files per domain.
    pub text_root: PathBuf,
    pub max_vocab: usize,
    pub seq_len: usize,
    pub validation_fraction: f64,
    /// Packed corpus cache; read when present, written by `gen-data`.
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancingConfig {
    pub method: Method,
    /// Sequences per balancing scope.
    pub scope: usize,
    pub strength: f64,
    /// Sequences per micro-batch; 0 means one micro-batch per scope.
    pub micro_batch: usize,
    /// `inf` disables token dropping.
    pub capacity_factor: f64,
    pub drop_policy: DropPolicy,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub auction: AuctionOptions,
    /// Route domain-specific tokens with the reference mask.
    pub reference: bool,
    /// Initial expert bias added to the first k experts, to start from a
    /// collapsed router.
    pub collapse_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Write step metrics every this many steps.
    pub metric_every: usize,
    /// Held-out evaluation every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Summary metrics average over this many final steps.
    pub final_window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// No domain-specific tokens.
    None,
    /// Generator ground truth (synthetic corpora only).
    Truth,
    /// Confidence split from the trained token classifier.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Occurrence share of T_D to aim for; overrides `threshold`.
    pub target_ratio: Option<f64>,
    pub threshold: f64,
    pub weighting: RatioWeighting,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub methods: Vec<Method>,
    pub scopes: Vec<usize>,
    pub strengths: Vec<f64>,
    /// Strengths for expert bias; empty means `strengths`.
    pub eb_strengths: Vec<f64>,
    pub capacity_factors: Vec<f64>,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub balancing: BalancingConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub grid: GridConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// D=4, E=8, k=2, d=64, B=16, L=256, 2000 steps on the synthetic mix.
    pub fn desk() -> Self {
        RunConfig {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            data: DataConfig {
                source: DataSource::Synthetic,
                domains: 4,
                tokens_per_domain: 64,
                generic_tokens: 32,
                generic_rate: 0.3,
                doc_length_min: 128,
                doc_length_max: 1024,
                tokens_per_domain_total: 262_144,
                branching: 4,
                text_root: PathBuf::new(),
                max_vocab: 8192,
                seq_len: 256,
                validation_fraction: 0.05,
                cache: None,
            },
            model: ModelConfig {
                hidden: 64,
                experts: 8,
                top_k: 2,
                expert_hidden: 128,
                attention: true,
                ..ModelConfig::default()
            },
            balancing: BalancingConfig {
                method: Method::Lbl,
                scope: 1,
                strength: 0.01,
                micro_batch: 0,
                capacity_factor: f64::INFINITY,
                drop_policy: DropPolicy::Probability,
                sinkhorn_iters: 50,
                sinkhorn_tol: 1e-3,
                auction: AuctionOptions::default(),
                reference: false,
                collapse_bias: 0.0,
            },
            optim: OptimConfig {
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.1,
                warmup: 100,
            },
            train: TrainConfig {
                steps: 2000,
                batch_size: 16,
                metric_every: 1,
                eval_every: 0,
                final_window: 100,
            },
            split: SplitConfig {
                mode: SplitMode::Truth,
                target_ratio: None,
                threshold: 0.5,
                weighting: RatioWeighting::Occurrence,
                classifier: ClassifierConfig::default(),
            },
            grid: GridConfig {
                methods: vec![Method::Lbl],
                scopes: vec![1, 16],
                strengths: (0..=8).map(|i| 2f64.powi(i - 8)).collect(),
                eb_strengths: Vec::new(),
                capacity_factors: vec![f64::INFINITY],
                workers: 1,
            },
            sweep: SweepConfig {
                ratios: vec![0.0, 0.32, 0.44, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            },
        }
    }

    /// Full-size settings: 2048 hidden, 32 experts of width 1280 with k=4,
    /// 8192-token sequences, batch 64, 20k steps.
    pub fn fidelity() -> Self {
        let mut c = RunConfig::desk();
        c.data.source = DataSource::Text;
        c.data.seq_len = 8192;
        c.data.max_vocab = 50_000;
        c.model = ModelConfig {
            vocab_size: 0,
            hidden: 2048,
            layers: 1,
            attention: true,
            heads: 16,
            experts: 32,
            top_k: 4,
            expert_hidden: 1280,
            granularity: 1,
            dense_hidden: 5120,
            init_std: 0.02,
            max_seq_len: 8192,
            ..ModelConfig::default()
        };
        c.optim = OptimConfig {
            lr: 2.44e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup: 2000,
        };
        c.train.steps = 20_000;
        c.train.batch_size = 64;
        c.split.mode = SplitMode::Classifier;
        c.split.target_ratio = Some(0.5);
        c.split.classifier = ClassifierConfig {
            hidden: 2048,
            ffn: 5120,
            epochs: 2,
            batch_size: 128,
            optim: OptimConfig {
                lr: 2.4e-4,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.01,
                warmup: 73,
            },
        };
        c.grid.methods = vec![Method::Lbl, Method::Ba, Method::Sh, Method::Eb];
        c.grid.scopes = vec![1, 4, 16, 32, 64];
        c.grid.strengths = (0..=15).map(|i| 2f64.powi(i - 15)).collect();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "fidelity" => Ok(RunConfig::fidelity()),
            other => Err(Error::config(format!("unknown preset '{}'", other))),
        }
    }

    /// Parse TOML. An optional top-level `preset = "desk" | "fidelity"` picks
    /// the base (desk by default); every other key overrides it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let preset = match user.remove("preset") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::config("preset must be a string")),
            None => "desk".to_string(),
        };
        let base = RunConfig::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {}", path.display(), e)))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Ok(seed) = std::env::var("MRTB_SEED") {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("MRTB_SEED '{}' is not an unsigned integer", seed)))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, excluding the output directory.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = c.to_toml()?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{:02x}", b)).collect())
    }

    pub fn micro_batch(&self) -> usize {
        match self.balancing.micro_batch {
            0 => self.balancing.scope,
            m => m,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            domains: d.domains,
            tokens_per_domain: d.tokens_per_domain,
            generic_tokens: d.generic_tokens,
            generic_rate: d.generic_rate,
            doc_length: if d.doc_length_min == d.doc_length_max {
                DocLength::Fixed(d.doc_length_min)
            } else {
                DocLength::Uniform {
                    min: d.doc_length_min,
                    max: d.doc_length_max,
                }
            },
            tokens_per_domain_total: d.tokens_per_domain_total,
            branching: d.branching,
            seed: self.seed,
        }
    }

    pub fn routing_policy(&self) -> RoutingPolicy {
        let b = &self.balancing;
        let selection = match b.method {
            Method::None | Method::Lbl => SelectionMode::TopK,
            Method::Eb => SelectionMode::ExpertBias,
            Method::Sh => SelectionMode::Sinkhorn {
                iters: b.sinkhorn_iters,
                tol: b.sinkhorn_tol,
            },
            Method::Ba => SelectionMode::Balanced(b.auction),
        };
        RoutingPolicy {
            selection,
            reference_mask: b.reference,
            capacity_factor: b.capacity_factor,
            drop_policy: b.drop_policy,
        }
    }

    /// Checks that do not need the corpus.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let b = &self.balancing;
        let bad = |m: String| Err(Error::config(m));
        if t.steps == 0 || t.batch_size == 0 || t.metric_every == 0 {
            return bad("steps, batch_size and metric_every must be positive".into());
        }
        if b.scope == 0 || t.batch_size % b.scope != 0 {
            return bad(format!("scope {} must divide batch size {}", b.scope, t.batch_size));
        }
        if b.scope % self.micro_batch() != 0 {
            return bad(format!("micro-batch {} must divide scope {}", self.micro_batch(), b.scope));
        }
        if b.method == Method::Eb && b.scope != t.batch_size {
            return bad("expert bias is only defined at global scope (scope = batch size)".into());
        }
        if b.method.has_strength() && !(b.strength >= 0.0 && b.strength.is_finite()) {
            return bad(format!("strength {} must be finite and non-negative", b.strength));
        }
        if b.capacity_factor.is_nan() || b.capacity_factor <= 0.0 {
            return bad("capacity_factor must be positive (inf disables dropping)".into());
        }
        if b.method == Method::Sh && (b.sinkhorn_iters == 0 || !(b.sinkhorn_tol > 0.0)) {
            return bad("sinkhorn_iters and sinkhorn_tol must be positive".into());
        }
        if !b.collapse_bias.is_finite() {
            return bad("collapse_bias must be finite".into());
        }
        if self.data.seq_len < 2 {
            return bad("seq_len must be at least 2".into());
        }
        if self.data.source == DataSource::Synthetic && t.batch_size % self.data.domains.max(1) != 0 {
            return bad(format!(
                "batch size {} must be a multiple of {} domains",
                t.batch_size, self.data.domains
            ));
        }
        if self.split.mode == SplitMode::Truth && self.data.source != DataSource::Synthetic {
            return bad("split mode 'truth' needs synthetic data".into());
        }
        if let Some(r) = self.split.target_ratio {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("target_ratio {} outside [0, 1]", r));
            }
        }
        if self.model.attention && self.model.max_seq_len < self.data.seq_len {
            return bad(format!(
                "max_seq_len {} below seq_len {}",
                self.model.max_seq_len, self.data.seq_len
            ));
        }
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = 1;
        }
        m.validate()?;
        if b.reference && m.num_experts() % m.active_experts() != 0 {
            return bad("reference routing needs E divisible by k".into());
        }
        if b.method == Method::Ba && (b.scope * self.data.seq_len) % m.num_experts() != 0 {
            return bad(format!(
                "balanced assignment needs {} experts to divide the {} tokens of a scope",
                m.num_experts(),
                b.scope * self.data.seq_len
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_preset() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::desk());
    }

    #[test]
    fn dotted_overrides_and_unknown_keys() {
        let c = RunConfig::from_toml("seed = 7\nbalancing.scope = 16\n[model]\nhidden = 32\n").unwrap();
        assert_eq!((c.seed, c.balancing.scope, c.model.hidden), (7, 16, 32));
        assert!(RunConfig::from_toml("balancing.scop = 16").unwrap_err().is_config());
        assert!(RunConfig::from_toml("colour = 1").unwrap_err().is_config());
    }

    #[test]
    fn infinite_capacity_round_trips() {
        let c = RunConfig::from_toml("balancing.capacity_factor = inf").unwrap();
        assert!(c.balancing.capacity_factor.is_infinite());
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn fidelity_preset_values() {
        let c = RunConfig::from_toml("preset = \"fidelity\"").unwrap();
        assert_eq!((c.model.hidden, c.model.experts, c.model.top_k, c.model.expert_hidden), (2048, 32, 4, 1280));
        assert_eq!((c.data.seq_len, c.train.batch_size, c.optim.warmup, c.train.steps), (8192, 64, 2000, 20_000));
        assert_eq!(c.optim.lr, 2.44e-4);
        assert!(c.to_toml().unwrap().contains("warmup = 2000"));
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(RunConfig::from_toml("balancing.scope = 3").is_err());
        assert!(RunConfig::from_toml("balancing.scope = 4\nbalancing.micro_batch = 3").is_err());
        assert!(RunConfig::from_toml("balancing.method = \"eb\"\nbalancing.scope = 1").is_err());
        assert!(RunConfig::from_toml("balancing.method = \"eb\"\nbalancing.scope = 16").is_ok());
        assert!(RunConfig::from_toml("balancing.method = \"ba\"\ndata.seq_len = 30").is_err());
        assert!(RunConfig::from_toml("balancing.method = \"ba\"\ndata.seq_len = 32").is_ok());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed += 1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }
}
