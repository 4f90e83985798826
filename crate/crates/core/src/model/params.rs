use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// SwiGLU: `silu(x W_in) ⊙ (x W_gate)`.
    #[default]
    Gated,
    /// `silu(x W_in)`.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Filled in from the corpus when zero.
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attention: bool,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Splits every expert into `g` finer ones: E·g experts, k·g active, h_e/g wide.
    pub granularity: usize,
    /// Width of the dense FFN layers in multi-layer models.
    pub dense_hidden: usize,
    pub activation: Activation,
    pub init_std: f64,
    /// Positional table size when attention is enabled.
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            hidden: 64,
            layers: 1,
            attention: false,
            heads: 4,
            experts: 8,
            top_k: 2,
            expert_hidden: 128,
            granularity: 1,
            dense_hidden: 256,
            activation: Activation::Gated,
            init_std: 0.1,
            max_seq_len: 256,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn num_experts(&self) -> usize {
        self.experts * self.granularity
    }

    pub fn active_experts(&self) -> usize {
        self.top_k * self.granularity
    }

    pub fn expert_width(&self) -> usize {
        self.expert_hidden / self.granularity.max(1)
    }

    /// Single-layer models are MoE; deeper ones alternate dense and MoE,
    /// starting dense.
    pub fn is_moe(&self, layer: usize) -> bool {
        self.layers == 1 || layer % 2 == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("vocabulary, hidden size and layer count must be positive".into());
        }
        if self.granularity == 0 || self.expert_hidden % self.granularity != 0 {
            return bad(format!(
                "granularity {} must divide expert width {}",
                self.granularity, self.expert_hidden
            ));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("top_k {} must lie in 1..={}", self.top_k, self.experts));
        }
        if self.expert_width() == 0 {
            return bad("expert width is zero".into());
        }
        if self.attention && (self.heads == 0 || self.hidden % self.heads != 0) {
            return bad(format!("{} heads do not divide hidden size {}", self.heads, self.hidden));
        }
        if self.attention && self.max_seq_len == 0 {
            return bad("max_seq_len must be positive with attention".into());
        }
        if self.layers > 1 && self.dense_hidden == 0 {
            return bad("dense_hidden must be positive for multi-layer models".into());
        }
        if !(self.init_std > 0.0) || !(self.norm_eps > 0.0) {
            return bad("init_std and norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w_in: Matrix,
    pub w_gate: Option<Matrix>,
    pub w_out: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ffn {
    Dense(Mlp),
    Moe { router: Matrix, experts: Vec<Mlp> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub attention: Option<Attention>,
    pub ffn_norm: Matrix,
    pub ffn: Ffn,
}

/// All trainable tensors. Norm gains are `1 × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Matrix,
    pub pos_emb: Option<Matrix>,
    pub layers: Vec<Layer>,
    pub final_norm: Matrix,
    pub lm_head: Matrix,
}

impl Mlp {
    fn init(d: usize, h: usize, act: Activation, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w_in: Matrix::randn(d, h, std, rng),
            w_gate: (act == Activation::Gated).then(|| Matrix::randn(d, h, std, rng)),
            w_out: Matrix::randn(h, d, std, rng),
        }
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, v, std) = (cfg.hidden, cfg.vocab_size, cfg.init_std);
        let tok_emb = Matrix::randn(v, d, std, rng);
        let pos_emb = cfg.attention.then(|| Matrix::randn(cfg.max_seq_len, d, std, rng));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let attention = cfg.attention.then(|| Attention {
                norm: Matrix::filled(1, d, 1.0),
                wq: Matrix::randn(d, d, std, rng),
                wk: Matrix::randn(d, d, std, rng),
                wv: Matrix::randn(d, d, std, rng),
                wo: Matrix::randn(d, d, std, rng),
            });
            let ffn = if cfg.is_moe(l) {
                let e = cfg.num_experts();
                Ffn::Moe {
                    router: Matrix::randn(d, e, std, rng),
                    experts: (0..e)
                        .map(|_| Mlp::init(d, cfg.expert_width(), cfg.activation, std, rng))
                        .collect(),
                }
            } else {
                Ffn::Dense(Mlp::init(d, cfg.dense_hidden, cfg.activation, std, rng))
            };
            layers.push(Layer {
                attention,
                ffn_norm: Matrix::filled(1, d, 1.0),
                ffn,
            });
        }
        Ok(ModelParams {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Matrix::filled(1, d, 1.0),
            lm_head: Matrix::randn(d, v, std, rng),
        })
    }

    /// Every tensor with its name and whether it takes weight decay.
    pub fn named(&self) -> Vec<(String, &Matrix, bool)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb, true)];
        if let Some(p) = &self.pos_emb {
            out.push(("pos_emb".into(), p, true));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.attention {
                out.push((format!("layers.{l}.attn.norm"), &a.norm, false));
                out.push((format!("layers.{l}.attn.wq"), &a.wq, true));
                out.push((format!("layers.{l}.attn.wk"), &a.wk, true));
                out.push((format!("layers.{l}.attn.wv"), &a.wv, true));
                out.push((format!("layers.{l}.attn.wo"), &a.wo, true));
            }
            out.push((format!("layers.{l}.ffn_norm"), &layer.ffn_norm, false));
            match &layer.ffn {
                Ffn::Dense(m) => push_mlp(&mut out, format!("layers.{l}.dense"), m),
                Ffn::Moe { router, experts } => {
                    out.push((format!("layers.{l}.router"), router, true));
                    for (e, m) in experts.iter().enumerate() {
                        push_mlp(&mut out, format!("layers.{l}.experts.{e}"), m);
                    }
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm, false));
        out.push(("lm_head".into(), &self.lm_head, true));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            out.push(p);
        }
        for layer in &mut self.layers {
            if let Some(a) = &mut layer.attention {
                out.extend([&mut a.norm, &mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            }
            out.push(&mut layer.ffn_norm);
            match &mut layer.ffn {
                Ffn::Dense(m) => push_mlp_mut(&mut out, m),
                Ffn::Moe { router, experts } => {
                    out.push(router);
                    for m in experts {
                        push_mlp_mut(&mut out, m);
                    }
                }
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named().into_iter().map(|(_, m, _)| m).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::input(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Matrix, bool)>, prefix: String, m: &'a Mlp) {
    out.push((format!("{prefix}.w_in"), &m.w_in, true));
    if let Some(g) = &m.w_gate {
        out.push((format!("{prefix}.w_gate"), g, true));
    }
    out.push((format!("{prefix}.w_out"), &m.w_out, true));
}

fn push_mlp_mut<'a>(out: &mut Vec<&'a mut Matrix>, m: &'a mut Mlp) {
    out.push(&mut m.w_in);
    if let Some(g) = &mut m.w_gate {
        out.push(g);
    }
    out.push(&mut m.w_out);
}
