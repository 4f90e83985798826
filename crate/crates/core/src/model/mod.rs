//! Small MoE language model with hand-derived gradients.
//!
//! Without attention, occurrences whose computation is identical (same token,
//! same routing in every MoE layer) share one hidden-state row: the forward
//! pass runs once per distinct row and the backward pass sums the upstream
//! gradients of the occurrences it stands for. With attention every
//! occurrence is its own row.

mod batch;
mod layers;
mod params;
mod routing;
mod snapshot;

use std::collections::HashMap;

use crate::balancing::{expert_bias_update, scoped_lbl, Method};
use crate::error::{Error, Result};
use crate::numerics::{gemm, grad_check, log_sum_exp, rng_for, sample_indices, softmax_in_place, GradCheckReport, Matrix, Stream};
use crate::optim::AdamW;

pub use batch::{TokenBatch, NO_TARGET};
pub use params::{Activation, Attention, Ffn, Layer, Mlp, ModelConfig, ModelParams};
pub use routing::{
    apply_capacity, apply_reference_mask, freeze_into, route, row_softmax, select, DropPolicy, RouterState,
    RoutingDecision, RoutingPolicy, SelectionMode,
};
pub use snapshot::{read_snapshot, write_snapshot};

use layers::{
    attention_backward, attention_forward, mlp_backward, mlp_forward, rms_backward, rms_forward, AttnCache, MlpCache,
    NormCache,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Expert-bias vector per layer; empty for dense layers.
    pub biases: Vec<Vec<f64>>,
}

/// Gradient of the auxiliary loss with respect to each micro-batch's mean
/// router probabilities, per layer.
pub type AuxGrad = Vec<Option<Vec<Vec<f64>>>>;

pub struct ForwardPass {
    pub ce_loss: f64,
    pub num_predictions: usize,
    /// Routing per layer; `None` for dense layers.
    pub decisions: Vec<Option<RoutingDecision>>,
    cache: Cache,
}

struct Cache {
    /// Token id behind each embedding row.
    emb_tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    final_xn: Matrix,
    final_row_of: Vec<u32>,
    out_probs: Matrix,
}

struct LayerCache {
    attn: Option<AttnCache>,
    ffn_norm: NormCache,
    xn: Matrix,
    ffn: FfnCache,
}

enum FfnCache {
    Dense(MlpCache),
    Moe(MoeCache),
}

struct MoeCache {
    in_rows: usize,
    parent: Vec<u32>,
    /// An occurrence represented by each output row.
    rep: Vec<u32>,
    /// Position of each (output row, slot) in its expert's input, or `u32::MAX`.
    expert_pos: Vec<u32>,
    expert_rows: Vec<Vec<u32>>,
    experts: Vec<Option<(MlpCache, Matrix)>>,
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub decisions: Vec<Option<RoutingDecision>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Balance {
    pub method: Method,
    pub strength: f64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, Stream::ModelInit);
        let params = ModelParams::init(&config, &mut rng)?;
        let biases = (0..config.layers)
            .map(|l| if config.is_moe(l) { vec![0.0; config.num_experts()] } else { Vec::new() })
            .collect();
        Ok(Model { config, params, biases })
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.config.layers).filter(|&l| self.config.is_moe(l)).collect()
    }

    pub fn forward(&self, batch: &TokenBatch, policy: &RoutingPolicy, frozen: Option<&[Option<RoutingDecision>]>) -> Result<ForwardPass> {
        let cfg = &self.config;
        let p = &self.params;
        let n = batch.len();
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        let d = cfg.hidden;
        let eps = cfg.norm_eps;
        let (mut x, mut row_of, emb_tokens) = if cfg.attention {
            if batch.seq_len > cfg.max_seq_len {
                return Err(Error::config(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    batch.seq_len, cfg.max_seq_len
                )));
            }
            let pos = p.pos_emb.as_ref().expect("positional table exists with attention");
            let mut x = Matrix::zeros(n, d);
            for i in 0..n {
                let (t, q) = (batch.tokens[i] as usize, batch.positions[i]);
                for (o, (a, b)) in x.row_mut(i).iter_mut().zip(p.tok_emb.row(t).iter().zip(pos.row(q))) {
                    *o = a + b;
                }
            }
            (x, (0..n as u32).collect::<Vec<_>>(), batch.tokens.clone())
        } else {
            let mut map = vec![u32::MAX; cfg.vocab_size];
            let mut emb_tokens = Vec::new();
            let mut row_of = Vec::with_capacity(n);
            for &t in &batch.tokens {
                let slot = map.get_mut(t as usize).ok_or_else(|| Error::input(format!("token {} outside vocabulary", t)))?;
                if *slot == u32::MAX {
                    *slot = emb_tokens.len() as u32;
                    emb_tokens.push(t);
                }
                row_of.push(*slot);
            }
            let idx: Vec<usize> = emb_tokens.iter().map(|&t| t as usize).collect();
            (p.tok_emb.gather_rows(&idx), row_of, emb_tokens)
        };
        let identity = cfg.attention;
        let mut layer_caches = Vec::with_capacity(cfg.layers);
        let mut decisions = Vec::with_capacity(cfg.layers);
        for (l, layer) in p.layers.iter().enumerate() {
            let attn = match &layer.attention {
                Some(a) => {
                    let (upd, c) = attention_forward(a, &x, cfg.heads, batch.seq_len, eps);
                    x.add_assign(&upd);
                    Some(c)
                }
                None => None,
            };
            let (xn, ffn_norm) = rms_forward(&x, &layer.ffn_norm, eps);
            let ffn = match &layer.ffn {
                Ffn::Dense(m) => {
                    let (y, c) = mlp_forward(m, xn.clone());
                    x.add_assign(&y);
                    decisions.push(None);
                    FfnCache::Dense(c)
                }
                Ffn::Moe { router, experts } => {
                    let e = experts.len();
                    let k = cfg.active_experts();
                    let mut logits = Matrix::zeros(x.rows(), e);
                    gemm(1.0, &xn, false, router, false, 0.0, &mut logits);
                    let mut dec = select(logits, row_of.clone(), batch, &self.biases[l], k, policy).map_err(|err| match err {
                        Error::Divergence { reason, .. } => Error::Divergence { layer: l, reason },
                        other => other,
                    })?;
                    if let Some(fz) = frozen.and_then(|f| f.get(l)).and_then(|f| f.as_ref()) {
                        freeze_into(&mut dec, fz)?;
                    }
                    let (new_x, cache, new_row_of) = moe_forward(&x, &xn, experts, &dec, identity);
                    x = new_x;
                    row_of = new_row_of;
                    decisions.push(Some(dec));
                    FfnCache::Moe(cache)
                }
            };
            if !x.is_finite() {
                return Err(Error::Divergence {
                    layer: l,
                    reason: "non-finite hidden state".into(),
                });
            }
            layer_caches.push(LayerCache { attn, ffn_norm, xn, ffn });
        }
        let (final_xn, final_norm) = rms_forward(&x, &p.final_norm, eps);
        let mut out = Matrix::zeros(x.rows(), cfg.vocab_size);
        gemm(1.0, &final_xn, false, &p.lm_head, false, 0.0, &mut out);
        let lse: Vec<f64> = (0..out.rows()).map(|r| log_sum_exp(out.row(r))).collect();
        let mut total = 0.0;
        let mut np = 0usize;
        for i in 0..n {
            let t = batch.targets[i];
            if t != NO_TARGET {
                let r = row_of[i] as usize;
                total += lse[r] - out.get(r, t as usize);
                np += 1;
            }
        }
        if np == 0 {
            return Err(Error::input("batch has no prediction targets"));
        }
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ce_loss = total / np as f64;
        if !ce_loss.is_finite() {
            return Err(Error::Divergence {
                layer: cfg.layers,
                reason: "non-finite loss".into(),
            });
        }
        Ok(ForwardPass {
            ce_loss,
            num_predictions: np,
            decisions,
            cache: Cache {
                emb_tokens,
                layers: layer_caches,
                final_norm,
                final_xn,
                final_row_of: row_of,
                out_probs: out,
            },
        })
    }

    /// Gradients of `ce_loss` plus the auxiliary loss described by `aux`.
    pub fn backward(&self, pass: &ForwardPass, batch: &TokenBatch, aux: &AuxGrad) -> Result<ModelParams> {
        let cfg = &self.config;
        let p = &self.params;
        let c = &pass.cache;
        let mut g = p.zeros_like();
        let np = pass.num_predictions as f64;
        let rows = c.out_probs.rows();
        let mut counts = vec![0.0; rows];
        let mut dlogits = Matrix::zeros(rows, cfg.vocab_size);
        for i in 0..batch.len() {
            let t = batch.targets[i];
            if t != NO_TARGET {
                let r = c.final_row_of[i] as usize;
                counts[r] += 1.0;
                let v = dlogits.get(r, t as usize);
                dlogits.set(r, t as usize, v - 1.0 / np);
            }
        }
        for r in 0..rows {
            let s = counts[r] / np;
            if s != 0.0 {
                for (o, &pv) in dlogits.row_mut(r).iter_mut().zip(c.out_probs.row(r)) {
                    *o += s * pv;
                }
            }
        }
        gemm(1.0, &c.final_xn, true, &dlogits, false, 1.0, &mut g.lm_head);
        let mut dxn = Matrix::zeros(rows, cfg.hidden);
        gemm(1.0, &dlogits, false, &p.lm_head, true, 0.0, &mut dxn);
        let mut dx = rms_backward(&c.final_norm, &p.final_norm, &dxn, &mut g.final_norm);
        for l in (0..cfg.layers).rev() {
            let lc = &c.layers[l];
            let layer = &p.layers[l];
            let gl = &mut g.layers[l];
            match (&layer.ffn, &lc.ffn, &mut gl.ffn) {
                (Ffn::Dense(m), FfnCache::Dense(mc), Ffn::Dense(gm)) => {
                    let dxn = mlp_backward(m, mc, &dx, gm);
                    let back = rms_backward(&lc.ffn_norm, &layer.ffn_norm, &dxn, &mut gl.ffn_norm);
                    dx.add_assign(&back);
                }
                (Ffn::Moe { router, experts }, FfnCache::Moe(mc), Ffn::Moe { router: gr, experts: ge }) => {
                    let dec = pass.decisions[l].as_ref().expect("MoE layer has routing");
                    let coef = aux.get(l).and_then(|a| a.as_ref());
                    let (dx_old, dxn_old) = moe_backward(&dx, &lc.xn, router, experts, dec, mc, batch, coef, gr, ge);
                    let back = rms_backward(&lc.ffn_norm, &layer.ffn_norm, &dxn_old, &mut gl.ffn_norm);
                    dx = dx_old;
                    dx.add_assign(&back);
                }
                _ => unreachable!("layer kinds always line up"),
            }
            if let (Some(a), Some(ac), Some(ga)) = (&layer.attention, &lc.attn, &mut gl.attention) {
                let back = attention_backward(a, ac, &dx, cfg.heads, batch.seq_len, ga);
                dx.add_assign(&back);
            }
        }
        for (r, &t) in c.emb_tokens.iter().enumerate() {
            for (o, v) in g.tok_emb.row_mut(t as usize).iter_mut().zip(dx.row(r)) {
                *o += v;
            }
        }
        if let Some(gp) = &mut g.pos_emb {
            for (r, &q) in batch.positions.iter().enumerate() {
                for (o, v) in gp.row_mut(q).iter_mut().zip(dx.row(r)) {
                    *o += v;
                }
            }
        }
        Ok(g)
    }

    /// Mean next-token cross-entropy under `policy`.
    pub fn evaluate(&self, batch: &TokenBatch, policy: &RoutingPolicy) -> Result<(f64, usize)> {
        let pass = self.forward(batch, policy, None)?;
        Ok((pass.ce_loss, pass.num_predictions))
    }

    pub fn train_step(&mut self, batch: &TokenBatch, policy: &RoutingPolicy, balance: Balance, opt: &mut AdamW) -> Result<StepReport> {
        let step = opt.steps_taken();
        let pass = self.forward(batch, policy, None)?;
        let (aux_loss, aux) = if balance.method == Method::Lbl && balance.strength > 0.0 {
            lbl_objective(&pass.decisions, batch, balance.strength)?
        } else {
            (0.0, vec![None; self.config.layers])
        };
        let grads = self.backward(&pass, batch, &aux)?;
        if !grads.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let decay: Vec<bool> = self.params.named().iter().map(|(_, _, d)| *d).collect();
        let gt = grads.tensors();
        opt.update(&mut self.params.tensors_mut(), &gt, &decay);
        if !self.params.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        if balance.method == Method::Eb {
            for (l, dec) in pass.decisions.iter().enumerate() {
                if let Some(dec) = dec {
                    let f = dec.balance_stats(0..dec.num_tokens()).fractions();
                    expert_bias_update(&mut self.biases[l], &f, balance.strength);
                }
            }
        }
        Ok(StepReport {
            lm_loss: pass.ce_loss,
            aux_loss,
            decisions: pass.decisions,
        })
    }
}

/// Finite-difference check of the full objective (cross-entropy plus LBL of
/// strength `lbl_strength`) on `probes` random parameters. Routing decisions
/// are frozen at the unperturbed point so the loss stays smooth.
pub fn check_gradients(
    model: &Model,
    batch: &TokenBatch,
    policy: &RoutingPolicy,
    lbl_strength: f64,
    probes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let pass = model.forward(batch, policy, None)?;
    let objective = |pass: &ForwardPass| -> Result<(f64, AuxGrad)> {
        if lbl_strength > 0.0 {
            let (aux, g) = lbl_objective(&pass.decisions, batch, lbl_strength)?;
            Ok((pass.ce_loss + aux, g))
        } else {
            Ok((pass.ce_loss, vec![None; model.config.layers]))
        }
    };
    let (_, aux) = objective(&pass)?;
    let analytic = model.backward(&pass, batch, &aux)?.flatten();
    let frozen = pass.decisions.clone();
    let base = model.params.flatten();
    let mut rng = rng_for(seed, Stream::Probes);
    let idx = sample_indices(base.len(), probes.min(base.len()), &mut rng);
    let mut probe_model = model.clone();
    grad_check(
        |theta| {
            probe_model.params.assign_flat(theta)?;
            let p = probe_model.forward(batch, policy, Some(&frozen))?;
            Ok(objective(&p)?.0)
        },
        &base,
        &analytic,
        &idx,
        epsilon,
    )
}

/// Scoped LBL summed over MoE layers: each layer contributes `λ` times the
/// mean over scope groups of the scope-aggregated loss.
pub fn lbl_objective(decisions: &[Option<RoutingDecision>], batch: &TokenBatch, strength: f64) -> Result<(f64, AuxGrad)> {
    let groups = batch.groups.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(decisions.len());
    for dec in decisions {
        let Some(dec) = dec else {
            grads.push(None);
            continue;
        };
        let mut layer = Vec::with_capacity(batch.micro_batches.len());
        for mbs in &batch.groups {
            let stats: Vec<_> = batch.micro_batches[mbs.clone()].iter().map(|r| dec.balance_stats(r.clone())).collect();
            let s = scoped_lbl(&stats)?;
            total += strength * s.loss / groups;
            layer.extend(s.grad_mean_probs.into_iter().map(|g| g.into_iter().map(|v| strength * v / groups).collect()));
        }
        grads.push(Some(layer));
    }
    Ok((total, grads))
}

fn moe_forward(x: &Matrix, xn: &Matrix, experts: &[Mlp], dec: &RoutingDecision, identity: bool) -> (Matrix, MoeCache, Vec<u32>) {
    let n = dec.num_tokens();
    let k = dec.top_k;
    let e = dec.num_experts;
    let in_rows = x.rows();
    let (parent, rep, new_row_of): (Vec<u32>, Vec<u32>, Vec<u32>) = if identity {
        let ids: Vec<u32> = (0..n as u32).collect();
        (dec.token_row.clone(), ids.clone(), ids)
    } else {
        let mut map: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut parent = Vec::new();
        let mut rep = Vec::new();
        let mut row_of = Vec::with_capacity(n);
        for i in 0..n {
            let mut key = Vec::with_capacity(1 + 2 * k);
            key.push(dec.token_row[i]);
            key.extend(dec.selected_of(i).iter().map(|&s| s as u32));
            key.extend(dec.dropped_of(i).iter().map(|&b| b as u32));
            let next = parent.len() as u32;
            let r = *map.entry(key).or_insert_with(|| {
                parent.push(dec.token_row[i]);
                rep.push(i as u32);
                next
            });
            row_of.push(r);
        }
        (parent, rep, row_of)
    };
    let out_rows = parent.len();
    let mut expert_rows: Vec<Vec<u32>> = vec![Vec::new(); e];
    let mut pos_map = vec![u32::MAX; e * in_rows];
    let mut expert_pos = vec![u32::MAX; out_rows * k];
    for nr in 0..out_rows {
        let i = rep[nr] as usize;
        let old = parent[nr] as usize;
        for (slot, (&ex, &dropped)) in dec.selected_of(i).iter().zip(dec.dropped_of(i)).enumerate() {
            if dropped {
                continue;
            }
            let m = &mut pos_map[ex * in_rows + old];
            if *m == u32::MAX {
                *m = expert_rows[ex].len() as u32;
                expert_rows[ex].push(old as u32);
            }
            expert_pos[nr * k + slot] = *m;
        }
    }
    let outputs: Vec<Option<(MlpCache, Matrix)>> = expert_rows
        .iter()
        .zip(experts)
        .map(|(rows, m)| {
            if rows.is_empty() {
                return None;
            }
            let idx: Vec<usize> = rows.iter().map(|&r| r as usize).collect();
            let (y, c) = mlp_forward(m, xn.gather_rows(&idx));
            Some((c, y))
        })
        .collect();
    let mut out = Matrix::zeros(out_rows, x.cols());
    for nr in 0..out_rows {
        let i = rep[nr] as usize;
        let row = out.row_mut(nr);
        row.copy_from_slice(x.row(parent[nr] as usize));
        for (slot, (&ex, &w)) in dec.selected_of(i).iter().zip(dec.weights_of(i)).enumerate() {
            let pos = expert_pos[nr * k + slot];
            if pos == u32::MAX {
                continue;
            }
            let y = &outputs[ex].as_ref().expect("expert with rows has output").1;
            for (o, v) in row.iter_mut().zip(y.row(pos as usize)) {
                *o += w * v;
            }
        }
    }
    (
        out,
        MoeCache {
            in_rows,
            parent,
            rep,
            expert_pos,
            expert_rows,
            experts: outputs,
        },
        new_row_of,
    )
}

#[allow(clippy::too_many_arguments)]
fn moe_backward(
    dx: &Matrix,
    xn: &Matrix,
    router: &Matrix,
    experts: &[Mlp],
    dec: &RoutingDecision,
    mc: &MoeCache,
    batch: &TokenBatch,
    aux: Option<&Vec<Vec<f64>>>,
    g_router: &mut Matrix,
    g_experts: &mut [Mlp],
) -> (Matrix, Matrix) {
    let d = dx.cols();
    let e = dec.num_experts;
    let k = dec.top_k;
    let mut dx_old = Matrix::zeros(mc.in_rows, d);
    let mut dz = Matrix::zeros(mc.in_rows, e);
    let mut dys: Vec<Option<Matrix>> = mc
        .expert_rows
        .iter()
        .map(|r| (!r.is_empty()).then(|| Matrix::zeros(r.len(), d)))
        .collect();
    let mut dw = vec![0.0; k];
    for nr in 0..mc.parent.len() {
        let old = mc.parent[nr] as usize;
        let i = mc.rep[nr] as usize;
        let up = dx.row(nr);
        for (o, v) in dx_old.row_mut(old).iter_mut().zip(up) {
            *o += v;
        }
        let w = dec.weights_of(i);
        let sel = dec.selected_of(i);
        for slot in 0..k {
            dw[slot] = 0.0;
            let pos = mc.expert_pos[nr * k + slot];
            if pos == u32::MAX {
                continue;
            }
            let ex = sel[slot];
            let y = &mc.experts[ex].as_ref().expect("expert ran").1;
            let yr = y.row(pos as usize);
            dw[slot] = up.iter().zip(yr).map(|(a, b)| a * b).sum();
            let dy = dys[ex].as_mut().expect("expert ran");
            for (o, v) in dy.row_mut(pos as usize).iter_mut().zip(up) {
                *o += w[slot] * v;
            }
        }
        let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let zr = dz.row_mut(old);
        for slot in 0..k {
            zr[sel[slot]] += w[slot] * (dw[slot] - dot);
        }
    }
    if let Some(coef) = aux {
        let mut c = Matrix::zeros(mc.in_rows, e);
        for (m, range) in batch.micro_batches.iter().enumerate() {
            let scale = 1.0 / range.len() as f64;
            for i in range.clone() {
                let r = dec.token_row[i] as usize;
                for (o, v) in c.row_mut(r).iter_mut().zip(&coef[m]) {
                    *o += scale * v;
                }
            }
        }
        for r in 0..mc.in_rows {
            let gp = dec.probs.row(r);
            let cr = c.row(r);
            let dot: f64 = gp.iter().zip(cr).map(|(a, b)| a * b).sum();
            for (j, o) in dz.row_mut(r).iter_mut().enumerate() {
                *o += gp[j] * (cr[j] - dot);
            }
        }
    }
    let mut dxn = Matrix::zeros(mc.in_rows, d);
    for ex in 0..e {
        if let (Some((cache, _)), Some(dy)) = (&mc.experts[ex], &dys[ex]) {
            let dxe = mlp_backward(&experts[ex], cache, dy, &mut g_experts[ex]);
            for (p, &r) in mc.expert_rows[ex].iter().enumerate() {
                for (o, v) in dxn.row_mut(r as usize).iter_mut().zip(dxe.row(p)) {
                    *o += v;
                }
            }
        }
    }
    gemm(1.0, xn, true, &dz, false, 1.0, g_router);
    gemm(1.0, &dz, false, router, true, 1.0, &mut dxn);
    (dx_old, dxn)
}
