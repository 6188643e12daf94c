//! Pre-norm transformer whose layers each attend under their scheduled mask,
//! with an item-embedding projection head at the read-out position.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{causal_mask, mask_for_scheme, AttentionMask, LayerSchedule, MaskError, Scheme};
use crate::numerics::checkpoint::{self, CheckpointError};
use crate::numerics::{check_gradients, GradCheckReport, NumericsError, Tape, Tensor, Var};
use crate::segmentation::{ItemId, TokenizedPrompt};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("prompt of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("k = {k} exceeds the {n_items} items in the catalog")]
    KTooLarge { k: usize, n_items: usize },
    #[error("token {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("target item {0} outside the catalog")]
    UnknownTarget(ItemId),
    #[error("layer {layer}/head {head} out of range")]
    NoSuchHead { layer: usize, head: usize },
    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub n_items: usize,
    pub schedule: LayerSchedule,
    pub seed: u64,
}

impl ModelConfig {
    /// Six layers: two IN, three OR, one CR; d_model 64 with 4 heads.
    pub fn toy(vocab_size: usize, n_items: usize, max_seq_len: usize) -> Self {
        use crate::mask::{build_schedule, BlockOrder};
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 6,
            ffn_dim: 128,
            max_seq_len,
            vocab_size,
            n_items,
            schedule: build_schedule(6, 2, 1, BlockOrder::CANONICAL, Scheme::Cr)
                .expect("valid default schedule"),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.schedule.len() != self.n_layers {
            return fail(format!(
                "schedule has {} layers, config has {}",
                self.schedule.len(),
                self.n_layers
            ));
        }
        if self.ffn_dim == 0 || self.max_seq_len == 0 || self.vocab_size == 0 || self.n_items == 0 {
            return fail("ffn_dim, max_seq_len, vocab_size and n_items must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

const LAYER_TENSORS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "w_q", "w_k", "w_v", "w_o", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2",
];

/// Offsets into a layer's block of tensors.
mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_Q: usize = 2;
    pub const W_K: usize = 3;
    pub const W_V: usize = 4;
    pub const W_O: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FFN_W1: usize = 8;
    pub const FFN_B1: usize = 9;
    pub const FFN_W2: usize = 10;
    pub const FFN_B2: usize = 11;
}

/// All trainable tensors, in a fixed canonical order:
/// token embedding, position embedding, 12 tensors per layer, final norm
/// gain and bias, item embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const TOKEN_EMB: usize = 0;
const POS_EMB: usize = 1;
const FIRST_LAYER: usize = 2;

fn layer_base(layer: usize) -> usize {
    FIRST_LAYER + layer * LAYER_TENSORS.len()
}

impl ModelParams {
    fn shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (config.d_model, config.ffn_dim);
        let mut out = vec![
            ("token_embedding".to_string(), vec![config.vocab_size, d]),
            (
                "position_embedding".to_string(),
                vec![config.max_seq_len, d],
            ),
        ];
        for l in 0..config.n_layers {
            let shapes = [
                vec![1, d],
                vec![1, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![1, d],
                vec![1, d],
                vec![d, f],
                vec![1, f],
                vec![f, d],
                vec![1, d],
            ];
            for (name, shape) in LAYER_TENSORS.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm.gain".into(), vec![1, d]));
        out.push(("final_norm.bias".into(), vec![1, d]));
        out.push(("item_embedding".into(), vec![config.n_items, d]));
        out
    }

    /// Seeded initialization: embeddings ~ N(0, 1/d_model), weight matrices
    /// ~ N(0, 1/fan_in), norm gains 1, biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in Self::shapes(config) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; len]
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; len]
            } else {
                let std = if name.contains("embedding") {
                    1.0 / (config.d_model as f64).sqrt()
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { names, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        checkpoint::save(
            path,
            self.names.iter().map(String::as_str).zip(&self.tensors),
        )?;
        Ok(())
    }

    /// Loads a checkpoint and checks every name and shape against `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self, ModelError> {
        let entries = checkpoint::load(path)?;
        let expected = Self::shapes(config);
        if entries.len() != expected.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} tensors, expected {}",
                entries.len(),
                expected.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (ename, eshape)) in entries.into_iter().zip(expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "{name} {:?}, expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }
}

/// Per-layer masks, each already intersected with the causal mask.
#[derive(Debug, Clone)]
pub struct LayerMasks(Vec<Arc<AttentionMask>>);

impl LayerMasks {
    /// One mask per layer from the schedule. Masks for equal schemes are
    /// shared.
    pub fn scheduled(
        schedule: &LayerSchedule,
        prompt: &TokenizedPrompt,
    ) -> Result<Self, ModelError> {
        let causal = causal_mask(prompt.len())?;
        let mut built: HashMap<Scheme, Arc<AttentionMask>> = HashMap::new();
        let mut out = Vec::with_capacity(schedule.len());
        for &scheme in schedule.schemes() {
            let m = match built.get(&scheme) {
                Some(m) => Arc::clone(m),
                None => {
                    let m = Arc::new(causal.compose(&mask_for_scheme(scheme, prompt))?);
                    built.insert(scheme, Arc::clone(&m));
                    m
                }
            };
            out.push(m);
        }
        Ok(Self(out))
    }

    /// Plain causal attention in every layer, without consulting any
    /// schedule.
    pub fn causal_only(n_layers: usize, prompt_len: usize) -> Result<Self, ModelError> {
        let causal = Arc::new(causal_mask(prompt_len)?);
        Ok(Self(vec![causal; n_layers]))
    }

    pub fn layer(&self, l: usize) -> &Arc<AttentionMask> {
        &self.0[l]
    }
}

/// Which masks a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaskRouting {
    /// Masks from `config.schedule`.
    #[default]
    Scheduled,
    /// Causal mask everywhere; ignores the schedule.
    CausalReference,
}

impl MaskRouting {
    pub fn masks(
        self,
        config: &ModelConfig,
        prompt: &TokenizedPrompt,
    ) -> Result<LayerMasks, ModelError> {
        match self {
            MaskRouting::Scheduled => LayerMasks::scheduled(&config.schedule, prompt),
            MaskRouting::CausalReference => LayerMasks::causal_only(config.n_layers, prompt.len()),
        }
    }
}

struct BlockVars {
    out: Var,
    heads_concat: Var,
    weights: Vec<Var>,
}

/// One pre-norm block: `x + W_o·MHA(LN1(x))`, then `+ FFN(LN2(·))`.
fn block(
    tape: &mut Tape,
    x: Var,
    p: &[Var],
    mask: &Arc<AttentionMask>,
    n_heads: usize,
) -> Result<BlockVars, NumericsError> {
    let h = tape.layer_norm(x, p[slot::LN1_G], p[slot::LN1_B])?;
    let q = tape.matmul(h, p[slot::W_Q])?;
    let k = tape.matmul(h, p[slot::W_K])?;
    let v = tape.matmul(h, p[slot::W_V])?;
    let (qs, ks, vs) = (
        tape.split_heads(q, n_heads)?,
        tape.split_heads(k, n_heads)?,
        tape.split_heads(v, n_heads)?,
    );
    let scale = 1.0 / (tape.value(qs[0]).cols() as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for ((&qh, &kh), &vh) in qs.iter().zip(&ks).zip(&vs) {
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale);
        let w = tape.masked_softmax(scores, mask)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let heads_concat = tape.concat_heads(&outs)?;
    let attn = tape.matmul(heads_concat, p[slot::W_O])?;
    let x = tape.add(x, attn)?;

    let h = tape.layer_norm(x, p[slot::LN2_G], p[slot::LN2_B])?;
    let f = tape.matmul(h, p[slot::FFN_W1])?;
    let f = tape.add_row(f, p[slot::FFN_B1])?;
    let f = tape.relu(f);
    let f = tape.matmul(f, p[slot::FFN_W2])?;
    let f = tape.add_row(f, p[slot::FFN_B2])?;
    let out = tape.add(x, f)?;
    Ok(BlockVars {
        out,
        heads_concat,
        weights,
    })
}

struct Graph {
    params: Vec<Var>,
    hidden: Vec<Var>,
    attention: Vec<Vec<Var>>,
    scores: Var,
}

fn build_graph(
    tape: &mut Tape,
    prompt: &TokenizedPrompt,
    params: &ModelParams,
    config: &ModelConfig,
    masks: &LayerMasks,
) -> Result<Graph, ModelError> {
    let n = prompt.len();
    if n > config.max_seq_len {
        return Err(ModelError::TooLong {
            len: n,
            max: config.max_seq_len,
        });
    }
    if let Some(&t) = prompt
        .tokens()
        .iter()
        .find(|&&t| t as usize >= config.vocab_size)
    {
        return Err(ModelError::UnknownToken(t));
    }
    let pv: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();

    let tokens: Vec<usize> = prompt.tokens().iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.gather(pv[TOKEN_EMB], &tokens)?;
    let pos = tape.gather(pv[POS_EMB], &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mut hidden = vec![x];
    let mut attention = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let base = layer_base(l);
        let b = block(
            tape,
            x,
            &pv[base..base + LAYER_TENSORS.len()],
            masks.layer(l),
            config.n_heads,
        )?;
        x = b.out;
        hidden.push(x);
        attention.push(b.weights);
    }
    let fin = layer_base(config.n_layers);
    let normed = tape.layer_norm(x, pv[fin], pv[fin + 1])?;
    let readout = tape.select_row(normed, prompt.readout_position())?;
    let items_t = tape.transpose(pv[fin + 2]);
    let scores = tape.matmul(readout, items_t)?;
    Ok(Graph {
        params: pv,
        hidden,
        attention,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Embedding output followed by the output of every layer (n×d each).
    pub hidden: Vec<Tensor>,
    /// `attention[layer][head]` is the n×n weight matrix, when retained.
    pub attention: Option<Vec<Vec<Tensor>>>,
    /// Scheme of every layer as actually applied.
    pub schemes: Vec<Scheme>,
    /// One score per catalog item.
    pub scores: Vec<f64>,
}

impl ForwardTrace {
    pub fn weights(&self, layer: usize, head: usize) -> Result<&Tensor, ModelError> {
        self.attention
            .as_ref()
            .and_then(|a| a.get(layer))
            .and_then(|h| h.get(head))
            .ok_or(ModelError::NoSuchHead { layer, head })
    }
}

pub fn forward_with(
    prompt: &TokenizedPrompt,
    params: &ModelParams,
    config: &ModelConfig,
    routing: MaskRouting,
    retain_attention: bool,
) -> Result<ForwardTrace, ModelError> {
    let masks = routing.masks(config, prompt)?;
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, prompt, params, config, &masks)?;
    let schemes = match routing {
        MaskRouting::Scheduled => config.schedule.schemes().to_vec(),
        MaskRouting::CausalReference => vec![Scheme::Or; config.n_layers],
    };
    Ok(ForwardTrace {
        hidden: g.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
        attention: retain_attention.then(|| {
            g.attention
                .iter()
                .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
                .collect()
        }),
        schemes,
        scores: tape.value(g.scores).data().to_vec(),
    })
}

/// Scheduled forward pass.
pub fn forward(
    prompt: &TokenizedPrompt,
    params: &ModelParams,
    config: &ModelConfig,
    retain_attention: bool,
) -> Result<ForwardTrace, ModelError> {
    forward_with(
        prompt,
        params,
        config,
        MaskRouting::Scheduled,
        retain_attention,
    )
}

/// Plain causal transformer over the same parameters.
pub fn forward_reference(
    prompt: &TokenizedPrompt,
    params: &ModelParams,
    config: &ModelConfig,
    retain_attention: bool,
) -> Result<ForwardTrace, ModelError> {
    forward_with(
        prompt,
        params,
        config,
        MaskRouting::CausalReference,
        retain_attention,
    )
}

/// Cross-entropy of `target` at the read-out and its gradient for every
/// parameter tensor, in canonical order.
pub fn loss_and_grads(
    prompt: &TokenizedPrompt,
    target: ItemId,
    params: &ModelParams,
    config: &ModelConfig,
    routing: MaskRouting,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    if target >= config.n_items {
        return Err(ModelError::UnknownTarget(target));
    }
    let masks = routing.masks(config, prompt)?;
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, prompt, params, config, &masks)?;
    let loss = tape.cross_entropy(g.scores, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = g
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.take_or_zeros(v, t))
        .collect();
    Ok((value, out))
}

/// Loss only, without a backward pass.
pub fn loss(
    prompt: &TokenizedPrompt,
    target: ItemId,
    params: &ModelParams,
    config: &ModelConfig,
    routing: MaskRouting,
) -> Result<f64, ModelError> {
    let masks = routing.masks(config, prompt)?;
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, prompt, params, config, &masks)?;
    let loss = tape.cross_entropy(g.scores, target)?;
    Ok(tape.value(loss).data()[0])
}

/// Output of a single attention block evaluated in isolation.
#[derive(Debug, Clone)]
pub struct AttentionLayerOutput {
    /// Concatenated per-head `softmax(QKᵀ/√d_h)·V`, before `W_o` and the
    /// residual.
    pub heads: Tensor,
    /// Block output after residuals and the feed-forward sublayer.
    pub output: Tensor,
    pub weights: Vec<Tensor>,
}

/// Runs layer `layer` of `params` on hidden states `x` under `mask`.
pub fn attention_layer(
    x: &Tensor,
    mask: &AttentionMask,
    params: &ModelParams,
    config: &ModelConfig,
    layer: usize,
) -> Result<AttentionLayerOutput, ModelError> {
    if layer >= config.n_layers {
        return Err(ModelError::NoSuchHead { layer, head: 0 });
    }
    if x.rows() > config.max_seq_len || x.cols() != config.d_model || mask.len() != x.rows() {
        return Err(ModelError::Numerics(NumericsError::Shape(format!(
            "attention input {:?} with mask {}",
            x.shape(),
            mask.len()
        ))));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let base = layer_base(layer);
    let pv: Vec<Var> = params.tensors[base..base + LAYER_TENSORS.len()]
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let mask = Arc::new(mask.clone());
    let b = block(&mut tape, xv, &pv, &mask, config.n_heads)?;
    Ok(AttentionLayerOutput {
        heads: tape.value(b.heads_concat).clone(),
        output: tape.value(b.out).clone(),
        weights: b.weights.iter().map(|&w| tape.value(w).clone()).collect(),
    })
}

/// Top-`k` item ids by score, ties broken by ascending id.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<ItemId>, ModelError> {
    if k > scores.len() {
        return Err(ModelError::KTooLarge {
            k,
            n_items: scores.len(),
        });
    }
    let mut ids: Vec<ItemId> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

pub fn predict_next_item(trace: &ForwardTrace, k: usize) -> Result<Vec<ItemId>, ModelError> {
    top_k(&trace.scores, k)
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn batch_loss_and_grads(
    batch: &[(TokenizedPrompt, ItemId)],
    params: &ModelParams,
    config: &ModelConfig,
    routing: MaskRouting,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (prompt, target) in batch {
        let (l, g) = loss_and_grads(prompt, *target, params, config, routing)?;
        total += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
        }
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut grads = acc.unwrap_or_default();
    grads.iter_mut().for_each(|g| g.scale_in_place(scale));
    Ok((total * scale, grads))
}

/// Central-difference check of the model gradient on `batch`.
pub fn grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[(TokenizedPrompt, ItemId)],
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, analytic) = batch_loss_and_grads(batch, params, config, MaskRouting::Scheduled)?;
    let mut work = params.clone();
    let names = work.names.clone();
    let mut failure: Option<ModelError> = None;
    let report = check_gradients(
        &mut work.tensors,
        &analytic,
        |ts| {
            let p = ModelParams {
                names: names.clone(),
                tensors: ts.to_vec(),
            };
            let mut total = 0.0;
            for (prompt, target) in batch {
                match loss(prompt, *target, &p, config, MaskRouting::Scheduled) {
                    Ok(l) => total += l,
                    Err(e) => {
                        failure.get_or_insert(e);
                    }
                }
            }
            total / batch.len().max(1) as f64
        },
        min_coords,
        eps,
        seed,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
