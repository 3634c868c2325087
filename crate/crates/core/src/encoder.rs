//! The sentence encoder: a small post-layer-norm transformer masked-LM that
//! exposes the `[CLS]` hidden state of every layer.
//!
//! Layer `l`'s sentence representation is the position-0 row of that layer's
//! block output. The MLM head projects selected hidden rows through
//! affine + gelu + layer-norm and an output projection weight-tied to the
//! input embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::PAD;
use crate::params::{ParamStore, ParamVars};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive attention-mask value for `[PAD]` key positions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Toy default: trains in minutes while keeping a multi-layer hierarchy.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            max_len: 48,
            vocab_size,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(TensorError::Contract("encoder needs at least one layer".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(TensorError::Contract(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_len < 4 {
            return Err(TensorError::Contract("max_len must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TensorError::Contract("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Whether dropout is live. Eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer `[CLS]` vectors and the final hidden states, as values.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    /// Row `l-1` is the `[CLS]` vector output by transformer layer `l`.
    pub z: Tensor,
    pub final_hidden: Tensor,
}

/// Graph handles from one encode: per-layer `[CLS]` rows (`[1, d]` each),
/// full per-layer outputs, and the final hidden states (`[max_len, d]`).
#[derive(Debug)]
pub struct EncodedVars {
    pub cls: Vec<Var>,
    pub layer_outputs: Vec<Var>,
    pub final_hidden: Var,
}

fn layer_name(l: usize, suffix: &str) -> String {
    format!("encoder.layer{l:02}.{suffix}")
}

/// Initializes all `encoder.*` tensors into `store`, drawing in sorted-name
/// order from `rng`.
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let d = cfg.hidden_dim;
    let mut names: Vec<(String, Vec<usize>, Init)> = vec![
        ("encoder.embed.token".into(), vec![cfg.vocab_size, d], Init::Normal),
        ("encoder.embed.position".into(), vec![cfg.max_len, d], Init::Normal),
        ("encoder.embed.norm.gamma".into(), vec![d], Init::Ones),
        ("encoder.embed.norm.beta".into(), vec![d], Init::Zeros),
        ("encoder.mlm.dense.weight".into(), vec![d, d], Init::Normal),
        ("encoder.mlm.dense.bias".into(), vec![d], Init::Zeros),
        ("encoder.mlm.norm.gamma".into(), vec![d], Init::Ones),
        ("encoder.mlm.norm.beta".into(), vec![d], Init::Zeros),
        ("encoder.mlm.out.bias".into(), vec![cfg.vocab_size], Init::Zeros),
    ];
    for l in 1..=cfg.num_layers {
        for proj in ["q", "k", "v", "out"] {
            names.push((layer_name(l, &format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            names.push((layer_name(l, &format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        names.push((layer_name(l, "attn.norm.gamma"), vec![d], Init::Ones));
        names.push((layer_name(l, "attn.norm.beta"), vec![d], Init::Zeros));
        names.push((layer_name(l, "ffn.in.weight"), vec![d, cfg.ffn_dim], Init::Normal));
        names.push((layer_name(l, "ffn.in.bias"), vec![cfg.ffn_dim], Init::Zeros));
        names.push((layer_name(l, "ffn.out.weight"), vec![cfg.ffn_dim, d], Init::Normal));
        names.push((layer_name(l, "ffn.out.bias"), vec![d], Init::Zeros));
        names.push((layer_name(l, "ffn.norm.gamma"), vec![d], Init::Ones));
        names.push((layer_name(l, "ffn.norm.beta"), vec![d], Init::Zeros));
    }
    names.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, shape, init) in names {
        let tensor = match init {
            Init::Normal => Tensor::randn(&shape, INIT_STD, rng),
            Init::Ones => Tensor::ones(&shape),
            Init::Zeros => Tensor::zeros(&shape),
        };
        store.insert(name, tensor);
    }
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Attention mask values from token ids: 0 for real tokens, a large negative
/// for `[PAD]` key positions.
pub fn pad_attention_mask(ids: &[u32]) -> Vec<f64> {
    ids.iter().map(|&t| if t == PAD { MASK_NEG } else { 0.0 }).collect()
}

fn dropout(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::from_parts(shape, data));
    g.mul(x, mask)
}

/// layer-norm followed by the learned affine terms.
fn affine_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let normed = g.layer_norm(x, 1, LAYER_NORM_EPS)?;
    let scaled = g.mul(normed, gamma)?;
    g.add(scaled, beta)
}

fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let prod = g.matmul(x, weight)?;
    g.add(prod, bias)
}

/// Encodes one fixed-length group with an explicit attention mask. Exposed so
/// pad-content invariance can be exercised with the mask held fixed.
pub fn encode_vars_with_mask(
    g: &mut Graph,
    vars: &ParamVars,
    ids: &[u32],
    attn_mask: &[f64],
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedVars> {
    if ids.len() != cfg.max_len {
        return Err(TensorError::Contract(format!(
            "group length {} must equal max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(TensorError::Contract(format!(
            "token id {bad} out of range for vocab of {}",
            cfg.vocab_size
        )));
    }
    let n = cfg.max_len;
    let d = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();

    let id_idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let pos_idx: Vec<usize> = (0..n).collect();
    let tok = g.embedding(vars.var("encoder.embed.token"), &id_idx)?;
    let pos = g.embedding(vars.var("encoder.embed.position"), &pos_idx)?;
    let summed = g.add(tok, pos)?;
    let mut x = affine_norm(
        g,
        summed,
        vars.var("encoder.embed.norm.gamma"),
        vars.var("encoder.embed.norm.beta"),
    )?;
    x = dropout(g, x, cfg.dropout_rate, mode, rng)?;

    let mask = g.constant(Tensor::from_parts(vec![n], attn_mask.to_vec()));
    let scale = 1.0 / (hd as f64).sqrt();

    let mut cls = Vec::with_capacity(cfg.num_layers);
    let mut layer_outputs = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        let q = linear(g, x, vars.var(&layer_name(l, "attn.q.weight")), vars.var(&layer_name(l, "attn.q.bias")))?;
        let k = linear(g, x, vars.var(&layer_name(l, "attn.k.weight")), vars.var(&layer_name(l, "attn.k.bias")))?;
        let v = linear(g, x, vars.var(&layer_name(l, "attn.v.weight")), vars.var(&layer_name(l, "attn.v.bias")))?;

        let mut head_ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * hd, hd)?;
            let kh = g.slice(k, 1, h * hd, hd)?;
            let vh = g.slice(v, 1, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scaled = g.scale(raw, scale)?;
            let masked = g.mask_add(scaled, mask)?;
            let probs = g.softmax(masked, 1)?;
            head_ctx.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat(&head_ctx, 1)?;
        let attn_out = linear(
            g,
            ctx,
            vars.var(&layer_name(l, "attn.out.weight")),
            vars.var(&layer_name(l, "attn.out.bias")),
        )?;
        let attn_out = dropout(g, attn_out, cfg.dropout_rate, mode, rng)?;
        let residual = g.add(x, attn_out)?;
        x = affine_norm(
            g,
            residual,
            vars.var(&layer_name(l, "attn.norm.gamma")),
            vars.var(&layer_name(l, "attn.norm.beta")),
        )?;

        let hidden = linear(
            g,
            x,
            vars.var(&layer_name(l, "ffn.in.weight")),
            vars.var(&layer_name(l, "ffn.in.bias")),
        )?;
        let act = g.gelu(hidden)?;
        let ffn_out = linear(
            g,
            act,
            vars.var(&layer_name(l, "ffn.out.weight")),
            vars.var(&layer_name(l, "ffn.out.bias")),
        )?;
        let ffn_out = dropout(g, ffn_out, cfg.dropout_rate, mode, rng)?;
        let residual = g.add(x, ffn_out)?;
        x = affine_norm(
            g,
            residual,
            vars.var(&layer_name(l, "ffn.norm.gamma")),
            vars.var(&layer_name(l, "ffn.norm.beta")),
        )?;

        layer_outputs.push(x);
        cls.push(g.slice(x, 0, 0, 1)?);
    }

    Ok(EncodedVars { cls, layer_outputs, final_hidden: x })
}

/// Encodes one group, deriving the attention mask from `[PAD]` positions.
pub fn encode_vars(
    g: &mut Graph,
    vars: &ParamVars,
    ids: &[u32],
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedVars> {
    let mask = pad_attention_mask(ids);
    encode_vars_with_mask(g, vars, ids, &mask, cfg, mode, rng)
}

/// Eval-mode encode producing concrete [`LayerStates`].
pub fn encode(params: &ParamStore, ids: &[u32], cfg: &EncoderConfig) -> Result<LayerStates> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let mut rng = rand::SeedableRng::seed_from_u64(0); // unused in eval mode
    let enc = encode_vars(&mut g, &vars, ids, cfg, Mode::Eval, &mut rng)?;
    let mut z_data = Vec::with_capacity(cfg.num_layers * cfg.hidden_dim);
    for &c in &enc.cls {
        z_data.extend_from_slice(g.value(c).data());
    }
    Ok(LayerStates {
        z: Tensor::from_parts(vec![cfg.num_layers, cfg.hidden_dim], z_data),
        final_hidden: g.value(enc.final_hidden).clone(),
    })
}

/// MLM head: selects `positions` rows of `final_hidden`, applies
/// affine + gelu + layer-norm, then projects through the transposed token
/// embeddings plus an output bias. Empty positions give a `[0, vocab]` result.
pub fn mlm_logits_vars(
    g: &mut Graph,
    vars: &ParamVars,
    final_hidden: Var,
    positions: &[usize],
    cfg: &EncoderConfig,
) -> Result<Var> {
    if positions.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[0, cfg.vocab_size])));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.max_len) {
        return Err(TensorError::Contract(format!(
            "masked position {bad} out of range for max_len {}",
            cfg.max_len
        )));
    }
    let rows: Vec<Var> = positions
        .iter()
        .map(|&p| g.slice(final_hidden, 0, p, 1))
        .collect::<Result<_>>()?;
    let gathered = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };

    let dense = linear(
        g,
        gathered,
        vars.var("encoder.mlm.dense.weight"),
        vars.var("encoder.mlm.dense.bias"),
    )?;
    let act = g.gelu(dense)?;
    let normed = affine_norm(g, act, vars.var("encoder.mlm.norm.gamma"), vars.var("encoder.mlm.norm.beta"))?;
    let tied = g.transpose(vars.var("encoder.embed.token"))?;
    let proj = g.matmul(normed, tied)?;
    g.add(proj, vars.var("encoder.mlm.out.bias"))
}
