//! Frozen transformer encoders with per-layer prompt injection.
//!
//! Pre-layer-norm blocks. Prompts are injected fresh into every layer's
//! input as `[cls, prompts, tokens]` and their outputs are discarded after
//! the layer, so layer i's prompts never reach layer i+1's key/value set.

use crate::error::{Error, Result};
use crate::tensor::{orthogonal_init, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    /// token encoders only; vector encoders tokenize a raw feature instead
    pub vocab: Option<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.num_layers == 0 || self.seq_len == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// Frozen encoder weights. Nothing here ever enters an optimizer
/// parameter set; all tensors are recorded on tapes as constants.
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub layers: Vec<LayerWeights>,
    /// token encoders: [vocab × d]
    pub token_embed: Option<Tensor>,
    /// vector encoders: [d_in × (seq_len·d)] linear tokenization
    pub tokenizer: Option<Tensor>,
    pub pos_embed: Tensor,
    pub cls_embed: Tensor,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
}

fn identity_plus_noise(d: usize, noise_std: f64, rng: &mut Rng) -> Tensor {
    let mut t = rng.normal_tensor(d, d, 0.0, noise_std);
    for i in 0..d {
        t.data_mut()[i * d + i] += 1.0;
    }
    t
}

/// Pretrained-style frozen layer: identity-dominant projections
/// throughout and a mild feed-forward, so token content survives to the
/// top, attention is associative (a query matches keys it correlates
/// with), and prompt values propagate usefully. Fully i.i.d. random
/// layers bury the input signal and leave prompts nothing to steer: a
/// prompt could never make the class token attend to a chosen position,
/// because the query it induces has no systematic relation to that
/// position's key.
fn init_layer(d: usize, d_ff: usize, rng: &mut Rng) -> LayerWeights {
    let std = (1.0 / d as f64).sqrt();
    LayerWeights {
        w_q: identity_plus_noise(d, std, rng),
        b_q: Tensor::zeros(1, d),
        w_k: identity_plus_noise(d, std, rng),
        b_k: Tensor::zeros(1, d),
        w_v: identity_plus_noise(d, 0.05 * std, rng),
        b_v: Tensor::zeros(1, d),
        w_o: identity_plus_noise(d, 0.05 * std, rng),
        b_o: Tensor::zeros(1, d),
        ln1_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
        ln1_bias: Tensor::zeros(1, d),
        ln2_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
        ln2_bias: Tensor::zeros(1, d),
        w_ff1: rng.normal_tensor(d, d_ff, 0.0, std),
        b_ff1: Tensor::zeros(1, d_ff),
        w_ff2: rng.normal_tensor(d_ff, d, 0.0, 0.1 / (d_ff as f64).sqrt()),
        b_ff2: Tensor::zeros(1, d),
    }
}

/// Token and positional embedding tables for a "pretrained" encoder.
///
/// Pretrained encoders place distinct tokens and positions in
/// well-separated directions; that separation is what lets a linear
/// readout recover a single token's identity from a soft attention
/// mixture without cross-talk from the other positions. We reproduce it
/// directly: when vocab + seq_len directions fit in d_model both tables
/// come from disjoint rows of one orthonormal basis (mutually orthogonal,
/// scaled to the √d norm of a unit-variance embedding); otherwise each
/// table is independently orthonormalized as far as the dimension allows.
fn init_embeddings(vocab: usize, seq_len: usize, d: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let root_d = (d as f64).sqrt();
    if vocab + seq_len <= d {
        let basis = orthogonal_init(vocab + seq_len, d, rng)?;
        let mut te = Tensor::zeros(vocab, d);
        let mut pe = Tensor::zeros(seq_len, d);
        te.data_mut()
            .copy_from_slice(&basis.data()[..vocab * d]);
        pe.data_mut()
            .copy_from_slice(&basis.data()[vocab * d..(vocab + seq_len) * d]);
        for v in te.data_mut() {
            *v *= root_d;
        }
        for v in pe.data_mut() {
            *v *= root_d;
        }
        Ok((te, pe))
    } else {
        let mut te = orthogonal_init(vocab, d, rng)?;
        let mut pe = orthogonal_init(seq_len, d, rng)?;
        for v in te.data_mut() {
            *v *= root_d;
        }
        for v in pe.data_mut() {
            *v *= root_d;
        }
        Ok((te, pe))
    }
}

impl EncoderWeights {
    /// Seeded random init standing in for a pretrained token encoder.
    pub fn init_token_encoder(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg
            .vocab
            .ok_or_else(|| Error::Config("token encoder needs a vocab size".into()))?;
        let d = cfg.d_model;
        let (token_embed, pos_embed) = init_embeddings(vocab, cfg.seq_len, d, rng)?;
        Ok(EncoderWeights {
            layers: (0..cfg.num_layers)
                .map(|_| init_layer(d, cfg.d_ff, rng))
                .collect(),
            token_embed: Some(token_embed),
            tokenizer: None,
            pos_embed,
            cls_embed: rng.normal_tensor(1, d, 0.0, 1.0),
            final_ln_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
            final_ln_bias: Tensor::zeros(1, d),
        })
    }

    /// Encoder over a linear tokenization of a raw feature vector of
    /// dimension `d_input`.
    pub fn init_vector_encoder(cfg: &EncoderConfig, d_input: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(EncoderWeights {
            layers: (0..cfg.num_layers)
                .map(|_| init_layer(d, cfg.d_ff, rng))
                .collect(),
            token_embed: None,
            tokenizer: Some(rng.normal_tensor(
                d_input,
                cfg.seq_len * d,
                0.0,
                (1.0 / d_input as f64).sqrt(),
            )),
            pos_embed: rng.normal_tensor(cfg.seq_len, d, 0.0, 0.5),
            cls_embed: rng.normal_tensor(1, d, 0.0, 1.0),
            final_ln_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
            final_ln_bias: Tensor::zeros(1, d),
        })
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor| out.push((name, t.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("w_q", &l.w_q),
                ("b_q", &l.b_q),
                ("w_k", &l.w_k),
                ("b_k", &l.b_k),
                ("w_v", &l.w_v),
                ("b_v", &l.b_v),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w_ff1", &l.w_ff1),
                ("b_ff1", &l.b_ff1),
                ("w_ff2", &l.w_ff2),
                ("b_ff2", &l.b_ff2),
            ] {
                push(format!("{prefix}.layer{i}.{n}"), t);
            }
        }
        if let Some(t) = &self.token_embed {
            push(format!("{prefix}.token_embed"), t);
        }
        if let Some(t) = &self.tokenizer {
            push(format!("{prefix}.tokenizer"), t);
        }
        push(format!("{prefix}.pos_embed"), &self.pos_embed);
        push(format!("{prefix}.cls_embed"), &self.cls_embed);
        push(format!("{prefix}.final_ln_gain"), &self.final_ln_gain);
        push(format!("{prefix}.final_ln_bias"), &self.final_ln_bias);
        out
    }
}

/// Input to one prompted layer; concatenation order is [cls, prompts, tokens].
pub struct LayerInput {
    pub cls: Var,
    /// [p×d]; None means p = 0
    pub prompts: Option<Var>,
    pub tokens: Var,
}

/// Embed a token-id sequence: learned class embedding plus token and
/// positional embeddings. All constants on the tape (encoder is frozen).
pub fn embed(
    tape: &mut Tape,
    tokens: &[usize],
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<(Var, Var)> {
    let vocab = cfg
        .vocab
        .ok_or_else(|| Error::Config("embed: token encoder required".into()))?;
    if tokens.len() != cfg.seq_len {
        return Err(Error::Data(format!(
            "embed: expected {} tokens, got {}",
            cfg.seq_len,
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("token id {bad} out of vocab {vocab}")));
    }
    let emb = weights.token_embed.as_ref().unwrap();
    let d = cfg.d_model;
    let mut data = Vec::with_capacity(cfg.seq_len * d);
    for (pos, &t) in tokens.iter().enumerate() {
        for j in 0..d {
            data.push(emb.at(t, j) + weights.pos_embed.at(pos, j));
        }
    }
    let t0 = tape.constant(Tensor::new(vec![cfg.seq_len, d], data)?)?;
    let cls = tape.constant(weights.cls_embed.clone())?;
    Ok((cls, t0))
}

/// Tokenize a raw feature vector [1×d_in] into the vector encoder's input.
pub fn embed_vector(
    tape: &mut Tape,
    y: Var,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<(Var, Var)> {
    let tok = weights
        .tokenizer
        .as_ref()
        .ok_or_else(|| Error::Config("embed_vector: vector encoder required".into()))?;
    let d = cfg.d_model;
    let w = tape.constant(tok.clone())?;
    let flat = tape.matmul(y, w)?; // [1 × s·d]
    let toks = tape.reshape(flat, vec![cfg.seq_len, d])?;
    let pos = tape.constant(weights.pos_embed.clone())?;
    let toks = tape.add(toks, pos)?;
    let cls = tape.constant(weights.cls_embed.clone())?;
    Ok((cls, toks))
}

fn attention(
    tape: &mut Tape,
    x: Var,
    lw: &LayerWeights,
    num_heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let dh = d / num_heads;
    let wq = tape.constant(lw.w_q.clone())?;
    let bq = tape.constant(lw.b_q.clone())?;
    let wk = tape.constant(lw.w_k.clone())?;
    let bk = tape.constant(lw.b_k.clone())?;
    let wv = tape.constant(lw.w_v.clone())?;
    let bv = tape.constant(lw.b_v.clone())?;
    let wo = tape.constant(lw.w_o.clone())?;
    let bo = tape.constant(lw.b_o.clone())?;
    let q = tape.matmul(x, wq)?;
    let q = tape.add_row(q, bq)?;
    let k = tape.matmul(x, wk)?;
    let k = tape.add_row(k, bk)?;
    let v = tape.matmul(x, wv)?;
    let v = tape.add_row(v, bv)?;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let kt = tape.transpose_var(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax_rows(logits, 1.0)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, wo)?;
    tape.add_row(out, bo)
}

/// One pre-LN transformer layer over [cls, prompts, tokens]. Outputs at
/// prompt positions are discarded; only cls and token rows are returned.
pub fn layer_forward(
    tape: &mut Tape,
    input: &LayerInput,
    lw: &LayerWeights,
    num_heads: usize,
) -> Result<(Var, Var)> {
    let d = tape.value(input.cls).cols();
    let p = match input.prompts {
        Some(pv) => {
            let v = tape.value(pv);
            if v.cols() != d {
                return Err(Error::Shape(format!(
                    "layer_forward: prompt dim {} vs model dim {d}",
                    v.cols()
                )));
            }
            v.rows()
        }
        None => 0,
    };
    let s = tape.value(input.tokens).rows();
    let seq = match input.prompts {
        Some(pv) => tape.concat_rows(&[input.cls, pv, input.tokens])?,
        None => tape.concat_rows(&[input.cls, input.tokens])?,
    };
    let ln1g = tape.constant(lw.ln1_gain.clone())?;
    let ln1b = tape.constant(lw.ln1_bias.clone())?;
    let normed = tape.layer_norm_rows(seq, ln1g, ln1b, 1e-5)?;
    let att = attention(tape, normed, lw, num_heads)?;
    let h = tape.add(seq, att)?;
    let ln2g = tape.constant(lw.ln2_gain.clone())?;
    let ln2b = tape.constant(lw.ln2_bias.clone())?;
    let normed2 = tape.layer_norm_rows(h, ln2g, ln2b, 1e-5)?;
    let w1 = tape.constant(lw.w_ff1.clone())?;
    let b1 = tape.constant(lw.b_ff1.clone())?;
    let w2 = tape.constant(lw.w_ff2.clone())?;
    let b2 = tape.constant(lw.b_ff2.clone())?;
    let ff = tape.matmul(normed2, w1)?;
    let ff = tape.add_row(ff, b1)?;
    let ff = tape.gelu(ff)?;
    let ff = tape.matmul(ff, w2)?;
    let ff = tape.add_row(ff, b2)?;
    let out = tape.add(h, ff)?;
    let cls = tape.slice_rows(out, 0, 1)?;
    let tokens = tape.slice_rows(out, 1 + p, 1 + p + s)?;
    Ok((cls, tokens))
}

/// Per-layer prompt source for the main encoder. Called exactly once per
/// layer, in order, with the previous layer's class token.
pub trait PromptProvider {
    fn assembly(&mut self, tape: &mut Tape, layer: usize, cls_prev: Var) -> Result<Option<Var>>;
}

/// Provider with no prompts at any layer (frozen baseline).
pub struct NoPrompts;

impl PromptProvider for NoPrompts {
    fn assembly(&mut self, _: &mut Tape, _: usize, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Run the main encoder over embedded tokens with per-layer prompt
/// injection; returns the final class token [1×d].
pub fn encode_main(
    tape: &mut Tape,
    tokens: &[usize],
    provider: &mut dyn PromptProvider,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<Var> {
    let (mut cls, mut toks) = embed(tape, tokens, cfg, weights)?;
    for (i, lw) in weights.layers.iter().enumerate() {
        let prompts = provider.assembly(tape, i, cls)?;
        let input = LayerInput {
            cls,
            prompts,
            tokens: toks,
        };
        let (c, t) = layer_forward(tape, &input, lw, cfg.num_heads)?;
        cls = c;
        toks = t;
    }
    let g = tape.constant(weights.final_ln_gain.clone())?;
    let b = tape.constant(weights.final_ln_bias.clone())?;
    tape.layer_norm_rows(cls, g, b, 1e-5)
}

/// Per-layer, per-instance prompt source for batched main encoding.
pub trait BatchPromptProvider {
    fn assembly(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        instance: usize,
        cls_prev: Var,
    ) -> Result<Option<Var>>;
}

/// Multi-head attention over a stack of independent sequences. `x` holds
/// the sequences row-concatenated; `rows[i]` is the length of sequence i.
/// Projections and the output map run on the full stack; the softmax
/// mixing is restricted to each sequence's own rows, so every output row
/// is bitwise identical to running [`attention`] per sequence.
fn attention_stacked(
    tape: &mut Tape,
    x: Var,
    rows: &[usize],
    lw: &LayerWeights,
    num_heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let dh = d / num_heads;
    let wq = tape.constant(lw.w_q.clone())?;
    let bq = tape.constant(lw.b_q.clone())?;
    let wk = tape.constant(lw.w_k.clone())?;
    let bk = tape.constant(lw.b_k.clone())?;
    let wv = tape.constant(lw.w_v.clone())?;
    let bv = tape.constant(lw.b_v.clone())?;
    let wo = tape.constant(lw.w_o.clone())?;
    let bo = tape.constant(lw.b_o.clone())?;
    let q = tape.matmul(x, wq)?;
    let q = tape.add_row(q, bq)?;
    let k = tape.matmul(x, wk)?;
    let k = tape.add_row(k, bk)?;
    let v = tape.matmul(x, wv)?;
    let v = tape.add_row(v, bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    // heads_out[i][h]: attention output of head h for sequence i
    let mut heads_out: Vec<Vec<Var>> = vec![Vec::with_capacity(num_heads); rows.len()];
    for h in 0..num_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let mut off = 0;
        for (i, &r) in rows.iter().enumerate() {
            let qi = tape.slice_rows(qh, off, off + r)?;
            let ki = tape.slice_rows(kh, off, off + r)?;
            let vi = tape.slice_rows(vh, off, off + r)?;
            let kt = tape.transpose_var(ki)?;
            let logits = tape.matmul(qi, kt)?;
            let logits = tape.scale(logits, scale)?;
            let probs = tape.softmax_rows(logits, 1.0)?;
            heads_out[i].push(tape.matmul(probs, vi)?);
            off += r;
        }
    }
    let mut pieces = Vec::with_capacity(rows.len());
    for per_instance in &heads_out {
        pieces.push(tape.concat_cols(per_instance)?);
    }
    let cat = tape.concat_rows(&pieces)?;
    let out = tape.matmul(cat, wo)?;
    tape.add_row(out, bo)
}

/// One pre-LN transformer layer over a batch of [cls, prompts, tokens]
/// sequences, with the dense projections and FFN applied to the row-stacked
/// batch. Row-wise operations are unchanged, so each instance's outputs are
/// bitwise identical to [`layer_forward`].
fn layer_forward_stacked(
    tape: &mut Tape,
    inputs: &[LayerInput],
    lw: &LayerWeights,
    num_heads: usize,
) -> Result<Vec<(Var, Var)>> {
    let d = tape.value(inputs[0].cls).cols();
    let mut seqs = Vec::with_capacity(inputs.len());
    let mut rows = Vec::with_capacity(inputs.len());
    let mut prompt_lens = Vec::with_capacity(inputs.len());
    let mut token_lens = Vec::with_capacity(inputs.len());
    for input in inputs {
        let p = match input.prompts {
            Some(pv) => {
                let v = tape.value(pv);
                if v.cols() != d {
                    return Err(Error::Shape(format!(
                        "layer_forward: prompt dim {} vs model dim {d}",
                        v.cols()
                    )));
                }
                v.rows()
            }
            None => 0,
        };
        let s = tape.value(input.tokens).rows();
        let seq = match input.prompts {
            Some(pv) => tape.concat_rows(&[input.cls, pv, input.tokens])?,
            None => tape.concat_rows(&[input.cls, input.tokens])?,
        };
        seqs.push(seq);
        rows.push(1 + p + s);
        prompt_lens.push(p);
        token_lens.push(s);
    }
    let stacked = tape.concat_rows(&seqs)?;
    let ln1g = tape.constant(lw.ln1_gain.clone())?;
    let ln1b = tape.constant(lw.ln1_bias.clone())?;
    let normed = tape.layer_norm_rows(stacked, ln1g, ln1b, 1e-5)?;
    let att = attention_stacked(tape, normed, &rows, lw, num_heads)?;
    let h = tape.add(stacked, att)?;
    let ln2g = tape.constant(lw.ln2_gain.clone())?;
    let ln2b = tape.constant(lw.ln2_bias.clone())?;
    let normed2 = tape.layer_norm_rows(h, ln2g, ln2b, 1e-5)?;
    let w1 = tape.constant(lw.w_ff1.clone())?;
    let b1 = tape.constant(lw.b_ff1.clone())?;
    let w2 = tape.constant(lw.w_ff2.clone())?;
    let b2 = tape.constant(lw.b_ff2.clone())?;
    let ff = tape.matmul(normed2, w1)?;
    let ff = tape.add_row(ff, b1)?;
    let ff = tape.gelu(ff)?;
    let ff = tape.matmul(ff, w2)?;
    let ff = tape.add_row(ff, b2)?;
    let out = tape.add(h, ff)?;
    let mut result = Vec::with_capacity(inputs.len());
    let mut off = 0;
    for i in 0..inputs.len() {
        let (p, s) = (prompt_lens[i], token_lens[i]);
        let cls = tape.slice_rows(out, off, off + 1)?;
        let tokens = tape.slice_rows(out, off + 1 + p, off + 1 + p + s)?;
        result.push((cls, tokens));
        off += rows[i];
    }
    Ok(result)
}

/// Batched [`encode_main`]: runs the main encoder over several token
/// sequences at once, stacking the dense work per layer. Returns the final
/// class token [1×d] for each instance, bitwise equal to the per-instance
/// path.
pub fn encode_main_batch(
    tape: &mut Tape,
    batch: &[&[usize]],
    provider: &mut dyn BatchPromptProvider,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<Vec<Var>> {
    let mut cls = Vec::with_capacity(batch.len());
    let mut toks = Vec::with_capacity(batch.len());
    for tokens in batch {
        let (c, t) = embed(tape, tokens, cfg, weights)?;
        cls.push(c);
        toks.push(t);
    }
    for (i, lw) in weights.layers.iter().enumerate() {
        let mut inputs = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let prompts = provider.assembly(tape, i, b, cls[b])?;
            inputs.push(LayerInput {
                cls: cls[b],
                prompts,
                tokens: toks[b],
            });
        }
        for (b, (c, t)) in layer_forward_stacked(tape, &inputs, lw, cfg.num_heads)?
            .into_iter()
            .enumerate()
        {
            cls[b] = c;
            toks[b] = t;
        }
    }
    let g = tape.constant(weights.final_ln_gain.clone())?;
    let b = tape.constant(weights.final_ln_bias.clone())?;
    cls.into_iter()
        .map(|c| tape.layer_norm_rows(c, g, b, 1e-5))
        .collect()
}

/// Encode the complementary modality: vanilla prompt tuning with l'
/// learnable prompts injected at every layer of a frozen vector encoder.
/// Returns the final class token ψ_y [1×d_y].
pub fn encode_complementary(
    tape: &mut Tape,
    y: Var,
    prompts: &[Var],
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<Var> {
    if prompts.len() != weights.layers.len() && !prompts.is_empty() {
        return Err(Error::Contract(format!(
            "encode_complementary: {} prompt sets for {} layers",
            prompts.len(),
            weights.layers.len()
        )));
    }
    let (mut cls, mut toks) = embed_vector(tape, y, cfg, weights)?;
    for (i, lw) in weights.layers.iter().enumerate() {
        let input = LayerInput {
            cls,
            prompts: prompts.get(i).copied(),
            tokens: toks,
        };
        let (c, t) = layer_forward(tape, &input, lw, cfg.num_heads)?;
        cls = c;
        toks = t;
    }
    let g = tape.constant(weights.final_ln_gain.clone())?;
    let b = tape.constant(weights.final_ln_bias.clone())?;
    tape.layer_norm_rows(cls, g, b, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_nn;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            seq_len: 5,
            vocab: Some(7),
        }
    }

    #[test]
    fn embed_is_deterministic_and_shaped() {
        let cfg = toy_cfg();
        let w = EncoderWeights::init_token_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let (cls, t0) = embed(&mut tape, &[0, 0, 0, 0, 0], &cfg, &w).unwrap();
        let (cls2, t02) = embed(&mut tape, &[0, 0, 0, 0, 0], &cfg, &w).unwrap();
        assert_eq!(tape.value(cls), tape.value(cls2));
        assert_eq!(tape.value(t0), tape.value(t02));
        assert_eq!(tape.value(cls).shape(), [1, 8]);
        assert_eq!(tape.value(t0).shape(), [5, 8]);
    }

    #[test]
    fn embed_locality_of_single_token_change() {
        let cfg = toy_cfg();
        let w = EncoderWeights::init_token_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let (_, a) = embed(&mut tape, &[1, 2, 3, 4, 5], &cfg, &w).unwrap();
        let (_, b) = embed(&mut tape, &[1, 2, 6, 4, 5], &cfg, &w).unwrap();
        let (va, vb) = (tape.value(a).clone(), tape.value(b).clone());
        for i in 0..5 {
            let differs = va.row(i) != vb.row(i);
            assert_eq!(differs, i == 2);
        }
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let cfg = toy_cfg();
        let w = EncoderWeights::init_token_encoder(&cfg, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            embed(&mut tape, &[0, 0, 7, 0, 0], &cfg, &w),
            Err(Error::Data(_))
        ));
    }

    /// Straight-line single-pass re-implementation of the full block used
    /// as an independent oracle for layer_forward.
    fn naive_layer(x: &Tensor, lw: &LayerWeights, heads: usize) -> Tensor {
        let (n, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let ln = |m: &Tensor, gain: &Tensor, bias: &Tensor| {
            let mut out = m.clone();
            for i in 0..n {
                let row = m.row(i);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + 1e-5).sqrt();
                for j in 0..d {
                    out.data_mut()[i * d + j] = gain.data()[j] * (row[j] - mean) * is + bias.data()[j];
                }
            }
            out
        };
        let addb = |m: &Tensor, b: &Tensor| {
            let mut out = m.clone();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out.data_mut()[i * m.cols() + j] += b.data()[j];
                }
            }
            out
        };
        let n1 = ln(x, &lw.ln1_gain, &lw.ln1_bias);
        let q = addb(&matmul_nn(&n1, &lw.w_q), &lw.b_q);
        let k = addb(&matmul_nn(&n1, &lw.w_k), &lw.b_k);
        let v = addb(&matmul_nn(&n1, &lw.w_v), &lw.b_v);
        let mut att = Tensor::zeros(n, d);
        for h in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / sum * v.at(j, h * dh + c);
                    }
                    att.data_mut()[i * d + h * dh + c] = acc;
                }
            }
        }
        let att = addb(&matmul_nn(&att, &lw.w_o), &lw.b_o);
        let mut hmid = x.clone();
        for (a, b) in hmid.data_mut().iter_mut().zip(att.data()) {
            *a += b;
        }
        let n2 = ln(&hmid, &lw.ln2_gain, &lw.ln2_bias);
        let f1 = addb(&matmul_nn(&n2, &lw.w_ff1), &lw.b_ff1);
        let f1 = f1.map(|v| 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh()));
        let f2 = addb(&matmul_nn(&f1, &lw.w_ff2), &lw.b_ff2);
        let mut out = hmid;
        for (a, b) in out.data_mut().iter_mut().zip(f2.data()) {
            *a += b;
        }
        out
    }

    #[test]
    fn layer_forward_matches_naive_oracle() {
        let mut rng = Rng::new(9);
        let lw = init_layer(8, 16, &mut rng);
        let cls = rng.normal_tensor(1, 8, 0.0, 1.0);
        let prompts = rng.normal_tensor(3, 8, 0.0, 1.0);
        let tokens = rng.normal_tensor(5, 8, 0.0, 1.0);
        let mut full = Vec::new();
        full.push(cls.row(0).to_vec());
        for i in 0..3 {
            full.push(prompts.row(i).to_vec());
        }
        for i in 0..5 {
            full.push(tokens.row(i).to_vec());
        }
        let seq = Tensor::from_rows(&full).unwrap();
        let expect = naive_layer(&seq, &lw, 2);

        let mut tape = Tape::new();
        let clsv = tape.constant(cls).unwrap();
        let pv = tape.constant(prompts).unwrap();
        let tv = tape.constant(tokens).unwrap();
        let (c, t) = layer_forward(
            &mut tape,
            &LayerInput {
                cls: clsv,
                prompts: Some(pv),
                tokens: tv,
            },
            &lw,
            2,
        )
        .unwrap();
        let cv = tape.value(c);
        let tvv = tape.value(t);
        for j in 0..8 {
            assert!((cv.at(0, j) - expect.at(0, j)).abs() < 1e-10);
        }
        for i in 0..5 {
            for j in 0..8 {
                assert!((tvv.at(i, j) - expect.at(4 + i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_prompt_is_vanilla_layer() {
        let mut rng = Rng::new(4);
        let lw = init_layer(8, 16, &mut rng);
        let cls = rng.normal_tensor(1, 8, 0.0, 1.0);
        let tokens = rng.normal_tensor(5, 8, 0.0, 1.0);
        let mut full = vec![cls.row(0).to_vec()];
        for i in 0..5 {
            full.push(tokens.row(i).to_vec());
        }
        let expect = naive_layer(&Tensor::from_rows(&full).unwrap(), &lw, 2);
        let mut tape = Tape::new();
        let clsv = tape.constant(cls).unwrap();
        let tv = tape.constant(tokens).unwrap();
        let (c, t) = layer_forward(
            &mut tape,
            &LayerInput {
                cls: clsv,
                prompts: None,
                tokens: tv,
            },
            &lw,
            2,
        )
        .unwrap();
        for j in 0..8 {
            assert!((tape.value(c).at(0, j) - expect.at(0, j)).abs() < 1e-12);
        }
        for i in 0..5 {
            for j in 0..8 {
                assert!((tape.value(t).at(i, j) - expect.at(1 + i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_prompt_row_keeps_output_finite() {
        let mut rng = Rng::new(12);
        let lw = init_layer(8, 16, &mut rng);
        let cls = rng.normal_tensor(1, 8, 0.0, 1.0);
        let row = rng.normal_tensor(1, 8, 0.0, 1.0);
        let prompts = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
        let tokens = rng.normal_tensor(4, 8, 0.0, 1.0);
        let mut tape = Tape::new();
        let clsv = tape.constant(cls).unwrap();
        let pv = tape.constant(prompts).unwrap();
        let tv = tape.constant(tokens).unwrap();
        let (c, t) = layer_forward(
            &mut tape,
            &LayerInput {
                cls: clsv,
                prompts: Some(pv),
                tokens: tv,
            },
            &lw,
            2,
        )
        .unwrap();
        assert!(tape.value(c).is_finite());
        assert!(tape.value(t).is_finite());
        assert_eq!(tape.value(t).rows(), 4);
    }

    #[test]
    fn layer_rejects_prompt_dim_mismatch() {
        let mut rng = Rng::new(12);
        let lw = init_layer(8, 16, &mut rng);
        let mut tape = Tape::new();
        let clsv = tape.constant(rng.normal_tensor(1, 8, 0.0, 1.0)).unwrap();
        let pv = tape.constant(rng.normal_tensor(2, 6, 0.0, 1.0)).unwrap();
        let tv = tape.constant(rng.normal_tensor(4, 8, 0.0, 1.0)).unwrap();
        assert!(layer_forward(
            &mut tape,
            &LayerInput {
                cls: clsv,
                prompts: Some(pv),
                tokens: tv
            },
            &lw,
            2
        )
        .is_err());
    }

    #[test]
    fn encode_main_no_prompts_matches_noprompt_provider() {
        let cfg = toy_cfg();
        let w = EncoderWeights::init_token_encoder(&cfg, &mut Rng::new(2)).unwrap();
        let toks = [1, 2, 3, 0, 6];
        let mut tape = Tape::new();
        let a = encode_main(&mut tape, &toks, &mut NoPrompts, &cfg, &w).unwrap();
        let b = encode_main(&mut tape, &toks, &mut NoPrompts, &cfg, &w).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.value(a).shape(), [1, 8]);
    }

    #[test]
    fn encode_complementary_shapes_and_zero_prompt_case() {
        let cfg = EncoderConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            seq_len: 3,
            vocab: None,
        };
        let w = EncoderWeights::init_vector_encoder(&cfg, 6, &mut Rng::new(3)).unwrap();
        let mut tape = Tape::new();
        let y = tape
            .constant(Rng::new(10).normal_tensor(1, 6, 0.0, 1.0))
            .unwrap();
        let psi = encode_complementary(&mut tape, y, &[], &cfg, &w).unwrap();
        assert_eq!(tape.value(psi).shape(), [1, 8]);
        assert!(!tape.requires_grad(psi));
    }
}
