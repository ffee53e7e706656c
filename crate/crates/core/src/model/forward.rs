use super::config::ModelConfig;
use super::weights::{AttentionWeights, LayerWeights, MlpWeights, TransformerWeights};
use crate::autodiff::{AttentionShape, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{hard_loss, objective_loss, Objective};
use crate::tensor::Tensor;

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_gate: Var,
    pub w_down: Var,
}

/// Tape handles for every parameter of a [`TransformerWeights`].
#[derive(Debug, Clone)]
pub struct BoundWeights {
    pub token_embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Option<Var>,
}

impl BoundWeights {
    /// Places `weights` on `tape`, as trainable leaves when `trainable`.
    pub fn bind(tape: &mut Tape, weights: &TransformerWeights, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let token_embedding = leaf(&weights.token_embedding);
        let layers = weights
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: leaf(&l.attn_norm),
                w_q: leaf(&l.attn.w_q),
                w_k: leaf(&l.attn.w_k),
                w_v: leaf(&l.attn.w_v),
                w_o: leaf(&l.attn.w_o),
                mlp_norm: leaf(&l.mlp_norm),
                w_up: leaf(&l.mlp.w_up),
                w_gate: leaf(&l.mlp.w_gate),
                w_down: leaf(&l.mlp.w_down),
            })
            .collect();
        let final_norm = leaf(&weights.final_norm);
        let lm_head = weights.lm_head.as_ref().map(leaf);
        Self {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        }
    }

    /// Collects accumulated gradients, shaped like the bound weights.
    pub fn grads(&self, tape: &Tape) -> TransformerWeights {
        let g = |v: Var| tape.grad_or_zeros(v);
        TransformerWeights {
            token_embedding: g(self.token_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: g(l.attn_norm),
                    attn: AttentionWeights {
                        w_q: g(l.w_q),
                        w_k: g(l.w_k),
                        w_v: g(l.w_v),
                        w_o: g(l.w_o),
                    },
                    mlp_norm: g(l.mlp_norm),
                    mlp: MlpWeights {
                        w_up: g(l.w_up),
                        w_gate: g(l.w_gate),
                        w_down: g(l.w_down),
                    },
                })
                .collect(),
            final_norm: g(self.final_norm),
            lm_head: self.lm_head.map(g),
        }
    }
}

/// Outputs of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[B×S×V]`
    pub logits: Var,
    /// Per layer, the MLP hidden activation `silu(x·W_gᵀ) ⊙ (x·W_uᵀ)`, `[B·S × d_ff]`.
    pub mlp_hidden: Vec<Var>,
}

/// Checks a token batch and returns `(batch, seq)`.
pub fn check_tokens(config: &ModelConfig, tokens: &[Vec<u32>]) -> Result<(usize, usize)> {
    let batch = tokens.len();
    let seq = tokens.first().map_or(0, Vec::len);
    if batch == 0 || seq == 0 {
        return Err(Error::Input("empty token batch".into()));
    }
    if tokens.iter().any(|t| t.len() != seq) {
        return Err(Error::Input("token sequences in a batch must share one length".into()));
    }
    if seq > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().flatten().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok((batch, seq))
}

/// Records the full model on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundWeights,
    tokens: &[Vec<u32>],
) -> Result<ForwardVars> {
    let (batch, seq) = check_tokens(config, tokens)?;
    let ids: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
    let hd = config.head_dim();
    let mut x = tape.embedding(bound.token_embedding, &ids)?;
    let mut mlp_hidden = Vec::with_capacity(bound.layers.len());
    for (layer, shape) in bound.layers.iter().zip(&config.layers) {
        let h = tape.rms_norm(x, layer.attn_norm, config.norm_eps)?;
        let q = tape.linear(h, layer.w_q)?;
        let k = tape.linear(h, layer.w_k)?;
        let v = tape.linear(h, layer.w_v)?;
        let q = tape.rope(q, seq, hd, config.rope_base)?;
        let k = tape.rope(k, seq, hd, config.rope_base)?;
        let attn = tape.attention(
            q,
            k,
            v,
            AttentionShape {
                batch,
                seq,
                n_heads: shape.n_heads,
                n_kv_heads: shape.n_kv_heads,
                head_dim: hd,
            },
        )?;
        let o = tape.linear(attn, layer.w_o)?;
        x = tape.add(x, o)?;

        let h = tape.rms_norm(x, layer.mlp_norm, config.norm_eps)?;
        let up = tape.linear(h, layer.w_up)?;
        let gate = tape.linear(h, layer.w_gate)?;
        let gate = tape.silu(gate);
        let hidden = tape.mul(gate, up)?;
        mlp_hidden.push(hidden);
        let down = tape.linear(hidden, layer.w_down)?;
        x = tape.add(x, down)?;
    }
    let x = tape.rms_norm(x, bound.final_norm, config.norm_eps)?;
    let head = bound.lm_head.unwrap_or(bound.token_embedding);
    let logits = tape.linear(x, head)?;
    let logits = tape.reshape(logits, &[batch, seq, config.vocab_size])?;
    Ok(ForwardVars { logits, mlp_hidden })
}

/// Logits `[B×S×V]` for a batch of equal-length token sequences.
pub fn forward(weights: &TransformerWeights, config: &ModelConfig, tokens: &[Vec<u32>]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, false);
    let out = forward_on_tape(&mut tape, config, &bound, tokens)?;
    Ok(tape.value(out.logits).clone())
}

/// Mean next-token negative log-likelihood.
pub fn loss_forward(weights: &TransformerWeights, config: &ModelConfig, tokens: &[Vec<u32>]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, false);
    let out = forward_on_tape(&mut tape, config, &bound, tokens)?;
    let loss = hard_loss(&mut tape, out.logits, tokens)?;
    Ok(tape.value(loss).item())
}

/// Loss value and parameter gradients of `objective` on one batch.
pub fn loss_and_grads(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[Vec<u32>],
    objective: &Objective<'_>,
) -> Result<(f64, TransformerWeights)> {
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, true);
    let out = forward_on_tape(&mut tape, config, &bound, tokens)?;
    let loss = objective_loss(&mut tape, out.logits, tokens, objective)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok((value, bound.grads(&tape)))
}
