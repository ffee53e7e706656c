//! Analytic parameter and multiply-accumulate counts.

use super::config::ModelConfig;

/// Parameter totals split by module kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamBreakdown {
    /// Token embedding plus the untied output head, if any.
    pub embedding: u64,
    /// `W_q`, `W_k`, `W_v`, `W_o` over all layers.
    pub attention: u64,
    /// `W_u`, `W_g`, `W_d` over all layers.
    pub mlp: u64,
    /// RMSNorm gains.
    pub norms: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.attention + self.mlp + self.norms
    }
}

pub fn param_breakdown(config: &ModelConfig) -> ParamBreakdown {
    let d = config.d_model as u64;
    let hd = config.head_dim() as u64;
    let v = config.vocab_size as u64;
    let heads = if config.tie_embeddings { 1 } else { 2 };
    let mut out = ParamBreakdown {
        embedding: heads * v * d,
        norms: d,
        ..Default::default()
    };
    for l in &config.layers {
        let q = l.n_heads as u64 * hd;
        let kv = l.n_kv_heads as u64 * hd;
        out.attention += d * q + 2 * d * kv + q * d;
        out.mlp += 3 * d * l.d_ff as u64;
        out.norms += 2 * d;
    }
    out
}

/// Total parameter count, embedding included and tied weights counted once.
pub fn count_params(config: &ModelConfig) -> u64 {
    param_breakdown(config).total()
}

/// Multiply-accumulate counts for one forward pass over one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacBreakdown {
    /// Table lookup; contributes no MACs.
    pub embedding: u64,
    /// Q/K/V/O projections.
    pub attention_proj: u64,
    /// `QKᵀ` and `PV` over the full `seq × seq` score matrix.
    pub attention_scores: u64,
    pub mlp: u64,
    pub head: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.attention_proj + self.attention_scores + self.mlp + self.head
    }
}

pub fn mac_breakdown(config: &ModelConfig, seq_len: usize) -> MacBreakdown {
    let s = seq_len as u64;
    let d = config.d_model as u64;
    let hd = config.head_dim() as u64;
    let mut out = MacBreakdown {
        head: s * d * config.vocab_size as u64,
        ..Default::default()
    };
    for l in &config.layers {
        let q = l.n_heads as u64 * hd;
        let kv = l.n_kv_heads as u64 * hd;
        out.attention_proj += s * d * (2 * q + 2 * kv);
        out.attention_scores += 2 * s * s * q;
        out.mlp += 3 * s * d * l.d_ff as u64;
    }
    out
}

pub fn count_macs(config: &ModelConfig, seq_len: usize) -> u64 {
    mac_breakdown(config, seq_len).total()
}
