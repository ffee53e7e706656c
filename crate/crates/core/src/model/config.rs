use crate::error::{Error, Result};

/// Shape of one transformer block. `d_ff` is the pruning axis; the head
/// counts only shrink under the attention-pruning comparison mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
}

/// Geometry of a LLaMA-style decoder-only transformer.
///
/// `n_heads` and `n_kv_heads` describe the unpruned model and fix the head
/// width `d_model / n_heads`; each entry of `layers` carries the current
/// per-layer widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
    pub layers: Vec<LayerShape>,
}

impl ModelConfig {
    /// A config whose layers all share the same MLP width and head counts.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        n_kv_heads: usize,
        d_ff: usize,
        max_seq_len: usize,
        tie_embeddings: bool,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            n_kv_heads,
            max_seq_len,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            tie_embeddings,
            layers: vec![
                LayerShape {
                    d_ff,
                    n_heads,
                    n_kv_heads,
                };
                n_layers
            ],
        }
    }

    /// LLaMA3.2-1B geometry (grouped-query attention, tied embeddings),
    /// used for parameter and MAC accounting only.
    pub fn llama32_1b() -> Self {
        let mut c = Self::uniform(128_256, 2048, 16, 32, 8, 8192, 131_072, true);
        c.rope_base = 500_000.0;
        c.norm_eps = 1e-5;
        c
    }

    /// The small default used by the command line and the desk experiments.
    pub fn tiny() -> Self {
        Self::uniform(256, 32, 2, 4, 4, 64, 128, true)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Query heads per key/value head.
    pub fn kv_group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn d_ff(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.d_ff).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("vocab_size, d_model, n_heads and n_kv_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.layers.len() != self.n_layers {
            return fail(format!(
                "{} layer shapes given for n_layers = {}",
                self.layers.len(),
                self.n_layers
            ));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps >= 0.0) {
            return fail("rope_base must be positive and norm_eps non-negative".into());
        }
        for (l, shape) in self.layers.iter().enumerate() {
            if shape.n_heads == 0 || shape.n_kv_heads == 0 {
                return fail(format!("layer {l} has no attention heads"));
            }
            if shape.n_heads > self.n_heads || shape.n_heads != shape.n_kv_heads * self.kv_group() {
                return fail(format!(
                    "layer {l} head counts {}/{} are inconsistent with group size {}",
                    shape.n_heads,
                    shape.n_kv_heads,
                    self.kv_group()
                ));
            }
        }
        Ok(())
    }
}
