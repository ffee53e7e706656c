use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attention projections. Rows of `w_q`/`w_k`/`w_v` and columns of `w_o`
/// are grouped per head in `head_dim` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `[n_heads·head_dim × d_model]`
    pub w_q: Tensor,
    /// `[n_kv_heads·head_dim × d_model]`
    pub w_k: Tensor,
    /// `[n_kv_heads·head_dim × d_model]`
    pub w_v: Tensor,
    /// `[d_model × n_heads·head_dim]`
    pub w_o: Tensor,
}

/// SwiGLU MLP. Row `i` of `w_up`, row `i` of `w_gate` and column `i` of
/// `w_down` form neuron group `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    /// `[d_ff × d_model]`
    pub w_up: Tensor,
    /// `[d_ff × d_model]`
    pub w_gate: Tensor,
    /// `[d_model × d_ff]`
    pub w_down: Tensor,
}

impl MlpWeights {
    pub fn d_ff(&self) -> usize {
        self.w_up.shape()[0]
    }

    /// Zeroes every weight of neuron group `i`.
    pub fn zero_neuron(&mut self, i: usize) {
        self.w_up.row_mut(i).fill(0.0);
        self.w_gate.row_mut(i).fill(0.0);
        let d_ff = self.d_ff();
        for (j, v) in self.w_down.data_mut().iter_mut().enumerate() {
            if j % d_ff == i {
                *v = 0.0;
            }
        }
    }

    /// Multiplies every weight of neuron group `i` by `factor`.
    pub fn scale_neuron(&mut self, i: usize, factor: f64) {
        self.w_up.row_mut(i).iter_mut().for_each(|v| *v *= factor);
        self.w_gate.row_mut(i).iter_mut().for_each(|v| *v *= factor);
        let d_ff = self.d_ff();
        for (j, v) in self.w_down.data_mut().iter_mut().enumerate() {
            if j % d_ff == i {
                *v *= factor;
            }
        }
    }

    /// `Σ a·b` over the weights of neuron group `i`, for two MLPs of equal shape.
    pub fn group_dot(&self, other: &MlpWeights, i: usize) -> f64 {
        let up: f64 = self.w_up.row(i).iter().zip(other.w_up.row(i)).map(|(a, b)| a * b).sum();
        let gate: f64 = self.w_gate.row(i).iter().zip(other.w_gate.row(i)).map(|(a, b)| a * b).sum();
        let d_model = self.w_down.shape()[0];
        let down: f64 = (0..d_model)
            .map(|j| self.w_down.at(j, i) * other.w_down.at(j, i))
            .sum();
        up + gate + down
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub attn: AttentionWeights,
    pub mlp_norm: Tensor,
    pub mlp: MlpWeights,
}

/// Every parameter of the model. The output head is `token_embedding`
/// when `lm_head` is `None` (tied embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Option<Tensor>,
}

impl TransformerWeights {
    /// Random initialisation: dense weights ~ N(0, 1/fan_in), with the two
    /// residual-stream output projections further scaled by `1/sqrt(2L)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hd = config.head_dim();
        let residual = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut normal = |shape: [usize; 2], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("valid std");
            let n = shape[0] * shape[1];
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
                .expect("shape")
        };
        let fan = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
        let token_embedding = normal([config.vocab_size, d], fan(d));
        let mut layers = Vec::with_capacity(config.n_layers);
        for shape in &config.layers {
            let attn = AttentionWeights {
                w_q: normal([shape.n_heads * hd, d], fan(d)),
                w_k: normal([shape.n_kv_heads * hd, d], fan(d)),
                w_v: normal([shape.n_kv_heads * hd, d], fan(d)),
                w_o: normal([d, shape.n_heads * hd], fan(shape.n_heads * hd) * residual),
            };
            let mlp = MlpWeights {
                w_up: normal([shape.d_ff, d], fan(d)),
                w_gate: normal([shape.d_ff, d], fan(d)),
                w_down: normal([d, shape.d_ff], fan(shape.d_ff) * residual),
            };
            layers.push(LayerWeights {
                attn_norm: Tensor::ones(&[d]),
                attn,
                mlp_norm: Tensor::ones(&[d]),
                mlp,
            });
        }
        let lm_head = (!config.tie_embeddings).then(|| normal([config.vocab_size, d], fan(d)));
        Ok(Self {
            token_embedding,
            layers,
            final_norm: Tensor::ones(&[d]),
            lm_head,
        })
    }

    /// Output projection matrix `[V × d_model]`.
    pub fn head(&self) -> &Tensor {
        self.lm_head.as_ref().unwrap_or(&self.token_embedding)
    }

    /// All tensors with their stable checkpoint names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.attn.w_q"), &layer.attn.w_q));
            out.push((format!("layers.{l}.attn.w_k"), &layer.attn.w_k));
            out.push((format!("layers.{l}.attn.w_v"), &layer.attn.w_v));
            out.push((format!("layers.{l}.attn.w_o"), &layer.attn.w_o));
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layers.{l}.mlp.w_up"), &layer.mlp.w_up));
            out.push((format!("layers.{l}.mlp.w_gate"), &layer.mlp.w_gate));
            out.push((format!("layers.{l}.mlp.w_down"), &layer.mlp.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.attn.w_q);
            out.push(&mut layer.attn.w_k);
            out.push(&mut layer.attn.w_v);
            out.push(&mut layer.attn.w_o);
            out.push(&mut layer.mlp_norm);
            out.push(&mut layer.mlp.w_up);
            out.push(&mut layer.mlp.w_gate);
            out.push(&mut layer.mlp.w_down);
        }
        out.push(&mut self.final_norm);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Rebuilds weights from tensors listed in canonical order.
    pub fn from_ordered(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let token_embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = next();
            let attn = AttentionWeights {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
            };
            let mlp_norm = next();
            let mlp = MlpWeights {
                w_up: next(),
                w_gate: next(),
                w_down: next(),
            };
            layers.push(LayerWeights {
                attn_norm,
                attn,
                mlp_norm,
                mlp,
            });
        }
        let final_norm = next();
        let lm_head = (!config.tie_embeddings).then(&mut next);
        Ok(Self {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Checks that every tensor matches `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(config);
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Input(format!(
                "weights hold {} tensors but config expects {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "{name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// `(name, shape)` of every tensor implied by `config`, in canonical order.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let hd = config.head_dim();
    let mut out = vec![("token_embedding".to_string(), vec![config.vocab_size, d])];
    for (l, s) in config.layers.iter().enumerate() {
        out.push((format!("layers.{l}.attn_norm"), vec![d]));
        out.push((format!("layers.{l}.attn.w_q"), vec![s.n_heads * hd, d]));
        out.push((format!("layers.{l}.attn.w_k"), vec![s.n_kv_heads * hd, d]));
        out.push((format!("layers.{l}.attn.w_v"), vec![s.n_kv_heads * hd, d]));
        out.push((format!("layers.{l}.attn.w_o"), vec![d, s.n_heads * hd]));
        out.push((format!("layers.{l}.mlp_norm"), vec![d]));
        out.push((format!("layers.{l}.mlp.w_up"), vec![s.d_ff, d]));
        out.push((format!("layers.{l}.mlp.w_gate"), vec![s.d_ff, d]));
        out.push((format!("layers.{l}.mlp.w_down"), vec![d, s.d_ff]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    if !config.tie_embeddings {
        out.push(("lm_head".to_string(), vec![config.vocab_size, d]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_config_and_is_deterministic() {
        let c = ModelConfig::tiny();
        let a = TransformerWeights::init(&c, 3).unwrap();
        a.check_config(&c).unwrap();
        assert_eq!(a, TransformerWeights::init(&c, 3).unwrap());
        assert_ne!(a, TransformerWeights::init(&c, 4).unwrap());
    }

    #[test]
    fn ordered_round_trip() {
        let mut c = ModelConfig::tiny();
        c.tie_embeddings = false;
        let w = TransformerWeights::init(&c, 1).unwrap();
        let tensors = w.tensors().into_iter().cloned().collect();
        assert_eq!(TransformerWeights::from_ordered(&c, tensors).unwrap(), w);
    }

    #[test]
    fn zero_neuron_clears_whole_group() {
        let c = ModelConfig::tiny();
        let mut w = TransformerWeights::init(&c, 1).unwrap();
        w.layers[0].mlp.zero_neuron(5);
        let mlp = &w.layers[0].mlp;
        assert!(mlp.w_up.row(5).iter().all(|&v| v == 0.0));
        assert!(mlp.w_gate.row(5).iter().all(|&v| v == 0.0));
        assert!((0..c.d_model).all(|j| mlp.w_down.at(j, 5) == 0.0));
        assert!(mlp.w_up.row(4).iter().any(|&v| v != 0.0));
    }
}
