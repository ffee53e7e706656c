//! Full-parameter recovery finetuning: AdamW with a warmup + cosine schedule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::model::{loss_and_grads, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_steps: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: usize,
    /// Stop once a step's loss falls to this value (0 = never).
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 8,
            seq_len: 64,
            warmup_steps: 0,
            grad_accum: 1,
            seed: 0,
            max_steps: 0,
            target_loss: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} {b} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.seq_len < 2 {
            return Err(Error::Config(
                "batch_size and grad_accum must be ≥ 1 and seq_len ≥ 2".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// AdamW moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr_t: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= lr_t * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr_t * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` at `step = warmup`, then half-cosine decay
/// reaching 0 at `step = total_steps`. Steps past the end give 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / (warmup + 1) as f64;
    }
    let span = (total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Optimizer steps `finetune` will take for `n_sequences` training sequences.
pub fn planned_steps(n_sequences: usize, cfg: &TrainConfig) -> usize {
    let batches = n_sequences.div_ceil(cfg.batch_size.max(1));
    let per_epoch = batches.div_ceil(cfg.grad_accum.max(1));
    let total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total.min(cfg.max_steps)
    } else {
        total
    }
}

/// Trains on `sequences` with the hard loss. Sequence order is reshuffled
/// every epoch from `cfg.seed`.
pub fn finetune(
    weights: &TransformerWeights,
    config: &ModelConfig,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<(TransformerWeights, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut weights = weights.clone();
    let total = planned_steps(sequences.len(), cfg);
    let mut records = Vec::with_capacity(total);
    if total == 0 {
        return Ok((weights, records));
    }
    let mut state = OptimizerState::new(&weights.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<Vec<Vec<u32>>> = order
            .chunks(cfg.batch_size)
            .map(|idx| idx.iter().map(|&i| sequences[i].clone()).collect())
            .collect();
        for group in batches.chunks(cfg.grad_accum) {
            let lr_t = cosine_lr(step, total, cfg.lr, cfg.warmup_steps);
            let mut grad_sum: Option<TransformerWeights> = None;
            let mut loss_sum = 0.0;
            for batch in group {
                let (loss, grads) = loss_and_grads(&weights, config, batch, &Objective::Hard)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric { step });
                }
                loss_sum += loss;
                match &mut grad_sum {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.tensors_mut().into_iter().zip(grads.tensors()) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("non-empty group");
            let n = group.len() as f64;
            if group.len() > 1 {
                for t in grads.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x /= n);
                }
            }
            let grad_refs = grads.tensors();
            adamw_step(&mut weights.tensors_mut(), &grad_refs, &mut state, cfg, lr_t)?;
            let loss = loss_sum / n;
            records.push(LossRecord { step, lr: lr_t, loss });
            step += 1;
            if step >= total || (cfg.target_loss > 0.0 && loss <= cfg.target_loss) {
                break 'epochs;
            }
        }
    }
    Ok((weights, records))
}

pub fn write_loss_curve(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,lr,loss").expect("in-memory write");
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.lr, r.loss).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut st, &TrainConfig::default(), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = Tensor::new(vec![2], vec![2.0, -4.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, 0.5).unwrap();
        assert_eq!(p.data(), &[2.0 - 0.5 * 0.1 * 2.0, -4.0 - 0.5 * 0.1 * -4.0]);
    }

    #[test]
    fn single_step_hand_worked() {
        // w=1, g=0.5, fresh state: m̂ = g, v̂ = g², update = lr·g/(|g|+eps).
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.5);
        let cfg = TrainConfig::default();
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut st, &cfg, 0.01).unwrap();
        let want = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.item() - want).abs() <= 1e-12);
    }

    /// Scalar AdamW written out independently of the buffer layout above.
    fn scalar_oracle(w: f64, g: f64, m: f64, v: f64, t: u64, lr: f64, c: &TrainConfig) -> (f64, f64, f64) {
        let w = w * (1.0 - lr * c.weight_decay);
        let m = c.beta1 * m + (1.0 - c.beta1) * g;
        let v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powf(t as f64));
        let vh = v / (1.0 - c.beta2.powf(t as f64));
        (w - lr * mh / (vh.sqrt() + c.eps), m, v)
    }

    #[test]
    fn matches_scalar_oracle_on_random_tuples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let cfg = TrainConfig {
                weight_decay: rng.random_range(0.0..0.1),
                ..TrainConfig::default()
            };
            let (w, g) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (m, v) = (rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
            let step = rng.random_range(0..500u64);
            let lr = rng.random_range(1e-5..1e-2);
            let mut p = Tensor::scalar(w);
            let mut st = OptimizerState {
                m: vec![vec![m]],
                v: vec![vec![v]],
                step,
            };
            adamw_step(&mut [&mut p], &[&Tensor::scalar(g)], &mut st, &cfg, lr).unwrap();
            let (w2, m2, v2) = scalar_oracle(w, g, m, v, step + 1, lr, &cfg);
            assert!((p.item() - w2).abs() <= 1e-12);
            assert!((st.m[0][0] - m2).abs() <= 1e-12);
            assert!((st.v[0][0] - v2).abs() <= 1e-12);
        }
    }

    #[test]
    fn missing_gradients_are_contract_errors() {
        let mut p = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(&[&p]);
        let err = adamw_step(&mut [&mut p], &[], &mut st, &TrainConfig::default(), 0.1);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(10, 100, 0.5, 10), 0.5);
        assert_eq!(cosine_lr(100, 100, 0.5, 10), 0.0);
        assert_eq!(cosine_lr(150, 100, 0.5, 10), 0.0);
        assert!(cosine_lr(0, 100, 0.5, 10) > 0.0);
        let step = 37;
        let want = 0.5 * 0.5 * (1.0 + (std::f64::consts::PI * 27.0 / 90.0).cos());
        assert!((cosine_lr(step, 100, 0.5, 10) - want).abs() <= 1e-12);
        assert_eq!(cosine_lr(0, 10, 1.0, 0), 1.0);
    }

    fn repeated_pattern(n: usize) -> Vec<Vec<u32>> {
        let pattern = b"abcab";
        let stream: Vec<u32> = (0..200).map(|i| pattern[i % 5] as u32).collect();
        crate::data::chunk_sequences(&stream, 20).into_iter().take(n).collect()
    }

    #[test]
    fn finetune_reduces_loss_and_is_deterministic() {
        let c = ModelConfig::uniform(256, 16, 1, 2, 2, 16, 32, true);
        let w = TransformerWeights::init(&c, 0).unwrap();
        let seqs = repeated_pattern(10);
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (_, rec) = finetune(&w, &c, &seqs, &cfg).unwrap();
        assert_eq!(rec.len(), 5);
        assert!(rec.last().unwrap().loss < rec[0].loss);
        let (_, rec2) = finetune(&w, &c, &seqs, &cfg).unwrap();
        assert_eq!(rec, rec2);
        let zero = TrainConfig { epochs: 0, ..cfg };
        let (w0, rec0) = finetune(&w, &c, &seqs, &zero).unwrap();
        assert_eq!(w0, w);
        assert!(rec0.is_empty());
    }

    #[test]
    fn full_batch_training_decreases_loss_monotonically() {
        let c = ModelConfig::uniform(256, 16, 1, 2, 2, 16, 256, true);
        let w = TransformerWeights::init(&c, 1).unwrap();
        let stream: Vec<u32> = (0..200).map(|i| b"xyzzy"[i % 5] as u32).collect();
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: 50,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (_, rec) = finetune(&w, &c, &[stream], &TrainConfig { ..cfg }).unwrap();
        assert_eq!(rec.len(), 50);
        for pair in rec.windows(2) {
            assert!(pair[1].loss < pair[0].loss, "{:?}", pair);
        }
    }

    #[test]
    fn loss_curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_curve(&p, &[LossRecord { step: 0, lr: 0.5, loss: 1.25 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,lr,loss\n0,0.5,1.25\n");
    }
}
