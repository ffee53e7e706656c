//! Hard (label), soft (teacher KL) and blended self-distillation losses.
//!
//! All losses are averaged over next-token positions: for logits of shape
//! `[B×S×V]` these are positions `0..S-1` of every sequence, the ones that
//! have a label. Soft losses use the same positions so that the blend
//! compares like with like.

use crate::autodiff::{log_softmax_last, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Functional form of the soft loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftLossForm {
    /// `KL(softmax(t/T) ‖ softmax(s/T))`, optionally scaled by `T²`.
    #[default]
    Standard,
    /// `Σ (p/T)·log(q / (p/T))` with untempered `p`, `q`, as sometimes
    /// written in the literature. Not a divergence; kept for comparison.
    Literal,
}

impl SoftLossForm {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftLossForm::Standard => "standard",
            SoftLossForm::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SoftLossForm::Standard),
            "literal" => Ok(SoftLossForm::Literal),
            other => Err(Error::Config(format!("unknown soft loss form `{other}`"))),
        }
    }
}

/// Blend weight and temperature of the self-distillation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    /// Multiply the standard soft loss by `T²`.
    pub t2_scaling: bool,
    pub soft_form: SoftLossForm,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 0.25,
            t2_scaling: true,
            soft_form: SoftLossForm::Standard,
        }
    }
}

impl DistillConfig {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        let c = Self {
            alpha,
            temperature,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// What a scoring or training pass differentiates.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Hard,
    Distill {
        teacher_logits: &'a Tensor,
        config: DistillConfig,
    },
}

fn logits_dims(tape: &Tape, logits: Var) -> Result<(usize, usize, usize)> {
    let shape = tape.value(logits).shape();
    match *shape {
        [b, s, v] => Ok((b, s, v)),
        _ => Err(Error::Dimension {
            op: "loss",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

/// Flat row indices of the positions that predict a next token.
fn scored_rows(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..seq.saturating_sub(1)).map(move |s| b * seq + s))
        .collect()
}

fn flat(tape: &mut Tape, logits: Var) -> Result<(Var, Vec<usize>)> {
    let (b, s, v) = logits_dims(tape, logits)?;
    if s < 2 {
        return Err(Error::Input(format!("sequence length {s} < 2 has no next-token positions")));
    }
    let flat = tape.reshape(logits, &[b * s, v])?;
    Ok((flat, scored_rows(b, s)))
}

/// Mean next-token negative log-likelihood of `tokens` under `logits[B×S×V]`.
pub fn hard_loss(tape: &mut Tape, logits: Var, tokens: &[Vec<u32>]) -> Result<Var> {
    let (b, s, v) = logits_dims(tape, logits)?;
    if tokens.len() != b || tokens.iter().any(|t| t.len() != s) {
        return Err(Error::Dimension {
            op: "hard_loss",
            lhs: vec![b, s, v],
            rhs: vec![tokens.len(), tokens.first().map_or(0, Vec::len)],
        });
    }
    let (flat, rows) = flat(tape, logits)?;
    let targets: Vec<usize> = tokens
        .iter()
        .flat_map(|seq| seq[1..].iter().map(|&t| t as usize))
        .collect();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Input(format!("label {bad} out of range for vocabulary of {v}")));
    }
    let picked = tape.gather_rows(flat, &rows)?;
    let logq = tape.log_softmax(picked);
    let ll = tape.pick(logq, &targets)?;
    let mean = tape.mean(ll);
    Ok(tape.scale(mean, -1.0))
}

/// Soft loss between `student[B×S×V]` and a gradient-exempt teacher of the same shape.
pub fn soft_loss(tape: &mut Tape, student: Var, teacher: &Tensor, config: &DistillConfig) -> Result<Var> {
    config.validate()?;
    if tape.value(student).shape() != teacher.shape() {
        return Err(Error::Dimension {
            op: "soft_loss",
            lhs: tape.value(student).shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    let (flat, rows) = flat(tape, student)?;
    let v = teacher.last_dim();
    let teacher_rows = teacher.reshape(&[teacher.numel() / v.max(1), v])?.select_rows(&rows);
    let m = rows.len() as f64;
    let t = config.temperature;
    let picked = tape.gather_rows(flat, &rows)?;
    match config.soft_form {
        SoftLossForm::Standard => {
            let inv_t = 1.0 / t;
            let logp = log_softmax_last(&teacher_rows.map(|x| x * inv_t));
            let p = logp.map(f64::exp);
            let scaled = tape.scale(picked, inv_t);
            let logq = tape.log_softmax(scaled);
            let logp = tape.constant(logp);
            let p = tape.constant(p);
            let diff = tape.sub(logp, logq)?;
            let terms = tape.mul(p, diff)?;
            let total = tape.sum(terms);
            let factor = if config.t2_scaling { t * t } else { 1.0 };
            Ok(tape.scale(total, factor / m))
        }
        SoftLossForm::Literal => {
            let logp = log_softmax_last(&teacher_rows);
            let p_over_t = logp.map(|x| x.exp() / t);
            let log_p_over_t = logp.map(|x| x - t.ln());
            let logq = tape.log_softmax(picked);
            let lpt = tape.constant(log_p_over_t);
            let pt = tape.constant(p_over_t);
            let diff = tape.sub(logq, lpt)?;
            let terms = tape.mul(pt, diff)?;
            let total = tape.sum(terms);
            Ok(tape.scale(total, 1.0 / m))
        }
    }
}

/// `(1 − α)·hard + α·soft`.
pub fn distill_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    tokens: &[Vec<u32>],
    config: &DistillConfig,
) -> Result<Var> {
    config.validate()?;
    let hard = hard_loss(tape, student, tokens)?;
    let soft = soft_loss(tape, student, teacher, config)?;
    let h = tape.scale(hard, 1.0 - config.alpha);
    let s = tape.scale(soft, config.alpha);
    tape.add(h, s)
}

pub fn objective_loss(tape: &mut Tape, logits: Var, tokens: &[Vec<u32>], objective: &Objective<'_>) -> Result<Var> {
    match objective {
        Objective::Hard => hard_loss(tape, logits, tokens),
        Objective::Distill {
            teacher_logits,
            config,
        } => distill_loss(tape, logits, teacher_logits, tokens, config),
    }
}

pub fn hard_loss_value(logits: &Tensor, tokens: &[Vec<u32>]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = hard_loss(&mut tape, l, tokens)?;
    Ok(tape.value(out).item())
}

pub fn soft_loss_value(student: &Tensor, teacher: &Tensor, config: &DistillConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(student.clone());
    let out = soft_loss(&mut tape, l, teacher, config)?;
    Ok(tape.value(out).item())
}

pub fn distill_loss_value(
    student: &Tensor,
    teacher: &Tensor,
    tokens: &[Vec<u32>],
    config: &DistillConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(student.clone());
    let out = distill_loss(&mut tape, l, teacher, tokens, config)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(shape: [usize; 3], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_tokens(b: usize, s: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
        (0..b)
            .map(|_| (0..s).map(|_| rng.random_range(0..v as u32)).collect())
            .collect()
    }

    /// Independent log-sum-exp NLL.
    fn nll_oracle(logits: &Tensor, tokens: &[Vec<u32>]) -> f64 {
        let (s, v) = (logits.shape()[1], logits.shape()[2]);
        let mut total = 0.0;
        let mut count = 0;
        for (b, seq) in tokens.iter().enumerate() {
            for t in 0..s - 1 {
                let row = &logits.data()[(b * s + t) * v..][..v];
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                total += lse - row[seq[t + 1] as usize];
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn hard_loss_confident_and_uniform() {
        let v = 5;
        let tokens = vec![vec![0u32, 3, 1, 4]];
        let mut confident = Tensor::zeros(&[1, 4, v]);
        for (s, &next) in tokens[0][1..].iter().enumerate() {
            confident.data_mut()[s * v + next as usize] = 800.0;
        }
        assert_eq!(hard_loss_value(&confident, &tokens).unwrap(), 0.0);
        let uniform = Tensor::zeros(&[1, 4, v]);
        let l = hard_loss_value(&uniform, &tokens).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn hard_loss_hand_worked_three_token_vocab() {
        // Two positions: logits [1,2,3] with label 2, logits [0,0,ln 2] with label 0.
        let logits = Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 2.0, 3.0, 0.0, 0.0, 2f64.ln(), 9.0, 9.0, 9.0],
        )
        .unwrap();
        let tokens = vec![vec![1u32, 2, 0]];
        let first = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let second = 4f64.ln();
        let want = (first + second) / 2.0;
        let got = hard_loss_value(&logits, &tokens).unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn hard_loss_matches_independent_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_logits([3, 5, 7], &mut rng, 4.0);
        let tokens = random_tokens(3, 5, 7, &mut rng);
        let got = hard_loss_value(&logits, &tokens).unwrap();
        assert!((got - nll_oracle(&logits, &tokens)).abs() <= 1e-12);
    }

    #[test]
    fn hard_loss_shape_mismatch() {
        let logits = Tensor::zeros(&[1, 3, 4]);
        assert!(matches!(
            hard_loss_value(&logits, &[vec![0, 1]]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn soft_loss_against_direct_kl_summation() {
        // One scored position (S = 2); the last row is ignored.
        let teacher = Tensor::new(vec![1, 2, 3], vec![2f64.ln(), 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let student = Tensor::zeros(&[1, 2, 3]);
        let cfg = DistillConfig {
            alpha: 1.0,
            temperature: 1.0,
            ..Default::default()
        };
        let p = [0.5, 0.25, 0.25];
        let want: f64 = p.iter().map(|pi: &f64| pi * (pi / (1.0 / 3.0)).ln()).sum();
        let got = soft_loss_value(&student, &teacher, &cfg).unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn soft_loss_errors() {
        let a = Tensor::zeros(&[1, 2, 3]);
        let b = Tensor::zeros(&[1, 2, 4]);
        let cfg = DistillConfig::default();
        assert!(matches!(soft_loss_value(&a, &b, &cfg), Err(Error::Dimension { .. })));
        let bad = DistillConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(matches!(soft_loss_value(&a, &a, &bad), Err(Error::Config(_))));
        assert!(DistillConfig::new(1.5, 1.0).is_err());
    }

    #[test]
    fn soft_loss_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..1000 {
            let s = random_logits([1, 3, 6], &mut rng, 5.0);
            let t = random_logits([1, 3, 6], &mut rng, 5.0);
            let cfg = DistillConfig {
                temperature: [0.1, 0.25, 0.5, 1.0, 2.0][i % 5],
                ..Default::default()
            };
            assert!(soft_loss_value(&s, &t, &cfg).unwrap() >= 0.0);
        }
    }

    #[test]
    fn distill_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_logits([2, 4, 5], &mut rng, 3.0);
        let t = random_logits([2, 4, 5], &mut rng, 3.0);
        let tokens = random_tokens(2, 4, 5, &mut rng);
        let cfg0 = DistillConfig::new(0.0, 0.25).unwrap();
        assert_eq!(
            distill_loss_value(&s, &t, &tokens, &cfg0).unwrap().to_bits(),
            hard_loss_value(&s, &tokens).unwrap().to_bits()
        );
        let half = DistillConfig::new(0.5, 0.5).unwrap();
        let want = (hard_loss_value(&s, &tokens).unwrap() + soft_loss_value(&s, &t, &half).unwrap()) / 2.0;
        assert!((distill_loss_value(&s, &t, &tokens, &half).unwrap() - want).abs() <= 1e-12);
    }

    fn student_grad(s: &Tensor, t: &Tensor, tokens: &[Vec<u32>], cfg: &DistillConfig) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.param(s);
        let l = distill_loss(&mut tape, v, t, tokens, cfg).unwrap();
        tape.backward(l).unwrap();
        tape.grad_or_zeros(v)
    }

    #[test]
    fn alpha_one_gradient_ignores_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_logits([2, 4, 5], &mut rng, 3.0);
        let t = random_logits([2, 4, 5], &mut rng, 3.0);
        let a = random_tokens(2, 4, 5, &mut rng);
        let b = random_tokens(2, 4, 5, &mut rng);
        let cfg = DistillConfig::new(1.0, 0.5).unwrap();
        assert_eq!(student_grad(&s, &t, &a, &cfg), student_grad(&s, &t, &b, &cfg));
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_logits([1, 3, 4], &mut rng, 2.0);
        let t = random_logits([1, 3, 4], &mut rng, 2.0);
        let tokens = random_tokens(1, 3, 4, &mut rng);
        let mut tape = Tape::new();
        let v = tape.param(&s);
        let teacher = tape.param(&t);
        let frozen = tape.value(teacher).clone();
        let l = distill_loss(&mut tape, v, &frozen, &tokens, &DistillConfig::default()).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(v).is_some());
        assert!(tape.grad(teacher).is_none());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_logits([2, 3, 4], &mut rng, 2.0);
        let t = random_logits([2, 3, 4], &mut rng, 2.0);
        let tokens = random_tokens(2, 3, 4, &mut rng);
        for form in [SoftLossForm::Standard, SoftLossForm::Literal] {
            for (alpha, temp) in [(0.0, 1.0), (1.0, 0.5), (0.5, 0.25)] {
                let cfg = DistillConfig {
                    alpha,
                    temperature: temp,
                    t2_scaling: true,
                    soft_form: form,
                };
                let g = student_grad(&s, &t, &tokens, &cfg);
                let h = 1e-5;
                for j in 0..s.numel() {
                    let mut p = s.clone();
                    p.data_mut()[j] += h;
                    let mut m = s.clone();
                    m.data_mut()[j] -= h;
                    let fd = (distill_loss_value(&p, &t, &tokens, &cfg).unwrap()
                        - distill_loss_value(&m, &t, &tokens, &cfg).unwrap())
                        / (2.0 * h);
                    let a = g.data()[j];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    assert!(rel <= 1e-5, "{form:?} α={alpha} T={temp} [{j}]: {a} vs {fd}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn soft_loss_of_identical_logits_is_zero(
            data in proptest::collection::vec(-50.0f64..50.0, 12),
            temp in prop::sample::select(vec![0.1, 0.25, 0.5, 1.0]),
        ) {
            let x = Tensor::new(vec![1, 3, 4], data).unwrap();
            let cfg = DistillConfig { temperature: temp, ..Default::default() };
            prop_assert_eq!(soft_loss_value(&x, &x, &cfg).unwrap(), 0.0);
        }

        #[test]
        fn distill_is_affine_in_alpha(
            seed in 0u64..1000,
            alpha in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_logits([2, 3, 5], &mut rng, 4.0);
            let t = random_logits([2, 3, 5], &mut rng, 4.0);
            let tokens = random_tokens(2, 3, 5, &mut rng);
            let at = |a: f64| distill_loss_value(&s, &t, &tokens, &DistillConfig::new(a, 0.25).unwrap()).unwrap();
            let (l0, l1) = (at(0.0), at(1.0));
            prop_assert!((at(alpha) - (l0 + alpha * (l1 - l0))).abs() <= 1e-12);
        }
    }
}
