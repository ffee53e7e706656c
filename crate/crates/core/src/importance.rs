//! Neuron and head importance: first-order Taylor scores, the exact
//! zero-out oracle, weight/activation baselines and the module summary.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{distill_loss_value, hard_loss_value, DistillConfig, Objective};
use crate::model::{
    check_tokens, forward, forward_on_tape, loss_and_grads, param_breakdown, BoundWeights, ModelConfig,
    TransformerWeights,
};
use crate::autodiff::Tape;

/// A scoring criterion for MLP hidden neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CriterionKind {
    TaylorHard,
    TaylorDistill,
    Magnitude,
    ActivationWeighted,
    Oracle,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 5] = [
        CriterionKind::TaylorHard,
        CriterionKind::TaylorDistill,
        CriterionKind::Magnitude,
        CriterionKind::ActivationWeighted,
        CriterionKind::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CriterionKind::TaylorHard => "taylor_hard",
            CriterionKind::TaylorDistill => "taylor_distill",
            CriterionKind::Magnitude => "magnitude",
            CriterionKind::ActivationWeighted => "activation_weighted",
            CriterionKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

/// How per-batch signed Taylor terms are reduced over the calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `mean_b |s_b|`
    #[default]
    AbsThenMean,
    /// `|mean_b s_b|`
    MeanThenAbs,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::AbsThenMean => "abs_then_mean",
            Aggregation::MeanThenAbs => "mean_then_abs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "abs_then_mean" => Ok(Aggregation::AbsThenMean),
            "mean_then_abs" => Ok(Aggregation::MeanThenAbs),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }

    fn reduce(self, sums: &mut [Vec<f64>], abs_sums: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
        let n = n as f64;
        match self {
            Aggregation::AbsThenMean => abs_sums
                .into_iter()
                .map(|l| l.into_iter().map(|v| v / n).collect())
                .collect(),
            Aggregation::MeanThenAbs => sums
                .iter_mut()
                .map(|l| l.iter().map(|v| (v / n).abs()).collect())
                .collect(),
        }
    }
}

/// Which loss a gradient-based score differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Hard,
    Distill(DistillConfig),
}

/// A frozen model whose logits serve as distillation targets.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub weights: &'a TransformerWeights,
    pub config: &'a ModelConfig,
}

/// Per-layer, per-neuron nonnegative importance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScoreTable {
    pub criterion: CriterionKind,
    pub layers: Vec<Vec<f64>>,
    pub batches_accumulated: usize,
}

impl NeuronScoreTable {
    pub fn num_neurons(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Scores of every layer, concatenated in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let dims: Vec<usize> = self.layers.iter().map(Vec::len).collect();
        if dims != config.d_ff() {
            return Err(Error::Input(format!(
                "score table widths {dims:?} do not match model d_ff {:?}",
                config.d_ff()
            )));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "neuron", "criterion", "score"])?;
        for (l, scores) in self.layers.iter().enumerate() {
            for (i, s) in scores.iter().enumerate() {
                w.write_record([
                    l.to_string(),
                    i.to_string(),
                    self.criterion.as_str().to_string(),
                    s.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn require_batches(batches: &[Vec<Vec<u32>>]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Input("calibration set has no batches".into()));
    }
    Ok(())
}

fn teacher_for(loss: LossKind, teacher: Option<Teacher<'_>>) -> Result<Option<(Teacher<'_>, DistillConfig)>> {
    match loss {
        LossKind::Hard => Ok(None),
        LossKind::Distill(cfg) => {
            cfg.validate()?;
            let t = teacher.ok_or_else(|| Error::Config("distillation scoring needs a teacher model".into()))?;
            Ok(Some((t, cfg)))
        }
    }
}

/// Loss value and gradients on one batch for the requested loss.
fn batch_grads(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[Vec<u32>],
    distill: Option<(Teacher<'_>, DistillConfig)>,
) -> Result<(f64, TransformerWeights)> {
    match distill {
        None => loss_and_grads(weights, config, tokens, &Objective::Hard),
        Some((t, cfg)) => {
            let teacher_logits = forward(t.weights, t.config, tokens)?;
            let objective = Objective::Distill {
                teacher_logits: &teacher_logits,
                config: cfg,
            };
            loss_and_grads(weights, config, tokens, &objective)
        }
    }
}

/// Signed first-order terms `Σ g·w` over each neuron group for one batch.
pub fn signed_taylor_terms(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[Vec<u32>],
    loss: LossKind,
    teacher: Option<Teacher<'_>>,
) -> Result<Vec<Vec<f64>>> {
    let distill = teacher_for(loss, teacher)?;
    let (_, grads) = batch_grads(weights, config, tokens, distill)?;
    Ok(group_terms(weights, &grads))
}

fn group_terms(weights: &TransformerWeights, grads: &TransformerWeights) -> Vec<Vec<f64>> {
    weights
        .layers
        .iter()
        .zip(&grads.layers)
        .map(|(w, g)| (0..w.mlp.d_ff()).map(|i| g.mlp.group_dot(&w.mlp, i)).collect())
        .collect()
}

/// Taylor importance `|Σ g·w|` per neuron group, reduced over `batches`.
pub fn taylor_scores(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
    loss: LossKind,
    teacher: Option<Teacher<'_>>,
    aggregation: Aggregation,
) -> Result<NeuronScoreTable> {
    require_batches(batches)?;
    let distill = teacher_for(loss, teacher)?;
    let widths = config.d_ff();
    let mut sums: Vec<Vec<f64>> = widths.iter().map(|&n| vec![0.0; n]).collect();
    let mut abs_sums = sums.clone();
    for tokens in batches {
        let (_, grads) = batch_grads(weights, config, tokens, distill)?;
        for (l, terms) in group_terms(weights, &grads).into_iter().enumerate() {
            for (i, t) in terms.into_iter().enumerate() {
                sums[l][i] += t;
                abs_sums[l][i] += t.abs();
            }
        }
    }
    Ok(NeuronScoreTable {
        criterion: match loss {
            LossKind::Hard => CriterionKind::TaylorHard,
            LossKind::Distill(_) => CriterionKind::TaylorDistill,
        },
        layers: aggregation.reduce(&mut sums, abs_sums, batches.len()),
        batches_accumulated: batches.len(),
    })
}

/// Calibration-set loss, averaged over all scored positions.
fn calibration_loss(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
    targets: &[Option<crate::tensor::Tensor>],
    distill: Option<DistillConfig>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0;
    for (tokens, target) in batches.iter().zip(targets) {
        let (b, s) = check_tokens(config, tokens)?;
        let logits = forward(weights, config, tokens)?;
        let value = match (distill, target) {
            (Some(cfg), Some(t)) => distill_loss_value(&logits, t, tokens, &cfg)?,
            _ => hard_loss_value(&logits, tokens)?,
        };
        let positions = (b * (s - 1)) as f64;
        total += value * positions;
        count += positions;
    }
    Ok(total / count)
}

/// Exact importance: `|L(group zeroed) − L(original)|` on the full
/// calibration set, one evaluation per neuron, run in parallel.
pub fn oracle_scores(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
    loss: LossKind,
    teacher: Option<Teacher<'_>>,
) -> Result<NeuronScoreTable> {
    require_batches(batches)?;
    weights.check_config(config)?;
    let distill = teacher_for(loss, teacher)?;
    let targets: Vec<Option<crate::tensor::Tensor>> = batches
        .iter()
        .map(|tokens| distill.map(|(t, _)| forward(t.weights, t.config, tokens)).transpose())
        .collect::<Result<_>>()?;
    let cfg = distill.map(|(_, c)| c);
    let base = calibration_loss(weights, config, batches, &targets, cfg)?;
    let jobs: Vec<(usize, usize)> = config
        .d_ff()
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| (0..n).map(move |i| (l, i)))
        .collect();
    let deltas: Vec<f64> = jobs
        .par_iter()
        .map(|&(l, i)| {
            let mut w = weights.clone();
            w.layers[l].mlp.zero_neuron(i);
            calibration_loss(&w, config, batches, &targets, cfg).map(|v| (v - base).abs())
        })
        .collect::<Result<_>>()?;
    let mut it = deltas.into_iter();
    Ok(NeuronScoreTable {
        criterion: CriterionKind::Oracle,
        layers: config.d_ff().iter().map(|&n| it.by_ref().take(n).collect()).collect(),
        batches_accumulated: batches.len(),
    })
}

/// Gradient-free baselines: weight magnitude, or down-projection magnitude
/// weighted by the hidden unit's activation norm over the calibration set.
pub fn baseline_scores(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
    kind: CriterionKind,
) -> Result<NeuronScoreTable> {
    weights.check_config(config)?;
    let layers = match kind {
        CriterionKind::Magnitude => weights
            .layers
            .iter()
            .map(|l| {
                let m = &l.mlp;
                let d = m.w_down.shape()[0];
                (0..m.d_ff())
                    .map(|i| {
                        let up: f64 = m.w_up.row(i).iter().map(|v| v.abs()).sum();
                        let gate: f64 = m.w_gate.row(i).iter().map(|v| v.abs()).sum();
                        let down: f64 = (0..d).map(|j| m.w_down.at(j, i).abs()).sum();
                        up + gate + down
                    })
                    .collect()
            })
            .collect(),
        CriterionKind::ActivationWeighted => {
            require_batches(batches)?;
            let norms = hidden_norms(weights, config, batches)?;
            weights
                .layers
                .iter()
                .zip(norms)
                .map(|(l, norm)| {
                    let d = l.mlp.w_down.shape()[0];
                    norm.iter()
                        .enumerate()
                        .map(|(i, n)| (0..d).map(|j| l.mlp.w_down.at(j, i).abs()).sum::<f64>() * n)
                        .collect()
                })
                .collect()
        }
        other => {
            return Err(Error::Config(format!(
                "`{}` is not a baseline criterion",
                other.as_str()
            )))
        }
    };
    Ok(NeuronScoreTable {
        criterion: kind,
        layers,
        batches_accumulated: if kind == CriterionKind::Magnitude { 0 } else { batches.len() },
    })
}

/// L2 norm of every MLP hidden unit's activation over all calibration tokens.
pub fn hidden_norms(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
) -> Result<Vec<Vec<f64>>> {
    let mut sq: Vec<Vec<f64>> = config.d_ff().iter().map(|&n| vec![0.0; n]).collect();
    for tokens in batches {
        let mut tape = Tape::new();
        let bound = BoundWeights::bind(&mut tape, weights, false);
        let out = forward_on_tape(&mut tape, config, &bound, tokens)?;
        for (l, h) in out.mlp_hidden.iter().enumerate() {
            let h = tape.value(*h);
            let n = sq[l].len();
            if n == 0 {
                continue;
            }
            for row in h.data().chunks_exact(n) {
                for (acc, v) in sq[l].iter_mut().zip(row) {
                    *acc += v * v;
                }
            }
        }
    }
    Ok(sq
        .into_iter()
        .map(|l| l.into_iter().map(f64::sqrt).collect())
        .collect())
}

/// Mean `|g·w|` per parameter element for one layer's attention and MLP
/// linear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerModuleImportance {
    pub attention_mean: f64,
    pub mlp_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleImportance {
    pub layers: Vec<LayerModuleImportance>,
    /// Aggregated over all layers, weighting every parameter equally.
    pub attention_mean: f64,
    pub mlp_mean: f64,
    /// MLP linear parameters divided by attention linear parameters.
    pub mlp_to_attention_params: f64,
}

pub fn mlp_to_attention_param_ratio(config: &ModelConfig) -> f64 {
    let b = param_breakdown(config);
    b.mlp as f64 / b.attention as f64
}

fn abs_prod_sum(w: &crate::tensor::Tensor, g: &crate::tensor::Tensor) -> f64 {
    w.data().iter().zip(g.data()).map(|(a, b)| (a * b).abs()).sum()
}

/// Average elementwise Taylor importance of attention versus MLP weights
/// under the hard loss, per-batch absolute values averaged over batches.
pub fn module_importance_summary(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
) -> Result<ModuleImportance> {
    require_batches(batches)?;
    let n_layers = weights.layers.len();
    let mut attn_sum = vec![0.0; n_layers];
    let mut mlp_sum = vec![0.0; n_layers];
    for tokens in batches {
        let (_, grads) = loss_and_grads(weights, config, tokens, &Objective::Hard)?;
        for (l, (w, g)) in weights.layers.iter().zip(&grads.layers).enumerate() {
            attn_sum[l] += abs_prod_sum(&w.attn.w_q, &g.attn.w_q)
                + abs_prod_sum(&w.attn.w_k, &g.attn.w_k)
                + abs_prod_sum(&w.attn.w_v, &g.attn.w_v)
                + abs_prod_sum(&w.attn.w_o, &g.attn.w_o);
            mlp_sum[l] += abs_prod_sum(&w.mlp.w_up, &g.mlp.w_up)
                + abs_prod_sum(&w.mlp.w_gate, &g.mlp.w_gate)
                + abs_prod_sum(&w.mlp.w_down, &g.mlp.w_down);
        }
    }
    let nb = batches.len() as f64;
    let mut layers = Vec::with_capacity(n_layers);
    let (mut attn_total, mut attn_count, mut mlp_total, mut mlp_count) = (0.0, 0usize, 0.0, 0usize);
    for (l, w) in weights.layers.iter().enumerate() {
        let a_n = w.attn.w_q.numel() + w.attn.w_k.numel() + w.attn.w_v.numel() + w.attn.w_o.numel();
        let m_n = w.mlp.w_up.numel() + w.mlp.w_gate.numel() + w.mlp.w_down.numel();
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / nb / n as f64 };
        layers.push(LayerModuleImportance {
            attention_mean: mean(attn_sum[l], a_n),
            mlp_mean: mean(mlp_sum[l], m_n),
        });
        attn_total += attn_sum[l] / nb;
        attn_count += a_n;
        mlp_total += mlp_sum[l] / nb;
        mlp_count += m_n;
    }
    Ok(ModuleImportance {
        layers,
        attention_mean: if attn_count == 0 { 0.0 } else { attn_total / attn_count as f64 },
        mlp_mean: if mlp_count == 0 { 0.0 } else { mlp_total / mlp_count as f64 },
        mlp_to_attention_params: mlp_to_attention_param_ratio(config),
    })
}

/// Taylor importance of every attention head: `|Σ g·w|` over the head's
/// rows of `W_q`, `W_k`, `W_v` and columns of `W_o`, reduced over batches.
/// Requires one key/value head per query head.
pub fn head_scores(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
    loss: LossKind,
    teacher: Option<Teacher<'_>>,
    aggregation: Aggregation,
) -> Result<Vec<Vec<f64>>> {
    require_batches(batches)?;
    if config.layers.iter().any(|l| l.n_heads != l.n_kv_heads) {
        return Err(Error::Config(
            "head scoring needs as many key/value heads as query heads".into(),
        ));
    }
    let distill = teacher_for(loss, teacher)?;
    let hd = config.head_dim();
    let heads: Vec<usize> = config.layers.iter().map(|l| l.n_heads).collect();
    let mut sums: Vec<Vec<f64>> = heads.iter().map(|&n| vec![0.0; n]).collect();
    let mut abs_sums = sums.clone();
    for tokens in batches {
        let (_, grads) = batch_grads(weights, config, tokens, distill)?;
        for (l, (w, g)) in weights.layers.iter().zip(&grads.layers).enumerate() {
            let d = w.attn.w_o.shape()[0];
            let q_dim = w.attn.w_o.shape()[1];
            for h in 0..heads[l] {
                let rows = h * hd..(h + 1) * hd;
                let mut t = 0.0;
                for m in [
                    (&w.attn.w_q, &g.attn.w_q),
                    (&w.attn.w_k, &g.attn.w_k),
                    (&w.attn.w_v, &g.attn.w_v),
                ] {
                    let cols = m.0.shape()[1];
                    let span = rows.start * cols..rows.end * cols;
                    t += m.0.data()[span.clone()]
                        .iter()
                        .zip(&m.1.data()[span])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                for j in 0..d {
                    for c in rows.clone() {
                        t += w.attn.w_o.data()[j * q_dim + c] * g.attn.w_o.data()[j * q_dim + c];
                    }
                }
                sums[l][h] += t;
                abs_sums[l][h] += t.abs();
            }
        }
    }
    Ok(aggregation.reduce(&mut sums, abs_sums, batches.len()))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "spearman needs two equal-length series of ≥2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
