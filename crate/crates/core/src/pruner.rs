//! Ratio arithmetic, top-k selection, structural surgery and the two-stage
//! pruning pipeline.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::{
    baseline_scores, head_scores, oracle_scores, taylor_scores, Aggregation, CriterionKind, LossKind,
    NeuronScoreTable, Teacher,
};
use crate::losses::DistillConfig;
use crate::model::{count_macs, count_params, param_breakdown, ModelConfig, TransformerWeights};

/// Which structures a pruning run may remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    #[default]
    MlpOnly,
    MlpAndAttention,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::MlpOnly => "mlp_only",
            Scope::MlpAndAttention => "mlp_and_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp_only" => Ok(Scope::MlpOnly),
            "mlp_and_attention" => Ok(Scope::MlpAndAttention),
            other => Err(Error::Config(format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSpec {
    /// Fraction of all parameters, embedding included, to remove.
    pub target_ratio: f64,
    /// Share of the neurons-to-remove taken out by the label-loss stage.
    pub cold_start_fraction: f64,
    pub distill: DistillConfig,
    pub scope: Scope,
    /// `taylor_distill` runs the two-stage pipeline; any other criterion
    /// prunes in a single stage scored by that criterion.
    pub criterion: CriterionKind,
    pub aggregation: Aggregation,
    /// Sequence length at which MACs are reported.
    pub mac_seq_len: usize,
}

impl Default for PruneSpec {
    fn default() -> Self {
        Self {
            target_ratio: 0.2,
            cold_start_fraction: 0.25,
            distill: DistillConfig::default(),
            scope: Scope::MlpOnly,
            criterion: CriterionKind::TaylorDistill,
            aggregation: Aggregation::AbsThenMean,
            mac_seq_len: 128,
        }
    }
}

impl PruneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!(
                "target ratio {} outside [0, 1)",
                self.target_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return Err(Error::Config(format!(
                "cold_start_fraction {} outside [0, 1]",
                self.cold_start_fraction
            )));
        }
        if self.mac_seq_len == 0 {
            return Err(Error::Config("mac_seq_len must be positive".into()));
        }
        self.distill.validate()
    }
}

/// Uniform per-layer MLP width that meets a parameter-removal target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetainPlan {
    /// Retained neurons per layer.
    pub k: usize,
    /// Neurons removed per layer.
    pub removed: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub achieved_ratio: f64,
}

fn uniform_d_ff(config: &ModelConfig) -> Result<usize> {
    let widths = config.d_ff();
    match widths.first() {
        Some(&n) if widths.iter().all(|&w| w == n) => Ok(n),
        Some(_) => Err(Error::Config(format!(
            "ratio planning needs one MLP width across layers, got {widths:?}"
        ))),
        None => Err(Error::Config("model has no layers".into())),
    }
}

/// Smallest `r` with `r · per_unit ≥ need`.
fn min_units(need: f64, per_unit: u64) -> usize {
    if need <= 0.0 {
        return 0;
    }
    let mut r = (need / per_unit as f64).ceil() as usize;
    while r > 0 && ((r - 1) as u64 * per_unit) as f64 >= need {
        r -= 1;
    }
    while ((r as u64 * per_unit) as f64) < need {
        r += 1;
    }
    r
}

/// Largest uniform `k` such that removing `N − k` neurons from every layer
/// removes at least `ρ` of all parameters.
pub fn ratio_to_retained(config: &ModelConfig, ratio: f64) -> Result<RetainPlan> {
    config.validate()?;
    let n = uniform_d_ff(config)?;
    let total = count_params(config);
    let mlp = param_breakdown(config).mlp;
    let max_ratio = mlp as f64 / total as f64;
    if !(ratio >= 0.0) || (ratio > 0.0 && ratio >= max_ratio) {
        return Err(Error::Config(format!(
            "ratio {ratio} is not achievable by removing MLP neurons; maximum is {max_ratio:.6}"
        )));
    }
    let per_neuron = 3 * config.d_model as u64 * config.n_layers as u64;
    let removed = min_units(ratio * total as f64, per_neuron).min(n);
    let after = total - removed as u64 * per_neuron;
    Ok(RetainPlan {
        k: n - removed,
        removed,
        params_before: total,
        params_after: after,
        achieved_ratio: 1.0 - after as f64 / total as f64,
    })
}

/// Retained indices per layer, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedSet {
    pub layers: Vec<Vec<usize>>,
}

impl RetainedSet {
    pub fn all(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&n| (0..n).collect()).collect(),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    fn check(&self, widths: &[usize], what: &str) -> Result<()> {
        if self.layers.len() != widths.len() {
            return Err(Error::Input(format!(
                "retained set covers {} layers, model has {}",
                self.layers.len(),
                widths.len()
            )));
        }
        for (l, (idx, &n)) in self.layers.iter().zip(widths).enumerate() {
            if idx.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Input(format!(
                    "retained {what} of layer {l} are not strictly ascending"
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Input(format!(
                    "retained {what} index {bad} out of range for layer {l} of width {n}"
                )));
            }
        }
        Ok(())
    }

    /// Maps indices of a set chosen on an already-pruned model back through
    /// `self`, the set that produced that model.
    pub fn compose(&self, inner: &RetainedSet) -> Result<RetainedSet> {
        inner.check(&self.counts(), "indices")?;
        Ok(RetainedSet {
            layers: self
                .layers
                .iter()
                .zip(&inner.layers)
                .map(|(outer, inner)| inner.iter().map(|&i| outer[i]).collect())
                .collect(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "index"])?;
        for (l, idx) in self.layers.iter().enumerate() {
            for i in idx {
                w.write_record([l.to_string(), i.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Indices of the `k` largest scores, ties to the lower index, ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Input(format!("cannot keep {k} of {} units", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

pub fn select_topk(table: &NeuronScoreTable, k: usize) -> Result<RetainedSet> {
    Ok(RetainedSet {
        layers: table
            .layers
            .iter()
            .map(|s| top_k_indices(s, k))
            .collect::<Result<_>>()?,
    })
}

/// Physically removes every MLP neuron not in `retained`. Other tensors are
/// copied unchanged.
pub fn surgery(
    weights: &TransformerWeights,
    config: &ModelConfig,
    retained: &RetainedSet,
) -> Result<(TransformerWeights, ModelConfig)> {
    weights.check_config(config)?;
    retained.check(&config.d_ff(), "neurons")?;
    let mut w = weights.clone();
    let mut c = config.clone();
    for ((layer, shape), idx) in w.layers.iter_mut().zip(&mut c.layers).zip(&retained.layers) {
        layer.mlp.w_up = layer.mlp.w_up.select_rows(idx);
        layer.mlp.w_gate = layer.mlp.w_gate.select_rows(idx);
        layer.mlp.w_down = layer.mlp.w_down.select_cols(idx);
        shape.d_ff = idx.len();
    }
    Ok((w, c))
}

/// Zeroes every MLP neuron group not in `retained`, keeping shapes.
pub fn mask_neurons(weights: &TransformerWeights, config: &ModelConfig, retained: &RetainedSet) -> Result<TransformerWeights> {
    retained.check(&config.d_ff(), "neurons")?;
    let mut w = weights.clone();
    for (layer, idx) in w.layers.iter_mut().zip(&retained.layers) {
        for i in 0..layer.mlp.d_ff() {
            if idx.binary_search(&i).is_err() {
                layer.mlp.zero_neuron(i);
            }
        }
    }
    Ok(w)
}

fn require_mha(config: &ModelConfig) -> Result<()> {
    if config.layers.iter().any(|l| l.n_heads != l.n_kv_heads) {
        return Err(Error::Config(
            "head pruning needs one key/value head per query head".into(),
        ));
    }
    Ok(())
}

/// Removes every attention head not in `retained` (query, key, value rows
/// and output-projection columns). At least one head must remain per layer.
pub fn head_surgery(
    weights: &TransformerWeights,
    config: &ModelConfig,
    retained: &RetainedSet,
) -> Result<(TransformerWeights, ModelConfig)> {
    weights.check_config(config)?;
    require_mha(config)?;
    let heads: Vec<usize> = config.layers.iter().map(|l| l.n_heads).collect();
    retained.check(&heads, "heads")?;
    if let Some(l) = retained.layers.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("layer {l} would keep no attention heads")));
    }
    let hd = config.head_dim();
    let mut w = weights.clone();
    let mut c = config.clone();
    for ((layer, shape), idx) in w.layers.iter_mut().zip(&mut c.layers).zip(&retained.layers) {
        let rows: Vec<usize> = idx.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect();
        layer.attn.w_q = layer.attn.w_q.select_rows(&rows);
        layer.attn.w_k = layer.attn.w_k.select_rows(&rows);
        layer.attn.w_v = layer.attn.w_v.select_rows(&rows);
        layer.attn.w_o = layer.attn.w_o.select_cols(&rows);
        shape.n_heads = idx.len();
        shape.n_kv_heads = idx.len();
    }
    Ok((w, c))
}

/// Zeroes the slices of every head not in `retained`, keeping shapes.
pub fn mask_heads(weights: &TransformerWeights, config: &ModelConfig, retained: &RetainedSet) -> Result<TransformerWeights> {
    require_mha(config)?;
    let heads: Vec<usize> = config.layers.iter().map(|l| l.n_heads).collect();
    retained.check(&heads, "heads")?;
    let hd = config.head_dim();
    let mut w = weights.clone();
    for ((layer, idx), &n) in w.layers.iter_mut().zip(&retained.layers).zip(&heads) {
        for h in (0..n).filter(|h| idx.binary_search(h).is_err()) {
            for r in h * hd..(h + 1) * hd {
                layer.attn.w_q.row_mut(r).fill(0.0);
                layer.attn.w_k.row_mut(r).fill(0.0);
                layer.attn.w_v.row_mut(r).fill(0.0);
                for j in 0..layer.attn.w_o.shape()[0] {
                    layer.attn.w_o.set(j, r, 0.0);
                }
            }
        }
    }
    Ok(w)
}

/// Scores and retained set of one pruning stage, in that stage's indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub scores: NeuronScoreTable,
    pub retained: RetainedSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub spec: PruneSpec,
    pub cold_start_k: usize,
    pub final_k: usize,
    pub heads_removed_per_layer: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub achieved_ratio: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub head_scores: Option<Vec<Vec<f64>>>,
    pub retained_heads: Option<RetainedSet>,
    pub stage1: Option<StageRecord>,
    pub stage2: Option<StageRecord>,
    /// Final retained neurons in the original model's indexing.
    pub retained: RetainedSet,
}

impl PruneReport {
    pub fn mac_reduction(&self) -> f64 {
        1.0 - self.macs_after as f64 / self.macs_before as f64
    }

    pub fn summary(&self, config_after: &ModelConfig) -> String {
        let mut s = String::new();
        let s_ = &mut s;
        let _ = writeln!(s_, "criterion: {}", self.spec.criterion.as_str());
        let _ = writeln!(s_, "scope: {}", self.spec.scope.as_str());
        let _ = writeln!(s_, "target_ratio: {}", self.spec.target_ratio);
        let _ = writeln!(s_, "achieved_ratio: {:.6}", self.achieved_ratio);
        let _ = writeln!(s_, "cold_start_fraction: {}", self.spec.cold_start_fraction);
        let _ = writeln!(s_, "alpha: {}", self.spec.distill.alpha);
        let _ = writeln!(s_, "temperature: {}", self.spec.distill.temperature);
        let _ = writeln!(s_, "cold_start_k: {}", self.cold_start_k);
        let _ = writeln!(s_, "final_k: {}", self.final_k);
        let _ = writeln!(s_, "heads_removed_per_layer: {}", self.heads_removed_per_layer);
        let _ = writeln!(s_, "params_before: {}", self.params_before);
        let _ = writeln!(s_, "params_after: {}", self.params_after);
        let _ = writeln!(s_, "mac_seq_len: {}", self.spec.mac_seq_len);
        let _ = writeln!(s_, "macs_before: {}", self.macs_before);
        let _ = writeln!(s_, "macs_after: {}", self.macs_after);
        let _ = writeln!(s_, "mac_reduction: {:.6}", self.mac_reduction());
        for (l, shape) in config_after.layers.iter().enumerate() {
            let _ = writeln!(s_, "layer {l}: d_ff {} heads {}", shape.d_ff, shape.n_heads);
        }
        s
    }

    /// Writes score tables and retained sets as CSV files into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        if let Some(st) = &self.stage1 {
            st.scores.write_csv(&dir.join("scores_stage1.csv"))?;
            st.retained.write_csv(&dir.join("retained_stage1.csv"))?;
        }
        if let Some(st) = &self.stage2 {
            st.scores.write_csv(&dir.join("scores_stage2.csv"))?;
            st.retained.write_csv(&dir.join("retained_stage2.csv"))?;
        }
        if let Some(h) = &self.retained_heads {
            h.write_csv(&dir.join("retained_heads.csv"))?;
        }
        self.retained.write_csv(&dir.join("retained.csv"))
    }
}

/// Pruned model plus its report.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub weights: TransformerWeights,
    pub config: ModelConfig,
    pub report: PruneReport,
}

/// Cold-start width: `N − round(f·(N − k))`, clamped to `[k, N]`.
pub fn cold_start_k(n: usize, k: usize, fraction: f64) -> usize {
    let cut = (fraction * (n - k) as f64).round() as usize;
    n.saturating_sub(cut).clamp(k, n)
}

fn score_single(
    weights: &TransformerWeights,
    config: &ModelConfig,
    batches: &[Vec<Vec<u32>>],
    criterion: CriterionKind,
    spec: &PruneSpec,
    teacher: Teacher<'_>,
) -> Result<NeuronScoreTable> {
    match criterion {
        CriterionKind::TaylorHard => taylor_scores(weights, config, batches, LossKind::Hard, None, spec.aggregation),
        CriterionKind::TaylorDistill => taylor_scores(
            weights,
            config,
            batches,
            LossKind::Distill(spec.distill),
            Some(teacher),
            spec.aggregation,
        ),
        CriterionKind::Oracle => oracle_scores(weights, config, batches, LossKind::Hard, None),
        other => baseline_scores(weights, config, batches, other),
    }
}

/// Removes MLP neurons of `student` down to `k` per layer. With the
/// `taylor_distill` criterion this is the two-stage pipeline: a label-loss
/// pass to `k′`, then a distillation-loss pass against `teacher` to `k`.
fn prune_mlp(
    student: &TransformerWeights,
    student_cfg: &ModelConfig,
    teacher: Teacher<'_>,
    spec: &PruneSpec,
    batches: &[Vec<Vec<u32>>],
    k: usize,
) -> Result<(TransformerWeights, ModelConfig, usize, Option<StageRecord>, Option<StageRecord>, RetainedSet)> {
    let n = uniform_d_ff(student_cfg)?;
    if spec.criterion != CriterionKind::TaylorDistill {
        if k == n {
            return Ok((student.clone(), student_cfg.clone(), n, None, None, RetainedSet::all(&student_cfg.d_ff())));
        }
        let scores = score_single(student, student_cfg, batches, spec.criterion, spec, teacher)?;
        let retained = select_topk(&scores, k)?;
        let (w, c) = surgery(student, student_cfg, &retained)?;
        let record = StageRecord { scores, retained: retained.clone() };
        return Ok((w, c, k, Some(record), None, retained));
    }
    let k1 = cold_start_k(n, k, spec.cold_start_fraction);
    let mut w = student.clone();
    let mut c = student_cfg.clone();
    let mut overall = RetainedSet::all(&c.d_ff());
    let mut stage1 = None;
    if k1 < n {
        let scores = taylor_scores(&w, &c, batches, LossKind::Hard, None, spec.aggregation)?;
        let retained = select_topk(&scores, k1)?;
        (w, c) = surgery(&w, &c, &retained)?;
        overall = retained.clone();
        stage1 = Some(StageRecord { scores, retained });
    }
    let mut stage2 = None;
    if k < k1 {
        let scores = taylor_scores(
            &w,
            &c,
            batches,
            LossKind::Distill(spec.distill),
            Some(teacher),
            spec.aggregation,
        )?;
        let retained = select_topk(&scores, k)?;
        (w, c) = surgery(&w, &c, &retained)?;
        overall = overall.compose(&retained)?;
        stage2 = Some(StageRecord { scores, retained });
    }
    Ok((w, c, k1, stage1, stage2, overall))
}

/// Plans the attention/MLP split for the comparison scope: the attention
/// share of the budget follows its share of prunable parameters, rounded
/// to whole heads (at least one head kept), and MLP neurons cover the rest.
pub fn plan_comparison(config: &ModelConfig, ratio: f64) -> Result<(usize, usize)> {
    config.validate()?;
    require_mha(config)?;
    let n = uniform_d_ff(config)?;
    let heads = config.n_heads;
    if config.layers.iter().any(|l| l.n_heads != heads) {
        return Err(Error::Config("comparison mode needs the same head count in every layer".into()));
    }
    let total = count_params(config) as f64;
    let b = param_breakdown(config);
    let budget = ratio * total;
    let l = config.n_layers as u64;
    let d = config.d_model as u64;
    let per_head = 4 * d * config.head_dim() as u64 * l;
    let attn_share = b.attention as f64 / (b.attention + b.mlp) as f64;
    let h = ((attn_share * budget / per_head as f64).round() as usize).min(heads - 1);
    let rest = budget - (h as u64 * per_head) as f64;
    let removed = min_units(rest, 3 * d * l);
    if removed > n {
        let max = (b.mlp + (heads as u64 - 1) * per_head) as f64 / total;
        return Err(Error::Config(format!(
            "ratio {ratio} is not achievable in comparison mode; maximum is {max:.6}"
        )));
    }
    Ok((h, n - removed))
}

/// Runs the pipeline selected by `spec` on `original`, scoring on `batches`.
pub fn run_sdmprune(
    original: &TransformerWeights,
    config: &ModelConfig,
    spec: &PruneSpec,
    batches: &[Vec<Vec<u32>>],
) -> Result<PruneOutcome> {
    spec.validate()?;
    original.check_config(config)?;
    let teacher = Teacher {
        weights: original,
        config,
    };
    let params_before = count_params(config);
    let macs_before = count_macs(config, spec.mac_seq_len);
    let (mut w, mut c, k, heads_removed) = match spec.scope {
        Scope::MlpOnly => {
            let plan = ratio_to_retained(config, spec.target_ratio)?;
            (original.clone(), config.clone(), plan.k, 0)
        }
        Scope::MlpAndAttention => {
            let (h, k) = plan_comparison(config, spec.target_ratio)?;
            (original.clone(), config.clone(), k, h)
        }
    };
    let mut head_table = None;
    let mut retained_heads = None;
    if heads_removed > 0 {
        let scores = head_scores(&w, &c, batches, LossKind::Hard, None, spec.aggregation)?;
        let keep = config.n_heads - heads_removed;
        let set = RetainedSet {
            layers: scores.iter().map(|s| top_k_indices(s, keep)).collect::<Result<_>>()?,
        };
        (w, c) = head_surgery(&w, &c, &set)?;
        head_table = Some(scores);
        retained_heads = Some(set);
    }
    let (w, c, k1, stage1, stage2, retained) = prune_mlp(&w, &c, teacher, spec, batches, k)?;
    let params_after = count_params(&c);
    let report = PruneReport {
        spec: spec.clone(),
        cold_start_k: k1,
        final_k: k,
        heads_removed_per_layer: heads_removed,
        params_before,
        params_after,
        achieved_ratio: 1.0 - params_after as f64 / params_before as f64,
        macs_before,
        macs_after: count_macs(&c, spec.mac_seq_len),
        head_scores: head_table,
        retained_heads,
        stage1,
        stage2,
        retained,
    };
    Ok(PruneOutcome {
        weights: w,
        config: c,
        report,
    })
}
