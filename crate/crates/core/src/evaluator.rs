//! Segment perplexity and the prune → finetune → evaluate experiment grid.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::Path;

use crate::data::{chunk_sequences, sample_windows};
use crate::error::{Error, Result};
use crate::importance::CriterionKind;
use crate::losses::hard_loss_value;
use crate::model::{count_macs, count_params, forward, ModelConfig, TransformerWeights};
use crate::pruner::{run_sdmprune, PruneSpec, Scope};
use crate::trainer::{finetune, TrainConfig};

/// Sequences evaluated per forward pass.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub segments: usize,
    pub seg_len: usize,
    /// Positions with a next-token label: `seg_len − 1` per segment.
    pub scored_tokens: usize,
    pub params: u64,
    /// MACs for one forward pass over one segment.
    pub macs: u64,
}

/// Start offsets of every full window of `seg_len` tokens, `stride` apart.
pub fn segment_starts(len: usize, seg_len: usize, stride: usize) -> Vec<usize> {
    if seg_len == 0 || stride == 0 || len < seg_len {
        return Vec::new();
    }
    (0..=len - seg_len).step_by(stride).collect()
}

/// `exp` of the mean next-token NLL over full segments of `tokens`. Within a
/// segment, every token after the first is scored. `stride` defaults to
/// `seg_len` (non-overlapping segments).
pub fn perplexity(
    weights: &TransformerWeights,
    config: &ModelConfig,
    tokens: &[u32],
    seg_len: usize,
    stride: Option<usize>,
) -> Result<EvalReport> {
    if seg_len < 2 {
        return Err(Error::Input(format!("segment length {seg_len} must be at least 2")));
    }
    let starts = segment_starts(tokens.len(), seg_len, stride.unwrap_or(seg_len));
    if starts.is_empty() {
        return Err(Error::Input(format!(
            "{} tokens do not fill one segment of {seg_len}",
            tokens.len()
        )));
    }
    let mut total = 0.0;
    for chunk in starts.chunks(EVAL_BATCH) {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|&s| tokens[s..s + seg_len].to_vec()).collect();
        let logits = forward(weights, config, &batch)?;
        total += hard_loss_value(&logits, &batch)? * (batch.len() * (seg_len - 1)) as f64;
    }
    let scored = starts.len() * (seg_len - 1);
    let mean_nll = total / scored as f64;
    Ok(EvalReport {
        ppl: mean_nll.exp(),
        mean_nll,
        segments: starts.len(),
        seg_len,
        scored_tokens: scored,
        params: count_params(config),
        macs: count_macs(config, seg_len),
    })
}

/// Calibration sampling parameters; the source is the training stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSettings {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub batch_size: usize,
}

/// Everything a grid cell needs besides its own varying fields.
#[derive(Debug, Clone)]
pub struct ExperimentContext<'a> {
    pub base: &'a TransformerWeights,
    pub config: &'a ModelConfig,
    pub train_tokens: &'a [u32],
    pub eval_tokens: &'a [u32],
    pub calibration: CalibrationSettings,
    /// Template; ratio, α, T, criterion and scope are set per cell.
    pub prune: PruneSpec,
    /// Template; the seed is set per cell.
    pub finetune: TrainConfig,
    pub eval_seg_len: usize,
}

/// The fields a grid varies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub ratio: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub criterion: CriterionKind,
    pub scope: Scope,
    pub seed: u64,
}

impl GridCell {
    fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.ratio,
            self.alpha,
            self.temperature,
            self.criterion.as_str(),
            self.scope.as_str(),
            self.seed
        )
    }
}

/// Cartesian product of the axes, in axis order with `seed` varying fastest.
pub fn grid_cells(
    ratios: &[f64],
    alphas: &[f64],
    temperatures: &[f64],
    criteria: &[CriterionKind],
    scopes: &[Scope],
    seeds: &[u64],
) -> Vec<GridCell> {
    let mut out = Vec::new();
    for &ratio in ratios {
        for &alpha in alphas {
            for &temperature in temperatures {
                for &criterion in criteria {
                    for &scope in scopes {
                        for &seed in seeds {
                            out.push(GridCell {
                                ratio,
                                alpha,
                                temperature,
                                criterion,
                                scope,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    pub cold_start_fraction: f64,
    pub calib_sequences: usize,
    pub calib_seq_len: usize,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub achieved_ratio: f64,
    pub params: u64,
    pub macs: u64,
    pub ppl_pruned: f64,
    pub ppl_finetuned: f64,
    pub final_train_loss: f64,
}

const GRID_HEADER: [&str; 18] = [
    "ratio",
    "alpha",
    "temperature",
    "criterion",
    "scope",
    "seed",
    "cold_start_fraction",
    "calib_sequences",
    "calib_seq_len",
    "ft_epochs",
    "ft_lr",
    "achieved_ratio",
    "params",
    "macs",
    "ppl_pruned",
    "ppl_finetuned",
    "final_train_loss",
    "eval_seg_len",
];

impl GridRow {
    fn record(&self, eval_seg_len: usize) -> Vec<String> {
        let c = &self.cell;
        vec![
            c.ratio.to_string(),
            c.alpha.to_string(),
            c.temperature.to_string(),
            c.criterion.as_str().to_string(),
            c.scope.as_str().to_string(),
            c.seed.to_string(),
            self.cold_start_fraction.to_string(),
            self.calib_sequences.to_string(),
            self.calib_seq_len.to_string(),
            self.ft_epochs.to_string(),
            self.ft_lr.to_string(),
            self.achieved_ratio.to_string(),
            self.params.to_string(),
            self.macs.to_string(),
            self.ppl_pruned.to_string(),
            self.ppl_finetuned.to_string(),
            self.final_train_loss.to_string(),
            eval_seg_len.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Input(format!("grid CSV column `{}` is malformed", GRID_HEADER[i])))
        }
        Ok(GridRow {
            cell: GridCell {
                ratio: field(rec, 0)?,
                alpha: field(rec, 1)?,
                temperature: field(rec, 2)?,
                criterion: CriterionKind::parse(rec.get(3).unwrap_or(""))?,
                scope: Scope::parse(rec.get(4).unwrap_or(""))?,
                seed: field(rec, 5)?,
            },
            cold_start_fraction: field(rec, 6)?,
            calib_sequences: field(rec, 7)?,
            calib_seq_len: field(rec, 8)?,
            ft_epochs: field(rec, 9)?,
            ft_lr: field(rec, 10)?,
            achieved_ratio: field(rec, 11)?,
            params: field(rec, 12)?,
            macs: field(rec, 13)?,
            ppl_pruned: field(rec, 14)?,
            ppl_finetuned: field(rec, 15)?,
            final_train_loss: field(rec, 16)?,
        })
    }
}

/// Prunes, finetunes and evaluates one cell.
pub fn run_cell(ctx: &ExperimentContext<'_>, cell: &GridCell) -> Result<GridRow> {
    let mut spec = ctx.prune.clone();
    spec.target_ratio = cell.ratio;
    spec.distill.alpha = cell.alpha;
    spec.distill.temperature = cell.temperature;
    spec.criterion = cell.criterion;
    spec.scope = cell.scope;
    let cal = ctx.calibration;
    let batches: Vec<Vec<Vec<u32>>> =
        sample_windows(ctx.train_tokens, cal.num_sequences, cal.seq_len, cal.batch_size, cell.seed)?
            .into_iter()
            .map(|b| b.tokens)
            .collect();
    let pruned = run_sdmprune(ctx.base, ctx.config, &spec, &batches)?;
    let before_ft = perplexity(&pruned.weights, &pruned.config, ctx.eval_tokens, ctx.eval_seg_len, None)?;
    let ft = TrainConfig {
        seed: cell.seed,
        ..ctx.finetune.clone()
    };
    let sequences = chunk_sequences(ctx.train_tokens, ft.seq_len);
    let (tuned, curve) = finetune(&pruned.weights, &pruned.config, &sequences, &ft)?;
    let after_ft = perplexity(&tuned, &pruned.config, ctx.eval_tokens, ctx.eval_seg_len, None)?;
    Ok(GridRow {
        cell: *cell,
        cold_start_fraction: spec.cold_start_fraction,
        calib_sequences: cal.num_sequences,
        calib_seq_len: cal.seq_len,
        ft_epochs: ft.epochs,
        ft_lr: ft.lr,
        achieved_ratio: pruned.report.achieved_ratio,
        params: after_ft.params,
        macs: after_ft.macs,
        ppl_pruned: before_ft.ppl,
        ppl_finetuned: after_ft.ppl,
        final_train_loss: curve.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Reads the rows already present in a grid CSV, if it exists.
pub fn read_grid_csv(path: &Path) -> Result<Vec<GridRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != GRID_HEADER {
        return Err(Error::Input(format!(
            "{} does not have the grid CSV header",
            path.display()
        )));
    }
    r.records().map(|rec| GridRow::parse(&rec?)).collect()
}

/// Runs every cell not already recorded in `csv_path`, appending one row per
/// finished cell so an interrupted grid resumes where it stopped. Returns
/// all rows in `cells` order.
pub fn run_experiment_grid(ctx: &ExperimentContext<'_>, cells: &[GridCell], csv_path: &Path) -> Result<Vec<GridRow>> {
    let existing = read_grid_csv(csv_path)?;
    let done: HashSet<String> = existing.iter().map(|r| r.cell.key()).collect();
    let fresh = existing.is_empty() && !csv_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv_path)
        .map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(GRID_HEADER)?;
        w.flush().map_err(|e| Error::io(csv_path, e))?;
    }
    let mut rows = existing;
    for cell in cells.iter().filter(|c| !done.contains(&c.key())) {
        let row = run_cell(ctx, cell)?;
        w.write_record(row.record(ctx.eval_seg_len))?;
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        rows.push(row);
    }
    let order: Vec<String> = cells.iter().map(GridCell::key).collect();
    rows.retain(|r| order.contains(&r.cell.key()));
    rows.sort_by_key(|r| order.iter().position(|k| *k == r.cell.key()));
    Ok(rows)
}
