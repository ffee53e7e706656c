//! One function per subcommand. Each writes its artifacts, the effective
//! config and a manifest into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use sdmprune_core::data::{chunk_sequences, sample_windows, split_train_eval};
use sdmprune_core::error::{Error, Result};
use sdmprune_core::evaluator::{
    grid_cells, perplexity, run_experiment_grid, CalibrationSettings, EvalReport, ExperimentContext,
};
use sdmprune_core::importance::{oracle_scores, spearman, taylor_scores, CriterionKind, LossKind};
use sdmprune_core::model::{load_checkpoint, save_checkpoint, ModelConfig, TransformerWeights};
use sdmprune_core::pruner::{run_sdmprune, Scope};
use sdmprune_core::trainer::{finetune, write_loss_curve};

use crate::config::RunConfig;

/// Inputs and outputs of one command, with content hashes.
#[derive(Debug, Default)]
pub struct Manifest {
    command: String,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            ..Self::default()
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let hash = sha256_file(&dir.join(name))?;
        self.outputs.push((name.into(), hash));
        Ok(())
    }

    /// Records every file in `dir` that is not yet listed, in name order.
    fn outputs_in(&mut self, dir: &Path) -> Result<()> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n != "manifest.txt" && !self.outputs.iter().any(|(o, _)| o == n))
            .collect();
        names.sort();
        for n in names {
            self.output(dir, &n)?;
        }
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut s = format!("command {}\n", self.command);
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "input {h} {}", p.display());
        }
        for (n, h) in &self.outputs {
            let _ = writeln!(s, "output {h} {n}");
        }
        write_text(&dir.join("manifest.txt"), &s)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("effective_config.toml"), &cfg.to_toml())
}

fn finish(mut manifest: Manifest, out: &Path) -> Result<Manifest> {
    manifest.outputs_in(out)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Training and evaluation token streams from the configured corpus.
fn corpus(cfg: &RunConfig) -> Result<(Vec<u32>, Vec<u32>)> {
    let tokens = cfg.corpus_source()?.load()?;
    let (train, eval) = split_train_eval(&tokens, cfg.corpus.eval_fraction);
    Ok((train.to_vec(), eval.to_vec()))
}

fn calibration_batches(cfg: &RunConfig, train: &[u32]) -> Result<Vec<Vec<Vec<u32>>>> {
    let c = &cfg.calibration;
    Ok(sample_windows(train, c.num_sequences, c.seq_len, c.batch_size, cfg.run.seed)?
        .into_iter()
        .map(|b| b.tokens)
        .collect())
}

fn evaluate(cfg: &RunConfig, w: &TransformerWeights, c: &ModelConfig, eval: &[u32]) -> Result<EvalReport> {
    let stride = (cfg.eval.stride > 0).then_some(cfg.eval.stride);
    perplexity(w, c, eval, cfg.eval.seg_len, stride)
}

fn load_model(path: &Path, manifest: &mut Manifest) -> Result<(TransformerWeights, ModelConfig)> {
    let model = load_checkpoint(path)?;
    manifest.input(path)?;
    Ok(model)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    prepare_out(out, cfg)?;
    let (train, eval) = corpus(cfg)?;
    let config = cfg.model_config();
    let init = TransformerWeights::init(&config, cfg.run.seed)?;
    let tc = cfg.pretrain_config(cfg.run.seed)?;
    let (weights, curve) = finetune(&init, &config, &chunk_sequences(&train, tc.seq_len), &tc)?;
    save_checkpoint(&weights, &config, &out.join("base.ckpt"))?;
    write_loss_curve(&out.join("pretrain_loss.csv"), &curve)?;
    let report = evaluate(cfg, &weights, &config, &eval)?;
    let summary = format!(
        "steps: {}\nfinal_train_loss: {}\neval_ppl: {}\neval_mean_nll: {}\nparams: {}\n",
        curve.len(),
        curve.last().map_or(f64::NAN, |r| r.loss),
        report.ppl,
        report.mean_nll,
        report.params
    );
    write_text(&out.join("pretrain_summary.txt"), &summary)?;
    print!("{summary}");
    finish(Manifest::new("pretrain"), out)
}

pub fn cmd_prune(cfg: &RunConfig, base: &Path, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new("prune");
    let (weights, config) = load_model(base, &mut manifest)?;
    prepare_out(out, cfg)?;
    let (train, _) = corpus(cfg)?;
    let batches = calibration_batches(cfg, &train)?;
    let spec = cfg.prune_spec()?;
    let outcome = run_sdmprune(&weights, &config, &spec, &batches)?;
    save_checkpoint(&outcome.weights, &outcome.config, &out.join("pruned.ckpt"))?;
    outcome.report.write_csvs(out)?;
    let summary = outcome.report.summary(&outcome.config);
    write_text(&out.join("prune_summary.txt"), &summary)?;
    print!("{summary}");
    finish(manifest, out)
}

pub fn cmd_finetune(cfg: &RunConfig, model: &Path, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new("finetune");
    let (weights, config) = load_model(model, &mut manifest)?;
    prepare_out(out, cfg)?;
    let (train, eval) = corpus(cfg)?;
    let tc = cfg.finetune_config(cfg.run.seed)?;
    let (tuned, curve) = finetune(&weights, &config, &chunk_sequences(&train, tc.seq_len), &tc)?;
    save_checkpoint(&tuned, &config, &out.join("finetuned.ckpt"))?;
    write_loss_curve(&out.join("finetune_loss.csv"), &curve)?;
    let before = evaluate(cfg, &weights, &config, &eval)?;
    let after = evaluate(cfg, &tuned, &config, &eval)?;
    let summary = format!(
        "steps: {}\nppl_before: {}\nppl_after: {}\n",
        curve.len(),
        before.ppl,
        after.ppl
    );
    write_text(&out.join("finetune_summary.txt"), &summary)?;
    print!("{summary}");
    finish(manifest, out)
}

pub fn cmd_eval(cfg: &RunConfig, models: &[PathBuf], out: &Path) -> Result<Manifest> {
    if models.is_empty() {
        return Err(Error::Input("eval needs at least one --model".into()));
    }
    let mut manifest = Manifest::new("eval");
    let loaded = models
        .iter()
        .map(|p| load_model(p, &mut manifest))
        .collect::<Result<Vec<_>>>()?;
    prepare_out(out, cfg)?;
    let (_, eval) = corpus(cfg)?;
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record(["model", "params", "macs", "ppl", "mean_nll", "segments", "seg_len"])
        .map_err(Error::from)?;
    println!("{:<40} {:>12} {:>14} {:>12}", "model", "params", "macs", "ppl");
    for (p, (weights, config)) in models.iter().zip(&loaded) {
        let r = evaluate(cfg, weights, config, &eval)?;
        let name = p.display().to_string();
        println!("{name:<40} {:>12} {:>14} {:>12.4}", r.params, r.macs, r.ppl);
        w.write_record([
            name,
            r.params.to_string(),
            r.macs.to_string(),
            r.ppl.to_string(),
            r.mean_nll.to_string(),
            r.segments.to_string(),
            r.seg_len.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    finish(manifest, out)
}

pub fn cmd_oracle(cfg: &RunConfig, base: &Path, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new("oracle");
    let (weights, config) = load_model(base, &mut manifest)?;
    prepare_out(out, cfg)?;
    let (train, _) = corpus(cfg)?;
    let batches = calibration_batches(cfg, &train)?;
    let spec = cfg.prune_spec()?;
    let taylor = taylor_scores(&weights, &config, &batches, LossKind::Hard, None, spec.aggregation)?;
    let oracle = oracle_scores(&weights, &config, &batches, LossKind::Hard, None)?;
    taylor.write_csv(&out.join("scores_taylor_hard.csv"))?;
    oracle.write_csv(&out.join("scores_oracle.csv"))?;
    let rho = spearman(&taylor.flatten(), &oracle.flatten())?;
    let mut report = format!(
        "neurons: {}\ncalibration_batches: {}\naggregation: {}\nspearman_all: {rho}\n",
        taylor.num_neurons(),
        batches.len(),
        spec.aggregation.as_str()
    );
    for (l, (t, o)) in taylor.layers.iter().zip(&oracle.layers).enumerate() {
        if t.len() >= 2 {
            let _ = writeln!(report, "spearman_layer_{l}: {}", spearman(t, o)?);
        }
    }
    write_text(&out.join("oracle_report.txt"), &report)?;
    print!("{report}");
    finish(manifest, out)
}

pub fn cmd_grid(cfg: &RunConfig, base: &Path, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new("grid");
    let (weights, config) = load_model(base, &mut manifest)?;
    prepare_out(out, cfg)?;
    let (train, eval) = corpus(cfg)?;
    let g = &cfg.grid;
    let criteria = g
        .criteria
        .iter()
        .map(|s| CriterionKind::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let scopes = g.scopes.iter().map(|s| Scope::parse(s)).collect::<Result<Vec<_>>>()?;
    let cells = grid_cells(&g.ratios, &g.alphas, &g.temperatures, &criteria, &scopes, &g.seeds);
    let ctx = ExperimentContext {
        base: &weights,
        config: &config,
        train_tokens: &train,
        eval_tokens: &eval,
        calibration: CalibrationSettings {
            num_sequences: cfg.calibration.num_sequences,
            seq_len: cfg.calibration.seq_len,
            batch_size: cfg.calibration.batch_size,
        },
        prune: cfg.prune_spec()?,
        finetune: cfg.finetune_config(cfg.run.seed)?,
        eval_seg_len: cfg.eval.seg_len,
    };
    let rows = run_experiment_grid(&ctx, &cells, &out.join("grid.csv"))?;
    println!(
        "{:>6} {:>6} {:>6} {:>16} {:>18} {:>5} {:>10} {:>10}",
        "ratio", "alpha", "T", "criterion", "scope", "seed", "ppl_prune", "ppl_ft"
    );
    for r in &rows {
        let c = &r.cell;
        println!(
            "{:>6} {:>6} {:>6} {:>16} {:>18} {:>5} {:>10.4} {:>10.4}",
            c.ratio,
            c.alpha,
            c.temperature,
            c.criterion.as_str(),
            c.scope.as_str(),
            c.seed,
            r.ppl_pruned,
            r.ppl_finetuned
        );
    }
    finish(manifest, out)
}
