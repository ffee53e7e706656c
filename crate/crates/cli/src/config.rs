//! Run configuration: a sectioned TOML file whose every field has an
//! explicit default. Unknown sections and keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdmprune_core::data::{CorpusSource, Generator};
use sdmprune_core::error::{Error, Result};
use sdmprune_core::importance::{Aggregation, CriterionKind};
use sdmprune_core::losses::{DistillConfig, SoftLossForm};
use sdmprune_core::model::ModelConfig;
use sdmprune_core::pruner::{PruneSpec, Scope};
use sdmprune_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub prune: PruneSection,
    pub calibration: CalibrationSection,
    pub finetune: TrainSection,
    pub eval: EvalSection,
    pub grid: GridSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Drives model init, batch order and calibration sampling.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// `markov_1`..`markov_3` or `repeated_template`.
    pub generator: String,
    pub size: usize,
    pub seed: u64,
    /// A text file to read instead of generating; empty means generate.
    pub path: String,
    /// Tail fraction of the token stream held out for evaluation.
    pub eval_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_steps: usize,
    pub grad_accum: usize,
    /// 0 means no cap.
    pub max_steps: usize,
    /// 0 means train for the full budget.
    pub target_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub target_ratio: f64,
    pub cold_start_fraction: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub t2_scaling: bool,
    /// `standard` or `literal`.
    pub soft_form: String,
    /// `mlp_only` or `mlp_and_attention`.
    pub scope: String,
    pub criterion: String,
    /// `abs_then_mean` or `mean_then_abs`.
    pub aggregation: String,
    pub mac_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seg_len: usize,
    /// 0 means non-overlapping segments.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub ratios: Vec<f64>,
    pub alphas: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub criteria: Vec<String>,
    pub scopes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            pretrain: TrainSection {
                lr: 1e-2,
                epochs: 20,
                warmup_steps: 20,
                ..TrainSection::default()
            },
            prune: PruneSection::default(),
            calibration: CalibrationSection::default(),
            finetune: TrainSection {
                lr: 1e-3,
                epochs: 1,
                ..TrainSection::default()
            },
            eval: EvalSection::default(),
            grid: GridSection::default(),
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            generator: "markov_2".into(),
            size: 40_000,
            seed: 7,
            path: String::new(),
            eval_fraction: 0.1,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::tiny();
        Self {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            d_ff: c.layers[0].d_ff,
            max_seq_len: c.max_seq_len,
            rope_base: c.rope_base,
            norm_eps: c.norm_eps,
            tie_embeddings: c.tie_embeddings,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: 16,
            seq_len: 64,
            warmup_steps: t.warmup_steps,
            grad_accum: t.grad_accum,
            max_steps: t.max_steps,
            target_loss: t.target_loss,
        }
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        let p = PruneSpec::default();
        Self {
            target_ratio: 0.3,
            cold_start_fraction: p.cold_start_fraction,
            alpha: p.distill.alpha,
            temperature: p.distill.temperature,
            t2_scaling: p.distill.t2_scaling,
            soft_form: p.distill.soft_form.as_str().into(),
            scope: p.scope.as_str().into(),
            criterion: p.criterion.as_str().into(),
            aggregation: p.aggregation.as_str().into(),
            mac_seq_len: p.mac_seq_len,
        }
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            num_sequences: 256,
            seq_len: 128,
            batch_size: 16,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seg_len: 128, stride: 0 }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.3],
            alphas: vec![0.0, 0.5],
            temperatures: vec![0.25],
            criteria: vec!["taylor_distill".into()],
            scopes: vec!["mlp_only".into()],
            seeds: vec![0, 1, 2],
        }
    }
}

fn parse_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{origin}: {e}"))
}

/// Turns `value` text from a `--set` flag into a TOML value: anything that
/// parses as TOML (numbers, booleans, arrays, quoted strings) is used as
/// is, everything else becomes a bare string.
fn override_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

impl RunConfig {
    /// Parses `text`, then applies `section.key=value` overrides.
    pub fn from_toml(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        // Parsing the text directly keeps line numbers in error messages.
        let direct: RunConfig = toml::from_str(text).map_err(|e| parse_error(origin, e))?;
        if overrides.is_empty() {
            direct.validate()?;
            return Ok(direct);
        }
        let mut table: toml::Table = text.parse().map_err(|e| parse_error(origin, e))?;
        for item in overrides {
            let (path, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override `{item}` does not name section.key")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = entry else {
                return Err(Error::Config(format!("`{section}` is not a section")));
            };
            sec.insert(key.to_string(), override_value(value.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e| parse_error("overrides", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `None` gives the defaults. Overrides apply either way.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, &p.display().to_string(), overrides)
            }
            None => Self::from_toml("", "defaults", overrides),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field that has a restricted domain.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.corpus_source()?;
        self.pretrain_config(0)?;
        self.finetune_config(0)?;
        self.prune_spec()?.validate()?;
        if !(0.0..1.0).contains(&self.corpus.eval_fraction) {
            return Err(Error::Config(format!(
                "eval_fraction {} outside [0, 1)",
                self.corpus.eval_fraction
            )));
        }
        let c = &self.calibration;
        if c.num_sequences == 0 || c.seq_len < 2 || c.batch_size == 0 {
            return Err(Error::Config(
                "calibration needs num_sequences ≥ 1, seq_len ≥ 2, batch_size ≥ 1".into(),
            ));
        }
        if self.eval.seg_len < 2 {
            return Err(Error::Config("eval seg_len must be at least 2".into()));
        }
        for s in &self.grid.criteria {
            CriterionKind::parse(s)?;
        }
        for s in &self.grid.scopes {
            Scope::parse(s)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::uniform(
            m.vocab_size,
            m.d_model,
            m.n_layers,
            m.n_heads,
            m.n_kv_heads,
            m.d_ff,
            m.max_seq_len,
            m.tie_embeddings,
        );
        c.rope_base = m.rope_base;
        c.norm_eps = m.norm_eps;
        c
    }

    pub fn corpus_source(&self) -> Result<CorpusSource> {
        if self.corpus.path.is_empty() {
            Ok(CorpusSource::Synthetic {
                generator: Generator::parse(&self.corpus.generator)?,
                size: self.corpus.size,
                seed: self.corpus.seed,
            })
        } else {
            Ok(CorpusSource::TextFile(PathBuf::from(&self.corpus.path)))
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> Result<TrainConfig> {
        train_config(&self.pretrain, seed)
    }

    pub fn finetune_config(&self, seed: u64) -> Result<TrainConfig> {
        train_config(&self.finetune, seed)
    }

    pub fn prune_spec(&self) -> Result<PruneSpec> {
        let p = &self.prune;
        let spec = PruneSpec {
            target_ratio: p.target_ratio,
            cold_start_fraction: p.cold_start_fraction,
            distill: DistillConfig {
                alpha: p.alpha,
                temperature: p.temperature,
                t2_scaling: p.t2_scaling,
                soft_form: SoftLossForm::parse(&p.soft_form)?,
            },
            scope: Scope::parse(&p.scope)?,
            criterion: CriterionKind::parse(&p.criterion)?,
            aggregation: Aggregation::parse(&p.aggregation)?,
            mac_seq_len: p.mac_seq_len,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn train_config(t: &TrainSection, seed: u64) -> Result<TrainConfig> {
    let c = TrainConfig {
        lr: t.lr,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.eps,
        weight_decay: t.weight_decay,
        epochs: t.epochs,
        batch_size: t.batch_size,
        seq_len: t.seq_len,
        warmup_steps: t.warmup_steps,
        grad_accum: t.grad_accum,
        seed,
        max_steps: t.max_steps,
        target_loss: t.target_loss,
    };
    c.validate()?;
    Ok(c)
}
