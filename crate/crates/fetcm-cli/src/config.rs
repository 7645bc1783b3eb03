//! Flat `key = value` run configuration shared by every subcommand. Parsing
//! is strict: unknown or repeated keys abort before any compute, so a typo
//! cannot silently fall back to a default.

use std::path::PathBuf;

use fetcm_core::model::{Combination, ModelConfig, RecurrentCell};
use fetcm_core::train::TrainConfig;
use fetcm_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Canonical,
    Yandex,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Master seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub input_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub format: LogFormat,
    /// One raw log split into train/valid/test by `split_ratios`.
    pub data_path: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub split_ratios: (f64, f64, f64),
    pub min_freq: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub epoch_log_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub truth_path: Option<PathBuf>,
    pub baseline: bool,
    pub n_sessions: usize,
    pub queries_per_session: usize,
    pub docs_per_query: usize,
    pub n_query_ids: u64,
    pub n_url_ids: u64,
    pub pool_size: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub gamma: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            input_path: None,
            output_path: None,
            format: LogFormat::Canonical,
            data_path: None,
            train_path: None,
            valid_path: None,
            test_path: None,
            split_ratios: (0.8, 0.1, 0.1),
            min_freq: 1,
            checkpoint_path: None,
            epoch_log_path: None,
            report_path: None,
            truth_path: None,
            baseline: false,
            n_sessions: 1000,
            queries_per_session: 1,
            docs_per_query: 10,
            n_query_ids: 200,
            n_url_ids: 1000,
            pool_size: 10,
            alpha_lo: 0.1,
            alpha_hi: 0.9,
            gamma: (0..10).map(|r| 1.0 - 0.1 * r as f64).collect(),
        }
    }
}

/// Key names with one-line descriptions, rendered into `--help`.
pub const KEY_HELP: &[(&str, &str)] = &[
    ("seed", "master random seed; all streams derive from it (default 0)"),
    ("embedding_size", "width of id embeddings (default 64)"),
    ("hidden_size", "attention/recurrent width (default 64)"),
    ("heads", "attention heads (default 8)"),
    ("transformer_blocks", "encoder blocks in the attraction branch (default 1)"),
    ("filter_blocks_attr", "spectral filter blocks before the encoder (default 1)"),
    ("filter_blocks_exam", "spectral filter blocks before the recurrence (default 1)"),
    ("dropout", "dropout probability during training (default 0.5)"),
    ("combination", "mul | exp_mul | sigmoid_log | linear | nonlinear (default exp_mul)"),
    ("p_max", "largest result position (default 10)"),
    ("prob_clamp", "click probabilities are kept in [eps, 1-eps] (default 1e-6)"),
    ("enable_filter_attr", "toggle the attraction-branch filters (default true)"),
    ("enable_filter_exam", "toggle the examination-branch filters (default true)"),
    ("recurrent_cell", "examination recurrence; only `gru` is implemented"),
    ("max_session_docs", "longest whole-session document sequence (default 10)"),
    ("learning_rate", "Adam step size (default 0.001)"),
    ("batch_size", "sessions per optimizer step (default 64)"),
    ("weight_decay", "coupled L2 strength (default 1e-5)"),
    ("max_epochs", "epoch budget (default 50)"),
    ("patience", "epochs without validation improvement before stopping (default 5)"),
    ("beta1", "Adam first-moment decay (default 0.9)"),
    ("beta2", "Adam second-moment decay (default 0.999)"),
    ("adam_eps", "Adam denominator floor (default 1e-8)"),
    ("grad_clip_norm", "global gradient-norm ceiling (default 5.0)"),
    ("input_path", "log file read by `ingest`"),
    ("output_path", "file written by `ingest` and `synth`"),
    ("format", "input log format for `ingest`: canonical | yandex"),
    ("data_path", "single canonical log split by `split_ratios` for train/eval"),
    ("train_path", "explicit canonical training split"),
    ("valid_path", "explicit canonical validation split"),
    ("test_path", "explicit canonical test split"),
    ("split_ratios", "train,valid,test fractions for `data_path` (default 0.8,0.1,0.1)"),
    ("min_freq", "ids seen fewer times in training map to the unknown row (default 1)"),
    ("checkpoint_path", "model snapshot written by `train`, read by `eval`"),
    ("epoch_log_path", "per-epoch CSV written by `train` when set"),
    ("report_path", "per-rank CSV written by `eval` when set"),
    ("truth_path", "generator ground-truth sidecar: written by `synth`, read by `eval`"),
    ("baseline", "also report the per-rank click-rate reference during `eval`"),
    ("n_sessions", "sessions generated by `synth` (default 1000)"),
    ("queries_per_session", "queries per generated session (default 1)"),
    ("docs_per_query", "results per generated query (default 10)"),
    ("n_query_ids", "distinct query ids in the generator (default 200)"),
    ("n_url_ids", "distinct url ids in the generator (default 1000)"),
    ("pool_size", "candidate urls materialized per query id (default 10)"),
    ("alpha_lo", "lower bound of sampled attraction probabilities (default 0.1)"),
    ("alpha_hi", "upper bound of sampled attraction probabilities (default 0.9)"),
    ("gamma", "comma-separated examination probability per rank (default 1.0,0.9,...,0.1)"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{}` cannot parse `{}`", key, value)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{}` wants true or false, got `{}`",
            key, value
        ))),
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|p| parse_num::<f64>(key, p.trim())).collect()
}

impl RunConfig {
    /// Apply one `key = value` setting. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "embedding_size" => self.model.embedding_size = parse_num(key, value)?,
            "hidden_size" => self.model.hidden_size = parse_num(key, value)?,
            "heads" => self.model.heads = parse_num(key, value)?,
            "transformer_blocks" => self.model.transformer_blocks = parse_num(key, value)?,
            "filter_blocks_attr" => self.model.filter_blocks_attr = parse_num(key, value)?,
            "filter_blocks_exam" => self.model.filter_blocks_exam = parse_num(key, value)?,
            "dropout" => self.model.dropout = parse_num(key, value)?,
            "combination" => self.model.combination = value.parse::<Combination>()?,
            "p_max" => self.model.p_max = parse_num(key, value)?,
            "prob_clamp" => self.model.prob_clamp = parse_num(key, value)?,
            "enable_filter_attr" => self.model.enable_filter_attr = parse_bool(key, value)?,
            "enable_filter_exam" => self.model.enable_filter_exam = parse_bool(key, value)?,
            "recurrent_cell" => {
                self.model.recurrent_cell = match value {
                    "gru" => RecurrentCell::Gru,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown recurrent_cell `{}` (only gru is implemented)",
                            other
                        )))
                    }
                }
            }
            "max_session_docs" => self.model.max_session_docs = parse_num(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "max_epochs" => self.train.max_epochs = parse_num(key, value)?,
            "patience" => self.train.patience = parse_num(key, value)?,
            "beta1" => self.train.beta1 = parse_num(key, value)?,
            "beta2" => self.train.beta2 = parse_num(key, value)?,
            "adam_eps" => self.train.adam_eps = parse_num(key, value)?,
            "grad_clip_norm" => self.train.grad_clip_norm = parse_num(key, value)?,
            "input_path" => self.input_path = Some(PathBuf::from(value)),
            "output_path" => self.output_path = Some(PathBuf::from(value)),
            "format" => {
                self.format = match value {
                    "canonical" => LogFormat::Canonical,
                    "yandex" => LogFormat::Yandex,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown format `{}` (expected canonical or yandex)",
                            other
                        )))
                    }
                }
            }
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "valid_path" => self.valid_path = Some(PathBuf::from(value)),
            "test_path" => self.test_path = Some(PathBuf::from(value)),
            "split_ratios" => {
                let parts = parse_f64_list(key, value)?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "split_ratios wants three comma-separated fractions, got {}",
                        parts.len()
                    )));
                }
                self.split_ratios = (parts[0], parts[1], parts[2]);
            }
            "min_freq" => self.min_freq = parse_num(key, value)?,
            "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(value)),
            "epoch_log_path" => self.epoch_log_path = Some(PathBuf::from(value)),
            "report_path" => self.report_path = Some(PathBuf::from(value)),
            "truth_path" => self.truth_path = Some(PathBuf::from(value)),
            "baseline" => self.baseline = parse_bool(key, value)?,
            "n_sessions" => self.n_sessions = parse_num(key, value)?,
            "queries_per_session" => self.queries_per_session = parse_num(key, value)?,
            "docs_per_query" => self.docs_per_query = parse_num(key, value)?,
            "n_query_ids" => self.n_query_ids = parse_num(key, value)?,
            "n_url_ids" => self.n_url_ids = parse_num(key, value)?,
            "pool_size" => self.pool_size = parse_num(key, value)?,
            "alpha_lo" => self.alpha_lo = parse_num(key, value)?,
            "alpha_hi" => self.alpha_hi = parse_num(key, value)?,
            "gamma" => self.gamma = parse_f64_list(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{}`", other))),
        }
        Ok(())
    }

    /// Parse a whole config file body. Lines are `key = value`; blank lines
    /// and lines starting with `#` are skipped; keys may not repeat.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{}`", line),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "key `{}` appears twice (line {})",
                    key,
                    i + 1
                )));
            }
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// Propagate the master seed into the nested training configuration.
    pub fn finish(&mut self) {
        self.train.seed = self.seed;
    }
}
