//! The click model itself: a filtered transformer head estimating per-result
//! attraction, a filtered recurrent head estimating examination, and a
//! combination layer merging the two into a click probability.

mod forward;

pub use forward::{
    click_loss, combine_probs, forward_session, predict_session, ForwardOutput, Mode,
    SessionForward,
};
pub(crate) use forward::filter_block;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clicklog::Vocabulary;
use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::tensor::Tensor;

/// Click-context vocabulary: a document's context symbol encodes the click
/// of the document before it, with a start symbol when there is none.
pub const CLICK_NO_PREVIOUS: usize = 0;
pub const CLICK_VOCAB: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    Mul,
    ExpMul,
    SigmoidLog,
    Linear,
    Nonlinear,
}

impl FromStr for Combination {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(Combination::Mul),
            "exp_mul" => Ok(Combination::ExpMul),
            "sigmoid_log" => Ok(Combination::SigmoidLog),
            "linear" => Ok(Combination::Linear),
            "nonlinear" => Ok(Combination::Nonlinear),
            other => Err(Error::Config(format!(
                "unknown combination `{}` (expected mul, exp_mul, sigmoid_log, linear, nonlinear)",
                other
            ))),
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Combination::Mul => "mul",
            Combination::ExpMul => "exp_mul",
            Combination::SigmoidLog => "sigmoid_log",
            Combination::Linear => "linear",
            Combination::Nonlinear => "nonlinear",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentCell {
    /// The only implemented cell; the enum is the extension point for other
    /// recurrent examination variants.
    Gru,
}

impl FromStr for RecurrentCell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(RecurrentCell::Gru),
            other => Err(Error::Config(format!(
                "unknown recurrent cell `{}` (only gru is implemented)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub transformer_blocks: usize,
    pub filter_blocks_attr: usize,
    pub filter_blocks_exam: usize,
    pub dropout: f64,
    pub combination: Combination,
    pub p_max: usize,
    pub prob_clamp: f64,
    pub enable_filter_attr: bool,
    pub enable_filter_exam: bool,
    pub recurrent_cell: RecurrentCell,
    /// Longest whole-session document sequence the examination filter is
    /// sized for; shorter sessions use the leading frequency rows.
    pub max_session_docs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_size: 64,
            hidden_size: 64,
            heads: 8,
            transformer_blocks: 1,
            filter_blocks_attr: 1,
            filter_blocks_exam: 1,
            dropout: 0.5,
            combination: Combination::ExpMul,
            p_max: 10,
            prob_clamp: 1e-6,
            enable_filter_attr: true,
            enable_filter_exam: true,
            recurrent_cell: RecurrentCell::Gru,
            max_session_docs: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_size == 0 || self.hidden_size == 0 || self.heads == 0 {
            return Err(Error::Config(
                "embedding_size, hidden_size and heads must be positive".into(),
            ));
        }
        if self.hidden_size % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by heads {}",
                self.hidden_size, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config(format!(
                "prob_clamp {} must lie in (0, 0.5)",
                self.prob_clamp
            )));
        }
        if self.p_max == 0 || self.max_session_docs == 0 {
            return Err(Error::Config(
                "p_max and max_session_docs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-head key dimension.
    pub fn d_k(&self) -> usize {
        self.hidden_size / self.heads
    }

    /// Feed-forward inner width.
    pub fn d_ff(&self) -> usize {
        4 * self.hidden_size
    }

    /// Examination-branch input width (position and click-context embeddings
    /// concatenated).
    pub fn exam_input(&self) -> usize {
        2 * self.embedding_size
    }

    fn spectrum_bins(n: usize) -> usize {
        n / 2 + 1
    }

    pub fn attr_filter_bins(&self) -> usize {
        Self::spectrum_bins(4)
    }

    pub fn exam_filter_bins(&self) -> usize {
        Self::spectrum_bins(self.max_session_docs)
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    tensor: Arc<Tensor>,
    /// Leading data elements excluded from optimizer updates (padding rows).
    frozen: usize,
}

/// Every trainable array of the model, in a fixed named order. Tensors are
/// reference-counted so session graphs can borrow the large embedding tables
/// without copying them.
#[derive(Debug)]
pub struct Parameters {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl Parameters {
    /// Allocate and initialize all parameters. Every array is always
    /// allocated, including filter weights under disabled toggles and the
    /// parameters of unselected combiners, so the initialization stream and
    /// the checkpoint layout do not depend on which variant is being run.
    pub fn init(config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Parameters> {
        config.validate()?;
        let l = config.embedding_size;
        let hidden = config.hidden_size;
        let d_k = config.d_k();
        let d_ff = config.d_ff();
        let exam_in = config.exam_input();
        let mut rng = stream_rng(seed, "init");
        let noise = Normal::new(0.0, 0.02)
            .map_err(|e| Error::Config(format!("filter noise distribution: {}", e)))?;

        let mut p = Parameters { entries: Vec::new(), by_name: HashMap::new() };

        let embedding = |p: &mut Parameters, rng: &mut rand_chacha::ChaCha8Rng, name: &str, rows: usize| {
            let mut data = vec![0.0; rows * l];
            // row 0 (padding / start symbol) stays exactly zero and frozen
            for v in data.iter_mut().skip(l) {
                *v = rng.random_range(-0.1..0.1);
            }
            p.push(name.to_string(), Tensor::new(vec![rows, l], data).unwrap(), l);
        };
        embedding(&mut p, &mut rng, "emb.query", vocab.query_count());
        embedding(&mut p, &mut rng, "emb.url", vocab.url_count());
        embedding(&mut p, &mut rng, "emb.click", CLICK_VOCAB);
        embedding(&mut p, &mut rng, "emb.pos", config.p_max + 1);

        let filter = |p: &mut Parameters, rng: &mut rand_chacha::ChaCha8Rng, name: String, bins: usize, dims: usize| {
            let plane = bins * dims;
            let mut data = vec![0.0; 2 * plane];
            for i in 0..plane {
                data[i] = 1.0 + noise.sample(rng);
                data[plane + i] = noise.sample(rng);
            }
            p.push(format!("{}.w", name), Tensor::new(vec![2, bins, dims], data).unwrap(), 0);
            p.push(format!("{}.ln.gamma", name), Tensor::filled(vec![dims], 1.0), 0);
            p.push(format!("{}.ln.beta", name), Tensor::zeros(vec![dims]), 0);
        };
        for b in 0..config.filter_blocks_attr {
            filter(&mut p, &mut rng, format!("attr.filter{}", b), config.attr_filter_bins(), l);
        }
        for b in 0..config.filter_blocks_exam {
            filter(&mut p, &mut rng, format!("exam.filter{}", b), config.exam_filter_bins(), exam_in);
        }

        let xavier = |p: &mut Parameters, rng: &mut rand_chacha::ChaCha8Rng, name: String, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            p.push(name, Tensor::new(vec![rows, cols], data).unwrap(), 0);
        };
        let zeros = |p: &mut Parameters, name: String, n: usize| {
            p.push(name, Tensor::zeros(vec![n]), 0);
        };

        for t in 0..config.transformer_blocks {
            for i in 0..config.heads {
                xavier(&mut p, &mut rng, format!("attr.tf{}.head{}.wq", t, i), l, d_k);
                xavier(&mut p, &mut rng, format!("attr.tf{}.head{}.wk", t, i), l, d_k);
                xavier(&mut p, &mut rng, format!("attr.tf{}.head{}.wv", t, i), l, d_k);
            }
            xavier(&mut p, &mut rng, format!("attr.tf{}.wo", t), hidden, l);
            p.push(format!("attr.tf{}.ln1.gamma", t), Tensor::filled(vec![l], 1.0), 0);
            zeros(&mut p, format!("attr.tf{}.ln1.beta", t), l);
            xavier(&mut p, &mut rng, format!("attr.tf{}.ffn.w1", t), l, d_ff);
            zeros(&mut p, format!("attr.tf{}.ffn.b1", t), d_ff);
            xavier(&mut p, &mut rng, format!("attr.tf{}.ffn.w2", t), d_ff, l);
            zeros(&mut p, format!("attr.tf{}.ffn.b2", t), l);
            p.push(format!("attr.tf{}.ln2.gamma", t), Tensor::filled(vec![l], 1.0), 0);
            zeros(&mut p, format!("attr.tf{}.ln2.beta", t), l);
        }

        xavier(&mut p, &mut rng, "exam.gru.wz".into(), exam_in, hidden);
        xavier(&mut p, &mut rng, "exam.gru.uz".into(), hidden, hidden);
        zeros(&mut p, "exam.gru.bz".into(), hidden);
        xavier(&mut p, &mut rng, "exam.gru.wr".into(), exam_in, hidden);
        xavier(&mut p, &mut rng, "exam.gru.ur".into(), hidden, hidden);
        zeros(&mut p, "exam.gru.br".into(), hidden);
        xavier(&mut p, &mut rng, "exam.gru.wh".into(), exam_in, hidden);
        xavier(&mut p, &mut rng, "exam.gru.uh".into(), hidden, hidden);
        zeros(&mut p, "exam.gru.bh".into(), hidden);
        zeros(&mut p, "exam.gru.h0".into(), hidden);

        xavier(&mut p, &mut rng, "attr.head.w".into(), 4 * l, 1);
        zeros(&mut p, "attr.head.b".into(), 1);
        xavier(&mut p, &mut rng, "exam.head.w".into(), hidden, 1);
        zeros(&mut p, "exam.head.b".into(), 1);

        p.push("comb.lambda".into(), Tensor::filled(vec![1], 1.0), 0);
        p.push("comb.mu".into(), Tensor::filled(vec![1], 1.0), 0);
        p.push("comb.alpha".into(), Tensor::filled(vec![1], 0.5), 0);
        p.push("comb.beta".into(), Tensor::filled(vec![1], 0.5), 0);
        xavier(&mut p, &mut rng, "comb.mlp.w1".into(), 2, 16);
        zeros(&mut p, "comb.mlp.b1".into(), 16);
        xavier(&mut p, &mut rng, "comb.mlp.w2".into(), 16, 1);
        zeros(&mut p, "comb.mlp.b2".into(), 1);

        Ok(p)
    }

    fn push(&mut self, name: String, tensor: Tensor, frozen: usize) {
        debug_assert!(!self.by_name.contains_key(&name), "duplicate parameter {}", name);
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor: Arc::new(tensor.with_grad()),
            frozen,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn tensor(&self, i: usize) -> &Arc<Tensor> {
        &self.entries[i].tensor
    }

    /// Number of leading data elements pinned at their initial value.
    pub fn frozen_len(&self, i: usize) -> usize {
        self.entries[i].frozen
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {}", name)))
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        Ok(self.tensor(self.index_of(name)?))
    }

    /// Overwrite one parameter's data in place. Fails while any session graph
    /// still holds a reference, which would make the update visible mid-pass.
    pub fn update(&mut self, i: usize, f: impl FnOnce(&mut [f64])) -> Result<()> {
        let entry = &mut self.entries[i];
        let t = Arc::get_mut(&mut entry.tensor).ok_or_else(|| {
            Error::Contract(format!(
                "parameter {} is still borrowed by a live graph",
                entry.name
            ))
        })?;
        f(t.data_mut());
        if !t.is_finite() {
            return Err(Error::Numeric(format!(
                "parameter {} became non-finite",
                entry.name
            )));
        }
        Ok(())
    }

    /// Replace one parameter's data wholesale (checkpoint restore).
    pub fn restore(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let i = self.index_of(name).map_err(|_| {
            Error::Load(format!("checkpoint names unknown parameter {}", name))
        })?;
        let entry = &mut self.entries[i];
        if data.len() != entry.tensor.numel() {
            return Err(Error::Load(format!(
                "parameter {} wants {} values, checkpoint has {}",
                name,
                entry.tensor.numel(),
                data.len()
            )));
        }
        let t = Arc::get_mut(&mut entry.tensor).ok_or_else(|| {
            Error::Contract(format!("parameter {} is still borrowed by a live graph", name))
        })?;
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}
