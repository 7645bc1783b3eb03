//! Adam training with early stopping on validation log-likelihood.
//!
//! Batches are processed sequentially; the per-session forward/backward
//! passes inside a batch run in parallel against an immutable parameter
//! snapshot and are reduced in slot order, so the result is bit-identical
//! whatever the thread count. All parameter mutation happens on the calling
//! thread between batches.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedArray};

use rayon::prelude::*;

use crate::clicklog::{batch_iter, EncodedSession, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{log_likelihood, overall_ppl, ScoredDoc};
use crate::model::{forward_session, predict_session, Mode, ModelConfig, Parameters};
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a validation-LL improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            weight_decay: 1e-5,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must lie in [0, 1)", name)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter gradient arrays, aligned with a [`Parameters`] registry.
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros(params: &Parameters) -> GradientSet {
        GradientSet {
            grads: (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, c: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Run one session forward and backward; returns the loss value and the
/// gradient of the per-session mean loss for every parameter. Parameters a
/// given graph never touched contribute zero gradients.
pub fn session_gradients(
    params: &Parameters,
    config: &ModelConfig,
    session: &EncodedSession,
    mode: &mut Mode,
) -> Result<(f64, GradientSet)> {
    let mut fwd = forward_session(params, config, session, mode)?;
    fwd.graph.backward(fwd.loss)?;
    let loss = fwd.graph.value(fwd.loss).data()[0];
    let mut grads = GradientSet::zeros(params);
    for (i, g) in grads.grads.iter_mut().enumerate() {
        if let Some(src) = fwd.graph.grad(fwd.param_ids[i]) {
            g.copy_from_slice(src);
        }
    }
    Ok((loss, grads))
}

/// Adam first/second moments and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> OptimizerState {
        let zeros: Vec<Vec<f64>> =
            (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        OptimizerState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn from_arrays(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) -> OptimizerState {
        OptimizerState { m, v, t }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

/// One Adam step: frozen leading elements keep zero gradients, the global
/// gradient norm is clipped first, then coupled L2 weight decay joins the
/// gradient before the moment update. Returns whether clipping fired.
pub fn adam_update(
    params: &mut Parameters,
    grads: &mut GradientSet,
    state: &mut OptimizerState,
    tc: &TrainConfig,
) -> Result<bool> {
    for i in 0..params.len() {
        let g = &mut grads.grads[i];
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {}",
                params.name(i)
            )));
        }
        let frozen = params.frozen_len(i);
        for x in &mut g[..frozen] {
            *x = 0.0;
        }
    }

    let norm = grads.global_norm();
    let clipped = norm > tc.grad_clip_norm;
    if clipped {
        grads.scale(tc.grad_clip_norm / norm);
    }

    state.t += 1;
    let bc1 = 1.0 - tc.beta1.powi(state.t as i32);
    let bc2 = 1.0 - tc.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = &grads.grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let frozen = params.frozen_len(i);
        params.update(i, |data| {
            for j in frozen..data.len() {
                let gj = g[j] + tc.weight_decay * data[j];
                m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * gj;
                v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= tc.learning_rate * mh / (vh.sqrt() + tc.adam_eps);
            }
        })?;
    }
    Ok(clipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ll: f64,
    pub valid_ppl: f64,
    pub clip_events: u64,
}

/// Render epoch records as the CSV the train command writes.
pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,valid_ll,valid_ppl,clip_events\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.valid_ll, r.valid_ppl, r.clip_events
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the best validation log-likelihood.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Score every document of `sessions` in evaluation mode.
pub fn score_sessions(
    params: &Parameters,
    config: &ModelConfig,
    sessions: &[EncodedSession],
) -> Result<Vec<ScoredDoc>> {
    let per_session: Vec<Result<Vec<ScoredDoc>>> = sessions
        .par_iter()
        .map(|s| {
            let out = predict_session(params, config, s)?;
            Ok(out
                .click_prob
                .iter()
                .zip(&out.labels)
                .zip(&out.ranks)
                .map(|((&prob, &click), &rank)| ScoredDoc { prob, click, rank })
                .collect())
        })
        .collect();
    let mut docs = Vec::new();
    for r in per_session {
        docs.extend(r?);
    }
    Ok(docs)
}

/// Train until validation log-likelihood stops improving for `patience`
/// epochs or `max_epochs` is reached; the returned checkpoint holds the
/// best-validation-LL parameters, not the final ones.
pub fn train(
    params: Parameters,
    model: &ModelConfig,
    tc: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[EncodedSession],
    valid_set: &[EncodedSession],
) -> Result<TrainOutcome> {
    train_with_progress(params, model, tc, vocab, train_set, valid_set, |_| {})
}

/// [`train`] with a per-epoch callback, for callers that want to surface
/// progress while a long run is still going.
pub fn train_with_progress(
    params: Parameters,
    model: &ModelConfig,
    tc: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[EncodedSession],
    valid_set: &[EncodedSession],
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    tc.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and valid splits".into()));
    }

    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>, OptimizerState)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 1..=tc.max_epochs {
        let epoch_seed = derive_seed(tc.seed, &format!("epoch/{}", epoch));
        let mut clip_events = 0u64;
        let mut loss_weighted = 0.0;
        let mut docs_seen = 0usize;

        for (b, batch) in batch_iter(train_set, tc.batch_size, epoch_seed, true).enumerate() {
            let results: Vec<Result<(f64, GradientSet, usize)>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, s)| {
                    let mut rng = stream_rng(epoch_seed, &format!("dropout/b{}/s{}", b, slot));
                    let mut mode = Mode::Train { rng: &mut rng };
                    let (loss, grads) = session_gradients(&params, model, s, &mut mode)?;
                    Ok((loss, grads, s.doc_count()))
                })
                .collect();

            let mut batch_grads = GradientSet::zeros(&params);
            let mut batch_docs = 0usize;
            let mut batch_loss_sum = 0.0;
            let mut per_session = Vec::with_capacity(results.len());
            for r in results {
                let (loss, grads, n) = r?;
                batch_docs += n;
                batch_loss_sum += loss * n as f64;
                per_session.push((grads, n));
            }
            for (grads, n) in &per_session {
                batch_grads.add_scaled(grads, *n as f64 / batch_docs as f64);
            }
            let batch_loss = batch_loss_sum / batch_docs as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {} batch {}",
                    epoch, b
                )));
            }
            loss_weighted += batch_loss_sum;
            docs_seen += batch_docs;
            clip_events += adam_update(&mut params, &mut batch_grads, &mut state, tc)? as u64;
        }

        let scored = score_sessions(&params, model, valid_set)?;
        let valid_ll = log_likelihood(&scored, model.prob_clamp)?;
        let valid_ppl = overall_ppl(&scored, model.p_max, model.prob_clamp)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_weighted / docs_seen as f64,
            valid_ll,
            valid_ppl,
            clip_events,
        });
        observer(log.last().expect("just pushed"));

        let improved = match &best {
            None => true,
            Some((best_ll, ..)) => valid_ll > *best_ll,
        };
        if improved {
            let data: Vec<Vec<f64>> =
                (0..params.len()).map(|i| params.tensor(i).data().to_vec()).collect();
            best = Some((valid_ll, epoch, data, state.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= tc.patience {
                break;
            }
        }
    }

    let (best_ll, best_epoch, data, opt) = best.expect("at least one epoch ran");
    let named: Vec<NamedArray> = data
        .into_iter()
        .enumerate()
        .map(|(i, d)| NamedArray {
            name: params.name(i).to_string(),
            shape: params.tensor(i).shape().to_vec(),
            data: d,
        })
        .collect();
    let checkpoint = Checkpoint {
        model: model.clone(),
        vocab: vocab.clone(),
        epoch: best_epoch,
        best_valid_ll: best_ll,
        opt,
        params: named,
    };
    Ok(TrainOutcome { checkpoint, log })
}
