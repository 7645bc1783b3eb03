//! Session forward pass.
//!
//! The examination branch walks the whole session: each document step sees
//! its own position embedding and the click state of the document before it
//! (a start symbol for the very first), then a GRU and a sigmoid head. The
//! frequency-domain filter, when enabled, runs causally: step t filters the
//! sequence prefix up to t and keeps the newest row, because an FFT over the
//! full session would smear later clicks into earlier steps. The
//! attractiveness branch looks at one document at a time: its four field
//! embeddings form a 4-token sequence through the filter and transformer
//! blocks, whose concatenated output maps to a sigmoid score. A combination
//! layer merges the two probabilities. Nothing reachable from either
//! branch's step t encodes the click at t or any later click.

use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::clicklog::EncodedSession;
use crate::error::{Error, Result};
use crate::tensor::{Graph, GruWeights, Tensor, TensorId};

use super::{Combination, ModelConfig, Parameters, CLICK_NO_PREVIOUS};

pub enum Mode<'r> {
    Train { rng: &'r mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// One session's computation graph plus the node handles needed to read
/// predictions, run backward, and harvest parameter gradients.
pub struct SessionForward {
    pub graph: Graph,
    /// Leaf ids aligned with the parameter order.
    pub param_ids: Vec<TensorId>,
    pub attraction: TensorId,
    pub examination: TensorId,
    pub click_prob: TensorId,
    pub loss: TensorId,
    pub labels: Vec<u8>,
    pub ranks: Vec<usize>,
}

impl SessionForward {
    pub fn doc_count(&self) -> usize {
        self.labels.len()
    }
}

/// Evaluation-mode per-document outputs as plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub attraction: Vec<f64>,
    pub examination: Vec<f64>,
    pub click_prob: Vec<f64>,
    pub labels: Vec<u8>,
    pub ranks: Vec<usize>,
}

struct Fetch<'p> {
    params: &'p Parameters,
    ids: Vec<TensorId>,
}

impl Fetch<'_> {
    fn get(&self, name: &str) -> Result<TensorId> {
        Ok(self.ids[self.params.index_of(name)?])
    }
}

fn dropout(g: &mut Graph, x: TensorId, config: &ModelConfig, mode: &mut Mode) -> Result<TensorId> {
    match mode {
        Mode::Train { rng } => g.dropout(x, config.dropout, rng),
        Mode::Eval => Ok(x),
    }
}

/// One filter block: spectral multiply, inverse transform, dropout, skip
/// connection, layer norm. With the branch toggle off the spectral path is
/// replaced by zeros of the same shape (the skip and normalization stay, and
/// training still draws the same dropout mask so ablation arms consume
/// identical random streams).
pub(crate) fn filter_block(
    g: &mut Graph,
    x: TensorId,
    w: TensorId,
    ln_gamma: TensorId,
    ln_beta: TensorId,
    enabled: bool,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<TensorId> {
    let (n, d) = {
        let shape = g.value(x).shape();
        (shape[0], shape[1])
    };
    let filtered = if enabled {
        let spec = g.rfft_node(x)?;
        let bins_needed = n / 2 + 1;
        let bins_stored = g.value(w).shape()[1];
        let w_used = if bins_stored > bins_needed {
            g.spectrum_slice(w, bins_needed)?
        } else {
            w
        };
        let prod = g.spectrum_mul(spec, w_used)?;
        g.irfft_node(prod, n)?
    } else {
        g.constant(Tensor::zeros(vec![n, d]))
    };
    let dropped = dropout(g, filtered, config, mode)?;
    let sum = g.add(x, dropped)?;
    g.layer_norm(sum, ln_gamma, ln_beta, 1e-12)
}

fn multi_head_attention(
    g: &mut Graph,
    x: TensorId,
    fetch: &Fetch,
    block: usize,
    config: &ModelConfig,
) -> Result<TensorId> {
    let scale = 1.0 / (config.d_k() as f64).sqrt();
    let mut heads: Vec<TensorId> = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        let wq = fetch.get(&format!("attr.tf{}.head{}.wq", block, i))?;
        let wk = fetch.get(&format!("attr.tf{}.head{}.wk", block, i))?;
        let wv = fetch.get(&format!("attr.tf{}.head{}.wv", block, i))?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let raw = g.matmul(q, kt)?;
        let scores = g.scale(raw, scale)?;
        let att = g.softmax_rows(scores)?;
        heads.push(g.matmul(att, v)?);
    }
    let mut cat = heads[0];
    for &h in &heads[1..] {
        cat = g.concat_cols(cat, h)?;
    }
    let wo = fetch.get(&format!("attr.tf{}.wo", block))?;
    g.matmul(cat, wo)
}

fn position_wise_ffn(
    g: &mut Graph,
    x: TensorId,
    fetch: &Fetch,
    block: usize,
) -> Result<TensorId> {
    let w1 = fetch.get(&format!("attr.tf{}.ffn.w1", block))?;
    let b1 = fetch.get(&format!("attr.tf{}.ffn.b1", block))?;
    let w2 = fetch.get(&format!("attr.tf{}.ffn.w2", block))?;
    let b2 = fetch.get(&format!("attr.tf{}.ffn.b2", block))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_row_bias(out, b2)
}

fn transformer_block(
    g: &mut Graph,
    x: TensorId,
    fetch: &Fetch,
    block: usize,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<TensorId> {
    let att = multi_head_attention(g, x, fetch, block, config)?;
    let att = dropout(g, att, config, mode)?;
    let sum1 = g.add(x, att)?;
    let g1 = fetch.get(&format!("attr.tf{}.ln1.gamma", block))?;
    let b1 = fetch.get(&format!("attr.tf{}.ln1.beta", block))?;
    let x = g.layer_norm(sum1, g1, b1, 1e-12)?;

    let ffn = position_wise_ffn(g, x, fetch, block)?;
    let ffn = dropout(g, ffn, config, mode)?;
    let sum2 = g.add(x, ffn)?;
    let g2 = fetch.get(&format!("attr.tf{}.ln2.gamma", block))?;
    let b2 = fetch.get(&format!("attr.tf{}.ln2.beta", block))?;
    g.layer_norm(sum2, g2, b2, 1e-12)
}

struct CombIds {
    lambda: TensorId,
    mu: TensorId,
    alpha: TensorId,
    beta: TensorId,
    mlp_w1: TensorId,
    mlp_b1: TensorId,
    mlp_w2: TensorId,
    mlp_b2: TensorId,
}

impl CombIds {
    fn bind(fetch: &Fetch) -> Result<CombIds> {
        Ok(CombIds {
            lambda: fetch.get("comb.lambda")?,
            mu: fetch.get("comb.mu")?,
            alpha: fetch.get("comb.alpha")?,
            beta: fetch.get("comb.beta")?,
            mlp_w1: fetch.get("comb.mlp.w1")?,
            mlp_b1: fetch.get("comb.mlp.b1")?,
            mlp_w2: fetch.get("comb.mlp.w2")?,
            mlp_b2: fetch.get("comb.mlp.b2")?,
        })
    }
}

fn combine_node(
    g: &mut Graph,
    a: TensorId,
    e: TensorId,
    kind: Combination,
    ids: &CombIds,
) -> Result<TensorId> {
    match kind {
        Combination::Mul => g.mul(a, e),
        Combination::ExpMul => {
            let pa = g.pow_scalar(a, ids.lambda)?;
            let pe = g.pow_scalar(e, ids.mu)?;
            g.mul(pa, pe)
        }
        Combination::SigmoidLog => {
            let ae = g.mul(a, e)?;
            let num = g.scale(ae, 4.0)?;
            let a1 = g.add_const(a, 1.0)?;
            let e1 = g.add_const(e, 1.0)?;
            let den = g.mul(a1, e1)?;
            g.div(num, den)
        }
        Combination::Linear => {
            let ta = g.mul_scalar(a, ids.alpha)?;
            let te = g.mul_scalar(e, ids.beta)?;
            g.add(ta, te)
        }
        Combination::Nonlinear => {
            let z = g.concat_cols(a, e)?;
            let h = g.matmul(z, ids.mlp_w1)?;
            let h = g.add_row_bias(h, ids.mlp_b1)?;
            let h = g.relu(h)?;
            let o = g.matmul(h, ids.mlp_w2)?;
            let o = g.add_row_bias(o, ids.mlp_b2)?;
            g.sigmoid(o)
        }
    }
}

/// Merge attraction and examination columns into click probabilities,
/// binding the combiner's own parameters as fresh shared leaves. Intended
/// for tests and standalone use; the session forward pass wires the same
/// logic through its bound parameter set instead.
pub fn combine_probs(
    g: &mut Graph,
    a: TensorId,
    e: TensorId,
    params: &Parameters,
    config: &ModelConfig,
) -> Result<TensorId> {
    let mut ids = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        ids.push(g.shared_leaf(Arc::clone(params.tensor(i))));
    }
    let fetch = Fetch { params, ids };
    let comb = CombIds::bind(&fetch)?;
    let raw = combine_node(g, a, e, config.combination, &comb)?;
    g.clamp(raw, config.prob_clamp, 1.0 - config.prob_clamp)
}

/// Mean negative log-likelihood of the observed clicks over masked-in
/// documents: -(1/N) sum of c*ln(C) + (1-c)*ln(1-C).
pub fn click_loss(g: &mut Graph, c: TensorId, labels: &[u8], mask: &[bool]) -> Result<TensorId> {
    let n = g.value(c).numel();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Dim(format!(
            "click_loss got {} probabilities, {} labels, {} mask entries",
            n,
            labels.len(),
            mask.len()
        )));
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::Contract("click_loss needs at least one valid document".into()));
    }
    let shape = g.value(c).shape().to_vec();
    let y = g.constant(Tensor::new(shape.clone(), labels.iter().map(|&c| c as f64).collect())?);
    let y_inv = g.constant(Tensor::new(
        shape.clone(),
        labels.iter().map(|&c| 1.0 - c as f64).collect(),
    )?);
    let m = g.constant(Tensor::new(
        shape,
        mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?);
    let ln_c = g.ln(c)?;
    let neg_c = g.scale(c, -1.0)?;
    let omc = g.add_const(neg_c, 1.0)?;
    let ln_omc = g.ln(omc)?;
    let pos_term = g.mul(y, ln_c)?;
    let neg_term = g.mul(y_inv, ln_omc)?;
    let term = g.add(pos_term, neg_term)?;
    let masked = g.mul(m, term)?;
    let total = g.sum_all(masked)?;
    g.scale(total, -1.0 / n_valid as f64)
}

fn check_session(
    params: &Parameters,
    config: &ModelConfig,
    session: &EncodedSession,
) -> Result<()> {
    if session.queries.is_empty() || session.queries.iter().any(|q| q.docs.is_empty()) {
        return Err(Error::Contract("forward pass needs a non-empty session".into()));
    }
    let n_q = params.get("emb.query")?.shape()[0];
    let n_u = params.get("emb.url")?.shape()[0];
    for q in &session.queries {
        if q.query >= n_q {
            return Err(Error::Config(format!(
                "query index {} is outside the model's vocabulary of {}",
                q.query, n_q
            )));
        }
        for d in &q.docs {
            if d.url >= n_u {
                return Err(Error::Config(format!(
                    "url index {} is outside the model's vocabulary of {}",
                    d.url, n_u
                )));
            }
            if d.pos == 0 || d.pos > config.p_max {
                return Err(Error::Config(format!(
                    "position {} is outside the model's range 1..={}",
                    d.pos, config.p_max
                )));
            }
            if d.click > 1 {
                return Err(Error::Contract(format!("click label {} is not 0 or 1", d.click)));
            }
        }
    }
    let total: usize = session.queries.iter().map(|q| q.docs.len()).sum();
    if total > config.max_session_docs {
        return Err(Error::Config(format!(
            "session holds {} documents but the model is sized for {}",
            total, config.max_session_docs
        )));
    }
    Ok(())
}

/// Build the full per-session graph: examination over the whole document
/// sequence, attractiveness per document, combination, and the mean
/// cross-entropy loss over all documents.
pub fn forward_session(
    params: &Parameters,
    config: &ModelConfig,
    session: &EncodedSession,
    mode: &mut Mode,
) -> Result<SessionForward> {
    config.validate()?;
    check_session(params, config, session)?;

    let mut g = Graph::new();
    let mut ids = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        ids.push(g.shared_leaf(Arc::clone(params.tensor(i))));
    }
    let fetch = Fetch { params, ids };

    // session-wide document order: queries as submitted, positions ascending
    let mut pos_ids = Vec::new();
    let mut exam_ctx = Vec::new();
    let mut labels = Vec::new();
    let mut ranks = Vec::new();
    for q in &session.queries {
        for d in &q.docs {
            exam_ctx.push(match labels.last() {
                None => CLICK_NO_PREVIOUS,
                Some(&prev) => prev as usize + 1,
            });
            pos_ids.push(d.pos);
            labels.push(d.click);
            ranks.push(d.pos);
        }
    }

    // examination branch. The filter is applied causally: step t filters the
    // prefix of the input sequence up to t and keeps only the newest row, so
    // no step's representation can pick up later clicks through the FFT.
    let emb_pos = fetch.get("emb.pos")?;
    let emb_click = fetch.get("emb.click")?;
    let mut rows = Vec::with_capacity(pos_ids.len());
    for t in 0..pos_ids.len() {
        let vp = g.embedding(emb_pos, &pos_ids[t..=t])?;
        let vc = g.embedding(emb_click, &exam_ctx[t..=t])?;
        rows.push(g.concat_cols(vp, vc)?);
    }
    let mut steps = Vec::with_capacity(rows.len());
    for (t, &row) in rows.iter().enumerate() {
        if config.filter_blocks_exam == 0 {
            steps.push(row);
            continue;
        }
        let mut f = if t == 0 { row } else { g.concat_rows(&rows[..=t])? };
        for b in 0..config.filter_blocks_exam {
            let w = fetch.get(&format!("exam.filter{}.w", b))?;
            let gamma = fetch.get(&format!("exam.filter{}.ln.gamma", b))?;
            let beta = fetch.get(&format!("exam.filter{}.ln.beta", b))?;
            f = filter_block(&mut g, f, w, gamma, beta, config.enable_filter_exam, config, mode)?;
        }
        steps.push(if t == 0 {
            f
        } else {
            let mut sel = Tensor::zeros(vec![1, t + 1]);
            sel.data_mut()[t] = 1.0;
            let s = g.constant(sel);
            g.matmul(s, f)?
        });
    }
    let x = if steps.len() == 1 { steps[0] } else { g.concat_rows(&steps)? };
    let gru = GruWeights {
        wz: fetch.get("exam.gru.wz")?,
        uz: fetch.get("exam.gru.uz")?,
        bz: fetch.get("exam.gru.bz")?,
        wr: fetch.get("exam.gru.wr")?,
        ur: fetch.get("exam.gru.ur")?,
        br: fetch.get("exam.gru.br")?,
        wh: fetch.get("exam.gru.wh")?,
        uh: fetch.get("exam.gru.uh")?,
        bh: fetch.get("exam.gru.bh")?,
        h0: fetch.get("exam.gru.h0")?,
    };
    let h = g.gru_sequence(x, gru)?;
    let ew = fetch.get("exam.head.w")?;
    let eb = fetch.get("exam.head.b")?;
    let e_lin = g.matmul(h, ew)?;
    let e_lin = g.add_row_bias(e_lin, eb)?;
    let examination = g.sigmoid(e_lin)?;

    // attractiveness branch, one 4-token pass per document
    let emb_query = fetch.get("emb.query")?;
    let emb_url = fetch.get("emb.url")?;
    let aw = fetch.get("attr.head.w")?;
    let ab = fetch.get("attr.head.b")?;
    let mut a_nodes = Vec::with_capacity(labels.len());
    for q in &session.queries {
        for (j, d) in q.docs.iter().enumerate() {
            let ctx = if j == 0 {
                CLICK_NO_PREVIOUS
            } else {
                q.docs[j - 1].click as usize + 1
            };
            let tq = g.embedding(emb_query, &[q.query])?;
            let td = g.embedding(emb_url, &[d.url])?;
            let tc = g.embedding(emb_click, &[ctx])?;
            let tp = g.embedding(emb_pos, &[d.pos])?;
            let mut tokens = g.concat_rows(&[tq, td, tc, tp])?;
            for b in 0..config.filter_blocks_attr {
                let w = fetch.get(&format!("attr.filter{}.w", b))?;
                let gamma = fetch.get(&format!("attr.filter{}.ln.gamma", b))?;
                let beta = fetch.get(&format!("attr.filter{}.ln.beta", b))?;
                tokens = filter_block(
                    &mut g,
                    tokens,
                    w,
                    gamma,
                    beta,
                    config.enable_filter_attr,
                    config,
                    mode,
                )?;
            }
            for t in 0..config.transformer_blocks {
                tokens = transformer_block(&mut g, tokens, &fetch, t, config, mode)?;
            }
            let flat = g.reshape(tokens, vec![1, 4 * config.embedding_size])?;
            let a_lin = g.matmul(flat, aw)?;
            let a_lin = g.add_row_bias(a_lin, ab)?;
            a_nodes.push(g.sigmoid(a_lin)?);
        }
    }
    let attraction = g.concat_rows(&a_nodes)?;

    let comb = CombIds::bind(&fetch)?;
    let raw = combine_node(&mut g, attraction, examination, config.combination, &comb)?;
    let click_prob = g.clamp(raw, config.prob_clamp, 1.0 - config.prob_clamp)?;

    let mask = vec![true; labels.len()];
    let loss = click_loss(&mut g, click_prob, &labels, &mask)?;

    Ok(SessionForward {
        graph: g,
        param_ids: fetch.ids,
        attraction,
        examination,
        click_prob,
        loss,
        labels,
        ranks,
    })
}

/// Deterministic evaluation-mode forward pass returning plain numbers.
pub fn predict_session(
    params: &Parameters,
    config: &ModelConfig,
    session: &EncodedSession,
) -> Result<ForwardOutput> {
    let mut mode = Mode::Eval;
    let fwd = forward_session(params, config, session, &mut mode)?;
    Ok(ForwardOutput {
        attraction: fwd.graph.value(fwd.attraction).data().to_vec(),
        examination: fwd.graph.value(fwd.examination).data().to_vec(),
        click_prob: fwd.graph.value(fwd.click_prob).data().to_vec(),
        labels: fwd.labels,
        ranks: fwd.ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicklog::{encode_sessions, DocumentImpression, QueryRecord, Session, Vocabulary};
    use crate::seed::stream_rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            embedding_size: 8,
            hidden_size: 8,
            heads: 2,
            transformer_blocks: 1,
            filter_blocks_attr: 1,
            filter_blocks_exam: 1,
            dropout: 0.5,
            combination: Combination::ExpMul,
            p_max: 10,
            prob_clamp: 1e-6,
            enable_filter_attr: true,
            enable_filter_exam: true,
            recurrent_cell: super::super::RecurrentCell::Gru,
            max_session_docs: 8,
        }
    }

    fn sessions_fixture() -> Vec<Session> {
        vec![
            Session {
                session_id: 0,
                queries: vec![
                    QueryRecord {
                        query_id: 1,
                        docs: vec![
                            DocumentImpression { url_id: 10, pos: 1, click: 1 },
                            DocumentImpression { url_id: 11, pos: 2, click: 0 },
                            DocumentImpression { url_id: 12, pos: 3, click: 1 },
                        ],
                    },
                    QueryRecord {
                        query_id: 2,
                        docs: vec![
                            DocumentImpression { url_id: 11, pos: 1, click: 0 },
                            DocumentImpression { url_id: 13, pos: 2, click: 0 },
                        ],
                    },
                ],
            },
            Session {
                session_id: 1,
                queries: vec![QueryRecord {
                    query_id: 1,
                    docs: vec![
                        DocumentImpression { url_id: 12, pos: 1, click: 0 },
                        DocumentImpression { url_id: 10, pos: 2, click: 1 },
                    ],
                }],
            },
        ]
    }

    fn setup() -> (ModelConfig, Parameters, Vec<crate::clicklog::EncodedSession>) {
        let sessions = sessions_fixture();
        let vocab = Vocabulary::build(&sessions, 1);
        let config = toy_config();
        let params = Parameters::init(&config, &vocab, 42).unwrap();
        let encoded = encode_sessions(&sessions, &vocab);
        (config, params, encoded)
    }

    #[test]
    fn evaluation_is_deterministic_and_in_range() {
        let (config, params, encoded) = setup();
        let a = predict_session(&params, &config, &encoded[0]).unwrap();
        let b = predict_session(&params, &config, &encoded[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.click_prob.len(), 5);
        for i in 0..a.click_prob.len() {
            assert!(a.attraction[i] > 0.0 && a.attraction[i] < 1.0);
            assert!(a.examination[i] > 0.0 && a.examination[i] < 1.0);
            assert!(a.click_prob[i] >= config.prob_clamp);
            assert!(a.click_prob[i] <= 1.0 - config.prob_clamp);
        }
        assert_eq!(a.ranks, vec![1, 2, 3, 1, 2]);
        assert_eq!(a.labels, vec![1, 0, 1, 0, 0]);
    }

    #[test]
    fn exp_mul_at_unit_exponents_equals_mul_exactly() {
        let (mut config, params, encoded) = setup();
        config.combination = Combination::ExpMul;
        let em = predict_session(&params, &config, &encoded[0]).unwrap();
        config.combination = Combination::Mul;
        let m = predict_session(&params, &config, &encoded[0]).unwrap();
        assert_eq!(em.click_prob, m.click_prob);
    }

    #[test]
    fn attraction_ignores_the_targets_own_click() {
        let (config, params, encoded) = setup();
        let base = predict_session(&params, &config, &encoded[0]).unwrap();
        let mut flipped = encoded[0].clone();
        // flip the LAST document's click so no later context exists at all
        let last_q = flipped.queries.len() - 1;
        let last_d = flipped.queries[last_q].docs.len() - 1;
        flipped.queries[last_q].docs[last_d].click ^= 1;
        let out = predict_session(&params, &config, &flipped).unwrap();
        assert_eq!(out.attraction, base.attraction);
        assert_eq!(out.examination, base.examination);
    }

    #[test]
    fn examination_ignores_future_clicks() {
        let (config, params, encoded) = setup();
        let base = predict_session(&params, &config, &encoded[0]).unwrap();
        let mut mutated = encoded[0].clone();
        // flip a middle click; everything strictly before it must hold still
        mutated.queries[0].docs[2].click ^= 1;
        let out = predict_session(&params, &config, &mutated).unwrap();
        assert_eq!(&out.examination[..3], &base.examination[..3]);
        assert_eq!(&out.attraction[..3], &base.attraction[..3]);
    }

    #[test]
    fn zero_heads_give_half_probabilities() {
        let (mut config, mut params, encoded) = setup();
        config.combination = Combination::Mul;
        for name in ["attr.head.w", "exam.head.w"] {
            let i = params.index_of(name).unwrap();
            params.update(i, |d| d.iter_mut().for_each(|v| *v = 0.0)).unwrap();
        }
        let out = predict_session(&params, &config, &encoded[0]).unwrap();
        for i in 0..out.click_prob.len() {
            assert_eq!(out.attraction[i], 0.5);
            assert_eq!(out.examination[i], 0.5);
            assert!((out.click_prob[i] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn training_mode_is_reproducible_under_the_same_stream() {
        let (config, params, encoded) = setup();
        let run = |seed| {
            let mut rng = stream_rng(seed, "dropout");
            let mut mode = Mode::Train { rng: &mut rng };
            let fwd = forward_session(&params, &config, &encoded[0], &mut mode).unwrap();
            fwd.graph.value(fwd.loss).data()[0]
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn gradients_flow_to_every_used_parameter() {
        let (mut config, params, encoded) = setup();
        config.dropout = 0.0;
        let mut rng = stream_rng(9, "dropout");
        let mut mode = Mode::Train { rng: &mut rng };
        let mut fwd = forward_session(&params, &config, &encoded[0], &mut mode).unwrap();
        fwd.graph.backward(fwd.loss).unwrap();
        // exp_mul touches every branch plus lambda/mu; the other combiners stay dark
        let mut hit = 0;
        for i in 0..params.len() {
            let name = params.name(i);
            let grad = fwd.graph.grad(fwd.param_ids[i]);
            let used = !(name.starts_with("comb.") && name != "comb.lambda" && name != "comb.mu");
            if used {
                let g = grad.expect(name);
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "{} received no gradient signal",
                    name
                );
                hit += 1;
            } else {
                assert!(
                    grad.map(|g| g.iter().all(|&v| v == 0.0)).unwrap_or(true),
                    "{} should be dark under exp_mul",
                    name
                );
            }
        }
        assert!(hit > 30, "only {} parameters reached", hit);
    }

    #[test]
    fn contract_errors_for_bad_sessions() {
        let (mut config, params, encoded) = setup();
        let empty = crate::clicklog::EncodedSession { queries: vec![] };
        assert!(matches!(
            predict_session(&params, &config, &empty),
            Err(Error::Contract(_))
        ));
        // session longer than the examination filter's sizing
        config.max_session_docs = 3;
        assert!(matches!(
            predict_session(&params, &config, &encoded[0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vocabulary_mismatch_is_a_config_error() {
        let (config, params, mut encoded) = setup();
        encoded[0].queries[0].query = 999;
        assert!(matches!(
            predict_session(&params, &config, &encoded[0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn click_loss_matches_hand_computed_values() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::new(vec![3, 1], vec![0.9, 0.2, 0.6]).unwrap());
        let loss = click_loss(&mut g, c, &[1, 0, 1], &[true, true, true]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
        assert!((g.value(loss).data()[0] - 0.2797).abs() < 1e-4);

        let mut g = Graph::new();
        let c = g.leaf(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        let loss = click_loss(&mut g, c, &[1, 0], &[true, true]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn click_loss_honors_the_mask_and_rejects_empty() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::new(vec![3, 1], vec![0.9, 0.0001, 0.6]).unwrap());
        // the masked-out middle doc would dominate if it leaked in
        let loss = click_loss(&mut g, c, &[1, 1, 1], &[true, false, true]).unwrap();
        let want = -(0.9f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);

        let mut g = Graph::new();
        let c = g.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        assert!(matches!(
            click_loss(&mut g, c, &[1], &[false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn combiner_values_match_their_formulas() {
        let (mut config, params, _) = setup();
        let mut eval = |kind: Combination, a: f64, e: f64| -> f64 {
            config.combination = kind;
            let mut g = Graph::new();
            let an = g.leaf(Tensor::new(vec![1, 1], vec![a]).unwrap());
            let en = g.leaf(Tensor::new(vec![1, 1], vec![e]).unwrap());
            let c = combine_probs(&mut g, an, en, &params, &config).unwrap();
            g.value(c).data()[0]
        };
        assert!((eval(Combination::Mul, 0.8, 0.5) - 0.4).abs() < 1e-15);
        assert!((eval(Combination::SigmoidLog, 0.5, 0.5) - 4.0 * 0.25 / 2.25).abs() < 1e-15);
        // linear with the 0.5/0.5 initialization is the average
        assert!((eval(Combination::Linear, 0.8, 0.4) - 0.6).abs() < 1e-15);
        // exp_mul at the unit initialization reduces to mul bit for bit
        assert_eq!(eval(Combination::ExpMul, 0.37, 0.91), eval(Combination::Mul, 0.37, 0.91));
        let nl = eval(Combination::Nonlinear, 0.8, 0.5);
        assert!(nl >= config.prob_clamp && nl <= 1.0 - config.prob_clamp);
    }
}
