//! Finite-difference validation of the analytic backward pass: one check per
//! differentiable graph operation plus the whole model loss on a toy
//! instance. The `gradcheck` command prints these rows verbatim.
//!
//! Every check rebuilds a deterministic scalar function (evaluation-mode
//! forward, fixed dropout masks) and compares its graph gradient against
//! central differences. Imaginary spectrum coordinates that a real transform
//! pins to zero (DC, and Nyquist for even lengths) are skipped and asserted
//! to carry an exactly-zero analytic gradient instead, since differencing
//! them measures nothing but rounding residue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clicklog::{encode_sessions, DocumentImpression, EncodedSession, QueryRecord, Session, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    filter_block, forward_session, Combination, Mode, ModelConfig, Parameters, RecurrentCell,
};
use crate::seed::derive_seed;
use crate::tensor::{grad_check, grad_check_masked, Graph, GruWeights, Tensor, TensorId};
use crate::train::session_gradients;

/// Worst tolerated relative error between analytic and numeric gradients.
pub const REL_TOLERANCE: f64 = 1e-4;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &'static str, max_rel_err: f64) -> CheckRow {
        CheckRow { name, max_rel_err, pass: max_rel_err < REL_TOLERANCE }
    }
}

pub fn all_pass(rows: &[CheckRow]) -> bool {
    rows.iter().all(|r| r.pass)
}

/// Render rows as `name,max_rel_err,pass` lines under a header.
pub fn rows_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("name,max_rel_err,pass\n");
    for r in rows {
        out.push_str(&format!("{},{:.3e},{}\n", r.name, r.max_rel_err, r.pass));
    }
    out
}

/// The full suite: every operation check, the model filter block, and the
/// whole-model loss gradient.
pub fn run_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = op_checks(seed)?;
    rows.push(filter_block_check(seed, 1.0)?);
    rows.push(model_check(seed)?);
    Ok(rows)
}

/// Negative control: runs the filter-block check with the spectral adjoint
/// deliberately rescaled. A healthy checker must fail this row.
pub fn corrupted_filter_check(seed: u64) -> Result<CheckRow> {
    filter_block_check(seed, 3.0)
}

fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random values with magnitude at least `floor`, so kinked activations are
/// never differenced across their corner.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, floor: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(floor..hi);
            if rng.random_range(0.0..1.0) < 0.5 { -mag } else { mag }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Squash then contract against fixed weights: a scalar readout that keeps
/// every output coordinate relevant and the function nonlinear.
fn reduce(g: &mut Graph, y: TensorId, w: &Tensor) -> Result<TensorId> {
    let t = g.tanh(y)?;
    let c = g.constant(w.clone());
    let p = g.mul(t, c)?;
    g.sum_all(p)
}

/// Imaginary-plane coordinates of a packed `[2, bins, dims]` filter that stay
/// structurally invisible for every sequence length in `lengths`.
fn spectral_inert_mask(shape: &[usize], lengths: Vec<usize>) -> impl Fn(usize) -> bool {
    let (bins, dims) = (shape[1], shape[2]);
    let inert: Vec<usize> = (0..bins)
        .filter(|&b| {
            lengths.iter().all(|&n| {
                let active = b < n / 2 + 1;
                !active || b == 0 || (n % 2 == 0 && b == n / 2)
            })
        })
        .collect();
    let off = bins * dims;
    move |i: usize| i >= off && inert.contains(&((i - off) / dims))
}

/// One row per differentiable graph operation. Two-input operations with
/// distinct backward paths get one row per input.
pub fn op_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut check = |name: &'static str, x: &Tensor, f: &mut dyn FnMut(&mut Graph, TensorId) -> Result<TensorId>| -> Result<()> {
        let err = grad_check(f, x, FD_STEP)?;
        rows.push(CheckRow::new(name, err));
        Ok(())
    };

    let mut r = rng_for(seed, "ops");
    let rw = |r: &mut ChaCha8Rng, shape: &[usize]| rand_tensor(r, shape.to_vec(), 0.5, 1.5);

    // matmul, both arguments
    {
        let x = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, vec![4, 2], -1.0, 1.0);
        let w = rw(&mut r, &[3, 2]);
        check("matmul_left", &x, &mut |g, xid| {
            let bid = g.constant(b.clone());
            let y = g.matmul(xid, bid)?;
            reduce(g, y, &w)
        })?;
        let a = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let x2 = rand_tensor(&mut r, vec![4, 2], -1.0, 1.0);
        check("matmul_right", &x2, &mut |g, xid| {
            let aid = g.constant(a.clone());
            let y = g.matmul(aid, xid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, vec![3, 2], -1.0, 1.0);
        let w = rw(&mut r, &[4, 2]);
        check("transpose", &x, &mut |g, xid| {
            let t = g.transpose(xid)?;
            let bid = g.constant(b.clone());
            let y = g.matmul(t, bid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![2, 5], -1.0, 1.0);
        let o = rand_tensor(&mut r, vec![2, 5], -1.0, 1.0);
        let w = rw(&mut r, &[2, 5]);
        check("add", &x, &mut |g, xid| {
            let oid = g.constant(o.clone());
            let y = g.add(xid, oid)?;
            reduce(g, y, &w)
        })?;
        check("mul", &x, &mut |g, xid| {
            let oid = g.constant(o.clone());
            let y = g.mul(xid, oid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let num = rand_tensor(&mut r, vec![2, 4], -1.0, 1.0);
        let den = rand_tensor(&mut r, vec![2, 4], 0.6, 1.6);
        let w = rw(&mut r, &[2, 4]);
        check("div_numerator", &num, &mut |g, xid| {
            let d = g.constant(den.clone());
            let y = g.div(xid, d)?;
            reduce(g, y, &w)
        })?;
        check("div_denominator", &den, &mut |g, xid| {
            let n = g.constant(num.clone());
            let y = g.div(n, xid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![2, 4], -1.0, 1.0);
        let w = rw(&mut r, &[2, 4]);
        check("scale", &x, &mut |g, xid| {
            let y = g.scale(xid, 1.7)?;
            reduce(g, y, &w)
        })?;
        check("add_const", &x, &mut |g, xid| {
            let y = g.add_const(xid, 0.3)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![2, 3], -1.0, 1.0);
        let s = rand_tensor(&mut r, vec![1, 1], 0.5, 1.5);
        let w = rw(&mut r, &[2, 3]);
        check("mul_scalar_x", &x, &mut |g, xid| {
            let sid = g.constant(s.clone());
            let y = g.mul_scalar(xid, sid)?;
            reduce(g, y, &w)
        })?;
        check("mul_scalar_s", &s, &mut |g, sid| {
            let xid = g.constant(x.clone());
            let y = g.mul_scalar(xid, sid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let base = rand_tensor(&mut r, vec![2, 3], 0.4, 2.0);
        let exp = rand_tensor(&mut r, vec![1, 1], 0.8, 1.6);
        let w = rw(&mut r, &[2, 3]);
        check("pow_base", &base, &mut |g, xid| {
            let e = g.constant(exp.clone());
            let y = g.pow_scalar(xid, e)?;
            reduce(g, y, &w)
        })?;
        check("pow_exponent", &exp, &mut |g, eid| {
            let b = g.constant(base.clone());
            let y = g.pow_scalar(b, eid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, vec![1, 4], -0.5, 0.5);
        let w = rw(&mut r, &[3, 4]);
        check("add_row_bias_x", &x, &mut |g, xid| {
            let bid = g.constant(b.clone());
            let y = g.add_row_bias(xid, bid)?;
            reduce(g, y, &w)
        })?;
        check("add_row_bias_b", &b, &mut |g, bid| {
            let xid = g.constant(x.clone());
            let y = g.add_row_bias(xid, bid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![2, 5], -2.0, 2.0);
        let w = rw(&mut r, &[2, 5]);
        check("sigmoid", &x, &mut |g, xid| {
            let y = g.sigmoid(xid)?;
            reduce(g, y, &w)
        })?;
        check("tanh", &x, &mut |g, xid| {
            let y = g.tanh(xid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        // keep inputs away from the corner so differencing never crosses it
        let x = rand_tensor_off_zero(&mut r, vec![2, 5], 0.05, 1.0);
        let w = rw(&mut r, &[2, 5]);
        check("relu", &x, &mut |g, xid| {
            let y = g.relu(xid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![2, 4], 0.2, 3.0);
        let w = rw(&mut r, &[2, 4]);
        check("ln", &x, &mut |g, xid| {
            let y = g.ln(xid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![3, 4], -2.0, 2.0);
        let w = rw(&mut r, &[3, 4]);
        check("softmax_rows", &x, &mut |g, xid| {
            let y = g.softmax_rows(xid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![3, 6], -1.0, 1.0);
        let gamma = rand_tensor(&mut r, vec![1, 6], 0.5, 1.5);
        let beta = rand_tensor(&mut r, vec![1, 6], -0.5, 0.5);
        let w = rw(&mut r, &[3, 6]);
        check("layer_norm_x", &x, &mut |g, xid| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let y = g.layer_norm(xid, ga, be, 1e-12)?;
            reduce(g, y, &w)
        })?;
        check("layer_norm_gamma", &gamma, &mut |g, ga| {
            let xid = g.constant(x.clone());
            let be = g.constant(beta.clone());
            let y = g.layer_norm(xid, ga, be, 1e-12)?;
            reduce(g, y, &w)
        })?;
        check("layer_norm_beta", &beta, &mut |g, be| {
            let xid = g.constant(x.clone());
            let ga = g.constant(gamma.clone());
            let y = g.layer_norm(xid, ga, be, 1e-12)?;
            reduce(g, y, &w)
        })?;
    }

    {
        // the mask is redrawn identically on every call, so the function
        // under test stays deterministic
        let x = rand_tensor(&mut r, vec![4, 5], -1.0, 1.0);
        let w = rw(&mut r, &[4, 5]);
        check("dropout_fixed_mask", &x, &mut |g, xid| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
            let y = g.dropout(xid, 0.3, &mut mask_rng)?;
            reduce(g, y, &w)
        })?;
    }

    {
        // repeated ids exercise gradient accumulation into one row
        let table = rand_tensor(&mut r, vec![5, 3], -1.0, 1.0);
        let w = rw(&mut r, &[4, 3]);
        check("embedding_table", &table, &mut |g, tid| {
            let y = g.embedding(tid, &[0, 2, 2, 4])?;
            reduce(g, y, &w)
        })?;
    }

    {
        let top = rand_tensor(&mut r, vec![2, 3], -1.0, 1.0);
        let x = rand_tensor(&mut r, vec![2, 3], -1.0, 1.0);
        let bottom = rand_tensor(&mut r, vec![1, 3], -1.0, 1.0);
        let w = rw(&mut r, &[5, 3]);
        check("concat_rows", &x, &mut |g, xid| {
            let t = g.constant(top.clone());
            let b = g.constant(bottom.clone());
            let y = g.concat_rows(&[t, xid, b])?;
            reduce(g, y, &w)
        })?;
        let right = rand_tensor(&mut r, vec![2, 2], -1.0, 1.0);
        let wc = rw(&mut r, &[2, 5]);
        check("concat_cols", &x, &mut |g, xid| {
            let rid = g.constant(right.clone());
            let y = g.concat_cols(xid, rid)?;
            reduce(g, y, &wc)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![2, 6], -1.0, 1.0);
        let b = rand_tensor(&mut r, vec![4, 2], -1.0, 1.0);
        let w = rw(&mut r, &[3, 2]);
        check("reshape", &x, &mut |g, xid| {
            let re = g.reshape(xid, vec![3, 4])?;
            let bid = g.constant(b.clone());
            let y = g.matmul(re, bid)?;
            reduce(g, y, &w)
        })?;
    }

    {
        // interior region only; the flat sections have exactly-zero gradient
        let x = rand_tensor(&mut r, vec![2, 4], -2.0, 2.0);
        let w = rw(&mut r, &[2, 4]);
        check("clamp", &x, &mut |g, xid| {
            let y = g.clamp(xid, -5.0, 5.0)?;
            reduce(g, y, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![3, 3], -1.0, 1.0);
        check("sum_all", &x, &mut |g, xid| {
            let t = g.tanh(xid)?;
            g.sum_all(t)
        })?;
    }

    {
        // odd length takes the convolution-based transform path
        let x = rand_tensor(&mut r, vec![5, 3], -1.0, 1.0);
        let w = rw(&mut r, &[5, 3]);
        check("rfft_irfft", &x, &mut |g, xid| {
            let spec = g.rfft_node(xid)?;
            let back = g.irfft_node(spec, 5)?;
            reduce(g, back, &w)
        })?;
    }

    {
        let x = rand_tensor(&mut r, vec![6, 2], -1.0, 1.0);
        let filt = rand_tensor(&mut r, vec![2, 4, 2], -0.8, 0.8);
        let w = rw(&mut r, &[6, 2]);
        check("spectrum_mul_signal", &x, &mut |g, xid| {
            let spec = g.rfft_node(xid)?;
            let fid = g.constant(filt.clone());
            let prod = g.spectrum_mul(spec, fid)?;
            let back = g.irfft_node(prod, 6)?;
            reduce(g, back, &w)
        })?;
        let inert = spectral_inert_mask(filt.shape(), vec![6]);
        let err = grad_check_masked(
            |g, fid| {
                let xid = g.constant(x.clone());
                let spec = g.rfft_node(xid)?;
                let prod = g.spectrum_mul(spec, fid)?;
                let back = g.irfft_node(prod, 6)?;
                reduce(g, back, &w)
            },
            &filt,
            FD_STEP,
            inert,
        )?;
        rows.push(CheckRow::new("spectrum_mul_filter", err));
    }

    {
        // a filter stored for longer sequences, truncated before use
        let x = rand_tensor(&mut r, vec![6, 2], -1.0, 1.0);
        let filt = rand_tensor(&mut r, vec![2, 6, 2], -0.8, 0.8);
        let w = rw(&mut r, &[6, 2]);
        let inert = spectral_inert_mask(filt.shape(), vec![6]);
        let err = grad_check_masked(
            |g, fid| {
                let xid = g.constant(x.clone());
                let spec = g.rfft_node(xid)?;
                let cut = g.spectrum_slice(fid, 4)?;
                let prod = g.spectrum_mul(spec, cut)?;
                let back = g.irfft_node(prod, 6)?;
                reduce(g, back, &w)
            },
            &filt,
            FD_STEP,
            inert,
        )?;
        rows.push(CheckRow::new("spectrum_slice", err));
    }

    rows.extend(gru_checks(seed)?);
    Ok(rows)
}

fn gru_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut r = rng_for(seed, "gru");
    let x = rand_tensor(&mut r, vec![4, 3], -1.0, 1.0);
    let wz = rand_tensor(&mut r, vec![3, 2], -1.0, 1.0);
    let uz = rand_tensor(&mut r, vec![2, 2], -1.0, 1.0);
    let bz = rand_tensor(&mut r, vec![1, 2], -0.5, 0.5);
    let wr = rand_tensor(&mut r, vec![3, 2], -1.0, 1.0);
    let ur = rand_tensor(&mut r, vec![2, 2], -1.0, 1.0);
    let br = rand_tensor(&mut r, vec![1, 2], -0.5, 0.5);
    let wh = rand_tensor(&mut r, vec![3, 2], -1.0, 1.0);
    let uh = rand_tensor(&mut r, vec![2, 2], -1.0, 1.0);
    let bh = rand_tensor(&mut r, vec![1, 2], -0.5, 0.5);
    let h0 = rand_tensor(&mut r, vec![1, 2], -0.5, 0.5);
    let w = rand_tensor(&mut r, vec![4, 2], 0.5, 1.5);

    let all = [&x, &wz, &uz, &bz, &wr, &ur, &br, &wh, &uh, &bh, &h0];
    let names = [
        "gru_input", "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br", "gru_wh",
        "gru_uh", "gru_bh", "gru_h0",
    ];
    let mut rows = Vec::with_capacity(names.len());
    for (slot, (&varied, name)) in all.iter().zip(names).enumerate() {
        let err = grad_check(
            |g, vid| {
                let mut ids: Vec<TensorId> =
                    all.iter().map(|t| g.constant((*t).clone())).collect();
                ids[slot] = vid;
                let weights = GruWeights {
                    wz: ids[1],
                    uz: ids[2],
                    bz: ids[3],
                    wr: ids[4],
                    ur: ids[5],
                    br: ids[6],
                    wh: ids[7],
                    uh: ids[8],
                    bh: ids[9],
                    h0: ids[10],
                };
                let y = g.gru_sequence(ids[0], weights)?;
                reduce(g, y, &w)
            },
            varied,
            FD_STEP,
        )?;
        rows.push(CheckRow::new(name, err));
    }
    Ok(rows)
}

/// The model's spectral block (transform, learned filter, inverse transform,
/// skip, layer norm), differentiated with respect to its input sequence.
/// `adjoint_scale` feeds the graph's diagnostic hook; anything other than 1.0
/// corrupts the analytic gradient and must make the row fail.
fn filter_block_check(seed: u64, adjoint_scale: f64) -> Result<CheckRow> {
    let mut r = rng_for(seed, "filter-block");
    let x = rand_tensor(&mut r, vec![4, 3], -1.0, 1.0);
    let filt = rand_tensor(&mut r, vec![2, 3, 3], -0.8, 0.8);
    let gamma = rand_tensor(&mut r, vec![1, 3], 0.5, 1.5);
    let beta = rand_tensor(&mut r, vec![1, 3], -0.5, 0.5);
    let w = rand_tensor(&mut r, vec![4, 3], 0.5, 1.5);
    let config = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
    let err = grad_check(
        |g, xid| {
            g.set_fft_adjoint_scale(adjoint_scale);
            let fid = g.constant(filt.clone());
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let y = filter_block(g, xid, fid, ga, be, true, &config, &mut Mode::Eval)?;
            reduce(g, y, &w)
        },
        &x,
        FD_STEP,
    )?;
    Ok(CheckRow::new("filter_block", err))
}

fn toy_model(seed: u64) -> Result<(Parameters, ModelConfig, EncodedSession)> {
    let config = ModelConfig {
        embedding_size: 8,
        hidden_size: 8,
        heads: 2,
        transformer_blocks: 1,
        filter_blocks_attr: 1,
        filter_blocks_exam: 1,
        dropout: 0.0,
        combination: Combination::ExpMul,
        p_max: 3,
        prob_clamp: 1e-6,
        enable_filter_attr: true,
        enable_filter_exam: true,
        recurrent_cell: RecurrentCell::Gru,
        max_session_docs: 6,
    };
    let doc = |url_id: u64, pos: u32, click: u8| DocumentImpression { url_id, pos, click };
    let raw = vec![Session {
        session_id: 1,
        queries: vec![
            QueryRecord {
                query_id: 11,
                docs: vec![doc(101, 1, 0), doc(102, 2, 1), doc(103, 3, 0)],
            },
            QueryRecord {
                query_id: 12,
                docs: vec![doc(102, 1, 1), doc(104, 2, 0), doc(101, 3, 1)],
            },
        ],
    }];
    let vocab = Vocabulary::build(&raw, 1);
    let sessions = encode_sessions(&raw, &vocab);
    let params = Parameters::init(&config, &vocab, derive_seed(seed, "toy-model"))?;
    Ok((params, config, sessions.into_iter().next().expect("one session built above")))
}

fn eval_loss(params: &Parameters, config: &ModelConfig, session: &EncodedSession) -> Result<f64> {
    let fwd = forward_session(params, config, session, &mut Mode::Eval)?;
    Ok(fwd.graph.value(fwd.loss).data()[0])
}

/// Central differences over every parameter coordinate of a small two-query
/// model against the gradients from one backward pass of the session loss.
///
/// A coordinate can land so close to a gating corner (the feed-forward
/// rectifier) that differencing crosses it and averages the two linear
/// pieces, measuring nothing about the backward pass. Each coordinate is
/// therefore compared against the central, forward, and backward estimates,
/// keeping the best match (exactly one side stays clean of a single corner);
/// when the three estimates disagree among themselves, the loss is not
/// locally linear at the probe scale and the coordinate is skipped. Skips
/// never use the analytic value, so they cannot hide a wrong gradient, and
/// more than 2% of them fails the run outright.
pub fn model_check(seed: u64) -> Result<CheckRow> {
    let (mut params, config, session) = toy_model(seed)?;
    let (_, grads) = session_gradients(&params, &config, &session, &mut Mode::Eval)?;
    let total_docs = session.doc_count();
    let base = eval_loss(&params, &config, &session)?;

    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    let mut checked = 0usize;
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        let shape = params.tensor(i).shape().to_vec();
        let inert: Box<dyn Fn(usize) -> bool> = if name.ends_with(".w") && name.contains(".filter") {
            let lengths = if name.starts_with("attr.") {
                vec![4]
            } else {
                (1..=total_docs).collect()
            };
            Box::new(spectral_inert_mask(&shape, lengths))
        } else {
            Box::new(|_| false)
        };

        let analytic = grads.get(i).to_vec();
        for j in 0..analytic.len() {
            if inert(j) {
                if analytic[j] != 0.0 {
                    return Err(Error::Numeric(format!(
                        "{} coordinate {} is pinned by the real transform but has gradient {}",
                        name, j, analytic[j]
                    )));
                }
                continue;
            }
            params.update(i, |d| d[j] += FD_STEP)?;
            let plus = eval_loss(&params, &config, &session)?;
            params.update(i, |d| d[j] -= 2.0 * FD_STEP)?;
            let minus = eval_loss(&params, &config, &session)?;
            params.update(i, |d| d[j] += FD_STEP)?;
            checked += 1;
            let n_c = (plus - minus) / (2.0 * FD_STEP);
            let n_f = (plus - base) / FD_STEP;
            let n_b = (base - minus) / FD_STEP;
            let spread = (n_c.max(n_f).max(n_b)) - (n_c.min(n_f).min(n_b));
            if spread > 1e-4 && spread > 0.02 * n_c.abs().max(n_f.abs()).max(n_b.abs()) {
                skipped += 1;
                continue;
            }
            let a = analytic[j];
            let err_vs = |numeric: f64| {
                (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8)
            };
            worst = worst.max(err_vs(n_c).min(err_vs(n_f)).min(err_vs(n_b)));
        }
    }
    if skipped * 50 > checked {
        return Err(Error::Numeric(format!(
            "{} of {} coordinates sit on gating corners; the instance is too kinked to difference",
            skipped, checked
        )));
    }
    Ok(CheckRow::new("full_model", worst))
}
