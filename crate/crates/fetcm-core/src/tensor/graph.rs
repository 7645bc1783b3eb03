//! Reverse-mode automatic differentiation over a per-evaluation tape.
//!
//! A `Graph` owns every tensor produced during one forward evaluation.
//! Nodes are appended in execution order, which is already a topological
//! order, so backward is a single reverse sweep. Parameters enter as shared
//! leaves (`Arc`) so large tables are never copied per evaluation.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fft::{irfft, irfft_adjoint, rfft, rfft_adjoint, spectrum_bins, spectrum_filter_mul};
use super::{ComplexSpectrum, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// GRU weight handles for [`Graph::gru_sequence`]. Matrices act on row
/// vectors: `w*` are `[in, hidden]`, `u*` are `[hidden, hidden]`, biases and
/// the initial state hold `hidden` values.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub wz: TensorId,
    pub uz: TensorId,
    pub bz: TensorId,
    pub wr: TensorId,
    pub ur: TensorId,
    pub br: TensorId,
    pub wh: TensorId,
    pub uh: TensorId,
    pub bh: TensorId,
    pub h0: TensorId,
}

#[derive(Debug)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    hc: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    MulScalar { x: TensorId, s: TensorId },
    PowScalar { x: TensorId, s: TensorId },
    AddRowBias { x: TensorId, b: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Tanh { x: TensorId },
    Ln { x: TensorId },
    SoftmaxRows { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Dropout { x: TensorId, mask: Vec<f64> },
    Embedding { table: TensorId, ids: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { a: TensorId, b: TensorId },
    Reshape { x: TensorId },
    Rfft { x: TensorId },
    SpectrumMul { x: TensorId, w: TensorId },
    SpectrumSlice { x: TensorId },
    Irfft { x: TensorId, n: usize },
    Gru { x: TensorId, w: GruWeights, cache: GruCache },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    SumAll { x: TensorId },
}

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    requires: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    fft_adjoint_scale: f64,
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `da += dc * b^T` for `dc [m,n]`, `b [k,n]`, `da [m,k]`.
fn acc_matmul_bt(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let crow = &dc[i * n..(i + 1) * n];
        let orow = &mut da[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (cv, bv) in crow.iter().zip(brow) {
                acc += cv * bv;
            }
            orow[kk] += acc;
        }
    }
}

/// `db += a^T * dc` for `a [m,k]`, `dc [m,n]`, `db [k,n]`.
fn acc_matmul_at(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &dc[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let drow = &mut db[kk * n..(kk + 1) * n];
            for (dv, &cv) in drow.iter_mut().zip(crow) {
                *dv += av * cv;
            }
        }
    }
}

fn layer_norm_row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false, fft_adjoint_scale: 1.0 }
    }

    /// Diagnostic hook: scales the gradient flowing through `rfft` nodes so a
    /// negative-control run can prove the gradient checker catches a broken
    /// spectral adjoint. Leave at 1.0 everywhere else.
    pub fn set_fft_adjoint_scale(&mut self, s: f64) {
        self.fft_adjoint_scale = s;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        self.nodes[id.0].value.tensor()
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let t = self.value(id);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let requires = t.requires_grad();
        self.push(Value::Owned(t), Op::Leaf, requires)
    }

    pub fn shared_leaf(&mut self, t: Arc<Tensor>) -> TensorId {
        let requires = t.requires_grad();
        self.push(Value::Shared(t), Op::Leaf, requires)
    }

    /// Leaf that never receives a gradient regardless of its flag.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    fn push(&mut self, value: Value, op: Op, requires: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool) -> Result<TensorId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Value::Owned(t), op, requires))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::Dim(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let req = self.requires(&[a, b]);
        self.out(vec![m, n], data, Op::MatMul { a, b }, req)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Dim(format!("transpose expects a 2-d tensor, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let req = self.requires(&[x]);
        self.out(vec![c, r], data, Op::Transpose { x }, req)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "{} expects equal shapes, got {:?} and {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(&[a, b]);
        self.out(shape, data, Op::Add { a, b }, req)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(&[a, b]);
        self.out(shape, data, Op::Mul { a, b }, req)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "div")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x / y).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(&[a, b]);
        self.out(shape, data, Op::Div { a, b }, req)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Scale { x, c }, req)
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::AddConst { x }, req)
    }

    /// Broadcast multiply by a single-element tensor.
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dim(format!(
                "mul_scalar wants a one-element scale, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x, s]);
        self.out(shape, data, Op::MulScalar { x, s }, req)
    }

    /// Elementwise `x^s` for strictly positive `x` and a one-element exponent.
    /// `powf(x, 1.0)` is exactly `x`, so a unit exponent is a true identity.
    pub fn pow_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dim(format!(
                "pow_scalar wants a one-element exponent, got {:?}",
                self.value(s).shape()
            )));
        }
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("pow_scalar needs a strictly positive base".into()));
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.powf(sv)).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x, s]);
        self.out(shape, data, Op::PowScalar { x, s }, req)
    }

    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if self.value(b).numel() != c {
            return Err(Error::Dim(format!(
                "bias of {} values does not fit rows of {} columns",
                self.value(b).numel(),
                c
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bias[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x, b]);
        self.out(shape, data, Op::AddRowBias { x, b }, req)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> =
            self.value(x).data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Sigmoid { x }, req)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Relu { x }, req)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Tanh { x }, req)
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln needs strictly positive inputs".into()));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Ln { x }, req)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if c == 0 {
            return Err(Error::Dim("softmax over empty rows".into()));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::SoftmaxRows { x }, req)
    }

    /// Row-wise layer normalization with biased variance and learnable
    /// per-column scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dim(format!(
                "layer_norm scale/shift want {} values, got {} and {}",
                c,
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let mut data = vec![0.0; r * c];
        {
            let g = self.value(gamma).data();
            let bb = self.value(beta).data();
            for i in 0..r {
                let row = &self.value(x).data()[i * c..(i + 1) * c];
                let (mean, inv) = layer_norm_row_stats(row, eps);
                for j in 0..c {
                    data[i * c + j] = g[j] * (row[j] - mean) * inv + bb[j];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x, gamma, beta]);
        self.out(shape, data, Op::LayerNorm { x, gamma, beta, eps }, req)
    }

    /// Inverted dropout. Always draws one uniform per element so random
    /// streams stay aligned across configurations; use eval-mode forward
    /// paths (which skip the node entirely) to disable it.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", p)));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() >= p { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> =
            self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Dropout { x, mask }, req)
    }

    /// Gather rows of `table` at `ids`; gradient scatter-adds per row.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Dim(format!(
                "embedding table must be 2-d, got {:?}",
                t.shape()
            )));
        }
        let (v, l) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * l);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding id {} out of range for table of {} rows",
                    id, v
                )));
            }
            data.extend_from_slice(&t.data()[id * l..(id + 1) * l]);
        }
        let req = self.requires(&[table]);
        self.out(vec![ids.len(), l], data, Op::Embedding { table, ids: ids.to_vec() }, req)
    }

    /// Stack 2-d parts vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(Error::Dim(format!(
                    "concat_rows column mismatch: {} vs {}",
                    self.value(p).cols(),
                    c
                )));
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let req = self.requires(parts);
        self.out(vec![rows, c], data, Op::ConcatRows { parts: parts.to_vec() }, req)
    }

    /// Concatenate two 2-d tensors along columns; row counts must match.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = (self.value(a).rows(), self.value(a).cols());
        let (rb, cb) = (self.value(b).rows(), self.value(b).cols());
        if ra != rb {
            return Err(Error::Dim(format!("concat_cols row mismatch: {} vs {}", ra, rb)));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&self.value(a).data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.value(b).data()[i * cb..(i + 1) * cb]);
        }
        let req = self.requires(&[a, b]);
        self.out(vec![ra, ca + cb], data, Op::ConcatCols { a, b }, req)
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let data = self.value(x).data().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Reshape { x }, req)
    }

    /// Real FFT of an `[n, d]` node into a packed `[2, bins, d]` spectrum.
    pub fn rfft_node(&mut self, x: TensorId) -> Result<TensorId> {
        let spec = rfft(self.value(x))?;
        let t = spec.to_tensor();
        let req = self.requires(&[x]);
        let shape = t.shape().to_vec();
        self.out(shape, t.data().to_vec(), Op::Rfft { x }, req)
    }

    /// Elementwise complex product of two packed spectra.
    pub fn spectrum_mul(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let sx = ComplexSpectrum::from_tensor(self.value(x))?;
        let sw = ComplexSpectrum::from_tensor(self.value(w))?;
        let sy = spectrum_filter_mul(&sx, &sw)?;
        let t = sy.to_tensor();
        let req = self.requires(&[x, w]);
        let shape = t.shape().to_vec();
        self.out(shape, t.data().to_vec(), Op::SpectrumMul { x, w }, req)
    }

    /// Keep the leading `bins` frequency rows of a packed spectrum.
    pub fn spectrum_slice(&mut self, x: TensorId, bins: usize) -> Result<TensorId> {
        let s = ComplexSpectrum::from_tensor(self.value(x))?;
        if bins > s.bins {
            return Err(Error::Dim(format!(
                "cannot slice {} bins out of a {}-bin spectrum",
                bins, s.bins
            )));
        }
        let take = bins * s.dims;
        let mut out = ComplexSpectrum::zeros(bins, s.dims);
        out.re.copy_from_slice(&s.re[..take]);
        out.im.copy_from_slice(&s.im[..take]);
        let t = out.to_tensor();
        let req = self.requires(&[x]);
        let shape = t.shape().to_vec();
        self.out(shape, t.data().to_vec(), Op::SpectrumSlice { x }, req)
    }

    /// Inverse real FFT of a packed spectrum back to an `[n, d]` node.
    pub fn irfft_node(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        let spec = ComplexSpectrum::from_tensor(self.value(x))?;
        let t = irfft(&spec, n)?;
        let req = self.requires(&[x]);
        let shape = t.shape().to_vec();
        self.out(shape, t.data().to_vec(), Op::Irfft { x, n }, req)
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo < hi) {
            return Err(Error::Contract(format!("clamp bounds [{}, {}] are not ordered", lo, hi)));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(&[x]);
        self.out(shape, data, Op::Clamp { x, lo, hi }, req)
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(&[x]);
        self.out(vec![1], vec![s], Op::SumAll { x }, req)
    }

    /// Full GRU over the rows of `x`, differentiable through time.
    /// `z` gates toward the candidate state: `h_t = (1-z)*h_{t-1} + z*hc_t`.
    pub fn gru_sequence(&mut self, x: TensorId, w: GruWeights) -> Result<TensorId> {
        let (t_len, in_dim) = (self.value(x).rows(), self.value(x).cols());
        if t_len == 0 {
            return Err(Error::Dim("gru_sequence over an empty sequence".into()));
        }
        let hidden = self.value(w.h0).numel();
        for (name, id, want) in [
            ("wz", w.wz, (in_dim, hidden)),
            ("wr", w.wr, (in_dim, hidden)),
            ("wh", w.wh, (in_dim, hidden)),
            ("uz", w.uz, (hidden, hidden)),
            ("ur", w.ur, (hidden, hidden)),
            ("uh", w.uh, (hidden, hidden)),
        ] {
            let s = self.value(id).shape();
            if s.len() != 2 || (s[0], s[1]) != want {
                return Err(Error::Dim(format!(
                    "gru weight {} has shape {:?}, wanted {:?}",
                    name, s, want
                )));
            }
        }
        for (name, id) in [("bz", w.bz), ("br", w.br), ("bh", w.bh)] {
            if self.value(id).numel() != hidden {
                return Err(Error::Dim(format!(
                    "gru bias {} has {} values, wanted {}",
                    name,
                    self.value(id).numel(),
                    hidden
                )));
            }
        }

        let mut out = vec![0.0; t_len * hidden];
        let mut cz = vec![0.0; t_len * hidden];
        let mut cr = vec![0.0; t_len * hidden];
        let mut chc = vec![0.0; t_len * hidden];
        {
            let xv = self.value(x).data();
            let (wz, uz, bz) = (self.value(w.wz).data(), self.value(w.uz).data(), self.value(w.bz).data());
            let (wr, ur, br) = (self.value(w.wr).data(), self.value(w.ur).data(), self.value(w.br).data());
            let (wh, uh, bh) = (self.value(w.wh).data(), self.value(w.uh).data(), self.value(w.bh).data());
            let mut h_prev = self.value(w.h0).data().to_vec();

            let mut az = vec![0.0; hidden];
            let mut ar = vec![0.0; hidden];
            let mut ah = vec![0.0; hidden];
            let mut rh = vec![0.0; hidden];
            for t in 0..t_len {
                let xrow = &xv[t * in_dim..(t + 1) * in_dim];
                az.copy_from_slice(bz);
                ar.copy_from_slice(br);
                for (i, &xi) in xrow.iter().enumerate() {
                    let (wzr, wrr) = (&wz[i * hidden..(i + 1) * hidden], &wr[i * hidden..(i + 1) * hidden]);
                    for j in 0..hidden {
                        az[j] += xi * wzr[j];
                        ar[j] += xi * wrr[j];
                    }
                }
                for (k, &hk) in h_prev.iter().enumerate() {
                    let (uzr, urr) = (&uz[k * hidden..(k + 1) * hidden], &ur[k * hidden..(k + 1) * hidden]);
                    for j in 0..hidden {
                        az[j] += hk * uzr[j];
                        ar[j] += hk * urr[j];
                    }
                }
                for j in 0..hidden {
                    cz[t * hidden + j] = 1.0 / (1.0 + (-az[j]).exp());
                    cr[t * hidden + j] = 1.0 / (1.0 + (-ar[j]).exp());
                    rh[j] = cr[t * hidden + j] * h_prev[j];
                }
                ah.copy_from_slice(bh);
                for (i, &xi) in xrow.iter().enumerate() {
                    let whr = &wh[i * hidden..(i + 1) * hidden];
                    for j in 0..hidden {
                        ah[j] += xi * whr[j];
                    }
                }
                for (k, &rk) in rh.iter().enumerate() {
                    let uhr = &uh[k * hidden..(k + 1) * hidden];
                    for j in 0..hidden {
                        ah[j] += rk * uhr[j];
                    }
                }
                for j in 0..hidden {
                    let hc = ah[j].tanh();
                    chc[t * hidden + j] = hc;
                    let z = cz[t * hidden + j];
                    let h = (1.0 - z) * h_prev[j] + z * hc;
                    out[t * hidden + j] = h;
                }
                h_prev.copy_from_slice(&out[t * hidden..(t + 1) * hidden]);
            }
        }
        let req = self.requires(&[x, w.wz, w.uz, w.bz, w.wr, w.ur, w.br, w.wh, w.uh, w.bh, w.h0]);
        self.out(
            vec![t_len, hidden],
            out,
            Op::Gru { x, w, cache: GruCache { z: cz, r: cr, hc: chc } },
            req,
        )
    }

    /// Reverse sweep from a scalar loss. Every node on a gradient path gets
    /// its `grad` populated; gradients accumulate across fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; build a fresh graph or reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clear gradients so the graph can run backward again (diagnostics only).
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn acc<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires {
            return None;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(id).numel()]);
        }
        slot.as_mut()
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    acc_matmul_bt(dy, bv, m, k, n, da);
                }
                if let Some(db) = self.acc(grads, *b) {
                    acc_matmul_at(av, dy, m, k, n, db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(d) = self.acc(grads, id) {
                        for (g, v) in d.iter_mut().zip(dy) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..dy.len() {
                        db[i] += dy[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..dy.len() {
                        da[i] += dy[i] / bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..dy.len() {
                        db[i] -= dy[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, v) in dx.iter_mut().zip(dy) {
                        *g += v * c;
                    }
                }
            }
            Op::AddConst { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, v) in dx.iter_mut().zip(dy) {
                        *g += v;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, v) in dx.iter_mut().zip(dy) {
                        *g += v * sv;
                    }
                }
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += dy.iter().zip(xv).map(|(d, x)| d * x).sum::<f64>();
                }
            }
            Op::PowScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                let yv = self.value(TensorId(idx)).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * sv * yv[i] / xv[i];
                    }
                }
                if let Some(ds) = self.acc(grads, *s) {
                    ds[0] += dy
                        .iter()
                        .zip(yv)
                        .zip(xv)
                        .map(|((d, y), x)| d * y * x.ln())
                        .sum::<f64>();
                }
            }
            Op::AddRowBias { x, b } => {
                let c = self.value(*b).numel();
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, v) in dx.iter_mut().zip(dy) {
                        *g += v;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (i, v) in dy.iter().enumerate() {
                        db[i % c] += v;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yv = self.value(TensorId(idx)).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        if xv[i] > 0.0 {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                let yv = self.value(TensorId(idx)).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
            }
            Op::Ln { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] / xv[i];
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let yv = self.value(TensorId(idx)).data();
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let d = &dy[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let cf = c as f64;
                if let Some(dg) = self.acc(grads, *gamma) {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let (mean, inv) = layer_norm_row_stats(row, *eps);
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * (row[j] - mean) * inv;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += dy[i * c + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let (mean, inv) = layer_norm_row_stats(row, *eps);
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv;
                            let g = gv[j] * dy[i * c + j];
                            sum_g += g;
                            sum_gx += g * xh;
                        }
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv;
                            let g = gv[j] * dy[i * c + j];
                            dx[i * c + j] += inv * (g - sum_g / cf - xh * sum_gx / cf);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * mask[i];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let l = self.value(*table).shape()[1];
                if let Some(dt) = self.acc(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..l {
                            dt[id * l + j] += dy[row * l + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(dp) = self.acc(grads, p) {
                        for i in 0..len {
                            dp[i] += dy[offset + i];
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = (self.value(*a).rows(), self.value(*a).cols());
                let cb = self.value(*b).cols();
                let w = ca + cb;
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..ca {
                            da[i * ca + j] += dy[i * w + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..r {
                        for j in 0..cb {
                            db[i * cb + j] += dy[i * w + ca + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, v) in dx.iter_mut().zip(dy) {
                        *g += v;
                    }
                }
            }
            Op::Rfft { x } => {
                let n = self.value(*x).shape()[0];
                let d = self.value(*x).shape()[1];
                let bins = spectrum_bins(n);
                let g = ComplexSpectrum {
                    bins,
                    dims: d,
                    re: dy[..bins * d].to_vec(),
                    im: dy[bins * d..].to_vec(),
                };
                let back = rfft_adjoint(&g, n).expect("adjoint shape fixed by construction");
                let scale = self.fft_adjoint_scale;
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, v) in dx.iter_mut().zip(back.data()) {
                        *g += v * scale;
                    }
                }
            }
            Op::SpectrumMul { x, w } => {
                let sx = ComplexSpectrum::from_tensor(self.value(*x)).expect("packed by construction");
                let sw = ComplexSpectrum::from_tensor(self.value(*w)).expect("packed by construction");
                let plane = sx.bins * sx.dims;
                let (dy_re, dy_im) = dy.split_at(plane);
                if let Some(dx) = self.acc(grads, *x) {
                    let (dx_re, dx_im) = dx.split_at_mut(plane);
                    for i in 0..plane {
                        dx_re[i] += dy_re[i] * sw.re[i] + dy_im[i] * sw.im[i];
                        dx_im[i] += -dy_re[i] * sw.im[i] + dy_im[i] * sw.re[i];
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    let (dw_re, dw_im) = dw.split_at_mut(plane);
                    for i in 0..plane {
                        dw_re[i] += dy_re[i] * sx.re[i] + dy_im[i] * sx.im[i];
                        dw_im[i] += -dy_re[i] * sx.im[i] + dy_im[i] * sx.re[i];
                    }
                }
            }
            Op::SpectrumSlice { x } => {
                let src = ComplexSpectrum::from_tensor(self.value(*x)).expect("packed by construction");
                let out_plane = dy.len() / 2;
                let src_plane = src.bins * src.dims;
                if let Some(dx) = self.acc(grads, *x) {
                    let (dx_re, dx_im) = dx.split_at_mut(src_plane);
                    for i in 0..out_plane {
                        dx_re[i] += dy[i];
                        dx_im[i] += dy[out_plane + i];
                    }
                }
            }
            Op::Irfft { x, n } => {
                let d = self.value(TensorId(idx)).shape()[1];
                let dy_t = Tensor::new(vec![*n, d], dy.to_vec()).expect("grad matches output");
                let back = irfft_adjoint(&dy_t).expect("adjoint shape fixed by construction");
                let plane = back.bins * back.dims;
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..plane {
                        dx[i] += back.re[i];
                        dx[plane + i] += back.im[i];
                    }
                }
            }
            Op::Gru { x, w, cache } => {
                self.gru_backward(idx, *x, w, cache, dy, grads);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dy.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for g in dx.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
        }
    }

    fn gru_backward(
        &self,
        idx: usize,
        x: TensorId,
        w: &GruWeights,
        cache: &GruCache,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let out = self.value(TensorId(idx)).data();
        let (t_len, hidden) = (
            self.value(TensorId(idx)).shape()[0],
            self.value(TensorId(idx)).shape()[1],
        );
        let in_dim = self.value(x).cols();
        let xv = self.value(x).data();
        let h0 = self.value(w.h0).data();
        let (wz, uz) = (self.value(w.wz).data(), self.value(w.uz).data());
        let (wr, ur) = (self.value(w.wr).data(), self.value(w.ur).data());
        let (wh, uh) = (self.value(w.wh).data(), self.value(w.uh).data());

        let mut d_wz = vec![0.0; in_dim * hidden];
        let mut d_wr = vec![0.0; in_dim * hidden];
        let mut d_wh = vec![0.0; in_dim * hidden];
        let mut d_uz = vec![0.0; hidden * hidden];
        let mut d_ur = vec![0.0; hidden * hidden];
        let mut d_uh = vec![0.0; hidden * hidden];
        let mut d_bz = vec![0.0; hidden];
        let mut d_br = vec![0.0; hidden];
        let mut d_bh = vec![0.0; hidden];
        let mut d_x = vec![0.0; t_len * in_dim];

        let mut carry = vec![0.0; hidden];
        let mut daz = vec![0.0; hidden];
        let mut dar = vec![0.0; hidden];
        let mut dah = vec![0.0; hidden];
        let mut drh = vec![0.0; hidden];
        for t in (0..t_len).rev() {
            let h_prev: &[f64] = if t == 0 { h0 } else { &out[(t - 1) * hidden..t * hidden] };
            let z = &cache.z[t * hidden..(t + 1) * hidden];
            let r = &cache.r[t * hidden..(t + 1) * hidden];
            let hc = &cache.hc[t * hidden..(t + 1) * hidden];
            let xrow = &xv[t * in_dim..(t + 1) * in_dim];

            for j in 0..hidden {
                let g = dy[t * hidden + j] + carry[j];
                daz[j] = g * (hc[j] - h_prev[j]) * z[j] * (1.0 - z[j]);
                dah[j] = g * z[j] * (1.0 - hc[j] * hc[j]);
                // the (1-z) leg of the state update starts the new carry
                carry[j] = g * (1.0 - z[j]);
            }
            // candidate path: dah flows into wh/uh/bh, x, and r (via r*h_prev)
            for k in 0..hidden {
                let uhr = &uh[k * hidden..(k + 1) * hidden];
                let mut acc = 0.0;
                for j in 0..hidden {
                    acc += dah[j] * uhr[j];
                }
                drh[k] = acc;
            }
            for j in 0..hidden {
                dar[j] = drh[j] * h_prev[j] * r[j] * (1.0 - r[j]);
            }
            for j in 0..hidden {
                d_bz[j] += daz[j];
                d_br[j] += dar[j];
                d_bh[j] += dah[j];
            }
            for (i, &xi) in xrow.iter().enumerate() {
                let (dwzr, dwrr, dwhr) = (
                    &mut d_wz[i * hidden..(i + 1) * hidden],
                    &mut d_wr[i * hidden..(i + 1) * hidden],
                    &mut d_wh[i * hidden..(i + 1) * hidden],
                );
                for j in 0..hidden {
                    dwzr[j] += xi * daz[j];
                    dwrr[j] += xi * dar[j];
                    dwhr[j] += xi * dah[j];
                }
            }
            for (k, &hk) in h_prev.iter().enumerate() {
                let (duzr, durr) = (
                    &mut d_uz[k * hidden..(k + 1) * hidden],
                    &mut d_ur[k * hidden..(k + 1) * hidden],
                );
                for j in 0..hidden {
                    duzr[j] += hk * daz[j];
                    durr[j] += hk * dar[j];
                }
            }
            // uh sees the gated state r*h_prev as its left operand
            for k in 0..hidden {
                let rh = cache.r[t * hidden + k] * h_prev[k];
                let duhr = &mut d_uh[k * hidden..(k + 1) * hidden];
                for j in 0..hidden {
                    duhr[j] += rh * dah[j];
                }
            }
            let dxrow = &mut d_x[t * in_dim..(t + 1) * in_dim];
            for i in 0..in_dim {
                let (wzr, wrr, whr) = (
                    &wz[i * hidden..(i + 1) * hidden],
                    &wr[i * hidden..(i + 1) * hidden],
                    &wh[i * hidden..(i + 1) * hidden],
                );
                let mut acc = 0.0;
                for j in 0..hidden {
                    acc += daz[j] * wzr[j] + dar[j] * wrr[j] + dah[j] * whr[j];
                }
                dxrow[i] += acc;
            }
            for k in 0..hidden {
                let (uzr, urr) = (&uz[k * hidden..(k + 1) * hidden], &ur[k * hidden..(k + 1) * hidden]);
                let mut acc = 0.0;
                for j in 0..hidden {
                    acc += daz[j] * uzr[j] + dar[j] * urr[j];
                }
                // h_prev also feeds the candidate through the reset gate
                carry[k] += acc + drh[k] * r[k];
            }
        }

        if let Some(d) = self.acc(grads, x) {
            for (g, v) in d.iter_mut().zip(&d_x) {
                *g += v;
            }
        }
        for (id, src) in [
            (w.wz, &d_wz),
            (w.uz, &d_uz),
            (w.wr, &d_wr),
            (w.ur, &d_ur),
            (w.wh, &d_wh),
            (w.uh, &d_uh),
        ] {
            if let Some(d) = self.acc(grads, id) {
                for (g, v) in d.iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        for (id, src) in [(w.bz, &d_bz), (w.br, &d_br), (w.bh, &d_bh)] {
            if let Some(d) = self.acc(grads, id) {
                for (g, v) in d.iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        if let Some(d) = self.acc(grads, w.h0) {
            for (g, v) in d.iter_mut().zip(&carry) {
                *g += v;
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_masked};
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![7.0, 8.0, 9.0]).unwrap();
        let mut g = Graph::new();
        let (ia, ib) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let c = g.matmul(ia, ib).unwrap();
        // reference: plain i-k accumulation against the single output column
        let mut want = vec![0.0; 2];
        for i in 0..2 {
            for k in 0..3 {
                want[i] += a.data()[i * 3 + k] * b.data()[k];
            }
        }
        assert_eq!(g.value(c).data(), want.as_slice());

        let mut r = rng(3);
        for _ in 0..5 {
            let (m, k, n) = (
                r.random_range(1..6usize),
                r.random_range(1..6usize),
                r.random_range(1..6usize),
            );
            let a = rand_tensor(&mut r, vec![m, k], -2.0, 2.0);
            let b = rand_tensor(&mut r, vec![k, n], -2.0, 2.0);
            let mut g = Graph::new();
            let (ia, ib) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let c = g.matmul(ia, ib).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut want = 0.0;
                    for kk in 0..k {
                        want += a.data()[i * k + kk] * b.data()[kk * n + j];
                    }
                    assert!((g.value(c).data()[i * n + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut r = rng(4);
        let x = rand_tensor(&mut r, vec![3, 5], -4.0, 4.0);
        let shifted = Tensor::new(
            vec![3, 5],
            x.data().iter().map(|v| v + 123.0).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let ix = g.leaf(x);
        let is = g.leaf(shifted);
        let y = g.softmax_rows(ix).unwrap();
        let ys = g.softmax_rows(is).unwrap();
        for i in 0..3 {
            let row = &g.value(y).data()[i * 5..(i + 1) * 5];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_a_known_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let gamma = g.leaf(Tensor::filled(vec![3], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_is_scale_invariant() {
        let mut r = rng(5);
        let x = rand_tensor(&mut r, vec![2, 6], -1.0, 1.0);
        let doubled =
            Tensor::new(vec![2, 6], x.data().iter().map(|v| v * 2.0).collect()).unwrap();
        let mut g = Graph::new();
        let gamma = g.leaf(rand_tensor(&mut r, vec![6], 0.5, 1.5));
        let beta = g.leaf(rand_tensor(&mut r, vec![6], -0.5, 0.5));
        let ix = g.leaf(x);
        let id = g.leaf(doubled);
        let y1 = g.layer_norm(ix, gamma, beta, 1e-12).unwrap();
        let y2 = g.layer_norm(id, gamma, beta, 1e-12).unwrap();
        for (a, b) in g.value(y1).data().iter().zip(g.value(y2).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn activation_fixed_points() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![0.0, -1.0, 0.0]).unwrap());
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        let t = g.tanh(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data()[1], 0.0);
        assert_eq!(g.value(t).data()[2], 0.0);
    }

    #[test]
    fn dropout_with_p_zero_is_identity_and_mean_is_preserved() {
        let mut r = rng(6);
        let x = Tensor::filled(vec![10, 10], 1.0);
        let mut g = Graph::new();
        let ix = g.leaf(x);
        let y = g.dropout(ix, 0.0, &mut r).unwrap();
        assert_eq!(g.value(y).data(), g.value(ix).data());

        // inverted scaling keeps the expectation at 1
        let mut total = 0.0;
        let mut count = 0.0;
        for _ in 0..200 {
            let mut g = Graph::new();
            let ix = g.leaf(Tensor::filled(vec![10, 10], 1.0));
            let y = g.dropout(ix, 0.5, &mut r).unwrap();
            total += g.value(y).data().iter().sum::<f64>();
            count += 100.0;
        }
        assert!((total / count - 1.0).abs() < 0.02);
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let mut r = rng(7);
        let mut g = Graph::new();
        let ix = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(g.dropout(ix, 1.0, &mut r).is_err());
    }

    #[test]
    fn embedding_matches_one_hot_matmul_and_scatters_gradients() {
        let mut r = rng(8);
        let table = rand_tensor(&mut r, vec![5, 3], -1.0, 1.0).with_grad();
        let ids = [2usize, 0, 2];
        let mut g = Graph::new();
        let it = g.leaf(table.clone());
        let e = g.embedding(it, &ids).unwrap();
        // one-hot reference
        let mut onehot = Tensor::zeros(vec![3, 5]);
        for (row, &id) in ids.iter().enumerate() {
            onehot.data_mut()[row * 5 + id] = 1.0;
        }
        let io = g.constant(onehot);
        let itc = g.constant(table.clone());
        let want = g.matmul(io, itc).unwrap();
        assert_eq!(g.value(e).data(), g.value(want).data());

        let s = g.sum_all(e).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(it).unwrap();
        // row 2 was looked up twice, row 0 once, others never
        for j in 0..3 {
            assert_eq!(grad[6 + j], 2.0);
            assert_eq!(grad[j], 1.0);
            assert_eq!(grad[3 + j], 0.0);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.embedding(t, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap().with_grad());
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_contract_violations() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn grad_check_agrees_on_smooth_function() {
        let mut r = rng(9);
        let x = rand_tensor(&mut r, vec![10], -2.0, 2.0);
        let err = grad_check(
            |g, x| {
                let t = g.tanh(x)?;
                g.sum_all(t)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut r = rng(10);
        let step = 1e-6;
        let tol = 1e-7;

        let x = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut r, vec![4, 2], -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let wid = g.constant(w.clone());
                let y = g.matmul(x, wid)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &x,
            step,
        )
        .unwrap();
        assert!(err < tol, "matmul lhs rel err {}", err);

        let err = grad_check(
            |g, w| {
                let xid = g.constant(x.clone());
                let y = g.matmul(xid, w)?;
                let t = g.sigmoid(y)?;
                g.sum_all(t)
            },
            &w,
            step,
        )
        .unwrap();
        assert!(err < tol, "matmul rhs rel err {}", err);

        let gamma = rand_tensor(&mut r, vec![4], 0.5, 1.5);
        let beta = rand_tensor(&mut r, vec![4], -0.5, 0.5);
        let err = grad_check(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm(x, ga, be, 1e-12)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &x,
            step,
        )
        .unwrap();
        assert!(err < 1e-6, "layer_norm input rel err {}", err);

        let err = grad_check(
            |g, ga| {
                let xid = g.constant(x.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm(xid, ga, be, 1e-12)?;
                g.sum_all(y)
            },
            &gamma,
            step,
        )
        .unwrap();
        assert!(err < tol, "layer_norm gamma rel err {}", err);

        let err = grad_check(
            |g, x| {
                let y = g.softmax_rows(x)?;
                let t = g.mul(y, y)?;
                g.sum_all(t)
            },
            &x,
            step,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax rel err {}", err);

        let b = rand_tensor(&mut r, vec![4], -1.0, 1.0);
        let err = grad_check(
            |g, b| {
                let xid = g.constant(x.clone());
                let y = g.add_row_bias(xid, b)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &b,
            step,
        )
        .unwrap();
        assert!(err < tol, "row bias rel err {}", err);

        let pos = rand_tensor(&mut r, vec![2, 3], 0.1, 0.9);
        let pos2 = rand_tensor(&mut r, vec![2, 3], 0.1, 0.9);
        let err = grad_check(
            |g, a| {
                let b = g.constant(pos2.clone());
                let q = g.div(a, b)?;
                let l = g.ln(q)?;
                g.sum_all(l)
            },
            &pos,
            step,
        )
        .unwrap();
        assert!(err < tol, "div/ln rel err {}", err);

        let lam = Tensor::new(vec![1], vec![1.3]).unwrap();
        let err = grad_check(
            |g, lam| {
                let base = g.constant(pos.clone());
                let p = g.pow_scalar(base, lam)?;
                g.sum_all(p)
            },
            &lam,
            step,
        )
        .unwrap();
        assert!(err < tol, "pow exponent rel err {}", err);

        let err = grad_check(
            |g, base| {
                let lam = g.constant(Tensor::new(vec![1], vec![1.3]).unwrap());
                let p = g.pow_scalar(base, lam)?;
                g.sum_all(p)
            },
            &pos,
            step,
        )
        .unwrap();
        assert!(err < tol, "pow base rel err {}", err);

        let other4 = rand_tensor(&mut r, vec![2, 4], -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let other = g.constant(other4.clone());
                let top = g.concat_rows(&[x, other])?;
                let wide = g.concat_cols(top, top)?;
                let t = g.tanh(wide)?;
                g.sum_all(t)
            },
            &x.clone(),
            step,
        )
        .unwrap();
        assert!(err < tol, "concat rel err {}", err);

        let err = grad_check(
            |g, x| {
                let y = g.reshape(x, vec![1, 12])?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &x,
            step,
        )
        .unwrap();
        assert!(err < tol, "reshape rel err {}", err);
    }

    #[test]
    fn spectral_chain_round_trips_and_differentiates() {
        let mut r = rng(11);
        // identity filter: irfft(rfft(x) * (1+0i)) == x
        for &n in &[4usize, 6, 7, 10] {
            let x = rand_tensor(&mut r, vec![n, 3], -1.0, 1.0);
            let bins = n / 2 + 1;
            let mut w = Tensor::zeros(vec![2, bins, 3]);
            for i in 0..bins * 3 {
                w.data_mut()[i] = 1.0;
            }
            let mut g = Graph::new();
            let ix = g.leaf(x.clone());
            let iw = g.leaf(w);
            let spec = g.rfft_node(ix).unwrap();
            let filt = g.spectrum_mul(spec, iw).unwrap();
            let back = g.irfft_node(filt, n).unwrap();
            for (a, b) in x.data().iter().zip(g.value(back).data()) {
                assert!((a - b).abs() < 1e-10, "identity filter drift at n={}", n);
            }
        }

        // gradient through rfft -> filter -> irfft, w.r.t. the signal
        let n = 5;
        let x = rand_tensor(&mut r, vec![n, 2], -1.0, 1.0);
        let wt = rand_tensor(&mut r, vec![2, 3, 2], -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let w = g.constant(wt.clone());
                let s = g.rfft_node(x)?;
                let f = g.spectrum_mul(s, w)?;
                let y = g.irfft_node(f, n)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "spectral signal grad rel err {}", err);

        // ... and w.r.t. both planes of the filter itself. The imaginary
        // parts of the DC bin never reach the output (a real signal has
        // im[0] == 0 and the inverse transform drops the DC imaginary), so
        // those coordinates are asserted exactly zero instead of differenced.
        let dc_im = |dims: usize, plane: usize| move |i: usize| i >= plane && i < plane + dims;
        let err = grad_check_masked(
            |g, w| {
                let xid = g.constant(x.clone());
                let s = g.rfft_node(xid)?;
                let f = g.spectrum_mul(s, w)?;
                let y = g.irfft_node(f, n)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &wt,
            1e-6,
            dc_im(2, 3 * 2),
        )
        .unwrap();
        assert!(err < 1e-7, "filter weight grad rel err {}", err);

        // slicing keeps leading bins and routes gradients back into them
        let big = rand_tensor(&mut r, vec![2, 6, 2], -1.0, 1.0);
        let err = grad_check_masked(
            |g, w| {
                let xid = g.constant(x.clone());
                let s = g.rfft_node(xid)?;
                let sliced = g.spectrum_slice(w, 3)?;
                let f = g.spectrum_mul(s, sliced)?;
                let y = g.irfft_node(f, n)?;
                let t = g.tanh(y)?;
                g.sum_all(t)
            },
            &big,
            1e-6,
            dc_im(2, 6 * 2),
        )
        .unwrap();
        assert!(err < 1e-7, "spectrum slice grad rel err {}", err);
    }

    #[test]
    fn gru_with_zero_weights_halves_the_state() {
        let hidden = 4;
        let v = vec![0.8, -0.4, 0.2, 1.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 2]));
        let zeros_ih = Tensor::zeros(vec![2, hidden]);
        let zeros_hh = Tensor::zeros(vec![hidden, hidden]);
        let zeros_b = Tensor::zeros(vec![hidden]);
        let w = GruWeights {
            wz: g.leaf(zeros_ih.clone()),
            uz: g.leaf(zeros_hh.clone()),
            bz: g.leaf(zeros_b.clone()),
            wr: g.leaf(zeros_ih.clone()),
            ur: g.leaf(zeros_hh.clone()),
            br: g.leaf(zeros_b.clone()),
            wh: g.leaf(zeros_ih),
            uh: g.leaf(zeros_hh),
            bh: g.leaf(zeros_b),
            h0: g.leaf(Tensor::new(vec![hidden], v.clone()).unwrap()),
        };
        let h = g.gru_sequence(x, w).unwrap();
        for t in 0..3 {
            let scale = 0.5f64.powi(t as i32 + 1);
            for j in 0..hidden {
                let got = g.value(h).data()[t * hidden + j];
                assert!((got - v[j] * scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut r = rng(12);
        let (t_len, in_dim, hidden) = (3usize, 2usize, 4usize);
        let x = rand_tensor(&mut r, vec![t_len, in_dim], -1.0, 1.0);
        let mats: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, vec![in_dim, hidden], -0.7, 0.7)).collect();
        let umats: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, vec![hidden, hidden], -0.7, 0.7)).collect();
        let biases: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, vec![hidden], -0.3, 0.3)).collect();
        let h0 = rand_tensor(&mut r, vec![hidden], -0.5, 0.5);

        // check each input of the op in turn, summing the last state
        let build = |g: &mut Graph,
                     probe: TensorId,
                     which: usize,
                     x: &Tensor,
                     mats: &[Tensor],
                     umats: &[Tensor],
                     biases: &[Tensor],
                     h0: &Tensor|
         -> Result<TensorId> {
            let pick = |g: &mut Graph, idx: usize, t: &Tensor| {
                if idx == which {
                    probe
                } else {
                    g.constant(t.clone())
                }
            };
            let xid = pick(g, 0, x);
            let w = GruWeights {
                wz: pick(g, 1, &mats[0]),
                uz: pick(g, 2, &umats[0]),
                bz: pick(g, 3, &biases[0]),
                wr: pick(g, 4, &mats[1]),
                ur: pick(g, 5, &umats[1]),
                br: pick(g, 6, &biases[1]),
                wh: pick(g, 7, &mats[2]),
                uh: pick(g, 8, &umats[2]),
                bh: pick(g, 9, &biases[2]),
                h0: pick(g, 10, h0),
            };
            let h = g.gru_sequence(xid, w)?;
            let mut sel = Tensor::zeros(vec![1, t_len]);
            sel.data_mut()[t_len - 1] = 1.0;
            let selid = g.constant(sel);
            let last = g.matmul(selid, h)?;
            g.sum_all(last)
        };

        let probes: Vec<(&str, Tensor)> = vec![
            ("x", x.clone()),
            ("wz", mats[0].clone()),
            ("uz", umats[0].clone()),
            ("bz", biases[0].clone()),
            ("wr", mats[1].clone()),
            ("ur", umats[1].clone()),
            ("br", biases[1].clone()),
            ("wh", mats[2].clone()),
            ("uh", umats[2].clone()),
            ("bh", biases[2].clone()),
            ("h0", h0.clone()),
        ];
        for (which, (name, probe)) in probes.into_iter().enumerate() {
            let err = grad_check(
                |g, p| build(g, p, which, &x, &mats, &umats, &biases, &h0),
                &probe,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "gru {} rel err {}", name, err);
        }
    }

    #[test]
    fn clamp_blocks_gradients_outside_bounds() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 3], vec![0.5, 2.0, -2.0]).unwrap().with_grad(),
        );
        let y = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 1.0, 0.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_leaves_read_through_without_copying() {
        let t = Arc::new(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let mut g = Graph::new();
        let id = g.shared_leaf(Arc::clone(&t));
        let s = g.sum_all(id).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(id).unwrap(), &[1.0; 4]);
    }
}
