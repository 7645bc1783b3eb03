//! Central-difference validation of analytic gradients.

use super::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compare the graph gradient of a scalar function against central finite
/// differences, returning the worst relative error over all coordinates:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` must rebuild the same computation every call (it runs once for the
/// analytic pass and twice per coordinate for the numeric pass), so anything
/// stochastic such as a training-mode dropout layer must hold its mask fixed
/// or be left out of the function under test.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, TensorId) -> Result<TensorId>,
{
    grad_check_masked(f, x, step, |_| false)
}

/// Like [`grad_check`] but skips coordinates flagged by `inert`. For those
/// the analytic gradient must be exactly zero instead (the flag is meant for
/// coordinates the forward pass cannot see, such as the imaginary part of a
/// real spectrum's DC bin or a frozen padding row, where central differences
/// measure nothing but FFT rounding residue).
pub fn grad_check_masked<F, M>(mut f: F, x: &Tensor, step: f64, inert: M) -> Result<f64>
where
    F: FnMut(&mut Graph, TensorId) -> Result<TensorId>,
    M: Fn(usize) -> bool,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step {} must be positive", step)));
    }
    let mut graph = Graph::new();
    let xid = graph.leaf(x.clone().with_grad());
    let loss = f(&mut graph, xid)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    graph.backward(loss)?;
    let analytic = graph
        .grad(xid)
        .ok_or_else(|| Error::Contract("function under test does not depend on x".into()))?
        .to_vec();

    let eval = |f: &mut F, probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(probe.clone());
        let loss = f(&mut g, id)?;
        g.scalar_value(loss)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..probe.numel() {
        if inert(i) {
            if analytic[i] != 0.0 {
                return Err(Error::Numeric(format!(
                    "coordinate {} is declared inert but has analytic gradient {}",
                    i, analytic[i]
                )));
            }
            continue;
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
