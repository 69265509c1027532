use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst relative error
/// `|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
///
/// `f` builds the function on a graph, given the node holding `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::InvalidStep(h));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let xv = g.param(x);
    let root = f(&mut g, xv)?;
    let first = g.value(root).item()?;
    let grads = g.backward(root)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(first, second));
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
