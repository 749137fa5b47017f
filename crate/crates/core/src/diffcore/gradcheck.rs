use super::{DiffError, Graph, NodeId, Tensor};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares reverse-mode adjoints of a scalar function against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` and returns the largest
/// coordinate-wise relative error.
///
/// `build` receives a graph and the input leaf bound to `point`, and returns
/// the scalar output node.
pub fn gradient_check<F>(build: F, point: &Tensor, h: f64) -> Result<f64, DiffError>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let out = build(&mut g, x)?;
    check_graph(&mut g, out, &[x], h)
}

/// Finite-difference check of `loss` with respect to every listed leaf of an
/// already evaluated graph. The leaves are restored afterwards.
pub fn check_graph(g: &mut Graph, loss: NodeId, leaves: &[NodeId], h: f64) -> Result<f64, DiffError> {
    if h <= 0.0 || !h.is_finite() {
        return Err(DiffError::GradCheck(format!("step must be positive, got {h}")));
    }
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let base = g
            .value(leaf)
            .cloned()
            .ok_or(DiffError::Unbound(leaf.index()))?;
        let zeros = Tensor::zeros(base.shape());
        let analytic = grads.get(leaf).unwrap_or(&zeros);
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe.data_mut()[i] = base.data()[i] + h;
            g.forward(&[(leaf, probe.clone())])?;
            let fp = g.val(loss).item();
            probe.data_mut()[i] = base.data()[i] - h;
            g.forward(&[(leaf, probe)])?;
            let fm = g.val(loss).item();
            if !fp.is_finite() || !fm.is_finite() {
                return Err(DiffError::GradCheck(format!(
                    "non-finite function value at coordinate {i}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
        g.forward(&[(leaf, base)])?;
    }
    Ok(worst)
}
