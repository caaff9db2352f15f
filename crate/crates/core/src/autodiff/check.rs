use super::{Graph, Tensor, TensorError, Var};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar node. The result is `max_i |a_i − n_i| / (|a_i| + 1e-8)`, where
/// `n_i` uses the fourth-order central stencil so that `eps` near 1e-3 keeps
/// both truncation and round-off well below the tolerances used in tests.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::Parameter(format!("eps must be in (0, 1e-3], got {eps}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let at = |h: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += h;
            eval(t)
        };
        let numeric = (8.0 * (at(eps)? - at(-eps)?) - (at(2.0 * eps)? - at(-2.0 * eps)?)) / (12.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
