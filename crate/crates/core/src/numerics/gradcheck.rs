//! Central-difference gradient verification.

use super::{Graph, NumericsError, TensorRef};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// `f` must build a deterministic scalar from a single leaf tensor; it is
/// re-run on a fresh graph for every probe. Returns the worst elementwise
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, TensorRef) -> Result<TensorRef, NumericsError>,
{
    assert!(eps > 0.0 && eps <= 1e-3, "eps must be in (0, 1e-3]");
    let analytic = {
        let mut g = Graph::new();
        let xr = g.leaf(shape, x.to_vec(), true);
        let y = f(&mut g, xr)?;
        g.backward(y)?;
        g.grad(xr).expect("leaf requested a gradient").to_vec()
    };
    let eval = |probe: &[f64]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let xr = g.leaf(shape, probe.to_vec(), false);
        let y = f(&mut g, xr)?;
        Ok(g.item(y))
    };
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = eval(&probe)?;
        probe[i] = x[i] - eps;
        let minus = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
