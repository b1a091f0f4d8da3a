use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumError;

/// Outcome of comparing taped gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max over parameters of |analytic − numeric| / (|numeric| + 1e-12)
    pub max_rel_error: f64,
}

/// Checks the gradient of a scalar function of a flat parameter vector.
///
/// `f` receives a fresh 64-bit graph and one trainable leaf holding `params`,
/// and returns the scalar output node.
pub fn finite_diff_check<F>(f: F, params: &[f64], step: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumError>,
{
    let eval = |p: &[f64]| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![p.len()], p.to_vec())?)?;
        let out = f(&mut g, x)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(NumError::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![params.len()], params.to_vec())?)?;
    let out = f(&mut g, x)?;
    if !g.value(out).item()?.is_finite() {
        return Err(NumError::NonFinite {
            op: "finite_diff_check",
        });
    }
    let analytic = g.backward(out)?.get_or_zeros(x, params.len());

    let mut numeric = Vec::with_capacity(params.len());
    let mut p = params.to_vec();
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = eval(&p)?;
        p[i] = orig - step;
        let down = eval(&p)?;
        p[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
    })
}
