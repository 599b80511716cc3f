use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn central_difference<F>(f: F, x: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / max(1, |a_i|)`
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let input = g.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut g, input)?;
    g.backward(out)?;
    let analytic = g
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = central_difference(
        |probe| {
            let mut g = Graph::new();
            let input = g.constant(probe);
            let out = f(&mut g, input)?;
            Ok(g.scalar_value(out))
        },
        x,
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
