use crate::{AutodiffError, Tape, Tensor, Var};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F, E>(f: &F, x: &Tensor) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let v = tape.value(out);
    match v.item() {
        Some(value) if value.is_finite() => Ok(value),
        Some(_) => Err(AutodiffError::NonFinite {
            context: "grad_check objective".into(),
        }
        .into()),
        None => Err(AutodiffError::NonScalarLoss {
            shape: v.shape().to_vec(),
        }
        .into()),
    }
}

/// Compares backprop against central differences on every component of `x`
/// and returns the worst [`relative_error`].
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_sampled(f, x, eps, &all)
}

/// Like [`grad_check`], restricted to the listed flat component indices.
pub fn grad_check_sampled<F, E>(f: F, x: &Tensor, eps: f64, indices: &[usize]) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let pairs = gradient_pairs(&f, x, eps, indices)?;
    Ok(pairs.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

/// Norm-wise relative error `|a - n| / max(1e-8, |a| + |n|)` over the listed
/// components, treating them as one vector.
///
/// Unlike the per-component error this stays meaningful when some true
/// partials are near zero and central differences only see roundoff.
pub fn grad_check_norm<F, E>(f: F, x: &Tensor, eps: f64, indices: &[usize]) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let pairs = gradient_pairs(&f, x, eps, indices)?;
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut pairs.iter().map(|&(a, n)| a - n));
    let scale = norm(&mut pairs.iter().map(|p| p.0)) + norm(&mut pairs.iter().map(|p| p.1));
    Ok(diff / scale.max(1e-8))
}

/// `(analytic, central difference)` for each listed component.
fn gradient_pairs<F, E>(f: &F, x: &Tensor, eps: f64, indices: &[usize]) -> Result<Vec<(f64, f64)>, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).is_finite() {
        return Err(AutodiffError::NonFinite {
            context: "grad_check objective".into(),
        }
        .into());
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(leaf, x.len());
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFinite {
            context: "grad_check gradient".into(),
        }
        .into());
    }

    let mut pairs = Vec::with_capacity(indices.len());
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        pairs.push((analytic[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(pairs)
}
