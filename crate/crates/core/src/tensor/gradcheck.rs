use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor of [`relative_error`]. Central differences in `f64`
/// carry absolute noise near 1e-11, so smaller gradients cannot be checked
/// to a relative tolerance and are compared absolutely instead.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|fd − ad| / max(GRAD_FLOOR, |fd| + |ad|)`
pub fn relative_error(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / (fd.abs() + ad.abs()).max(GRAD_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` at every coordinate.
///
/// Returns the largest [`relative_error`] seen.
pub fn finite_diff_check<F>(x: &Tensor, eps: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    finite_diff_check_many(std::slice::from_ref(x), eps, |g, vars| f(g, vars[0]))
}

/// Worst coordinate of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input tensor index and flat coordinate of the worst error.
    pub worst: (usize, usize),
    pub finite_diff: f64,
    pub analytic: f64,
}

/// [`finite_diff_check`] over several input tensors at once.
pub fn finite_diff_check_many<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    Ok(finite_diff_report(inputs, eps, f)?.max_rel_err)
}

/// [`finite_diff_check_many`] that also says where the worst error is.
pub fn finite_diff_report<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for ci in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[ci];
            probe[ti].data_mut()[ci] = x0 + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ci] = x0 - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ci] = x0;
            let fd = (plus - minus) / (2.0 * eps);
            let rel = relative_error(fd, grads[ci]);
            if rel > worst.max_rel_err {
                worst = GradCheckReport {
                    max_rel_err: rel,
                    worst: (ti, ci),
                    finite_diff: fd,
                    analytic: grads[ci],
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let err = finite_diff_check(&x, 1e-5, |g, v| Ok(g.sum(v))).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(&x, 1e-5, |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn detects_small_gradient_bug() {
        // f = Σx² + 1e-3·Σ x·stop(x): the tape misses half of the second
        // term, an error of 1e-3·x against a true gradient of 2.002·x.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Tensor::uniform(&[2, 3], 0.5, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v += 1.5);
        let err = finite_diff_check(&x, 1e-5, |g, v| {
            let sq = g.mul(v, v)?;
            let frozen = g.leaf(g.value(v).clone());
            let leak = g.mul(v, frozen)?;
            let leak = g.scale(leak, 1e-3);
            let f = g.add(sq, leak)?;
            Ok(g.sum(f))
        })
        .unwrap();
        assert!(err > 2e-4, "{err}");
        assert_eq!(relative_error(3e-10, -2e-10), 5e-4);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(&x, 0.0, |g, v| Ok(g.sum(v))).is_err());
    }
}
