use super::{Graph, Tensor, TensorError, Var};

/// `relu(x·w1 + b1)·w2 + b2` on a recorded graph.
pub fn mlp_graph(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, TensorError> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// Two-layer ReLU MLP applied row-wise to a `t×C` token matrix.
pub fn mlp_forward(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let vars = [x, w1, b1, w2, b2].map(|t| g.leaf(t.clone()));
    let out = mlp_graph(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4])?;
    Ok(g.take(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use crate::tensor::finite_diff_check_many;

    #[test]
    fn zero_weights_give_zero() {
        let x = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        let out = mlp_forward(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[1, 2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_passes_nonnegative_input() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, 0.0]]).unwrap();
        let out = mlp_forward(&x, &Tensor::eye(2), &Tensor::zeros(&[1, 2]), &Tensor::eye(2), &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_for(8, &["mlp"]);
        let inputs = [
            Tensor::uniform(&[5, 4], 1.0, &mut rng),
            Tensor::uniform(&[4, 6], 0.8, &mut rng),
            Tensor::uniform(&[1, 6], 0.3, &mut rng),
            Tensor::uniform(&[6, 4], 0.8, &mut rng),
            Tensor::uniform(&[1, 4], 0.3, &mut rng),
        ];
        let err = finite_diff_check_many(&inputs, 1e-6, |g, v| {
            let o = mlp_graph(g, v[0], v[1], v[2], v[3], v[4])?;
            let o = g.tanh(o);
            Ok(g.sum(o))
        })
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
