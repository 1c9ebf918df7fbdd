use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::ops::Op;
use super::tensor::Tensor;
use crate::error::Result;

const PROJECTION_SEED: u64 = 0x005e_ed0f_9a4d;

/// Fixed random weights used to reduce a tensor output to a scalar.
pub fn projection(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ n as u64);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Compares analytic and central-difference gradients of `op` at `inputs`.
///
/// The output is projected onto fixed random weights to obtain a scalar.
/// Returns the maximum over all input entries of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check(op: &Op, inputs: &[Tensor], step: f64) -> Result<f64> {
    grad_check_fn(inputs, step, |g, vars| g.apply(op.clone(), vars))
}

/// Same as [`grad_check`] for an arbitrary graph-building function of the
/// inputs.
pub fn grad_check_fn<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut graph, &vars)?;
    let r = projection(graph.value(out).numel());
    let r_var = graph.constant(Tensor::from_parts(graph.shape(out).to_vec(), r.clone()));
    let prod = graph.mul(out, r_var)?;
    let loss = graph.sum(prod)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            graph
                .grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
