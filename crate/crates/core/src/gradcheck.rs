//! Central-difference gradient checking for graphs built in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{ParamStore, Tensor};

/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest relative error seen.
    pub worst: f64,
    /// Parameter name and flat index of the worst element.
    pub worst_at: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare reverse-mode gradients of a scalar loss with central differences
/// for every element of every parameter in `store`. `loss` must build a
/// fresh graph each call.
pub fn check_params<F>(store: &mut ParamStore<f64>, eps: f64, loss: F) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (g, l) = loss(store)?;
    g.backward(l, store)?;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut report = GradReport {
        worst: 0.0,
        worst_at: None,
        checked: 0,
    };
    for name in names {
        let analytic = store.grad(&name)?.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut probe = |delta: f64| -> Result<f64> {
                let p = store.get_mut(&name)?;
                let original = p.value().data()[i];
                p.value_mut().data_mut()[i] = original + delta;
                let (g, l) = loss(store)?;
                let value = g.scalar(l);
                store.get_mut(&name)?.value_mut().data_mut()[i] = original;
                value
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.worst || report.worst_at.is_none() {
                report.worst = report.worst.max(err);
                report.worst_at = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Check `op` on the given inputs through the scalar `sum(op(x) * r)`, with
/// `r` drawn from `seed`.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, eps: f64, op: F) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    for (name, t) in names.iter().zip(inputs) {
        store.insert(name.clone(), t.clone())?;
    }
    let forward = |store: &ParamStore<f64>, g: &Graph<f64>| -> Result<Var> {
        let vars = names.iter().map(|n| g.param(store, n)).collect::<Result<Vec<_>>>()?;
        op(g, &vars)
    };
    let shape = {
        let g = Graph::new();
        let out = forward(&store, &g)?;
        g.shape(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    check_params(&mut store, eps, |s| {
        let g = Graph::new();
        let out = forward(s, &g)?;
        let w = g.constant(weights.clone());
        let l = g.sum(g.mul(out, w)?);
        Ok((g, l))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_op(&[x.clone(), x], 1, 1e-3, |g, v| g.mul(v[0], v[1])).unwrap();
        assert!(r.worst < 1e-9);
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence, so reverse mode reports half the slope
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = check_op(&[x], 3, 1e-3, |g, v| g.mul(g.detach(v[0]), v[0])).unwrap();
        assert!(r.worst > 0.4);
    }
}
