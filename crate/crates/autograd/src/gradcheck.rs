//! Central finite-difference gradient checking.
//!
//! Only forward evaluation is used to build the numerical estimate, so the check is
//! independent of every backward rule it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` seen.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic and central-difference gradients of `sum(f(inputs) ⊙ weights)`.
///
/// `weights` are fixed random projections of the output (so outputs with a constant
/// sum, like softmax rows, still have informative gradients). `f` must be
/// deterministic: it is re-run for every perturbed element.
pub fn check_gradients<Fun>(inputs: &[Tensor<f64>], weights_seed: u64, h: f64, f: Fun) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<'static, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<(f64, Option<Vec<Tensor<f64>>>, Tensor<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), weights.is_some())).collect();
        let out = f(&mut g, &vars)?;
        let out_val = g.value(out).clone();
        let w = match weights {
            Some(w) => w.clone(),
            None => return Ok((0.0, None, out_val)),
        };
        let wv = g.constant(w.reshaped(out_val.shape())?);
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod)?;
        let l = g.value(loss).item();
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((l, Some(grads), out_val))
    };

    let (_, _, out0) = eval(inputs, None)?;
    let weights = Tensor::new(out0.shape(), lcg_values(weights_seed, out0.numel()))?;
    let (_, analytic, _) = eval(inputs, Some(&weights))?;
    let analytic = analytic.expect("weights given");

    let loss_at = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let o = g.value(out);
        Ok(o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut vals = inputs.to_vec();
    for i in 0..vals.len() {
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + h;
            let lp = loss_at(&vals)?;
            vals[i].data_mut()[j] = orig - h;
            let lm = loss_at(&vals)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
