use std::collections::HashMap;

use super::tensor::{no_record, Tensor, VjpArgs};
use crate::error::{Error, Result};

/// Reverse-mode gradients of a scalar `loss` with respect to `params`.
///
/// With `create_graph` the adjoint computations are recorded, so the
/// returned gradients are differentiable functions of the leaves and can
/// be fed back into `grad` (double backprop). Without it they are plain
/// constants.
///
/// Params that do not influence the loss get a zero gradient. Params that
/// do not track gradients at all are a contract violation.
pub fn grad(loss: &Tensor, params: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.len() != 1 {
        return Err(Error::shape(format!(
            "grad: loss must be scalar, got [{},{}]",
            loss.rows(),
            loss.cols()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(Error::numeric(format!(
                "grad: parameter {i} does not track gradients"
            )));
        }
    }

    let adjoints = backward(loss, create_graph);

    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let g = adjoints
            .get(&p.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()));
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("grad: non-finite adjoint"));
        }
        out.push(g);
    }
    Ok(out)
}

/// Adjoints for every gradient-tracking node reachable from `loss`.
fn backward(loss: &Tensor, create_graph: bool) -> HashMap<u64, Tensor> {
    // Reachable tracked subgraph. Node ids increase in creation order, so
    // descending id order is a valid reverse-topological order and every
    // consumer is processed before its inputs.
    let mut reach: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if reach.contains_key(&t.id()) {
            continue;
        }
        for p in &t.node.parents {
            if p.requires_grad() && !reach.contains_key(&p.id()) {
                stack.push(p.clone());
            }
        }
        reach.insert(t.id(), t);
    }
    let mut order: Vec<u64> = reach.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut adjoints: HashMap<u64, Tensor> = HashMap::new();
    adjoints.insert(loss.id(), Tensor::ones(loss.rows(), loss.cols()));

    // Without create_graph the adjoint math runs unrecorded: same values,
    // no graph growth.
    let _guard = if create_graph { None } else { Some(no_record()) };

    for id in order {
        let t = &reach[&id];
        let Some(vjp) = t.node.vjp.as_ref() else {
            continue; // leaf
        };
        let Some(g) = adjoints.get(&id).cloned() else {
            continue; // no path back to the loss contributed here
        };
        let needs: Vec<bool> = t.node.parents.iter().map(|p| p.requires_grad()).collect();
        let contribs = vjp(&VjpArgs {
            out: t,
            grad: &g,
            inputs: &t.node.parents,
            needs: &needs,
        });
        debug_assert_eq!(contribs.len(), t.node.parents.len());
        for (p, c) in t.node.parents.iter().zip(contribs) {
            if !p.requires_grad() {
                continue;
            }
            let Some(c) = c else { continue };
            debug_assert_eq!(c.shape(), p.shape(), "adjoint shape mismatch at {}", t.node.op);
            match adjoints.remove(&p.id()) {
                Some(existing) => {
                    adjoints.insert(p.id(), existing.add(&c));
                }
                None => {
                    adjoints.insert(p.id(), c);
                }
            }
        }
    }
    adjoints
}

/// Central-difference gradient of a scalar-valued function. Deliberately
/// independent of the graph machinery: it only evaluates `f` at perturbed
/// constant copies of `x`. No recording guard here: `f` may legitimately
/// build graphs of its own (e.g. an unrolled objective with an inner
/// gradient step).
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::numeric(format!("finite_diff_grad: bad eps {eps}")));
    }
    let base = x.to_vec();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval_scalar(&f, plus, x)?;
        let fm = eval_scalar(&f, minus, x)?;
        out[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(Tensor::constant(out, x.rows(), x.cols()))
}

fn eval_scalar<F>(f: &F, data: Vec<f64>, like: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe = Tensor::constant(data, like.rows(), like.cols());
    let y = f(&probe)?;
    if y.len() != 1 {
        return Err(Error::shape("finite_diff_grad: f must return a scalar"));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::numeric("finite_diff_grad: f returned a non-finite value"));
    }
    Ok(v)
}
