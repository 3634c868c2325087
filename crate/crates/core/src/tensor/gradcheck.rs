//! Finite-difference gradient checking.
//!
//! The oracle evaluates the forward computation only, so it stays independent
//! of the backward pass it verifies.

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x`.
///
/// `f` must be a pure function of the flat input vector.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Relative error with an absolute floor of 1: `|a-b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest elementwise [`rel_err`] between an analytic gradient and the
/// central-difference estimate.
pub fn max_grad_rel_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length must match input length");
    let numeric = central_difference(f, x, h);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

use super::{Graph, Tensor, Var};

/// Checks a whole graph construction against finite differences.
///
/// `build` must be a pure function of the leaf values: it receives a fresh
/// graph plus one differentiable leaf per input tensor and returns a scalar
/// loss. Returns the largest [`rel_err`] across every coordinate of every
/// input.
pub fn check_builder(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    h: f64,
) -> f64 {
    let eval = |values: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };

    let mut values: Vec<Tensor> = inputs.to_vec();
    let (mut g, vars, loss) = eval(&values);
    assert_eq!(g.value(loss).numel(), 1, "builder must return a scalar loss");
    g.backward(loss).expect("backward failed during gradient check");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| g.grad(*v).expect("missing gradient").clone())
        .collect();

    let mut worst = 0.0f64;
    for idx in 0..values.len() {
        let base = values[idx].clone();
        let mut f = |x: &[f64]| -> f64 {
            let probe = Tensor::new(base.shape().to_vec(), x.to_vec()).expect("probe tensor");
            values[idx] = probe;
            let (g2, _, l2) = eval(&values);
            g2.value(l2).data()[0]
        };
        let err = max_grad_rel_err(&mut f, base.data(), analytic[idx].data(), h);
        values[idx] = base;
        worst = worst.max(err);
    }
    worst
}
