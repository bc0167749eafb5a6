use ndarray::ArrayD;

use super::{NodeId, Tape};

/// Central finite-difference gradient of a scalar-valued graph with respect
/// to one input, step 1e-4 scaled by the coordinate's magnitude.
pub fn numerical_grad<F>(build: &F, inputs: &[ArrayD<f64>], which: usize) -> ArrayD<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.scalar(out)
    };

    let mut grad = ArrayD::<f64>::zeros(inputs[which].raw_dim());
    let mut work = inputs.to_vec();
    for idx in 0..inputs[which].len() {
        let x0 = inputs[which].as_slice().unwrap()[idx];
        let h = 1e-4 * x0.abs().max(1.0);

        work[which].as_slice_mut().unwrap()[idx] = x0 + h;
        let fp = eval(&work);
        work[which].as_slice_mut().unwrap()[idx] = x0 - h;
        let fm = eval(&work);
        work[which].as_slice_mut().unwrap()[idx] = x0;

        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences over all inputs; returns the worst relative error.
///
/// The error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-2),
/// i.e. relative with an absolute floor so near-zero gradients do not
/// amplify finite-difference noise.
pub fn grad_check<F>(build: F, inputs: &[ArrayD<f64>]) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out);

    let mut worst = 0.0f64;
    for (which, &id) in ids.iter().enumerate() {
        let analytic = &grads[id];
        let numeric = numerical_grad(&build, inputs, which);
        for (&a, &n) in analytic.iter().zip(numeric.iter()) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}
