//! Finite-difference verification of the reverse pass.
//!
//! The caller supplies input tensors and a closure that rebuilds the same
//! scalar loss graph from any perturbed copy of them. Analytic gradients from
//! one backward pass are compared against central differences element by
//! element. Run this in `f64`: with step `h = 1e-4` the truncation error of
//! the central difference is far below the pass threshold, so disagreement
//! means a wrong backward rule, not noise.

use super::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over elements of |analytic - numeric|
    pub max_abs_err: f64,
    /// max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// number of scalar elements compared
    pub checked: usize,
}

/// Compares analytic gradients of `build`'s scalar output against central
/// differences with step `h`, for every element of every input.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], mut build: F, h: f64) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<T>], build: &mut F| -> (Tape<T>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(
            tape.value(loss).numel(),
            1,
            "grad_check needs a scalar loss"
        );
        (tape, vars, loss)
    };

    let (mut tape, vars, loss) = eval(inputs, &mut build);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let hv = T::from_f64(h);
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for e in 0..inputs[ti].numel() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + hv;
            let (tp, _, lp) = eval(&work, &mut build);
            let fp = tp.value(lp).item().to_f64();
            work[ti].data_mut()[e] = orig - hv;
            let (tm, _, lm) = eval(&work, &mut build);
            let fm = tm.value(lm).item().to_f64();
            work[ti].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[e].to_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }

    GradCheckReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        checked,
    }
}
