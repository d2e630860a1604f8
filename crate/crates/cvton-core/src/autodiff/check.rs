//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds a scalar-valued computation with perturbed inputs and
//! compares central differences `(f(x+ε) − f(x−ε)) / 2ε` against the gradients
//! produced by [`Tape::backward`]. It is used both by the per-op unit tests
//! and by the integration suite, which runs it over every training loss.
//!
//! Large tensors are checked at a deterministic random subset of elements —
//! each numeric derivative costs two full forward passes, so dense checks of
//! convolution inputs would dominate test time without adding coverage.

use ndarray::ArrayD;
use rand::Rng;

use super::{Tape, Var};
use crate::rng::rng_stream;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Number of scalar derivatives compared.
    pub checked: usize,
    /// Worst relative disagreement observed.
    pub max_rel: f64,
    /// Where the worst disagreement occurred: (input index, flat element).
    pub worst_at: (usize, usize),
    /// Analytic and numeric values at the worst element.
    pub worst_pair: (f64, f64),
}

impl GradCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

/// Relative disagreement with a floor on the comparison scale: gradients
/// smaller than the floor are compared absolutely (against the floor), so
/// that finite-difference noise on near-zero derivatives — where central
/// differences lose all significant digits — does not register as error,
/// while a genuinely missing gradient (analytic 0, numeric large) still does.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / scale
}

/// Check `build`'s gradients w.r.t. every input, at up to
/// `samples_per_input` elements each (all elements if the tensor is smaller).
///
/// `build` must be a pure function of the leaf values: it is re-invoked many
/// times with perturbed inputs and must produce a 0-d (scalar) root.
pub fn sampled_gradcheck(
    inputs: &[ArrayD<f64>],
    samples_per_input: usize,
    eps: f64,
    seed: u64,
    build: &dyn Fn(&Tape, &[Var]) -> Var,
) -> GradCheck {
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let root = build(&tape, &vars);
        tape.scalar_value(root)
    };

    // Analytic gradients, one backward pass.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&tape, &vars);
    assert_eq!(
        tape.shape(root),
        Vec::<usize>::new(),
        "gradcheck root must be scalar"
    );
    let grads = tape.backward(root);

    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst_at: (0, 0),
        worst_pair: (0.0, 0.0),
    };

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ii])
            .unwrap_or_else(|| panic!("no gradient reached input {ii}"));
        let len = input.len();
        let elems: Vec<usize> = if len <= samples_per_input {
            (0..len).collect()
        } else {
            let mut rng = rng_stream(seed, ii as u64);
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < samples_per_input {
                seen.insert(rng.random_range(0..len));
            }
            seen.into_iter().collect()
        };

        for e in elems {
            let orig = work[ii].as_slice_mut().unwrap()[e];
            work[ii].as_slice_mut().unwrap()[e] = orig + eps;
            let f_plus = eval(&work);
            work[ii].as_slice_mut().unwrap()[e] = orig - eps;
            let f_minus = eval(&work);
            work[ii].as_slice_mut().unwrap()[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[e];
            let rel = rel_err(a, numeric);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst_at = (ii, e);
                out.worst_pair = (a, numeric);
            }
        }
    }
    out
}

/// Dense variant: every element of every input.
pub fn full_gradcheck(
    inputs: &[ArrayD<f64>],
    eps: f64,
    build: &dyn Fn(&Tape, &[Var]) -> Var,
) -> GradCheck {
    sampled_gradcheck(inputs, usize::MAX, eps, 0, build)
}
