//! Central-difference gradient verification.
//!
//! Every differentiable primitive (and any composite loss) can be checked by
//! rebuilding its graph under elementwise perturbations and comparing the
//! numeric quotient against the tape's reverse-mode gradients. All checks run
//! at f64; the tolerances below are far outside f64 truncation error for the
//! step sizes used here.

use crate::{Graph, Real, TensorData, Var};

/// Outcome of one gradient check. `max_rel_err` is the worst elementwise
/// `|analytic - numeric| / max(1, |analytic| + |numeric|)` over all inputs,
/// which behaves as an absolute error for small gradients and a relative one
/// for large gradients.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index, analytic, numeric) for the worst element.
    pub worst: (usize, usize, f64, f64),
    pub evaluated: usize,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks the gradient of a scalar-valued graph against central differences.
///
/// `build` must construct the loss from the given vars alone (plus any
/// constants it creates internally) and be deterministic, since the graph is
/// rebuilt once per perturbed element.
pub fn check<F>(inputs: &[TensorData<f64>], eps: f64, build: F) -> CheckResult
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.var(t.clone())).collect();
    let loss = build(&mut graph, &vars);
    assert_eq!(graph.value(loss).numel(), 1, "loss must be scalar");
    graph.backward(loss);
    let analytic: Vec<TensorData<f64>> = vars.iter().map(|v| graph.grad(*v)).collect();

    let eval = |perturbed: &[TensorData<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vs);
        g.value(l).item()
    };

    let mut result = CheckResult {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        evaluated: 0,
    };
    let mut work: Vec<TensorData<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let fp = eval(&work);
            work[ti].data_mut()[ei] = orig - eps;
            let fm = eval(&work);
            work[ti].data_mut()[ei] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / 1.0_f64.max(a.abs() + numeric.abs());
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
                result.worst = (ti, ei, a, numeric);
            }
            result.max_abs_err = result.max_abs_err.max(abs);
            result.evaluated += 1;
        }
    }
    result
}

/// Convenience for tests: panics with a readable message when the check fails.
pub fn assert_grads_close<F>(inputs: &[TensorData<f64>], eps: f64, tol: f64, name: &str, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let r = check(inputs, eps, build);
    assert!(
        r.passes(tol),
        "{name}: gradient check failed, max_rel_err={:.3e} (tol {tol:.1e}), \
         worst input {} elem {}: analytic {:.9e} vs numeric {:.9e}",
        r.max_rel_err,
        r.worst.0,
        r.worst.1,
        r.worst.2,
        r.worst.3,
    );
}

/// Fills a tensor with reproducible, well-conditioned values in (-1, 1),
/// avoiding the kinks of |x| and relu at zero.
pub fn seeded<T: Real>(shape: Vec<usize>, seed: u64) -> TensorData<T> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        // splitmix64 step
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        let u = (z >> 11) as f64 / (1u64 << 53) as f64; // [0, 1)
        let v = 2.0 * u - 1.0;
        // Keep magnitudes off the relu/abs kink.
        let v = if v.abs() < 0.05 { v + 0.1 } else { v };
        data.push(T::from_f64(v));
    }
    TensorData::new(shape, data)
}
