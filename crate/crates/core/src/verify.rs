//! Numeric cross-checks used by tests.
//!
//! The gradient oracle here is deliberately independent of the autodiff
//! tape: it only perturbs parameter values and re-runs a caller-supplied
//! forward pass, so agreement between the two is meaningful evidence.

use crate::optim::ParamStore;

/// Central-difference gradient of `f` with respect to every element of
/// parameter `name`. The store is restored exactly before returning.
pub fn oracle_gradient(
    store: &mut ParamStore,
    name: &str,
    h: f32,
    mut f: impl FnMut(&ParamStore) -> f32,
) -> Vec<f64> {
    let idx = store.index_of(name);
    let n = store.tensor(idx).len();
    let mut out = vec![0.0f64; n];
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let orig = store.tensor(idx).data[i];
        store.tensor_mut(idx).data[i] = orig + h;
        let fp = f(store) as f64;
        store.tensor_mut(idx).data[i] = orig - h;
        let fm = f(store) as f64;
        store.tensor_mut(idx).data[i] = orig;
        out[i] = (fp - fm) / (2.0 * h as f64);
    }
    out
}

/// Assert elementwise |analytic - numeric| <= atol + rtol * |numeric|,
/// reporting the first offending element.
pub fn assert_grad_close(analytic: &[f32], numeric: &[f64], atol: f64, rtol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        let tol = atol + rtol * n.abs();
        assert!(
            (a - n).abs() <= tol,
            "{what}[{i}]: analytic {a} vs numeric {n} (tol {tol})"
        );
    }
}
