//! Central finite-difference gradient oracle.
//!
//! The numeric side never touches the tape's backward pass: it re-evaluates
//! the loss at perturbed parameter values, so it stays independent of the
//! analytic path it checks.

use crate::tensor::Mat;

/// Central finite differences of `f` with step `h`, one matrix per parameter.
pub fn finite_diff_grad(mut f: impl FnMut(&[Mat]) -> f64, params: &[Mat], h: f64) -> Vec<Mat> {
    let mut work: Vec<Mat> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Mat::zeros(params[pi].raw_dim());
        for idx in 0..params[pi].len() {
            let (r, c) = (idx / params[pi].ncols(), idx % params[pi].ncols());
            let orig = work[pi][[r, c]];
            work[pi][[r, c]] = orig + h;
            let up = f(&work);
            work[pi][[r, c]] = orig - h;
            let down = f(&work);
            work[pi][[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Elementwise comparison: passes when `|a - n| <= rtol * max(|a|, |n|)` or
/// `|a - n| <= atol`. Returns (all passed, worst relative error).
pub fn grads_close(analytic: &[Mat], numeric: &[Mat], rtol: f64, atol: f64) -> (bool, f64) {
    let mut ok = true;
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.raw_dim(), n.raw_dim(), "gradient shape mismatch");
        for (av, nv) in a.iter().zip(n.iter()) {
            let diff = (av - nv).abs();
            let scale = av.abs().max(nv.abs());
            if diff > atol {
                let rel = diff / scale.max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                if diff > rtol * scale {
                    ok = false;
                }
            }
        }
    }
    (ok, worst)
}
