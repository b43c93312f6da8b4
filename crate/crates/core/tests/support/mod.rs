//! Shared test oracles.

use mtkit_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient check. `forward` must rebuild the
/// graph from the parameter tensors on every call. A gradient entry passes
/// when the absolute error is below 1e-8 or the relative error is below
/// 1e-4.
pub fn check_gradients(params: &[(String, Tensor)], forward: &dyn Fn() -> Tensor) {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward().expect("backward");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, p)| p.grad().unwrap_or_else(|| panic!("no gradient for {name}")))
        .collect();
    for ((name, p), grads) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let original = p.with_data(|d| d[i]);
            p.update_data(|d| d[i] = original + FD_STEP);
            let plus = forward().item();
            p.update_data(|d| d[i] = original - FD_STEP);
            let minus = forward().item();
            p.update_data(|d| d[i] = original);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = grads[i];
            let abs_err = (a - fd).abs();
            let rel_err = abs_err / a.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
            assert!(
                abs_err < 1e-8 || rel_err < 1e-4,
                "{name}[{i}]: analytic {a}, finite-diff {fd}, rel err {rel_err:.3e}"
            );
        }
    }
}
