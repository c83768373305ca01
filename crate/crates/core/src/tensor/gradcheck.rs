use super::Tensor;

/// Central-difference estimate of the gradient of `f` at `x`:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every element `i`.
///
/// This is the independent oracle that autograd results are checked against;
/// it only ever evaluates `f`.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps entries that are zero in both from dominating through
/// round-off.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
