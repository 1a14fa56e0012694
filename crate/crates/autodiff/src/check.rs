//! Central finite differences for checking analytic gradients.

use crate::Tensor;

/// Numerical gradient of `f` at `x` with central differences of step `h`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), out)
}

/// `|a - b| / max(|a|, |b|, floor)`, maximized over elements.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
