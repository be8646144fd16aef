use super::{Real, Tensor};

/// Central-difference estimate `(f(p+h) - f(p-h)) / 2h` for every coordinate
/// of every parameter tensor. `loss` must be deterministic.
pub fn finite_difference_gradient<F>(
    mut loss: F,
    params: &[Tensor<f64>],
    step: f64,
) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Vec::with_capacity(params[p].numel());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = loss(&work);
            work[p].data_mut()[i] = orig - step;
            let down = loss(&work);
            work[p].data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * step));
        }
        out.push(Tensor::new(params[p].shape().to_vec(), grad).expect("same shape"));
    }
    out
}

/// Norm-wise relative error `max|a-b| / max(max|a|, max|b|)`; zero when both
/// tensors are zero.
pub fn max_relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error of mismatched shapes");
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.f64(), y.f64());
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::sigmoid;

    #[test]
    fn square_at_three() {
        let p = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let g = finite_difference_gradient(|v| v[0].item().powi(2), &[p], 1e-5);
        assert!((g[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = Tensor::from_f64(vec![3], &[1.0, -4.0, 2.5]).unwrap();
        let g = finite_difference_gradient(|_| 7.25, &[p], 1e-5);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bce_slope_is_sigmoid() {
        let p = Tensor::from_f64(vec![1], &[-2.0]).unwrap();
        let g = finite_difference_gradient(
            |v| {
                let l = v[0].item();
                l.max(0.0) + (-l.abs()).exp().ln_1p()
            },
            &[p],
            1e-5,
        );
        // sigmoid(-2) = 0.11920292202211755
        assert!((g[0].item() - 0.119_202_922_022_117_55).abs() < 1e-9);
        assert!((sigmoid(-2.0f64) - 0.119_202_922_022_117_55).abs() < 1e-15);
    }
}
