use super::param::Param;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of a scalar loss through `s = softmax(v)` given `ds`.
pub fn softmax_backward(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
    s.iter().zip(ds).map(|(si, di)| si * (di - dot)).collect()
}

/// `y = Wᵀx + b` with `W` of shape D×K.
pub fn linear_forward(x: &[f64], w: &Tensor2, b: &[f64]) -> Result<Vec<f64>> {
    let (d, k) = w.shape();
    if x.len() != d || b.len() != k {
        return Err(Error::shape(format!(
            "linear: x {} / W {d}x{k} / b {}",
            x.len(),
            b.len()
        )));
    }
    let mut y = b.to_vec();
    w.matvec_t_acc(x, &mut y);
    Ok(y)
}

/// Backward of [`linear_forward`]: accumulates `∂L/∂W`, `∂L/∂b` and returns `∂L/∂x`.
pub fn linear_backward(
    x: &[f64],
    w: &Tensor2,
    dy: &[f64],
    grad_w: &mut Tensor2,
    grad_b: &mut [f64],
) -> Result<Vec<f64>> {
    let (d, k) = w.shape();
    if x.len() != d || dy.len() != k || grad_w.shape() != (d, k) || grad_b.len() != k {
        return Err(Error::shape("linear backward".to_string()));
    }
    grad_w.outer_acc(x, dy);
    for (g, d) in grad_b.iter_mut().zip(dy) {
        *g += d;
    }
    let mut dx = vec![0.0; d];
    w.matvec_acc(dy, &mut dx);
    Ok(dx)
}

/// Adds `λ1·Σ|w| + λ2·Σw²` to the loss and its gradient to `param.grad`.
/// `sign(0) = 0`.
pub fn l1_l2_penalty(param: &mut Param, l1: f64, l2: f64) -> f64 {
    if l1 == 0.0 && l2 == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    let value = param.value.data();
    let grad = param.grad.data_mut();
    for (g, &w) in grad.iter_mut().zip(value) {
        let sign = if w > 0.0 {
            1.0
        } else if w < 0.0 {
            -1.0
        } else {
            0.0
        };
        penalty += l1 * w.abs() + l2 * w * w;
        *g += l1 * sign + 2.0 * l2 * w;
    }
    penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_cases() {
        let u = softmax(&[2.0; 4]);
        assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let s = softmax(&[0.0, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let big = softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let w = Tensor2::identity(3);
        let x = [1.0, -2.0, 0.5];
        assert_eq!(linear_forward(&x, &w, &[0.0; 3]).unwrap(), x.to_vec());
        let w = Tensor2::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(linear_forward(&[0.0; 3], &w, &[0.5, -1.0]).unwrap(), vec![0.5, -1.0]);
        assert!(linear_forward(&[0.0; 2], &w, &[0.5, -1.0]).is_err());
    }

    #[test]
    fn penalty_hand_values() {
        let mut p = Param::new(Tensor2::from_vec(1, 1, vec![2.0]).unwrap());
        let pen = l1_l2_penalty(&mut p, 1.0, 1.0);
        assert_eq!(pen, 6.0);
        assert_eq!(p.grad.get(0, 0), 5.0);

        let mut z = Param::zeros(2, 3);
        assert_eq!(l1_l2_penalty(&mut z, 1.0, 1.0), 0.0);
        assert!(z.grad.data().iter().all(|g| *g == 0.0));

        let mut q = Param::new(Tensor2::from_vec(1, 2, vec![1.0, -3.0]).unwrap());
        assert_eq!(l1_l2_penalty(&mut q, 0.0, 0.0), 0.0);
        assert_eq!(q.grad.data(), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..30),
            c in -100.0f64..100.0,
        ) {
            let s = softmax(&v);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            for (a, b) in s.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
