use ndarray::Array2;

use super::softmax::log_softmax;
use super::{check_finite_matrix, check_tau, LossValueAndGrad};
use crate::error::{Error, Result};

/// `Σ_rows KL(softmax(S_dense/τ) || softmax(S_late/τ))`.
///
/// The late-interaction distribution acts as a fixed teacher: the returned
/// gradient is with respect to `s_dense` only.
pub fn kl_distillation(
    s_dense: &Array2<f64>,
    s_late: &Array2<f64>,
    tau: f64,
) -> Result<LossValueAndGrad> {
    check_tau(tau)?;
    if s_dense.dim() != s_late.dim() {
        return Err(Error::invalid(format!(
            "distillation shape mismatch: dense {:?} vs late {:?}",
            s_dense.dim(),
            s_late.dim()
        )));
    }
    check_finite_matrix(s_dense, "dense similarity matrix")?;
    check_finite_matrix(s_late, "late similarity matrix")?;

    let mut value = 0.0;
    let mut grad = Array2::zeros(s_dense.raw_dim());
    for (r, (drow, lrow)) in s_dense.rows().into_iter().zip(s_late.rows()).enumerate() {
        let lp = log_softmax(drow, tau);
        let lq = log_softmax(lrow, tau);
        let row_kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        value += row_kl;
        for c in 0..lp.len() {
            grad[[r, c]] = lp[c].exp() * ((lp[c] - lq[c]) - row_kl) / tau;
        }
    }
    Ok(LossValueAndGrad { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_inputs_are_zero() {
        let s = array![[0.3, -0.2, 0.8], [0.1, 0.1, 0.5]];
        let l = kl_distillation(&s, &s, 0.02).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn two_point_closed_form() {
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = (p - (1.0 - p)) * (p / (1.0 - p)).ln();
        let l = kl_distillation(&array![[1.0, 0.0]], &array![[0.0, 1.0]], 1.0).unwrap();
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        assert!(kl_distillation(&array![[1.0, 0.0]], &array![[1.0], [0.0]], 1.0).is_err());
    }
}
