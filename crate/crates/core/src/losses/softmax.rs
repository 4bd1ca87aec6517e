use ndarray::{Array2, ArrayView1};

use super::{check_finite_matrix, check_tau, LossValueAndGrad};
use crate::error::{Error, Result};

/// Log-softmax of `row / tau`, max-subtracted.
pub(crate) fn log_softmax(row: ArrayView1<f64>, tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let lse = max + row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v / tau - lse).collect()
}

/// `ln softmax(S_i / tau)_j`.
pub fn log_softmax_row(s: &Array2<f64>, tau: f64, i: usize, j: usize) -> Result<f64> {
    check_tau(tau)?;
    if i >= s.nrows() || j >= s.ncols() {
        return Err(Error::invalid(format!(
            "index ({i}, {j}) outside {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    let row = s.row(i);
    if !row.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("similarity row {i}")));
    }
    Ok(log_softmax(row, tau)[j])
}

/// In-batch InfoNCE over a square matrix whose diagonal holds the positives.
pub fn info_nce(s: &Array2<f64>, tau: f64) -> Result<LossValueAndGrad> {
    if s.nrows() != s.ncols() {
        return Err(Error::invalid(format!(
            "InfoNCE needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    info_nce_plus(s, tau)
}

/// Row-wise InfoNCE where row `r`'s positive sits in column `r` and every
/// other column is a negative. With extra hard-negative columns appended
/// this is the hard-negative variant; on a square matrix it is plain
/// InfoNCE.
pub fn info_nce_plus(s: &Array2<f64>, tau: f64) -> Result<LossValueAndGrad> {
    check_tau(tau)?;
    if s.nrows() == 0 {
        return Err(Error::invalid("InfoNCE on an empty batch"));
    }
    if s.ncols() < s.nrows() {
        return Err(Error::invalid(format!(
            "InfoNCE needs at least as many columns as rows, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    check_finite_matrix(s, "similarity matrix")?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(s.raw_dim());
    for (r, row) in s.rows().into_iter().enumerate() {
        let logp = log_softmax(row, tau);
        value -= logp[r];
        let mut g = grad.row_mut(r);
        for (c, lp) in logp.iter().enumerate() {
            g[c] = lp.exp() / tau;
        }
        g[r] -= 1.0 / tau;
    }
    Ok(LossValueAndGrad { value, grad })
}
