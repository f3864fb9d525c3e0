use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;
pub const DEFAULT_SPARSITY_TOL: f64 = 1e-8;

fn as_matrix(m: &Tensor<f64>, op: &str) -> Result<(usize, usize)> {
    match m.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Input(format!("{op} expects a matrix, got shape {s:?}"))),
    }
}

/// Number of singular values above `rel_tol · σ_max`.
///
/// Singular values come from a Golub-Kahan SVD of the matrix itself, so
/// values near `rel_tol · σ_max` keep full double precision.
pub fn numerical_rank(m: &Tensor<f64>, rel_tol: f64) -> Result<usize> {
    let (r, c) = as_matrix(m, "numerical_rank")?;
    if !m.is_finite() {
        return Err(Error::Input("numerical_rank: matrix has non-finite entries".into()));
    }
    if r == 0 || c == 0 {
        return Ok(0);
    }
    let sv = DMatrix::from_row_slice(r, c, m.data()).singular_values_unordered();
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}

/// Fraction of entries with `|x| ≤ abs_tol`.
pub fn sparsity(m: &Tensor<f64>, abs_tol: f64) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::Input("sparsity: matrix has non-finite entries".into()));
    }
    if m.numel() == 0 {
        return Ok(0.0);
    }
    let zeros = m.data().iter().filter(|x| x.abs() <= abs_tol).count();
    Ok(zeros as f64 / m.numel() as f64)
}

/// Shannon entropy in nats of each row after normalizing it to sum 1.
/// All-zero rows have entropy 0, and `0 · ln 0` counts as 0.
pub fn entropy_rows(a: &Tensor<f64>) -> Result<Vec<f64>> {
    let (_, c) = as_matrix(a, "entropy_rows")?;
    if let Some(bad) = a.data().iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::Input(format!("entropy_rows: entry {bad} is negative or not finite")));
    }
    if c == 0 {
        return Ok(vec![0.0; a.shape()[0]]);
    }
    Ok(a
        .data()
        .chunks(c)
        .map(|row| {
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return 0.0;
            }
            -row
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| {
                    let p = x / sum;
                    p * p.ln()
                })
                .sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Tensor::eye(4), DEFAULT_RANK_TOL).unwrap(), 4);
        assert_eq!(numerical_rank(&Tensor::zeros(&[3, 3]), DEFAULT_RANK_TOL).unwrap(), 0);
        let outer = Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(numerical_rank(&outer, DEFAULT_RANK_TOL).unwrap(), 1);
        let bad = Tensor::from_f64(&[1, 2], &[1.0, f64::NAN]).unwrap();
        assert!(numerical_rank(&bad, DEFAULT_RANK_TOL).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&Tensor::zeros(&[3, 3]), DEFAULT_SPARSITY_TOL).unwrap(), 1.0);
        assert_eq!(sparsity(&Tensor::eye(4), DEFAULT_SPARSITY_TOL).unwrap(), 12.0 / 16.0);
    }

    #[test]
    fn entropy_examples() {
        let a = Tensor::from_f64(
            &[3, 4],
            &[0.25, 0.25, 0.25, 0.25, 0.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0],
        )
        .unwrap();
        let h = entropy_rows(&a).unwrap();
        assert!((h[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(h[1], 0.0);
        assert!((h[2] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(entropy_rows(&Tensor::zeros(&[1, 3])).unwrap(), vec![0.0]);
        assert!(entropy_rows(&Tensor::from_f64(&[1, 2], &[-0.1, 1.0]).unwrap()).is_err());
    }
}
