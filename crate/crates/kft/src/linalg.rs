//! Thin wrappers over nalgebra for the small dense factorizations the KL
//! terms and sampling identities need.

use crate::error::{KftError, Result};
use crate::tensor::DenseTensor;
use nalgebra::DMatrix;

pub fn to_dmatrix(t: &DenseTensor) -> Result<DMatrix<f64>> {
    if t.order() != 2 {
        return Err(KftError::ShapeMismatch(format!(
            "expected a matrix, got order {}",
            t.order()
        )));
    }
    Ok(DMatrix::from_row_slice(t.extent(0), t.extent(1), t.data()))
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> DenseTensor {
    let (r, c) = (m.nrows(), m.ncols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    DenseTensor::new(vec![r, c], data).expect("dimensions agree")
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(a: &DenseTensor) -> Result<DenseTensor> {
    let m = to_dmatrix(a)?;
    let chol = m
        .cholesky()
        .ok_or_else(|| KftError::NotPositiveDefinite(format!("{}x{}", a.extent(0), a.extent(1))))?;
    Ok(from_dmatrix(&chol.l()))
}

/// log det of a symmetric positive definite matrix via Cholesky.
pub fn logdet_pd(a: &DenseTensor) -> Result<f64> {
    let m = to_dmatrix(a)?;
    let chol = m
        .cholesky()
        .ok_or_else(|| KftError::NotPositiveDefinite(format!("{}x{}", a.extent(0), a.extent(1))))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn inverse_pd(a: &DenseTensor) -> Result<DenseTensor> {
    let m = to_dmatrix(a)?;
    let chol = m
        .cholesky()
        .ok_or_else(|| KftError::NotPositiveDefinite(format!("{}x{}", a.extent(0), a.extent(1))))?;
    Ok(from_dmatrix(&chol.inverse()))
}

/// Explicit Kronecker product of two matrices.
pub fn kron(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.order() != 2 || b.order() != 2 {
        return Err(KftError::ShapeMismatch("kron needs matrices".into()));
    }
    let (ra, ca) = (a.extent(0), a.extent(1));
    let (rb, cb) = (b.extent(0), b.extent(1));
    let mut out = DenseTensor::zeros(&[ra * rb, ca * cb]);
    for i in 0..ra {
        for j in 0..ca {
            let av = a.get(&[i, j]);
            for k in 0..rb {
                for l in 0..cb {
                    out.set(&[i * rb + k, j * cb + l], av * b.get(&[k, l]));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = DenseTensor::from_rows(&[
            vec![4.0, 2.0, 0.6],
            vec![2.0, 2.0, 0.4],
            vec![0.6, 0.4, 1.0],
        ])
        .unwrap();
        let l = cholesky_lower(&a).unwrap();
        let back = l.matmul(&l.transpose().unwrap()).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_kron_identity() {
        // (L_A ⊗ L_B)(L_A ⊗ L_B)ᵀ = A ⊗ B for PD A, B
        let a = DenseTensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let b = DenseTensor::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let la = cholesky_lower(&a).unwrap();
        let lb = cholesky_lower(&b).unwrap();
        let lk = kron(&la, &lb).unwrap();
        let lhs = lk.matmul(&lk.transpose().unwrap()).unwrap();
        let rhs = kron(&a, &b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
