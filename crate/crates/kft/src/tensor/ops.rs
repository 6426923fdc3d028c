use super::{Axis, DenseTensor};
use crate::error::{KftError, Result};

/// n-mode product of `x` with `u` along `axis`.
///
/// * order-2 `u` of shape (J, I_n) contracts I_n against its columns and the
///   output carries extent J at `axis`;
/// * order-3+ `u` of shape (I_n, K₁, …) contracts I_n against its first axis
///   and splices K₁, … in place of `axis`.
pub fn mode_product(x: &DenseTensor, u: &DenseTensor, axis: Axis) -> Result<DenseTensor> {
    let n = axis.resolve(x.order())?;
    let extent = x.extent(n);
    let left: usize = x.shape()[..n].iter().product();
    let right: usize = x.shape()[n + 1..].iter().product();
    match u.order() {
        2 => {
            let (j, i_n) = (u.extent(0), u.extent(1));
            if i_n != extent {
                return Err(KftError::ShapeMismatch(format!(
                    "mode product along axis {n}: tensor extent {extent} vs matrix columns {i_n}"
                )));
            }
            let mut out_shape = x.shape().to_vec();
            out_shape[n] = j;
            let mut out = vec![0.0; left * j * right];
            let xd = x.data();
            let ud = u.data();
            for l in 0..left {
                for jj in 0..j {
                    let orow = &mut out[(l * j + jj) * right..(l * j + jj + 1) * right];
                    for i in 0..extent {
                        let c = ud[jj * i_n + i];
                        if c == 0.0 {
                            continue;
                        }
                        let xrow = &xd[(l * extent + i) * right..(l * extent + i + 1) * right];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += c * xv;
                        }
                    }
                }
            }
            DenseTensor::new(out_shape, out)
        }
        o if o >= 3 => {
            let i_n = u.extent(0);
            if i_n != extent {
                return Err(KftError::ShapeMismatch(format!(
                    "mode product along axis {n}: tensor extent {extent} vs first extent {i_n}"
                )));
            }
            let spliced: Vec<usize> = u.shape()[1..].to_vec();
            let k: usize = spliced.iter().product();
            let mut out_shape = x.shape()[..n].to_vec();
            out_shape.extend_from_slice(&spliced);
            out_shape.extend_from_slice(&x.shape()[n + 1..]);
            let mut out = vec![0.0; left * k * right];
            let xd = x.data();
            let ud = u.data();
            for l in 0..left {
                for kk in 0..k {
                    let orow = &mut out[(l * k + kk) * right..(l * k + kk + 1) * right];
                    for i in 0..extent {
                        let c = ud[i * k + kk];
                        if c == 0.0 {
                            continue;
                        }
                        let xrow = &xd[(l * extent + i) * right..(l * extent + i + 1) * right];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += c * xv;
                        }
                    }
                }
            }
            DenseTensor::new(out_shape, out)
        }
        o => Err(KftError::ShapeMismatch(format!(
            "mode product operand must have order >= 2, got {o}"
        ))),
    }
}

/// Chains TT cores with last-mode products: ∏ₚ ×₋₁ Vₚ.
///
/// The first core may be (n₁, R₁) or (1, n₁, …, R₁); later cores are
/// (R_{p-1}, n_p, …, R_p). Boundary ranks must be 1 and are squeezed, so the
/// result has shape n₁ × … × n_P.
pub fn chain_last_mode(cores: &[DenseTensor]) -> Result<DenseTensor> {
    if cores.is_empty() {
        return Err(KftError::RankMismatch("empty core list".into()));
    }
    let first_has_lead_rank = cores[0].order() >= 3;
    let mut acc = cores[0].clone();
    for (p, core) in cores.iter().enumerate().skip(1) {
        if core.order() < 2 {
            return Err(KftError::RankMismatch(format!(
                "core {p} has order {} (need >= 2)",
                core.order()
            )));
        }
        let want = acc.extent(acc.order() - 1);
        let have = core.extent(0);
        if want != have {
            return Err(KftError::RankMismatch(format!(
                "core {p}: previous right rank {want} vs left rank {have}"
            )));
        }
        // Order-2 cores contract like order-3 cores with an implicit trailing
        // rank of 1, so promote before splicing.
        let promoted;
        let core3 = if core.order() == 2 {
            let mut shape = core.shape().to_vec();
            shape.push(1);
            promoted = core.clone().reshape(shape)?;
            &promoted
        } else {
            core
        };
        acc = mode_product(&acc, core3, Axis::Last)?;
    }
    // Squeeze boundary rank axes.
    let mut shape = acc.shape().to_vec();
    if shape.is_empty() {
        return Ok(acc);
    }
    let last = *shape.last().unwrap();
    if last != 1 {
        return Err(KftError::RankMismatch(format!(
            "trailing boundary rank is {last}, expected 1"
        )));
    }
    shape.pop();
    if first_has_lead_rank {
        if shape.first() != Some(&1) {
            return Err(KftError::RankMismatch(format!(
                "leading boundary rank is {:?}, expected 1",
                shape.first()
            )));
        }
        shape.remove(0);
    }
    if shape.is_empty() {
        shape.push(1);
    }
    acc.reshape(shape)
}

/// Elementwise product of two tensors of identical shape.
pub fn hadamard(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.shape() != b.shape() {
        return Err(KftError::ShapeMismatch(format!(
            "hadamard {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    DenseTensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    )
}

/// Transposed Khatri-Rao product: row i of the result is the Kronecker
/// product of row i of `a` with row i of `b`. Satisfies
/// (A•B)(A•B)ᵀ = (AAᵀ)∘(BBᵀ).
pub fn transposed_khatri_rao(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.order() != 2 || b.order() != 2 {
        return Err(KftError::ShapeMismatch(
            "transposed Khatri-Rao needs two matrices".into(),
        ));
    }
    if a.extent(0) != b.extent(0) {
        return Err(KftError::ShapeMismatch(format!(
            "row counts differ: {} vs {}",
            a.extent(0),
            b.extent(0)
        )));
    }
    let (n, ca, cb) = (a.extent(0), a.extent(1), b.extent(1));
    let mut data = Vec::with_capacity(n * ca * cb);
    for i in 0..n {
        let arow = &a.data()[i * ca..(i + 1) * ca];
        let brow = &b.data()[i * cb..(i + 1) * cb];
        for &av in arow {
            for &bv in brow {
                data.push(av * bv);
            }
        }
    }
    DenseTensor::new(vec![n, ca * cb], data)
}

/// Applies `mats[i]` to mode i+1 of `x` in sequence; the vectorization of the
/// result equals (⊗ᵢ mats[i]) · vec(x) taken over modes 1‥ in row-major
/// order.
pub fn kron_modes_matvec(x: &DenseTensor, mats: &[DenseTensor]) -> Result<DenseTensor> {
    if mats.len() + 1 > x.order() {
        return Err(KftError::ShapeMismatch(format!(
            "{} matrices for tensor of order {}",
            mats.len(),
            x.order()
        )));
    }
    let mut acc = x.clone();
    for (i, m) in mats.iter().enumerate() {
        if m.order() != 2 {
            return Err(KftError::ShapeMismatch("mats must be matrices".into()));
        }
        acc = mode_product(&acc, m, Axis::Index(i + 1))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_product_identity_keeps_tensor() {
        let x = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let id = DenseTensor::eye(2);
        let y = mode_product(&x, &id, Axis::Index(0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn mode_product_row_sum() {
        // X = [[1,2],[3,4]], U = [[1,1]] on axis 1 -> column [[3],[7]]
        let x = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let u = DenseTensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = mode_product(&x, &u, Axis::Index(1)).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn mode_product_order3_matches_loop_oracle() {
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64) / (u32::MAX as f64) - 0.5
        };
        let x = DenseTensor::new(vec![2, 3, 2], (0..12).map(|_| next()).collect()).unwrap();
        let u = DenseTensor::new(vec![2, 2, 2], (0..8).map(|_| next()).collect()).unwrap();
        let y = mode_product(&x, &u, Axis::Index(2)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        for a in 0..2 {
            for b in 0..3 {
                for k1 in 0..2 {
                    for k2 in 0..2 {
                        let mut s = 0.0;
                        for i in 0..2 {
                            s += x.get(&[a, b, i]) * u.get(&[i, k1, k2]);
                        }
                        assert!((y.get(&[a, b, k1, k2]) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn chain_two_matrices_is_matrix_product() {
        let u = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = DenseTensor::new(vec![2, 2, 1], vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        let y = chain_last_mode(&[u.clone(), v.clone()]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        let v2 = v.reshape(vec![2, 2]).unwrap();
        let uv = u.matmul(&v2).unwrap();
        assert_eq!(y.data(), uv.data());
    }

    #[test]
    fn chain_rank_one_is_outer_product() {
        let a = DenseTensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = DenseTensor::new(vec![1, 3, 1], vec![1.0, -1.0, 0.5]).unwrap();
        let c = DenseTensor::new(vec![1, 2, 1], vec![3.0, 4.0]).unwrap();
        let y = chain_last_mode(&[a, b, c]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let want = [1.0, 2.0][i] * [1.0, -1.0, 0.5][j] * [3.0, 4.0][k];
                    assert!((y.get(&[i, j, k]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chain_rejects_rank_mismatch() {
        let a = DenseTensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let b = DenseTensor::new(vec![3, 2, 1], vec![1.0; 6]).unwrap();
        assert!(matches!(
            chain_last_mode(&[a, b]),
            Err(KftError::RankMismatch(_))
        ));
    }

    #[test]
    fn tkr_hand_example() {
        let a = DenseTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = DenseTensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let y = transposed_khatri_rao(&a, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn hadamard_hand_example() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseTensor::filled(&[2, 2], 2.0);
        let y = hadamard(&a, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
