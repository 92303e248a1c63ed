//! Dense f32 tensors and the small set of numerical kernels the rest of the
//! toolkit is built on.
//!
//! All kernels run with a fixed loop order and f64 accumulators, so repeated
//! runs are bit-identical. Values are immutable once constructed unless the
//! caller holds the tensor by value.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense tensor of 32-bit floats. The only dtype in the toolkit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f32) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extent of one axis.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// 2-D element access; rank-2 only.
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Number of elements in one slice along `axis` (product of the other extents).
    pub fn slice_len(&self, axis: usize) -> usize {
        self.numel() / self.shape[axis].max(1)
    }

    /// Strides for row-major layout.
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// New tensor with the given indices removed from `axis`. Indices must be
    /// sorted, unique and in range; surviving entries keep ascending order.
    pub fn delete_indices(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Dimension {
                op: "delete_indices",
                detail: format!("axis {} out of range for rank {}", axis, self.rank()),
            });
        }
        let extent = self.shape[axis];
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Internal("delete_indices wants sorted unique indices".into()));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= extent {
                return Err(Error::Dimension {
                    op: "delete_indices",
                    detail: format!("index {} out of range for extent {}", last, extent),
                });
            }
        }
        if indices.len() == extent {
            return Err(Error::Dimension {
                op: "delete_indices",
                detail: format!("deleting all {} entries of axis {}", extent, axis),
            });
        }
        let mut drop = vec![false; extent];
        for &i in indices {
            drop[i] = true;
        }
        let mut new_shape = self.shape.clone();
        new_shape[axis] = extent - indices.len();
        let strides = self.strides();
        let outer: usize = self.shape[..axis].iter().product();
        let inner = strides[axis];
        let outer_stride = inner * extent;
        let mut out = Vec::with_capacity(new_shape.iter().product());
        for o in 0..outer {
            for k in 0..extent {
                if drop[k] {
                    continue;
                }
                let base = o * outer_stride + k * inner;
                out.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Tensor::new(new_shape, out)
    }

    /// Zero the slices `axis == index` for every listed index, in place.
    pub fn zero_indices(&mut self, axis: usize, indices: &[usize]) {
        let strides = self.strides();
        let extent = self.shape[axis];
        let inner = strides[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let outer_stride = inner * extent;
        for &idx in indices {
            for o in 0..outer {
                let base = o * outer_stride + idx * inner;
                for v in &mut self.data[base..base + inner] {
                    *v = 0.0;
                }
            }
        }
    }
}

/// c[i,j] = sum_k a[i,k] * b[k,j], f64 accumulation, fixed loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension {
            op: "matmul",
            detail: format!("wants rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            detail: format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for (kk, &av) in arow.iter().enumerate() {
                acc += av as f64 * b.data[kk * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "matmul" });
    }
    Ok(t)
}

/// state + x * x^T for a d x n batch whose columns are samples. The result is
/// mirrored so it is symmetric to the bit.
pub fn gram_accumulate(state: &Tensor, x_batch: &Tensor) -> Result<Tensor> {
    if state.rank() != 2 || state.shape[0] != state.shape[1] {
        return Err(Error::Dimension {
            op: "gram_accumulate",
            detail: format!("state must be square, got {:?}", state.shape()),
        });
    }
    if x_batch.rank() != 2 || x_batch.shape[0] != state.shape[0] {
        return Err(Error::Dimension {
            op: "gram_accumulate",
            detail: format!("batch {:?} does not match state {:?}", x_batch.shape(), state.shape()),
        });
    }
    let d = state.shape[0];
    let n = x_batch.shape[1];
    let mut out = state.data.clone();
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0f64;
            for s in 0..n {
                acc += x_batch.data[i * n + s] as f64 * x_batch.data[j * n + s] as f64;
            }
            let v = (out[i * d + j] as f64 + acc) as f32;
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    let t = Tensor::new(vec![d, d], out)?;
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "gram_accumulate" });
    }
    Ok(t)
}

/// Lower Cholesky factor of a symmetric positive definite matrix, in f64.
/// Fails with the index of the first non-positive leading minor.
pub(crate) fn cholesky_lower_f64(h: &Tensor) -> Result<Vec<f64>> {
    let d = h.shape[0];
    if h.rank() != 2 || h.shape[1] != d {
        return Err(Error::Dimension {
            op: "spd_inverse",
            detail: format!("wants a square matrix, got {:?}", h.shape()),
        });
    }
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = h.data[i * d + j] as f64;
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::SingularMatrix { index: i });
                }
                l[i * d + j] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix via Cholesky factorization.
/// The result is mirrored so it is symmetric to the bit.
pub fn spd_inverse(h: &Tensor) -> Result<Tensor> {
    let l = cholesky_lower_f64(h)?;
    let d = h.shape[0];
    // invert L (lower triangular)
    let mut linv = vec![0.0f64; d * d];
    for i in 0..d {
        linv[i * d + i] = 1.0 / l[i * d + i];
        for j in 0..i {
            let mut sum = 0.0f64;
            for k in j..i {
                sum -= l[i * d + k] * linv[k * d + j];
            }
            linv[i * d + j] = sum / l[i * d + i];
        }
    }
    // H^-1 = L^-T L^-1
    let mut out = vec![0.0f32; d * d];
    for i in 0..d {
        for j in i..d {
            let mut sum = 0.0f64;
            for k in i.max(j)..d {
                sum += linv[k * d + i] * linv[k * d + j];
            }
            out[i * d + j] = sum as f32;
            out[j * d + i] = sum as f32;
        }
    }
    let t = Tensor::new(vec![d, d], out)?;
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "spd_inverse" });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::eye(2);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap();
        let c = matmul(&p, &v).unwrap();
        assert_eq!(c.data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_tensor(vec![3, 4], 1);
        let b = random_tensor(vec![4, 2], 2);
        let c = matmul(&a, &b).unwrap();
        // independent naive oracle
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0f64;
                for k in 0..4 {
                    want += a.at2(i, k) as f64 * b.at2(k, j) as f64;
                }
                assert!((c.at2(i, j) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_bilinear_in_first_argument() {
        let a = random_tensor(vec![3, 3], 3);
        let b = random_tensor(vec![3, 3], 4);
        let alpha = 2.5f32;
        let scaled =
            Tensor::new(vec![3, 3], a.data().iter().map(|v| v * alpha).collect()).unwrap();
        let lhs = matmul(&scaled, &b).unwrap();
        let rhs = matmul(&a, &b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            let want = y * alpha;
            assert!((x - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn gram_single_outer_product() {
        let state = Tensor::zeros(vec![2, 2]);
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let h = gram_accumulate(&state, &x).unwrap();
        assert_eq!(h.data(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn gram_batch_additivity() {
        let x1 = random_tensor(vec![4, 8], 5);
        let x2 = random_tensor(vec![4, 8], 6);
        let mut cat = Vec::new();
        for r in 0..4 {
            cat.extend_from_slice(&x1.data()[r * 8..(r + 1) * 8]);
            cat.extend_from_slice(&x2.data()[r * 8..(r + 1) * 8]);
        }
        let xcat = Tensor::new(vec![4, 16], cat).unwrap();
        let z = Tensor::zeros(vec![4, 4]);
        let a = gram_accumulate(&gram_accumulate(&z, &x1).unwrap(), &x2).unwrap();
        let b = gram_accumulate(&z, &xcat).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn gram_matches_matmul_oracle() {
        let x = random_tensor(vec![4, 16], 7);
        let z = Tensor::zeros(vec![4, 4]);
        let h = gram_accumulate(&z, &x).unwrap();
        let mut xt_data = vec![0.0f32; 16 * 4];
        for i in 0..4 {
            for j in 0..16 {
                xt_data[j * 4 + i] = x.at2(i, j);
            }
        }
        let xt = Tensor::new(vec![16, 4], xt_data).unwrap();
        let want = matmul(&x, &xt).unwrap();
        for (a, b) in h.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gram_symmetric_to_the_bit() {
        let x = random_tensor(vec![6, 32], 8);
        let h = gram_accumulate(&Tensor::zeros(vec![6, 6]), &x).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(h.at2(i, j).to_bits(), h.at2(j, i).to_bits());
            }
        }
    }

    #[test]
    fn spd_inverse_identity() {
        let inv = spd_inverse(&Tensor::eye(3)).unwrap();
        assert_eq!(inv.data(), Tensor::eye(3).data());
    }

    #[test]
    fn spd_inverse_diagonal() {
        let h = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let inv = spd_inverse(&h).unwrap();
        assert!((inv.at2(0, 0) - 0.5).abs() < 1e-7);
        assert!((inv.at2(1, 1) - 0.25).abs() < 1e-7);
        assert!(inv.at2(0, 1).abs() < 1e-7);
    }

    #[test]
    fn spd_inverse_residual_check() {
        // A*A^T + I is SPD and well conditioned
        let a = random_tensor(vec![5, 5], 9);
        let mut h = gram_accumulate(&Tensor::zeros(vec![5, 5]), &a).unwrap();
        for i in 0..5 {
            h.data_mut()[i * 5 + i] += 1.0;
        }
        let inv = spd_inverse(&h).unwrap();
        let prod = matmul(&h, &inv).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.at2(i, j) - want).abs() < 1e-6, "residual too large");
            }
        }
    }

    #[test]
    fn spd_inverse_rejects_non_spd() {
        let h = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match spd_inverse(&h) {
            Err(Error::SingularMatrix { .. }) => {}
            other => panic!("expected SingularMatrix, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn spd_inverse_involution() {
        let a = random_tensor(vec![6, 6], 10);
        let mut h = gram_accumulate(&Tensor::zeros(vec![6, 6]), &a).unwrap();
        for i in 0..6 {
            h.data_mut()[i * 6 + i] += 0.5;
        }
        let twice = spd_inverse(&spd_inverse(&h).unwrap()).unwrap();
        for (x, y) in twice.data().iter().zip(h.data()) {
            assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0));
        }
    }

    #[test]
    fn delete_indices_middle_axis() {
        // shape [2,3,2], delete index 1 on axis 1
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let d = t.delete_indices(1, &[1]).unwrap();
        assert_eq!(d.shape(), &[2, 2, 2]);
        assert_eq!(d.data(), &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn zero_indices_matches_delete_complement() {
        let t = random_tensor(vec![3, 4, 2], 11);
        let mut z = t.clone();
        z.zero_indices(1, &[0, 2]);
        // surviving slices unchanged
        let kept = t.delete_indices(1, &[0, 2]).unwrap();
        let kept_z = z.delete_indices(1, &[0, 2]).unwrap();
        assert_eq!(kept.data(), kept_z.data());
        // zeroed slices are zero
        for i in 0..3 {
            for k in 0..2 {
                assert_eq!(z.data()[i * 8 + k], 0.0);
                assert_eq!(z.data()[i * 8 + 4 + k], 0.0);
            }
        }
    }
}
