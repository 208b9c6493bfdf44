//! Dense N-way tensors and matrices in column-major layout, with the modal
//! operations the completion machinery is built on.
//!
//! Data is stored column-major lexicographically (first index fastest).  The
//! mode-`n` unfolding `T_(n)` is the `I_n x prod_{k!=n} I_k` matrix whose
//! columns are the mode-`n` fibers, enumerated with the lowest-numbered
//! remaining mode fastest.  With this ordering the unfolding of a multi-modal
//! product satisfies
//!
//! `S_(n) = A_n T_(n) (A_N kron ... kron A_{n+1} kron A_{n-1} kron ... kron A_1)^T`
//!
//! exactly, which the property tests pin down.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column-major strides for a dimension vector (first index fastest).
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for k in 1..dims.len() {
        s[k] = s[k - 1] * dims[k - 1];
    }
    s
}

/// Linear index of a (0-based) multi-index.
pub fn linear_index(dims: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), idx.len());
    let mut lin = 0;
    let mut stride = 1;
    for (d, i) in dims.iter().zip(idx) {
        debug_assert!(i < d);
        lin += i * stride;
        stride *= d;
    }
    lin
}

/// Multi-index (0-based) of a linear index.
pub fn multi_index(dims: &[usize], mut lin: usize) -> Vec<usize> {
    let mut idx = vec![0usize; dims.len()];
    for (k, d) in dims.iter().enumerate() {
        idx[k] = lin % d;
        lin /= d;
    }
    idx
}

/// Dense real matrix, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from row-major nested slices; handy in tests.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c);
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i + self.rows * j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i + self.rows * j] = v;
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[T] {
        &self.data[self.rows * j..self.rows * (j + 1)]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[self.rows * j..self.rows * (j + 1)]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    pub fn set_row(&mut self, i: usize, row: &[T]) {
        assert_eq!(row.len(), self.cols);
        for (j, &v) in row.iter().enumerate() {
            self.set(i, j, v);
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `C = self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (m, k, p) = (self.rows, self.cols, other.cols);
        let mut c = Self::zeros(m, p);
        for j in 0..p {
            let cj = &mut c.data[m * j..m * (j + 1)];
            for l in 0..k {
                let b = other.data[l + k * j];
                if b != T::zero() {
                    let al = &self.data[m * l..m * (l + 1)];
                    for i in 0..m {
                        cj[i] += b * al[i];
                    }
                }
            }
        }
        c
    }

    /// `C = self^T * other`; both operands read column-wise.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let (m, k, p) = (self.cols, self.rows, other.cols);
        let mut c = Self::zeros(m, p);
        for j in 0..p {
            let bj = other.col(j);
            for i in 0..m {
                let ai = self.col(i);
                let mut s = T::zero();
                for l in 0..k {
                    s += ai[l] * bj[l];
                }
                c.set(i, j, s);
            }
        }
        c
    }

    /// `C = self * other^T`.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let (m, k, p) = (self.rows, self.cols, other.rows);
        let mut c = Self::zeros(m, p);
        for l in 0..k {
            let al = &self.data[m * l..m * (l + 1)];
            for j in 0..p {
                let b = other.data[j + p * l];
                if b != T::zero() {
                    let cj = &mut c.data[m * j..m * (j + 1)];
                    for i in 0..m {
                        cj[i] += b * al[i];
                    }
                }
            }
        }
        c
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fro_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest row 2-norm (the `(2, inf)` norm).
    pub fn max_row_norm(&self) -> T {
        let mut best = T::zero();
        for i in 0..self.rows {
            let mut s = T::zero();
            for j in 0..self.cols {
                let v = self.get(i, j);
                s += v * v;
            }
            best = best.max(s);
        }
        best.sqrt()
    }

    /// Reinterprets as an order-2 tensor (same data).
    pub fn into_tensor(self) -> DenseTensor<T> {
        DenseTensor {
            dims: vec![self.rows, self.cols],
            data: self.data,
        }
    }
}

/// Standard Kronecker product: `(A kron B)[(i-1)rB+p, (j-1)cB+q] = A[i,j] B[p,q]`.
pub fn kron<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut k = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for ja in 0..a.cols() {
        for jb in 0..b.cols() {
            let jc = ja * b.cols() + jb;
            for ia in 0..a.rows() {
                let av = a.get(ia, ja);
                if av == T::zero() {
                    continue;
                }
                for ib in 0..b.rows() {
                    k.set(ia * b.rows() + ib, jc, av * b.get(ib, jb));
                }
            }
        }
    }
    k
}

/// Dense N-way tensor; `dims` are the mode sizes `I_1..I_N` and `data` is
/// column-major lexicographic (first index fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(!dims.is_empty(), "tensor order must be at least 1");
        assert!(dims.iter().all(|&d| d >= 1), "every mode size must be >= 1");
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_data(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for lin in 0..t.len() {
            t.data[lin] = f(&idx);
            for k in 0..dims.len() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, idx: &[usize]) -> T {
        self.data[linear_index(&self.dims, idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], v: T) {
        let lin = linear_index(&self.dims, idx);
        self.data[lin] = v;
    }

    #[inline]
    pub fn get_linear(&self, lin: usize) -> T {
        self.data[lin]
    }

    pub fn fro_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) {
        assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dims, other.dims);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Self {
            dims: self.dims.clone(),
            data,
        }
    }

    /// Mode-`n` unfolding (0-based mode).
    pub fn unfold(&self, n: usize) -> Result<Matrix<T>> {
        if n >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode: n,
                order: self.order(),
            });
        }
        let rows = self.dims[n];
        let inner: usize = self.dims[..n].iter().product();
        let outer: usize = self.dims[n + 1..].iter().product();
        let mut m = Matrix::zeros(rows, inner * outer);
        // lin = a + inner*(i + rows*b)  ->  M[i, a + inner*b]
        for b in 0..outer {
            for i in 0..rows {
                let src = inner * (i + rows * b);
                for a in 0..inner {
                    let col = a + inner * b;
                    m.data[i + rows * col] = self.data[src + a];
                }
            }
        }
        Ok(m)
    }

    /// Inverse of [`unfold`](Self::unfold): reassembles a tensor of shape
    /// `dims` from its mode-`n` unfolding.  Bit-exact round trip.
    pub fn fold(m: &Matrix<T>, n: usize, dims: &[usize]) -> Result<Self> {
        if n >= dims.len() {
            return Err(Error::ModeOutOfRange {
                mode: n,
                order: dims.len(),
            });
        }
        let rows = dims[n];
        let inner: usize = dims[..n].iter().product();
        let outer: usize = dims[n + 1..].iter().product();
        if m.rows() != rows || m.cols() != inner * outer {
            return Err(Error::ShapeMismatch(format!(
                "fold: matrix {}x{} does not match dims {dims:?} at mode {n}",
                m.rows(),
                m.cols()
            )));
        }
        let mut t = Self::zeros(dims);
        for b in 0..outer {
            for i in 0..rows {
                let dst = inner * (i + rows * b);
                for a in 0..inner {
                    let col = a + inner * b;
                    t.data[dst + a] = m.data[i + rows * col];
                }
            }
        }
        Ok(t)
    }

    /// Mode-`n` product `S = T x_n U`, so `S_(n) = U T_(n)`.
    pub fn mode_product(&self, u: &Matrix<T>, n: usize) -> Result<Self> {
        if n >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode: n,
                order: self.order(),
            });
        }
        if u.cols() != self.dims[n] {
            return Err(Error::ShapeMismatch(format!(
                "mode product at mode {n}: matrix has {} cols, tensor mode size {}",
                u.cols(),
                self.dims[n]
            )));
        }
        let unf = self.unfold(n)?;
        let prod = u.matmul(&unf);
        let mut dims = self.dims.clone();
        dims[n] = u.rows();
        Self::fold(&prod, n, &dims)
    }

    /// Mode-`n` product with `U^T`, i.e. `S_(n) = U^T T_(n)`.
    pub fn mode_product_t(&self, u: &Matrix<T>, n: usize) -> Result<Self> {
        if n >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode: n,
                order: self.order(),
            });
        }
        if u.rows() != self.dims[n] {
            return Err(Error::ShapeMismatch(format!(
                "transposed mode product at mode {n}: matrix has {} rows, tensor mode size {}",
                u.rows(),
                self.dims[n]
            )));
        }
        let unf = self.unfold(n)?;
        let prod = u.matmul_tn(&unf);
        let mut dims = self.dims.clone();
        dims[n] = u.cols();
        Self::fold(&prod, n, &dims)
    }

    /// `[[T; A_1, ..., A_N]]`: successive mode products in every mode.
    pub fn multi_mode_product(&self, mats: &[&Matrix<T>]) -> Result<Self> {
        if mats.len() != self.order() {
            return Err(Error::ShapeMismatch(format!(
                "need {} matrices, got {}",
                self.order(),
                mats.len()
            )));
        }
        let mut t = self.clone();
        for (n, u) in mats.iter().enumerate() {
            t = t.mode_product(u, n)?;
        }
        Ok(t)
    }

    /// `[[T; A_1^T, ..., A_N^T]]` without materializing transposes.
    pub fn multi_mode_product_t(&self, mats: &[&Matrix<T>]) -> Result<Self> {
        if mats.len() != self.order() {
            return Err(Error::ShapeMismatch(format!(
                "need {} matrices, got {}",
                self.order(),
                mats.len()
            )));
        }
        let mut t = self.clone();
        for (n, u) in mats.iter().enumerate() {
            t = t.mode_product_t(u, n)?;
        }
        Ok(t)
    }

    /// Reorders modes: `result[i_{perm[0]}, ..., i_{perm[N-1]}] = self[i_0, ..]`,
    /// i.e. mode `k` of the result is mode `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.order());
        let n = self.order();
        let mut seen = vec![false; n];
        for &p in perm {
            assert!(p < n && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let new_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let new_strides = strides(&new_dims);
        // Stride of source mode p inside the destination layout.
        let mut dst_stride = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            dst_stride[p] = new_strides[k];
        }
        let mut out = vec![T::zero(); self.len()];
        let mut idx = vec![0usize; n];
        let mut dst = 0usize;
        for lin in 0..self.len() {
            out[dst] = self.data[lin];
            for k in 0..n {
                idx[k] += 1;
                dst += dst_stride[k];
                if idx[k] < self.dims[k] {
                    break;
                }
                idx[k] = 0;
                dst -= self.dims[k] * dst_stride[k];
            }
        }
        Self {
            dims: new_dims,
            data: out,
        }
    }

    /// Reinterprets the buffer with new dims of identical total size.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.len() || dims.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.dims, dims
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Treats an `r x c` layout of the data as a matrix (column-major), with
    /// `r * c == len`.
    pub fn as_matrix(&self, rows: usize, cols: usize) -> Result<Matrix<T>> {
        if rows * cols != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "as_matrix {rows}x{cols} on {} entries",
                self.len()
            )));
        }
        Matrix::from_data(rows, cols, self.data.clone())
    }

    /// Writes the fixture text format: `dims: I1 I2 ... IN` then the entries
    /// in column-major order, whitespace separated.
    pub fn to_text(&self) -> String {
        let mut s = String::from("dims:");
        for d in &self.dims {
            s.push_str(&format!(" {d}"));
        }
        s.push('\n');
        for (k, v) in self.data.iter().enumerate() {
            if k > 0 {
                s.push(if k % 8 == 0 { '\n' } else { ' ' });
            }
            s.push_str(&format!("{:?}", v.to_f64_lossy()));
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor text".into()))?;
        let rest = header
            .strip_prefix("dims:")
            .ok_or_else(|| Error::Parse("missing 'dims:' header".into()))?;
        let dims: Vec<usize> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad dim '{t}': {e}")))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for line in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad value '{tok}': {e}")))?;
                data.push(T::from_f64_lossy(v));
            }
        }
        Self::from_data(&dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn tensor_1to8() -> DenseTensor<f64> {
        // T[i,j,k] = i + 2(j-1) + 4(k-1) with 1-based indices.
        DenseTensor::from_fn(&[2, 2, 2], |ix| (1 + ix[0] + 2 * ix[1] + 4 * ix[2]) as f64)
    }

    fn random_tensor(dims: &[usize], rng: &mut SplitMix64) -> DenseTensor<f64> {
        DenseTensor::from_fn(dims, |_| rng.normal())
    }

    fn random_matrix(r: usize, c: usize, rng: &mut SplitMix64) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn unfold_mode1_of_order2_is_identity() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let t = m.clone().into_tensor();
        assert_eq!(t.unfold(0).unwrap(), m);
    }

    #[test]
    fn unfold_examples_2x2x2() {
        let t = tensor_1to8();
        let u1 = t.unfold(0).unwrap();
        assert_eq!(
            u1,
            Matrix::from_rows(&[vec![1.0, 3.0, 5.0, 7.0], vec![2.0, 4.0, 6.0, 8.0]])
        );
        let u2 = t.unfold(1).unwrap();
        assert_eq!(
            u2,
            Matrix::from_rows(&[vec![1.0, 2.0, 5.0, 6.0], vec![3.0, 4.0, 7.0, 8.0]])
        );
    }

    #[test]
    fn fold_inverts_unfold_bit_exactly() {
        let mut rng = SplitMix64::new(11);
        let t = random_tensor(&[3, 4, 5], &mut rng);
        for n in 0..3 {
            let back = DenseTensor::fold(&t.unfold(n).unwrap(), n, t.dims()).unwrap();
            assert_eq!(back, t);
        }
        let m = Matrix::from_rows(&[vec![1.0, 3.0, 5.0, 7.0], vec![2.0, 4.0, 6.0, 8.0]]);
        let t2 = DenseTensor::fold(&m, 0, &[2, 2, 2]).unwrap();
        assert_eq!(t2, tensor_1to8());
    }

    #[test]
    fn mode_product_identity_and_matrix_case() {
        let mut rng = SplitMix64::new(3);
        let t = random_tensor(&[3, 4, 2], &mut rng);
        for n in 0..3 {
            let s = t.mode_product(&Matrix::identity(t.dims()[n]), n).unwrap();
            assert_eq!(s, t);
        }
        // Order-2: T x_1 U == U * T.
        let m = random_matrix(3, 4, &mut rng);
        let u = random_matrix(5, 3, &mut rng);
        let s = m.clone().into_tensor().mode_product(&u, 0).unwrap();
        assert_eq!(s, u.matmul(&m).into_tensor());
    }

    #[test]
    fn mode3_product_sums_frontal_slices() {
        let t = tensor_1to8();
        let ones = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let s = t.mode_product(&ones, 2).unwrap();
        assert_eq!(s.dims(), &[2, 2, 1]);
        assert_eq!(s.get(&[0, 0, 0]), 6.0);
        assert_eq!(s.get(&[1, 0, 0]), 8.0);
        assert_eq!(s.get(&[0, 1, 0]), 10.0);
        assert_eq!(s.get(&[1, 1, 0]), 12.0);
    }

    #[test]
    fn multi_mode_product_of_scalar_core_is_outer_product() {
        let g = DenseTensor::from_data(&[1, 1, 1], vec![1.0]).unwrap();
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        let c = Matrix::from_rows(&[vec![5.0], vec![-1.0]]);
        let t = g.multi_mode_product(&[&a, &b, &c]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let want: f64 = a.get(i, 0) * b.get(j, 0) * c.get(k, 0);
                    assert!((t.get(&[i, j, k]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn multi_mode_product_matches_kronecker_formula() {
        let mut rng = SplitMix64::new(42);
        for _ in 0..20 {
            let dims = [
                2 + rng.below(3),
                2 + rng.below(3),
                2 + rng.below(3),
                1 + rng.below(3),
            ];
            let n_modes = 3 + rng.below(2);
            let dims = &dims[..n_modes];
            let t = random_tensor(dims, &mut rng);
            let mats: Vec<Matrix<f64>> = dims
                .iter()
                .map(|&d| random_matrix(1 + rng.below(4), d, &mut rng))
                .collect();
            let refs: Vec<&Matrix<f64>> = mats.iter().collect();
            let s = t.multi_mode_product(&refs).unwrap();
            for n in 0..n_modes {
                // Kronecker of the others, highest mode first, skipping n.
                let mut k: Option<Matrix<f64>> = None;
                for m in (0..n_modes).rev().filter(|&m| m != n) {
                    k = Some(match k {
                        None => mats[m].clone(),
                        Some(acc) => kron(&acc, &mats[m]),
                    });
                }
                let rhs = mats[n].matmul(&t.unfold(n).unwrap()).matmul_nt(&k.unwrap());
                let lhs = s.unfold(n).unwrap();
                let scale = rhs.fro_norm().max(1e-300);
                let mut diff = 0.0f64;
                for (x, y) in lhs.data().iter().zip(rhs.data()) {
                    diff += (x - y) * (x - y);
                }
                assert!(diff.sqrt() / scale < 1e-12, "mode {n}");
            }
        }
    }

    #[test]
    fn mode_products_commute_across_distinct_modes() {
        let mut rng = SplitMix64::new(9);
        let t = random_tensor(&[4, 3, 5], &mut rng);
        let u = random_matrix(2, 4, &mut rng);
        let v = random_matrix(6, 3, &mut rng);
        let a = t.mode_product(&u, 0).unwrap().mode_product(&v, 1).unwrap();
        let b = t.mode_product(&v, 1).unwrap().mode_product(&u, 0).unwrap();
        let scale = a.fro_norm();
        assert!(a.sub(&b).fro_norm() <= 1e-12 * scale);
    }

    #[test]
    fn kron_identities() {
        let i6 = kron(&Matrix::<f64>::identity(2), &Matrix::<f64>::identity(3));
        assert_eq!(i6, Matrix::identity(6));

        let mut rng = SplitMix64::new(5);
        let a = random_matrix(2, 2, &mut rng);
        let b = random_matrix(2, 2, &mut rng);
        let c = random_matrix(2, 2, &mut rng);
        let d = random_matrix(2, 2, &mut rng);
        let lhs = kron(&a, &b).matmul(&kron(&c, &d));
        let rhs = kron(&a.matmul(&c), &b.matmul(&d));
        let mut diff = 0.0f64;
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            diff += (x - y) * (x - y);
        }
        assert!(diff.sqrt() <= 1e-12 * rhs.fro_norm());

        // Column vectors: stacked scaled copies.
        let va = Matrix::from_rows(&[vec![2.0], vec![3.0]]);
        let vb = Matrix::from_rows(&[vec![5.0], vec![7.0]]);
        let k = kron(&va, &vb);
        assert_eq!(k.data(), &[10.0, 14.0, 15.0, 21.0]);
    }

    #[test]
    fn fro_norm_properties() {
        let z = DenseTensor::<f64>::zeros(&[3, 2]);
        assert_eq!(z.fro_norm(), 0.0);
        let t = tensor_1to8();
        assert!((t.fro_norm() - 204.0f64.sqrt()).abs() < 1e-12);
        let mut rng = SplitMix64::new(17);
        let r = random_tensor(&[3, 4, 2], &mut rng);
        for n in 0..3 {
            assert!((r.unfold(n).unwrap().fro_norm() - r.fro_norm()).abs() < 1e-12);
        }
        let mut s = r.clone();
        s.scale(-2.5);
        assert!((s.fro_norm() - 2.5 * r.fro_norm()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_unit_dims_are_legal() {
        let t = DenseTensor::<f64>::from_fn(&[1, 3, 1], |ix| ix[1] as f64);
        assert_eq!(t.unfold(1).unwrap().rows(), 3);
        let u = t.mode_product(&Matrix::from_rows(&[vec![2.0]]), 0).unwrap();
        assert_eq!(u.dims(), &[1, 3, 1]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = SplitMix64::new(23);
        let t = random_tensor(&[2, 3, 4], &mut rng);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.dims(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]), t.get(&[i, j, k]));
                }
            }
        }
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn text_roundtrip() {
        let mut rng = SplitMix64::new(31);
        let t = random_tensor(&[2, 3, 2], &mut rng);
        let s = t.to_text();
        let back = DenseTensor::<f64>::from_text(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mode_out_of_range_errors() {
        let t = tensor_1to8();
        assert!(t.unfold(3).is_err());
        assert!(t.mode_product(&Matrix::identity(2), 5).is_err());
    }
}
