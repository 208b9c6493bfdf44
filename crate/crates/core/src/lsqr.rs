//! Matrix-free LSQR for `min ||A x - b||`.
//!
//! The solver only needs the two products `y += A x` and `x += A^T y`, so
//! callers expose the observation-restricted tensor operators directly and
//! never form the coefficient matrix.  Warm starts go through the residual
//! form: solve for a correction on `b - A x0`, which keeps every iterate at
//! least as good as `x0`.

use crate::scalar::Scalar;

/// A linear operator with explicit forward and transpose products.
pub trait LinearOperator<T> {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `y += A x`.
    fn apply(&self, x: &[T], y: &mut [T]);
    /// `x += A^T y`.
    fn apply_transpose(&self, y: &[T], x: &mut [T]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// `||A^T r||` fell below the relative tolerance.
    NormalEquationsSmall,
    /// Residual is (numerically) zero.
    ResidualZero,
    /// Iteration limit reached.
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct LsqrResult<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    pub residual_norm: T,
    pub stop: StopReason,
}

/// Solves `min ||A x - b||` from `x = 0` by Golub-Kahan bidiagonalization.
///
/// Stops when `||A^T r|| <= atol * ||A||_est * ||r||` or after `max_iter`
/// iterations; the residual norm estimate is monotonically nonincreasing.
pub fn lsqr<T: Scalar, Op: LinearOperator<T>>(
    op: &Op,
    b: &[T],
    atol: T,
    max_iter: usize,
) -> LsqrResult<T> {
    let m = op.rows();
    let n = op.cols();
    debug_assert_eq!(b.len(), m);

    let mut x = vec![T::zero(); n];
    let mut u = b.to_vec();
    let mut beta = norm2(&u);
    if beta == T::zero() {
        return LsqrResult {
            x,
            iterations: 0,
            residual_norm: T::zero(),
            stop: StopReason::ResidualZero,
        };
    }
    rescale(&mut u, beta.recip());
    let mut v = vec![T::zero(); n];
    op.apply_transpose(&u, &mut v);
    let mut alpha = norm2(&v);
    if alpha == T::zero() {
        // b is orthogonal to the range of A.
        return LsqrResult {
            x,
            iterations: 0,
            residual_norm: beta,
            stop: StopReason::NormalEquationsSmall,
        };
    }
    rescale(&mut v, alpha.recip());
    let mut w = v.clone();
    let mut phi_bar = beta;
    let mut rho_bar = alpha;
    let mut a_norm_sq = T::zero();
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    for it in 0..max_iter {
        iterations = it + 1;
        a_norm_sq += alpha * alpha + beta * beta;

        // u <- A v - alpha u ; beta = ||u||
        rescale(&mut u, -alpha);
        op.apply(&v, &mut u);
        beta = norm2(&u);
        if beta > T::zero() {
            rescale(&mut u, beta.recip());
        }

        // v <- A^T u - beta v ; alpha = ||v||
        rescale(&mut v, -beta);
        op.apply_transpose(&u, &mut v);
        alpha = norm2(&v);
        if alpha > T::zero() {
            rescale(&mut v, alpha.recip());
        }

        // Givens rotation eliminating beta from the bidiagonal system.
        let rho = (rho_bar * rho_bar + beta * beta).sqrt();
        let c = rho_bar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rho_bar = -c * alpha;
        let phi = c * phi_bar;
        phi_bar = s * phi_bar;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        for i in 0..n {
            x[i] += t1 * w[i];
            w[i] = v[i] + t2 * w[i];
        }

        // ||A^T r|| = phi_bar * alpha * |c|.
        let atr = phi_bar * alpha * c.abs();
        if phi_bar <= T::epsilon() * a_norm_sq.sqrt().max(T::one()) {
            stop = StopReason::ResidualZero;
            break;
        }
        if atr <= atol * a_norm_sq.sqrt() * phi_bar {
            stop = StopReason::NormalEquationsSmall;
            break;
        }
        if alpha == T::zero() || beta == T::zero() {
            stop = StopReason::NormalEquationsSmall;
            break;
        }
    }

    LsqrResult {
        x,
        iterations,
        residual_norm: phi_bar,
        stop,
    }
}

/// Warm-started solve: returns `x0 + delta` where `delta` improves the
/// residual `b - A x0`.  The objective never exceeds the one at `x0`.
pub fn lsqr_warm<T: Scalar, Op: LinearOperator<T>>(
    op: &Op,
    b: &[T],
    x0: &[T],
    atol: T,
    max_iter: usize,
) -> LsqrResult<T> {
    let mut r = b.to_vec();
    let mut ax = vec![T::zero(); op.rows()];
    op.apply(x0, &mut ax);
    for (ri, &a) in r.iter_mut().zip(&ax) {
        *ri -= a;
    }
    let mut out = lsqr(op, &r, atol, max_iter);
    for (xi, &x0i) in out.x.iter_mut().zip(x0) {
        *xi += x0i;
    }
    out
}

fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn rescale<T: Scalar>(v: &mut [T], s: T) {
    for x in v {
        *x *= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pinv;
    use crate::rng::SplitMix64;
    use crate::tensor::Matrix;

    struct DenseOp<'a>(&'a Matrix<f64>);

    impl LinearOperator<f64> for DenseOp<'_> {
        fn rows(&self) -> usize {
            self.0.rows()
        }
        fn cols(&self) -> usize {
            self.0.cols()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            for j in 0..self.0.cols() {
                let col = self.0.col(j);
                for i in 0..self.0.rows() {
                    y[i] += col[i] * x[j];
                }
            }
        }
        fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
            for j in 0..self.0.cols() {
                let col = self.0.col(j);
                let mut s = 0.0;
                for i in 0..self.0.rows() {
                    s += col[i] * y[i];
                }
                x[j] += s;
            }
        }
    }

    #[test]
    fn matches_pseudoinverse_solution() {
        let mut rng = SplitMix64::new(1);
        for &(m, n) in &[(12, 5), (8, 8), (30, 3)] {
            let a = Matrix::from_fn(m, n, |_, _| rng.normal());
            let b: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let res = lsqr(&DenseOp(&a), &b, 1e-14, 200);
            let bmat = Matrix::from_data(m, 1, b.clone()).unwrap();
            let want = pinv(&a, 1e-12).matmul(&bmat);
            for i in 0..n {
                assert!(
                    (res.x[i] - want.get(i, 0)).abs() < 1e-8,
                    "{m}x{n}: {} vs {}",
                    res.x[i],
                    want.get(i, 0)
                );
            }
        }
    }

    #[test]
    fn orthonormal_system_converges_immediately() {
        let mut rng = SplitMix64::new(2);
        let a = crate::linalg::qr_economic(&Matrix::from_fn(20, 4, |_, _| rng.normal())).q;
        let b: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let res = lsqr(&DenseOp(&a), &b, 1e-12, 50);
        assert!(res.iterations <= 2, "{}", res.iterations);
    }

    #[test]
    fn warm_start_never_worsens_residual() {
        let mut rng = SplitMix64::new(3);
        let a = Matrix::from_fn(15, 6, |_, _| rng.normal());
        let b: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let x0: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let obj = |x: &[f64]| {
            let mut y = vec![0.0; 15];
            DenseOp(&a).apply(x, &mut y);
            y.iter().zip(&b).map(|(yi, bi)| (yi - bi) * (yi - bi)).sum::<f64>()
        };
        let before = obj(&x0);
        // Even with a tiny iteration budget the objective must not go up.
        for cap in [1, 2, 5, 50] {
            let res = lsqr_warm(&DenseOp(&a), &b, &x0, 1e-14, cap);
            assert!(obj(&res.x) <= before + 1e-12, "cap {cap}");
        }
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let a = Matrix::<f64>::identity(4);
        let res = lsqr(&DenseOp(&a), &[0.0; 4], 1e-12, 10);
        assert_eq!(res.stop, StopReason::ResidualZero);
        assert!(res.x.iter().all(|&v| v == 0.0));
    }
}
