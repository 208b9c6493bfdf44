//! Dense decompositions sized for this problem: economic Householder QR
//! (plain and column-pivoted), a one-sided Jacobi SVD, and Cholesky solves
//! for ridge-regularized normal equations.
//!
//! The Jacobi SVD is used instead of a Gram-matrix eigensolver because rank
//! detection in the economic HOSVD needs small singular values resolved to
//! machine precision relative to `sigma_1`, not to `sqrt(eps)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Economic QR result: `X = Q R` with `Q` orthonormal `m x k`, `R` upper
/// triangular `k x k`, `k = min(m, n)`, and `diag(R) >= 0`.
#[derive(Clone, Debug)]
pub struct Qr<T> {
    pub q: Matrix<T>,
    pub r: Matrix<T>,
}

/// Column-pivoted variant: `X P = Q R`, with `perm[j]` giving the source
/// column of pivoted column `j`.
#[derive(Clone, Debug)]
pub struct PivotedQr<T> {
    pub q: Matrix<T>,
    pub r: Matrix<T>,
    pub perm: Vec<usize>,
}

fn householder_vector<T: Scalar>(col: &mut [T]) -> T {
    // Transforms col to (beta, v_1.., ) returning tau; col[0] holds beta after.
    let alpha = col[0];
    let sigma: T = col[1..].iter().map(|&v| v * v).sum();
    if sigma == T::zero() && alpha >= T::zero() {
        return T::zero();
    }
    let norm = (alpha * alpha + sigma).sqrt();
    let beta = if alpha <= T::zero() { norm } else { -norm };
    let tau = (beta - alpha) / beta;
    let scale = (alpha - beta).recip();
    for v in col[1..].iter_mut() {
        *v *= scale;
    }
    col[0] = beta;
    tau
}

fn qr_in_place<T: Scalar>(a: &mut Matrix<T>, taus: &mut Vec<T>, from: usize, pivots: Option<&mut Vec<usize>>) {
    let (m, n) = (a.rows(), a.cols());
    let k = m.min(n);
    let mut col_norms: Vec<T> = Vec::new();
    let mut perm: Option<&mut Vec<usize>> = pivots;
    if perm.is_some() {
        col_norms = (0..n)
            .map(|j| a.col(j).iter().map(|&v| v * v).sum())
            .collect();
    }
    for j in from..k {
        if let Some(p) = perm.as_deref_mut() {
            // Pick the remaining column with the largest updated norm.
            let mut best = j;
            for c in j + 1..n {
                if col_norms[c] > col_norms[best] {
                    best = c;
                }
            }
            if best != j {
                for i in 0..m {
                    let t = a.get(i, j);
                    a.set(i, j, a.get(i, best));
                    a.set(i, best, t);
                }
                col_norms.swap(j, best);
                p.swap(j, best);
            }
        }
        let tau = {
            let col = &mut a.col_mut(j)[j..];
            householder_vector(col)
        };
        taus.push(tau);
        if tau != T::zero() {
            for c in j + 1..n {
                // w = tau * (v^T a_c); a_c -= w v  with v = [1, a[j+1.., j]]
                let mut w = a.get(j, c);
                for i in j + 1..m {
                    w += a.get(i, j) * a.get(i, c);
                }
                w *= tau;
                let ajc = a.get(j, c) - w;
                a.set(j, c, ajc);
                for i in j + 1..m {
                    let v = a.get(i, c) - w * a.get(i, j);
                    a.set(i, c, v);
                }
            }
        }
        if perm.is_some() {
            for c in j + 1..n {
                let v = a.get(j, c);
                col_norms[c] = (col_norms[c] - v * v).max(T::zero());
            }
        }
    }
}

fn form_q<T: Scalar>(h: &Matrix<T>, taus: &[T], k: usize) -> Matrix<T> {
    let m = h.rows();
    let mut q = Matrix::zeros(m, k);
    for j in 0..k {
        q.set(j, j, T::one());
    }
    for j in (0..taus.len()).rev() {
        let tau = taus[j];
        if tau == T::zero() {
            continue;
        }
        for c in 0..k {
            let mut w = q.get(j, c);
            for i in j + 1..m {
                w += h.get(i, j) * q.get(i, c);
            }
            w *= tau;
            let v = q.get(j, c) - w;
            q.set(j, c, v);
            for i in j + 1..m {
                let v = q.get(i, c) - w * h.get(i, j);
                q.set(i, c, v);
            }
        }
    }
    q
}

fn extract_r<T: Scalar>(h: &Matrix<T>, k: usize) -> Matrix<T> {
    let n = h.cols();
    let mut r = Matrix::zeros(k, n);
    for j in 0..n {
        for i in 0..=j.min(k - 1) {
            r.set(i, j, h.get(i, j));
        }
    }
    r
}

fn fix_signs<T: Scalar>(q: &mut Matrix<T>, r: &mut Matrix<T>) {
    let k = r.rows();
    for i in 0..k.min(r.cols()) {
        if r.get(i, i) < T::zero() {
            for j in 0..r.cols() {
                let v = -r.get(i, j);
                r.set(i, j, v);
            }
            for p in 0..q.rows() {
                let v = -q.get(p, i);
                q.set(p, i, v);
            }
        }
    }
}

/// Economic QR with a deterministic sign convention (`diag(R) >= 0`).
pub fn qr_economic<T: Scalar>(x: &Matrix<T>) -> Qr<T> {
    let k = x.rows().min(x.cols());
    let mut h = x.clone();
    let mut taus = Vec::with_capacity(k);
    qr_in_place(&mut h, &mut taus, 0, None);
    let mut q = form_q(&h, &taus, k);
    let mut r = extract_r(&h, k);
    fix_signs(&mut q, &mut r);
    Qr { q, r }
}

/// Economic QR with column pivoting, for rank-deficient inputs.
pub fn qr_pivoted<T: Scalar>(x: &Matrix<T>) -> PivotedQr<T> {
    let k = x.rows().min(x.cols());
    let mut h = x.clone();
    let mut taus = Vec::with_capacity(k);
    let mut perm: Vec<usize> = (0..x.cols()).collect();
    qr_in_place(&mut h, &mut taus, 0, Some(&mut perm));
    let mut q = form_q(&h, &taus, k);
    let mut r = extract_r(&h, k);
    fix_signs(&mut q, &mut r);
    PivotedQr { q, r, perm }
}

/// Economic SVD `A = U diag(s) V^T` with `U: m x k`, `V: n x k`,
/// `k = min(m, n)`, singular values nonnegative and descending.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

/// One-sided Jacobi SVD.  High relative accuracy; quadratic cost in the
/// short dimension, which stays small throughout this crate.
pub fn svd<T: Scalar>(a: &Matrix<T>) -> Svd<T> {
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose());
        Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    }
}

fn svd_tall<T: Scalar>(a: &Matrix<T>) -> Svd<T> {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    let mut u = a.clone();
    let mut v = Matrix::<T>::identity(n);
    let tol = T::epsilon() * T::from_f64_lossy(8.0);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (mut app, mut aqq, mut apq) = (T::zero(), T::zero(), T::zero());
                {
                    let (cp, cq) = (u.col(p), u.col(q));
                    for i in 0..m {
                        app += cp[i] * cp[i];
                        aqq += cq[i] * cq[i];
                        apq += cp[i] * cq[i];
                    }
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == T::zero() {
                    continue;
                }
                rotated = true;
                // Jacobi rotation diagonalizing [[app, apq], [apq, aqq]].
                let theta = (aqq - app) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt());
                let c = (T::one() + t * t).sqrt().recip();
                let s = c * t;
                for i in 0..m {
                    let up = u.get(i, p);
                    let uq = u.get(i, q);
                    u.set(i, p, c * up - s * uq);
                    u.set(i, q, s * up + c * uq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    // Column norms are the singular values.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = (0..n)
        .map(|j| u.col(j).iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut su = Matrix::zeros(m, n);
    let mut sv = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let norm = norms[src];
        s.push(norm);
        if norm > T::zero() {
            let inv = norm.recip();
            for i in 0..m {
                su.set(i, dst, u.get(i, src) * inv);
            }
        }
        for i in 0..n {
            sv.set(i, dst, v.get(i, src));
        }
    }
    complete_zero_columns(&mut su, &s);
    // Deterministic sign: largest-magnitude entry of each left vector >= 0.
    for j in 0..n {
        let mut pick = 0;
        let mut best = T::zero();
        for i in 0..m {
            let av = su.get(i, j).abs();
            if av > best {
                best = av;
                pick = i;
            }
        }
        if su.get(pick, j) < T::zero() {
            for i in 0..m {
                let x = -su.get(i, j);
                su.set(i, j, x);
            }
            for i in 0..n {
                let x = -sv.get(i, j);
                sv.set(i, j, x);
            }
        }
    }
    Svd { u: su, s, v: sv }
}

/// Replaces zero (or numerically dead) left singular columns with an
/// orthonormal completion so `U^T U = I` holds even for rank-deficient input.
fn complete_zero_columns<T: Scalar>(u: &mut Matrix<T>, s: &[T]) {
    let (m, n) = (u.rows(), u.cols());
    let smax = s.first().copied().unwrap_or(T::zero());
    let dead = T::epsilon() * smax * T::from_f64_lossy(m as f64);
    for j in 0..n {
        if s[j] > dead && s[j] > T::zero() {
            continue;
        }
        // Gram-Schmidt a standard basis vector against the previous columns.
        let mut filled = false;
        for e in 0..m {
            let mut cand = vec![T::zero(); m];
            cand[e] = T::one();
            for _ in 0..2 {
                for c in 0..n {
                    if c == j {
                        continue;
                    }
                    let col = u.col(c);
                    let dot: T = col.iter().zip(&cand).map(|(&a, &b)| a * b).sum();
                    for (x, &a) in cand.iter_mut().zip(col) {
                        *x -= dot * a;
                    }
                }
            }
            let norm = cand.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::from_f64_lossy(0.25) {
                let inv = norm.recip();
                for i in 0..m {
                    u.set(i, j, cand[i] * inv);
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "orthonormal completion failed");
    }
}

/// Solves `(G + ridge I) x = b` for symmetric positive semidefinite `G`
/// via Cholesky; `b` holds one or more right-hand sides (columns).
pub fn solve_spd_ridge<T: Scalar>(g: &Matrix<T>, b: &Matrix<T>, ridge: T) -> Result<Matrix<T>> {
    let n = g.rows();
    if g.cols() != n || b.rows() != n {
        return Err(Error::ShapeMismatch("solve_spd_ridge".into()));
    }
    let mut l = g.clone();
    for i in 0..n {
        let v = l.get(i, i) + ridge;
        l.set(i, i, v);
    }
    // In-place lower Cholesky.
    for j in 0..n {
        let mut d = l.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if d <= T::zero() {
            // Semidefinite with roundoff: bump the pivot.
            d = T::epsilon() * (l.get(j, j).abs() + T::one());
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut v = l.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / d);
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        // Forward solve L y = b.
        for i in 0..n {
            let mut v = x.get(i, c);
            for k in 0..i {
                v -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, v / l.get(i, i));
        }
        // Backward solve L^T x = y.
        for i in (0..n).rev() {
            let mut v = x.get(i, c);
            for k in i + 1..n {
                v -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, v / l.get(i, i));
        }
    }
    Ok(x)
}

/// Spectral norm via the Jacobi SVD.
pub fn spectral_norm<T: Scalar>(a: &Matrix<T>) -> T {
    svd(a).s.first().copied().unwrap_or(T::zero())
}

/// Moore-Penrose pseudoinverse with relative cutoff `rcond * sigma_max`.
pub fn pinv<T: Scalar>(a: &Matrix<T>, rcond: T) -> Matrix<T> {
    let dec = svd(a);
    let cutoff = dec.s.first().copied().unwrap_or(T::zero()) * rcond;
    let k = dec.s.len();
    let mut vs = dec.v.clone();
    for j in 0..k {
        let inv = if dec.s[j] > cutoff && dec.s[j] > T::zero() {
            dec.s[j].recip()
        } else {
            T::zero()
        };
        for i in 0..vs.rows() {
            let v = vs.get(i, j) * inv;
            vs.set(i, j, v);
        }
    }
    vs.matmul_nt(&dec.u)
}

/// Appends orthonormal columns (Gram-Schmidt over the standard basis) until
/// the matrix has `total_cols` columns.
pub fn extend_orthonormal<T: Scalar>(m: &Matrix<T>, total_cols: usize) -> Matrix<T> {
    let rows = m.rows();
    assert!(total_cols <= rows, "cannot exceed the ambient dimension");
    let mut out = Matrix::zeros(rows, total_cols);
    for j in 0..m.cols().min(total_cols) {
        for i in 0..rows {
            out.set(i, j, m.get(i, j));
        }
    }
    let mut filled = m.cols().min(total_cols);
    let mut cand_src = 0;
    while filled < total_cols {
        let mut cand = vec![T::zero(); rows];
        cand[cand_src % rows] = T::one();
        cand_src += 1;
        for _ in 0..2 {
            for c in 0..filled {
                let col = out.col(c);
                let dot: T = col.iter().zip(&cand).map(|(&a, &b)| a * b).sum();
                for (x, &a) in cand.iter_mut().zip(col) {
                    *x -= dot * a;
                }
            }
        }
        let norm = cand.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::from_f64_lossy(0.25) {
            let inv = norm.recip();
            for i in 0..rows {
                out.set(i, filled, cand[i] * inv);
            }
            filled += 1;
        }
    }
    out
}

/// `|| A^T A - I ||_F`, the orthonormality defect used by invariant checks.
pub fn orthonormality_defect<T: Scalar>(a: &Matrix<T>) -> T {
    let g = a.matmul_tn(a);
    let mut s = T::zero();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let d = g.get(i, j) - if i == j { T::one() } else { T::zero() };
            s += d * d;
        }
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(r: usize, c: usize, rng: &mut SplitMix64) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        let scale = b.fro_norm().max(1.0);
        let mut d = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            d += (x - y) * (x - y);
        }
        assert!(d.sqrt() <= tol * scale, "diff {} scale {}", d.sqrt(), scale);
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let mut rng = SplitMix64::new(1);
        for &(m, n) in &[(6, 4), (4, 4), (5, 2), (9, 1)] {
            let x = random_matrix(m, n, &mut rng);
            let Qr { q, r } = qr_economic(&x);
            assert!(orthonormality_defect(&q) < 1e-13);
            assert_close(&q.matmul(&r), &x, 1e-13);
            for i in 0..r.rows() {
                assert!(r.get(i, i) >= 0.0);
                for j in 0..i {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn qr_of_orthonormal_input_gives_identity_r() {
        let mut rng = SplitMix64::new(2);
        let x = random_matrix(8, 3, &mut rng);
        let q0 = qr_economic(&x).q;
        let Qr { q, r } = qr_economic(&q0);
        assert_close(&r, &Matrix::identity(3), 1e-12);
        assert_close(&q, &q0, 1e-12);
    }

    #[test]
    fn pivoted_qr_handles_rank_deficiency() {
        let mut rng = SplitMix64::new(3);
        let a = random_matrix(6, 2, &mut rng);
        let b = random_matrix(2, 4, &mut rng);
        let x = a.matmul(&b); // rank 2, 6x4
        let PivotedQr { q, r, perm } = qr_pivoted(&x);
        assert!(orthonormality_defect(&q) < 1e-12);
        // Q R = X P, i.e. column perm[j] of X.
        let qr = q.matmul(&r);
        for j in 0..4 {
            for i in 0..6 {
                assert!((qr.get(i, j) - x.get(i, perm[j])).abs() < 1e-12);
            }
        }
        assert!(r.get(2, 2).abs() < 1e-10 * r.get(0, 0));
        assert!(r.get(3, 3).abs() < 1e-10 * r.get(0, 0));
    }

    #[test]
    fn svd_reconstructs_tall_wide_and_square() {
        let mut rng = SplitMix64::new(4);
        for &(m, n) in &[(7, 3), (3, 7), (5, 5), (4, 1), (1, 4)] {
            let a = random_matrix(m, n, &mut rng);
            let Svd { u, s, v } = svd(&a);
            assert!(orthonormality_defect(&u) < 1e-12, "{m}x{n} U");
            assert!(orthonormality_defect(&v) < 1e-12, "{m}x{n} V");
            for w in s.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let mut us = u.clone();
            for j in 0..s.len() {
                for i in 0..m {
                    let x = us.get(i, j) * s[j];
                    us.set(i, j, x);
                }
            }
            assert_close(&us.matmul_nt(&v), &a, 1e-12);
        }
    }

    #[test]
    fn svd_resolves_tiny_singular_values() {
        // diag(1, 1e-9, 0) embedded in a rotated frame.
        let mut rng = SplitMix64::new(5);
        let q1 = qr_economic(&random_matrix(6, 3, &mut rng)).q;
        let q2 = qr_economic(&random_matrix(5, 3, &mut rng)).q;
        let mut d = Matrix::zeros(3, 3);
        d.set(0, 0, 1.0);
        d.set(1, 1, 1e-9);
        let a = q1.matmul(&d).matmul_nt(&q2);
        let s = svd(&a).s;
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] - 1e-9).abs() < 1e-12 * 1.0);
        assert!(s[2] < 1e-14);
    }

    #[test]
    fn svd_of_zero_matrix_completes_basis() {
        let a = Matrix::<f64>::zeros(4, 2);
        let Svd { u, s, .. } = svd(&a);
        assert!(s.iter().all(|&x| x == 0.0));
        assert!(orthonormality_defect(&u) < 1e-14);
    }

    #[test]
    fn spd_solve_with_ridge() {
        let mut rng = SplitMix64::new(6);
        let a = random_matrix(8, 4, &mut rng);
        let g = a.matmul_tn(&a);
        let x_true = random_matrix(4, 2, &mut rng);
        let b = g.matmul(&x_true);
        let x = solve_spd_ridge(&g, &b, 0.0).unwrap();
        assert_close(&x, &x_true, 1e-9);
    }

    #[test]
    fn pinv_matches_normal_solution() {
        let mut rng = SplitMix64::new(7);
        let a = random_matrix(8, 3, &mut rng);
        let b = random_matrix(8, 1, &mut rng);
        let x = pinv(&a, 1e-12).matmul(&b);
        // Normal equations route.
        let x2 = solve_spd_ridge(&a.matmul_tn(&a), &a.matmul_tn(&b), 0.0).unwrap();
        assert_close(&x, &x2, 1e-9);
    }
}
