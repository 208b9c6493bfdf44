//! Theory-facing diagnostics: canonical angles between subspaces, factor
//! incoherence, the sampling threshold `p*`, full-observation core oracles
//! with the partial/full residual sandwich, the Kronecker angle bound, and
//! PSNR for image experiments.

use crate::error::{Error, Result};
use crate::linalg::{orthonormality_defect, qr_economic, solve_spd_ridge, spectral_norm, svd};
use crate::observation::ObservationSet;
use crate::rng::derive_key;
use crate::scalar::Scalar;
use crate::tensor::{kron, DenseTensor, Matrix};

/// Canonical angles between two equal-dimension subspaces, in radians,
/// descending; `sin_max = sin(theta_1)` is the usual subspace distance.
#[derive(Clone, Debug)]
pub struct AngleReport<T> {
    pub angles: Vec<T>,
    pub sin_max: T,
}

/// Canonical angles between `span(X)` and `span(Y)`.
///
/// Inputs need full column rank and matching shapes; they are orthonormalized
/// internally, then `theta_j = arccos(sigma_j(Y^T X))`.
pub fn canonical_angles<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<AngleReport<T>> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(Error::ShapeMismatch(format!(
            "canonical angles need matching shapes, got {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if x.cols() == 0 || x.cols() > x.rows() {
        return Err(Error::InvalidArgument("need 1 <= k <= n columns".into()));
    }
    let qx = full_rank_q(x)?;
    let qy = full_rank_q(y)?;
    let cosines = svd(&qy.matmul_tn(&qx)).s;
    // Descending cosines correspond to ascending angles; report descending.
    let mut angles: Vec<T> = cosines
        .iter()
        .map(|&c| c.min(T::one()).max(-T::one()).acos())
        .collect();
    angles.reverse();
    let sin_max = angles.first().map(|&a| a.sin()).unwrap_or(T::zero());
    Ok(AngleReport { angles, sin_max })
}

fn full_rank_q<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>> {
    let dec = qr_economic(x);
    let scale = x.fro_norm();
    for j in 0..dec.r.rows() {
        if dec.r.get(j, j) <= T::epsilon() * T::from_f64_lossy(100.0) * scale {
            return Err(Error::InvalidArgument(
                "rank-deficient input to canonical_angles".into(),
            ));
        }
    }
    Ok(dec.q)
}

/// The smallest incoherence parameter `mu` with
/// `||A||_{2,inf} <= sqrt(mu r / n)` for an orthonormal `A` (`n x r`):
/// `mu = ||A||_{2,inf}^2 * n / r`, always in `[1, n/r]`.
pub fn incoherence<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    if orthonormality_defect(a) > T::from_f64_lossy(1e-8) {
        return Err(Error::InvalidArgument(
            "incoherence needs orthonormal columns".into(),
        ));
    }
    let row_norm = a.max_row_norm();
    Ok(row_norm * row_norm * T::from_f64_lossy(a.rows() as f64)
        / T::from_f64_lossy(a.cols() as f64))
}

/// Sampling threshold
/// `p* = (10/3) (log(2 prod I_k) + 5) max_n prod_{k != n} mu_k r_k / I_k`;
/// the recovery guarantees ask for `p` in `[4 p*, 0.5]`.
pub fn sampling_threshold(mu: &[f64], ranks: &[usize], dims: &[usize]) -> f64 {
    assert!(
        mu.len() == ranks.len() && ranks.len() == dims.len(),
        "argument lengths must agree"
    );
    let total: f64 = dims.iter().map(|&d| d as f64).product();
    let lead = (10.0 / 3.0) * ((2.0 * total).ln() + 5.0);
    let max_term = (0..dims.len())
        .map(|n| {
            (0..dims.len())
                .filter(|&k| k != n)
                .map(|k| mu[k] * ranks[k] as f64 / dims[k] as f64)
                .product::<f64>()
        })
        .fold(0.0f64, f64::max);
    lead * max_term
}

/// Full-observation core oracle: the optimal core for orthonormal factors is
/// the projection `X_opt = [[T; A^T]]`; returns it with the residual
/// `phi = ||[[X_opt; A]] - T||_F`.
pub fn oracle_core_fit<T: Scalar>(
    t_full: &DenseTensor<T>,
    factors: &[Matrix<T>],
) -> Result<(DenseTensor<T>, T)> {
    check_orthonormal(factors)?;
    let refs: Vec<&Matrix<T>> = factors.iter().collect();
    let x_opt = t_full.multi_mode_product_t(&refs)?;
    let back = x_opt.multi_mode_product(&refs)?;
    let phi = back.sub(t_full).fro_norm();
    Ok((x_opt, phi))
}

fn check_orthonormal<T: Scalar>(factors: &[Matrix<T>]) -> Result<()> {
    for (n, a) in factors.iter().enumerate() {
        if orthonormality_defect(a) > T::from_f64_lossy(1e-8) {
            return Err(Error::InvalidArgument(format!(
                "factor {n} is not orthonormal"
            )));
        }
    }
    Ok(())
}

/// Outcome of the partial-vs-full core fit comparison.
#[derive(Clone, Debug)]
pub struct SandwichReport {
    /// Fraction of trials with `psi/phi` inside `[1, 3/sqrt(2) + 0.01]`.
    pub fraction_in_bound: f64,
    /// Smallest and largest observed ratio.
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// True when `p < 4 p*` for the supplied factors, i.e. the guarantee
    /// regime assumption fails (the ratios are still computed).
    pub outside_regime: bool,
    pub p_star: f64,
    pub trials: usize,
}

/// For each seed, draws a Bernoulli(`p`) mask, solves the mask-restricted
/// core least squares, and compares its full residual `psi` against the
/// full-observation optimum `phi`.  `psi >= phi` holds deterministically;
/// the upper end tests the `3/sqrt(2)` sandwich.
pub fn sandwich_test<T: Scalar>(
    t_full: &DenseTensor<T>,
    factors: &[Matrix<T>],
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<SandwichReport> {
    check_orthonormal(factors)?;
    let dims = t_full.dims();
    let ranks: Vec<usize> = factors.iter().map(|f| f.cols()).collect();
    let mu: Vec<f64> = factors
        .iter()
        .map(|a| incoherence(a).map(|m| m.to_f64_lossy()))
        .collect::<Result<_>>()?;
    let p_star = sampling_threshold(&mu, &ranks, dims);
    let outside_regime = p < 4.0 * p_star;

    let (_, phi) = oracle_core_fit(t_full, factors)?;
    let bound = 3.0 / 2.0f64.sqrt() + 0.01;
    let mut in_bound = 0usize;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    let refs: Vec<&Matrix<T>> = factors.iter().collect();
    for trial in 0..trials {
        let mask = ObservationSet::<T>::sample_mask(
            dims,
            p,
            derive_key(seed, &[0x7377_6963, trial as u64]),
        )?;
        if mask.is_empty() {
            min_ratio = f64::NAN;
            continue;
        }
        let obs = ObservationSet::project(t_full, &mask)?;
        let x_tilde = restricted_core_fit(&obs, factors, &ranks)?;
        let psi = x_tilde.multi_mode_product(&refs)?.sub(t_full).fro_norm();
        let ratio = (psi / phi.max(T::epsilon())).to_f64_lossy();
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
        if (1.0 - 1e-10..=bound).contains(&ratio) {
            in_bound += 1;
        }
    }
    Ok(SandwichReport {
        fraction_in_bound: in_bound as f64 / trials.max(1) as f64,
        min_ratio,
        max_ratio,
        outside_regime,
        p_star,
        trials,
    })
}

/// Exact mask-restricted core least squares
/// `min_X ||Pi([[X; A]] - T)||_F` by normal equations on the Kronecker rows.
fn restricted_core_fit<T: Scalar>(
    obs: &ObservationSet<T>,
    factors: &[Matrix<T>],
    ranks: &[usize],
) -> Result<DenseTensor<T>> {
    let q: usize = ranks.iter().product();
    let count = obs.len();
    let mut gram = Matrix::<T>::zeros(q, q);
    let mut rhs = Matrix::<T>::zeros(q, 1);
    let mut row = vec![T::zero(); q];
    for k in 0..count {
        let idx = obs.multi_index_of(k);
        row[0] = T::one();
        let mut width = 1usize;
        for (m, f) in factors.iter().enumerate() {
            for j in (0..ranks[m]).rev() {
                let a = f.get(idx[m], j);
                for c in 0..width {
                    row[j * width + c] = row[c] * a;
                }
            }
            width *= ranks[m];
        }
        let t = obs.values()[k];
        for a in 0..q {
            rhs.data_mut()[a] += t * row[a];
            for c in a..q {
                gram.data_mut()[a + q * c] += row[a] * row[c];
            }
        }
    }
    for a in 0..q {
        for c in 0..a {
            let v = gram.get(c, a);
            gram.set(a, c, v);
        }
    }
    let mut tr = T::zero();
    for a in 0..q {
        tr += gram.get(a, a);
    }
    let ridge = T::from_f64_lossy(1e-14) * tr / T::from_f64_lossy(q as f64);
    let sol = solve_spd_ridge(&gram, &rhs, ridge)?;
    DenseTensor::from_data(ranks, sol.data().to_vec())
}

/// Checks the Kronecker angle inequality
/// `||sin Theta(M, M_hat)|| <= 2^{(N-1)/2} max_k ||sin Theta(A_k, A_hat_k)||`
/// for `M = A_1 kron ... kron A_N`.  Returns `(lhs, rhs, holds)`; the bound
/// is deterministic and must hold on every input.
pub fn kron_angle_check<T: Scalar>(
    a_list: &[Matrix<T>],
    ahat_list: &[Matrix<T>],
) -> Result<(T, T, bool)> {
    if a_list.len() != ahat_list.len() || a_list.is_empty() {
        return Err(Error::ShapeMismatch("factor list lengths".into()));
    }
    check_orthonormal(a_list)?;
    check_orthonormal(ahat_list)?;
    let mut max_sin = T::zero();
    for (a, ahat) in a_list.iter().zip(ahat_list) {
        if a.rows() != ahat.rows() || a.cols() != ahat.cols() {
            return Err(Error::ShapeMismatch("factor pair shapes".into()));
        }
        max_sin = max_sin.max(sin_theta_norm(a, ahat));
    }
    let mut m = a_list[0].clone();
    let mut mhat = ahat_list[0].clone();
    for (a, ahat) in a_list.iter().zip(ahat_list).skip(1) {
        m = kron(&m, a);
        mhat = kron(&mhat, ahat);
    }
    let lhs = sin_theta_norm(&m, &mhat);
    let n = a_list.len() as f64;
    let rhs = T::from_f64_lossy(2.0f64.powf((n - 1.0) / 2.0)) * max_sin;
    let holds = lhs <= rhs + T::from_f64_lossy(1e-10);
    Ok((lhs, rhs, holds))
}

/// `||sin Theta(A, B)||_2 = ||(I - B B^T) A||_2` for orthonormal inputs of
/// equal shape; the projector form stays accurate near zero angles.
fn sin_theta_norm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    let mut resid = a.clone();
    let proj = b.matmul(&b.matmul_tn(a));
    for (r, &p) in resid.data_mut().iter_mut().zip(proj.data()) {
        *r -= p;
    }
    spectral_norm(&resid).min(T::one())
}

/// Peak signal-to-noise ratio `10 log10(max_val^2 / MSE)` in dB;
/// `f64::INFINITY` when the inputs agree exactly.
pub fn psnr<T: Scalar>(reference: &DenseTensor<T>, test: &DenseTensor<T>, max_val: f64) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(Error::ShapeMismatch(format!(
            "psnr dims {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    if max_val <= 0.0 {
        return Err(Error::InvalidArgument("max_val must be positive".into()));
    }
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}
