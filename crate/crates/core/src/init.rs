//! HOSVD, best multilinear-rank approximation (orthogonal-iteration ALS),
//! dense node-tensor fitting, and solver initialization.
//!
//! Initialization follows the zero-fill recipe: rescale the observed entries
//! by `prod I_n / |Omega|`, take the best rank-`d0` multilinear approximation
//! of that dense surrogate, then fit the network node tensors to its core.
//! A loose tolerance (1e-2) is enough at this stage.

use crate::error::{Error, Result};
use crate::graph::{
    contract, cp_diagonal_node, node_environment, NodeTensor, NodeTensorSet, TensorDiagram,
};
use crate::linalg::{extend_orthonormal, solve_spd_ridge, svd};
use crate::model::TuckerWrappedModel;
use crate::observation::ObservationSet;
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Matrix};

/// HOSVD output: orthonormal factors, core, and per-mode singular values.
#[derive(Clone, Debug)]
pub struct HosvdResult<T> {
    pub core: DenseTensor<T>,
    pub factors: Vec<Matrix<T>>,
    pub singular_values: Vec<Vec<T>>,
}

/// Rank selection for [`hosvd`].
#[derive(Clone, Debug)]
pub enum HosvdMode<'a> {
    /// Keep the numerical rank of each unfolding
    /// (`sigma_j > max(dims) * eps * sigma_1`, floor of 1).
    Economic,
    /// Keep the leading `r_n` singular vectors per mode.
    Truncated(&'a [usize]),
}

pub fn hosvd<T: Scalar>(t: &DenseTensor<T>, mode: HosvdMode) -> Result<HosvdResult<T>> {
    let n_modes = t.order();
    if let HosvdMode::Truncated(r) = &mode {
        if r.len() != n_modes || r.iter().zip(t.dims()).any(|(&rn, &d)| rn == 0 || rn > d) {
            return Err(Error::InvalidArgument(format!(
                "invalid rank vector {r:?} for dims {:?}",
                t.dims()
            )));
        }
    }
    let max_dim = T::from_f64_lossy(*t.dims().iter().max().unwrap() as f64);
    let mut factors = Vec::with_capacity(n_modes);
    let mut singular_values = Vec::with_capacity(n_modes);
    for n in 0..n_modes {
        let dec = svd(&t.unfold(n)?);
        let keep = match &mode {
            HosvdMode::Economic => {
                let s1 = dec.s.first().copied().unwrap_or(T::zero());
                let cut = max_dim * T::epsilon() * s1;
                dec.s.iter().filter(|&&s| s > cut).count().max(1)
            }
            HosvdMode::Truncated(r) => r[n],
        };
        let mut u = Matrix::zeros(dec.u.rows(), keep.min(dec.s.len()));
        for j in 0..u.cols() {
            for i in 0..u.rows() {
                u.set(i, j, dec.u.get(i, j));
            }
        }
        let u = if u.cols() < keep {
            extend_orthonormal(&u, keep)
        } else {
            u
        };
        let mut s: Vec<T> = dec.s.iter().take(keep).copied().collect();
        s.resize(keep, T::zero());
        factors.push(u);
        singular_values.push(s);
    }
    let refs: Vec<&Matrix<T>> = factors.iter().collect();
    let core = t.multi_mode_product_t(&refs)?;
    Ok(HosvdResult {
        core,
        factors,
        singular_values,
    })
}

/// Best multilinear-rank approximation by orthogonal-iteration ALS.
#[derive(Clone, Debug)]
pub struct MultilinearApprox<T> {
    pub core: DenseTensor<T>,
    pub factors: Vec<Matrix<T>>,
    /// `||T - [[core; factors]]||_F` after seeding and after each sweep;
    /// nonincreasing.
    pub objective_trace: Vec<T>,
}

pub fn best_multilinear_approx<T: Scalar>(
    t: &DenseTensor<T>,
    ranks: &[usize],
    tol: T,
    max_iters: usize,
) -> Result<MultilinearApprox<T>> {
    let n_modes = t.order();
    if ranks.len() != n_modes || ranks.iter().zip(t.dims()).any(|(&r, &d)| r == 0 || r > d) {
        return Err(Error::InvalidArgument(format!(
            "invalid rank vector {ranks:?} for dims {:?}",
            t.dims()
        )));
    }
    let norm_sq = {
        let n = t.fro_norm();
        n * n
    };
    let seed = hosvd(t, HosvdMode::Truncated(ranks))?;
    let mut factors = seed.factors;
    let objective = |core: &DenseTensor<T>| {
        let c = core.fro_norm();
        (norm_sq - c * c).max(T::zero()).sqrt()
    };
    let mut core = seed.core;
    let mut trace = vec![objective(&core)];
    for _ in 0..max_iters {
        for n in 0..n_modes {
            // Project every other mode, then refresh this factor.
            let mut y = t.clone();
            for k in 0..n_modes {
                if k != n {
                    y = y.mode_product_t(&factors[k], k)?;
                }
            }
            let dec = svd(&y.unfold(n)?);
            let avail = dec.s.len().min(ranks[n]);
            let mut u = Matrix::zeros(y.dims()[n], avail);
            for j in 0..avail {
                for i in 0..u.rows() {
                    u.set(i, j, dec.u.get(i, j));
                }
            }
            factors[n] = if avail < ranks[n] {
                extend_orthonormal(&u, ranks[n])
            } else {
                u
            };
            if n == n_modes - 1 {
                core = y.mode_product_t(&factors[n], n)?;
            }
        }
        let obj = objective(&core);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if prev - obj < tol * prev.max(T::epsilon()) {
            break;
        }
    }
    Ok(MultilinearApprox {
        core,
        factors,
        objective_trace: trace,
    })
}

/// Fits node tensors so the diagram contracts to `g0`, by alternating exact
/// dense least squares per node.  Returns the node set and the relative fit
/// error after each sweep (nonincreasing).
pub fn fit_node_tensors<T: Scalar>(
    diagram: &TensorDiagram,
    g0: &DenseTensor<T>,
    tol: T,
    max_iters: usize,
    seed: u64,
) -> Result<(NodeTensorSet<T>, Vec<T>)> {
    let issues = diagram.validate();
    if !issues.is_empty() {
        return Err(Error::InvalidDiagram(issues.join("; ")));
    }
    if diagram.d() != g0.dims() {
        return Err(Error::ShapeMismatch(format!(
            "diagram d {:?} vs core dims {:?}",
            diagram.d(),
            g0.dims()
        )));
    }
    let mut nodes = NodeTensorSet::random(diagram, seed);
    seed_cp_from_singular_vectors(diagram, &mut nodes, g0)?;
    let g0_norm = g0.fro_norm().max(T::epsilon());
    let order = node_update_order(diagram);
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        for &k in &order {
            if Some(k) == cp_diagonal_node(diagram) {
                fit_cp_diagonal(diagram, &mut nodes, g0)?;
            } else {
                fit_dense_node(diagram, &mut nodes, g0, k)?;
            }
        }
        let err = contract(diagram, &nodes)?.sub(g0).fro_norm() / g0_norm;
        let stop = err <= tol
            || trace
                .last()
                .is_some_and(|&prev: &T| prev - err < T::from_f64_lossy(1e-12) * prev);
        trace.push(err);
        if stop {
            break;
        }
    }
    Ok((nodes, trace))
}

/// Seeds CP matrices with leading singular vectors of the target's
/// unfoldings (random columns beyond the mode rank are kept); a random start
/// tends to swamp, this one does not.
fn seed_cp_from_singular_vectors<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &mut NodeTensorSet<T>,
    g0: &DenseTensor<T>,
) -> Result<()> {
    if cp_diagonal_node(diagram).is_none() {
        return Ok(());
    }
    for m in 0..diagram.order() {
        let leg = diagram.outgoing()[m];
        let shape = diagram.node_shape(leg.node);
        let (d_m, r) = (shape[0], shape[1]);
        let dec = svd(&g0.unfold(m)?);
        if let NodeTensor::Dense(t) = nodes.tensor_mut(leg.node) {
            let keep = r.min(dec.s.len()).min(d_m);
            for j in 0..keep {
                for i in 0..d_m {
                    t.data_mut()[i + d_m * j] = dec.u.get(i, j);
                }
            }
        }
    }
    Ok(())
}

/// Ascending node ids, CP diagonal last.
pub(crate) fn node_update_order(diagram: &TensorDiagram) -> Vec<usize> {
    let diag = cp_diagonal_node(diagram);
    let mut order: Vec<usize> = (0..diagram.node_count()).filter(|&k| Some(k) != diag).collect();
    if let Some(d) = diag {
        order.push(d);
    }
    order
}

fn fit_dense_node<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &mut NodeTensorSet<T>,
    g0: &DenseTensor<T>,
    k: usize,
) -> Result<()> {
    let env = node_environment(diagram, nodes, k)?;
    let q_int: usize = env
        .internal_slots
        .iter()
        .map(|&s| diagram.slot_weight(k, s))
        .product();
    let own_dims: Vec<usize> = env
        .outgoing_slots
        .iter()
        .map(|&(s, _)| diagram.slot_weight(k, s))
        .collect();
    let own_size: usize = own_dims.iter().product();

    // Permute the target so the other modes lead (matching env rows) and
    // this node's own modes trail.
    let mut mode_perm: Vec<usize> = env.other_modes.clone();
    mode_perm.extend(env.outgoing_slots.iter().map(|&(_, m)| m));
    let g0p = g0.permute(&mode_perm);
    let rows: usize = g0.len() / own_size.max(1);
    let g0m = g0p.as_matrix(rows, own_size)?;

    let x = if q_int == 0 || env.internal_slots.is_empty() {
        // No internal legs: the node is the (scaled) target itself.
        let scale = env.matrix.get(0, 0);
        if scale == T::zero() {
            return Err(Error::InvalidDiagram(
                "degenerate environment for isolated node".into(),
            ));
        }
        let mut x = g0m.clone();
        x.scale(scale.recip());
        x
    } else {
        let gram = env.matrix.matmul_tn(&env.matrix);
        let rhs = env.matrix.matmul_tn(&g0m);
        let mut tr = T::zero();
        for i in 0..gram.rows() {
            tr += gram.get(i, i);
        }
        let ridge = T::from_f64_lossy(1e-12) * tr / T::from_f64_lossy(gram.rows() as f64);
        solve_spd_ridge(&gram, &rhs, ridge)?
    };

    // x is (internal dims, own dims) column-major; restore slot order.
    let mut dims: Vec<usize> = env
        .internal_slots
        .iter()
        .map(|&s| diagram.slot_weight(k, s))
        .collect();
    dims.extend(&own_dims);
    let slot_count = diagram.nodes()[k].slots.len();
    let mut current_order: Vec<usize> = env.internal_slots.clone();
    current_order.extend(env.outgoing_slots.iter().map(|&(s, _)| s));
    let mut perm = vec![0usize; slot_count];
    for (pos, &slot) in current_order.iter().enumerate() {
        perm[slot] = pos;
    }
    let tens = DenseTensor::from_data(&dims, x.data().to_vec())?.permute(&perm);
    *nodes.tensor_mut(k) = NodeTensor::Dense(tens);
    Ok(())
}

/// Exact least squares in the CP diagonal entries:
/// `Gram[l,m] = prod_n (B_n^T B_n)[l,m]`, `rhs_l = <G0, outer_l>`.
fn fit_cp_diagonal<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &mut NodeTensorSet<T>,
    g0: &DenseTensor<T>,
) -> Result<()> {
    let k = cp_diagonal_node(diagram).expect("cp diagram");
    let r = match nodes.tensor(k) {
        NodeTensor::Diagonal(l) => l.len(),
        _ => unreachable!(),
    };
    let n_modes = diagram.order();
    let mats: Vec<Matrix<T>> = (0..n_modes)
        .map(|m| {
            let leg = diagram.outgoing()[m];
            match nodes.tensor(leg.node) {
                NodeTensor::Dense(t) => t.as_matrix(t.dims()[0], r),
                _ => Err(Error::InvalidDiagram("cp neighbor must be dense".into())),
            }
        })
        .collect::<Result<_>>()?;
    let mut gram = Matrix::from_fn(r, r, |_, _| T::one());
    for b in &mats {
        let g = b.matmul_tn(b);
        for i in 0..r {
            for j in 0..r {
                let v = gram.get(i, j) * g.get(i, j);
                gram.set(i, j, v);
            }
        }
    }
    let mut rhs = Matrix::zeros(r, 1);
    let mut buf_a: Vec<T> = Vec::with_capacity(g0.len());
    let mut buf_b: Vec<T> = Vec::new();
    for l in 0..r {
        buf_a.clear();
        buf_a.extend_from_slice(g0.data());
        let mut width = g0.len();
        for (n, b) in mats.iter().enumerate() {
            let d = g0.dims()[n];
            let chunk = width / d;
            buf_b.clear();
            buf_b.resize(chunk, T::zero());
            for j in 0..d {
                let w = b.get(j, l);
                if w == T::zero() {
                    continue;
                }
                for c in 0..chunk {
                    buf_b[c] += w * buf_a[c * d + j];
                }
            }
            std::mem::swap(&mut buf_a, &mut buf_b);
            width = chunk;
        }
        rhs.set(l, 0, buf_a[0]);
    }
    let mut tr = T::zero();
    for i in 0..r {
        tr += gram.get(i, i);
    }
    let ridge = T::from_f64_lossy(1e-12) * tr / T::from_f64_lossy(r as f64);
    let lam = solve_spd_ridge(&gram, &rhs, ridge)?;
    *nodes.tensor_mut(k) = NodeTensor::Diagonal(lam.data().to_vec());
    Ok(())
}

/// Builds the initial model for the completion loop: best rank-`d0`
/// approximation of the rescaled zero-filled observations, then node fitting
/// on the resulting core.
pub fn initialize<T: Scalar>(
    observed: &ObservationSet<T>,
    diagram: &TensorDiagram,
    d0: &[usize],
    tol: T,
    seed: u64,
) -> Result<TuckerWrappedModel<T>> {
    if observed.is_empty() {
        return Err(Error::EmptyObservations);
    }
    if d0.iter().zip(observed.dims()).any(|(&r, &d)| r == 0 || r > d) {
        return Err(Error::InvalidArgument(format!(
            "initial ranks {d0:?} must be in [1, dims] for dims {:?}",
            observed.dims()
        )));
    }
    if diagram.d() != d0 {
        return Err(Error::ShapeMismatch(format!(
            "diagram outgoing weights {:?} must equal d0 {d0:?}",
            diagram.d()
        )));
    }
    let z = observed.scaled_zero_fill()?;
    let ml = best_multilinear_approx(&z, d0, tol, 50)?;
    let (nodes, _) = fit_node_tensors(diagram, &ml.core, tol, 60, seed)?;
    TuckerWrappedModel::new(ml.factors, diagram.clone(), nodes)
}
