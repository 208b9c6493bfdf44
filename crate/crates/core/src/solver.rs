//! The two-level alternating least squares completion loop.
//!
//! Each outer iteration updates the wrapper factors `A^(n)` one mode at a
//! time: the observation-restricted least squares problem decouples into one
//! small problem per tensor row, the solution is re-orthonormalized by an
//! economic QR, and the triangular factor is absorbed into the node carrying
//! that mode.  The inner level then refits the network node tensors against
//! the observations until the core stabilizes, and finally the multilinear
//! ranks are shrunk wherever a core unfolding exceeds its prescribed
//! condition bound.
//!
//! Node least squares go through either exact ridge-floored normal equations
//! (small systems) or warm-started LSQR on the matrix-free observation
//! operator (large ones); warm starts keep the data misfit nonincreasing
//! across node updates either way.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{
    contract, cp_diagonal_node, node_mode_update, NodeTensor, NodeTensorSet, SlotKind,
    TensorDiagram, TopologyKind,
};
use crate::init::{self, node_update_order};
use crate::linalg::{qr_economic, qr_pivoted, solve_spd_ridge, spectral_norm, svd};
use crate::lsqr::{lsqr_warm, LinearOperator};
use crate::model::TuckerWrappedModel;
use crate::observation::ObservationSet;
use crate::rng::{derive_key, CounterRng};
use crate::scalar::Scalar;
use crate::tensor::{multi_index, DenseTensor, Matrix};

const INIT_TOL: f64 = 1e-2;
const RIDGE_REL: f64 = 1e-12;
const DIRECT_BUDGET: usize = 120_000_000;
const CORE_LSQR_ATOL: f64 = 1e-6;
const CORE_LSQR_MAXIT: usize = 20;
const NODE_LSQR_ATOL: f64 = 1e-9;
const NODE_LSQR_MAXIT: usize = 60;
const QR_RANK_TOL: f64 = 1e-12;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 5;
const TRUNCATION_MAX_PASSES: usize = 32;

/// How the per-mode factor least squares is solved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FactorStrategy {
    /// Exact row-wise normal equations with a ridge floor.
    DirectRowwise,
    /// Row-wise normal equations on at most `ceil(c * r_n)` observations per
    /// row, chosen deterministically from `(seed, iter, mode, row)`.
    SubsampledRowwise { c: f64 },
    /// Matrix-free LSQR over the whole factor, warm-started at the previous
    /// value; `max_mv` bounds the number of operator products.
    Iterative { max_mv: usize, atol: f64 },
}

/// Core topology requested for a solve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoreTopology {
    Single,
    Cp { rank: usize },
    Tt { weights: Vec<usize> },
    Tr { weights: Vec<usize> },
}

impl CoreTopology {
    pub fn build(&self, d: &[usize]) -> Result<TensorDiagram> {
        match self {
            CoreTopology::Single => {
                TensorDiagram::make_topology(TopologyKind::Single, d.len(), &[], d)
            }
            CoreTopology::Cp { rank } => {
                TensorDiagram::make_topology(TopologyKind::Cp, d.len(), &[*rank], d)
            }
            CoreTopology::Tt { weights } => {
                TensorDiagram::make_topology(TopologyKind::Tt, d.len(), weights, d)
            }
            CoreTopology::Tr { weights } => {
                TensorDiagram::make_topology(TopologyKind::Tr, d.len(), weights, d)
            }
        }
    }
}

/// Solver parameters.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Initial rank vector `d0` (entrywise at most the tensor dims, and at
    /// least the true multilinear rank for the theory to apply).
    pub d0: Vec<usize>,
    /// Per-mode condition bounds `kappa_n >= 1` for rank truncation.
    pub kappa: Vec<f64>,
    /// Stopping tolerance on the normalized residual.
    pub tol: f64,
    pub max_outer: usize,
    /// Inner sweeps stop when the core's relative change drops below this.
    pub inner_tol: f64,
    pub inner_max: usize,
    pub factor_strategy: FactorStrategy,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(d0: Vec<usize>) -> Self {
        let n = d0.len();
        Self {
            d0,
            kappa: vec![100.0; n],
            tol: 1e-4,
            max_outer: 50,
            inner_tol: 1e-3,
            inner_max: 10,
            factor_strategy: FactorStrategy::DirectRowwise,
            seed: 0,
        }
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        if self.d0.len() != dims.len() || self.kappa.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "d0/kappa must have {} entries",
                dims.len()
            )));
        }
        if self.d0.iter().zip(dims).any(|(&r, &d)| r == 0 || r > d) {
            return Err(Error::InvalidArgument(format!(
                "d0 {:?} out of range for dims {dims:?}",
                self.d0
            )));
        }
        if self.kappa.iter().any(|&k| k < 1.0) {
            return Err(Error::InvalidArgument("kappa entries must be >= 1".into()));
        }
        if self.tol <= 0.0 || self.inner_tol <= 0.0 {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.inner_max == 0 {
            return Err(Error::InvalidArgument("inner_max must be >= 1".into()));
        }
        match self.factor_strategy {
            FactorStrategy::SubsampledRowwise { c } if c < 1.0 => Err(Error::InvalidArgument(
                "subsample factor c must be >= 1".into(),
            )),
            FactorStrategy::Iterative { max_mv, atol } if max_mv < 2 || atol <= 0.0 => Err(
                Error::InvalidArgument("iterative strategy needs max_mv >= 2, atol > 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Diverged,
}

/// One completed outer iteration (iteration 0 is the initialization state).
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iter: usize,
    pub tau_raw: f64,
    pub tau_norm: f64,
    pub ranks: Vec<usize>,
    pub inner_sweeps: usize,
    pub wall_ms: f64,
    /// Per-mode `||sin Theta||` against supplied ground-truth factors.
    pub sin_theta: Option<Vec<f64>>,
    pub events: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
    pub status: SolveStatus,
}

impl SolverTrace {
    pub const CSV_HEADER: &'static str =
        "iter,tau_raw,tau_norm,ranks,inner_sweeps,wall_ms,sin_theta";

    /// CSV serialization.  Wall times are nondeterministic, so experiment
    /// drivers keep `include_wall` off to make reruns byte-identical.
    pub fn to_csv(&self, include_wall: bool) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let ranks = r
                .ranks
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("|");
            let wall = if include_wall {
                format!("{:?}", r.wall_ms)
            } else {
                String::new()
            };
            let sin = match &r.sin_theta {
                Some(v) => v
                    .iter()
                    .map(|x| format!("{x:?}"))
                    .collect::<Vec<_>>()
                    .join("|"),
                None => String::new(),
            };
            s.push_str(&format!(
                "{},{:?},{:?},{},{},{},{}\n",
                r.iter, r.tau_raw, r.tau_norm, ranks, r.inner_sweeps, wall, sin
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Per-solve workspace
// ---------------------------------------------------------------------------

/// Observation index bookkeeping shared across iterations.
struct Workspace {
    /// Per mode, the mode index of every observation.
    mode_idx: Vec<Vec<u32>>,
}

impl Workspace {
    fn new<T: Scalar>(observed: &ObservationSet<T>) -> Self {
        let dims = observed.dims();
        let n_modes = dims.len();
        let count = observed.len();
        let mut mode_idx = vec![Vec::with_capacity(count); n_modes];
        for &l in observed.linear_indices() {
            let mut rem = l as usize;
            for (n, &d) in dims.iter().enumerate() {
                mode_idx[n].push((rem % d) as u32);
                rem /= d;
            }
        }
        Self { mode_idx }
    }

    #[inline]
    fn index_of(&self, obs: usize, mode: usize) -> usize {
        self.mode_idx[mode][obs] as usize
    }
}

// ---------------------------------------------------------------------------
// Factor update
// ---------------------------------------------------------------------------

/// Deterministic context for one factor update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateContext {
    pub seed: u64,
    pub outer_iter: usize,
}

/// Solves (or approximates) the mode-`n` factor least squares problem,
/// holding the core and the other factors fixed.  Returns the
/// unorthogonalized solution `X` plus event notes (rows kept for lack of
/// observations).
pub fn update_factor<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    n: usize,
    strategy: FactorStrategy,
    ctx: UpdateContext,
) -> Result<(Matrix<T>, Vec<String>)> {
    let ws = Workspace::new(observed);
    update_factor_ws(model, observed, &ws, n, strategy, ctx)
}

fn update_factor_ws<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    ws: &Workspace,
    n: usize,
    strategy: FactorStrategy,
    ctx: UpdateContext,
) -> Result<(Matrix<T>, Vec<String>)> {
    let n_modes = model.order();
    if n >= n_modes {
        return Err(Error::ModeOutOfRange {
            mode: n,
            order: n_modes,
        });
    }
    if observed.is_empty() {
        return Err(Error::EmptyMode(n));
    }
    let dims = model.dims();
    let r_n = model.ranks()[n];
    let i_n = dims[n];

    // S = [[G; A_1, .., I, .., A_N]]; observed entry (i_1..i_N) reads the
    // mode-n fiber of S at the other indices.
    let core = model.core()?.clone();
    let mut s = core;
    for k in 0..n_modes {
        if k != n {
            s = s.mode_product(model.factor(k), k)?;
        }
    }
    let s_strides = crate::tensor::strides(s.dims());
    let fiber_stride = s_strides[n];

    // Gather per-observation fibers once.
    let count = observed.len();
    let mut fibers = vec![T::zero(); count * r_n];
    for obs in 0..count {
        let mut base = 0usize;
        for k in 0..n_modes {
            if k != n {
                base += ws.index_of(obs, k) * s_strides[k];
            }
        }
        for j in 0..r_n {
            fibers[obs * r_n + j] = s.data()[base + j * fiber_stride];
        }
    }

    let rows: &[u32] = &ws.mode_idx[n];
    let values = observed.values();

    // Row occupancy.
    let mut row_obs: Vec<Vec<u32>> = vec![Vec::new(); i_n];
    for (obs, &r) in rows.iter().enumerate() {
        row_obs[r as usize].push(obs as u32);
    }
    let mut events = Vec::new();
    let empty_rows = row_obs.iter().filter(|l| l.is_empty()).count();
    if empty_rows == i_n {
        return Err(Error::EmptyMode(n));
    }
    if empty_rows > 0 {
        events.push(format!(
            "mode {n}: {empty_rows} rows with no observations kept previous values"
        ));
    }

    let prev = model.factor(n).clone();
    let x = match strategy {
        FactorStrategy::DirectRowwise => {
            solve_rows(&row_obs, &fibers, values, r_n, &prev, None, ctx, n)?
        }
        FactorStrategy::SubsampledRowwise { c } => {
            let keep = ((c * r_n as f64).ceil() as usize).max(1);
            solve_rows(&row_obs, &fibers, values, r_n, &prev, Some(keep), ctx, n)?
        }
        FactorStrategy::Iterative { max_mv, atol } => {
            let op = FactorOp {
                fibers: &fibers,
                rows,
                i_n,
                r_n,
            };
            let res = lsqr_warm(
                &op,
                values,
                prev.data(),
                T::from_f64_lossy(atol),
                (max_mv / 2).max(1),
            );
            Matrix::from_data(i_n, r_n, res.x)?
        }
    };
    Ok((x, events))
}

/// Row-decoupled normal equations with a ridge floor; optional deterministic
/// subsampling of each row's observations.
#[allow(clippy::too_many_arguments)]
fn solve_rows<T: Scalar>(
    row_obs: &[Vec<u32>],
    fibers: &[T],
    values: &[T],
    r_n: usize,
    prev: &Matrix<T>,
    subsample: Option<usize>,
    ctx: UpdateContext,
    mode: usize,
) -> Result<Matrix<T>> {
    let i_n = row_obs.len();
    let rows: Vec<Vec<T>> = (0..i_n)
        .into_par_iter()
        .map(|i| {
            let list = &row_obs[i];
            if list.is_empty() {
                return prev.row(i);
            }
            let chosen: Vec<u32> = match subsample {
                Some(k) if list.len() > k => {
                    // Keep the k smallest hash keys: deterministic in
                    // (seed, iter, mode, row, position).
                    let rng = CounterRng::from_seed(
                        ctx.seed,
                        &[0x7375_6273, ctx.outer_iter as u64, mode as u64, i as u64],
                    );
                    let mut keyed: Vec<(u64, u32)> = list
                        .iter()
                        .enumerate()
                        .map(|(pos, &o)| (rng.bits(pos as u64), o))
                        .collect();
                    keyed.sort_unstable();
                    keyed.into_iter().take(k).map(|(_, o)| o).collect()
                }
                _ => list.clone(),
            };
            let mut gram = Matrix::<T>::zeros(r_n, r_n);
            let mut rhs = vec![T::zero(); r_n];
            for &obs in &chosen {
                let f = &fibers[obs as usize * r_n..(obs as usize + 1) * r_n];
                let t = values[obs as usize];
                for a in 0..r_n {
                    rhs[a] += t * f[a];
                    for b in a..r_n {
                        gram.data_mut()[a + r_n * b] += f[a] * f[b];
                    }
                }
            }
            for a in 0..r_n {
                for b in 0..a {
                    let v = gram.get(b, a);
                    gram.set(a, b, v);
                }
            }
            let mut tr = T::zero();
            for a in 0..r_n {
                tr += gram.get(a, a);
            }
            let ridge = T::from_f64_lossy(RIDGE_REL) * tr / T::from_f64_lossy(r_n as f64);
            let rhs_m = Matrix::from_data(r_n, 1, rhs).unwrap();
            match solve_spd_ridge(&gram, &rhs_m, ridge) {
                Ok(sol) => sol.data().to_vec(),
                Err(_) => prev.row(i),
            }
        })
        .collect();
    let mut x = Matrix::zeros(i_n, r_n);
    for (i, row) in rows.iter().enumerate() {
        x.set_row(i, row);
    }
    Ok(x)
}

/// Matrix-free operator for the whole-factor least squares: unknowns are the
/// entries of `X` (column-major `I_n x r_n`), equations the observations.
struct FactorOp<'a, T> {
    fibers: &'a [T],
    rows: &'a [u32],
    i_n: usize,
    r_n: usize,
}

impl<T: Scalar> LinearOperator<T> for FactorOp<'_, T> {
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn cols(&self) -> usize {
        self.i_n * self.r_n
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        for (obs, &row) in self.rows.iter().enumerate() {
            let f = &self.fibers[obs * self.r_n..(obs + 1) * self.r_n];
            let mut acc = T::zero();
            for (j, &fj) in f.iter().enumerate() {
                acc += x[row as usize + self.i_n * j] * fj;
            }
            y[obs] += acc;
        }
    }
    fn apply_transpose(&self, y: &[T], x: &mut [T]) {
        for (obs, &row) in self.rows.iter().enumerate() {
            let f = &self.fibers[obs * self.r_n..(obs + 1) * self.r_n];
            let yv = y[obs];
            if yv == T::zero() {
                continue;
            }
            for (j, &fj) in f.iter().enumerate() {
                x[row as usize + self.i_n * j] += yv * fj;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// QR re-orthonormalization with R absorption
// ---------------------------------------------------------------------------

/// `X = QR`; the factor becomes `Q` and `R` is absorbed into the node
/// carrying mode `n`, leaving the represented tensor unchanged.
/// Rank-deficient `X` falls back to column-pivoted QR with dead pivots
/// floored at `eps * ||X||`.
pub fn orthonormalize_and_absorb<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    n: usize,
    x: &Matrix<T>,
) -> Result<Vec<String>> {
    let mut events = Vec::new();
    let norm_x = x.fro_norm();
    let plain = qr_economic(x);
    let k = plain.r.rows();
    let deficient = norm_x == T::zero()
        || (0..k).any(|j| plain.r.get(j, j) <= T::from_f64_lossy(QR_RANK_TOL) * norm_x);
    let (q, r_eff) = if deficient {
        let piv = qr_pivoted(x);
        let mut r = piv.r;
        let floor = T::epsilon() * norm_x.max(T::one());
        let mut floored = 0;
        for j in 0..k {
            if r.get(j, j) < floor {
                r.set(j, j, floor);
                floored += 1;
            }
        }
        events.push(format!(
            "mode {n}: rank-deficient factor update, pivoted QR with {floored} floored pivots"
        ));
        // Undo the pivoting: X ~= Q (R P^T).
        let mut r_unpiv = Matrix::zeros(k, x.cols());
        for (j, &src) in piv.perm.iter().enumerate() {
            for i in 0..k {
                r_unpiv.set(i, src, r.get(i, j));
            }
        }
        (piv.q, r_unpiv)
    } else {
        (plain.q, plain.r)
    };
    let leg = model.diagram().outgoing()[n];
    let nodes = node_mode_update(model.nodes(), leg.node, leg.slot, &r_eff)?;
    model.set_factor(n, q);
    model.set_nodes(nodes);
    Ok(events)
}

// ---------------------------------------------------------------------------
// Inner level: node updates
// ---------------------------------------------------------------------------

/// Outcome of the inner alternating sweeps.
pub struct NodeUpdateReport<T> {
    pub sweeps: usize,
    pub events: Vec<String>,
    /// `||Pi_Omega(model - T)||_F` after every node update, when tracking is
    /// requested; nonincreasing.
    pub objective_trace: Option<Vec<T>>,
}

/// Refits all node tensors against the observations, factors fixed, sweeping
/// until the core's relative change drops below `inner_tol`.
pub fn update_nodes<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    inner_tol: T,
    inner_max: usize,
) -> Result<NodeUpdateReport<T>> {
    let ws = Workspace::new(observed);
    update_nodes_ws(model, observed, &ws, inner_tol, inner_max, false)
}

/// As [`update_nodes`], additionally recording the data misfit after every
/// node update (used by invariant tests).
pub fn update_nodes_traced<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    inner_tol: T,
    inner_max: usize,
) -> Result<NodeUpdateReport<T>> {
    let ws = Workspace::new(observed);
    update_nodes_ws(model, observed, &ws, inner_tol, inner_max, true)
}

fn update_nodes_ws<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    ws: &Workspace,
    inner_tol: T,
    inner_max: usize,
    track: bool,
) -> Result<NodeUpdateReport<T>> {
    if observed.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let diagram = model.diagram().clone();
    let kind = diagram.kind();
    let mut nodes = model.nodes().clone();
    let order = node_update_order(&diagram);
    let mut events = Vec::new();
    let mut objective_trace = if track { Some(Vec::new()) } else { None };

    let mut g_prev = contract(&diagram, &nodes)?;
    let mut sweeps = 0;
    for sweep in 1..=inner_max {
        sweeps = sweep;
        for &k in &order {
            match kind {
                Some(TopologyKind::Single) => {
                    update_single_core(model, observed, ws, &mut nodes)?;
                }
                Some(TopologyKind::Cp) => {
                    update_cp_node(model, observed, ws, &diagram, &mut nodes, k, &mut events)?;
                }
                Some(TopologyKind::Tt) | Some(TopologyKind::Tr) => {
                    update_chain_node(model, observed, ws, &diagram, &mut nodes, k)?;
                }
                None => {
                    update_generic_node(model, observed, ws, &diagram, &mut nodes, k)?;
                }
            }
            if let Some(trace) = objective_trace.as_mut() {
                trace.push(partial_misfit(model, &diagram, &nodes, observed)?);
            }
        }
        let g = contract(&diagram, &nodes)?;
        let change = g.sub(&g_prev).fro_norm() / g_prev.fro_norm().max(T::epsilon());
        g_prev = g;
        if change < inner_tol {
            break;
        }
    }
    model.set_nodes(nodes);
    Ok(NodeUpdateReport {
        sweeps,
        events,
        objective_trace,
    })
}

fn partial_misfit<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
    observed: &ObservationSet<T>,
) -> Result<T> {
    let core = contract(diagram, nodes)?;
    let vals = crate::observation::sampled_evaluate(&core, model.factors(), observed)?;
    observed.residual(&vals, false)
}

/// Iterative node solve.  Overdetermined systems are warm-started at the
/// current value (objective cannot increase).  Underdetermined systems are
/// solved cold with the default budget and accepted only when they improve:
/// their least squares solution is non-unique, and accumulating Krylov
/// progress across outer iterations would interpolate the observations
/// instead of approximating the tensor.
fn lsqr_node_solve<T: Scalar, Op: LinearOperator<T>>(
    op: &Op,
    b: &[T],
    x0: &[T],
    atol: T,
    max_iter: usize,
) -> Vec<T> {
    if op.rows() >= op.cols() {
        return lsqr_warm(op, b, x0, atol, max_iter).x;
    }
    let cold = crate::lsqr::lsqr(op, b, atol, max_iter);
    let misfit = |x: &[T]| {
        let mut y = vec![T::zero(); op.rows()];
        op.apply(x, &mut y);
        y.iter()
            .zip(b)
            .map(|(&yi, &bi)| (yi - bi) * (yi - bi))
            .sum::<T>()
    };
    if misfit(&cold.x) <= misfit(x0) {
        cold.x
    } else {
        x0.to_vec()
    }
}

/// Normal equations with a ridge floor over explicitly materialized rows.
fn normal_equations_solve<T: Scalar>(
    m: usize,
    q: usize,
    b: &[T],
    mut row_fill: impl FnMut(usize, &mut [T]),
) -> Result<Vec<T>> {
    let mut gram = Matrix::<T>::zeros(q, q);
    let mut rhs = Matrix::<T>::zeros(q, 1);
    let mut row = vec![T::zero(); q];
    for obs in 0..m {
        row_fill(obs, &mut row);
        let t = b[obs];
        for a in 0..q {
            if row[a] == T::zero() {
                continue;
            }
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
    let ridge = T::from_f64_lossy(RIDGE_REL) * tr / T::from_f64_lossy(q as f64);
    Ok(solve_spd_ridge(&gram, &rhs, ridge)?.data().to_vec())
}

// --- single topology: the node is the dense core ---------------------------

struct SingleCoreOp<'a, T: Scalar> {
    factors: &'a [Matrix<T>],
    observed: &'a ObservationSet<T>,
    rdims: Vec<usize>,
}

impl<T: Scalar> LinearOperator<T> for SingleCoreOp<'_, T> {
    fn rows(&self) -> usize {
        self.observed.len()
    }
    fn cols(&self) -> usize {
        self.rdims.iter().product()
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        let v = DenseTensor::from_data(&self.rdims, x.to_vec()).unwrap();
        let refs: Vec<&Matrix<T>> = self.factors.iter().collect();
        let dense = v.multi_mode_product(&refs).unwrap();
        for (k, &l) in self.observed.linear_indices().iter().enumerate() {
            y[k] += dense.get_linear(l as usize);
        }
    }
    fn apply_transpose(&self, y: &[T], x: &mut [T]) {
        let mut z = DenseTensor::<T>::zeros(self.observed.dims());
        for (k, &l) in self.observed.linear_indices().iter().enumerate() {
            z.data_mut()[l as usize] = y[k];
        }
        let refs: Vec<&Matrix<T>> = self.factors.iter().collect();
        let grad = z.multi_mode_product_t(&refs).unwrap();
        for (xi, &g) in x.iter_mut().zip(grad.data()) {
            *xi += g;
        }
    }
}

fn update_single_core<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    ws: &Workspace,
    nodes: &mut NodeTensorSet<T>,
) -> Result<()> {
    let rdims: Vec<usize> = model.ranks();
    let current = match nodes.tensor(0) {
        NodeTensor::Dense(t) => t.clone(),
        _ => return Err(Error::InvalidDiagram("single core must be dense".into())),
    };
    let q: usize = rdims.iter().product();
    let count = observed.len();
    let sol = if count.saturating_mul(q).saturating_mul(q) / 2 <= DIRECT_BUDGET {
        let factors = model.factors();
        let n_modes = rdims.len();
        normal_equations_solve(count, q, observed.values(), |obs, row| {
            // Kronecker row of factor rows, first mode fastest.
            row[0] = T::one();
            let mut width = 1usize;
            for m in 0..n_modes {
                let i = ws.index_of(obs, m);
                let r = rdims[m];
                for j in (0..r).rev() {
                    let a = factors[m].get(i, j);
                    for c in 0..width {
                        row[j * width + c] = row[c] * a;
                    }
                }
                width *= r;
            }
        })?
    } else {
        let op = SingleCoreOp {
            factors: model.factors(),
            observed,
            rdims: rdims.clone(),
        };
        lsqr_node_solve(
            &op,
            observed.values(),
            current.data(),
            T::from_f64_lossy(CORE_LSQR_ATOL),
            CORE_LSQR_MAXIT,
        )
    };
    *nodes.tensor_mut(0) = NodeTensor::Dense(DenseTensor::from_data(&rdims, sol)?);
    Ok(())
}

// --- CP topology ------------------------------------------------------------

fn update_cp_node<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    ws: &Workspace,
    diagram: &TensorDiagram,
    nodes: &mut NodeTensorSet<T>,
    k: usize,
    events: &mut Vec<String>,
) -> Result<()> {
    let diag_node = cp_diagonal_node(diagram).expect("cp diagram");
    let n_modes = diagram.order();
    let lam: Vec<T> = match nodes.tensor(diag_node) {
        NodeTensor::Diagonal(l) => l.clone(),
        _ => return Err(Error::InvalidDiagram("cp diagonal missing".into())),
    };
    let r = lam.len();
    // W^(m) = A^(m) B^(m), I_m x r.
    let w: Vec<Matrix<T>> = (0..n_modes)
        .map(|m| {
            let leg = diagram.outgoing()[m];
            let b = match nodes.tensor(leg.node) {
                NodeTensor::Dense(t) => t.as_matrix(t.dims()[0], r)?,
                _ => return Err(Error::InvalidDiagram("cp matrix missing".into())),
            };
            Ok(model.factor(m).matmul(&b))
        })
        .collect::<Result<_>>()?;
    let count = observed.len();

    if k == diag_node {
        // Unknowns: the r diagonal entries.
        let sol = normal_equations_solve(count, r, observed.values(), |obs, row| {
            for (l, rv) in row.iter_mut().enumerate() {
                let mut v = T::one();
                for (m, wm) in w.iter().enumerate() {
                    v *= wm.get(ws.index_of(obs, m), l);
                }
                *rv = v;
            }
        })?;
        *nodes.tensor_mut(diag_node) = NodeTensor::Diagonal(sol);
        return Ok(());
    }

    // k carries one mode; unknowns are B (d_m x r).
    let mode = match diagram.nodes()[k].slots[0] {
        SlotKind::Outgoing(m) => m,
        _ => return Err(Error::InvalidDiagram("cp matrix slot layout".into())),
    };
    let d_m = diagram.outgoing()[mode].weight;
    let q = d_m * r;
    let a_m = model.factor(mode);
    let mut u = vec![T::zero(); r];
    let sol = normal_equations_solve(count, q, observed.values(), |obs, row| {
        for (l, uv) in u.iter_mut().enumerate() {
            let mut v = lam[l];
            for (m2, wm) in w.iter().enumerate() {
                if m2 != mode {
                    v *= wm.get(ws.index_of(obs, m2), l);
                }
            }
            *uv = v;
        }
        let i_m = ws.index_of(obs, mode);
        for l in 0..r {
            for j in 0..d_m {
                row[j + d_m * l] = a_m.get(i_m, j) * u[l];
            }
        }
    })?;

    // Normalize columns to unit length, absorbing the lengths into Lambda.
    let mut b = DenseTensor::from_data(&[d_m, r], sol)?;
    let mut gamma = Matrix::<T>::zeros(r, r);
    let mut zero_cols = 0;
    for l in 0..r {
        let col = &mut b.data_mut()[l * d_m..(l + 1) * d_m];
        let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            zero_cols += 1;
            gamma.set(l, l, T::one());
        } else {
            gamma.set(l, l, norm);
            let inv = norm.recip();
            for x in col.iter_mut() {
                *x *= inv;
            }
        }
    }
    if zero_cols > 0 {
        events.push(format!(
            "cp mode {mode}: {zero_cols} zero columns left unnormalized"
        ));
    }
    *nodes.tensor_mut(k) = NodeTensor::Dense(b);
    let updated = node_mode_update(nodes, diag_node, 0, &gamma)?;
    *nodes = updated;
    Ok(())
}

// --- tensor train / ring ------------------------------------------------------

/// Chain layout of a tt/tr node set: every node viewed as
/// `(w_left, d, w_right)` with boundary weights of 1 for the train.
struct ChainView {
    wl: Vec<usize>,
    wr: Vec<usize>,
    d: Vec<usize>,
}

fn chain_view(diagram: &TensorDiagram) -> ChainView {
    let n = diagram.node_count();
    let mut wl = vec![1usize; n];
    let mut wr = vec![1usize; n];
    let mut d = vec![0usize; n];
    for k in 0..n {
        for (s, slot) in diagram.nodes()[k].slots.iter().enumerate() {
            match *slot {
                SlotKind::Outgoing(m) => d[k] = diagram.outgoing()[m].weight,
                SlotKind::Internal(e) => {
                    let edge = &diagram.edges()[e];
                    // Edge toward the next node in the cycle is the right leg.
                    let other = if edge.a == (k, s) { edge.b.0 } else { edge.a.0 };
                    if other == (k + 1) % n {
                        wr[k] = edge.weight;
                    } else {
                        wl[k] = edge.weight;
                    }
                }
            }
        }
    }
    ChainView { wl, wr, d }
}

/// `M_k(i) = sum_j A^(k)[i, j] B_k[:, j, :]`, tabulated for all row indices.
/// Node buffers are `(w_left, d, w_right)` column-major; a train's boundary
/// nodes reuse the same buffer with a phantom weight-1 leg.
fn chain_table_one<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    view: &ChainView,
    nodes: &NodeTensorSet<T>,
    k: usize,
) -> Result<Vec<T>> {
    let (wl, wr, d) = (view.wl[k], view.wr[k], view.d[k]);
    let a = model.factor(k);
    let i_k = a.rows();
    let b = match nodes.tensor(k) {
        NodeTensor::Dense(t) => t.data(),
        _ => return Err(Error::InvalidDiagram("chain nodes must be dense".into())),
    };
    let mut tab = vec![T::zero(); i_k * wl * wr];
    for i in 0..i_k {
        let out = &mut tab[i * wl * wr..(i + 1) * wl * wr];
        for j in 0..d {
            let aij = a.get(i, j);
            if aij == T::zero() {
                continue;
            }
            for beta in 0..wr {
                let src = &b[wl * (j + d * beta)..wl * (j + d * beta) + wl];
                let dst = &mut out[beta * wl..(beta + 1) * wl];
                for alpha in 0..wl {
                    dst[alpha] += aij * src[alpha];
                }
            }
        }
    }
    Ok(tab)
}

struct ChainNodeOp<'a, T> {
    /// Per-observation environment, `wr_k x wl_k` column-major.
    env: &'a [T],
    rows: &'a [u32],
    factor: &'a Matrix<T>,
    wl: usize,
    wr: usize,
    d: usize,
}

impl<T: Scalar> LinearOperator<T> for ChainNodeOp<'_, T> {
    fn rows(&self) -> usize {
        self.rows.len()
    }
    fn cols(&self) -> usize {
        self.wl * self.d * self.wr
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        let (wl, wr, d) = (self.wl, self.wr, self.d);
        let es = wl * wr;
        for (obs, &row) in self.rows.iter().enumerate() {
            let env = &self.env[obs * es..(obs + 1) * es];
            let mut acc = T::zero();
            for j in 0..d {
                let a = self.factor.get(row as usize, j);
                if a == T::zero() {
                    continue;
                }
                let mut t = T::zero();
                for beta in 0..wr {
                    let xs = &x[wl * (j + d * beta)..wl * (j + d * beta) + wl];
                    for alpha in 0..wl {
                        // env[beta, alpha], column-major wr x wl.
                        t += xs[alpha] * env[beta + wr * alpha];
                    }
                }
                acc += a * t;
            }
            y[obs] += acc;
        }
    }
    fn apply_transpose(&self, y: &[T], x: &mut [T]) {
        let (wl, wr, d) = (self.wl, self.wr, self.d);
        let es = wl * wr;
        for (obs, &row) in self.rows.iter().enumerate() {
            let yv = y[obs];
            if yv == T::zero() {
                continue;
            }
            let env = &self.env[obs * es..(obs + 1) * es];
            for j in 0..d {
                let c = yv * self.factor.get(row as usize, j);
                if c == T::zero() {
                    continue;
                }
                for beta in 0..wr {
                    let base = wl * (j + d * beta);
                    for alpha in 0..wl {
                        x[base + alpha] += c * env[beta + wr * alpha];
                    }
                }
            }
        }
    }
}

fn update_chain_node<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    ws: &Workspace,
    diagram: &TensorDiagram,
    nodes: &mut NodeTensorSet<T>,
    k: usize,
) -> Result<()> {
    let view = chain_view(diagram);
    let n = nodes.len();
    let tables: Vec<Vec<T>> = (0..n)
        .map(|m| chain_table_one(model, &view, nodes, m))
        .collect::<Result<_>>()?;
    let count = observed.len();
    let (wl_k, wr_k, d_k) = (view.wl[k], view.wr[k], view.d[k]);

    // Environment per observation: the product M_(k+1) ... M_(k-1) around
    // the cycle, a (wr_k x wl_k) matrix.
    let es = wl_k * wr_k;
    let mut env = vec![T::zero(); count * es];
    let mut acc: Vec<T> = Vec::new();
    let mut next: Vec<T> = Vec::new();
    for obs in 0..count {
        let first = (k + 1) % n;
        let mrows = view.wl[first]; // == wr_k
        {
            let i = ws.index_of(obs, first);
            let width = view.wl[first] * view.wr[first];
            let t = &tables[first][i * width..(i + 1) * width];
            acc.clear();
            acc.extend_from_slice(t);
        }
        let mut mcols = view.wr[first];
        for step in 2..n {
            let m = (k + step) % n;
            let i = ws.index_of(obs, m);
            let (wlm, wrm) = (view.wl[m], view.wr[m]);
            debug_assert_eq!(mcols, wlm);
            let t = &tables[m][i * wlm * wrm..(i + 1) * wlm * wrm];
            next.clear();
            next.resize(mrows * wrm, T::zero());
            for b2 in 0..wrm {
                for a2 in 0..wlm {
                    let v = t[a2 + wlm * b2];
                    if v == T::zero() {
                        continue;
                    }
                    for rr in 0..mrows {
                        next[rr + mrows * b2] += acc[rr + mrows * a2] * v;
                    }
                }
            }
            std::mem::swap(&mut acc, &mut next);
            mcols = wrm;
        }
        debug_assert_eq!(mcols, wl_k);
        env[obs * es..(obs + 1) * es].copy_from_slice(&acc[..es]);
    }

    let current = match nodes.tensor(k) {
        NodeTensor::Dense(t) => t.clone(),
        _ => return Err(Error::InvalidDiagram("chain nodes must be dense".into())),
    };
    let op = ChainNodeOp {
        env: &env,
        rows: &ws.mode_idx[k],
        factor: model.factor(k),
        wl: wl_k,
        wr: wr_k,
        d: d_k,
    };
    let q = op.cols();
    let sol = if count.saturating_mul(q).saturating_mul(q) / 2 <= DIRECT_BUDGET / 4 {
        // Small systems: exact normal equations over materialized rows.
        let factor = model.factor(k);
        let rows = &ws.mode_idx[k];
        normal_equations_solve(count, q, observed.values(), |obs, row| {
            let e = &env[obs * es..(obs + 1) * es];
            let i = rows[obs] as usize;
            for j in 0..d_k {
                let a = factor.get(i, j);
                for beta in 0..wr_k {
                    for alpha in 0..wl_k {
                        row[wl_k * (j + d_k * beta) + alpha] = a * e[beta + wr_k * alpha];
                    }
                }
            }
        })?
    } else {
        lsqr_node_solve(
            &op,
            observed.values(),
            current.data(),
            T::from_f64_lossy(NODE_LSQR_ATOL),
            NODE_LSQR_MAXIT,
        )
    };
    // The (wl, d, wr) buffer layout coincides with the node's true shape
    // (boundary weights of 1 are phantom legs).
    *nodes.tensor_mut(k) = NodeTensor::Dense(DenseTensor::from_data(&diagram.node_shape(k), sol)?);
    Ok(())
}

// --- generic fallback ---------------------------------------------------------

/// Per-observation environment rows built with label-wise contractions.
/// Correct for arbitrary diagrams (including several outgoing modes on one
/// node); costs one small contraction per observation, so it is only the
/// path of last resort for hand-built diagrams.
fn update_generic_node<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
    ws: &Workspace,
    diagram: &TensorDiagram,
    nodes: &mut NodeTensorSet<T>,
    k: usize,
) -> Result<()> {
    let count = observed.len();
    let q: usize = diagram.node_shape(k).iter().product();
    let n_modes = diagram.order();
    let mut idx = vec![0usize; n_modes];
    let mut err = None;
    let sol = normal_equations_solve(count, q, observed.values(), |obs, row| {
        for (m, i) in idx.iter_mut().enumerate() {
            *i = ws.index_of(obs, m);
        }
        if let Err(e) = generic_env_row(model, diagram, nodes, k, &idx, row) {
            err.get_or_insert(e);
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    *nodes.tensor_mut(k) = NodeTensor::Dense(DenseTensor::from_data(
        &diagram.node_shape(k),
        sol,
    )?);
    Ok(())
}

/// Coefficient of each entry of node `k` in the model value at multi-index
/// `idx`: contract all other nodes with their outgoing legs closed by factor
/// rows, then weight by `k`'s own factor-row entries.
fn generic_env_row<T: Scalar>(
    model: &TuckerWrappedModel<T>,
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
    k: usize,
    idx: &[usize],
    row: &mut [T],
) -> Result<()> {
    let sig = &diagram.nodes()[k];
    let mut closed: Vec<(Vec<usize>, DenseTensor<T>)> = Vec::new();
    for j in 0..diagram.node_count() {
        if j == k {
            continue;
        }
        let mut t = match nodes.tensor(j) {
            NodeTensor::Dense(t) => t.clone(),
            NodeTensor::Diagonal(l) => {
                let slots = diagram.nodes()[j].slots.len();
                let r = l.len();
                let mut dense = DenseTensor::zeros(&vec![r; slots]);
                let stride: usize = (0..slots).map(|s| r.pow(s as u32)).sum();
                for (i, &v) in l.iter().enumerate() {
                    dense.data_mut()[i * stride] = v;
                }
                dense
            }
        };
        let mut labels: Vec<usize> = Vec::new();
        for (s, slot) in diagram.nodes()[j].slots.iter().enumerate() {
            match *slot {
                SlotKind::Outgoing(m) => {
                    // Contract with the factor row (1 x I_m against the slot).
                    let a = model.factor(m);
                    let mut rowvec = Matrix::zeros(1, a.cols());
                    for c in 0..a.cols() {
                        rowvec.set(0, c, a.get(idx[m], c));
                    }
                    t = t.mode_product(&rowvec, s)?;
                    labels.push(usize::MAX);
                }
                SlotKind::Internal(e) => labels.push(e),
            }
        }
        // Squeeze away the closed (size-1) outgoing legs.
        let keep: Vec<usize> = (0..labels.len())
            .filter(|&p| labels[p] != usize::MAX)
            .collect();
        if keep.len() < labels.len() {
            let mut dims: Vec<usize> = keep.iter().map(|&p| t.dims()[p]).collect();
            let mut perm: Vec<usize> = keep.clone();
            for (p, &l) in labels.iter().enumerate() {
                if l == usize::MAX {
                    perm.push(p);
                }
            }
            if dims.is_empty() {
                dims.push(1);
            }
            t = t.permute(&perm).reshape(&dims)?;
        }
        closed.push((
            labels.into_iter().filter(|&l| l != usize::MAX).collect(),
            t,
        ));
    }
    while closed.len() > 1 {
        let mut merged = false;
        'outer: for i in 0..closed.len() {
            for j in i + 1..closed.len() {
                let share: Vec<usize> = closed[i]
                    .0
                    .iter()
                    .copied()
                    .filter(|e| closed[j].0.contains(e))
                    .collect();
                if share.is_empty() {
                    continue;
                }
                let (lj, tj) = closed.swap_remove(j);
                let (li, ti) = closed.swap_remove(i);
                closed.push(contract_on_labels(li, ti, lj, tj, &share)?);
                merged = true;
                break 'outer;
            }
        }
        if !merged {
            let (lj, tj) = closed.pop().unwrap();
            let (li, ti) = closed.pop().unwrap();
            closed.push(contract_on_labels(li, ti, lj, tj, &[])?);
        }
    }
    let (env_labels, env) = match closed.pop() {
        Some(x) => x,
        None => (Vec::new(), DenseTensor::from_data(&[1], vec![T::one()])?),
    };
    let shape = diagram.node_shape(k);
    let q: usize = shape.iter().product();
    let mut env_idx = vec![0usize; env_labels.len()];
    for (lin, r) in row.iter_mut().enumerate().take(q) {
        let nidx = multi_index(&shape, lin);
        let mut v = T::one();
        for (s, slot) in sig.slots.iter().enumerate() {
            match *slot {
                SlotKind::Outgoing(m) => {
                    v *= model.factor(m).get(idx[m], nidx[s]);
                }
                SlotKind::Internal(e) => {
                    let pos = env_labels
                        .iter()
                        .position(|&x| x == e)
                        .ok_or_else(|| Error::InvalidDiagram("environment lost an edge".into()))?;
                    env_idx[pos] = nidx[s];
                }
            }
        }
        if !env_labels.is_empty() {
            v *= env.get(&env_idx);
        } else {
            v *= env.get_linear(0);
        }
        *r = v;
    }
    Ok(())
}

fn contract_on_labels<T: Scalar>(
    la: Vec<usize>,
    ta: DenseTensor<T>,
    lb: Vec<usize>,
    tb: DenseTensor<T>,
    share: &[usize],
) -> Result<(Vec<usize>, DenseTensor<T>)> {
    let a_free: Vec<usize> = (0..la.len()).filter(|&p| !share.contains(&la[p])).collect();
    let b_free: Vec<usize> = (0..lb.len()).filter(|&p| !share.contains(&lb[p])).collect();
    let a_sh: Vec<usize> = share
        .iter()
        .map(|e| la.iter().position(|x| x == e).unwrap())
        .collect();
    let b_sh: Vec<usize> = share
        .iter()
        .map(|e| lb.iter().position(|x| x == e).unwrap())
        .collect();
    let mut pa = a_free.clone();
    pa.extend(&a_sh);
    let mut pb = b_sh.clone();
    pb.extend(&b_free);
    let fa: usize = a_free.iter().map(|&p| ta.dims()[p]).product();
    let fb: usize = b_free.iter().map(|&p| tb.dims()[p]).product();
    let sh: usize = a_sh.iter().map(|&p| ta.dims()[p]).product();
    let am = ta.permute(&pa).as_matrix(fa, sh)?;
    let bm = tb.permute(&pb).as_matrix(sh, fb)?;
    let cm = am.matmul(&bm);
    let mut labels: Vec<usize> = a_free.iter().map(|&p| la[p]).collect();
    labels.extend(b_free.iter().map(|&p| lb[p]));
    let mut dims: Vec<usize> = a_free.iter().map(|&p| ta.dims()[p]).collect();
    dims.extend(b_free.iter().map(|&p| tb.dims()[p]));
    if dims.is_empty() {
        dims.push(1);
    }
    Ok((labels, DenseTensor::from_data(&dims, cm.data().to_vec())?))
}

// ---------------------------------------------------------------------------
// Rank truncation
// ---------------------------------------------------------------------------

/// Shrinks each mode's rank to `s_n = |{j : sigma_1 <= kappa_n sigma_j}|` on
/// the core unfoldings, rotating factors and nodes accordingly.  Passes
/// repeat until every unfolding meets its condition bound; when nothing
/// truncates the model is left untouched.
pub fn truncate_ranks<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    kappa: &[f64],
) -> Result<Vec<String>> {
    let n_modes = model.order();
    if kappa.len() != n_modes {
        return Err(Error::InvalidArgument("kappa length".into()));
    }
    let mut events = Vec::new();
    for _pass in 0..TRUNCATION_MAX_PASSES {
        let g = model.core()?.clone();
        let ranks = model.ranks();
        let mut truncations: Vec<(usize, Matrix<T>, usize)> = Vec::new();
        for n in 0..n_modes {
            let dec = svd(&g.unfold(n)?);
            let s1 = dec.s.first().copied().unwrap_or(T::zero());
            let kap = T::from_f64_lossy(kappa[n]);
            let s_n = dec
                .s
                .iter()
                .filter(|&&sj| s1 <= kap * sj)
                .count()
                .max(1)
                .min(ranks[n]);
            if s_n < ranks[n] {
                let mut u = Matrix::zeros(dec.u.rows(), s_n);
                for j in 0..s_n {
                    for i in 0..u.rows() {
                        u.set(i, j, dec.u.get(i, j));
                    }
                }
                truncations.push((n, u, s_n));
            }
        }
        if truncations.is_empty() {
            break;
        }
        let mut diagram = model.diagram().clone();
        let mut nodes = model.nodes().clone();
        for (n, u, s_n) in &truncations {
            let leg = diagram.outgoing()[*n];
            events.push(format!("mode {n}: rank {} -> {}", model.ranks()[*n], s_n));
            model.set_factor(*n, model.factor(*n).matmul(u));
            nodes = node_mode_update(&nodes, leg.node, leg.slot, &u.transpose())?;
            diagram.set_outgoing_weight(*n, *s_n);
        }
        model.set_diagram(diagram);
        model.set_nodes(nodes);
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// The outer loop
// ---------------------------------------------------------------------------

/// Residuals of the current model on the observations: `(raw, normalized)`.
pub fn residuals<T: Scalar>(
    model: &mut TuckerWrappedModel<T>,
    observed: &ObservationSet<T>,
) -> Result<(T, T)> {
    let vals = model.evaluate_at(observed)?;
    Ok((
        observed.residual(&vals, false)?,
        observed.residual(&vals, true)?,
    ))
}

/// Per-mode `||sin Theta(A_est^(n), A_true^(n))||_2`, measuring how far each
/// true subspace sticks out of the estimated one (well-defined when the
/// estimated rank exceeds the true one).
pub fn subspace_angles<T: Scalar>(est: &[Matrix<T>], truth: &[Matrix<T>]) -> Vec<f64> {
    est.iter()
        .zip(truth)
        .map(|(q, a)| {
            let proj = q.matmul(&q.matmul_tn(a));
            let mut resid = a.clone();
            for (r, &p) in resid.data_mut().iter_mut().zip(proj.data()) {
                *r -= p;
            }
            spectral_norm(&resid).to_f64_lossy().min(1.0)
        })
        .collect()
}

/// Line-for-line two-level ALS: initialize from the rescaled zero fill, then
/// alternate factor updates (QR-absorbed), node sweeps, and rank truncation
/// until the normalized residual reaches `tol`.
///
/// Deterministic given `(config.seed, observed)`; supplying ground-truth
/// factors (orthonormalized internally) adds per-mode angles to the trace.
/// A run whose normalized residual exceeds 10x its running minimum for five
/// consecutive iterations stops with [`SolveStatus::Diverged`].
pub fn solve<T: Scalar>(
    observed: &ObservationSet<T>,
    topology: &CoreTopology,
    config: &SolverConfig,
    ground_truth: Option<&[Matrix<T>]>,
) -> Result<(TuckerWrappedModel<T>, SolverTrace)> {
    config.validate(observed.dims())?;
    if observed.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let diagram = topology.build(&config.d0)?;
    let truth: Option<Vec<Matrix<T>>> =
        ground_truth.map(|g| g.iter().map(|a| qr_economic(a).q).collect());
    let ws = Workspace::new(observed);

    let t0 = Instant::now();
    let mut model = init::initialize(
        observed,
        &diagram,
        &config.d0,
        T::from_f64_lossy(INIT_TOL),
        derive_key(config.seed, &[0x696e_6974]),
    )?;
    let (raw, mut tau_norm) = residuals(&mut model, observed)?;
    let mut records = vec![IterationRecord {
        iter: 0,
        tau_raw: raw.to_f64_lossy(),
        tau_norm: tau_norm.to_f64_lossy(),
        ranks: model.ranks(),
        inner_sweeps: 0,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        sin_theta: truth
            .as_ref()
            .map(|tr| subspace_angles(model.factors(), tr)),
        events: Vec::new(),
    }];

    let tol = T::from_f64_lossy(config.tol);
    let inner_tol = T::from_f64_lossy(config.inner_tol);
    let mut status = SolveStatus::MaxIterations;
    let mut best_tau = tau_norm.to_f64_lossy();
    let mut diverging_streak = 0;

    if tau_norm <= tol {
        status = SolveStatus::Converged;
    } else {
        for t in 1..=config.max_outer {
            let tick = Instant::now();
            let mut events = Vec::new();
            let ctx = UpdateContext {
                seed: config.seed,
                outer_iter: t,
            };
            for n in 0..model.order() {
                let (x, ev) =
                    update_factor_ws(&mut model, observed, &ws, n, config.factor_strategy, ctx)?;
                events.extend(ev);
                events.extend(orthonormalize_and_absorb(&mut model, n, &x)?);
            }
            let report =
                update_nodes_ws(&mut model, observed, &ws, inner_tol, config.inner_max, false)?;
            events.extend(report.events);
            events.extend(truncate_ranks(&mut model, &config.kappa)?);
            let (raw, norm) = residuals(&mut model, observed)?;
            tau_norm = norm;
            records.push(IterationRecord {
                iter: t,
                tau_raw: raw.to_f64_lossy(),
                tau_norm: tau_norm.to_f64_lossy(),
                ranks: model.ranks(),
                inner_sweeps: report.sweeps,
                wall_ms: tick.elapsed().as_secs_f64() * 1e3,
                sin_theta: truth
                    .as_ref()
                    .map(|tr| subspace_angles(model.factors(), tr)),
                events,
            });
            if tau_norm <= tol {
                status = SolveStatus::Converged;
                break;
            }
            let now = tau_norm.to_f64_lossy();
            if now > DIVERGENCE_FACTOR * best_tau {
                diverging_streak += 1;
                if diverging_streak >= DIVERGENCE_PATIENCE {
                    status = SolveStatus::Diverged;
                    break;
                }
            } else {
                diverging_streak = 0;
            }
            best_tau = best_tau.min(now);
        }
    }
    Ok((model, SolverTrace { records, status }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_defect, pinv};
    use crate::rng::SplitMix64;

    fn planted_model(
        dims: &[usize],
        ranks: &[usize],
        seed: u64,
    ) -> (DenseTensor<f64>, Vec<Matrix<f64>>) {
        let mut rng = SplitMix64::new(seed);
        let core = DenseTensor::from_fn(ranks, |_| rng.normal());
        let mats: Vec<Matrix<f64>> = dims
            .iter()
            .zip(ranks)
            .map(|(&d, &r)| Matrix::from_fn(d, r, |_, _| rng.normal()))
            .collect();
        let refs: Vec<&Matrix<f64>> = mats.iter().collect();
        (core.multi_mode_product(&refs).unwrap(), mats)
    }

    fn full_obs(t: &DenseTensor<f64>) -> ObservationSet<f64> {
        let mask = ObservationSet::sample_mask(t.dims(), 1.0, 0).unwrap();
        ObservationSet::project(t, &mask).unwrap()
    }

    fn exact_model_at_truth(
        t: &DenseTensor<f64>,
        mats: &[Matrix<f64>],
        ranks: &[usize],
    ) -> TuckerWrappedModel<f64> {
        // Orthonormalize the planted factors, project the core.
        let qs: Vec<Matrix<f64>> = mats.iter().map(|m| qr_economic(m).q).collect();
        let refs: Vec<&Matrix<f64>> = qs.iter().collect();
        let core = t.multi_mode_product_t(&refs).unwrap();
        let diagram =
            TensorDiagram::make_topology(TopologyKind::Single, t.order(), &[], ranks).unwrap();
        let nodes = NodeTensorSet::new(vec![NodeTensor::Dense(core)]);
        TuckerWrappedModel::new(qs, diagram, nodes).unwrap()
    }

    #[test]
    fn full_observation_factor_update_finds_true_span() {
        let (t, mats) = planted_model(&[8, 7, 6], &[2, 2, 2], 1);
        let obs = full_obs(&t);
        let mut model = exact_model_at_truth(&t, &mats, &[2, 2, 2]);
        let ctx = UpdateContext {
            seed: 0,
            outer_iter: 1,
        };
        for n in 0..3 {
            let (x, _) =
                update_factor(&mut model, &obs, n, FactorStrategy::DirectRowwise, ctx).unwrap();
            let qx = qr_economic(&x).q;
            let qt = qr_economic(&mats[n]).q;
            let angles = subspace_angles(&[qx], &[qt]);
            assert!(angles[0] < 1e-8, "mode {n}: {}", angles[0]);
        }
    }

    #[test]
    fn order2_factor_update_matches_pseudoinverse_formula() {
        // N=2, full observation: X = T_(1) M G^+ with M the other factor.
        let (t, mats) = planted_model(&[9, 7], &[3, 3], 2);
        let obs = full_obs(&t);
        let mut model = exact_model_at_truth(&t, &mats, &[3, 3]);
        let g = model.core().unwrap().clone();
        let a2 = model.factor(1).clone();
        let ctx = UpdateContext {
            seed: 0,
            outer_iter: 1,
        };
        let (x, _) =
            update_factor(&mut model, &obs, 0, FactorStrategy::DirectRowwise, ctx).unwrap();
        let want = t
            .unfold(0)
            .unwrap()
            .matmul(&a2)
            .matmul(&pinv(&g.unfold(0).unwrap(), 1e-12));
        let mut diff = 0.0f64;
        for (a, b) in x.data().iter().zip(want.data()) {
            diff += (a - b) * (a - b);
        }
        assert!(diff.sqrt() <= 1e-8 * want.fro_norm());
    }

    #[test]
    fn direct_and_iterative_strategies_agree() {
        let (t, mats) = planted_model(&[6, 6, 6], &[2, 2, 2], 3);
        let mask = ObservationSet::sample_mask(&[6, 6, 6], 0.5, 7).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();
        let mut model = exact_model_at_truth(&t, &mats, &[2, 2, 2]);
        let ctx = UpdateContext {
            seed: 0,
            outer_iter: 1,
        };
        let (xd, _) =
            update_factor(&mut model, &obs, 0, FactorStrategy::DirectRowwise, ctx).unwrap();
        let (xi, _) = update_factor(
            &mut model,
            &obs,
            0,
            FactorStrategy::Iterative {
                max_mv: 2000,
                atol: 1e-13,
            },
            ctx,
        )
        .unwrap();
        let mut diff = 0.0f64;
        for (a, b) in xd.data().iter().zip(xi.data()) {
            diff += (a - b) * (a - b);
        }
        assert!(diff.sqrt() <= 1e-6 * xd.fro_norm(), "{}", diff.sqrt());
    }

    #[test]
    fn zero_observation_rows_keep_previous_values() {
        let (t, mats) = planted_model(&[5, 4, 4], &[2, 2, 2], 4);
        // Observe nothing in row 2 of mode 0.
        let mut entries = Vec::new();
        for lin in 0..t.len() {
            let idx = multi_index(t.dims(), lin);
            if idx[0] != 2 {
                entries.push((idx, t.get_linear(lin)));
            }
        }
        let obs = ObservationSet::from_entries(t.dims(), &entries).unwrap();
        let mut model = exact_model_at_truth(&t, &mats, &[2, 2, 2]);
        let before = model.factor(0).row(2);
        let ctx = UpdateContext {
            seed: 0,
            outer_iter: 1,
        };
        let (x, events) =
            update_factor(&mut model, &obs, 0, FactorStrategy::DirectRowwise, ctx).unwrap();
        assert_eq!(x.row(2), before);
        assert!(events.iter().any(|e| e.contains("no observations")));
    }

    #[test]
    fn orthonormalize_and_absorb_preserves_model() {
        let (t, mats) = planted_model(&[7, 6, 5], &[2, 3, 2], 5);
        let model = exact_model_at_truth(&t, &mats, &[2, 3, 2]);
        let mut rng = SplitMix64::new(6);

        // Orthonormal input: Q = X, R = I.
        let x_orth = qr_economic(&Matrix::from_fn(7, 2, |_, _| rng.normal())).q;
        let mut m2 = model.clone();
        orthonormalize_and_absorb(&mut m2, 0, &x_orth).unwrap();
        let mut dq = 0.0f64;
        for (a, b) in m2.factor(0).data().iter().zip(x_orth.data()) {
            dq += (a - b) * (a - b);
        }
        assert!(dq.sqrt() < 1e-12);

        // Random X: the absorbed model equals the X-substituted model.
        let x = Matrix::from_fn(7, 2, |_, _| rng.normal());
        let mut m3 = model.clone();
        let core_before = m3.core().unwrap().clone();
        let dense_with_x = {
            let mut mats2: Vec<Matrix<f64>> = m3.factors().to_vec();
            mats2[0] = x.clone();
            let refs: Vec<&Matrix<f64>> = mats2.iter().collect();
            core_before.multi_mode_product(&refs).unwrap()
        };
        orthonormalize_and_absorb(&mut m3, 0, &x).unwrap();
        let dense_after = m3.dense().unwrap();
        assert!(dense_after.sub(&dense_with_x).fro_norm() <= 1e-10 * dense_with_x.fro_norm());
        assert!(orthonormality_defect(m3.factor(0)) < 1e-12);

        // A zero column is flagged but does not abort.
        let mut xz = x.clone();
        for i in 0..7 {
            xz.set(i, 1, 0.0);
        }
        let mut m4 = model.clone();
        let events = orthonormalize_and_absorb(&mut m4, 0, &xz).unwrap();
        assert!(events.iter().any(|e| e.contains("rank-deficient")));
        assert!(orthonormality_defect(m4.factor(0)) < 1e-10);
    }

    #[test]
    fn update_nodes_single_full_observation_closed_form() {
        let (t, mats) = planted_model(&[6, 5, 4], &[2, 2, 2], 7);
        let obs = full_obs(&t);
        let mut model = exact_model_at_truth(&t, &mats, &[2, 2, 2]);
        // Perturb the core away from the optimum.
        let mut bad = model.core().unwrap().clone();
        bad.scale(0.25);
        model.set_nodes(NodeTensorSet::new(vec![NodeTensor::Dense(bad)]));
        let report = update_nodes(&mut model, &obs, 1e-3, 10).unwrap();
        // Closed form: G = [[T; A^T]].
        let refs: Vec<&Matrix<f64>> = model.factors().iter().collect();
        let want = t.multi_mode_product_t(&refs).unwrap();
        let got = model.core().unwrap().clone();
        assert!(got.sub(&want).fro_norm() <= 1e-8 * want.fro_norm());
        assert!(report.sweeps <= 2);
    }

    #[test]
    fn update_nodes_objective_is_monotone() {
        let (t, mats) = planted_model(&[6, 6, 6], &[2, 2, 2], 8);
        let mask = ObservationSet::sample_mask(&[6, 6, 6], 0.6, 3).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();
        let mut model = exact_model_at_truth(&t, &mats, &[2, 2, 2]);
        let mut core = model.core().unwrap().clone();
        let mut rng = SplitMix64::new(9);
        for v in core.data_mut() {
            *v += 0.5 * rng.normal();
        }
        model.set_nodes(NodeTensorSet::new(vec![NodeTensor::Dense(core)]));
        let report = update_nodes_traced(&mut model, &obs, 1e-6, 5).unwrap();
        let trace = report.objective_trace.unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{trace:?}");
        }
    }

    #[test]
    fn update_nodes_cp_columns_are_unit_after_sweep() {
        let dims = [6, 5, 4];
        let d = TensorDiagram::make_topology(TopologyKind::Cp, 3, &[2], &[2, 2, 2]).unwrap();
        let nodes = NodeTensorSet::<f64>::random(&d, 11);
        let mut rng = SplitMix64::new(12);
        let factors: Vec<Matrix<f64>> = dims
            .iter()
            .map(|&n| qr_economic(&Matrix::from_fn(n, 2, |_, _| rng.normal())).q)
            .collect();
        let mut model = TuckerWrappedModel::new(factors, d, nodes).unwrap();
        let t = model.dense().unwrap();
        let mask = ObservationSet::sample_mask(&dims, 0.7, 5).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();
        update_nodes(&mut model, &obs, 1e-4, 3).unwrap();
        for m in 0..3 {
            let leg = model.diagram().outgoing()[m];
            if let NodeTensor::Dense(b) = model.nodes().tensor(leg.node) {
                let bm = b.as_matrix(b.dims()[0], b.dims()[1]).unwrap();
                for j in 0..bm.cols() {
                    let norm = bm.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-10, "mode {m} col {j}: {norm}");
                }
            }
        }
    }

    #[test]
    fn update_nodes_tt_reduces_misfit() {
        let dims = [6, 5, 6];
        let d = TensorDiagram::make_topology(TopologyKind::Tt, 3, &[2, 2], &[3, 3, 3]).unwrap();
        let nodes = NodeTensorSet::<f64>::random(&d, 13);
        let mut rng = SplitMix64::new(14);
        let factors: Vec<Matrix<f64>> = dims
            .iter()
            .map(|&n| qr_economic(&Matrix::from_fn(n, 3, |_, _| rng.normal())).q)
            .collect();
        let mut model = TuckerWrappedModel::new(factors, d, nodes).unwrap();
        let t = model.dense().unwrap();
        let mask = ObservationSet::sample_mask(&dims, 0.8, 6).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();
        // Perturb all nodes, then refit: misfit must drop to near zero.
        let noisy = NodeTensorSet::<f64>::random(model.diagram(), 99);
        model.set_nodes(noisy);
        let before = {
            let vals = model.evaluate_at(&obs).unwrap();
            obs.residual(&vals, true).unwrap()
        };
        let report = update_nodes_traced(&mut model, &obs, 1e-8, 20).unwrap();
        let vals = model.evaluate_at(&obs).unwrap();
        let after = obs.residual(&vals, true).unwrap();
        assert!(after < 1e-6, "misfit {before} -> {after}");
        let trace = report.objective_trace.unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
    }

    #[test]
    fn truncation_rule_counts_condition_bound() {
        // Singular values (10, 5, 1e-8) with kappa = 100 keep exactly 2.
        let mut core = DenseTensor::<f64>::zeros(&[3, 3, 1]);
        core.set(&[0, 0, 0], 10.0);
        core.set(&[1, 1, 0], 5.0);
        core.set(&[2, 2, 0], 1e-8);
        let diagram =
            TensorDiagram::make_topology(TopologyKind::Single, 3, &[], &[3, 3, 1]).unwrap();
        let factors = vec![
            Matrix::<f64>::identity(3),
            Matrix::<f64>::identity(3),
            Matrix::<f64>::identity(1),
        ];
        let mut model = TuckerWrappedModel::new(
            factors,
            diagram,
            NodeTensorSet::new(vec![NodeTensor::Dense(core)]),
        )
        .unwrap();
        let events = truncate_ranks(&mut model, &[100.0, 100.0, 100.0]).unwrap();
        assert_eq!(model.ranks(), vec![2, 2, 1]);
        assert!(!events.is_empty());
        let g = model.core().unwrap().clone();
        for n in 0..3 {
            let s = svd(&g.unfold(n).unwrap()).s;
            assert!(s[0] <= 100.0 * s[s.len() - 1] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn huge_kappa_means_no_truncation() {
        let (t, mats) = planted_model(&[6, 5, 4], &[3, 2, 2], 13);
        let mut model = exact_model_at_truth(&t, &mats, &[3, 2, 2]);
        let before = model.dense().unwrap();
        let events = truncate_ranks(&mut model, &[1e16, 1e16, 1e16]).unwrap();
        assert!(events.is_empty());
        // The no-op path must not touch the model at all.
        assert_eq!(model.dense().unwrap(), before);
    }

    #[test]
    fn truncation_enforces_condition_bound_on_random_inputs() {
        for seed in 0..5 {
            let (t, mats) = planted_model(&[7, 6, 5], &[3, 3, 3], 100 + seed);
            let mut model = exact_model_at_truth(&t, &mats, &[3, 3, 3]);
            let kappa = [3.0, 5.0, 2.0];
            truncate_ranks(&mut model, &kappa).unwrap();
            let g = model.core().unwrap().clone();
            for n in 0..3 {
                let s = svd(&g.unfold(n).unwrap()).s;
                let smin = s.iter().copied().filter(|&x| x > 0.0).next_back().unwrap();
                assert!(
                    s[0] <= kappa[n] * smin * (1.0 + 1e-10),
                    "seed {seed} mode {n}: {s:?}"
                );
            }
        }
    }

    #[test]
    fn solve_full_observation_exact_input_converges_fast() {
        let (t, _) = planted_model(&[8, 8, 8], &[2, 2, 2], 21);
        let obs = full_obs(&t);
        let mut config = SolverConfig::new(vec![2, 2, 2]);
        config.tol = 1e-6;
        let (mut model, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!(trace.records.len() <= 3, "{} records", trace.records.len());
        let vals = model.evaluate_at(&obs).unwrap();
        assert!(obs.residual(&vals, true).unwrap() <= 1e-6);
    }

    #[test]
    fn solve_small_partial_observation_recovers() {
        let (t, mats) = planted_model(&[10, 10, 10], &[2, 2, 2], 22);
        let mask = ObservationSet::sample_mask(&[10, 10, 10], 0.5, 4).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();
        let config = SolverConfig::new(vec![2, 2, 2]);
        let (model, trace) = solve(&obs, &CoreTopology::Single, &config, Some(&mats)).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert!(model.max_orthonormality_defect() < 1e-8);
        let first = trace.records.first().unwrap().sin_theta.as_ref().unwrap()[0];
        let last = trace.records.last().unwrap().sin_theta.as_ref().unwrap()[0];
        assert!(last < first.max(1e-3));
    }

    #[test]
    fn solve_rank_adaptation_reveals_planted_rank() {
        let (t, _) = planted_model(&[10, 10, 10], &[2, 2, 2], 23);
        let mask = ObservationSet::sample_mask(&[10, 10, 10], 0.6, 5).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();
        let config = SolverConfig::new(vec![4, 4, 4]);
        let (model, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
        assert_eq!(trace.status, SolveStatus::Converged);
        assert_eq!(model.ranks(), vec![2, 2, 2]);
    }

    #[test]
    fn trace_csv_shape_and_determinism() {
        let (t, _) = planted_model(&[6, 6, 6], &[2, 2, 2], 24);
        let obs = full_obs(&t);
        let config = SolverConfig::new(vec![2, 2, 2]);
        let (_, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
        let csv = trace.to_csv(false);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SolverTrace::CSV_HEADER);
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 7);
        let (_, trace2) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
        assert_eq!(trace2.to_csv(false), csv);
    }
}
