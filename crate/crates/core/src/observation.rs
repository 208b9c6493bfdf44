//! The sampling operator: Bernoulli masks, sparse storage of observed
//! entries, residuals, and the rescaled zero-filled estimator used for
//! initialization.
//!
//! Mask membership is a pure function of `(seed, linear index)` through a
//! counter-based hash, so a mask is reproducible across platforms, runs, and
//! thread counts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{linear_index, multi_index, DenseTensor, Matrix};

/// Sparse set of observed entries of a tensor, kept sorted by linear index
/// (column-major, first index fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet<T> {
    dims: Vec<usize>,
    lin: Vec<u64>,
    values: Vec<T>,
    p_nominal: Option<f64>,
}

impl<T: Scalar> ObservationSet<T> {
    /// Builds from explicit `(multi-index, value)` pairs (0-based indices).
    pub fn from_entries(dims: &[usize], entries: &[(Vec<usize>, T)]) -> Result<Self> {
        let mut pairs: Vec<(u64, T)> = Vec::with_capacity(entries.len());
        for (idx, v) in entries {
            if idx.len() != dims.len() || idx.iter().zip(dims).any(|(i, d)| i >= d) {
                return Err(Error::InvalidArgument(format!(
                    "index {idx:?} out of range for dims {dims:?}"
                )));
            }
            pairs.push((linear_index(dims, idx) as u64, *v));
        }
        pairs.sort_by_key(|&(l, _)| l);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate observation index".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            lin: pairs.iter().map(|&(l, _)| l).collect(),
            values: pairs.iter().map(|&(_, v)| v).collect(),
            p_nominal: None,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.lin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lin.is_empty()
    }

    pub fn p_nominal(&self) -> Option<f64> {
        self.p_nominal
    }

    /// Linear indices of the observed entries, ascending.
    pub fn linear_indices(&self) -> &[u64] {
        &self.lin
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Multi-index (0-based) of the `k`th observation.
    pub fn multi_index_of(&self, k: usize) -> Vec<usize> {
        multi_index(&self.dims, self.lin[k] as usize)
    }

    /// Per-observation index along mode `n`, for all observations.
    /// Precomputed by callers that decouple least squares row-wise.
    pub fn mode_indices(&self, n: usize) -> Vec<usize> {
        let inner: usize = self.dims[..n].iter().product();
        let d = self.dims[n];
        self.lin
            .iter()
            .map(|&l| (l as usize / inner) % d)
            .collect()
    }

    /// Column index of each observation in the mode-`n` unfolding.
    pub fn unfold_columns(&self, n: usize) -> Vec<usize> {
        let inner: usize = self.dims[..n].iter().product();
        let d = self.dims[n];
        self.lin
            .iter()
            .map(|&l| {
                let l = l as usize;
                (l % inner) + inner * (l / (inner * d))
            })
            .collect()
    }

    /// Bernoulli(`p`) mask over every entry, values zeroed.
    pub fn sample_mask(dims: &[usize], p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "sampling probability {p} outside [0, 1]"
            )));
        }
        let total: usize = dims.iter().product();
        let rng = CounterRng::from_seed(seed, &[0x6d61_736b]);
        let mut lin = Vec::new();
        for l in 0..total as u64 {
            if rng.uniform(l) < p {
                lin.push(l);
            }
        }
        let n = lin.len();
        Ok(Self {
            dims: dims.to_vec(),
            lin,
            values: vec![T::zero(); n],
            p_nominal: Some(p),
        })
    }

    /// Copies the values of `t` at the mask's indices.
    pub fn project(t: &DenseTensor<T>, mask: &Self) -> Result<Self> {
        if t.dims() != mask.dims {
            return Err(Error::ShapeMismatch(format!(
                "project: tensor dims {:?} vs mask dims {:?}",
                t.dims(),
                mask.dims
            )));
        }
        let values = mask.lin.iter().map(|&l| t.get_linear(l as usize)).collect();
        Ok(Self {
            dims: mask.dims.clone(),
            lin: mask.lin.clone(),
            values,
            p_nominal: mask.p_nominal,
        })
    }

    /// `prod I_n / |Omega| * Pi_Omega(T)` as a dense tensor: the unbiased
    /// zero-filled estimator that seeds the initial multilinear approximation.
    pub fn scaled_zero_fill(&self) -> Result<DenseTensor<T>> {
        if self.is_empty() {
            return Err(Error::EmptyObservations);
        }
        let total: usize = self.dims.iter().product();
        let scale = T::from_f64_lossy(total as f64 / self.len() as f64);
        let mut t = DenseTensor::zeros(&self.dims);
        for (&l, &v) in self.lin.iter().zip(&self.values) {
            t.data_mut()[l as usize] = scale * v;
        }
        Ok(t)
    }

    /// Dense zero-filled copy (no rescaling).
    pub fn zero_fill(&self) -> DenseTensor<T> {
        let mut t = DenseTensor::zeros(&self.dims);
        for (&l, &v) in self.lin.iter().zip(&self.values) {
            t.data_mut()[l as usize] = v;
        }
        t
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Residual between model values at the mask and the observed values:
    /// raw `||Pi(X - T)||_F`, or normalized by `||Pi(T)||_F`.
    pub fn residual(&self, model_values: &[T], normalized: bool) -> Result<T> {
        if model_values.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "residual: {} model values vs {} observations",
                model_values.len(),
                self.len()
            )));
        }
        let raw = model_values
            .iter()
            .zip(&self.values)
            .map(|(&m, &t)| (m - t) * (m - t))
            .sum::<T>()
            .sqrt();
        if !normalized {
            return Ok(raw);
        }
        let denom = self.norm();
        if denom == T::zero() {
            return Err(Error::ZeroObservedNorm);
        }
        Ok(raw / denom)
    }

    /// Observation text format: `dims:` line, `p:` line, then one
    /// `i1 i2 ... iN value` row per entry, 1-based, sorted by linear index.
    pub fn to_text(&self) -> String {
        let mut s = String::from("dims:");
        for d in &self.dims {
            let _ = write!(s, " {d}");
        }
        // A nominal probability of -1 marks "not generated from a mask".
        let _ = writeln!(s, "\np: {}", self.p_nominal.unwrap_or(-1.0));
        for (&l, v) in self.lin.iter().zip(&self.values) {
            let idx = multi_index(&self.dims, l as usize);
            for i in idx {
                let _ = write!(s, "{} ", i + 1);
            }
            let _ = writeln!(s, "{:?}", v.to_f64_lossy());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let dims_line = lines
            .next()
            .ok_or_else(|| Error::Parse("empty observation text".into()))?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims:")
            .ok_or_else(|| Error::Parse("missing 'dims:' header".into()))?
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad dim '{t}': {e}")))
            })
            .collect::<Result<_>>()?;
        let p_line = lines
            .next()
            .ok_or_else(|| Error::Parse("missing 'p:' line".into()))?;
        let p: f64 = p_line
            .strip_prefix("p:")
            .ok_or_else(|| Error::Parse("missing 'p:' prefix".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("bad p: {e}")))?;
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != dims.len() + 1 {
                return Err(Error::Parse(format!("bad observation row '{line}'")));
            }
            let mut idx = Vec::with_capacity(dims.len());
            for t in &toks[..dims.len()] {
                let i: usize = t
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad index '{t}': {e}")))?;
                if i == 0 {
                    return Err(Error::Parse("indices are 1-based".into()));
                }
                idx.push(i - 1);
            }
            let v: f64 = toks[dims.len()]
                .parse()
                .map_err(|e| Error::Parse(format!("bad value: {e}")))?;
            entries.push((idx, T::from_f64_lossy(v)));
        }
        let mut set = Self::from_entries(&dims, &entries)?;
        set.p_nominal = if p < 0.0 { None } else { Some(p) };
        Ok(set)
    }
}

/// Evaluates `[[G; A1..AN]]` at the mask's indices only, without
/// materializing the full tensor when the mask is sparse.
///
/// Matches dense evaluation to machine precision; used for residuals and by
/// models whose core is already dense.
pub fn sampled_evaluate<T: Scalar>(
    core: &DenseTensor<T>,
    factors: &[Matrix<T>],
    mask: &ObservationSet<T>,
) -> Result<Vec<T>> {
    let n_modes = core.order();
    if factors.len() != n_modes || mask.dims.len() != n_modes {
        return Err(Error::ShapeMismatch("sampled_evaluate arity".into()));
    }
    for (n, f) in factors.iter().enumerate() {
        if f.rows() != mask.dims[n] || f.cols() != core.dims()[n] {
            return Err(Error::ShapeMismatch(format!(
                "sampled_evaluate factor {n}: {}x{} vs I={} r={}",
                f.rows(),
                f.cols(),
                mask.dims[n],
                core.dims()[n]
            )));
        }
    }
    let core_size = core.len();
    // Dense evaluation is cheaper once the mask covers enough entries.
    let sparse_cost = mask.len().saturating_mul(2 * core_size);
    let dense_cost = dense_eval_cost(mask.dims(), core.dims());
    if sparse_cost > dense_cost {
        let refs: Vec<&Matrix<T>> = factors.iter().collect();
        let dense = core.multi_mode_product(&refs)?;
        return Ok(mask
            .lin
            .iter()
            .map(|&l| dense.get_linear(l as usize))
            .collect());
    }
    // Per-entry contraction, folding the core against one factor row at a
    // time: cost ~ 2 * prod(r) per entry.
    let rdims = core.dims().to_vec();
    let mut out = Vec::with_capacity(mask.len());
    let mut buf_a: Vec<T> = Vec::with_capacity(core_size);
    let mut buf_b: Vec<T> = Vec::with_capacity(core_size);
    for k in 0..mask.len() {
        let idx = multi_index(&mask.dims, mask.lin[k] as usize);
        buf_a.clear();
        buf_a.extend_from_slice(core.data());
        let mut width = core_size;
        for (n, f) in factors.iter().enumerate() {
            let r = rdims[n];
            let chunk = width / r;
            buf_b.clear();
            buf_b.resize(chunk, T::zero());
            // buf_a viewed as (r, chunk) column-major with mode n fastest.
            for j in 0..r {
                let a = f.get(idx[n], j);
                if a == T::zero() {
                    continue;
                }
                for c in 0..chunk {
                    buf_b[c] += a * buf_a[c * r + j];
                }
            }
            std::mem::swap(&mut buf_a, &mut buf_b);
            width = chunk;
        }
        out.push(buf_a[0]);
    }
    Ok(out)
}

fn dense_eval_cost(dims: &[usize], rdims: &[usize]) -> usize {
    // Cost of materializing the multi-mode product mode by mode.
    let mut cur: Vec<usize> = rdims.to_vec();
    let mut cost = 0usize;
    for n in 0..dims.len() {
        cur[n] = dims[n];
        let inner: usize = cur.iter().product();
        cost = cost.saturating_add(inner.saturating_mul(rdims[n]));
    }
    cost
}
