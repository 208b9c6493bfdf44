//! The completion estimate: orthonormal wrapper factors around a
//! tensor-network core.

use crate::error::{Error, Result};
use crate::graph::{contract, NodeTensorSet, TensorDiagram};
use crate::linalg::orthonormality_defect;
use crate::observation::{sampled_evaluate, ObservationSet};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Matrix};

/// `X = [[ G(diagram, nodes); A_1, ..., A_N ]]` with orthonormal `A_n`.
///
/// The dense core is cached; any node mutation invalidates it.
#[derive(Clone, Debug)]
pub struct TuckerWrappedModel<T> {
    factors: Vec<Matrix<T>>,
    diagram: TensorDiagram,
    nodes: NodeTensorSet<T>,
    cached_core: Option<DenseTensor<T>>,
}

impl<T: Scalar> TuckerWrappedModel<T> {
    pub fn new(
        factors: Vec<Matrix<T>>,
        diagram: TensorDiagram,
        nodes: NodeTensorSet<T>,
    ) -> Result<Self> {
        if factors.len() != diagram.order() {
            return Err(Error::ShapeMismatch(format!(
                "{} factors for an order-{} diagram",
                factors.len(),
                diagram.order()
            )));
        }
        for (n, f) in factors.iter().enumerate() {
            if f.cols() != diagram.outgoing()[n].weight {
                return Err(Error::ShapeMismatch(format!(
                    "factor {n} has {} columns, diagram mode weight is {}",
                    f.cols(),
                    diagram.outgoing()[n].weight
                )));
            }
        }
        let issues = diagram.validate_nodes(&nodes);
        if !issues.is_empty() {
            return Err(Error::InvalidDiagram(issues.join("; ")));
        }
        Ok(Self {
            factors,
            diagram,
            nodes,
            cached_core: None,
        })
    }

    /// Outer tensor dimensions `I_n`.
    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    /// Current multilinear rank vector `d` (factor column counts).
    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cols()).collect()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Matrix<T>] {
        &self.factors
    }

    pub fn factor(&self, n: usize) -> &Matrix<T> {
        &self.factors[n]
    }

    pub fn diagram(&self) -> &TensorDiagram {
        &self.diagram
    }

    pub fn nodes(&self) -> &NodeTensorSet<T> {
        &self.nodes
    }

    /// Replaces factor `n`; the core is untouched.
    pub fn set_factor(&mut self, n: usize, f: Matrix<T>) {
        self.factors[n] = f;
    }

    /// Replaces the node set, dropping the cached core.
    pub fn set_nodes(&mut self, nodes: NodeTensorSet<T>) {
        self.nodes = nodes;
        self.cached_core = None;
    }

    pub fn set_diagram(&mut self, diagram: TensorDiagram) {
        self.diagram = diagram;
        self.cached_core = None;
    }

    /// The dense core, contracting and caching on first use.
    pub fn core(&mut self) -> Result<&DenseTensor<T>> {
        if self.cached_core.is_none() {
            self.cached_core = Some(contract(&self.diagram, &self.nodes)?);
        }
        Ok(self.cached_core.as_ref().unwrap())
    }

    /// Contracts the core without touching the cache.
    pub fn compute_core(&self) -> Result<DenseTensor<T>> {
        match &self.cached_core {
            Some(c) => Ok(c.clone()),
            None => contract(&self.diagram, &self.nodes),
        }
    }

    /// Materializes the full estimate `[[G; A_1..A_N]]`.
    pub fn dense(&mut self) -> Result<DenseTensor<T>> {
        self.core()?;
        let refs: Vec<&Matrix<T>> = self.factors.iter().collect();
        self.cached_core.as_ref().unwrap().multi_mode_product(&refs)
    }

    /// Model values at the mask's indices.
    pub fn evaluate_at(&mut self, mask: &ObservationSet<T>) -> Result<Vec<T>> {
        if mask.dims() != self.dims().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "evaluate_at: model dims {:?} vs mask dims {:?}",
                self.dims(),
                mask.dims()
            )));
        }
        self.core()?;
        sampled_evaluate(self.cached_core.as_ref().unwrap(), &self.factors, mask)
    }

    /// Largest orthonormality defect `||A^T A - I||_F` over all factors.
    pub fn max_orthonormality_defect(&self) -> T {
        self.factors
            .iter()
            .map(orthonormality_defect)
            .fold(T::zero(), |a, b| a.max(b))
    }
}
