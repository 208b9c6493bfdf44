//! Tensor diagrams and their contraction.
//!
//! A diagram is a weighted undirected graph whose nodes carry tensors:
//! internal edges are contractions (weight = shared dimension), and each of
//! the N outgoing legs carries one tensor mode with weight `d_n`.  The dense
//! core of a model is obtained by contracting all internal edges.
//!
//! Constructors are provided for the standard topologies: a single node, the
//! CP form (a diagonal node plus one matrix per mode), the tensor train
//! chain, and the tensor ring cycle.  The data model also admits nodes
//! carrying several outgoing modes; only the four constructors are shipped.
//!
//! The CP diagonal node is stored as a length-`r` vector with diagonal
//! semantics.  Contraction handles it through a dedicated accumulation path;
//! it is only ever expanded to a dense `r^N` tensor as a fallback for
//! hand-built diagrams that place it in a non-CP position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Matrix};

/// What a node slot is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Contracted with another node through internal edge `edge`.
    Internal(usize),
    /// Carries tensor mode `mode` (0-based).
    Outgoing(usize),
}

/// Ordered slot list of one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSignature {
    pub slots: Vec<SlotKind>,
}

/// Internal edge between `(node, slot)` endpoints with a shared dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InternalEdge {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub weight: usize,
}

/// Placement of tensor mode `n`: node `k_n`, slot `m_n`, dimension `d_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutgoingLeg {
    pub node: usize,
    pub slot: usize,
    pub weight: usize,
}

/// Shipped topology constructors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Single,
    Cp,
    Tt,
    Tr,
}

/// The diagram `G+(w, d)`: graph structure plus edge and leg weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorDiagram {
    nodes: Vec<NodeSignature>,
    edges: Vec<InternalEdge>,
    outgoing: Vec<OutgoingLeg>,
    kind: Option<TopologyKind>,
}

impl TensorDiagram {
    pub fn new(
        nodes: Vec<NodeSignature>,
        edges: Vec<InternalEdge>,
        outgoing: Vec<OutgoingLeg>,
    ) -> Self {
        Self {
            nodes,
            edges,
            outgoing,
            kind: None,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn order(&self) -> usize {
        self.outgoing.len()
    }

    pub fn nodes(&self) -> &[NodeSignature] {
        &self.nodes
    }

    pub fn edges(&self) -> &[InternalEdge] {
        &self.edges
    }

    pub fn outgoing(&self) -> &[OutgoingLeg] {
        &self.outgoing
    }

    pub fn kind(&self) -> Option<TopologyKind> {
        self.kind
    }

    /// Outgoing weight vector `d`.
    pub fn d(&self) -> Vec<usize> {
        self.outgoing.iter().map(|o| o.weight).collect()
    }

    /// Dimension carried by one slot.
    pub fn slot_weight(&self, node: usize, slot: usize) -> usize {
        match self.nodes[node].slots[slot] {
            SlotKind::Internal(e) => self.edges[e].weight,
            SlotKind::Outgoing(m) => self.outgoing[m].weight,
        }
    }

    /// Shape of node `k` implied by its slots.
    pub fn node_shape(&self, k: usize) -> Vec<usize> {
        (0..self.nodes[k].slots.len())
            .map(|s| self.slot_weight(k, s))
            .collect()
    }

    /// Shrinks (or grows) the dimension of outgoing mode `n`.
    pub fn set_outgoing_weight(&mut self, mode: usize, weight: usize) {
        self.outgoing[mode].weight = weight;
    }

    /// Standard topology constructor.
    ///
    /// Weight vector lengths: single 0, cp 1 (the shared rank, replicated),
    /// tt `N-1`, tr `N`.  `d` always has length `N`.
    pub fn make_topology(
        kind: TopologyKind,
        n_modes: usize,
        w: &[usize],
        d: &[usize],
    ) -> Result<Self> {
        if d.len() != n_modes || n_modes == 0 {
            return Err(Error::InvalidArgument(format!(
                "need {n_modes} outgoing weights, got {}",
                d.len()
            )));
        }
        if d.iter().chain(w).any(|&x| x == 0) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let mut diag = match kind {
            TopologyKind::Single => {
                if !w.is_empty() {
                    return Err(Error::InvalidArgument(
                        "single topology takes no internal weights".into(),
                    ));
                }
                let slots = (0..n_modes).map(SlotKind::Outgoing).collect();
                let outgoing = (0..n_modes)
                    .map(|n| OutgoingLeg {
                        node: 0,
                        slot: n,
                        weight: d[n],
                    })
                    .collect();
                Self::new(vec![NodeSignature { slots }], Vec::new(), outgoing)
            }
            TopologyKind::Cp => {
                if w.len() != 1 {
                    return Err(Error::InvalidArgument(
                        "cp topology takes one internal weight (the shared rank)".into(),
                    ));
                }
                let r = w[0];
                let mut nodes = vec![NodeSignature {
                    slots: (0..n_modes).map(SlotKind::Internal).collect(),
                }];
                let mut edges = Vec::with_capacity(n_modes);
                let mut outgoing = Vec::with_capacity(n_modes);
                for n in 0..n_modes {
                    nodes.push(NodeSignature {
                        slots: vec![SlotKind::Outgoing(n), SlotKind::Internal(n)],
                    });
                    edges.push(InternalEdge {
                        a: (0, n),
                        b: (n + 1, 1),
                        weight: r,
                    });
                    outgoing.push(OutgoingLeg {
                        node: n + 1,
                        slot: 0,
                        weight: d[n],
                    });
                }
                Self::new(nodes, edges, outgoing)
            }
            TopologyKind::Tt => {
                if n_modes < 2 || w.len() != n_modes - 1 {
                    return Err(Error::InvalidArgument(format!(
                        "tt topology needs N >= 2 and {} internal weights",
                        n_modes.saturating_sub(1)
                    )));
                }
                let mut nodes = Vec::with_capacity(n_modes);
                let mut edges = Vec::with_capacity(n_modes - 1);
                let mut outgoing = Vec::with_capacity(n_modes);
                for n in 0..n_modes {
                    let slots = if n == 0 {
                        vec![SlotKind::Outgoing(0), SlotKind::Internal(0)]
                    } else if n == n_modes - 1 {
                        vec![SlotKind::Internal(n - 1), SlotKind::Outgoing(n)]
                    } else {
                        vec![
                            SlotKind::Internal(n - 1),
                            SlotKind::Outgoing(n),
                            SlotKind::Internal(n),
                        ]
                    };
                    let out_slot = if n == 0 { 0 } else { 1 };
                    nodes.push(NodeSignature { slots });
                    outgoing.push(OutgoingLeg {
                        node: n,
                        slot: out_slot,
                        weight: d[n],
                    });
                }
                for e in 0..n_modes - 1 {
                    let a_slot = if e == 0 { 1 } else { 2 };
                    edges.push(InternalEdge {
                        a: (e, a_slot),
                        b: (e + 1, 0),
                        weight: w[e],
                    });
                }
                Self::new(nodes, edges, outgoing)
            }
            TopologyKind::Tr => {
                if n_modes < 2 || w.len() != n_modes {
                    return Err(Error::InvalidArgument(format!(
                        "tr topology needs N >= 2 and {n_modes} internal weights"
                    )));
                }
                // Node k slots: [edge (k-1 mod N), outgoing k, edge k].
                let mut nodes = Vec::with_capacity(n_modes);
                let mut edges = Vec::with_capacity(n_modes);
                let mut outgoing = Vec::with_capacity(n_modes);
                for n in 0..n_modes {
                    let prev = (n + n_modes - 1) % n_modes;
                    nodes.push(NodeSignature {
                        slots: vec![
                            SlotKind::Internal(prev),
                            SlotKind::Outgoing(n),
                            SlotKind::Internal(n),
                        ],
                    });
                    outgoing.push(OutgoingLeg {
                        node: n,
                        slot: 1,
                        weight: d[n],
                    });
                }
                for e in 0..n_modes {
                    edges.push(InternalEdge {
                        a: (e, 2),
                        b: ((e + 1) % n_modes, 0),
                        weight: w[e],
                    });
                }
                Self::new(nodes, edges, outgoing)
            }
        };
        diag.kind = Some(kind);
        let violations = diag.validate();
        debug_assert!(violations.is_empty(), "{violations:?}");
        Ok(diag)
    }

    /// Structural checks; returns human-readable violations, never fails.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (ei, e) in self.edges.iter().enumerate() {
            if e.weight == 0 {
                v.push(format!("edge {ei} has nonpositive weight"));
            }
            if e.a.0 == e.b.0 {
                v.push(format!("edge {ei} is a self-loop, which is unsupported"));
            }
            for &(node, slot) in &[e.a, e.b] {
                if node >= self.nodes.len() || slot >= self.nodes[node].slots.len() {
                    v.push(format!("edge {ei} endpoint ({node},{slot}) out of range"));
                } else if self.nodes[node].slots[slot] != SlotKind::Internal(ei) {
                    v.push(format!(
                        "edge {ei} endpoint ({node},{slot}) not marked as this edge"
                    ));
                }
            }
        }
        let mut mode_seen = vec![0usize; self.outgoing.len()];
        for (k, node) in self.nodes.iter().enumerate() {
            for (s, slot) in node.slots.iter().enumerate() {
                match *slot {
                    SlotKind::Internal(e) => {
                        if e >= self.edges.len() {
                            v.push(format!("node {k} slot {s} references missing edge {e}"));
                        } else {
                            let ed = &self.edges[e];
                            if ed.a != (k, s) && ed.b != (k, s) {
                                v.push(format!("node {k} slot {s} not an endpoint of edge {e}"));
                            }
                        }
                    }
                    SlotKind::Outgoing(m) => {
                        if m >= self.outgoing.len() {
                            v.push(format!("node {k} slot {s} carries unknown mode {m}"));
                        } else {
                            mode_seen[m] += 1;
                            let leg = self.outgoing[m];
                            if (leg.node, leg.slot) != (k, s) {
                                v.push(format!(
                                    "mode {m} assignment disagrees with node {k} slot {s}"
                                ));
                            }
                        }
                    }
                }
            }
        }
        for (m, &count) in mode_seen.iter().enumerate() {
            if count == 0 {
                v.push(format!("mode {m} is not assigned to any node"));
            } else if count > 1 {
                v.push(format!("duplicate outgoing mode {m}"));
            }
        }
        for (m, leg) in self.outgoing.iter().enumerate() {
            if leg.weight == 0 {
                v.push(format!("mode {m} has nonpositive weight"));
            }
            if leg.node >= self.nodes.len() || leg.slot >= self.nodes[leg.node].slots.len() {
                v.push(format!("mode {m} placed on missing node/slot"));
            }
        }
        v
    }

    /// Shape consistency of a node set against this diagram.
    pub fn validate_nodes<T: Scalar>(&self, nodes: &NodeTensorSet<T>) -> Vec<String> {
        let mut v = Vec::new();
        if nodes.len() != self.nodes.len() {
            v.push(format!(
                "node set has {} tensors, diagram has {} nodes",
                nodes.len(),
                self.nodes.len()
            ));
            return v;
        }
        for k in 0..nodes.len() {
            let want = self.node_shape(k);
            match nodes.tensor(k) {
                NodeTensor::Dense(t) => {
                    if t.dims() != want.as_slice() {
                        v.push(format!(
                            "node {k}: tensor dims {:?} do not match diagram shape {want:?}",
                            t.dims()
                        ));
                    }
                }
                NodeTensor::Diagonal(lam) => {
                    if want.iter().any(|&x| x != want[0]) || lam.len() != want[0] {
                        v.push(format!(
                            "node {k}: diagonal of length {} does not match shape {want:?}",
                            lam.len()
                        ));
                    }
                }
            }
        }
        v
    }

    fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidDiagram(v.join("; ")))
        }
    }
}

/// One node tensor: dense, or the diagonal of a CP core.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeTensor<T> {
    Dense(DenseTensor<T>),
    Diagonal(Vec<T>),
}

impl<T: Scalar> NodeTensor<T> {
    pub fn fro_norm(&self) -> T {
        match self {
            NodeTensor::Dense(t) => t.fro_norm(),
            NodeTensor::Diagonal(l) => l.iter().map(|&x| x * x).sum::<T>().sqrt(),
        }
    }
}

/// The collection of node tensors matching a diagram.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTensorSet<T> {
    tensors: Vec<NodeTensor<T>>,
}

impl<T: Scalar> NodeTensorSet<T> {
    pub fn new(tensors: Vec<NodeTensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, k: usize) -> &NodeTensor<T> {
        &self.tensors[k]
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut NodeTensor<T> {
        &mut self.tensors[k]
    }

    pub fn tensors(&self) -> &[NodeTensor<T>] {
        &self.tensors
    }

    /// All-zero node tensors shaped by the diagram (diagonal for CP).
    pub fn zeros(diagram: &TensorDiagram) -> Self {
        Self::build(diagram, |_, _| T::zero(), T::zero())
    }

    /// Deterministic standard-normal node tensors (diagonal set to ones).
    pub fn random(diagram: &TensorDiagram, seed: u64) -> Self {
        let rng = CounterRng::from_seed(seed, &[0x6e6f_6465]);
        let mut ctr = 0u64;
        Self::build(
            diagram,
            |_, _| {
                ctr += 1;
                T::from_f64_lossy(rng.normal(ctr))
            },
            T::one(),
        )
    }

    fn build(
        diagram: &TensorDiagram,
        mut dense_entry: impl FnMut(usize, usize) -> T,
        diag_value: T,
    ) -> Self {
        let cp_diag = cp_diagonal_node(diagram);
        let tensors = (0..diagram.node_count())
            .map(|k| {
                let shape = diagram.node_shape(k);
                if cp_diag == Some(k) {
                    NodeTensor::Diagonal(vec![diag_value; shape[0]])
                } else {
                    let total: usize = shape.iter().product();
                    let data = (0..total).map(|i| dense_entry(k, i)).collect();
                    NodeTensor::Dense(DenseTensor::from_data(&shape, data).unwrap())
                }
            })
            .collect();
        Self { tensors }
    }
}

/// Index of the CP diagonal node, if the diagram is the CP constructor shape.
pub fn cp_diagonal_node(diagram: &TensorDiagram) -> Option<usize> {
    if diagram.kind() != Some(TopologyKind::Cp) {
        return None;
    }
    Some(0)
}

/// Replaces the tensor of node `k` by its mode-`slot` product with `m`.
///
/// For the diagonal CP node only diagonal `m` is admissible (scaling
/// absorption); anything else is rejected.
pub fn node_mode_update<T: Scalar>(
    nodes: &NodeTensorSet<T>,
    k: usize,
    slot: usize,
    m: &Matrix<T>,
) -> Result<NodeTensorSet<T>> {
    let mut out = nodes.clone();
    match nodes.tensor(k) {
        NodeTensor::Dense(t) => {
            *out.tensor_mut(k) = NodeTensor::Dense(t.mode_product(m, slot)?);
        }
        NodeTensor::Diagonal(lam) => {
            if m.rows() != lam.len() || m.cols() != lam.len() {
                return Err(Error::ShapeMismatch(
                    "diagonal node update must be square".into(),
                ));
            }
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    if i != j && m.get(i, j) != T::zero() {
                        return Err(Error::InvalidArgument(
                            "only diagonal updates apply to the CP diagonal node".into(),
                        ));
                    }
                }
            }
            let scaled = lam
                .iter()
                .enumerate()
                .map(|(i, &l)| l * m.get(i, i))
                .collect();
            *out.tensor_mut(k) = NodeTensor::Diagonal(scaled);
        }
    }
    Ok(out)
}

/// Contraction elimination strategy; results agree to roundoff.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContractionOrder {
    /// Pick the pair with the smallest intermediate at each step.
    GreedySize,
    /// Fold nodes left to right in id order.
    NodeOrder,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Label {
    Edge(usize),
    Mode(usize),
}

#[derive(Clone, Debug)]
struct LabeledTensor<T> {
    labels: Vec<Label>,
    data: DenseTensor<T>,
}

impl<T: Scalar> LabeledTensor<T> {
    fn is_scalar(&self) -> bool {
        self.labels.is_empty()
    }

    fn scalar_value(&self) -> T {
        self.data.get_linear(0)
    }

    fn size(&self) -> usize {
        if self.is_scalar() {
            1
        } else {
            self.data.len()
        }
    }
}

fn expand_diagonal<T: Scalar>(lam: &[T], n_slots: usize) -> Result<DenseTensor<T>> {
    let r = lam.len();
    if r.checked_pow(n_slots as u32).is_none_or(|t| t > 100_000_000) {
        return Err(Error::InvalidArgument(
            "diagonal node too large to expand densely".into(),
        ));
    }
    let dims = vec![r; n_slots];
    let mut t = DenseTensor::zeros(&dims);
    let stride: usize = (0..n_slots).map(|k| r.pow(k as u32)).sum();
    for (l, &v) in lam.iter().enumerate() {
        t.data_mut()[l * stride] = v;
    }
    Ok(t)
}

fn labeled_from_node<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
    k: usize,
) -> Result<LabeledTensor<T>> {
    let labels: Vec<Label> = diagram.nodes()[k]
        .slots
        .iter()
        .map(|s| match *s {
            SlotKind::Internal(e) => Label::Edge(e),
            SlotKind::Outgoing(m) => Label::Mode(m),
        })
        .collect();
    let data = match nodes.tensor(k) {
        NodeTensor::Dense(t) => t.clone(),
        NodeTensor::Diagonal(lam) => expand_diagonal(lam, labels.len())?,
    };
    Ok(LabeledTensor { labels, data })
}

fn contract_pair<T: Scalar>(a: &LabeledTensor<T>, b: &LabeledTensor<T>) -> LabeledTensor<T> {
    if a.is_scalar() || b.is_scalar() {
        let (s, t) = if a.is_scalar() { (a, b) } else { (b, a) };
        let mut data = t.data.clone();
        data.scale(s.scalar_value());
        return LabeledTensor {
            labels: t.labels.clone(),
            data,
        };
    }
    let mut shared: Vec<Label> = a
        .labels
        .iter()
        .copied()
        .filter(|l| b.labels.contains(l))
        .collect();
    shared.sort();
    let a_free: Vec<usize> = (0..a.labels.len())
        .filter(|&i| !shared.contains(&a.labels[i]))
        .collect();
    let b_free: Vec<usize> = (0..b.labels.len())
        .filter(|&i| !shared.contains(&b.labels[i]))
        .collect();
    let a_shared: Vec<usize> = shared
        .iter()
        .map(|l| a.labels.iter().position(|x| x == l).unwrap())
        .collect();
    let b_shared: Vec<usize> = shared
        .iter()
        .map(|l| b.labels.iter().position(|x| x == l).unwrap())
        .collect();

    let mut perm_a = a_free.clone();
    perm_a.extend_from_slice(&a_shared);
    let mut perm_b = b_shared.clone();
    perm_b.extend_from_slice(&b_free);

    let free_a_size: usize = a_free.iter().map(|&i| a.data.dims()[i]).product();
    let free_b_size: usize = b_free.iter().map(|&i| b.data.dims()[i]).product();
    let shared_size: usize = a_shared.iter().map(|&i| a.data.dims()[i]).product();

    let amat = a
        .data
        .permute(&perm_a)
        .as_matrix(free_a_size, shared_size)
        .unwrap();
    let bmat = b
        .data
        .permute(&perm_b)
        .as_matrix(shared_size, free_b_size)
        .unwrap();
    let cmat = amat.matmul(&bmat);

    let mut labels: Vec<Label> = a_free.iter().map(|&i| a.labels[i]).collect();
    labels.extend(b_free.iter().map(|&i| b.labels[i]));
    if labels.is_empty() {
        return LabeledTensor {
            labels,
            data: DenseTensor::from_data(&[1], vec![cmat.get(0, 0)]).unwrap(),
        };
    }
    let mut dims: Vec<usize> = a_free.iter().map(|&i| a.data.dims()[i]).collect();
    dims.extend(b_free.iter().map(|&i| b.data.dims()[i]));
    let data = DenseTensor::from_data(&dims, cmat.data().to_vec()).unwrap();
    LabeledTensor { labels, data }
}

fn eliminate<T: Scalar>(
    mut work: Vec<LabeledTensor<T>>,
    order: ContractionOrder,
) -> LabeledTensor<T> {
    assert!(!work.is_empty());
    match order {
        ContractionOrder::NodeOrder => {
            let mut acc = work.remove(0);
            for t in work {
                acc = contract_pair(&acc, &t);
            }
            acc
        }
        ContractionOrder::GreedySize => {
            while work.len() > 1 {
                let mut best: Option<(usize, usize, usize, bool)> = None;
                for i in 0..work.len() {
                    for j in i + 1..work.len() {
                        let shares = work[i]
                            .labels
                            .iter()
                            .any(|l| work[j].labels.contains(l))
                            || work[i].is_scalar()
                            || work[j].is_scalar();
                        let shared_size: usize = work[i]
                            .labels
                            .iter()
                            .enumerate()
                            .filter(|(_, l)| work[j].labels.contains(l))
                            .map(|(idx, _)| work[i].data.dims()[idx])
                            .product();
                        let size = work[i].size() / shared_size.max(1) * work[j].size()
                            / shared_size.max(1);
                        match best {
                            // Pairs that actually share an edge come first.
                            Some((_, _, bsize, bshares))
                                if (bshares, std::cmp::Reverse(bsize))
                                    >= (shares, std::cmp::Reverse(size)) => {}
                            _ => best = Some((i, j, size, shares)),
                        }
                    }
                }
                let (i, j, _, _) = best.unwrap();
                let b = work.swap_remove(j);
                let a = work.swap_remove(i);
                let merged = contract_pair(&a, &b);
                work.push(merged);
            }
            work.pop().unwrap()
        }
    }
}

/// Contracts the node tensors into the dense core `G` (modes ordered 0..N-1).
pub fn contract<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
) -> Result<DenseTensor<T>> {
    contract_with_order(diagram, nodes, ContractionOrder::GreedySize)
}

pub fn contract_with_order<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
    order: ContractionOrder,
) -> Result<DenseTensor<T>> {
    diagram.ensure_valid()?;
    let shape_issues = diagram.validate_nodes(nodes);
    if !shape_issues.is_empty() {
        return Err(Error::InvalidDiagram(shape_issues.join("; ")));
    }
    if let Some(out) = contract_cp_fast(diagram, nodes) {
        return Ok(out);
    }
    let work: Vec<LabeledTensor<T>> = (0..diagram.node_count())
        .map(|k| labeled_from_node(diagram, nodes, k))
        .collect::<Result<_>>()?;
    let result = eliminate(work, order);
    finalize_outgoing(diagram, result)
}

fn finalize_outgoing<T: Scalar>(
    diagram: &TensorDiagram,
    result: LabeledTensor<T>,
) -> Result<DenseTensor<T>> {
    let n = diagram.order();
    if result.labels.len() != n {
        return Err(Error::InvalidDiagram(format!(
            "contraction left labels {:?}, expected the {n} outgoing modes",
            result.labels
        )));
    }
    let mut perm = Vec::with_capacity(n);
    for m in 0..n {
        let pos = result
            .labels
            .iter()
            .position(|&l| l == Label::Mode(m))
            .ok_or_else(|| Error::InvalidDiagram(format!("mode {m} lost in contraction")))?;
        perm.push(pos);
    }
    Ok(result.data.permute(&perm))
}

/// Direct accumulation for the CP constructor shape:
/// `G = sum_l lambda_l b1_l o b2_l o ... o bN_l`.
fn contract_cp_fast<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
) -> Option<DenseTensor<T>> {
    let diag_node = cp_diagonal_node(diagram)?;
    let lam = match nodes.tensor(diag_node) {
        NodeTensor::Diagonal(l) => l.clone(),
        NodeTensor::Dense(_) => return None,
    };
    let n = diagram.order();
    let d = diagram.d();
    let mut cols: Vec<&[T]> = Vec::with_capacity(n);
    let mut mats: Vec<&DenseTensor<T>> = Vec::with_capacity(n);
    for m in 0..n {
        let leg = diagram.outgoing()[m];
        match nodes.tensor(leg.node) {
            NodeTensor::Dense(t) if t.order() == 2 && leg.slot == 0 => mats.push(t),
            _ => return None,
        }
    }
    let mut g = DenseTensor::zeros(&d);
    let total = g.len();
    let mut idx = vec![0usize; n];
    for (l, &lv) in lam.iter().enumerate() {
        cols.clear();
        idx.iter_mut().for_each(|i| *i = 0);
        let col_slices: Vec<&[T]> = mats
            .iter()
            .map(|t| &t.data()[l * t.dims()[0]..(l + 1) * t.dims()[0]])
            .collect();
        for lin in 0..total {
            let mut v = lv;
            for (k, &i) in idx.iter().enumerate() {
                v *= col_slices[k][i];
            }
            g.data_mut()[lin] += v;
            for k in 0..n {
                idx[k] += 1;
                if idx[k] < d[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    Some(g)
}

/// Environment of node `k` for a dense fit: the contraction of every other
/// node, with open legs ordered as (outgoing modes not on `k`, ascending)
/// then (`k`'s internal slots in slot order).
pub struct Environment<T> {
    /// `prod(other outgoing dims) x prod(internal slot dims)` matrix.
    pub matrix: Matrix<T>,
    /// Modes not carried by node `k`, ascending.
    pub other_modes: Vec<usize>,
    /// Slot positions on node `k` that are internal, in slot order.
    pub internal_slots: Vec<usize>,
    /// Slot positions on node `k` that are outgoing, in slot order, with modes.
    pub outgoing_slots: Vec<(usize, usize)>,
}

/// Computes the dense-fit environment of node `k`.  The model restricted to
/// node `k` is linear: permuting the target so `k`'s outgoing modes come
/// last, each of its slices solves against the same environment matrix.
pub fn node_environment<T: Scalar>(
    diagram: &TensorDiagram,
    nodes: &NodeTensorSet<T>,
    k: usize,
) -> Result<Environment<T>> {
    diagram.ensure_valid()?;
    let sig = &diagram.nodes()[k];
    let internal_slots: Vec<usize> = (0..sig.slots.len())
        .filter(|&s| matches!(sig.slots[s], SlotKind::Internal(_)))
        .collect();
    let outgoing_slots: Vec<(usize, usize)> = (0..sig.slots.len())
        .filter_map(|s| match sig.slots[s] {
            SlotKind::Outgoing(m) => Some((s, m)),
            SlotKind::Internal(_) => None,
        })
        .collect();
    let own_modes: Vec<usize> = outgoing_slots.iter().map(|&(_, m)| m).collect();
    let other_modes: Vec<usize> = (0..diagram.order())
        .filter(|m| !own_modes.contains(m))
        .collect();

    let work: Vec<LabeledTensor<T>> = (0..diagram.node_count())
        .filter(|&i| i != k)
        .map(|i| labeled_from_node(diagram, nodes, i))
        .collect::<Result<_>>()?;
    let env = if work.is_empty() {
        LabeledTensor {
            labels: Vec::new(),
            data: DenseTensor::from_data(&[1], vec![T::one()]).unwrap(),
        }
    } else {
        eliminate(work, ContractionOrder::GreedySize)
    };

    // Target label order: other modes ascending, then k's internal edges.
    let mut want: Vec<Label> = other_modes.iter().map(|&m| Label::Mode(m)).collect();
    for &s in &internal_slots {
        if let SlotKind::Internal(e) = sig.slots[s] {
            want.push(Label::Edge(e));
        }
    }
    let rows: usize = other_modes
        .iter()
        .map(|&m| diagram.outgoing()[m].weight)
        .product();
    let cols: usize = internal_slots
        .iter()
        .map(|&s| diagram.slot_weight(k, s))
        .product();
    let matrix = if env.is_scalar() {
        if !want.is_empty() {
            return Err(Error::InvalidDiagram(
                "environment lost expected open legs".into(),
            ));
        }
        Matrix::from_data(1, 1, vec![env.scalar_value()])?
    } else {
        if env.labels.len() != want.len() {
            return Err(Error::InvalidDiagram(format!(
                "environment legs {:?} do not match expected {want:?}",
                env.labels
            )));
        }
        let perm: Vec<usize> = want
            .iter()
            .map(|l| {
                env.labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::InvalidDiagram(format!("missing env leg {l:?}")))
            })
            .collect::<Result<_>>()?;
        env.data.permute(&perm).as_matrix(rows, cols)?
    };
    Ok(Environment {
        matrix,
        other_modes,
        internal_slots,
        outgoing_slots,
    })
}

// ---------------------------------------------------------------------------
// Diagram file format (JSON, 1-based ids)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SlotDto {
    Internal { edge: usize },
    Outgoing { mode: usize },
}

#[derive(Serialize, Deserialize)]
struct EdgeDto {
    a: [usize; 2],
    b: [usize; 2],
    weight: usize,
}

#[derive(Serialize, Deserialize)]
struct OutgoingDto {
    mode: usize,
    node: usize,
    slot: usize,
    weight: usize,
}

#[derive(Serialize, Deserialize)]
struct DiagramDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<TopologyKind>,
    nodes: Vec<Vec<SlotDto>>,
    edges: Vec<EdgeDto>,
    outgoing: Vec<OutgoingDto>,
}

impl TensorDiagram {
    pub fn to_json(&self) -> Result<String> {
        let dto = DiagramDto {
            kind: self.kind,
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    n.slots
                        .iter()
                        .map(|s| match *s {
                            SlotKind::Internal(e) => SlotDto::Internal { edge: e + 1 },
                            SlotKind::Outgoing(m) => SlotDto::Outgoing { mode: m + 1 },
                        })
                        .collect()
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDto {
                    a: [e.a.0 + 1, e.a.1 + 1],
                    b: [e.b.0 + 1, e.b.1 + 1],
                    weight: e.weight,
                })
                .collect(),
            outgoing: self
                .outgoing
                .iter()
                .enumerate()
                .map(|(m, o)| OutgoingDto {
                    mode: m + 1,
                    node: o.node + 1,
                    slot: o.slot + 1,
                    weight: o.weight,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: DiagramDto = serde_json::from_str(text)?;
        let dec = |x: usize, what: &str| -> Result<usize> {
            x.checked_sub(1)
                .ok_or_else(|| Error::Parse(format!("{what} ids are 1-based")))
        };
        let nodes = dto
            .nodes
            .iter()
            .map(|slots| {
                let slots = slots
                    .iter()
                    .map(|s| {
                        Ok(match s {
                            SlotDto::Internal { edge } => {
                                SlotKind::Internal(dec(*edge, "edge")?)
                            }
                            SlotDto::Outgoing { mode } => {
                                SlotKind::Outgoing(dec(*mode, "mode")?)
                            }
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(NodeSignature { slots })
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = dto
            .edges
            .iter()
            .map(|e| {
                Ok(InternalEdge {
                    a: (dec(e.a[0], "node")?, dec(e.a[1], "slot")?),
                    b: (dec(e.b[0], "node")?, dec(e.b[1], "slot")?),
                    weight: e.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut outgoing = vec![
            OutgoingLeg {
                node: 0,
                slot: 0,
                weight: 0
            };
            dto.outgoing.len()
        ];
        for o in &dto.outgoing {
            let m = dec(o.mode, "mode")?;
            if m >= outgoing.len() {
                return Err(Error::Parse(format!("outgoing mode {} out of range", o.mode)));
            }
            outgoing[m] = OutgoingLeg {
                node: dec(o.node, "node")?,
                slot: dec(o.slot, "slot")?,
                weight: o.weight,
            };
        }
        let mut d = Self::new(nodes, edges, outgoing);
        d.kind = dto.kind;
        Ok(d)
    }
}
