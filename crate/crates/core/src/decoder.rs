//! Equivariant graph decoder.
//!
//! Each layer exchanges messages along the observed edges and moves
//! particles along relative position vectors:
//!
//! ```text
//! m_ij = φ_m(h_i, h_j, ‖x_i − x_j‖², a_ij)
//! h'_i = φ_h(h_i, Σ_j m_ij)
//! x'_i = x_i + Σ_j (x_i − x_j) φ_x(m_ij)
//! ```
//!
//! The first layer of a stack also adds `φ_v(h_i) v_i` so initial
//! velocities can enter the prediction. Every time step is decoded from the
//! same initial state with the same stack, so steps are independent.

use rand::Rng;
use rayon::prelude::*;

use crate::nn::Mlp;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("edge {edge} ({from}, {to}) references a particle outside 0..{n}")]
    Dangling {
        edge: usize,
        from: usize,
        to: usize,
        n: usize,
    },
    #[error("edge {edge} is a self-loop on particle {node}")]
    SelfLoop { edge: usize, node: usize },
    #[error("{edges} edges but {attrs} attribute rows")]
    AttrCount { edges: usize, attrs: usize },
    #[error("decoder stack is empty")]
    EmptyStack,
    #[error("no embeddings to decode")]
    NoSteps,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Observed interaction graph. Edge `(i, j)` carries a message from `j`
/// to `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    edge_attrs: Tensor,
}

impl ObservedGraph {
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        edge_attrs: Tensor,
    ) -> Result<Self, GraphError> {
        for (k, &(i, j)) in edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(GraphError::Dangling {
                    edge: k,
                    from: i,
                    to: j,
                    n,
                });
            }
            if i == j {
                return Err(GraphError::SelfLoop { edge: k, node: i });
            }
        }
        let (rows, _) = edge_attrs.dims2()?;
        if rows != edges.len() {
            return Err(GraphError::AttrCount {
                edges: edges.len(),
                attrs: rows,
            });
        }
        Ok(Self {
            n,
            edges,
            edge_attrs,
        })
    }

    /// Both directions of every undirected pair, each with attribute `1`.
    pub fn undirected(n: usize, pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        let edges: Vec<_> = pairs.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
        let attrs = Tensor::ones(&[edges.len(), 1]);
        Self::new(n, edges, attrs)
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attrs(&self) -> &Tensor {
        &self.edge_attrs
    }

    pub fn attr_dim(&self) -> usize {
        self.edge_attrs.cols()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    /// Number of incoming edges per particle.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, _) in &self.edges {
            deg[i] += 1;
        }
        deg
    }

    /// True when every edge has a reverse twin with equal attributes.
    pub fn is_symmetric(&self) -> bool {
        self.edges.iter().enumerate().all(|(k, &(i, j))| {
            self.edges
                .iter()
                .enumerate()
                .any(|(r, &e)| e == (j, i) && self.edge_attrs.row(r) == self.edge_attrs.row(k))
        })
    }

    /// Relabels particles: new particle `a` is old particle `perm[a]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let mut new_of = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            new_of[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .map(|&(i, j)| (new_of[i], new_of[j]))
            .collect();
        Self::new(self.n, edges, self.edge_attrs.clone())
    }
}

/// How messages are combined at each receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(format!(
                "unknown aggregation {other:?}, expected sum or mean"
            )),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EGNNLayerParams {
    /// `[h_i, h_j, ‖x_i − x_j‖², a_ij] → d`
    pub phi_m: Mlp,
    /// `[h, Σm] → d`
    pub phi_h: Mlp,
    /// `m → 1`, last layer zero at init.
    pub phi_x: Mlp,
    /// `h → 1`, first layer of a stack only, zero at init.
    pub phi_v: Option<Mlp>,
}

impl EGNNLayerParams {
    pub fn new(
        d: usize,
        attr_dim: usize,
        hidden: usize,
        velocity: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            phi_m: Mlp::new(&[2 * d + 1 + attr_dim, hidden, d], true, rng),
            phi_h: Mlp::new(&[2 * d, hidden, d], false, rng),
            phi_x: Mlp::zero_output(&[d, hidden, 1], rng),
            phi_v: velocity.then(|| Mlp::zero_output(&[d, hidden, 1], rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_h.outputs()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.phi_m.visit(&format!("{prefix}.phi_m"), f);
        self.phi_h.visit(&format!("{prefix}.phi_h"), f);
        self.phi_x.visit(&format!("{prefix}.phi_x"), f);
        if let Some(v) = &self.phi_v {
            v.visit(&format!("{prefix}.phi_v"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.phi_m.visit_mut(&format!("{prefix}.phi_m"), f);
        self.phi_h.visit_mut(&format!("{prefix}.phi_h"), f);
        self.phi_x.visit_mut(&format!("{prefix}.phi_x"), f);
        if let Some(v) = &mut self.phi_v {
            v.visit_mut(&format!("{prefix}.phi_v"), f);
        }
    }
}

/// `L` layers, velocity head on the first.
pub fn new_stack(
    d: usize,
    attr_dim: usize,
    hidden: usize,
    layers: usize,
    rng: &mut impl Rng,
) -> Vec<EGNNLayerParams> {
    (0..layers)
        .map(|l| EGNNLayerParams::new(d, attr_dim, hidden, l == 0, rng))
        .collect()
}

/// Graph index data shared by every layer of one decode.
struct Wiring {
    recv: Vec<usize>,
    send: Vec<usize>,
    attrs: Option<Var>,
    inv_degree: Option<Var>,
}

impl Wiring {
    fn new(tape: &mut Tape, g: &ObservedGraph, aggr: Aggregation) -> Self {
        let attrs = (g.attr_dim() > 0).then(|| tape.leaf(g.edge_attrs().clone()));
        let inv_degree = (aggr == Aggregation::Mean).then(|| {
            let inv = g.degrees().iter().map(|&k| 1.0 / k.max(1) as f64).collect();
            tape.leaf(Tensor::new(&[g.particles(), 1], inv).expect("shape"))
        });
        Self {
            recv: g.receivers(),
            send: g.senders(),
            attrs,
            inv_degree,
        }
    }

    fn aggregate(&self, tape: &mut Tape, per_edge: Var, n: usize) -> Result<Var, TensorError> {
        let total = tape.scatter_add_rows(per_edge, &self.recv, n)?;
        match self.inv_degree {
            Some(inv) => tape.mul_col(total, inv),
            None => Ok(total),
        }
    }
}

fn layer_on_tape(
    tape: &mut Tape,
    x: Var,
    h: Var,
    v: Option<Var>,
    wiring: &Wiring,
    p: &EGNNLayerParams,
) -> Result<(Var, Var), TensorError> {
    let n = tape.value(x).rows();
    let hi = tape.gather_rows(h, &wiring.recv)?;
    let hj = tape.gather_rows(h, &wiring.send)?;
    let xi = tape.gather_rows(x, &wiring.recv)?;
    let xj = tape.gather_rows(x, &wiring.send)?;
    let rel = tape.sub(xi, xj)?;
    let dist2 = tape.sq_norm_rows(rel)?;
    let mut parts = vec![hi, hj, dist2];
    parts.extend(wiring.attrs);
    let input = tape.concat_cols(&parts)?;
    let m = p.phi_m.forward(tape, input)?;

    let m_agg = wiring.aggregate(tape, m, n)?;
    let h_in = tape.concat_cols(&[h, m_agg])?;
    let h_new = p.phi_h.forward(tape, h_in)?;

    let w = p.phi_x.forward(tape, m)?;
    let shift = tape.mul_col(rel, w)?;
    let shift = wiring.aggregate(tape, shift, n)?;
    let mut x_new = tape.add(x, shift)?;
    if let (Some(v), Some(phi_v)) = (v, &p.phi_v) {
        let s = phi_v.forward(tape, h)?;
        let push = tape.mul_col(v, s)?;
        x_new = tape.add(x_new, push)?;
    }
    Ok((x_new, h_new))
}

/// One layer on the tape. `v` feeds the velocity head when the layer has one.
pub fn egnn_layer(
    tape: &mut Tape,
    x: Var,
    h: Var,
    v: Option<Var>,
    g: &ObservedGraph,
    p: &EGNNLayerParams,
    aggr: Aggregation,
) -> Result<(Var, Var), GraphError> {
    let wiring = Wiring::new(tape, g, aggr);
    Ok(layer_on_tape(tape, x, h, v, &wiring, p)?)
}

/// Positions predicted from embeddings `h_t` and the initial state. The
/// decoder's updated embeddings are dropped after the last layer.
pub fn decode_step(
    tape: &mut Tape,
    h_t: Var,
    x0: Var,
    v0: Var,
    g: &ObservedGraph,
    stack: &[EGNNLayerParams],
    aggr: Aggregation,
) -> Result<Var, GraphError> {
    if stack.is_empty() {
        return Err(GraphError::EmptyStack);
    }
    let wiring = Wiring::new(tape, g, aggr);
    let (mut x, mut h) = (x0, h_t);
    for (l, p) in stack.iter().enumerate() {
        let v = (l == 0).then_some(v0);
        (x, h) = layer_on_tape(tape, x, h, v, &wiring, p)?;
    }
    Ok(x)
}

/// [`decode_step`] for every embedding in `h_seq`, recorded on one tape.
pub fn decode_sequence(
    tape: &mut Tape,
    h_seq: &[Var],
    x0: Var,
    v0: Var,
    g: &ObservedGraph,
    stack: &[EGNNLayerParams],
    aggr: Aggregation,
) -> Result<Vec<Var>, GraphError> {
    if h_seq.is_empty() {
        return Err(GraphError::NoSteps);
    }
    h_seq
        .iter()
        .map(|&h| decode_step(tape, h, x0, v0, g, stack, aggr))
        .collect()
}

/// Decodes one frame from plain values.
pub fn decode_frame(
    h_t: &Tensor,
    x0: &Tensor,
    v0: &Tensor,
    g: &ObservedGraph,
    stack: &[EGNNLayerParams],
    aggr: Aggregation,
) -> Result<Tensor, GraphError> {
    let mut tape = Tape::new();
    let h = tape.leaf(h_t.clone());
    let x = tape.leaf(x0.clone());
    let v = tape.leaf(v0.clone());
    let out = decode_step(&mut tape, h, x, v, g, stack, aggr)?;
    Ok(tape.value(out).clone())
}

/// Decodes every time step independently and in parallel.
pub fn decode_trajectory(
    h_seq: &[Tensor],
    x0: &Tensor,
    v0: &Tensor,
    g: &ObservedGraph,
    stack: &[EGNNLayerParams],
    aggr: Aggregation,
) -> Result<Vec<Tensor>, GraphError> {
    if h_seq.is_empty() {
        return Err(GraphError::NoSteps);
    }
    h_seq
        .par_iter()
        .map(|h| decode_frame(h, x0, v0, g, stack, aggr))
        .collect()
}
