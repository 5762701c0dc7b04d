//! Dynamic directed graph construction over the instances of a bag.
//!
//! Each instance is projected into a head (what it asks about) and a tail
//! (what it offers). Head `i` scores every tail with a scaled dot product,
//! keeps its `k` best tails as neighbours, normalizes the selected scores
//! with a softmax into edge weights `omega`, and attaches to every edge the
//! embedding `omega·t_j + (1-omega)·h_i`. The whole construction lives on
//! the tape: gradients flow through `omega` and the gathered tails, never
//! through the selected indices.
//!
//! Two ablation constructors pick neighbours by cosine similarity or
//! Euclidean distance between the raw (pre-projection) instance features
//! instead, keeping the edge embedding and downstream layers unchanged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{IndexMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Head and tail projections, each `D×D`, applied to row vectors as `x·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTailProjector<T> {
    pub head: Tensor<T>,
    pub tail: Tensor<T>,
}

impl<T: Real> HeadTailProjector<T> {
    pub fn new(head: Tensor<T>, tail: Tensor<T>) -> Result<Self> {
        let (hr, hc) = head.dims2()?;
        if hr != hc || head.shape() != tail.shape() {
            return Err(Error::dim(format!(
                "head/tail projections must be equal square matrices, got {:?} and {:?}",
                head.shape(),
                tail.shape()
            )));
        }
        Ok(Self { head, tail })
    }

    pub fn dim(&self) -> usize {
        self.head.rows()
    }

    /// Off-tape projection: `(features·W_h, features·W_t)`.
    pub fn project(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((features.matmul(&self.head)?, features.matmul(&self.tail)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeVariant {
    /// Learned head/tail similarity with top-k selection.
    #[serde(rename = "wikg")]
    Wikg,
    /// k nearest neighbours by cosine similarity of raw features.
    #[serde(rename = "knn-cos")]
    KnnCos,
    /// k nearest neighbours by Euclidean distance of raw features.
    #[serde(rename = "knn-dist")]
    KnnDist,
}

impl EdgeVariant {
    pub fn name(self) -> &'static str {
        match self {
            EdgeVariant::Wikg => "wikg",
            EdgeVariant::KnnCos => "knn-cos",
            EdgeVariant::KnnDist => "knn-dist",
        }
    }
}

impl std::str::FromStr for EdgeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wikg" => Ok(EdgeVariant::Wikg),
            "knn-cos" => Ok(EdgeVariant::KnnCos),
            "knn-dist" => Ok(EdgeVariant::KnnDist),
            other => Err(Error::param(format!("unknown edge policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgePolicy {
    pub variant: EdgeVariant,
    pub k: usize,
    /// Forbid a node from selecting itself as a neighbour.
    #[serde(default)]
    pub exclude_self: bool,
}

impl EdgePolicy {
    pub fn new(variant: EdgeVariant, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("edge policy needs k >= 1"));
        }
        Ok(Self {
            variant,
            k,
            exclude_self: false,
        })
    }

    fn check(&self, n: usize) -> Result<()> {
        let avail = if self.exclude_self { n.saturating_sub(1) } else { n };
        if self.k == 0 || self.k > avail {
            return Err(Error::param(format!(
                "k = {} neighbours requested but only {avail} candidates among {n} instances",
                self.k
            )));
        }
        Ok(())
    }
}

/// On-tape handles of a constructed graph.
///
/// Edge-indexed tensors are flattened to `(n·k)×D`, with edge `(i, j)` at
/// row `i·k + j`.
#[derive(Debug, Clone)]
pub struct GraphOnTape {
    pub n: usize,
    pub k: usize,
    pub neighbor_idx: IndexMatrix,
    /// `n×k` edge weights.
    pub omega: Var,
    pub heads: Var,
    pub tails: Var,
    /// Tail of neighbour `j` of node `i`.
    pub gathered_tails: Var,
    /// Head of node `i`, repeated for each of its edges.
    pub repeated_heads: Var,
    pub edge_emb: Var,
}

impl GraphOnTape {
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> Result<DirectedBagGraph<T>> {
        let d = tape.value(self.heads).cols();
        Ok(DirectedBagGraph {
            n: self.n,
            k: self.k,
            neighbor_idx: self.neighbor_idx.clone(),
            omega: tape.value(self.omega).clone(),
            edge_emb: tape.value(self.edge_emb).reshape(&[self.n, self.k, d])?,
            heads: tape.value(self.heads).clone(),
            tails: tape.value(self.tails).clone(),
        })
    }
}

/// Value snapshot of a bag graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedBagGraph<T> {
    pub n: usize,
    pub k: usize,
    pub neighbor_idx: IndexMatrix,
    /// `n×k`
    pub omega: Tensor<T>,
    /// `n×k×D`
    pub edge_emb: Tensor<T>,
    /// `n×D`
    pub heads: Tensor<T>,
    /// `n×D`
    pub tails: Tensor<T>,
}

impl<T: Real> DirectedBagGraph<T> {
    /// Checks the structural invariants shared by every edge policy.
    pub fn validate(&self, tol: f64) -> Result<()> {
        validate_structure(self.n, self.k, &self.neighbor_idx, &self.omega, tol)?;
        let d = self.heads.cols();
        if self.edge_emb.shape() != [self.n, self.k, d] || self.tails.shape() != self.heads.shape()
        {
            return Err(Error::dim("edge embedding or tail shape disagrees with heads"));
        }
        for i in 0..self.n {
            for j in 0..self.k {
                let w = self.omega.at(i, j).as_f64();
                let nb = self.neighbor_idx.get(i, j);
                for c in 0..d {
                    let expect =
                        w * self.tails.at(nb, c).as_f64() + (1.0 - w) * self.heads.at(i, c).as_f64();
                    let got = self.edge_emb.at3(i, j, c).as_f64();
                    if (expect - got).abs() > tol {
                        return Err(Error::Input(format!(
                            "edge ({i},{j}) embedding component {c}: {got} vs {expect}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn validate_structure<T: Real>(
    n: usize,
    k: usize,
    idx: &IndexMatrix,
    omega: &Tensor<T>,
    tol: f64,
) -> Result<()> {
    if idx.rows() != n || idx.cols() != k || omega.shape() != [n, k] {
        return Err(Error::dim(format!(
            "graph with n={n}, k={k} has index {}x{} and omega {:?}",
            idx.rows(),
            idx.cols(),
            omega.shape()
        )));
    }
    for i in 0..n {
        if let Some(&bad) = idx.row(i).iter().find(|&&j| j >= n) {
            return Err(Error::Input(format!("node {i} points at missing node {bad}")));
        }
        let row = omega.row(i);
        if row.iter().any(|w| !(w.as_f64() > 0.0 && w.as_f64() <= 1.0)) {
            return Err(Error::Input(format!("node {i} has edge weight outside (0,1]")));
        }
        let total: f64 = row.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::Input(format!("node {i} edge weights sum to {total}")));
        }
    }
    Ok(())
}

/// On-tape head/tail projection of `features` (`n×D`).
pub fn project_head_tail<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    head_w: Var,
    tail_w: Var,
) -> Result<(Var, Var)> {
    if tape.value(features).rows() == 0 {
        return Err(Error::Input("cannot project an empty bag".into()));
    }
    Ok((tape.matmul(features, head_w)?, tape.matmul(features, tail_w)?))
}

/// Learned-similarity graph: scaled head·tail logits, per-row top-k, softmax
/// over the kept logits.
pub fn build_wikg_graph<T: Real>(
    tape: &mut Tape<T>,
    heads: Var,
    tails: Var,
    policy: &EdgePolicy,
) -> Result<GraphOnTape> {
    let (n, d) = tape.value(heads).dims2()?;
    if tape.value(tails).shape() != tape.value(heads).shape() {
        return Err(Error::dim("heads and tails must have the same shape"));
    }
    policy.check(n)?;
    let scaled = tape.scale(heads, T::lit((d as f64).powf(-0.5)))?;
    let tails_t = tape.transpose(tails)?;
    let logits = tape.matmul(scaled, tails_t)?;
    let (selected, idx) = tape.topk_rows_masked(logits, policy.k, policy.exclude_self)?;
    let omega = tape.row_softmax(selected)?;
    attach_edges(tape, heads, tails, idx, omega)
}

/// Pairwise scores between raw feature rows, larger meaning closer.
pub fn knn_scores<T: Real>(features: &Tensor<T>, variant: EdgeVariant) -> Result<Tensor<T>> {
    let (n, _) = features.dims2()?;
    let mut out = vec![T::zero(); n * n];
    match variant {
        EdgeVariant::KnnCos => {
            let norms: Vec<T> = (0..n)
                .map(|i| features.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect();
            if let Some(i) = norms.iter().position(|v| *v == T::zero()) {
                return Err(Error::Input(format!(
                    "row {i} has zero norm; cosine similarity is undefined"
                )));
            }
            for i in 0..n {
                for j in 0..n {
                    let dot: T = features
                        .row(i)
                        .iter()
                        .zip(features.row(j))
                        .map(|(&a, &b)| a * b)
                        .sum();
                    out[i * n + j] = dot / (norms[i] * norms[j]);
                }
            }
        }
        EdgeVariant::KnnDist => {
            for i in 0..n {
                for j in 0..n {
                    let sq: T = features
                        .row(i)
                        .iter()
                        .zip(features.row(j))
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum();
                    out[i * n + j] = -sq.sqrt();
                }
            }
        }
        EdgeVariant::Wikg => {
            return Err(Error::param("knn_scores needs a k-NN edge variant"));
        }
    }
    Tensor::new(&[n, n], out)
}

/// k-NN ablation graph. Neighbours and weights come from `raw` features
/// (constants on the tape); heads and tails still feed the edge embeddings.
pub fn build_knn_graph<T: Real>(
    tape: &mut Tape<T>,
    raw: &Tensor<T>,
    heads: Var,
    tails: Var,
    policy: &EdgePolicy,
) -> Result<GraphOnTape> {
    let (n, _) = raw.dims2()?;
    if tape.value(heads).rows() != n {
        return Err(Error::dim("raw features and heads disagree on instance count"));
    }
    policy.check(n)?;
    let scores = knn_scores(raw, policy.variant)?;
    let scores = tape.constant(scores);
    let (selected, idx) = tape.topk_rows_masked(scores, policy.k, policy.exclude_self)?;
    let omega = tape.row_softmax(selected)?;
    attach_edges(tape, heads, tails, idx, omega)
}

/// Dispatches on the policy variant.
pub fn build_graph<T: Real>(
    tape: &mut Tape<T>,
    raw: &Tensor<T>,
    heads: Var,
    tails: Var,
    policy: &EdgePolicy,
) -> Result<GraphOnTape> {
    match policy.variant {
        EdgeVariant::Wikg => build_wikg_graph(tape, heads, tails, policy),
        EdgeVariant::KnnCos | EdgeVariant::KnnDist => build_knn_graph(tape, raw, heads, tails, policy),
    }
}

/// Edge embeddings `r_ij = omega_ij·t_j + (1 - omega_ij)·h_i`.
fn attach_edges<T: Real>(
    tape: &mut Tape<T>,
    heads: Var,
    tails: Var,
    idx: IndexMatrix,
    omega: Var,
) -> Result<GraphOnTape> {
    let (n, k) = (idx.rows(), idx.cols());
    let owners: Vec<usize> = (0..n * k).map(|e| e / k).collect();
    let gathered_tails = tape.gather_rows(tails, idx.as_slice())?;
    let repeated_heads = tape.gather_rows(heads, &owners)?;
    let w = tape.reshape(omega, &[n * k, 1])?;
    let one_minus_w = tape.affine(w, -T::one(), T::one())?;
    let tail_part = tape.mul_col_broadcast(gathered_tails, w)?;
    let head_part = tape.mul_col_broadcast(repeated_heads, one_minus_w)?;
    let edge_emb = tape.add(tail_part, head_part)?;
    Ok(GraphOnTape {
        n,
        k,
        neighbor_idx: idx,
        omega,
        heads,
        tails,
        gathered_tails,
        repeated_heads,
        edge_emb,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    /// The node whose neighbourhood this edge belongs to.
    pub src: usize,
    /// The selected neighbour.
    pub dst: usize,
    pub omega: f64,
    pub pi: Option<f64>,
}

/// Serializable view of a bag graph for inspection and plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n: usize,
    pub k: usize,
    pub edges: Vec<EdgeRecord>,
    #[serde(default)]
    pub node_meta: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(GraphFormat::Json),
            "dot" => Ok(GraphFormat::Dot),
            other => Err(Error::param(format!("unknown graph format {other:?}"))),
        }
    }
}

/// Builds the document for `g`, with optional attention weights `pi`
/// (`n×k`) and one metadata value per node.
pub fn export_graph<T: Real>(
    g: &DirectedBagGraph<T>,
    pi: Option<&Tensor<T>>,
    node_meta: Option<&[serde_json::Value]>,
) -> Result<GraphDocument> {
    if let Some(p) = pi {
        if p.shape() != [g.n, g.k] {
            return Err(Error::dim(format!(
                "attention weights {:?} do not match graph {}x{}",
                p.shape(),
                g.n,
                g.k
            )));
        }
    }
    if let Some(meta) = node_meta {
        if meta.len() != g.n {
            return Err(Error::dim(format!(
                "{} metadata entries for {} nodes",
                meta.len(),
                g.n
            )));
        }
    }
    let mut edges = Vec::with_capacity(g.n * g.k);
    for i in 0..g.n {
        for j in 0..g.k {
            edges.push(EdgeRecord {
                src: i,
                dst: g.neighbor_idx.get(i, j),
                omega: g.omega.at(i, j).as_f64(),
                pi: pi.map(|p| p.at(i, j).as_f64()),
            });
        }
    }
    Ok(GraphDocument {
        n: g.n,
        k: g.k,
        edges,
        node_meta: node_meta.map(<[_]>::to_vec).unwrap_or_default(),
    })
}

impl GraphDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Neighbour lists in edge order.
    pub fn neighbor_idx(&self) -> Result<IndexMatrix> {
        self.check_layout()?;
        IndexMatrix::new(self.n, self.k, self.edges.iter().map(|e| e.dst).collect())
    }

    pub fn omega(&self) -> Result<Tensor<f64>> {
        self.check_layout()?;
        Tensor::new(&[self.n, self.k], self.edges.iter().map(|e| e.omega).collect())
    }

    fn check_layout(&self) -> Result<()> {
        if self.edges.len() != self.n * self.k {
            return Err(Error::Input(format!(
                "{} edges for n={} and k={}",
                self.edges.len(),
                self.n,
                self.k
            )));
        }
        for (e, rec) in self.edges.iter().enumerate() {
            if rec.src != e / self.k.max(1) {
                return Err(Error::Input(format!(
                    "edge {e} has source {} out of order",
                    rec.src
                )));
            }
        }
        Ok(())
    }

    /// Structural invariants: `k` edges per source, targets in range, edge
    /// and attention weights each summing to one per source.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let idx = self.neighbor_idx()?;
        validate_structure(self.n, self.k, &idx, &self.omega()?, tol)?;
        if self.edges.iter().any(|e| e.pi.is_some()) {
            for i in 0..self.n {
                let mut total = 0.0;
                for e in &self.edges[i * self.k..(i + 1) * self.k] {
                    let p = e
                        .pi
                        .ok_or_else(|| Error::Input(format!("node {i} lacks attention weights")))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Input(format!("node {i} attention {p} outside [0,1]")));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > tol {
                    return Err(Error::Input(format!("node {i} attention sums to {total}")));
                }
            }
        }
        if !self.node_meta.is_empty() && self.node_meta.len() != self.n {
            return Err(Error::Input("node_meta length differs from n".into()));
        }
        Ok(())
    }

    /// Graphviz rendering; edge labels carry `omega` rounded to 4 places.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph bag {\n  node [shape=circle];\n");
        for i in 0..self.n {
            match self.node_meta.get(i) {
                Some(meta) => {
                    let text = match meta {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    let _ = writeln!(out, "  {i} [label=\"{i}: {}\"];", escape_dot(&text));
                }
                None => {
                    let _ = writeln!(out, "  {i};");
                }
            }
        }
        for e in &self.edges {
            let _ = write!(out, "  {} -> {} [label=\"{:.4}\"", e.src, e.dst, e.omega);
            if let Some(p) = e.pi {
                let _ = write!(out, ", pi=\"{p:.4}\"");
            }
            out.push_str("];\n");
        }
        out.push_str("}\n");
        out
    }

    pub fn write(&self, path: &Path, format: GraphFormat) -> Result<()> {
        let text = match format {
            GraphFormat::Json => self.to_json()?,
            GraphFormat::Dot => self.to_dot(),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
