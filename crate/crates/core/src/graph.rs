//! The multi-criteria expansion graph and its symmetric-normalized adjacency.
//!
//! Node layout is fixed: users occupy `0..n_users`, then one block of
//! `n_items` criterion-item nodes per criterion, so the node for item `i` under
//! criterion `c` is `n_users + c * n_items + i`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub user: usize,
    /// Global node index of the criterion-item endpoint.
    pub node: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McExpansionGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub n_criteria_plus1: usize,
    pub edges: Vec<Edge>,
    pub weighted_degree: Vec<f64>,
}

/// Node-space dimensions shared by graphs, embedding tables and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_users: usize,
    pub n_items: usize,
    pub n_criteria_plus1: usize,
}

impl Layout {
    pub fn node_count(&self) -> usize {
        self.n_users + self.n_criteria_plus1 * self.n_items
    }

    pub fn item_node(&self, item: usize, criterion: usize) -> usize {
        self.n_users + criterion * self.n_items + item
    }

    pub fn criterion_of(&self, node: usize) -> Option<usize> {
        (node >= self.n_users).then(|| (node - self.n_users) / self.n_items)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphHeader {
    pub n_users: usize,
    pub n_items: usize,
    #[serde(rename = "C")]
    pub n_criteria: usize,
}

impl McExpansionGraph {
    pub fn layout(&self) -> Layout {
        Layout {
            n_users: self.n_users,
            n_items: self.n_items,
            n_criteria_plus1: self.n_criteria_plus1,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n_users + self.n_criteria_plus1 * self.n_items
    }

    pub fn item_node(&self, item: usize, criterion: usize) -> usize {
        self.n_users + criterion * self.n_items + item
    }

    /// Inverse of [`item_node`](Self::item_node) for non-user nodes.
    pub fn item_of(&self, node: usize) -> (usize, usize) {
        let off = node - self.n_users;
        (off % self.n_items, off / self.n_items)
    }

    pub fn is_user(&self, node: usize) -> bool {
        node < self.n_users
    }

    pub fn header(&self) -> GraphHeader {
        GraphHeader {
            n_users: self.n_users,
            n_items: self.n_items,
            n_criteria: self.n_criteria_plus1 - 1,
        }
    }

    /// Sorted criterion-item neighbours of every user.
    pub fn user_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for e in &self.edges {
            out[e.user].push(e.node);
        }
        for list in &mut out {
            list.sort_unstable();
        }
        out
    }

    /// Edge-list TSV `src dst weight` next to a JSON header file.
    pub fn export(&self, edges_path: impl AsRef<Path>, header_path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(edges_path)?);
        for e in &self.edges {
            writeln!(out, "{}\t{}\t{}", e.user, e.node, e.weight)?;
        }
        out.flush()?;
        fs::write(header_path, serde_json::to_string_pretty(&self.header())?)?;
        Ok(())
    }
}

/// One edge per positive. Criterion-0 edges weigh `alpha`, others 1, each
/// multiplied by the positive's own weight when one is set.
pub fn build_graph(train: &InteractionSet, alpha: f64) -> Result<McExpansionGraph> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if train.is_empty() {
        return Err(Error::Empty("training interactions are empty".into()));
    }
    let n_users = train.n_users();
    let n_items = train.n_items();
    let n_criteria_plus1 = train.n_criteria_plus1();
    let mut g = McExpansionGraph {
        n_users,
        n_items,
        n_criteria_plus1,
        edges: Vec::with_capacity(train.n_positives()),
        weighted_degree: vec![0.0; n_users + n_criteria_plus1 * n_items],
    };
    for (c, list) in train.positives.iter().enumerate() {
        let class = if c == 0 { alpha } else { 1.0 };
        for p in list {
            let weight = class * p.weight.unwrap_or(1.0);
            if !(weight > 0.0) {
                return Err(Error::Validation(format!("non-positive edge weight {weight}")));
            }
            let node = g.item_node(p.item, c);
            g.weighted_degree[p.user] += weight;
            g.weighted_degree[node] += weight;
            g.edges.push(Edge {
                user: p.user,
                node,
                weight,
            });
        }
    }
    Ok(g)
}

/// `D^{-1/2} A D^{-1/2}` in CSR form over all nodes, both edge directions stored.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub n_nodes: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub coef: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn row(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[v]..self.row_ptr[v + 1];
        self.col[range.clone()].iter().copied().zip(self.coef[range].iter().copied())
    }

    /// Coefficient between two nodes, zero when not adjacent.
    pub fn coefficient(&self, a: usize, b: usize) -> f64 {
        self.row(a).find(|&(n, _)| n == b).map_or(0.0, |(_, c)| c)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_nodes, self.n_nodes));
        for v in 0..self.n_nodes {
            for (n, c) in self.row(v) {
                out[[v, n]] += c;
            }
        }
        out
    }
}

pub fn normalize(g: &McExpansionGraph) -> NormalizedAdjacency {
    let n = g.node_count();
    let mut counts = vec![0usize; n];
    for e in &g.edges {
        counts[e.user] += 1;
        counts[e.node] += 1;
    }
    let mut row_ptr = vec![0usize; n + 1];
    for v in 0..n {
        row_ptr[v + 1] = row_ptr[v] + counts[v];
    }
    let nnz = row_ptr[n];
    let mut col = vec![0usize; nnz];
    let mut coef = vec![0.0; nnz];
    let mut fill = row_ptr.clone();
    for e in &g.edges {
        let c = e.weight / (g.weighted_degree[e.user].sqrt() * g.weighted_degree[e.node].sqrt());
        col[fill[e.user]] = e.node;
        coef[fill[e.user]] = c;
        fill[e.user] += 1;
        col[fill[e.node]] = e.user;
        coef[fill[e.node]] = c;
        fill[e.node] += 1;
    }
    // Sort every row by column so that reduction order is independent of edge order.
    for v in 0..n {
        let (lo, hi) = (row_ptr[v], row_ptr[v + 1]);
        let mut pairs: Vec<(usize, f64)> = col[lo..hi].iter().copied().zip(coef[lo..hi].iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        for (k, (cc, cf)) in pairs.into_iter().enumerate() {
            col[lo + k] = cc;
            coef[lo + k] = cf;
        }
    }
    NormalizedAdjacency {
        n_nodes: n,
        row_ptr,
        col,
        coef,
    }
}

fn propagate_row(adj: &NormalizedAdjacency, x: &[f64], v: usize, out: &mut [f64]) {
    let d = out.len();
    for (n, c) in adj.row(v) {
        let src = &x[n * d..(n + 1) * d];
        for (o, s) in out.iter_mut().zip(src) {
            *o += c * s;
        }
    }
}

/// `out[v] = sum_n coef(v, n) * x[n]`; nodes without edges get zero rows.
pub fn propagate(adj: &NormalizedAdjacency, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.nrows() != adj.n_nodes {
        return Err(Error::Dimension(format!(
            "feature table has {} rows, graph has {} nodes",
            x.nrows(),
            adj.n_nodes
        )));
    }
    let mut out = Array2::zeros(x.raw_dim());
    let x = x.as_standard_layout();
    let data = x.as_slice().expect("standard layout");
    #[cfg(feature = "parallel")]
    {
        use ndarray::parallel::prelude::*;
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(v, mut row)| propagate_row(adj, data, v, row.as_slice_mut().unwrap()));
    }
    #[cfg(not(feature = "parallel"))]
    for (v, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        propagate_row(adj, data, v, row.as_slice_mut().unwrap());
    }
    Ok(out)
}
