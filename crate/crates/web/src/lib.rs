//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic can
//! be tested natively.

use ndarray::Array2;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use mcrec::dataset::{binarize, parse_tsv, CriterionSpec};
use mcrec::evaluation::smoothness_report;
use mcrec::graph::{build_graph, normalize};
use mcrec::model::{forward, pairnorm, EmbeddingState, ForwardConfig};
use mcrec::synthetic::{generate, SyntheticConfig};
use mcrec::Result;

fn js(e: mcrec::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// PairNorm of a flat `[x0, y0, x1, y1, ...]` point cloud.
pub fn pairnorm_flat(xy: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !xy.len().is_multiple_of(2) {
        return Err(mcrec::Error::Validation("point buffer must hold (x, y) pairs".into()));
    }
    let x = Array2::from_shape_vec((xy.len() / 2, 2), xy.to_vec())
        .map_err(|e| mcrec::Error::Validation(e.to_string()))?;
    Ok(pairnorm(&x, scale)?.into_raw_vec_and_offset().0)
}

#[wasm_bindgen(js_name = pairnormPoints)]
pub fn pairnorm_points(xy: &[f64], scale: f64) -> std::result::Result<Vec<f64>, JsError> {
    pairnorm_flat(xy, scale).map_err(js)
}

/// Mean pairwise embedding distance after each propagation layer, starting
/// from random embeddings on a small planted dataset.
pub fn smoothing(users: usize, items: usize, criteria: usize, layers: usize, use_pairnorm: bool, seed: u64) -> Result<Vec<f64>> {
    let log = generate(&SyntheticConfig {
        n_users: users,
        n_items: items,
        n_criteria: criteria,
        density: 0.1,
        seed,
        ..SyntheticConfig::default()
    })?;
    let specs: Vec<_> = (0..=criteria).map(|c| CriterionSpec::new(c, format!("c{c}"), 1.0, 5.0)).collect();
    let graph = build_graph(&binarize(&log, &specs), 1.5)?;
    let adj = normalize(&graph);
    let state = EmbeddingState::init(graph.layout(), 16, false, seed);
    let config = ForwardConfig {
        layers,
        scale: 1.0,
        pairnorm: use_pairnorm,
        pairnorm_layer0: true,
        preference: false,
        strict: false,
    };
    let trace = forward(&adj, &state, &config)?;
    Ok(smoothness_report(&trace, None, 1, seed).mean_distance)
}

#[wasm_bindgen(js_name = smoothingCurve)]
pub fn smoothing_curve(
    users: usize,
    items: usize,
    criteria: usize,
    layers: usize,
    use_pairnorm: bool,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    smoothing(users, items, criteria, layers, use_pairnorm, seed.into()).map_err(js)
}

#[derive(Debug, Serialize)]
pub struct NodeView {
    pub id: usize,
    pub label: String,
    /// `None` for users.
    pub criterion: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct EdgeView {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    pub normalized: f64,
}

#[derive(Debug, Serialize)]
pub struct GraphView {
    pub nodes: Vec<NodeView>,
    pub edges: Vec<EdgeView>,
}

/// Expansion graph of a small `user item criterion value` rating list.
/// Only nodes touched by an edge are listed.
pub fn expansion(ratings: &str, criteria: usize, alpha: f64) -> Result<GraphView> {
    let specs: Vec<_> = (0..=criteria).map(|c| CriterionSpec::new(c, format!("c{c}"), 1.0, 5.0)).collect();
    let iset = binarize(&parse_tsv(ratings.as_bytes(), &specs)?, &specs);
    let graph = build_graph(&iset, alpha)?;
    let adj = normalize(&graph);
    let layout = graph.layout();
    let mut used = vec![false; layout.node_count()];
    let edges: Vec<EdgeView> = graph
        .edges
        .iter()
        .map(|e| {
            used[e.user] = true;
            used[e.node] = true;
            EdgeView {
                source: e.user,
                target: e.node,
                weight: e.weight,
                normalized: adj.coefficient(e.user, e.node),
            }
        })
        .collect();
    let nodes = (0..layout.node_count())
        .filter(|&v| used[v])
        .map(|v| {
            if graph.is_user(v) {
                NodeView {
                    id: v,
                    label: iset.users.id(v).to_string(),
                    criterion: None,
                }
            } else {
                let (item, c) = graph.item_of(v);
                NodeView {
                    id: v,
                    label: format!("{}/{}", iset.items.id(item), specs[c].name),
                    criterion: Some(c),
                }
            }
        })
        .collect();
    Ok(GraphView { nodes, edges })
}

#[wasm_bindgen(js_name = expansionGraph)]
pub fn expansion_graph(ratings: &str, criteria: usize, alpha: f64) -> std::result::Result<String, JsError> {
    let view = expansion(ratings, criteria, alpha).map_err(js)?;
    serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
}
