//! Reference models: LightGCN on the overall-rating graph and LightGCN_MC,
//! which runs one LightGCN per criterion and concatenates the results.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis, Zip};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::graph::{build_graph, normalize, Layout, McExpansionGraph, NormalizedAdjacency};
use crate::model::{forward, EmbeddingState, FinalRepr, ForwardConfig, ForwardTrace};
use crate::training::{
    adam_step, batch_rows, bpr_loss, sigmoid, AdamParams, AdamState, BprTriple, TrainConfig,
};

fn plain(layers: usize) -> ForwardConfig {
    ForwardConfig {
        layers,
        scale: 1.0,
        pairnorm: false,
        pairnorm_layer0: false,
        preference: false,
        strict: false,
    }
}

/// Mean of `E0, A E0, ..., A^L E0`.
pub fn lightgcn_forward(adj: &NormalizedAdjacency, e0: &Array2<f64>, layers: usize) -> Result<Array2<f64>> {
    // only the node count matters without a preference stack
    let layout = Layout {
        n_users: 0,
        n_items: adj.n_nodes,
        n_criteria_plus1: 1,
    };
    let state = EmbeddingState {
        layout,
        dim: e0.ncols(),
        e0: e0.clone(),
        p0_user: None,
        p0_proto: None,
    };
    Ok(forward(adj, &state, &plain(layers))?.e.combined)
}

/// Joins per-criterion representations column-wise. `None` segments stand
/// for criteria without edges and contribute zero blocks of width `dim`.
pub fn concat_repr(parts: &[Option<FinalRepr>], n_users: usize, n_items: usize, dim: usize) -> FinalRepr {
    let filled: Vec<FinalRepr> = parts
        .iter()
        .map(|p| match p {
            Some(r) => r.clone(),
            None => FinalRepr {
                user: Array2::zeros((n_users, dim)),
                item: Array2::zeros((n_items, dim)),
            },
        })
        .collect();
    let users: Vec<_> = filled.iter().map(|r| r.user.view()).collect();
    let items: Vec<_> = filled.iter().map(|r| r.item.view()).collect();
    FinalRepr {
        user: concatenate(Axis(1), &users).expect("segments share row counts"),
        item: concatenate(Axis(1), &items).expect("segments share row counts"),
    }
}

#[derive(Debug, Clone)]
struct Segment {
    graph: Arc<McExpansionGraph>,
    adj: Arc<NormalizedAdjacency>,
    state: EmbeddingState,
    adam: AdamState,
}

/// One independent LightGCN per criterion graph, trained jointly under a
/// single BPR loss on the summed per-criterion scores.
#[derive(Debug, Clone)]
pub struct LightGcnMc {
    n_users: usize,
    n_items: usize,
    dim: usize,
    layers: usize,
    segments: Vec<Option<Segment>>,
}

impl LightGcnMc {
    pub fn new(train: &InteractionSet, config: &TrainConfig) -> Result<Self> {
        if train.overall().is_empty() {
            return Err(Error::Empty("training split has no overall positives".into()));
        }
        let mut segments = Vec::with_capacity(train.n_criteria_plus1());
        for c in 0..train.n_criteria_plus1() {
            if train.positives[c].is_empty() {
                segments.push(None);
                continue;
            }
            let single = InteractionSet {
                users: train.users.clone(),
                items: train.items.clone(),
                positives: vec![train.positives[c].clone()],
            };
            let graph = build_graph(&single, 1.0)?;
            let adj = normalize(&graph);
            let state = EmbeddingState::init(graph.layout(), config.dim, false, config.seed.wrapping_add(c as u64));
            let adam = AdamState::new(state.e0.dim());
            segments.push(Some(Segment {
                graph: Arc::new(graph),
                adj: Arc::new(adj),
                state,
                adam,
            }));
        }
        Ok(Self {
            n_users: train.n_users(),
            n_items: train.n_items(),
            dim: config.dim,
            layers: config.layers,
            segments,
        })
    }

    /// Graph of the overall criterion, which supplies the training triples.
    pub fn overall_graph(&self) -> &McExpansionGraph {
        &self.segments[0].as_ref().expect("overall segment always exists").graph
    }

    pub fn states(&self) -> Vec<Option<EmbeddingState>> {
        self.segments.iter().map(|s| s.as_ref().map(|s| s.state.clone())).collect()
    }

    fn traces(&self) -> Result<Vec<Option<ForwardTrace>>> {
        self.segments
            .iter()
            .map(|s| match s {
                Some(s) => Ok(Some(forward(&s.adj, &s.state, &plain(self.layers))?)),
                None => Ok(None),
            })
            .collect()
    }

    pub fn final_repr(&self) -> Result<FinalRepr> {
        let layout = Layout {
            n_users: self.n_users,
            n_items: self.n_items,
            n_criteria_plus1: 1,
        };
        let parts: Vec<Option<FinalRepr>> = self
            .traces()?
            .into_iter()
            .map(|t| t.map(|t| FinalRepr::from_table(&t.e.combined, layout)))
            .collect();
        Ok(concat_repr(&parts, self.n_users, self.n_items, self.dim))
    }

    /// Triples index the single-criterion node space shared by every segment.
    pub fn step(&mut self, batch: &[BprTriple], lambda: f64, lr: f64) -> Result<f64> {
        let traces = self.traces()?;
        let score = |node_a: usize, node_b: usize| -> f64 {
            traces
                .iter()
                .flatten()
                .map(|t| t.e.combined.row(node_a).dot(&t.e.combined.row(node_b)))
                .sum()
        };
        let mut pos = Vec::with_capacity(batch.len());
        let mut neg = Vec::with_capacity(batch.len());
        let mut coeff = Vec::with_capacity(batch.len());
        for t in batch {
            let sp = score(t.user, t.pos);
            let sn = score(t.user, t.neg);
            pos.push(sp);
            neg.push(sn);
            coeff.push(-sigmoid(-(sp - sn)));
        }
        let (nodes, _) = batch_rows(batch);
        let mut reg = 0.0;
        let hp = AdamParams::default();
        for (seg, trace) in self.segments.iter_mut().zip(&traces) {
            let (Some(seg), Some(trace)) = (seg, trace) else {
                continue;
            };
            let table = &trace.e.combined;
            let mut grad = Array2::zeros(table.raw_dim());
            for (t, &g) in batch.iter().zip(&coeff) {
                let u = table.row(t.user).to_owned();
                let diff = &table.row(t.pos) - &table.row(t.neg);
                Zip::from(grad.row_mut(t.user)).and(&diff).for_each(|a, &d| *a += g * d);
                Zip::from(grad.row_mut(t.pos)).and(&u).for_each(|a, &x| *a += g * x);
                Zip::from(grad.row_mut(t.neg)).and(&u).for_each(|a, &x| *a -= g * x);
            }
            let mut g0 = trace.backward(&seg.adj, &grad)?.e0;
            for &r in &nodes {
                let row = seg.state.e0.row(r);
                reg += row.dot(&row);
                Zip::from(g0.row_mut(r)).and(&row).for_each(|g, &x| *g += 2.0 * lambda * x);
            }
            adam_step(&mut seg.state.e0, &g0, &mut seg.adam, lr, hp);
        }
        let loss = bpr_loss(&pos, &neg, reg, lambda)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "loss",
                layer: self.layers,
            });
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Positive, Vocab};
    use ndarray::array;

    fn iset(c_plus1: usize, pairs: &[(usize, usize, usize)]) -> InteractionSet {
        let mut positives = vec![Vec::new(); c_plus1];
        for &(u, i, c) in pairs {
            positives[c].push(Positive {
                user: u,
                item: i,
                value: 5.0,
                weight: None,
            });
        }
        InteractionSet {
            users: Vocab::from_ids(vec!["a".into(), "b".into()]),
            items: Vocab::from_ids(vec!["x".into(), "y".into(), "z".into()]),
            positives,
        }
    }

    #[test]
    fn lightgcn_forward_is_layer_mean() {
        let g = build_graph(&iset(1, &[(0, 0, 0)]), 1.0).unwrap();
        let adj = normalize(&g);
        let mut e0 = Array2::zeros((5, 1));
        e0[[0, 0]] = 3.0;
        // A moves the user value to item node 2 and back every other layer
        let z = lightgcn_forward(&adj, &e0, 2).unwrap();
        assert!((z[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((z[[2, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(z[[1, 0]], 0.0);
    }

    #[test]
    fn concat_identical_segments_doubles_scores() {
        let r = FinalRepr {
            user: array![[1.0, 2.0]],
            item: array![[0.5, -1.0], [3.0, 0.0]],
        };
        let joined = concat_repr(&[Some(r.clone()), Some(r.clone())], 1, 2, 2);
        assert_eq!(joined.scores(0), r.scores(0) * 2.0);
        let padded = concat_repr(&[Some(r.clone()), None], 1, 2, 2);
        assert_eq!(padded.user.ncols(), 4);
        assert_eq!(padded.scores(0), r.scores(0));
    }

    #[test]
    fn empty_criterion_segment_is_zero() {
        let cfg = TrainConfig {
            dim: 4,
            layers: 2,
            ..Default::default()
        };
        let m = LightGcnMc::new(&iset(3, &[(0, 0, 0), (1, 1, 0), (0, 2, 2)]), &cfg).unwrap();
        assert!(m.segments[1].is_none());
        let repr = m.final_repr().unwrap();
        assert_eq!(repr.user.ncols(), 12);
        assert!(repr.user.slice(ndarray::s![.., 4..8]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_criterion_matches_lightgcn() {
        let data = iset(1, &[(0, 0, 0), (1, 1, 0), (0, 2, 0)]);
        let cfg = TrainConfig {
            dim: 4,
            layers: 2,
            seed: 9,
            ..Default::default()
        };
        let mc = LightGcnMc::new(&data, &cfg).unwrap();
        let g = build_graph(&data, 1.0).unwrap();
        let state = EmbeddingState::init(g.layout(), 4, false, 9);
        let z = lightgcn_forward(&normalize(&g), &state.e0, 2).unwrap();
        let single = FinalRepr::from_table(&z, g.layout());
        let joined = mc.final_repr().unwrap();
        for u in 0..2 {
            let d = &joined.scores(u) - &single.scores(u);
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn training_step_reduces_loss() {
        let data = iset(2, &[(0, 0, 0), (1, 1, 0), (0, 0, 1), (1, 2, 1)]);
        let cfg = TrainConfig {
            dim: 8,
            layers: 1,
            ..Default::default()
        };
        let mut m = LightGcnMc::new(&data, &cfg).unwrap();
        let batch = [
            BprTriple { user: 0, pos: 2, neg: 3 },
            BprTriple { user: 1, pos: 3, neg: 4 },
        ];
        let first = m.step(&batch, 1e-4, 0.05).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = m.step(&batch, 1e-4, 0.05).unwrap();
        }
        assert!(last < first);
    }
}
