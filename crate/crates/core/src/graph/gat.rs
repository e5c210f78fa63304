//! Node-embedding pretraining with a residual multi-head graph attention
//! network and a link-prediction objective.
//!
//! Layer update for node `i` with neighbors `N(i)` (edges taken both ways):
//! `h'_i = h_i + tanh(mean_heads Σ_j a_ij W h_j)` where `a_ij` is a softmax
//! over `N(i)` of `leaky_relu(a_dst·W h_i + a_src·W h_j + r[rel_ij])`.
//! A node without neighbors keeps its input vector.

use std::collections::BTreeSet;

use mathgen_tensor::{ParamStore, Snapshot, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ConceptGraph;
use crate::error::{Error, Result};
use crate::nn::{init_matrix, init_normal, init_zeros};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 2,
            heads: 2,
            dim: 256,
            epochs: 100,
            lr: 0.01,
            negatives: 1,
            seed: 0,
        }
    }
}

/// Message edges (both directions, no self loops) in a fixed order.
struct MessageEdges {
    src: Vec<usize>,
    dst: Vec<usize>,
    rel: Vec<usize>,
}

fn message_edges(graph: &ConceptGraph) -> MessageEdges {
    let mut set = BTreeSet::new();
    for e in graph.edges() {
        if e.head != e.tail {
            set.insert((e.tail, e.head, e.relation));
            set.insert((e.head, e.tail, e.relation));
        }
    }
    let mut m = MessageEdges {
        src: Vec::new(),
        dst: Vec::new(),
        rel: Vec::new(),
    };
    for (d, s, r) in set {
        m.dst.push(d);
        m.src.push(s);
        m.rel.push(r);
    }
    m
}

/// Unique undirected node pairs `(a, b)` with `a < b`.
pub fn positive_pairs(graph: &ConceptGraph) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = graph
        .edges()
        .iter()
        .filter(|e| e.head != e.tail)
        .map(|e| (e.head.min(e.tail), e.head.max(e.tail)))
        .collect();
    set.into_iter().collect()
}

pub fn init_params(graph: &ConceptGraph, cfg: &GatConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let r = graph.relations().len();
    let mut s = ParamStore::new();
    s.insert("nodes", init_normal(&mut rng, &[graph.num_nodes(), d], 1.0 / (d as f64).sqrt()));
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            let p = format!("l{l}.h{h}");
            s.insert(format!("{p}.w"), init_matrix(&mut rng, d, d));
            s.insert(format!("{p}.a_src"), init_normal(&mut rng, &[d], 0.1));
            s.insert(format!("{p}.a_dst"), init_normal(&mut rng, &[d], 0.1));
            s.insert(format!("{p}.rel"), init_zeros(&[r]));
        }
    }
    s
}

/// Forward pass of all layers; returns the final `[N, d]` node matrix.
pub fn gat_forward(tape: &mut Tape, store: &ParamStore, graph: &ConceptGraph, cfg: &GatConfig) -> Result<Var> {
    let n = graph.num_nodes();
    let d = cfg.dim;
    let edges = message_edges(graph);
    let mut h = tape.param(store, "nodes")?;
    if edges.src.is_empty() {
        return Ok(h);
    }
    let ones = tape.constant_matrix(1, d, vec![1.0; d])?;
    let e = edges.src.len();
    for l in 0..cfg.layers {
        let mut agg: Option<Var> = None;
        for hd in 0..cfg.heads {
            let p = format!("l{l}.h{hd}");
            let w = tape.param(store, &format!("{p}.w"))?;
            let a_src = tape.param(store, &format!("{p}.a_src"))?;
            let a_dst = tape.param(store, &format!("{p}.a_dst"))?;
            let rel = tape.param(store, &format!("{p}.rel"))?;
            let z = tape.matmul(h, w)?;
            let s_src = tape.matmul(z, a_src)?;
            let s_dst = tape.matmul(z, a_dst)?;
            let es = tape.gather(s_src, &edges.src)?;
            let ed = tape.gather(s_dst, &edges.dst)?;
            let er = tape.gather(rel, &edges.rel)?;
            let sc = tape.add(es, ed)?;
            let sc = tape.add(sc, er)?;
            let sc = tape.leaky_relu(sc, 0.2)?;
            // segment softmax over incoming edges, shifted by a constant per-node max
            let mut maxes = vec![f64::NEG_INFINITY; n];
            for (k, v) in tape.value(sc).iter().enumerate() {
                let m = &mut maxes[edges.dst[k]];
                *m = m.max(*v);
            }
            let shift: Vec<f64> = edges.dst.iter().map(|&i| maxes[i]).collect();
            let shift = tape.constant_vec(shift)?;
            let sc = tape.sub(sc, shift)?;
            let ex = tape.exp(sc)?;
            let denom = tape.scatter_add(ex, &edges.dst, n)?;
            let denom = tape.gather(denom, &edges.dst)?;
            let logd = tape.log(denom)?;
            let la = tape.sub(sc, logd)?;
            let alpha = tape.exp(la)?;
            let alpha = tape.reshape(alpha, &[e, 1])?;
            let alpha = tape.matmul(alpha, ones)?;
            let zs = tape.gather(z, &edges.src)?;
            let msg = tape.mul(alpha, zs)?;
            let m = tape.scatter_add(msg, &edges.dst, n)?;
            agg = Some(match agg {
                None => m,
                Some(a) => tape.add(a, m)?,
            });
        }
        let agg = tape.scale(agg.expect("heads >= 1"), 1.0 / cfg.heads as f64)?;
        let upd = tape.tanh(agg)?;
        h = tape.add(h, upd)?;
    }
    Ok(h)
}

/// Row-wise dot products of `h[a_k]` and `h[b_k]`.
fn pair_scores(tape: &mut Tape, h: Var, a: &[usize], b: &[usize], d: usize) -> Result<Var> {
    let ha = tape.gather(h, a)?;
    let hb = tape.gather(h, b)?;
    let p = tape.mul(ha, hb)?;
    let ones = tape.constant_vec(vec![1.0; d])?;
    Ok(tape.matmul(p, ones)?)
}

/// Samples `negatives` corrupted tails per positive pair among connected nodes.
pub fn sample_negatives<R: Rng>(pos: &[(usize, usize)], candidates: &[usize], negatives: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pos.len() * negatives);
    for &(a, _) in pos {
        for _ in 0..negatives {
            out.push((a, candidates[rng.gen_range(0..candidates.len())]));
        }
    }
    out
}

/// `−mean log σ(pos) − mean log σ(−neg)`.
pub fn link_loss(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &ConceptGraph,
    cfg: &GatConfig,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
) -> Result<Var> {
    let h = gat_forward(tape, store, graph, cfg)?;
    let (pa, pb): (Vec<usize>, Vec<usize>) = pos.iter().copied().unzip();
    let ps = pair_scores(tape, h, &pa, &pb, cfg.dim)?;
    let lp = tape.log_sigmoid(ps)?;
    let lp = tape.mean(lp)?;
    let mut loss = tape.scale(lp, -1.0)?;
    if !neg.is_empty() {
        let (na, nb): (Vec<usize>, Vec<usize>) = neg.iter().copied().unzip();
        let ns = pair_scores(tape, h, &na, &nb, cfg.dim)?;
        let ns = tape.scale(ns, -1.0)?;
        let ln = tape.log_sigmoid(ns)?;
        let ln = tape.mean(ln)?;
        loss = tape.sub(loss, ln)?;
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatResult {
    /// `[N, d]` final node embeddings.
    pub embeddings: Tensor,
    pub losses: Vec<f64>,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => {
            Error::Divergence(format!("gat pretraining: non-finite value in `{}` at epoch {}", op, epoch))
        }
        Error::NonFiniteGradient(p) => Error::Divergence(format!("gat pretraining: non-finite gradient for `{}` at epoch {}", p, epoch)),
        other => other,
    }
}

/// Full-batch training on every edge of `graph`.
pub fn gat_pretrain(graph: &ConceptGraph, cfg: &GatConfig) -> Result<GatResult> {
    gat_pretrain_on(graph, &positive_pairs(graph), cfg)
}

/// Trains on the given positive pairs only (message passing still uses the
/// graph's edges, so held-out evaluation should pass a graph without them).
pub fn gat_pretrain_on(graph: &ConceptGraph, pos: &[(usize, usize)], cfg: &GatConfig) -> Result<GatResult> {
    if graph.is_empty() || pos.is_empty() {
        return Err(Error::EmptyGraph);
    }
    if cfg.layers == 0 || cfg.heads == 0 || cfg.dim == 0 {
        return Err(Error::Config("gat needs layers, heads and dim ≥ 1".into()));
    }
    let mut store = init_params(graph, cfg);
    let connected: Vec<usize> = (0..graph.num_nodes()).filter(|&i| !graph.neighbors(i).is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    store.zero_grads();
    for epoch in 0..cfg.epochs {
        let neg = sample_negatives(pos, &connected, cfg.negatives, &mut rng);
        let mut tape = Tape::new();
        let loss = link_loss(&mut tape, &store, graph, cfg, pos, &neg).map_err(|e| diverged(epoch, e))?;
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("gat pretraining: loss {} at epoch {}", lv, epoch)));
        }
        losses.push(lv);
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut store)?;
        opt.step(&mut store).map_err(|e| diverged(epoch, e))?;
        log::debug!("gat epoch {} loss {:.5}", epoch, lv);
    }
    let mut tape = Tape::new();
    let h = gat_forward(&mut tape, &store, graph, cfg)?;
    let mut embeddings = tape.to_tensor(h);
    embeddings.set_requires_grad(false);
    Ok(GatResult { embeddings, losses })
}

/// Embedding file: the node table plus the concept list in the metadata.
pub fn embeddings_snapshot(graph: &ConceptGraph, embeddings: &Tensor, cfg: &GatConfig) -> Snapshot {
    let mut snap = Snapshot::new(serde_json::json!({
        "kind": "node_embeddings",
        "concepts": graph.concepts(),
        "config": cfg,
    }));
    snap.insert("nodes", embeddings.clone());
    snap
}

/// Reads an embedding file back into `(concepts, [N, d] table)`.
pub fn read_embeddings(snap: &Snapshot) -> Result<(Vec<String>, Tensor)> {
    if snap.meta.get("kind").and_then(|k| k.as_str()) != Some("node_embeddings") {
        return Err(Error::Data("not a node embedding file".into()));
    }
    let concepts: Vec<String> = serde_json::from_value(snap.meta["concepts"].clone())?;
    let t = snap.tensor("nodes")?.clone();
    if t.shape().len() != 2 || t.shape()[0] != concepts.len() {
        return Err(Error::DimensionMismatch(format!("embedding table {:?} for {} concepts", t.shape(), concepts.len())));
    }
    Ok((concepts, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GatConfig {
        GatConfig {
            dim: 8,
            epochs: 60,
            lr: 0.05,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn isolated_node_keeps_its_init() {
        let g = ConceptGraph::from_triples([("a", "IsA", "b", 1.0), ("lonely", "IsA", "lonely", 1.0)]);
        let cfg = small_cfg(3);
        let init = init_params(&g, &cfg);
        let res = gat_pretrain(&g, &cfg).unwrap();
        let i = g.node_id("lonely").unwrap();
        assert_eq!(res.embeddings.row(i), init.get("nodes").unwrap().row(i));
        assert_ne!(res.embeddings.row(0), init.get("nodes").unwrap().row(0));
    }

    #[test]
    fn true_edge_beats_random_pair() {
        let g = ConceptGraph::from_triples([("a", "IsA", "b", 1.0), ("c", "IsA", "d", 1.0)]);
        let res = gat_pretrain(&g, &small_cfg(1)).unwrap();
        let dot = |x: usize, y: usize| -> f64 {
            res.embeddings.row(x).iter().zip(res.embeddings.row(y)).map(|(p, q)| p * q).sum()
        };
        assert!(dot(0, 1) > dot(0, 2));
        assert!(dot(2, 3) > dot(1, 3));
        assert!(res.losses.last().unwrap() < &res.losses[0]);
    }

    #[test]
    fn deterministic_under_seed() {
        let g = ConceptGraph::from_triples([("a", "IsA", "b", 1.0), ("b", "RelatedTo", "c", 1.0)]);
        let a = gat_pretrain(&g, &small_cfg(9)).unwrap();
        let b = gat_pretrain(&g, &small_cfg(9)).unwrap();
        assert_eq!(a, b);
    }
}
