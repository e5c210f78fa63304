use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::ConceptGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborCaps {
    pub first_hop: usize,
    pub second_hop: usize,
}

impl Default for NeighborCaps {
    fn default() -> Self {
        NeighborCaps {
            first_hop: 32,
            second_hop: 64,
        }
    }
}

impl NeighborCaps {
    pub fn unbounded() -> Self {
        NeighborCaps {
            first_hop: usize::MAX,
            second_hop: usize::MAX,
        }
    }
}

/// Two-hop neighborhood of a source node. Both lists are sorted by node id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PathBundle {
    pub source: usize,
    pub first_hop: Vec<usize>,
    /// `(node, via)` where `via` is in `first_hop`.
    pub second_hop: Vec<(usize, usize)>,
}

impl PathBundle {
    pub fn len(&self) -> usize {
        self.first_hop.len() + self.second_hop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Keeps the `cap` highest-weight candidates (ties by lower id), returned in id order.
fn cap_by_weight<T: Copy>(mut items: Vec<(usize, f64, T)>, cap: usize) -> Vec<(usize, T)> {
    if items.len() > cap {
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        items.truncate(cap);
    }
    items.sort_by_key(|x| x.0);
    items.into_iter().map(|(n, _, t)| (n, t)).collect()
}

/// Breadth-first two-hop expansion over undirected edges. First-hop
/// neighbors are visited in id order, so a second-hop node's via is the
/// lowest-id first-hop neighbor adjacent to it.
pub fn bfs_two_hop(graph: &ConceptGraph, source: usize, caps: NeighborCaps) -> PathBundle {
    if source >= graph.num_nodes() {
        return PathBundle {
            source,
            ..Default::default()
        };
    }
    let first: Vec<usize> = cap_by_weight(
        graph
            .neighbors(source)
            .iter()
            .filter(|(n, _)| *n != source)
            .map(|&(n, w)| (n, w, ()))
            .collect(),
        caps.first_hop,
    )
    .into_iter()
    .map(|(n, _)| n)
    .collect();

    let mut seen: HashSet<usize> = first.iter().copied().collect();
    seen.insert(source);
    let mut second = Vec::new();
    for &k in &first {
        for &(j, w) in graph.neighbors(k) {
            if seen.insert(j) {
                second.push((j, w, k));
            }
        }
    }
    PathBundle {
        source,
        first_hop: first,
        second_hop: cap_by_weight(second, caps.second_hop),
    }
}
