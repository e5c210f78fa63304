//! Commonsense concept graph: loading, two-hop neighborhoods, path
//! representations and GAT pretraining of node embeddings.

mod bfs;
pub mod gat;
pub mod paths;

pub use bfs::{bfs_two_hop, NeighborCaps, PathBundle};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use crate::error::{Error, Result};

pub const RELATIONS: [&str; 34] = [
    "RelatedTo",
    "FormOf",
    "IsA",
    "PartOf",
    "HasA",
    "UsedFor",
    "CapableOf",
    "AtLocation",
    "Causes",
    "HasSubevent",
    "HasFirstSubevent",
    "HasLastSubevent",
    "HasPrerequisite",
    "HasProperty",
    "MotivatedByGoal",
    "ObstructedBy",
    "Desires",
    "CreatedBy",
    "Synonym",
    "Antonym",
    "DistinctFrom",
    "DerivedFrom",
    "SymbolOf",
    "DefinedAs",
    "MannerOf",
    "LocatedNear",
    "HasContext",
    "SimilarTo",
    "EtymologicallyRelatedTo",
    "EtymologicallyDerivedFrom",
    "CausesDesire",
    "MadeOf",
    "ReceivesAction",
    "ExternalURL",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    pub weight: f64,
}

/// Directed labeled multigraph. BFS treats edges as undirected.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGraph {
    concepts: Vec<String>,
    index: HashMap<String, usize>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, usize)>>,
    /// Undirected neighbors sorted by id, each with its largest edge weight.
    neighbors: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Keep only edges touching one of these words. `None` keeps everything.
    pub vocabulary: Option<HashSet<String>>,
    /// Grow the relation vocabulary instead of rejecting unknown relations.
    pub allow_unknown_relations: bool,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub kept: usize,
    pub malformed: Vec<usize>,
    pub unknown_relation: usize,
    pub duplicates: usize,
    pub outside_vocabulary: usize,
}

/// `/c/en/nickel/n` -> `nickel`; plain words are lowercased.
fn concept_name(raw: &str) -> String {
    let s = raw.trim();
    let s = match s.strip_prefix("/c/") {
        Some(rest) => rest.split('/').nth(1).unwrap_or(""),
        None => s,
    };
    s.to_lowercase()
}

fn relation_name(raw: &str) -> &str {
    let s = raw.trim();
    s.strip_prefix("/r/").unwrap_or(s)
}

impl ConceptGraph {
    /// Builds a graph from named triples, deduplicating repeats (the larger
    /// weight wins). Relations are taken as given.
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str, f64)>) -> Self {
        let mut b = Builder::default();
        for (h, r, t, w) in triples {
            let r = b.relation(r);
            b.add(h, r, t, w);
        }
        b.finish()
    }

    pub fn num_nodes(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn concept(&self, id: usize) -> &str {
        &self.concepts[id]
    }

    pub fn node_id(&self, concept: &str) -> Option<usize> {
        self.index.get(concept).copied()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Outgoing `(relation, tail)` pairs of a node.
    pub fn outgoing(&self, head: usize) -> &[(usize, usize)] {
        &self.adjacency[head]
    }

    /// Undirected neighbors sorted by id, with the largest connecting weight.
    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.neighbors[node]
    }

    /// Relations on edges between `a` and `b` in either direction.
    pub fn relations_between(&self, a: usize, b: usize) -> Vec<(usize, &str, usize)> {
        let mut out = Vec::new();
        for &(r, t) in &self.adjacency[a] {
            if t == b {
                out.push((a, self.relations[r].as_str(), b));
            }
        }
        for &(r, t) in &self.adjacency[b] {
            if t == a {
                out.push((b, self.relations[r].as_str(), a));
            }
        }
        out
    }
}

#[derive(Default)]
struct Builder {
    concepts: Vec<String>,
    index: HashMap<String, usize>,
    relations: Vec<String>,
    rel_index: HashMap<String, usize>,
    edges: BTreeMap<(usize, usize, usize), f64>,
    order: Vec<(usize, usize, usize)>,
}

impl Builder {
    fn with_relations(names: &[&str]) -> Self {
        let mut b = Builder::default();
        for r in names {
            b.relation(r);
        }
        b
    }

    fn relation(&mut self, name: &str) -> usize {
        if let Some(&i) = self.rel_index.get(name) {
            return i;
        }
        self.relations.push(name.to_string());
        self.rel_index.insert(name.to_string(), self.relations.len() - 1);
        self.relations.len() - 1
    }

    fn node(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.concepts.push(name.to_string());
        self.index.insert(name.to_string(), self.concepts.len() - 1);
        self.concepts.len() - 1
    }

    /// Returns false for a duplicate.
    fn add(&mut self, head: &str, rel: usize, tail: &str, weight: f64) -> bool {
        let h = self.node(head);
        let t = self.node(tail);
        let key = (h, rel, t);
        match self.edges.get_mut(&key) {
            Some(w) => {
                *w = w.max(weight);
                false
            }
            None => {
                self.edges.insert(key, weight);
                self.order.push(key);
                true
            }
        }
    }

    fn finish(self) -> ConceptGraph {
        let n = self.concepts.len();
        let edges: Vec<Edge> = self
            .order
            .iter()
            .map(|k| Edge {
                head: k.0,
                relation: k.1,
                tail: k.2,
                weight: self.edges[k],
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        let mut nb: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for e in &edges {
            adjacency[e.head].push((e.relation, e.tail));
            if e.head != e.tail {
                for (a, b) in [(e.head, e.tail), (e.tail, e.head)] {
                    let w = nb[a].entry(b).or_insert(f64::NEG_INFINITY);
                    *w = w.max(e.weight);
                }
            }
        }
        ConceptGraph {
            concepts: self.concepts,
            index: self.index,
            relations: self.relations,
            edges,
            adjacency,
            neighbors: nb.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }
}

/// Reads `head<TAB>relation<TAB>tail<TAB>weight` rows. Malformed rows and rows
/// with an unknown relation (unless allowed) are skipped and counted.
pub fn load_graph<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<(ConceptGraph, LoadReport)> {
    let mut b = Builder::with_relations(&RELATIONS);
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        report.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let parsed = if cols.len() == 4 {
            cols[3].trim().parse::<f64>().ok().filter(|w| w.is_finite())
        } else {
            None
        };
        let (head, tail) = (concept_name(cols[0]), cols.get(2).map(|t| concept_name(t)).unwrap_or_default());
        let Some(weight) = parsed.filter(|_| !head.is_empty() && !tail.is_empty()) else {
            report.malformed.push(i + 1);
            continue;
        };
        let rel = relation_name(cols[1]);
        let rel = match b.rel_index.get(rel) {
            Some(&r) => r,
            None if opts.allow_unknown_relations && !rel.is_empty() => b.relation(rel),
            None => {
                report.unknown_relation += 1;
                continue;
            }
        };
        if let Some(v) = &opts.vocabulary {
            if !v.contains(&head) && !v.contains(&tail) {
                report.outside_vocabulary += 1;
                continue;
            }
        }
        if b.add(&head, rel, &tail, weight) {
            report.kept += 1;
        } else {
            report.duplicates += 1;
        }
    }
    let g = b.finish();
    if g.is_empty() {
        return Err(Error::EmptyGraph);
    }
    Ok((g, report))
}
