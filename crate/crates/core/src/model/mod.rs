//! The generation model: equation encoder, problem encoder, Gaussian
//! latents, topic-controlled commonsense-aware decoder with number copying.

mod decoder;
mod encoder;
mod generate;
mod latent;
mod loss;

pub use decoder::{DecoderState, OutputDistribution, StepOutput};
pub use encoder::EncoderOutput;
pub use generate::{DecodeOptions, Generated};
pub use latent::{kl_diag_gaussian, LatentSource, LatentState};
pub use loss::{EncodedExample, LossParts, StepTarget};

use std::collections::HashMap;

use mathgen_tensor::{ParamStore, Snapshot, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bfs_two_hop, ConceptGraph, NeighborCaps, PathBundle};
use crate::nn::{init_matrix, init_normal, init_zeros, Gru};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_topics: usize,
    pub memory_slots: usize,
    pub kernel_widths: Vec<usize>,
    pub alpha: f64,
    pub max_decode_len: usize,
    pub neighbor_caps: NeighborCaps,
    pub use_copy: bool,
    pub use_graph: bool,
    pub use_topic_memory: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 256,
            num_topics: 9,
            memory_slots: 30,
            kernel_widths: vec![2, 3, 4],
            alpha: 0.7,
            max_decode_len: 50,
            neighbor_caps: NeighborCaps::default(),
            use_copy: true,
            use_graph: true,
            use_topic_memory: true,
            init_seed: 0,
        }
    }
}

/// Pretrained knowledge passed to [`Model::new`].
pub struct Knowledge<'a> {
    pub graph: &'a ConceptGraph,
    /// `[graph.num_nodes(), dim]`
    pub node_embeddings: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub eq_vocab: Vocabulary,
    pub word_vocab: Vocabulary,
    graph: Option<ConceptGraph>,
    bundles: Vec<Option<PathBundle>>,
}

/// Handles to every parameter on one tape.
pub struct Bound {
    pub(crate) enc_emb: Var,
    pub(crate) enc_type: Var,
    pub(crate) gru_a: (Gru, Gru),
    pub(crate) gru_b: (Gru, Gru),
    pub(crate) mlp1: (Var, Var),
    pub(crate) mlp2: (Var, Var),
    pub(crate) post: (Var, Var),
    pub(crate) convs: Vec<(Var, Var)>,
    pub(crate) wq: Var,
    pub(crate) prior: (Var, Var),
    pub(crate) topic: (Var, Var),
    pub(crate) init: (Var, Var),
    pub(crate) dec_emb: Var,
    pub(crate) dec_gru: Gru,
    pub(crate) att: Var,
    pub(crate) wt: Var,
    pub(crate) v: Var,
    pub(crate) wu: (Var, Var),
    pub(crate) wc: (Var, Var),
    pub(crate) wvs: Var,
    pub(crate) wo: (Var, Var),
    pub(crate) pgen: (Var, Var),
    pub(crate) cs_gru: Gru,
    pub(crate) cs_h: Var,
    pub(crate) paths: Option<crate::graph::paths::PathParams>,
    pub(crate) nodes: Option<Var>,
    pub(crate) memory: Var,
    /// Commonsense inputs already computed on this tape, by word id.
    pub(crate) cs_cache: HashMap<usize, Var>,
}

fn validate(config: &ModelConfig) -> Result<()> {
    if config.dim == 0 || config.num_topics == 0 || config.memory_slots == 0 || config.kernel_widths.is_empty() {
        return Err(Error::Config("dim, num_topics, memory_slots and kernel_widths must be nonzero".into()));
    }
    if config.kernel_widths.contains(&0) {
        return Err(Error::Config("kernel widths must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", config.alpha)));
    }
    Ok(())
}

fn compute_bundles(graph: Option<&ConceptGraph>, vocab: &Vocabulary, caps: NeighborCaps) -> Vec<Option<PathBundle>> {
    vocab
        .tokens()
        .iter()
        .map(|w| {
            let g = graph?;
            let b = bfs_two_hop(g, g.node_id(w)?, caps);
            (!b.is_empty()).then_some(b)
        })
        .collect()
}

impl Model {
    /// Initializes all parameters from `config.init_seed`. Decoder word
    /// embeddings start from the node embeddings for words in the graph,
    /// and topic memory row `p` holds the starting embeddings of topic `p`'s
    /// keywords (zero-padded up to `memory_slots`).
    pub fn new(
        config: ModelConfig,
        eq_vocab: Vocabulary,
        word_vocab: Vocabulary,
        knowledge: Option<Knowledge<'_>>,
        topic_keywords: &[Vec<String>],
    ) -> Result<Self> {
        validate(&config)?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::new();

        p.insert("enc.emb", init_normal(&mut rng, &[eq_vocab.len(), d], emb_std));
        p.insert("enc.type", init_normal(&mut rng, &[3, d], emb_std));
        for name in ["enc.a.fw", "enc.a.bw", "enc.b.fw", "enc.b.bw"] {
            Gru::init(&mut p, name, d, d, &mut rng);
        }
        for name in ["enc.mlp1", "enc.mlp2"] {
            p.insert(format!("{name}.w"), init_matrix(&mut rng, d, d));
            p.insert(format!("{name}.b"), init_zeros(&[d]));
        }
        p.insert("post.w", init_matrix(&mut rng, d, 2 * d));
        p.insert("post.b", init_zeros(&[2 * d]));
        for &w in &config.kernel_widths {
            p.insert(format!("prob.conv{w}.k"), init_matrix(&mut rng, w * d, d));
            p.insert(format!("prob.conv{w}.b"), init_zeros(&[d]));
        }
        p.insert("prob.wq", init_matrix(&mut rng, config.kernel_widths.len() * d, d));
        p.insert("prior.w", init_matrix(&mut rng, d, 2 * d));
        p.insert("prior.b", init_zeros(&[2 * d]));
        p.insert("topic.w", init_matrix(&mut rng, d, config.num_topics));
        p.insert("topic.b", init_zeros(&[config.num_topics]));
        p.insert("init.w", init_matrix(&mut rng, 3 * d, d));
        p.insert("init.b", init_zeros(&[d]));

        let mut dec_emb = init_normal(&mut rng, &[word_vocab.len(), d], emb_std);
        if let Some(k) = &knowledge {
            if k.node_embeddings.shape() != [k.graph.num_nodes(), d] {
                return Err(Error::DimensionMismatch(format!(
                    "node embeddings {:?} for {} nodes at dim {}",
                    k.node_embeddings.shape(),
                    k.graph.num_nodes(),
                    d
                )));
            }
            for (i, w) in word_vocab.tokens().iter().enumerate() {
                if let Some(n) = k.graph.node_id(w) {
                    dec_emb.data_mut()[i * d..(i + 1) * d].copy_from_slice(k.node_embeddings.row(n));
                }
            }
        }
        Gru::init(&mut p, "dec.gru", d, d, &mut rng);
        p.insert("dec.att", init_matrix(&mut rng, d, d));
        p.insert("dec.wt", init_matrix(&mut rng, 2 * d, d));
        p.insert("dec.v", init_matrix(&mut rng, d, d));
        p.insert("dec.wu.w", init_matrix(&mut rng, 2 * d, d));
        p.insert("dec.wu.b", init_zeros(&[d]));
        p.insert("dec.wc.w", init_matrix(&mut rng, 2 * d, d));
        p.insert("dec.wc.b", init_zeros(&[d]));
        p.insert("dec.wvs", init_matrix(&mut rng, 2 * d, d));
        p.insert("dec.wo.w", init_matrix(&mut rng, d, word_vocab.len()));
        p.insert("dec.wo.b", init_zeros(&[word_vocab.len()]));
        p.insert("dec.pgen.w", init_matrix(&mut rng, 3 * d, 1).reshaped(&[3 * d]));
        p.insert("dec.pgen.b", init_zeros(&[1]));
        Gru::init(&mut p, "cs.gru", d, d, &mut rng);
        p.insert("cs.h", init_matrix(&mut rng, d, d));
        p.insert("cs.w_g", init_matrix(&mut rng, 2 * d, d));
        p.insert("cs.b_g", init_zeros(&[d]));
        p.insert("cs.u", init_matrix(&mut rng, d, d));
        p.insert("cs.w_b", init_matrix(&mut rng, d, d));

        // topic memory is a frozen buffer
        let (pn, k) = (config.num_topics, config.memory_slots);
        let mut memory = vec![0.0; pn * k * d];
        for (t, words) in topic_keywords.iter().take(pn).enumerate() {
            for (j, w) in words.iter().take(k).enumerate() {
                let row = &mut memory[(t * k + j) * d..(t * k + j + 1) * d];
                match word_vocab.get(w) {
                    Some(id) => row.copy_from_slice(dec_emb.row(id)),
                    None => row.copy_from_slice(init_normal(&mut rng, &[d], emb_std).data()),
                }
            }
        }
        p.insert("memory", Tensor::new(vec![pn * k, d], memory)?);
        p.insert("dec.emb", dec_emb);

        let graph = match knowledge {
            Some(k) if config.use_graph => {
                let mut nodes = k.node_embeddings.clone();
                nodes.set_requires_grad(false);
                p.insert("graph.nodes", nodes);
                Some(k.graph.clone())
            }
            _ => None,
        };
        let bundles = compute_bundles(graph.as_ref(), &word_vocab, config.neighbor_caps);
        Ok(Model {
            config,
            params: p,
            eq_vocab,
            word_vocab,
            graph,
            bundles,
        })
    }

    pub fn graph(&self) -> Option<&ConceptGraph> {
        self.graph.as_ref()
    }

    /// Two-hop bundle of a word id, if the word is in the graph and has neighbors.
    pub fn bundle(&self, word: usize) -> Option<&PathBundle> {
        self.bundles.get(word).and_then(|b| b.as_ref())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let p = &self.params;
        let pair = |tape: &mut Tape, n: &str| -> Result<(Var, Var)> {
            Ok((tape.param(p, &format!("{n}.w"))?, tape.param(p, &format!("{n}.b"))?))
        };
        let mut convs = Vec::new();
        for &w in &self.config.kernel_widths {
            convs.push((tape.param(p, &format!("prob.conv{w}.k"))?, tape.param(p, &format!("prob.conv{w}.b"))?));
        }
        let (paths, nodes) = if self.graph.is_some() {
            (
                Some(crate::graph::paths::PathParams::bind(tape, p, "cs")?),
                Some(tape.param(p, "graph.nodes")?),
            )
        } else {
            (None, None)
        };
        Ok(Bound {
            enc_emb: tape.param(p, "enc.emb")?,
            enc_type: tape.param(p, "enc.type")?,
            gru_a: (Gru::bind(tape, p, "enc.a.fw")?, Gru::bind(tape, p, "enc.a.bw")?),
            gru_b: (Gru::bind(tape, p, "enc.b.fw")?, Gru::bind(tape, p, "enc.b.bw")?),
            mlp1: pair(tape, "enc.mlp1")?,
            mlp2: pair(tape, "enc.mlp2")?,
            post: pair(tape, "post")?,
            convs,
            wq: tape.param(p, "prob.wq")?,
            prior: pair(tape, "prior")?,
            topic: pair(tape, "topic")?,
            init: pair(tape, "init")?,
            dec_emb: tape.param(p, "dec.emb")?,
            dec_gru: Gru::bind(tape, p, "dec.gru")?,
            att: tape.param(p, "dec.att")?,
            wt: tape.param(p, "dec.wt")?,
            v: tape.param(p, "dec.v")?,
            wu: pair(tape, "dec.wu")?,
            wc: pair(tape, "dec.wc")?,
            wvs: tape.param(p, "dec.wvs")?,
            wo: pair(tape, "dec.wo")?,
            pgen: pair(tape, "dec.pgen")?,
            cs_gru: Gru::bind(tape, p, "cs.gru")?,
            cs_h: tape.param(p, "cs.h")?,
            paths,
            nodes,
            memory: tape.param(p, "memory")?,
            cs_cache: HashMap::new(),
        })
    }

    /// Checkpoint container: parameters plus config, vocabularies and graph in the metadata.
    pub fn to_snapshot(&self, extra_meta: serde_json::Value) -> Snapshot {
        let graph = self.graph.as_ref().map(|g| {
            serde_json::json!({
                "concepts": g.concepts(),
                "relations": g.relations(),
                "edges": g.edges().iter().map(|e| (e.head, e.relation, e.tail, e.weight)).collect::<Vec<_>>(),
            })
        });
        let meta = serde_json::json!({
            "kind": "model",
            "config": self.config,
            "eq_vocab": self.eq_vocab,
            "word_vocab": self.word_vocab,
            "vocab_hash": self.word_vocab.hash(),
            "graph": graph,
            "extra": extra_meta,
        });
        Snapshot::from_store(meta, &self.params)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        let m = &snap.meta;
        if m.get("kind").and_then(|k| k.as_str()) != Some("model") {
            return Err(Error::Data("not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(m["config"].clone())?;
        validate(&config)?;
        let eq_vocab: Vocabulary = serde_json::from_value(m["eq_vocab"].clone())?;
        let word_vocab: Vocabulary = serde_json::from_value(m["word_vocab"].clone())?;
        if m["vocab_hash"].as_str() != Some(word_vocab.hash().as_str()) {
            return Err(Error::Data("checkpoint vocabulary hash mismatch".into()));
        }
        let graph = match &m["graph"] {
            serde_json::Value::Null => None,
            g => {
                let concepts: Vec<String> = serde_json::from_value(g["concepts"].clone())?;
                let relations: Vec<String> = serde_json::from_value(g["relations"].clone())?;
                let edges: Vec<(usize, usize, usize, f64)> = serde_json::from_value(g["edges"].clone())?;
                let bad = || Error::Data("checkpoint graph edge out of range".into());
                let mut triples = Vec::with_capacity(edges.len());
                for (h, r, t, w) in edges {
                    triples.push((
                        concepts.get(h).ok_or_else(bad)?.as_str(),
                        relations.get(r).ok_or_else(bad)?.as_str(),
                        concepts.get(t).ok_or_else(bad)?.as_str(),
                        w,
                    ));
                }
                let g = ConceptGraph::from_triples(triples);
                if g.concepts() != concepts.as_slice() {
                    return Err(Error::Data("checkpoint graph does not rebuild to the stored node order".into()));
                }
                Some(g)
            }
        };
        let mut params = ParamStore::new();
        for (k, t) in &snap.tensors {
            if !k.starts_with("adam.") {
                params.insert(k.clone(), t.clone());
            }
        }
        let bundles = compute_bundles(graph.as_ref(), &word_vocab, config.neighbor_caps);
        let model = Model {
            config,
            params,
            eq_vocab,
            word_vocab,
            graph,
            bundles,
        };
        // binding checks that every parameter is present
        model.bind(&mut Tape::new())?;
        Ok(model)
    }
}

trait Reshaped {
    fn reshaped(self, shape: &[usize]) -> Tensor;
}

impl Reshaped for Tensor {
    fn reshaped(self, shape: &[usize]) -> Tensor {
        let rg = self.requires_grad();
        let mut t = Tensor::new(shape.to_vec(), self.into_data()).expect("same element count");
        t.set_requires_grad(rg);
        t
    }
}
