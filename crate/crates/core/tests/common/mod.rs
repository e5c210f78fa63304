#![allow(dead_code)]

use mathgen_core::dataset::{tokenize_problem, TrainingExample};
use mathgen_core::graph::ConceptGraph;
use mathgen_core::model::{Knowledge, Model, ModelConfig};
use mathgen_core::vocab::Vocabulary;
use mathgen_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const PAIRS: [(&[&str], &str, usize); 4] = [
    (&["x+y=10", "x-y=2"], "the sum of two numbers is 10 and their difference is 2 .", 1),
    (&["4*(x-y)=800"], "a plane flies 800 miles in 4 hrs against the wind .", 2),
    (&["0.5*x+0.3*y=10"], "a nickel and a dime cost 10 cents with 0.5 and 0.3 .", 1),
    (&["x=2*y", "x+y=30"], "a coin is twice a dime and the sum is 30 .", 2),
];

pub fn examples() -> Vec<TrainingExample> {
    PAIRS
        .iter()
        .enumerate()
        .map(|(i, (eqs, text, topic))| {
            let eqs: Vec<String> = eqs.iter().map(|s| s.to_string()).collect();
            let mut ex = TrainingExample::new(format!("ex{i}"), &eqs, tokenize_problem(text)).unwrap();
            ex.topic_id = Some(*topic);
            ex
        })
        .collect()
}

pub fn vocabs(examples: &[TrainingExample], word_min_freq: usize) -> (Vocabulary, Vocabulary) {
    let eq = Vocabulary::build(examples.iter().map(|e| e.equations.surfaces()), 1);
    let words = Vocabulary::build(examples.iter().map(|e| e.problem.clone()), word_min_freq);
    (eq, words)
}

pub fn toy_graph() -> ConceptGraph {
    ConceptGraph::from_triples([
        ("nickel", "IsA", "coin", 1.0),
        ("coin", "RelatedTo", "dime", 1.0),
        ("plane", "RelatedTo", "wind", 0.5),
        ("plane", "UsedFor", "fly", 1.0),
        ("sum", "RelatedTo", "number", 1.0),
    ])
}

pub fn random_embeddings(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.5).unwrap();
    Tensor::new(vec![n, d], (0..n * d).map(|_| dist.sample(&mut rng)).collect()).unwrap()
}

pub fn toy_config(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        num_topics: 2,
        memory_slots: 3,
        kernel_widths: vec![2, 3],
        init_seed: 11,
        ..ModelConfig::default()
    }
}

/// A small model over [`examples`] with the toy graph attached.
pub fn toy_model(config: ModelConfig) -> (Model, Vec<TrainingExample>) {
    let exs = examples();
    let (eq, words) = vocabs(&exs, 1);
    let graph = toy_graph();
    let emb = random_embeddings(graph.num_nodes(), config.dim, 5);
    let keywords = vec![
        vec!["sum".to_string(), "difference".to_string(), "numbers".to_string()],
        vec!["plane".to_string(), "miles".to_string(), "wind".to_string()],
    ];
    let model = Model::new(
        config,
        eq,
        words,
        Some(Knowledge {
            graph: &graph,
            node_embeddings: &emb,
        }),
        &keywords,
    )
    .unwrap();
    (model, exs)
}
