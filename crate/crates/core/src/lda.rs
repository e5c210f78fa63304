//! Latent Dirichlet allocation by collapsed Gibbs sampling.

use std::collections::HashMap;
use std::path::Path;

use mathgen_tensor::{Snapshot, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do",
    "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she", "should", "so", "some",
    "such", "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where",
    "which", "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

const AUXILIARIES: &[&str] = &[
    "am", "are", "be", "been", "being", "can", "could", "did", "do", "does", "doing", "had", "has", "have", "having",
    "is", "should", "was", "were", "will", "would",
];

/// Built-in English stopword list. With `keep_auxiliaries` the auxiliary
/// verbs ("do", "is", ...) are not treated as stopwords.
pub fn stopwords(keep_auxiliaries: bool) -> Vec<&'static str> {
    STOPWORDS
        .iter()
        .copied()
        .filter(|w| !(keep_auxiliaries && AUXILIARIES.contains(w)))
        .collect()
}

/// Keeps alphabetic, non-stopword tokens.
pub fn prepare_document<S: AsRef<str>>(tokens: &[S], stop: &[&str]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .filter(|t| !t.is_empty() && t.chars().all(|c| c.is_alphabetic()) && !stop.contains(t))
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicAssignment {
    pub id: String,
    /// 1-based.
    pub topic: usize,
    pub dist: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    pub num_topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub words: Vec<String>,
    word_index: HashMap<String, usize>,
    pub doc_topic_counts: Vec<Vec<u32>>,
    pub topic_word_counts: Vec<Vec<u32>>,
    pub topic_totals: Vec<u32>,
}

fn sample(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn argmax_low(dist: &[f64]) -> usize {
    let mut best = 0;
    for (k, p) in dist.iter().enumerate() {
        if *p > dist[best] {
            best = k;
        }
    }
    best
}

/// Fits LDA with `iterations` full Gibbs sweeps. Empty documents are kept as
/// all-zero rows so that row indices line up with the input corpus.
pub fn lda_fit<S: AsRef<str>>(
    corpus: &[Vec<S>],
    num_topics: usize,
    alpha: f64,
    beta: f64,
    iterations: usize,
    seed: u64,
) -> Result<LdaModel> {
    if num_topics == 0 || iterations == 0 || alpha <= 0.0 || beta <= 0.0 {
        return Err(Error::Config("lda needs num_topics ≥ 1, iterations ≥ 1 and positive smoothing".into()));
    }
    let mut words: Vec<String> = corpus
        .iter()
        .flat_map(|d| d.iter().map(|w| w.as_ref().to_string()))
        .collect();
    words.sort();
    words.dedup();
    if words.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let word_index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    let v = words.len();
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| d.iter().map(|w| word_index[w.as_ref()]).collect())
        .collect();
    let empty = docs.iter().filter(|d| d.is_empty()).count();
    if empty > 0 {
        log::warn!("lda: skipping {} empty document(s)", empty);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ndk = vec![vec![0u32; num_topics]; docs.len()];
    let mut nkw = vec![vec![0u32; v]; num_topics];
    let mut nk = vec![0u32; num_topics];
    let mut z: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let zd: Vec<usize> = doc
            .iter()
            .map(|&w| {
                let k = rng.gen_range(0..num_topics);
                ndk[d][k] += 1;
                nkw[k][w] += 1;
                nk[k] += 1;
                k
            })
            .collect();
        z.push(zd);
    }

    let vbeta = v as f64 * beta;
    let mut weights = vec![0.0; num_topics];
    for _ in 0..iterations {
        for (d, doc) in docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = z[d][i];
                ndk[d][old] -= 1;
                nkw[old][w] -= 1;
                nk[old] -= 1;
                for k in 0..num_topics {
                    weights[k] = (ndk[d][k] as f64 + alpha) * (nkw[k][w] as f64 + beta) / (nk[k] as f64 + vbeta);
                }
                let new = sample(&weights, &mut rng);
                z[d][i] = new;
                ndk[d][new] += 1;
                nkw[new][w] += 1;
                nk[new] += 1;
            }
        }
    }

    Ok(LdaModel {
        num_topics,
        alpha,
        beta,
        words,
        word_index,
        doc_topic_counts: ndk,
        topic_word_counts: nkw,
        topic_totals: nk,
    })
}

impl LdaModel {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_index.get(w).copied()
    }

    /// Smoothed p(word | topic) for a 0-based topic index.
    pub fn word_prob(&self, k: usize, w: usize) -> f64 {
        (self.topic_word_counts[k][w] as f64 + self.beta)
            / (self.topic_totals[k] as f64 + self.vocab_size() as f64 * self.beta)
    }

    fn smoothed(&self, counts: &[f64]) -> Vec<f64> {
        let n: f64 = counts.iter().sum();
        if n == 0.0 {
            return vec![1.0 / self.num_topics as f64; self.num_topics];
        }
        let denom = n + self.num_topics as f64 * self.alpha;
        counts.iter().map(|c| (c + self.alpha) / denom).collect()
    }

    fn assignment(&self, id: &str, dist: Vec<f64>) -> TopicAssignment {
        TopicAssignment {
            id: id.to_string(),
            topic: argmax_low(&dist) + 1,
            dist,
        }
    }

    /// Topic distribution of a document that was part of the fit.
    pub fn fitted_assignment(&self, id: &str, doc_index: usize) -> TopicAssignment {
        let counts: Vec<f64> = self.doc_topic_counts[doc_index].iter().map(|&c| c as f64).collect();
        self.assignment(id, self.smoothed(&counts))
    }

    /// Held-out Gibbs inference with topic-word counts frozen. The chain is
    /// seeded from the document content, so results are reproducible. The
    /// returned distribution averages doc-topic counts over the second half
    /// of the sweeps.
    pub fn assign_topic<S: AsRef<str>>(&self, id: &str, doc: &[S], sweeps: usize) -> TopicAssignment {
        let ws: Vec<usize> = doc.iter().filter_map(|w| self.word_id(w.as_ref())).collect();
        let k = self.num_topics;
        if ws.is_empty() {
            return self.assignment(id, vec![1.0 / k as f64; k]);
        }
        let mut h = Sha256::new();
        for w in &ws {
            h.update((*w as u64).to_le_bytes());
        }
        let seed = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut ndk = vec![0u32; k];
        let mut z: Vec<usize> = ws
            .iter()
            .map(|_| {
                let t = rng.gen_range(0..k);
                ndk[t] += 1;
                t
            })
            .collect();
        let sweeps = sweeps.max(1);
        let burn = sweeps / 2;
        let mut acc = vec![0.0; k];
        let mut weights = vec![0.0; k];
        for s in 0..sweeps {
            for (i, &w) in ws.iter().enumerate() {
                ndk[z[i]] -= 1;
                for t in 0..k {
                    weights[t] = (ndk[t] as f64 + self.alpha) * self.word_prob(t, w);
                }
                z[i] = sample(&weights, &mut rng);
                ndk[z[i]] += 1;
            }
            if s >= burn {
                for t in 0..k {
                    acc[t] += ndk[t] as f64;
                }
            }
        }
        let kept = (sweeps - burn) as f64;
        let counts: Vec<f64> = acc.iter().map(|c| c / kept).collect();
        self.assignment(id, self.smoothed(&counts))
    }

    /// The `k` most probable words of a 1-based topic, ties broken by word id.
    pub fn top_keywords(&self, topic_id: usize, k: usize) -> Result<Vec<String>> {
        if topic_id == 0 || topic_id > self.num_topics {
            return Err(Error::Config(format!("topic id {} outside 1..={}", topic_id, self.num_topics)));
        }
        let row = &self.topic_word_counts[topic_id - 1];
        let mut ids: Vec<usize> = (0..row.len()).collect();
        ids.sort_by(|a, b| row[*b].cmp(&row[*a]).then(a.cmp(b)));
        Ok(ids.into_iter().take(k).map(|i| self.words[i].clone()).collect())
    }

    pub fn to_snapshot(&self) -> Result<Snapshot> {
        let meta = serde_json::json!({
            "kind": "lda",
            "num_topics": self.num_topics,
            "alpha": self.alpha,
            "beta": self.beta,
            "words": self.words,
        });
        let mut snap = Snapshot::new(meta);
        let d = self.doc_topic_counts.len();
        let dt: Vec<f64> = self.doc_topic_counts.iter().flatten().map(|&c| c as f64).collect();
        let tw: Vec<f64> = self.topic_word_counts.iter().flatten().map(|&c| c as f64).collect();
        snap.insert("doc_topic", Tensor::new(vec![d, self.num_topics], dt)?);
        snap.insert("topic_word", Tensor::new(vec![self.num_topics, self.vocab_size()], tw)?);
        Ok(snap)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Self> {
        let bad = || Error::Data("not an lda model file".into());
        if snap.meta.get("kind").and_then(|k| k.as_str()) != Some("lda") {
            return Err(bad());
        }
        let num_topics = snap.meta["num_topics"].as_u64().ok_or_else(bad)? as usize;
        let alpha = snap.meta["alpha"].as_f64().ok_or_else(bad)?;
        let beta = snap.meta["beta"].as_f64().ok_or_else(bad)?;
        let words: Vec<String> = serde_json::from_value(snap.meta["words"].clone())?;
        let to_rows = |t: &Tensor| -> Vec<Vec<u32>> {
            let cols = t.shape()[1].max(1);
            t.data().chunks(cols).map(|r| r.iter().map(|&c| c as u32).collect()).collect()
        };
        let dt = snap.tensor("doc_topic")?;
        let tw = snap.tensor("topic_word")?;
        if tw.shape() != [num_topics, words.len()] || dt.shape().get(1) != Some(&num_topics) {
            return Err(Error::DimensionMismatch(format!(
                "lda tables {:?}/{:?} vs {} topics, {} words",
                dt.shape(),
                tw.shape(),
                num_topics,
                words.len()
            )));
        }
        let doc_topic_counts = if dt.shape()[0] == 0 { Vec::new() } else { to_rows(dt) };
        let topic_word_counts = to_rows(tw);
        let topic_totals = topic_word_counts.iter().map(|r| r.iter().sum()).collect();
        let word_index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(LdaModel {
            num_topics,
            alpha,
            beta,
            words,
            word_index,
            doc_topic_counts,
            topic_word_counts,
            topic_totals,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_snapshot()?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LdaModel::from_snapshot(&Snapshot::load(path)?)
    }
}
