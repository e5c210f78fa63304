//! File-level pipeline stages. Every stage writes its artifacts under one
//! output directory and records itself in `manifest.json` there.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::info;
use mathgen_tensor::Snapshot;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{preprocess_dataset, read_examples, split_examples, tokenize_problem, write_examples, PreprocessReport, TrainingExample};
use crate::equation::tokenize_equations;
use crate::error::{Error, Result};
use crate::graph::gat::{embeddings_snapshot, gat_pretrain, read_embeddings, GatConfig};
use crate::graph::{load_graph, ConceptGraph, LoadOptions, LoadReport};
use crate::lda::{lda_fit, prepare_document, stopwords, LdaModel, TopicAssignment};
use crate::metrics::{evaluate, numbers_in, EvalItem, MetricReport, NumberBasis};
use crate::model::{DecodeOptions, Knowledge, Model};
use crate::train::{log_csv, TrainConfig, Trainer};
use crate::vocab::Vocabulary;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{:02x}", b)).collect())
}

/// Input path -> SHA-256. Taken before a stage runs, since outputs may overwrite inputs.
pub fn input_sums(inputs: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut sums = BTreeMap::new();
    for p in inputs {
        require_file(p)?;
        sums.insert(p.display().to_string(), sha256_file(p)?);
    }
    Ok(sums)
}

/// Adds or replaces the `stage` entry of the output directory's manifest.
pub fn record_stage(out_dir: &Path, stage: &str, config: Value, sums: BTreeMap<String, String>, outputs: &[&str]) -> Result<()> {
    let path = out_dir.join(MANIFEST);
    let mut manifest: BTreeMap<String, Value> = match fs::read_to_string(&path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => BTreeMap::new(),
    };
    let stages = manifest.entry("stages".into()).or_insert_with(|| json!({}));
    stages[stage] = json!({
        "config": config,
        "inputs": sums,
        "outputs": outputs,
    });
    manifest.insert("tool".into(), json!({"name": "mathgen", "version": env!("CARGO_PKG_VERSION")}));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display()))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub max_problem_tokens: usize,
    pub min_freq: usize,
    pub dev_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            max_problem_tokens: crate::dataset::MAX_PROBLEM_TOKENS,
            min_freq: 2,
            dev_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

/// Raw JSONL -> `examples.jsonl`, `train/dev/test.jsonl`, `preprocess_report.txt`.
pub fn preprocess(input: &Path, out_dir: &Path, opts: &PreprocessOptions) -> Result<PreprocessReport> {
    let sums = input_sums(&[input])?;
    if !(0.0..=1.0).contains(&opts.dev_frac) || !(0.0..=1.0).contains(&opts.test_frac) || opts.dev_frac + opts.test_frac > 1.0 {
        return Err(Error::Config("dev_frac and test_frac must be fractions summing to at most 1".into()));
    }
    ensure_dir(out_dir)?;
    let (examples, report) = preprocess_dataset(BufReader::new(fs::File::open(input)?), opts.max_problem_tokens, opts.min_freq)?;
    write_examples(&out_dir.join("examples.jsonl"), &examples)?;
    let (train, dev, test) = split_examples(examples, opts.dev_frac, opts.test_frac, &mut ChaCha8Rng::seed_from_u64(opts.seed));
    write_examples(&out_dir.join("train.jsonl"), &train)?;
    write_examples(&out_dir.join("dev.jsonl"), &dev)?;
    write_examples(&out_dir.join("test.jsonl"), &test)?;
    let mut text = report.to_text();
    writeln!(text, "split: train {} dev {} test {}", train.len(), dev.len(), test.len()).unwrap();
    fs::write(out_dir.join("preprocess_report.txt"), text)?;
    record_stage(
        out_dir,
        "preprocess",
        serde_json::to_value(opts)?,
        sums,
        &["examples.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl", "preprocess_report.txt"],
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaOptions {
    pub num_topics: usize,
    /// Defaults to `50 / num_topics`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    /// Gibbs sweeps when assigning topics to documents outside the fit.
    pub infer_sweeps: usize,
    pub top_k: usize,
    pub keep_auxiliaries: bool,
    pub seed: u64,
}

impl Default for LdaOptions {
    fn default() -> Self {
        LdaOptions {
            num_topics: 9,
            alpha: None,
            beta: 0.01,
            iterations: 500,
            infer_sweeps: 50,
            top_k: 30,
            keep_auxiliaries: false,
            seed: 0,
        }
    }
}

pub struct LdaOutput {
    pub model: LdaModel,
    pub assignments: Vec<TopicAssignment>,
    pub keywords: Vec<Vec<String>>,
}

/// Fits LDA on `train` and labels `train` plus every file in `others`.
/// Labeled copies of the inputs are written under `out_dir` with their
/// original file names, together with `lda.bin`, `topics.jsonl` and
/// `keywords.json`.
pub fn lda_fit_stage(train: &Path, others: &[PathBuf], out_dir: &Path, opts: &LdaOptions) -> Result<LdaOutput> {
    let mut inputs: Vec<&Path> = vec![train];
    inputs.extend(others.iter().map(|p| p.as_path()));
    let sums = input_sums(&inputs)?;
    ensure_dir(out_dir)?;
    let stop = stopwords(opts.keep_auxiliaries);
    let mut train_ex = read_examples(train)?;
    if train_ex.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let docs: Vec<Vec<String>> = train_ex.iter().map(|e| prepare_document(&e.problem, &stop)).collect();
    let alpha = opts.alpha.unwrap_or(50.0 / opts.num_topics.max(1) as f64);
    let model = lda_fit(&docs, opts.num_topics, alpha, opts.beta, opts.iterations, opts.seed)?;

    let mut assignments = Vec::new();
    for (i, ex) in train_ex.iter_mut().enumerate() {
        let a = if docs[i].is_empty() {
            model.assign_topic(&ex.id, &docs[i], opts.infer_sweeps)
        } else {
            model.fitted_assignment(&ex.id, i)
        };
        ex.topic_id = Some(a.topic);
        assignments.push(a);
    }
    let name = |p: &Path| p.file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("examples.jsonl"));
    write_examples(&out_dir.join(name(train)), &train_ex)?;
    let mut outputs = vec![name(train).display().to_string()];
    for p in others {
        let mut exs = read_examples(p)?;
        for ex in exs.iter_mut() {
            let a = model.assign_topic(&ex.id, &prepare_document(&ex.problem, &stop), opts.infer_sweeps);
            ex.topic_id = Some(a.topic);
            assignments.push(a);
        }
        write_examples(&out_dir.join(name(p)), &exs)?;
        outputs.push(name(p).display().to_string());
    }
    let keywords = (1..=opts.num_topics).map(|t| model.top_keywords(t, opts.top_k)).collect::<Result<Vec<_>>>()?;
    model.save(&out_dir.join("lda.bin"))?;
    let mut lines = String::new();
    for a in &assignments {
        lines.push_str(&serde_json::to_string(a)?);
        lines.push('\n');
    }
    fs::write(out_dir.join("topics.jsonl"), lines)?;
    fs::write(out_dir.join("keywords.json"), serde_json::to_string_pretty(&keywords)? + "\n")?;
    outputs.extend(["lda.bin", "topics.jsonl", "keywords.json"].map(String::from));
    let mut cfg = serde_json::to_value(opts)?;
    cfg["alpha"] = json!(alpha);
    let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    record_stage(out_dir, "lda-fit", cfg, sums, &outs)?;
    Ok(LdaOutput { model, assignments, keywords })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgOptions {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    pub allow_unknown_relations: bool,
    pub seed: u64,
}

impl Default for KgOptions {
    fn default() -> Self {
        let g = GatConfig::default();
        KgOptions {
            layers: g.layers,
            heads: g.heads,
            dim: g.dim,
            epochs: g.epochs,
            lr: g.lr,
            negatives: g.negatives,
            allow_unknown_relations: false,
            seed: 0,
        }
    }
}

impl KgOptions {
    pub fn gat(&self) -> GatConfig {
        GatConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            epochs: self.epochs,
            lr: self.lr,
            negatives: self.negatives,
            seed: self.seed,
        }
    }
}

/// Writes a graph back out as a TSV edge file.
pub fn graph_tsv(g: &ConceptGraph) -> String {
    let mut s = String::new();
    for e in g.edges() {
        writeln!(s, "{}\t{}\t{}\t{}", g.concept(e.head), g.relations()[e.relation], g.concept(e.tail), e.weight).unwrap();
    }
    s
}

/// TSV edges -> `graph.tsv` (kept edges), `node_embeddings.bin`,
/// `kg_report.txt`. With `examples`, the graph is intersected with their
/// problem vocabulary.
pub fn kg_pretrain_stage(edges: &Path, examples: Option<&Path>, out_dir: &Path, opts: &KgOptions) -> Result<(ConceptGraph, LoadReport)> {
    let mut inputs = vec![edges];
    inputs.extend(examples);
    let sums = input_sums(&inputs)?;
    ensure_dir(out_dir)?;
    let vocabulary = match examples {
        Some(p) => Some(read_examples(p)?.into_iter().flat_map(|e| e.problem).collect::<HashSet<String>>()),
        None => None,
    };
    let load_opts = LoadOptions {
        vocabulary,
        allow_unknown_relations: opts.allow_unknown_relations,
    };
    let (graph, report) = load_graph(BufReader::new(fs::File::open(edges)?), &load_opts)?;
    let cfg = opts.gat();
    let result = gat_pretrain(&graph, &cfg)?;
    fs::write(out_dir.join("graph.tsv"), graph_tsv(&graph))?;
    embeddings_snapshot(&graph, &result.embeddings, &cfg).save(out_dir.join("node_embeddings.bin"))?;
    let mut text = String::new();
    writeln!(text, "rows: {}", report.rows).unwrap();
    writeln!(text, "kept edges: {}", report.kept).unwrap();
    writeln!(text, "malformed: {} {:?}", report.malformed.len(), report.malformed).unwrap();
    writeln!(text, "unknown relation: {}", report.unknown_relation).unwrap();
    writeln!(text, "duplicates: {}", report.duplicates).unwrap();
    writeln!(text, "outside vocabulary: {}", report.outside_vocabulary).unwrap();
    writeln!(text, "nodes: {}", graph.num_nodes()).unwrap();
    if let (Some(first), Some(last)) = (result.losses.first(), result.losses.last()) {
        writeln!(text, "link loss: {:.6} -> {:.6}", first, last).unwrap();
    }
    fs::write(out_dir.join("kg_report.txt"), text)?;
    record_stage(out_dir, "kg-pretrain", serde_json::to_value(opts)?, sums, &["graph.tsv", "node_embeddings.bin", "kg_report.txt"])?;
    Ok((graph, report))
}

/// Reads `graph.tsv` + `node_embeddings.bin` written by [`kg_pretrain_stage`].
pub fn load_knowledge(graph_path: &Path, emb_path: &Path) -> Result<(ConceptGraph, mathgen_tensor::Tensor)> {
    require_file(graph_path)?;
    require_file(emb_path)?;
    let opts = LoadOptions {
        vocabulary: None,
        allow_unknown_relations: true,
    };
    let (graph, _) = load_graph(BufReader::new(fs::File::open(graph_path)?), &opts)?;
    let (concepts, emb) = read_embeddings(&Snapshot::load(emb_path)?)?;
    if concepts != graph.concepts() {
        return Err(Error::Data("embedding concepts do not match the graph".into()));
    }
    Ok((graph, emb))
}

/// Vocabularies, keyword memory and knowledge for a fresh model.
pub fn build_model(
    config: &TrainConfig,
    train: &[TrainingExample],
    knowledge: Option<(&ConceptGraph, &mathgen_tensor::Tensor)>,
    keywords: &[Vec<String>],
) -> Result<Model> {
    let eq_vocab = Vocabulary::build(train.iter().map(|e| e.equations.surfaces()), 1);
    let word_vocab = Vocabulary::build(train.iter().map(|e| e.problem.clone()), config.word_min_freq);
    let kn = match knowledge {
        Some((graph, emb)) => {
            if emb.shape()[1] != config.dim {
                return Err(Error::DimensionMismatch(format!("node embeddings have dim {} but the model uses {}", emb.shape()[1], config.dim)));
            }
            Some(Knowledge { graph, node_embeddings: emb })
        }
        None => None,
    };
    Model::new(config.model_config(), eq_vocab, word_vocab, kn, keywords)
}

pub struct TrainInputs<'a> {
    pub train: &'a Path,
    pub dev: Option<&'a Path>,
    pub graph: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
    pub keywords: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

/// Trains and writes `best.ckpt`, `last.ckpt` and `loss.csv`.
pub fn train_stage(inputs: &TrainInputs<'_>, out_dir: &Path, config: &TrainConfig) -> Result<Trainer> {
    config.validate()?;
    let mut files: Vec<&Path> = vec![inputs.train];
    files.extend(inputs.dev);
    files.extend(inputs.graph);
    files.extend(inputs.embeddings);
    files.extend(inputs.keywords);
    files.extend(inputs.resume);
    let sums = input_sums(&files)?;
    if inputs.graph.is_some() != inputs.embeddings.is_some() {
        return Err(Error::Config("graph and embeddings must be given together".into()));
    }
    ensure_dir(out_dir)?;
    let train = read_examples(inputs.train)?;
    let dev = match inputs.dev {
        Some(p) => read_examples(p)?,
        None => Vec::new(),
    };
    let mut trainer = match inputs.resume {
        Some(p) => Trainer::resume(&Snapshot::load(p)?, config.clone(), &train)?,
        None => {
            let keywords: Vec<Vec<String>> = match inputs.keywords {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => Vec::new(),
            };
            let kn = match (inputs.graph, inputs.embeddings) {
                (Some(g), Some(e)) => Some(load_knowledge(g, e)?),
                _ => None,
            };
            let model = build_model(config, &train, kn.as_ref().map(|(g, e)| (g, e)), &keywords)?;
            Trainer::new(model, config.clone(), &train)?
        }
    };
    info!("training on {} examples, {} dev", train.len(), dev.len());
    trainer.fit(&dev)?;
    match &trainer.best {
        Some(best) => best.save(out_dir.join("best.ckpt"))?,
        None if out_dir.join("best.ckpt").is_file() => info!("dev bleu did not improve after resume; keeping best.ckpt"),
        None => trainer.checkpoint().save(out_dir.join("best.ckpt"))?,
    }
    trainer.checkpoint().save(out_dir.join("last.ckpt"))?;
    fs::write(out_dir.join("loss.csv"), log_csv(&trainer.log))?;
    record_stage(out_dir, "train", serde_json::to_value(config)?, sums, &["best.ckpt", "last.ckpt", "loss.csv"])?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub equations: Vec<String>,
    pub generated: String,
}

/// Equation sets to decode: any JSONL with `equations` and an optional `id`.
pub fn read_equation_inputs(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), i + 1, e)))?;
        let eqs: Vec<String> = serde_json::from_value(v.get("equations").cloned().unwrap_or(Value::Null))
            .map_err(|_| Error::Data(format!("{}:{}: missing equations", path.display(), i + 1)))?;
        let id = v.get("id").and_then(|x| x.as_str()).map(String::from).unwrap_or_else(|| format!("line-{}", i + 1));
        out.push((id, eqs));
    }
    Ok(out)
}

/// Decodes every equation set in `input` and writes `generated.jsonl`.
pub fn generate_stage(checkpoint: &Path, input: &Path, out_dir: &Path, opts: &DecodeOptions) -> Result<Vec<GeneratedRecord>> {
    let sums = input_sums(&[checkpoint, input])?;
    ensure_dir(out_dir)?;
    let model = Model::from_snapshot(&Snapshot::load(checkpoint)?)?;
    let mut records = Vec::new();
    let mut text = String::new();
    for (id, eqs) in read_equation_inputs(input)? {
        let norm = crate::equation::normalize_variables(&eqs)?;
        let seq = tokenize_equations(&norm)?;
        let g = model.generate(&seq, opts)?;
        for (tok, src) in g.tokens.iter().zip(&g.copied_from) {
            if let Some(p) = src {
                info!("{id}: `{tok}` copied from equation position {p} (`{}`)", seq.tokens[*p].surface);
            }
        }
        let rec = GeneratedRecord {
            id,
            equations: eqs,
            generated: g.text(),
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
        records.push(rec);
    }
    fs::write(out_dir.join("generated.jsonl"), text)?;
    record_stage(out_dir, "generate", serde_json::to_value(opts)?, sums, &["generated.jsonl"])?;
    Ok(records)
}

struct TextRecord {
    tokens: Vec<String>,
    equation_numbers: Vec<String>,
}

/// Reads `id -> text` from generation output (`generated`) or example files (`problem`).
fn read_texts(path: &Path) -> Result<(Vec<String>, BTreeMap<String, TextRecord>)> {
    let text = fs::read_to_string(path)?;
    let mut order = Vec::new();
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Data(format!("{}:{}: {}", path.display(), i + 1, m));
        let v: Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        let id = v.get("id").and_then(|x| x.as_str()).ok_or_else(|| bad("missing id"))?.to_string();
        let tokens = match (v.get("generated"), v.get("problem")) {
            (Some(Value::String(s)), _) => s.split_whitespace().map(String::from).collect(),
            (_, Some(Value::String(s))) => tokenize_problem(s),
            (_, Some(p @ Value::Array(_))) => serde_json::from_value(p.clone()).map_err(|_| bad("problem must be a token list"))?,
            _ => return Err(bad("record has neither `generated` nor `problem`")),
        };
        let equation_numbers = match v.get("equations") {
            Some(e) => {
                let eqs: Vec<String> = serde_json::from_value(e.clone()).map_err(|_| bad("equations must be a list of strings"))?;
                let seq = tokenize_equations(&eqs)?;
                numbers_in(&seq.surfaces())
            }
            None => Vec::new(),
        };
        if map.insert(id.clone(), TextRecord { tokens, equation_numbers }).is_some() {
            return Err(bad("duplicate id"));
        }
        order.push(id);
    }
    Ok((order, map))
}

/// Scores candidates against references by id and writes `metrics.json`.
pub fn evaluate_stage(candidates: &Path, references: &Path, out_dir: &Path, basis: NumberBasis) -> Result<MetricReport> {
    let sums = input_sums(&[candidates, references])?;
    ensure_dir(out_dir)?;
    let (_, cands) = read_texts(candidates)?;
    let (order, refs) = read_texts(references)?;
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut items = Vec::with_capacity(order.len());
    for id in &order {
        let c = cands.get(id).ok_or_else(|| Error::Data(format!("no candidate for reference id {id}")))?;
        let r = &refs[id];
        let nums = if r.equation_numbers.is_empty() { &c.equation_numbers } else { &r.equation_numbers };
        items.push(EvalItem {
            id,
            candidate: &c.tokens,
            reference: &r.tokens,
            equation_numbers: nums,
        });
    }
    let report = evaluate(&items, basis);
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    record_stage(out_dir, "evaluate", json!({"number_basis": basis}), sums, &["metrics.json"])?;
    Ok(report)
}
