//! Dataset records, preprocessing, problem corruption and number alignment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::equation::{canonical_number, normalize_variables, tokenize_equations, EquationSequence};
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, RESERVED, UNK};

pub const MAX_PROBLEM_TOKENS: usize = 45;

/// One line of the input dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawRecord {
    pub equations: Vec<String>,
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    /// Variable-normalized equation texts.
    pub equation_text: Vec<String>,
    pub equations: EquationSequence,
    pub problem: Vec<String>,
    /// 1-based gold topic, filled in once a topic model has been fitted.
    pub topic_id: Option<usize>,
    /// Problem position -> equation token position.
    pub copy_alignment: BTreeMap<usize, usize>,
}

/// On-disk form of a [`TrainingExample`] (one JSON object per line).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub id: String,
    pub equations: Vec<String>,
    pub problem: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<usize>,
    #[serde(default)]
    pub copy_alignment: Vec<(usize, usize)>,
}

impl TrainingExample {
    pub fn new(id: impl Into<String>, equations: &[String], problem: Vec<String>) -> Result<Self> {
        let equation_text = normalize_variables(equations)?;
        let seq = tokenize_equations(&equation_text)?;
        let copy_alignment = align_numbers(&seq, &problem);
        Ok(TrainingExample {
            id: id.into(),
            equation_text,
            equations: seq,
            problem,
            topic_id: None,
            copy_alignment,
        })
    }

    pub fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            id: self.id.clone(),
            equations: self.equation_text.clone(),
            problem: self.problem.clone(),
            topic: self.topic_id,
            copy_alignment: self.copy_alignment.iter().map(|(a, b)| (*a, *b)).collect(),
        }
    }

    pub fn from_record(r: ExampleRecord) -> Result<Self> {
        let seq = tokenize_equations(&r.equations)?;
        let copy_alignment: BTreeMap<usize, usize> = r.copy_alignment.into_iter().collect();
        for (&p, &e) in &copy_alignment {
            let ok = p < r.problem.len() && seq.tokens.get(e).is_some_and(|t| t.is_number());
            if !ok {
                return Err(Error::Data(format!("example {}: bad copy alignment {} -> {}", r.id, p, e)));
            }
        }
        Ok(TrainingExample {
            id: r.id,
            equation_text: r.equations,
            equations: seq,
            problem: r.problem,
            topic_id: r.topic,
            copy_alignment,
        })
    }
}

fn problem_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?|\.\d+|[a-z]+|[^\sa-z0-9]").unwrap())
}

/// Lowercases and splits problem text on whitespace and punctuation,
/// keeping numerals (including decimals) as single tokens.
pub fn tokenize_problem(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    problem_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Aligns each numeric problem token to the first equation number with the
/// same canonical value.
pub fn align_numbers<S: AsRef<str>>(equations: &EquationSequence, problem: &[S]) -> BTreeMap<usize, usize> {
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, t) in equations.tokens.iter().enumerate() {
        if let Some(c) = t.canonical() {
            first.entry(c).or_insert(i);
        }
    }
    let mut out = BTreeMap::new();
    for (p, tok) in problem.iter().enumerate() {
        if let Some(c) = canonical_number(tok.as_ref()) {
            if let Some(&e) = first.get(c.as_str()) {
                out.insert(p, e);
            }
        }
    }
    out
}

/// Randomly masks then deletes tokens. Each position is masked with
/// probability `mask_rate`; survivors of the mask pass are deleted with
/// probability `delete_rate`. Rates are clamped to `[0, 0.99]` and at least
/// one token always survives.
pub fn corrupt_problem<T: Clone, R: Rng>(tokens: &[T], mask: &T, mask_rate: f64, delete_rate: f64, rng: &mut R) -> Vec<T> {
    let mask_rate = mask_rate.clamp(0.0, 0.99);
    let delete_rate = delete_rate.clamp(0.0, 0.99);
    let masked: Vec<T> = tokens
        .iter()
        .map(|t| if rng.gen::<f64>() < mask_rate { mask.clone() } else { t.clone() })
        .collect();
    let mut out: Vec<T> = masked.iter().filter(|_| rng.gen::<f64>() >= delete_rate).cloned().collect();
    if out.is_empty() {
        if let Some(first) = masked.first() {
            out.push(first.clone());
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub total: usize,
    pub kept: usize,
    pub dropped_too_long: usize,
    pub malformed: Vec<(usize, String)>,
    pub max_problem_tokens: usize,
    pub min_freq: usize,
    pub vocab_size: usize,
    pub unk_rate: f64,
}

impl PreprocessReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "records: {}", self.total);
        let _ = writeln!(s, "kept: {}", self.kept);
        let _ = writeln!(s, "dropped (problem > {} tokens): {}", self.max_problem_tokens, self.dropped_too_long);
        let _ = writeln!(s, "malformed: {}", self.malformed.len());
        for (line, why) in &self.malformed {
            let _ = writeln!(s, "  line {}: {}", line, why);
        }
        let _ = writeln!(s, "vocabulary (min_freq {}): {}", self.min_freq, self.vocab_size);
        let _ = writeln!(s, "unk rate: {:.4}", self.unk_rate);
        s
    }
}

/// Parses a JSON-lines dataset, drops over-long problems, normalizes
/// variables and aligns numbers. Malformed lines are skipped and reported.
pub fn preprocess_dataset<R: BufRead>(reader: R, max_problem_tokens: usize, min_freq: usize) -> Result<(Vec<TrainingExample>, PreprocessReport)> {
    let mut report = PreprocessReport {
        max_problem_tokens,
        min_freq,
        ..Default::default()
    };
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.total += 1;
        let rec: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push((lineno, format!("json: {}", e)));
                continue;
            }
        };
        if rec.equations.is_empty() || rec.problem.trim().is_empty() {
            report.malformed.push((lineno, "empty equations or problem".into()));
            continue;
        }
        let problem = tokenize_problem(&rec.problem);
        if problem.is_empty() {
            report.malformed.push((lineno, "problem has no tokens".into()));
            continue;
        }
        if problem.len() > max_problem_tokens {
            report.dropped_too_long += 1;
            continue;
        }
        let id = rec.id.clone().unwrap_or_else(|| format!("line-{}", lineno));
        match TrainingExample::new(id, &rec.equations, problem) {
            Ok(ex) => examples.push(ex),
            Err(e) => report.malformed.push((lineno, e.to_string())),
        }
    }
    report.kept = examples.len();
    let vocab = Vocabulary::build(examples.iter().map(|e| e.problem.iter()), min_freq);
    report.vocab_size = vocab.len() - RESERVED.len();
    let total_tokens: usize = examples.iter().map(|e| e.problem.len()).sum();
    let unk: usize = examples
        .iter()
        .flat_map(|e| e.problem.iter())
        .filter(|t| vocab.id(t) == UNK)
        .count();
    report.unk_rate = if total_tokens == 0 { 0.0 } else { unk as f64 / total_tokens as f64 };
    Ok((examples, report))
}

/// Deterministic shuffled split into (train, dev, test).
pub fn split_examples<R: Rng>(
    mut examples: Vec<TrainingExample>,
    dev_frac: f64,
    test_frac: f64,
    rng: &mut R,
) -> (Vec<TrainingExample>, Vec<TrainingExample>, Vec<TrainingExample>) {
    examples.shuffle(rng);
    let n = examples.len();
    let n_dev = ((n as f64) * dev_frac).round() as usize;
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_dev = n_dev.min(n);
    let n_test = n_test.min(n - n_dev);
    let test = examples.split_off(n - n_test);
    let dev = examples.split_off(n - n_test - n_dev);
    (examples, dev, test)
}

pub fn read_examples(path: &std::path::Path) -> Result<Vec<TrainingExample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), i + 1, e)))?;
        out.push(TrainingExample::from_record(rec)?);
    }
    Ok(out)
}

pub fn write_examples(path: &std::path::Path, examples: &[TrainingExample]) -> Result<()> {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(&e.to_record())?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
