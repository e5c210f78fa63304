//! Corpus metrics: BLEU-2, ROUGE-L, Dist-n and number recall.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::equation::canonical_number;

pub const ROUGE_BETA: f64 = 1.2;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Vec<Vec<&str>> {
    if tokens.len() < n || n == 0 {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.iter().map(|t| t.as_ref()).collect()).collect()
}

fn counts<'a>(grams: &[Vec<&'a str>]) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    for g in grams {
        *m.entry(g.clone()).or_insert(0) += 1;
    }
    m
}

/// Clipped matches and candidate n-gram total for one pair.
fn clipped<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = counts(&ngrams(reference, n));
    let matched = counts(&c).iter().map(|(g, k)| (*k).min(*r.get(g).unwrap_or(&0))).sum();
    (matched, c.len())
}

fn bleu_from(matches: [usize; 2], totals: [usize; 2], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || totals.iter().zip(&matches).any(|(t, m)| *t == 0 || *m == 0) {
        return 0.0;
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    let log_p: f64 = (0..2).map(|i| 0.5 * (matches[i] as f64 / totals[i] as f64).ln()).sum();
    bp * log_p.exp()
}

/// Corpus BLEU with uniform weights on unigram and bigram modified
/// precision and a corpus brevity penalty. A precision with no candidate
/// n-grams counts as zero.
pub fn bleu2<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    let (mut m, mut t) = ([0; 2], [0; 2]);
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=2 {
            let (a, b) = clipped(c, r, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
        c_len += c.len();
        r_len += r.len();
    }
    bleu_from(m, t, c_len, r_len)
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair with recall weight `beta`.
pub fn rouge_l_pair<S: AsRef<str>>(cand: &[S], reference: &[S], beta: f64) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (r, p) = (l / reference.len() as f64, l / cand.len() as f64);
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Mean per-pair ROUGE-L F with `β = 1.2`.
pub fn rouge_l<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let s: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r, ROUGE_BETA)).sum();
    s / candidates.len() as f64
}

/// Distinct n-grams over total n-grams, pooled over all candidates.
pub fn dist_n<S: AsRef<str>>(candidates: &[Vec<S>], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0;
    for c in candidates {
        for g in ngrams(c, n) {
            total += 1;
            seen.insert(g);
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Canonical number tokens of a token list.
pub fn numbers_in<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().filter_map(|t| canonical_number(t.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberBasis {
    /// Numbers of the reference problem.
    #[default]
    Reference,
    /// Numbers of the input equations.
    Equation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberRecall {
    pub value: f64,
    pub found: usize,
    pub total: usize,
    /// False when no example has any number to recall; `value` is then 0.
    pub defined: bool,
}

/// Micro-averaged fraction of basis number tokens whose value appears in
/// the candidate. `basis[i]` lists the numbers to look for in `candidates[i]`.
pub fn number_recall<S: AsRef<str>>(candidates: &[Vec<S>], basis: &[Vec<String>]) -> NumberRecall {
    let (mut found, mut total) = (0, 0);
    for (c, nums) in candidates.iter().zip(basis) {
        let have: HashSet<String> = numbers_in(c).into_iter().collect();
        total += nums.len();
        found += nums.iter().filter(|n| have.contains(*n)).count();
    }
    NumberRecall {
        value: if total == 0 { 0.0 } else { found as f64 / total as f64 },
        found,
        total,
        defined: total > 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub numbers_found: usize,
    pub numbers_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu2: f64,
    pub rouge_l: f64,
    pub rouge_beta: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub number_recall: f64,
    pub number_recall_defined: bool,
    pub number_basis: NumberBasis,
    pub examples: Vec<ExampleMetrics>,
}

/// One scored pair: id, candidate and reference tokens, and the numbers of
/// its equations (used with [`NumberBasis::Equation`]).
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub candidate: &'a [String],
    pub reference: &'a [String],
    pub equation_numbers: &'a [String],
}

pub fn evaluate(items: &[EvalItem<'_>], basis: NumberBasis) -> MetricReport {
    let cands: Vec<Vec<String>> = items.iter().map(|i| i.candidate.to_vec()).collect();
    let refs: Vec<Vec<String>> = items.iter().map(|i| i.reference.to_vec()).collect();
    let nums: Vec<Vec<String>> = items
        .iter()
        .map(|i| match basis {
            NumberBasis::Reference => numbers_in(i.reference),
            NumberBasis::Equation => i.equation_numbers.to_vec(),
        })
        .collect();
    let nr = number_recall(&cands, &nums);
    let examples = items
        .iter()
        .zip(&nums)
        .map(|(it, n)| {
            let one = number_recall(&[it.candidate.to_vec()], std::slice::from_ref(n));
            ExampleMetrics {
                id: it.id.to_string(),
                bleu2: bleu2(&[it.candidate.to_vec()], &[it.reference.to_vec()]),
                rouge_l: rouge_l_pair(it.candidate, it.reference, ROUGE_BETA),
                numbers_found: one.found,
                numbers_total: one.total,
            }
        })
        .collect();
    MetricReport {
        bleu2: bleu2(&cands, &refs),
        rouge_l: rouge_l(&cands, &refs),
        rouge_beta: ROUGE_BETA,
        dist1: dist_n(&cands, 1),
        dist2: dist_n(&cands, 2),
        number_recall: nr.value,
        number_recall_defined: nr.defined,
        number_basis: basis,
        examples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_hand_case() {
        let b = bleu2(&[toks("the cat sat")], &[toks("the cat sat down")]);
        assert!((b - (-1.0f64 / 3.0).exp()).abs() < 1e-6);
        assert_eq!(bleu2(&[toks("a b c")], &[toks("a b c")]), 1.0);
        assert_eq!(bleu2(&[toks("x y")], &[toks("a b")]), 0.0);
        assert_eq!(bleu2(&[vec![]], &[toks("a b")]), 0.0);
    }

    #[test]
    fn rouge_hand_case() {
        assert!((rouge_l(&[toks("a b c d")], &[toks("a c b d")]) - 0.75).abs() < 1e-6);
        assert_eq!(rouge_l(&[toks("a b")], &[toks("a b")]), 1.0);
        assert_eq!(rouge_l(&[toks("a b")], &[toks("c d")]), 0.0);
        assert_eq!(rouge_l_pair::<String>(&[], &[], ROUGE_BETA), 0.0);
    }

    #[test]
    fn dist_cases() {
        assert_eq!(dist_n(&[toks("a a a")], 1), 1.0 / 3.0);
        assert_eq!(dist_n(&[toks("a b"), toks("a b")], 2), 0.5);
        assert_eq!(dist_n(&[toks("a b c")], 1), 1.0);
        assert_eq!(dist_n(&[toks("a")], 2), 0.0);
    }

    #[test]
    fn number_recall_cases() {
        let refs = vec![vec!["800".to_string(), "4".into(), "2".into()]];
        let r = number_recall(&[toks("it went 800 miles in 4.0 hours")], &refs);
        assert!((r.value - 2.0 / 3.0).abs() < 1e-12);
        let none = number_recall(&[toks("a b")], &[vec![]]);
        assert!(!none.defined);
        assert_eq!(none.value, 0.0);
    }
}
