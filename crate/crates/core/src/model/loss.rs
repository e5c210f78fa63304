use mathgen_tensor::{Tape, Var};

use super::{Bound, Model};
use crate::dataset::TrainingExample;
use crate::equation::{canonical_number, EquationSequence};
use crate::error::{Error, Result};
use crate::vocab::{EOS, UNK};

/// One decoder target position.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTarget {
    /// Id fed back as the next step's previous word (UNK for OOV words).
    pub word_id: usize,
    /// Whether the surface is outside the word vocabulary.
    pub oov: bool,
    /// Indices into `number_positions` whose canonical value equals the target's.
    pub copy_slots: Vec<usize>,
}

/// A training example mapped to ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub eq_ids: Vec<usize>,
    pub eq_types: Vec<usize>,
    pub tpl_ids: Vec<usize>,
    pub number_positions: Vec<usize>,
    pub number_canon: Vec<String>,
    pub number_surfaces: Vec<String>,
    /// Problem tokens followed by EOS.
    pub targets: Vec<StepTarget>,
    pub problem_ids: Vec<usize>,
    /// 0-based gold topic.
    pub topic: Option<usize>,
}

/// Loss components of a batch. `nll`, `kl` and `topic_ce` are sums over the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
    pub topic_ce: Var,
    pub tokens: usize,
    pub examples: usize,
}

impl Model {
    /// Equation-side ids only; used at inference.
    pub fn encode_equation_ids(&self, seq: &EquationSequence) -> EncodedExample {
        let number_positions = seq.number_positions();
        EncodedExample {
            eq_ids: self.eq_vocab.ids(&seq.surfaces()),
            eq_types: seq.tokens.iter().map(|t| t.kind.index()).collect(),
            tpl_ids: self.eq_vocab.ids(&seq.template),
            number_canon: number_positions
                .iter()
                .map(|&p| seq.tokens[p].canonical().unwrap_or_default().to_string())
                .collect(),
            number_surfaces: number_positions.iter().map(|&p| seq.tokens[p].surface.clone()).collect(),
            number_positions,
            targets: Vec::new(),
            problem_ids: Vec::new(),
            topic: None,
        }
    }

    pub fn encode_example(&self, ex: &TrainingExample) -> Result<EncodedExample> {
        if ex.problem.is_empty() {
            return Err(Error::Data(format!("example {}: empty problem", ex.id)));
        }
        let mut enc = self.encode_equation_ids(&ex.equations);
        enc.problem_ids = self.word_vocab.ids(&ex.problem);
        enc.targets = ex
            .problem
            .iter()
            .map(|tok| {
                let id = self.word_vocab.get(tok);
                let canon = canonical_number(tok);
                let copy_slots = match &canon {
                    Some(c) => enc.number_canon.iter().enumerate().filter(|(_, n)| *n == c).map(|(k, _)| k).collect(),
                    None => Vec::new(),
                };
                StepTarget {
                    word_id: id.unwrap_or(UNK),
                    oov: id.is_none(),
                    copy_slots,
                }
            })
            .chain(std::iter::once(StepTarget {
                word_id: EOS,
                oov: false,
                copy_slots: Vec::new(),
            }))
            .collect();
        if enc.targets.len() > self.config.max_decode_len {
            return Err(Error::MaxLength(self.config.max_decode_len));
        }
        enc.topic = match ex.topic_id {
            Some(t) if t >= 1 && t <= self.config.num_topics => Some(t - 1),
            Some(t) => return Err(Error::Data(format!("example {}: topic {} outside 1..={}", ex.id, t, self.config.num_topics))),
            None => None,
        };
        Ok(enc)
    }

    /// `(nll, kl, topic_ce)` of one example under teacher forcing. The
    /// decoder runs from the problem-side latent; `problem_ids` may be a
    /// corrupted version of the example's problem.
    pub fn example_terms(
        &self,
        tape: &mut Tape,
        b: &mut Bound,
        ex: &EncodedExample,
        problem_ids: &[usize],
        noise: Option<&[f64]>,
    ) -> Result<(Var, Var, Var)> {
        let enc = self.encode_equation(tape, b, &ex.eq_ids, &ex.eq_types, &ex.tpl_ids)?;
        let post = self.posterior_latent(tape, b, enc.h_n, None)?;
        let q = self.encode_problem(tape, b, problem_ids)?;
        let prior = self.prior_latent(tape, b, q, noise)?;
        let kl = self.kl_divergence(tape, &prior, &post)?;

        let log_topic = self.predict_topic(tape, b, prior.z)?;
        let (topic, topic_ce) = match ex.topic {
            Some(t) => {
                let lp = tape.pick(log_topic, t)?;
                (t, tape.scale(lp, -1.0)?)
            }
            None => (argmax(tape.value(log_topic)), tape.zeros(&[])?),
        };

        let memory = self.memory_row(tape, b, topic)?;
        let mut state = self.init_decoder(tape, b, enc.h_n, prior.z, memory)?;
        let mut step_lls = Vec::with_capacity(ex.targets.len());
        for target in &ex.targets {
            let (out, next) = self.decode_step(tape, b, &state, &enc, &ex.number_positions)?;
            step_lls.push(self.target_log_prob(tape, &out, target)?);
            state = next;
            state.prev = target.word_id;
        }
        let ll = tape.concat(&step_lls)?;
        let ll = tape.sum(ll)?;
        let nll = tape.scale(ll, -1.0)?;
        Ok((nll, kl, topic_ce))
    }

    /// `log P(target)` under the generate/copy mixture. An OOV number that can
    /// be copied is only reachable through its copy slots; other OOV words
    /// are scored as UNK.
    pub fn target_log_prob(&self, tape: &mut Tape, out: &super::StepOutput, target: &StepTarget) -> Result<Var> {
        let mut terms = Vec::new();
        match (out.log_copy, out.log_mix) {
            (Some(log_copy), Some((log_g, log_c))) if !target.copy_slots.is_empty() => {
                if !target.oov {
                    let g = tape.pick(out.log_gen, target.word_id)?;
                    terms.push(tape.add(g, log_g)?);
                }
                for &k in &target.copy_slots {
                    let c = tape.pick(log_copy, k)?;
                    terms.push(tape.add(c, log_c)?);
                }
            }
            (_, Some((log_g, _))) => {
                let g = tape.pick(out.log_gen, target.word_id)?;
                terms.push(tape.add(g, log_g)?);
            }
            (_, None) => terms.push(tape.pick(out.log_gen, target.word_id)?),
        }
        if terms.len() == 1 {
            return Ok(terms[0]);
        }
        let v = tape.concat(&terms)?;
        Ok(tape.logsumexp(v)?)
    }

    /// `mean_b [NLL_b + anneal · KL_b + topic_weight · CE_b]`.
    /// `problems[i]` is the (possibly corrupted) problem fed to the prior for
    /// `batch[i]`, `noise[i]` its reparameterization draw.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        b: &mut Bound,
        batch: &[EncodedExample],
        problems: &[Vec<usize>],
        noise: &[Option<Vec<f64>>],
        anneal: f64,
        topic_weight: f64,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if problems.len() != batch.len() || noise.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} examples, {} problems, {} noise draws",
                batch.len(),
                problems.len(),
                noise.len()
            )));
        }
        let (mut nlls, mut kls, mut ces) = (Vec::new(), Vec::new(), Vec::new());
        for ((ex, p), r) in batch.iter().zip(problems).zip(noise) {
            let (nll, kl, ce) = self.example_terms(tape, b, ex, p, r.as_deref())?;
            nlls.push(nll);
            kls.push(kl);
            ces.push(ce);
        }
        let sum = |tape: &mut Tape, xs: &[Var]| -> Result<Var> {
            let v = tape.concat(xs)?;
            Ok(tape.sum(v)?)
        };
        let nll = sum(tape, &nlls)?;
        let kl = sum(tape, &kls)?;
        let topic_ce = sum(tape, &ces)?;
        let wkl = tape.scale(kl, anneal)?;
        let wce = tape.scale(topic_ce, topic_weight)?;
        let total = tape.add(nll, wkl)?;
        let total = tape.add(total, wce)?;
        let total = tape.scale(total, 1.0 / batch.len() as f64)?;
        Ok(LossParts {
            total,
            nll,
            kl,
            topic_ce,
            tokens: batch.iter().map(|e| e.targets.len()).sum(),
            examples: batch.len(),
        })
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
