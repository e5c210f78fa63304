use mathgen_tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::decoder::DecoderState;
use super::loss::argmax;
use super::Model;
use crate::equation::EquationSequence;
use crate::error::Result;
use crate::vocab::{EOS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    /// 1 is greedy.
    pub beam: usize,
    /// Sample `z` from the equation-side Gaussian with this seed instead of
    /// using its mean.
    pub sample_seed: Option<u64>,
    /// Overrides the predicted topic (0-based).
    pub topic: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 1,
            sample_seed: None,
            topic: None,
        }
    }
}

/// A decoded problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub tokens: Vec<String>,
    /// Equation token position a token was copied from, when its copy mass
    /// exceeded its generate mass.
    pub copied_from: Vec<Option<usize>>,
    pub log_prob: f64,
    /// 0-based topic whose memory row was used.
    pub topic: usize,
}

impl Generated {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone)]
struct Hyp {
    state: DecoderState,
    tokens: Vec<String>,
    copied_from: Vec<Option<usize>>,
    log_prob: f64,
    done: bool,
}

/// One scored continuation.
struct Candidate {
    surface: String,
    word_id: usize,
    prob: f64,
    copied_from: Option<usize>,
}

impl Model {
    /// Decodes a problem for an equation set. `z` comes from the equation-side Gaussian.
    pub fn generate(&self, seq: &EquationSequence, opts: &DecodeOptions) -> Result<Generated> {
        let ex = self.encode_equation_ids(seq);
        let mut tape = Tape::new();
        let mut b = self.bind(&mut tape)?;
        let enc = self.encode_equation(&mut tape, &b, &ex.eq_ids, &ex.eq_types, &ex.tpl_ids)?;
        let noise: Option<Vec<f64>> = opts.sample_seed.map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..self.config.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        });
        let post = self.posterior_latent(&mut tape, &b, enc.h_n, noise.as_deref())?;
        let topic = match opts.topic {
            Some(t) => t,
            None => {
                let lt = self.predict_topic(&mut tape, &b, post.z)?;
                argmax(tape.value(lt))
            }
        };
        let memory = self.memory_row(&mut tape, &b, topic)?;
        let state = self.init_decoder(&mut tape, &b, enc.h_n, post.z, memory)?;

        let width = opts.beam.max(1);
        let mut beams = vec![Hyp {
            state,
            tokens: Vec::new(),
            copied_from: Vec::new(),
            log_prob: 0.0,
            done: false,
        }];
        for _ in 0..self.config.max_decode_len {
            if beams.iter().all(|h| h.done) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for h in &beams {
                if h.done {
                    next.push(h.clone());
                    continue;
                }
                let (out, st) = self.decode_step(&mut tape, &mut b, &h.state, &enc, &ex.number_positions)?;
                let cands = self.candidates(&tape, &out, &ex);
                for c in top_candidates(cands, width) {
                    let mut nh = h.clone();
                    nh.state = st.clone();
                    nh.state.prev = c.word_id;
                    nh.log_prob += c.prob.ln();
                    if c.word_id == EOS && c.copied_from.is_none() {
                        nh.done = true;
                    } else {
                        nh.tokens.push(c.surface);
                        nh.copied_from.push(c.copied_from);
                    }
                    next.push(nh);
                }
            }
            // stable sort keeps earlier (parent-order) hypotheses first on ties
            next.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            next.truncate(width);
            beams = next;
        }
        let best = beams
            .into_iter()
            .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
            .expect("beam is nonempty");
        Ok(Generated {
            tokens: best.tokens,
            copied_from: best.copied_from,
            log_prob: best.log_prob,
            topic,
        })
    }

    /// Mixture mass per output surface. A copy slot whose surface is in the
    /// word vocabulary adds to that word; otherwise it is its own candidate.
    fn candidates(&self, tape: &Tape, out: &super::StepOutput, ex: &super::EncodedExample) -> Vec<Candidate> {
        let dist = super::OutputDistribution::from_step(tape, out);
        let mut cands: Vec<Candidate> = dist
            .gen
            .iter()
            .enumerate()
            .map(|(w, p)| Candidate {
                surface: self.word_vocab.token(w).to_string(),
                word_id: w,
                prob: dist.p_gen * p,
                copied_from: None,
            })
            .collect();
        let mut copy_mass = vec![0.0; cands.len()];
        let mut best_slot: Vec<Option<(f64, usize)>> = vec![None; cands.len()];
        for (k, p) in dist.copy.iter().enumerate() {
            let mass = (1.0 - dist.p_gen) * p;
            let surface = &ex.number_canon[k];
            let pos = ex.number_positions[k];
            let idx = match self.word_vocab.get(surface) {
                Some(w) => w,
                None => match cands.iter().position(|c| c.word_id == UNK && c.surface == *surface) {
                    Some(i) => i,
                    None => {
                        cands.push(Candidate {
                            surface: surface.clone(),
                            word_id: UNK,
                            prob: 0.0,
                            copied_from: None,
                        });
                        copy_mass.push(0.0);
                        best_slot.push(None);
                        cands.len() - 1
                    }
                },
            };
            cands[idx].prob += mass;
            copy_mass[idx] += mass;
            if best_slot[idx].map_or(true, |(m, _)| mass > m) {
                best_slot[idx] = Some((mass, pos));
            }
        }
        for (i, c) in cands.iter_mut().enumerate() {
            if copy_mass[i] > c.prob - copy_mass[i] {
                c.copied_from = best_slot[i].map(|(_, p)| p);
            }
        }
        cands
    }
}

/// The `n` most probable candidates, ties toward lower index.
fn top_candidates(mut cands: Vec<Candidate>, n: usize) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].prob.total_cmp(&cands[a].prob).then(a.cmp(&b)));
    order.truncate(n);
    let mut picked: Vec<Option<Candidate>> = cands.drain(..).map(Some).collect();
    order.into_iter().filter_map(|i| picked[i].take()).collect()
}
