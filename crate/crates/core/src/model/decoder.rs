use mathgen_tensor::{Tape, Var};

use super::encoder::EncoderOutput;
use super::{Bound, Model};
use crate::error::{Error, Result};
use crate::graph::paths::{aggregate_paths, bundle_paths};
use crate::nn::linear;
use crate::vocab::BOS;

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub s: Var,
    /// Working copy of the selected topic-memory row, `[K, d]`.
    pub memory: Var,
    pub prev: usize,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `log P_gen` over the word vocabulary.
    pub log_gen: Var,
    /// `log P_copy` over the equation number positions, if any.
    pub log_copy: Option<Var>,
    /// `(log p_gen, log (1 − p_gen))`; absent when copying is impossible (p_gen = 1).
    pub log_mix: Option<(Var, Var)>,
    /// Encoder attention weights `[n]`.
    pub attention: Var,
    pub topic_scores: Option<Var>,
}

/// Plain-value view of one step's output distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputDistribution {
    pub gen: Vec<f64>,
    pub copy: Vec<f64>,
    pub p_gen: f64,
}

impl OutputDistribution {
    pub fn from_step(tape: &Tape, out: &StepOutput) -> Self {
        let gen = tape.value(out.log_gen).iter().map(|v| v.exp()).collect();
        let copy = out.log_copy.map(|c| tape.value(c).iter().map(|v| v.exp()).collect()).unwrap_or_default();
        let p_gen = out.log_mix.map(|(g, _)| tape.scalar(g).exp()).unwrap_or(1.0);
        OutputDistribution { gen, copy, p_gen }
    }

    /// Mixture mass over vocabulary words followed by copy slots.
    pub fn mixture(&self) -> Vec<f64> {
        self.gen
            .iter()
            .map(|p| self.p_gen * p)
            .chain(self.copy.iter().map(|p| (1.0 - self.p_gen) * p))
            .collect()
    }
}

impl Model {
    /// `s_0 = [h_n; z; h_n ⊙ z] W + b`. The memory row becomes the step-wise working copy.
    pub fn init_decoder(&self, tape: &mut Tape, b: &Bound, h_n: Var, z: Var, memory_row: Var) -> Result<DecoderState> {
        let hz = tape.mul(h_n, z)?;
        let cat = tape.concat(&[h_n, z, hz])?;
        let s = linear(tape, cat, b.init.0, Some(b.init.1))?;
        Ok(DecoderState {
            s,
            memory: memory_row,
            prev: BOS,
            t: 0,
        })
    }

    /// Rows `p·K .. (p+1)·K` of the frozen memory block.
    pub fn memory_row(&self, tape: &mut Tape, b: &Bound, topic: usize) -> Result<Var> {
        let k = self.config.memory_slots;
        if topic >= self.config.num_topics {
            return Err(Error::Config(format!("topic {} outside 0..{}", topic, self.config.num_topics)));
        }
        Ok(tape.slice(b.memory, topic * k, (topic + 1) * k)?)
    }

    /// `score_j = softmax_j([s; c] W_t · C_j)`, `f(s) = s + (Σ_j score_j C_j) V`.
    pub fn topic_attend(&self, tape: &mut Tape, b: &Bound, s: Var, c: Var, memory: Var) -> Result<(Var, Var)> {
        let sc = tape.concat(&[s, c])?;
        let q = tape.matmul(sc, b.wt)?;
        let logits = tape.matmul(memory, q)?;
        let scores = tape.softmax(logits)?;
        let read = tape.matmul(scores, memory)?;
        let proj = tape.matmul(read, b.v)?;
        Ok((tape.add(s, proj)?, scores))
    }

    /// Gated slot update: `u = σ([s'; C_j] W_u + b_u)`,
    /// `C̃ = tanh([s'; C_j] W_c + b_c)`, `C_j ← u ⊙ C̃ + (1 − u) ⊙ C_j`.
    pub fn update_memory(&self, tape: &mut Tape, b: &Bound, s_prime: Var, memory: Var) -> Result<Var> {
        let d = self.config.dim;
        let half = |tape: &mut Tape, w: Var| -> Result<(Var, Var)> { Ok((tape.slice(w, 0, d)?, tape.slice(w, d, 2 * d)?)) };
        let (wu_s, wu_c) = half(tape, b.wu.0)?;
        let (wc_s, wc_c) = half(tape, b.wc.0)?;
        let su = linear(tape, s_prime, wu_s, Some(b.wu.1))?;
        let cu = tape.matmul(memory, wu_c)?;
        let u = tape.add_row_bias(cu, su)?;
        let u = tape.sigmoid(u)?;
        let sc = linear(tape, s_prime, wc_s, Some(b.wc.1))?;
        let cc = tape.matmul(memory, wc_c)?;
        let cand = tape.add_row_bias(cc, sc)?;
        let cand = tape.tanh(cand)?;
        // C + u ⊙ (C̃ − C)
        let diff = tape.sub(cand, memory)?;
        let step = tape.mul(u, diff)?;
        Ok(tape.add(memory, step)?)
    }

    /// Attention summary `g` of the word's two-hop paths; `None` when the
    /// word has no bundle or the graph is disabled.
    pub fn commonsense_summary(&self, tape: &mut Tape, b: &Bound, word: usize) -> Result<Option<(Var, Var)>> {
        let (Some(p), Some(nodes), Some(bundle)) = (b.paths, b.nodes, self.bundle(word)) else {
            return Ok(None);
        };
        let paths = bundle_paths(tape, &p, nodes, bundle, self.config.alpha)?.expect("bundle is nonempty");
        let e_src = tape.row(nodes, bundle.source)?;
        Ok(Some(aggregate_paths(tape, p.w_b, e_src, paths)?))
    }

    /// `GRU(e_w, g H)` with `g = 0` for words outside the graph. Cached per word on this tape.
    pub fn commonsense_embed(&self, tape: &mut Tape, b: &mut Bound, word: usize) -> Result<Var> {
        if let Some(v) = b.cs_cache.get(&word) {
            return Ok(*v);
        }
        if word >= self.word_vocab.len() {
            return Err(Error::UnknownToken(word));
        }
        let e_w = tape.row(b.dec_emb, word)?;
        let h = match self.commonsense_summary(tape, b, word)? {
            Some((g, _)) => tape.matmul(g, b.cs_h)?,
            None => tape.zeros(&[self.config.dim])?,
        };
        let out = b.cs_gru.step(tape, e_w, h)?;
        b.cs_cache.insert(word, out);
        Ok(out)
    }

    /// One decoding step. `numbers` are the equation positions eligible for copying.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        b: &mut Bound,
        state: &DecoderState,
        enc: &EncoderOutput,
        numbers: &[usize],
    ) -> Result<(StepOutput, DecoderState)> {
        if state.t >= self.config.max_decode_len {
            return Err(Error::MaxLength(self.config.max_decode_len));
        }
        let x = self.commonsense_embed(tape, b, state.prev)?;
        let s = b.dec_gru.step(tape, x, state.s)?;

        // bilinear attention over the fused encoder states
        let q = tape.matmul(s, b.att)?;
        let scores = tape.matmul(enc.states, q)?;
        let attention = tape.softmax(scores)?;
        let c = tape.matmul(attention, enc.states)?;

        let (s_prime, topic_scores, memory) = if self.config.use_topic_memory {
            let (sp, ts) = self.topic_attend(tape, b, s, c, state.memory)?;
            let mem = self.update_memory(tape, b, sp, state.memory)?;
            (sp, Some(ts), mem)
        } else {
            (s, None, state.memory)
        };

        let sc = tape.concat(&[s_prime, c])?;
        let hid = tape.matmul(sc, b.wvs)?;
        let hid = tape.tanh(hid)?;
        let logits = linear(tape, hid, b.wo.0, Some(b.wo.1))?;
        let log_gen = tape.log_softmax(logits)?;

        let (log_copy, log_mix) = if self.config.use_copy && !numbers.is_empty() {
            let copy_scores = tape.gather(scores, numbers)?;
            let log_copy = tape.log_softmax(copy_scores)?;
            let e_w = tape.row(b.dec_emb, state.prev)?;
            let feat = tape.concat(&[s_prime, c, e_w])?;
            let l = tape.matmul(feat, b.pgen.0)?;
            let bias = tape.pick(b.pgen.1, 0)?;
            let l = tape.add(l, bias)?;
            let neg = tape.scale(l, -1.0)?;
            (Some(log_copy), Some((tape.log_sigmoid(l)?, tape.log_sigmoid(neg)?)))
        } else {
            (None, None)
        };

        let next = DecoderState {
            s: s_prime,
            memory,
            prev: state.prev,
            t: state.t + 1,
        };
        Ok((
            StepOutput {
                log_gen,
                log_copy,
                log_mix,
                attention,
                topic_scores,
            },
            next,
        ))
    }
}
