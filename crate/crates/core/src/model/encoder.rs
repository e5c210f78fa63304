use mathgen_tensor::{Tape, Var};

use super::{Bound, Model};
use crate::error::{Error, Result};
use crate::nn::linear;
use crate::vocab::PAD;

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Fused states `[n, d]`.
    pub states: Var,
    pub h_n: Var,
    /// Token-stream BiGRU states `[n, d]`.
    pub h_a: Var,
    /// Template-stream BiGRU states `[n, d]`.
    pub h_b: Var,
    pub len: usize,
}

/// Forward and backward GRU over the rows of `xs`, states summed per position.
fn bigru(tape: &mut Tape, grus: &(crate::nn::Gru, crate::nn::Gru), xs: Var) -> Result<Var> {
    let fw = grus.0.run(tape, xs, false)?;
    let bw = grus.1.run(tape, xs, true)?;
    let fw = tape.stack(&fw)?;
    let bw = tape.stack(&bw)?;
    Ok(tape.add(fw, bw)?)
}

impl Model {
    fn check_ids(&self, ids: &[usize], limit: usize) -> Result<()> {
        match ids.iter().find(|&&i| i >= limit) {
            Some(&bad) => Err(Error::UnknownToken(bad)),
            None => Ok(()),
        }
    }

    /// Template-aware encoding: token stream `E_token + E_type` and template
    /// stream through separate BiGRUs, fused as
    /// `(h_a W1 + b1) ⊙ σ(h_b W2 + b2)`.
    pub fn encode_equation(&self, tape: &mut Tape, b: &Bound, ids: &[usize], types: &[usize], template: &[usize]) -> Result<EncoderOutput> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::EmptyEquation);
        }
        if types.len() != n || template.len() != n {
            return Err(Error::DimensionMismatch(format!("{} ids, {} types, {} template ids", n, types.len(), template.len())));
        }
        self.check_ids(ids, self.eq_vocab.len())?;
        self.check_ids(template, self.eq_vocab.len())?;
        self.check_ids(types, 3)?;
        let te = tape.gather(b.enc_type, types)?;
        let xa = tape.gather(b.enc_emb, ids)?;
        let xa = tape.add(xa, te)?;
        let xb = tape.gather(b.enc_emb, template)?;
        let xb = tape.add(xb, te)?;
        let h_a = bigru(tape, &b.gru_a, xa)?;
        let h_b = bigru(tape, &b.gru_b, xb)?;
        let lin = linear(tape, h_a, b.mlp1.0, Some(b.mlp1.1))?;
        let gate = linear(tape, h_b, b.mlp2.0, Some(b.mlp2.1))?;
        let gate = tape.sigmoid(gate)?;
        let states = tape.mul(lin, gate)?;
        let h_n = tape.row(states, n - 1)?;
        Ok(EncoderOutput {
            states,
            h_n,
            h_a,
            h_b,
            len: n,
        })
    }

    /// CNN problem encoder: one convolution per kernel width, max-pooled over
    /// time, then `q = tanh([h_1; ...; h_F] W_q)`. Inputs shorter than the
    /// widest kernel are right-padded with PAD.
    pub fn encode_problem(&self, tape: &mut Tape, b: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Data("empty problem".into()));
        }
        self.check_ids(ids, self.word_vocab.len())?;
        let widest = *self.config.kernel_widths.iter().max().expect("validated nonempty");
        let mut padded = ids.to_vec();
        padded.resize(ids.len().max(widest), PAD);
        let x = tape.gather(b.dec_emb, &padded)?;
        let mut pooled = Vec::with_capacity(b.convs.len());
        for &(k, bias) in &b.convs {
            let c = tape.conv1d(x, k, bias)?;
            pooled.push(tape.max_pool_time(c)?);
        }
        let cat = tape.concat(&pooled)?;
        let q = tape.matmul(cat, b.wq)?;
        Ok(tape.tanh(q)?)
    }
}
