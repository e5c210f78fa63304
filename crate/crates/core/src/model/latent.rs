use mathgen_tensor::{Tape, Var};

use super::{Bound, Model};
use crate::error::{Error, Result};
use crate::nn::linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    /// Equation side.
    Posterior,
    /// Problem side.
    Prior,
}

/// Diagonal Gaussian with `σ = exp(log_sigma)` and a sample `z`.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub source: LatentSource,
}

/// `KL(N(mu_p, σ_p²) ‖ N(mu_q, σ_q²))` for diagonal Gaussians given log-stds.
pub fn kl_diag_gaussian(mu_p: &[f64], ls_p: &[f64], mu_q: &[f64], ls_q: &[f64]) -> f64 {
    (0..mu_p.len())
        .map(|i| {
            let d = mu_p[i] - mu_q[i];
            ls_q[i] - ls_p[i] + ((2.0 * ls_p[i]).exp() + d * d) / (2.0 * (2.0 * ls_q[i]).exp()) - 0.5
        })
        .sum()
}

impl Model {
    /// `[μ, log σ] = h W + b`, `z = μ + r ⊙ σ`. With `noise == None`, `z = μ`.
    fn gaussian(&self, tape: &mut Tape, h: Var, wb: (Var, Var), noise: Option<&[f64]>, source: LatentSource) -> Result<LatentState> {
        let d = self.config.dim;
        let out = linear(tape, h, wb.0, Some(wb.1))?;
        let mu = tape.slice(out, 0, d)?;
        let log_sigma = tape.slice(out, d, 2 * d)?;
        let z = match noise {
            None => mu,
            Some(r) => {
                if r.len() != d {
                    return Err(Error::DimensionMismatch(format!("noise length {} vs dim {}", r.len(), d)));
                }
                let r = tape.constant_vec(r.to_vec())?;
                let sigma = tape.exp(log_sigma)?;
                let rs = tape.mul(r, sigma)?;
                tape.add(mu, rs)?
            }
        };
        Ok(LatentState { mu, log_sigma, z, source })
    }

    /// Equation-side Gaussian from the final fused encoder state.
    pub fn posterior_latent(&self, tape: &mut Tape, b: &Bound, h_n: Var, noise: Option<&[f64]>) -> Result<LatentState> {
        self.gaussian(tape, h_n, b.post, noise, LatentSource::Posterior)
    }

    /// Problem-side Gaussian from the problem summary `q`.
    pub fn prior_latent(&self, tape: &mut Tape, b: &Bound, q: Var, noise: Option<&[f64]>) -> Result<LatentState> {
        self.gaussian(tape, q, b.prior, noise, LatentSource::Prior)
    }

    /// `KL(prior ‖ posterior) = Σ [ls_x − ls_y + (σ_y² + (μ_y − μ_x)²) / (2σ_x²) − ½]`
    /// with `y` the problem side and `x` the equation side.
    pub fn kl_divergence(&self, tape: &mut Tape, prior: &LatentState, posterior: &LatentState) -> Result<Var> {
        let (y, x) = (prior, posterior);
        let n = tape.shape(y.mu).iter().product::<usize>();
        if tape.shape(x.mu) != tape.shape(y.mu) {
            return Err(Error::DimensionMismatch("latent sizes differ".into()));
        }
        let t1 = tape.sub(x.log_sigma, y.log_sigma)?;
        let two_ly = tape.scale(y.log_sigma, 2.0)?;
        let var_y = tape.exp(two_ly)?;
        let diff = tape.sub(y.mu, x.mu)?;
        let d2 = tape.mul(diff, diff)?;
        let num = tape.add(var_y, d2)?;
        let neg_two_lx = tape.scale(x.log_sigma, -2.0)?;
        let inv_var_x = tape.exp(neg_two_lx)?;
        let ratio = tape.mul(num, inv_var_x)?;
        let ratio = tape.scale(ratio, 0.5)?;
        let terms = tape.add(t1, ratio)?;
        let s = tape.sum(terms)?;
        Ok(tape.add_const(s, -0.5 * n as f64)?)
    }

    /// Log-probabilities `log softmax(z W_z + b_z)` over topics.
    pub fn predict_topic(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
        let logits = linear(tape, z, b.topic.0, Some(b.topic.1))?;
        Ok(tape.log_softmax(logits)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_diag_gaussian(&[0.3, -1.0], &[0.2, -0.4], &[0.3, -1.0], &[0.2, -0.4]), 0.0);
        assert!((kl_diag_gaussian(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
    }
}
