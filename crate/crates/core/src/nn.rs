//! Layer building blocks on top of the tape. Row-vector convention
//! throughout: a linear map is `x W + b` with `W` shaped `[in, out]`.

use mathgen_tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// `x W + b` for a vector `x` or the rows of a matrix `x`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        None => y,
        Some(b) if tape.shape(y).len() == 2 => tape.add_row_bias(y, b)?,
        Some(b) => tape.add(y, b)?,
    })
}

/// Stacks the rows of several matrices (or vectors, as single rows).
pub fn vcat(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 && tape.shape(parts[0]).len() == 2 {
        return Ok(parts[0]);
    }
    let mut ts = Vec::with_capacity(parts.len());
    for &p in parts {
        let m = if tape.shape(p).len() == 1 {
            let n = tape.shape(p)[0];
            tape.reshape(p, &[1, n])?
        } else {
            p
        };
        ts.push(tape.transpose(m)?);
    }
    let c = tape.concat(&ts)?;
    Ok(tape.transpose(c)?)
}

/// Glorot-uniform initialized `[rows, cols]` trainable matrix.
pub fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

pub fn init_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).unwrap();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

pub fn init_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

/// Handles to a GRU cell's parameters: input weights `w` `[in, 3d]`,
/// recurrent weights `u` `[d, 3d]`, biases `b` and `bh` `[3d]`. Gate order is
/// reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub bh: Var,
    pub hidden: usize,
}

impl Gru {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
        store.insert(format!("{prefix}.w"), init_matrix(rng, input, 3 * hidden));
        store.insert(format!("{prefix}.u"), init_matrix(rng, hidden, 3 * hidden));
        store.insert(format!("{prefix}.b"), init_zeros(&[3 * hidden]));
        store.insert(format!("{prefix}.bh"), init_zeros(&[3 * hidden]));
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = tape.param(store, &format!("{prefix}.w"))?;
        let u = tape.param(store, &format!("{prefix}.u"))?;
        let b = tape.param(store, &format!("{prefix}.b"))?;
        let bh = tape.param(store, &format!("{prefix}.bh"))?;
        let hidden = tape.shape(u)[0];
        Ok(Gru { w, u, b, bh, hidden })
    }

    /// Input projection `x W + b` for every row of `xs`, so the recurrence
    /// only has to add the hidden-state part.
    pub fn project_inputs(&self, tape: &mut Tape, xs: Var) -> Result<Var> {
        linear(tape, xs, self.w, Some(self.b))
    }

    /// One step given the already projected input `xp` (`[3d]`).
    pub fn step_projected(&self, tape: &mut Tape, xp: Var, h: Var) -> Result<Var> {
        let d = self.hidden;
        let hp = linear(tape, h, self.u, Some(self.bh))?;
        let xr = tape.slice(xp, 0, d)?;
        let xz = tape.slice(xp, d, 2 * d)?;
        let xn = tape.slice(xp, 2 * d, 3 * d)?;
        let hr = tape.slice(hp, 0, d)?;
        let hz = tape.slice(hp, d, 2 * d)?;
        let hn = tape.slice(hp, 2 * d, 3 * d)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let rh = tape.mul(r, hn)?;
        let n = tape.add(xn, rh)?;
        let n = tape.tanh(n)?;
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(n, zd)?)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let xp = self.project_inputs(tape, x)?;
        self.step_projected(tape, xp, h)
    }

    /// Runs over the rows of `xs` from a zero state, forward or reversed.
    /// Returns the hidden states in input order.
    pub fn run(&self, tape: &mut Tape, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let n = tape.shape(xs)[0];
        let proj = self.project_inputs(tape, xs)?;
        let mut h = tape.zeros(&[self.hidden])?;
        let mut out = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xp = tape.row(proj, t)?;
            h = self.step_projected(tape, xp, h)?;
            out[t] = h;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gru_matches_hand_computation() {
        // input 1, hidden 1
        let mut store = ParamStore::new();
        store.insert("g.w", Tensor::matrix(1, 3, vec![0.5, -0.3, 0.8]).unwrap());
        store.insert("g.u", Tensor::matrix(1, 3, vec![0.2, 0.4, -0.6]).unwrap());
        store.insert("g.b", Tensor::vector(vec![0.1, 0.0, -0.1]));
        store.insert("g.bh", Tensor::vector(vec![0.0, 0.2, 0.3]));
        let mut tape = Tape::new();
        let gru = Gru::bind(&mut tape, &store, "g").unwrap();
        let x = tape.constant_vec(vec![1.5]).unwrap();
        let h = tape.constant_vec(vec![-0.7]).unwrap();
        let out = gru.step(&mut tape, x, h).unwrap();

        let (x, h) = (1.5, -0.7);
        let r = sig(0.5 * x + 0.1 + 0.2 * h);
        let z = sig(-0.3 * x + 0.4 * h + 0.2);
        let n = (0.8 * x - 0.1 + r * (-0.6 * h + 0.3)).tanh();
        let expect = (1.0 - z) * n + z * h;
        assert!((tape.value(out)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn vcat_stacks_rows() {
        let mut tape = Tape::new();
        let a = tape.constant_matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant_vec(vec![5.0, 6.0]).unwrap();
        let c = vcat(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
