//! Path vectors over a two-hop bundle and their attention summary.
//!
//! All functions accept single vectors or row-stacked batches. `U e` in the
//! two-hop formula is computed as `e U` under the row-vector convention.

use mathgen_tensor::{ParamStore, Tape, Var};

use super::PathBundle;
use crate::error::{Error, Result};
use crate::nn::{linear, vcat};

pub const DEFAULT_ALPHA: f64 = 0.7;

/// Handles to the path parameters: `w_g` `[2d, d]`, `b_g` `[d]`, `u` `[d, d]`
/// and the attention bilinear form `w_b` `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct PathParams {
    pub w_g: Var,
    pub b_g: Var,
    pub u: Var,
    pub w_b: Var,
}

impl PathParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(PathParams {
            w_g: tape.param(store, &format!("{prefix}.w_g"))?,
            b_g: tape.param(store, &format!("{prefix}.b_g"))?,
            u: tape.param(store, &format!("{prefix}.u"))?,
            w_b: tape.param(store, &format!("{prefix}.w_b"))?,
        })
    }
}

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// `tanh(W_g [e_i; e_j] + b_g)`.
pub fn path_repr(tape: &mut Tape, p: &PathParams, e_i: Var, e_j: Var) -> Result<Var> {
    check_same(tape, e_i, e_j)?;
    let cat = tape.concat(&[e_i, e_j])?;
    let y = linear(tape, cat, p.w_g, Some(p.b_g))?;
    Ok(tape.tanh(y)?)
}

/// `α path_repr(e_i, e_j) + (1 − α) σ(e_ik ⊙ U e_kj)`.
pub fn two_hop_repr(tape: &mut Tape, p: &PathParams, e_ik: Var, e_kj: Var, e_i: Var, e_j: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", alpha)));
    }
    check_same(tape, e_ik, e_kj)?;
    let direct = path_repr(tape, p, e_i, e_j)?;
    let ue = tape.matmul(e_kj, p.u)?;
    let prod = tape.mul(e_ik, ue)?;
    let indirect = tape.sigmoid(prod)?;
    if alpha == 1.0 {
        return Ok(direct);
    }
    let a = tape.scale(direct, alpha)?;
    let b = tape.scale(indirect, 1.0 - alpha)?;
    Ok(tape.add(a, b)?)
}

/// Attention over path vectors (rows of `paths`):
/// `β ∝ exp(e_source W_b e_j)`, `g = Σ β_j e_j`. Returns `(g, β)`.
pub fn aggregate_paths(tape: &mut Tape, w_b: Var, e_source: Var, paths: Var) -> Result<(Var, Var)> {
    let q = tape.matmul(e_source, w_b)?;
    let scores = tape.matmul(paths, q)?;
    let beta = tape.softmax(scores)?;
    let g = tape.matmul(beta, paths)?;
    Ok((g, beta))
}

/// All path vectors of a bundle, first-hop rows then second-hop rows.
/// `nodes` is the `[N, d]` node embedding table. `None` for an empty bundle.
pub fn bundle_paths(tape: &mut Tape, p: &PathParams, nodes: Var, bundle: &PathBundle, alpha: f64) -> Result<Option<Var>> {
    if bundle.is_empty() {
        return Ok(None);
    }
    let mut parts = Vec::new();
    if !bundle.first_hop.is_empty() {
        let src = tape.gather(nodes, &vec![bundle.source; bundle.first_hop.len()])?;
        let dst = tape.gather(nodes, &bundle.first_hop)?;
        parts.push(path_repr(tape, p, src, dst)?);
    }
    if !bundle.second_hop.is_empty() {
        let m = bundle.second_hop.len();
        let src = tape.gather(nodes, &vec![bundle.source; m])?;
        let js: Vec<usize> = bundle.second_hop.iter().map(|x| x.0).collect();
        let ks: Vec<usize> = bundle.second_hop.iter().map(|x| x.1).collect();
        let e_j = tape.gather(nodes, &js)?;
        let e_k = tape.gather(nodes, &ks)?;
        let e_ik = path_repr(tape, p, src, e_k)?;
        let e_kj = path_repr(tape, p, e_k, e_j)?;
        parts.push(two_hop_repr(tape, p, e_ik, e_kj, src, e_j, alpha)?);
    }
    Ok(Some(vcat(tape, &parts)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mathgen_tensor::Tensor;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn store2() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p.w_g", Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.1, 0.0, 0.3]).unwrap());
        s.insert("p.b_g", Tensor::vector(vec![0.05, -0.05]));
        s.insert("p.u", Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap());
        s.insert("p.w_b", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        s
    }

    fn hand_path(ei: [f64; 2], ej: [f64; 2]) -> [f64; 2] {
        let x = [ei[0], ei[1], ej[0], ej[1]];
        let w = [[0.1, 0.2], [-0.3, 0.4], [0.5, -0.1], [0.0, 0.3]];
        let b = [0.05, -0.05];
        let mut out = [0.0; 2];
        for c in 0..2 {
            out[c] = ((0..4).map(|r| x[r] * w[r][c]).sum::<f64>() + b[c]).tanh();
        }
        out
    }

    #[test]
    fn zero_inputs_give_zero_path() {
        let mut s = store2();
        s.insert("p.b_g", Tensor::vector(vec![0.0, 0.0]));
        let mut t = Tape::new();
        let p = PathParams::bind(&mut t, &s, "p").unwrap();
        let z = t.constant_vec(vec![0.0, 0.0]).unwrap();
        let out = path_repr(&mut t, &p, z, z).unwrap();
        assert_eq!(t.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn path_and_two_hop_match_hand_values() {
        let s = store2();
        let mut t = Tape::new();
        let p = PathParams::bind(&mut t, &s, "p").unwrap();
        let (ei, ej, ek) = ([0.3, -0.2], [1.0, 0.5], [-0.4, 0.9]);
        let vi = t.constant_vec(ei.to_vec()).unwrap();
        let vj = t.constant_vec(ej.to_vec()).unwrap();
        let vk = t.constant_vec(ek.to_vec()).unwrap();
        let got = path_repr(&mut t, &p, vi, vj).unwrap();
        let want = hand_path(ei, ej);
        for c in 0..2 {
            assert!((t.value(got)[c] - want[c]).abs() < 1e-12);
        }

        let e_ik = path_repr(&mut t, &p, vi, vk).unwrap();
        let e_kj = path_repr(&mut t, &p, vk, vj).unwrap();
        let two = two_hop_repr(&mut t, &p, e_ik, e_kj, vi, vj, 0.7).unwrap();
        let (hik, hkj) = (hand_path(ei, ek), hand_path(ek, ej));
        // e U with U = [[1, .5], [-.5, 2]]
        let ue = [hkj[0] * 1.0 + hkj[1] * -0.5, hkj[0] * 0.5 + hkj[1] * 2.0];
        for c in 0..2 {
            let expect = 0.7 * want[c] + 0.3 * sig(hik[c] * ue[c]);
            assert!((t.value(two)[c] - expect).abs() < 1e-12);
        }
        let one = two_hop_repr(&mut t, &p, e_ik, e_kj, vi, vj, 1.0).unwrap();
        assert_eq!(t.value(one), t.value(got));
        let zero = two_hop_repr(&mut t, &p, e_ik, e_kj, vi, vj, 0.0).unwrap();
        assert!(t.value(zero).iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn aggregate_three_paths() {
        let mut t = Tape::new();
        let w_b = t.constant_matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let src = t.constant_vec(vec![0.5, 1.0]).unwrap();
        let rows = [[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]];
        let paths = t.constant_matrix(3, 2, rows.iter().flatten().copied().collect()).unwrap();
        let (g, beta) = aggregate_paths(&mut t, w_b, src, paths).unwrap();
        // q = src W_b = [0.5, 2.0]
        let scores: Vec<f64> = rows.iter().map(|r| 0.5 * r[0] + 2.0 * r[1]).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let b: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        for j in 0..3 {
            assert!((t.value(beta)[j] - b[j]).abs() < 1e-12);
        }
        for c in 0..2 {
            let want: f64 = (0..3).map(|j| b[j] * rows[j][c]).sum();
            assert!((t.value(g)[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_path_is_returned_unchanged() {
        let mut t = Tape::new();
        let w_b = t.constant_matrix(2, 2, vec![3.0, 1.0, -2.0, 0.5]).unwrap();
        let src = t.constant_vec(vec![0.2, 0.1]).unwrap();
        let paths = t.constant_matrix(1, 2, vec![0.7, -0.3]).unwrap();
        let (g, beta) = aggregate_paths(&mut t, w_b, src, paths).unwrap();
        assert_eq!(t.value(beta), &[1.0]);
        assert_eq!(t.value(g), &[0.7, -0.3]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = store2();
        let mut t = Tape::new();
        let p = PathParams::bind(&mut t, &s, "p").unwrap();
        let a = t.constant_vec(vec![0.0, 0.0]).unwrap();
        let b = t.constant_vec(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(path_repr(&mut t, &p, a, b), Err(Error::DimensionMismatch(_))));
    }
}
