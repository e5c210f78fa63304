mod common;

use common::{toy_config, toy_model};
use mathgen_core::equation::tokenize_equations;
use mathgen_core::model::{kl_diag_gaussian, DecodeOptions, Model, OutputDistribution};
use mathgen_core::vocab::{BOS, EOS};
use mathgen_tensor::gradcheck::check_params;
use mathgen_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn encode(model: &Model, tape: &mut Tape, eq: &[&str]) -> mathgen_core::model::EncoderOutput {
    let b = model.bind(tape).unwrap();
    let seq = tokenize_equations(eq).unwrap();
    let ex = model.encode_equation_ids(&seq);
    model.encode_equation(tape, &b, &ex.eq_ids, &ex.eq_types, &ex.tpl_ids).unwrap()
}

fn vals(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).to_vec()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W + b` on plain values, `W` row-major `[in, out]`.
fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let out = w.shape()[1];
    (0..out)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * out + j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[j]))
        .collect()
}

#[test]
fn template_stream_ignores_number_values() {
    let (model, _) = toy_model(toy_config(6));
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let a = encode(&model, &mut t1, &["4*(x-y)=800"]);
    let b = encode(&model, &mut t2, &["4*(x-y)=10"]);
    assert_eq!(vals(&t1, a.h_b), vals(&t2, b.h_b));
    assert_ne!(vals(&t1, a.h_a), vals(&t2, b.h_a));
}

#[test]
fn fusion_is_glu_of_the_two_streams() {
    let (model, _) = toy_model(toy_config(4));
    let mut tape = Tape::new();
    let enc = encode(&model, &mut tape, &["x+y=10"]);
    let p = &model.params;
    let d = 4;
    let (ha, hb, st) = (vals(&tape, enc.h_a), vals(&tape, enc.h_b), vals(&tape, enc.states));
    for k in 0..enc.len {
        let lin = affine(&ha[k * d..(k + 1) * d], p.get("enc.mlp1.w").unwrap(), p.get("enc.mlp1.b"));
        let gate = affine(&hb[k * d..(k + 1) * d], p.get("enc.mlp2.w").unwrap(), p.get("enc.mlp2.b"));
        for j in 0..d {
            assert!((st[k * d + j] - lin[j] * sigmoid(gate[j])).abs() < 1e-12);
        }
    }
    assert_eq!(vals(&tape, enc.h_n), st[(enc.len - 1) * d..].to_vec());
}

#[test]
fn single_token_equation() {
    let (model, _) = toy_model(toy_config(4));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let x = model.eq_vocab.id("x");
    let enc = model.encode_equation(&mut tape, &b, &[x], &[2], &[x]).unwrap();
    assert_eq!(enc.len, 1);
    assert_eq!(vals(&tape, enc.states), vals(&tape, enc.h_n));
    assert!(model.encode_equation(&mut tape, &b, &[9999], &[2], &[x]).is_err());
}

#[test]
fn reparameterization_and_monte_carlo_mean() {
    let (model, _) = toy_model(toy_config(4));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let enc = encode(&model, &mut tape, &["x+y=10"]);
    let zero = model.posterior_latent(&mut tape, &b, enc.h_n, Some(&[0.0; 4])).unwrap();
    assert_eq!(vals(&tape, zero.z), vals(&tape, zero.mu));

    let mu = vals(&tape, zero.mu);
    let sigma: Vec<f64> = vals(&tape, zero.log_sigma).iter().map(|l| l.exp()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut sum = [0.0; 4];
    for _ in 0..n {
        let r: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut t = Tape::new();
        let bb = model.bind(&mut t).unwrap();
        let h = t.constant_vec(vals(&tape, enc.h_n)).unwrap();
        let s = model.posterior_latent(&mut t, &bb, h, Some(&r)).unwrap();
        for (acc, v) in sum.iter_mut().zip(t.value(s.z)) {
            *acc += v;
        }
    }
    for i in 0..4 {
        let se = sigma[i] / (n as f64).sqrt();
        assert!((sum[i] / n as f64 - mu[i]).abs() < 3.0 * se, "coordinate {i}");
    }
}

#[test]
fn latent_gradient_reaches_mean_and_log_sigma() {
    let (model, _) = toy_model(toy_config(4));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let enc = encode(&model, &mut tape, &["x+y=10"]);
    let s = model.posterior_latent(&mut tape, &b, enc.h_n, Some(&[0.5, -1.0, 0.3, 2.0])).unwrap();
    let zz = tape.mul(s.z, s.z).unwrap();
    let loss = tape.sum(zz).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(s.mu).iter().any(|v| *v != 0.0));
    assert!(g.wrt(s.log_sigma).iter().any(|v| *v != 0.0));
}

#[test]
fn kl_on_tape_matches_closed_form() {
    let (model, _) = toy_model(toy_config(4));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let enc = encode(&model, &mut tape, &["x+y=10"]);
    let ids = model.word_vocab.ids(&["the", "sum", "of", "two"]);
    let q = model.encode_problem(&mut tape, &b, &ids).unwrap();
    let prior = model.prior_latent(&mut tape, &b, q, None).unwrap();
    let post = model.posterior_latent(&mut tape, &b, enc.h_n, None).unwrap();
    let kl = model.kl_divergence(&mut tape, &prior, &post).unwrap();
    let want = kl_diag_gaussian(&vals(&tape, prior.mu), &vals(&tape, prior.log_sigma), &vals(&tape, post.mu), &vals(&tape, post.log_sigma));
    assert!((tape.scalar(kl) - want).abs() < 1e-12);
    let same = model.kl_divergence(&mut tape, &post, &post).unwrap();
    assert!(tape.scalar(same).abs() < 1e-12);
}

#[test]
fn short_problems_are_padded() {
    let (model, _) = toy_model(toy_config(4));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let q = model.encode_problem(&mut tape, &b, &[model.word_vocab.id("coin")]).unwrap();
    assert_eq!(tape.shape(q), &[4]);
    assert!(tape.value(q).iter().all(|v| v.abs() < 1.0));
}

#[test]
fn predict_topic_cases() {
    let (mut model, _) = toy_model(toy_config(4));
    model.params.get_mut("topic.w").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let z = tape.constant_vec(vec![0.3, -0.2, 1.0, 0.1]).unwrap();
    let lp = model.predict_topic(&mut tape, &b, z).unwrap();
    for v in tape.value(lp) {
        assert!((v.exp() - 0.5).abs() < 1e-12);
    }
    model.params.get_mut("topic.b").unwrap().data_mut().copy_from_slice(&[0.0, 20.0]);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let z = tape.constant_vec(vec![0.3, -0.2, 1.0, 0.1]).unwrap();
    let lp = model.predict_topic(&mut tape, &b, z).unwrap();
    assert!(tape.value(lp)[1] > tape.value(lp)[0]);
}

#[test]
fn init_decoder_matches_hand_computation() {
    let (model, _) = toy_model(toy_config(2));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let h = [0.4, -0.7];
    let z = [1.5, 0.2];
    let hv = tape.constant_vec(h.to_vec()).unwrap();
    let zv = tape.constant_vec(z.to_vec()).unwrap();
    let mem = model.memory_row(&mut tape, &b, 0).unwrap();
    let st = model.init_decoder(&mut tape, &b, hv, zv, mem).unwrap();
    let input = [h[0], h[1], z[0], z[1], h[0] * z[0], h[1] * z[1]];
    let want = affine(&input, model.params.get("init.w").unwrap(), model.params.get("init.b"));
    for (a, w) in tape.value(st.s).iter().zip(&want) {
        assert!((a - w).abs() < 1e-12);
    }
    assert_eq!((st.t, st.prev), (0, BOS));

    let zero = tape.constant_vec(vec![0.0; 2]).unwrap();
    let st0 = model.init_decoder(&mut tape, &b, hv, zero, mem).unwrap();
    let want0 = affine(&[h[0], h[1], 0.0, 0.0, 0.0, 0.0], model.params.get("init.w").unwrap(), model.params.get("init.b"));
    for (a, w) in tape.value(st0.s).iter().zip(&want0) {
        assert!((a - w).abs() < 1e-12);
    }
}

#[test]
fn topic_attention_identities() {
    let (mut model, _) = toy_model(toy_config(3));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let s = tape.constant_vec(vec![0.1, 0.2, -0.3]).unwrap();
    let c = tape.constant_vec(vec![0.5, -0.5, 0.25]).unwrap();
    // identical rows: f(s) = s + m V whatever the scores
    let m = [0.3, -1.2, 0.8];
    let mem = tape.constant_matrix(3, 3, m.repeat(3)).unwrap();
    let (f, scores) = model.topic_attend(&mut tape, &b, s, c, mem).unwrap();
    let mv = affine(&m, model.params.get("dec.v").unwrap(), None);
    for (i, v) in tape.value(f).iter().enumerate() {
        assert!((v - (tape.value(s)[i] + mv[i])).abs() < 1e-12);
    }
    assert!((tape.value(scores).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    model.params.get_mut("dec.v").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let s = tape.constant_vec(vec![0.1, 0.2, -0.3]).unwrap();
    let c = tape.constant_vec(vec![0.5, -0.5, 0.25]).unwrap();
    let mem = tape.constant_matrix(3, 3, (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
    let (f, _) = model.topic_attend(&mut tape, &b, s, c, mem).unwrap();
    assert_eq!(tape.value(f), tape.value(s));
}

#[test]
fn topic_attention_hand_oracle() {
    let (model, _) = toy_model(toy_config(2));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let (s, c) = ([0.2, -0.4], [0.7, 0.1]);
    let rows = [[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]];
    let sv = tape.constant_vec(s.to_vec()).unwrap();
    let cv = tape.constant_vec(c.to_vec()).unwrap();
    let mem = tape.constant_matrix(3, 2, rows.concat()).unwrap();
    let (f, _) = model.topic_attend(&mut tape, &b, sv, cv, mem).unwrap();

    let q = affine(&[s[0], s[1], c[0], c[1]], model.params.get("dec.wt").unwrap(), None);
    let logits: Vec<f64> = rows.iter().map(|r| r[0] * q[0] + r[1] * q[1]).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
    let read = [0, 1].map(|j| (0..3).map(|k| w[k] * rows[k][j]).sum::<f64>());
    let proj = affine(&read, model.params.get("dec.v").unwrap(), None);
    for j in 0..2 {
        assert!((tape.value(f)[j] - (s[j] + proj[j])).abs() < 1e-12);
    }
}

/// Replaces a gate bias with a constant so the gate saturates.
fn with_gate_bias(model: &Model, value: f64) -> Model {
    let mut m = model.clone();
    m.params.get_mut("dec.wu.b").unwrap().data_mut().fill(value);
    m
}

#[test]
fn memory_update_gate_extremes() {
    let (model, _) = toy_model(toy_config(3));
    let rows: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.1).collect();
    let s = vec![0.3, -0.1, 0.2];

    // gate closed: unchanged
    let closed = with_gate_bias(&model, -60.0);
    let mut tape = Tape::new();
    let b = closed.bind(&mut tape).unwrap();
    let sv = tape.constant_vec(s.clone()).unwrap();
    let mem = tape.constant_matrix(3, 3, rows.clone()).unwrap();
    let out = closed.update_memory(&mut tape, &b, sv, mem).unwrap();
    for (a, w) in tape.value(out).iter().zip(&rows) {
        assert!((a - w).abs() < 1e-9);
    }

    // gate open: replaced by the candidate tanh([s'; C_j] W_c + b_c)
    let open = with_gate_bias(&model, 60.0);
    let mut tape = Tape::new();
    let b = open.bind(&mut tape).unwrap();
    let sv = tape.constant_vec(s.clone()).unwrap();
    let mem = tape.constant_matrix(3, 3, rows.clone()).unwrap();
    let out = open.update_memory(&mut tape, &b, sv, mem).unwrap();
    for j in 0..3 {
        let input: Vec<f64> = s.iter().chain(&rows[j * 3..(j + 1) * 3]).cloned().collect();
        let cand: Vec<f64> = affine(&input, open.params.get("dec.wc.w").unwrap(), open.params.get("dec.wc.b")).iter().map(|v| v.tanh()).collect();
        for k in 0..3 {
            assert!((tape.value(out)[j * 3 + k] - cand[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn memory_update_slotwise_oracle() {
    let (model, _) = toy_model(toy_config(2));
    let rows = [0.4, -0.3, 0.9, 0.2, -0.6, 0.1];
    let s = [0.5, -0.25];
    let mut tape = Tape::new();
    let b = model.bind(&mut tape).unwrap();
    let sv = tape.constant_vec(s.to_vec()).unwrap();
    let mem = tape.constant_matrix(3, 2, rows.to_vec()).unwrap();
    let out = model.update_memory(&mut tape, &b, sv, mem).unwrap();
    let p = &model.params;
    for j in 0..3 {
        let input = [s[0], s[1], rows[j * 2], rows[j * 2 + 1]];
        let u = affine(&input, p.get("dec.wu.w").unwrap(), p.get("dec.wu.b"));
        let c = affine(&input, p.get("dec.wc.w").unwrap(), p.get("dec.wc.b"));
        for k in 0..2 {
            let g = sigmoid(u[k]);
            let want = g * c[k].tanh() + (1.0 - g) * rows[j * 2 + k];
            assert!((tape.value(out)[j * 2 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn commonsense_embedding_fallback_and_chain() {
    let (model, _) = toy_model(toy_config(4));
    let nickel = model.word_vocab.id("nickel");
    let bundle = model.bundle(nickel).expect("nickel is in the graph");
    let g = model.graph().unwrap();
    let coin = g.node_id("coin").unwrap();
    let dime = g.node_id("dime").unwrap();
    assert!(bundle.first_hop.contains(&coin));
    assert!(bundle.second_hop.contains(&(dime, coin)));

    // "of" is not in the graph: GRU(e_w, 0)
    let of = model.word_vocab.id("of");
    assert!(model.bundle(of).is_none());
    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape).unwrap();
    let got = model.commonsense_embed(&mut tape, &mut b, of).unwrap();
    let gru = mathgen_core::nn::Gru::bind(&mut tape, &model.params, "cs.gru").unwrap();
    let e = tape.constant_vec(model.params.get("dec.emb").unwrap().row(of).to_vec()).unwrap();
    let h0 = tape.zeros(&[4]).unwrap();
    let want = gru.step(&mut tape, e, h0).unwrap();
    assert_eq!(tape.value(got), tape.value(want));

    // in-graph word: aggregate_paths then one GRU cell with state g H
    let got = model.commonsense_embed(&mut tape, &mut b, nickel).unwrap();
    let (gv, beta) = model.commonsense_summary(&mut tape, &b, nickel).unwrap().unwrap();
    assert!((tape.value(beta).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let h = tape.param(&model.params, "cs.h").unwrap();
    let gh = tape.matmul(gv, h).unwrap();
    let e = tape.constant_vec(model.params.get("dec.emb").unwrap().row(nickel).to_vec()).unwrap();
    let want = gru.step(&mut tape, e, gh).unwrap();
    for (a, w) in tape.value(got).iter().zip(tape.value(want)) {
        assert!((a - w).abs() < 1e-12);
    }
}

fn first_step(model: &Model, eq: &[&str]) -> (Tape, mathgen_core::model::StepOutput) {
    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape).unwrap();
    let seq = tokenize_equations(eq).unwrap();
    let ex = model.encode_equation_ids(&seq);
    let enc = model.encode_equation(&mut tape, &b, &ex.eq_ids, &ex.eq_types, &ex.tpl_ids).unwrap();
    let post = model.posterior_latent(&mut tape, &b, enc.h_n, None).unwrap();
    let mem = model.memory_row(&mut tape, &b, 1).unwrap();
    let st = model.init_decoder(&mut tape, &b, enc.h_n, post.z, mem).unwrap();
    let (out, next) = model.decode_step(&mut tape, &mut b, &st, &enc, &ex.number_positions).unwrap();
    assert_eq!(next.t, 1);
    (tape, out)
}

#[test]
fn output_mixture_is_normalized() {
    let (model, _) = toy_model(toy_config(5));
    let (tape, out) = first_step(&model, &["4*(x-y)=800"]);
    let dist = OutputDistribution::from_step(&tape, &out);
    assert_eq!(dist.copy.len(), 2);
    assert!(dist.p_gen > 0.0 && dist.p_gen < 1.0);
    assert!((dist.gen.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((dist.copy.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((dist.mixture().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((tape.value(out.attention).iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let (tape, out) = first_step(&model, &["x=y"]);
    let dist = OutputDistribution::from_step(&tape, &out);
    assert!(dist.copy.is_empty());
    assert_eq!(dist.p_gen, 1.0);
}

#[test]
fn zero_memory_without_graph_is_plain_attention_step() {
    let mut cfg = toy_config(4);
    cfg.use_graph = false;
    let (mut model, _) = toy_model(cfg);
    model.params.get_mut("memory").unwrap().data_mut().fill(0.0);
    let mut plain = model.clone();
    plain.config.use_topic_memory = false;
    let (t1, a) = first_step(&model, &["4*(x-y)=800"]);
    let (t2, b) = first_step(&plain, &["4*(x-y)=800"]);
    assert_eq!(t1.value(a.log_gen), t2.value(b.log_gen));
    assert_eq!(t1.value(a.log_copy.unwrap()), t2.value(b.log_copy.unwrap()));
}

#[test]
fn decoding_leaves_master_memory_untouched() {
    let (model, exs) = toy_model(toy_config(4));
    let before = model.params.get("memory").unwrap().clone();
    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape).unwrap();
    let ex = model.encode_example(&exs[1]).unwrap();
    let parts = model.total_loss(&mut tape, &mut b, &[ex.clone()], &[ex.problem_ids.clone()], &[None], 1.0, 0.5).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    let mut store = model.params.clone();
    grads.accumulate_into(&mut store).unwrap();
    assert!(store.get("memory").unwrap().grad().is_none());
    model.generate(&exs[1].equations, &DecodeOptions::default()).unwrap();
    assert_eq!(model.params.get("memory").unwrap(), &before);
}

#[test]
fn loss_is_sum_of_terms() {
    let (model, exs) = toy_model(toy_config(4));
    let batch: Vec<_> = exs[..2].iter().map(|e| model.encode_example(e).unwrap()).collect();
    let problems: Vec<Vec<usize>> = batch.iter().map(|e| e.problem_ids.clone()).collect();
    let noise = vec![Some(vec![0.1, -0.2, 0.3, 0.0]), None];

    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape).unwrap();
    let parts = model.total_loss(&mut tape, &mut b, &batch, &problems, &noise, 0.3, 0.5).unwrap();
    let mut want = 0.0;
    for i in 0..2 {
        let mut t = Tape::new();
        let mut bb = model.bind(&mut t).unwrap();
        let (nll, kl, ce) = model.example_terms(&mut t, &mut bb, &batch[i], &problems[i], noise[i].as_deref()).unwrap();
        want += t.scalar(nll) + 0.3 * t.scalar(kl) + 0.5 * t.scalar(ce);
    }
    assert!((tape.scalar(parts.total) - want / 2.0).abs() < 1e-12);
    assert_eq!(parts.tokens, batch[0].targets.len() + batch[1].targets.len());

    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape).unwrap();
    let pure = model.total_loss(&mut tape, &mut b, &batch, &problems, &noise, 0.0, 0.0).unwrap();
    assert!((tape.scalar(pure.total) - tape.scalar(pure.nll) / 2.0).abs() < 1e-12);
}

#[test]
fn targets_end_with_eos_and_mark_copy_slots() {
    let (model, exs) = toy_model(toy_config(4));
    let ex = model.encode_example(&exs[1]).unwrap();
    assert_eq!(ex.targets.last().unwrap().word_id, EOS);
    let i800 = exs[1].problem.iter().position(|t| t == "800").unwrap();
    assert_eq!(ex.targets[i800].copy_slots, vec![1]);
    assert_eq!(ex.number_canon, vec!["4", "800"]);
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let (model, exs) = toy_model(toy_config(4));
    let batch: Vec<_> = exs[..2].iter().map(|e| model.encode_example(e).unwrap()).collect();
    let problems: Vec<Vec<usize>> = batch.iter().map(|e| e.problem_ids.clone()).collect();
    let noise = vec![Some(vec![0.3, -0.1, 0.2, -0.4]), Some(vec![-0.5, 0.2, 0.1, 0.6])];
    let loss = |m: &Model| -> mathgen_core::Result<(Tape, mathgen_core::model::LossParts)> {
        let mut tape = Tape::new();
        let mut b = m.bind(&mut tape)?;
        let parts = m.total_loss(&mut tape, &mut b, &batch, &problems, &noise, 0.7, 0.5)?;
        Ok((tape, parts))
    };
    let (mut tape, parts) = loss(&model).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    let analytic = grads.params().map(|(n, g)| (n.to_string(), g)).collect();
    let mut store = model.params.clone();
    let errs = check_params(
        &mut store,
        &analytic,
        |s| {
            let mut m = model.clone();
            m.params = s.clone();
            let (tape, parts) = loss(&m)?;
            Ok::<f64, mathgen_core::Error>(tape.scalar(parts.total))
        },
        1e-5,
    )
    .unwrap();
    assert!(errs.len() >= 30);
    for (name, e) in errs {
        assert!(e < 1e-4, "{name}: {e}");
    }
}

#[test]
fn snapshot_round_trip() {
    let (model, exs) = toy_model(toy_config(4));
    let snap = model.to_snapshot(serde_json::json!({"note": 1}));
    let bytes = snap.to_bytes().unwrap();
    let back = Model::from_snapshot(&mathgen_tensor::Snapshot::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.params.len(), model.params.len());
    let a = model.generate(&exs[0].equations, &DecodeOptions::default()).unwrap();
    let b = back.generate(&exs[0].equations, &DecodeOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generation_is_deterministic_and_copies_only_known_numbers() {
    let (model, _) = toy_model(toy_config(4));
    let seq = tokenize_equations(&["0.5*x+0.3*y=10"]).unwrap();
    let opts = DecodeOptions {
        sample_seed: Some(9),
        beam: 3,
        ..DecodeOptions::default()
    };
    let a = model.generate(&seq, &opts).unwrap();
    let b = model.generate(&seq, &opts).unwrap();
    assert_eq!(a, b);
    for (tok, src) in a.tokens.iter().zip(&a.copied_from) {
        if let Some(p) = src {
            assert!(seq.tokens[*p].is_number());
            assert_eq!(seq.tokens[*p].canonical(), Some(tok.as_str()));
        }
    }
}
