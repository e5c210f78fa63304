//! Training loop, KL annealing and checkpoints.

use std::fmt::Write as _;

use log::info;
use mathgen_tensor::{Snapshot, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{corrupt_problem, TrainingExample};
use crate::error::{Error, Result};
use crate::graph::NeighborCaps;
use crate::metrics::bleu2;
use crate::model::{DecodeOptions, EncodedExample, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::vocab::UNK;

/// Linear ramp from 0 at step 0 to 1 at `warmup`, then 1.
pub fn kl_anneal_weight(step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        1.0
    } else {
        step as f64 / warmup as f64
    }
}

/// All knobs of a training run, model dimensions included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub topic_weight: f64,
    pub mask_rate: f64,
    pub delete_rate: f64,
    /// Draw `z` with the reparameterization trick; otherwise use the prior mean.
    pub sample_latent: bool,
    /// Dev BLEU is computed every this many epochs (and after the last one); 0 only at the end.
    pub eval_every: usize,
    pub seed: u64,
    pub dim: usize,
    pub num_topics: usize,
    pub memory_slots: usize,
    pub keywords_per_topic: usize,
    pub kernel_widths: Vec<usize>,
    pub alpha: f64,
    pub max_decode_len: usize,
    pub first_hop_cap: usize,
    pub second_hop_cap: usize,
    pub use_copy: bool,
    pub use_graph: bool,
    pub use_topic_memory: bool,
    pub word_min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            epochs: 20,
            warmup_steps: 2000,
            topic_weight: 0.5,
            mask_rate: 0.15,
            delete_rate: 0.10,
            sample_latent: true,
            eval_every: 1,
            seed: 0,
            dim: m.dim,
            num_topics: m.num_topics,
            memory_slots: m.memory_slots,
            keywords_per_topic: m.memory_slots,
            kernel_widths: m.kernel_widths,
            alpha: m.alpha,
            max_decode_len: m.max_decode_len,
            first_hop_cap: m.neighbor_caps.first_hop,
            second_hop_cap: m.neighbor_caps.second_hop,
            use_copy: true,
            use_graph: true,
            use_topic_memory: true,
            word_min_freq: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.clip_norm < 0.0 || self.topic_weight < 0.0 {
            return bad("clip_norm and topic_weight must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.mask_rate) || !(0.0..1.0).contains(&self.delete_rate) {
            return bad("mask_rate and delete_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            num_topics: self.num_topics,
            memory_slots: self.memory_slots,
            kernel_widths: self.kernel_widths.clone(),
            alpha: self.alpha,
            max_decode_len: self.max_decode_len,
            neighbor_caps: NeighborCaps {
                first_hop: self.first_hop_cap,
                second_hop: self.second_hop_cap,
            },
            use_copy: self.use_copy,
            use_graph: self.use_graph,
            use_topic_memory: self.use_topic_memory,
            init_seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// One row of the loss log. `nll` is per target token, `kl` and `topic_ce` per example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub nll: f64,
    pub kl: f64,
    pub topic_ce: f64,
    pub anneal_weight: f64,
    pub loss: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,nll,kl,topic_ce,anneal_weight\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.step, r.nll, r.kl, r.topic_ce, r.anneal_weight).unwrap();
    }
    s
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(seed: u64, tag: u64, n: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ n.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub log: Vec<LogRow>,
    pub best_dev_bleu: Option<f64>,
    pub best: Option<Snapshot>,
    train: Vec<EncodedExample>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, train: &[TrainingExample]) -> Result<Self> {
        config.validate()?;
        check_dims(&model, &config)?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let train = train.iter().map(|e| model.encode_example(e)).collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            adam: Adam::new(config.adam()),
            model,
            config,
            log: Vec::new(),
            best_dev_bleu: None,
            best: None,
            train,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(snap: &Snapshot, config: TrainConfig, train: &[TrainingExample]) -> Result<Self> {
        let model = Model::from_snapshot(snap)?;
        let extra = &snap.meta["extra"];
        let step = extra["step"].as_u64().ok_or_else(|| Error::Data("checkpoint has no step".into()))?;
        let mut t = Trainer::new(model, config, train)?;
        t.adam = Adam::read_state(t.config.adam(), step, snap);
        t.best_dev_bleu = extra["best_dev_bleu"].as_f64();
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    /// Example indices of global step `step`: a seeded shuffle per epoch, cut into batches.
    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch() as u64;
        let (epoch, k) = (step / bpe, (step % bpe) as usize);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, 1, epoch)));
        let bs = self.config.batch_size;
        order[k * bs..((k + 1) * bs).min(order.len())].to_vec()
    }

    /// Loss of the batch at the current step without updating anything.
    pub fn peek_loss(&self) -> Result<LogRow> {
        let (row, _) = self.forward(self.step_count(), false)?;
        Ok(row)
    }

    fn forward(&self, step: u64, grads: bool) -> Result<(LogRow, Option<mathgen_tensor::Gradients>)> {
        let idx = self.batch_indices(step);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, 2, step));
        let batch: Vec<EncodedExample> = idx.iter().map(|&i| self.train[i].clone()).collect();
        let mut problems = Vec::with_capacity(batch.len());
        let mut noise = Vec::with_capacity(batch.len());
        for ex in &batch {
            problems.push(corrupt_problem(&ex.problem_ids, &UNK, self.config.mask_rate, self.config.delete_rate, &mut rng));
            noise.push(
                self.config
                    .sample_latent
                    .then(|| (0..self.model.config.dim).map(|_| StandardNormal.sample(&mut rng)).collect()),
            );
        }
        let anneal = kl_anneal_weight(step, self.config.warmup_steps);
        let mut tape = Tape::new();
        let mut b = self.model.bind(&mut tape)?;
        let parts = self.model.total_loss(&mut tape, &mut b, &batch, &problems, &noise, anneal, self.config.topic_weight)?;
        let n = parts.examples as f64;
        let row = LogRow {
            step: step + 1,
            nll: tape.scalar(parts.nll) / parts.tokens as f64,
            kl: tape.scalar(parts.kl) / n,
            topic_ce: tape.scalar(parts.topic_ce) / n,
            anneal_weight: anneal,
            loss: tape.scalar(parts.total),
        };
        if !row.loss.is_finite() {
            return Err(Error::Divergence(format!("loss {} at step {}", row.loss, step + 1)));
        }
        let g = if grads { Some(tape.backward(parts.total)?) } else { None };
        Ok((row, g))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<LogRow> {
        let (row, grads) = self.forward(self.step_count(), true)?;
        grads.expect("requested").accumulate_into(&mut self.model.params)?;
        self.adam.step(&mut self.model.params)?;
        self.log.push(row);
        Ok(row)
    }

    /// Greedy-decode BLEU-2 on `dev`.
    pub fn dev_bleu(&self, dev: &[TrainingExample]) -> Result<f64> {
        let mut cands = Vec::with_capacity(dev.len());
        let mut refs = Vec::with_capacity(dev.len());
        for ex in dev {
            cands.push(self.model.generate(&ex.equations, &DecodeOptions::default())?.tokens);
            refs.push(ex.problem.clone());
        }
        Ok(bleu2(&cands, &refs))
    }

    pub fn checkpoint(&self) -> Snapshot {
        let extra = serde_json::json!({
            "step": self.step_count(),
            "best_dev_bleu": self.best_dev_bleu,
            "train_config": self.config,
        });
        let mut snap = self.model.to_snapshot(extra);
        self.adam.write_state(&mut snap);
        snap
    }

    /// Runs the remaining epochs. Keeps the checkpoint with the best dev
    /// BLEU-2 in [`Trainer::best`] (the last one when `dev` is empty). After a
    /// resume `best` stays `None` unless dev BLEU beats the restored best.
    pub fn fit(&mut self, dev: &[TrainingExample]) -> Result<()> {
        let bpe = self.batches_per_epoch() as u64;
        let total = bpe * self.config.epochs as u64;
        while self.step_count() < total {
            let row = self.step()?;
            if row.step % bpe != 0 {
                continue;
            }
            let epoch = (row.step / bpe) as usize;
            let due = self.config.eval_every > 0 && epoch % self.config.eval_every == 0;
            if !(due || row.step == total) {
                continue;
            }
            info!("epoch {epoch}: nll {:.4} kl {:.4} topic_ce {:.4}", row.nll, row.kl, row.topic_ce);
            if dev.is_empty() {
                continue;
            }
            let bleu = self.dev_bleu(dev)?;
            info!("epoch {epoch}: dev bleu2 {bleu:.4}");
            if self.best_dev_bleu.map_or(true, |b| bleu > b) {
                self.best_dev_bleu = Some(bleu);
                self.best = Some(self.checkpoint());
            }
        }
        if dev.is_empty() || self.best_dev_bleu.is_none() {
            self.best = Some(self.checkpoint());
        }
        Ok(())
    }
}

fn check_dims(model: &Model, config: &TrainConfig) -> Result<()> {
    let want = config.model_config();
    let have = &model.config;
    if have.dim != want.dim || have.num_topics != want.num_topics || have.memory_slots != want.memory_slots || have.kernel_widths != want.kernel_widths {
        return Err(Error::Config(format!(
            "model dims (d={}, topics={}, slots={}, kernels={:?}) differ from config (d={}, topics={}, slots={}, kernels={:?})",
            have.dim, have.num_topics, have.memory_slots, have.kernel_widths, want.dim, want.num_topics, want.memory_slots, want.kernel_widths
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_schedule() {
        assert_eq!(kl_anneal_weight(0, 2000), 0.0);
        assert_eq!(kl_anneal_weight(1000, 2000), 0.5);
        assert_eq!(kl_anneal_weight(2000, 2000), 1.0);
        assert_eq!(kl_anneal_weight(5000, 2000), 1.0);
        assert_eq!(kl_anneal_weight(0, 0), 1.0);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"batch_size": 4, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"batch_size": 4}"#).unwrap();
        assert_eq!(c.learning_rate, 5e-4);
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(mix(0, 1, 0), mix(0, 2, 0));
        assert_ne!(mix(0, 1, 0), mix(0, 1, 1));
    }
}
