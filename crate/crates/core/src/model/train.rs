use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyModel};
use crate::corpus::Sequence;
use crate::error::{Error, Result};
use crate::network::PassOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub warmup: usize,
    /// Decoupled weight decay applied to weight matrices.
    pub weight_decay: f64,
    /// Every `heldout_every`-th sequence is withheld for the loss check.
    pub heldout_every: usize,
    /// Held-out per-token cross-entropy the run must get below.
    pub loss_threshold: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 3000,
            lr: 3e-3,
            batch_size: 16,
            clip: 1.0,
            warmup: 100,
            weight_decay: 0.1,
            heldout_every: 10,
            loss_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean completion-token loss per logged step.
    pub losses: Vec<(usize, f64)>,
    pub heldout_loss: f64,
    pub loss_threshold: f64,
    pub converged: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Trains from the seeded initialization with Adam on completion tokens.
///
/// Deterministic for fixed (config, corpus, options).
pub fn train_toy(
    config: ModelConfig,
    corpus: &[Sequence],
    opts: &TrainOptions,
) -> Result<(ToyModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if opts.batch_size == 0 || opts.heldout_every < 2 {
        return Err(Error::Invalid(
            "batch_size must be >= 1 and heldout_every >= 2".into(),
        ));
    }
    for s in corpus {
        s.check(config.max_seq_len)?;
    }
    let mut model = ToyModel::init(config)?;
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        if corpus.len() >= opts.heldout_every && (i + 1) % opts.heldout_every == 0 {
            heldout.push(s);
        } else {
            train.push(s);
        }
    }

    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut adam = Adam {
        m: names.iter().map(|n| vec![0.0; model.params[n].data.len()]).collect(),
        v: names.iter().map(|n| vec![0.0; model.params[n].data.len()]).collect(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::new();

    for step in 0..opts.steps {
        let w = model.weights(true)?;
        let mut batch_loss = 0.0;
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = train[order[cursor]];
            cursor += 1;
            let loss = sequence_loss(&model, &w, seq)?.scale(1.0 / opts.batch_size as f64);
            if !loss.item().is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: loss.item(),
                });
            }
            batch_loss += loss.item();
            loss.backward()?;
        }
        if step % 50 == 0 || step + 1 == opts.steps {
            losses.push((step, batch_loss));
        }

        let grads: Vec<Vec<f64>> = names.iter().map(|n| w.get(n).grad()).collect();
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
            });
        }
        let clip = if norm > opts.clip { opts.clip / norm } else { 1.0 };
        let lr = schedule(opts, step);
        adam.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let c1 = 1.0 - b1.powi(adam.t);
        let c2 = 1.0 - b2.powi(adam.t);
        for (k, name) in names.iter().enumerate() {
            let p = model.params.get_mut(name).expect("known parameter");
            let decay = if p.shape.len() == 2 { 1.0 - lr * opts.weight_decay } else { 1.0 };
            for (j, g) in grads[k].iter().enumerate() {
                let g = g * clip;
                let m = &mut adam.m[k][j];
                let v = &mut adam.v[k][j];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                p.data[j] = decay * p.data[j] - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }

    let heldout_loss = mean_token_loss(&model, &heldout)?;
    let report = TrainReport {
        steps: opts.steps,
        losses,
        heldout_loss,
        loss_threshold: opts.loss_threshold,
        converged: heldout_loss < opts.loss_threshold,
    };
    Ok((model, report))
}

fn schedule(opts: &TrainOptions, step: usize) -> f64 {
    if step < opts.warmup {
        return opts.lr * (step + 1) as f64 / opts.warmup as f64;
    }
    let span = (opts.steps - opts.warmup).max(1) as f64;
    let progress = (step - opts.warmup) as f64 / span;
    opts.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Mean negative log-likelihood of the completion tokens.
fn sequence_loss(model: &ToyModel, w: &super::Weights, seq: &Sequence) -> Result<crate::tensor::Tensor> {
    let t = seq.tokens.len();
    let p = seq.prompt_len;
    let input = &seq.tokens[..t - 1];
    let built = model.build(w, input, &PassOptions::default(), p - 1..t - 1, super::Input::Embed)?;
    let picked = built.logits.log_softmax_pick(&seq.tokens[p..])?;
    Ok(picked.scale(-1.0 / (t - p) as f64))
}

/// Per-token completion cross-entropy over `seqs` (NaN when empty).
pub(crate) fn mean_token_loss(model: &ToyModel, seqs: &[&Sequence]) -> Result<f64> {
    let w = model.weights(false)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        let l = sequence_loss(model, &w, s)?.item();
        let n = s.tokens.len() - s.prompt_len;
        total += l * n as f64;
        count += n;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}
