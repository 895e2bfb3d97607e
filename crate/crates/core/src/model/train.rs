use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::ToyDenoiser;
use super::scene::SyntheticScene;
use super::schedule::forward_noise;
use super::image_to_latent;
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the prompt with the empty prompt.
    pub cond_dropout: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Optimizer steps per loss-curve row.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 2e-3,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "cond_dropout must lie in [0, 1], got {}",
                self.cond_dropout
            )));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lr) || !nonneg(self.grad_clip) {
            return Err(Error::Config("lr and grad_clip must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean training loss over one logging interval ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub fn loss_curve_to_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,loss\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    out
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Squared noise-prediction error for one sample and its parameter gradients.
fn sample_loss(
    model: &ToyDenoiser,
    x0: &Tensor,
    tokens: &[usize],
    t: usize,
    noise: &Tensor,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let z = forward_noise(x0, t, noise, &model.schedule)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let zv = tape.constant(z);
    let pass = model.forward_var(&mut tape, &p, zv, tokens, t, true)?;
    let target = tape.constant(noise.clone());
    let diff = tape.sub(pass.eps.expect("decoding pass"), target)?;
    let sq = tape.square(diff)?;
    let loss = tape.mean(sq)?;
    let names: Vec<(&str, _)> = p.iter().collect();
    let vars: Vec<_> = names.iter().map(|(_, v)| *v).collect();
    let grads = tape.grads(loss, &vars)?;
    Ok((
        tape.scalar(loss),
        names
            .into_iter()
            .zip(grads)
            .map(|((n, _), g)| (n.to_string(), g.value))
            .collect(),
    ))
}

/// Minimizes the noise-prediction error with Adam. Each sample draws a
/// uniform training step and fresh Gaussian noise, and its prompt is replaced
/// by the empty prompt with probability `cond_dropout`.
///
/// On a non-finite loss or gradient the model keeps the last finite
/// parameters and [`Error::TrainingDiverged`] is returned.
pub fn train(model: &mut ToyDenoiser, dataset: &[SyntheticScene], cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let encoded = dataset
        .iter()
        .map(|s| Ok((image_to_latent(&s.image), model.vocab.encode(&s.prompt_tokens)?)))
        .collect::<Result<Vec<_>>>()?;
    let uncond = model.vocab.unconditional();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut curve = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    let mut step = 0;
    let shape = model.config.latent_shape();
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Vec<f64>> = model
                .params
                .iter()
                .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
                .collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x0, tokens) = &encoded[i];
                let t = rng.gen_range(1..=model.schedule.train_steps);
                let noise = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
                let tokens = if rng.gen::<f64>() < cfg.cond_dropout {
                    &uncond
                } else {
                    tokens
                };
                let (loss, g) = sample_loss(model, x0, tokens, t, &noise)?;
                batch_loss += loss;
                for (name, gt) in g {
                    for (a, b) in grads.get_mut(&name).expect("grad").iter_mut().zip(gt.data()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut norm2 = 0.0;
            for g in grads.values_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                    norm2 += *x * *x;
                }
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() || !norm2.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip {
                let s = cfg.grad_clip / norm2.sqrt();
                grads.values_mut().flatten().for_each(|x| *x *= s);
            }
            adam.step(&mut model.params, &grads, cfg.lr);
            step += 1;
            acc += batch_loss;
            acc_n += 1;
            if step % cfg.log_every == 0 {
                curve.push(LossPoint {
                    step,
                    loss: acc / acc_n as f64,
                });
                log::info!("train step {step}: loss {:.5}", acc / acc_n as f64);
                acc = 0.0;
                acc_n = 0;
            }
        }
    }
    if acc_n > 0 {
        curve.push(LossPoint {
            step,
            loss: acc / acc_n as f64,
        });
    }
    Ok(curve)
}
