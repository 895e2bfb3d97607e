//! JSON checkpoint container: format tag, version, model shape, schedule,
//! vocabulary and every named parameter tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{ModelConfig, ToyDenoiser};
use super::schedule::NoiseSchedule;
use super::vocab::TokenVocabulary;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const CHECKPOINT_FORMAT: &str = "macguide-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSchedule {
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    schedule: StoredSchedule,
    vocab: Vec<String>,
    tensors: Vec<StoredTensor>,
}

pub fn checkpoint_to_string(model: &ToyDenoiser) -> Result<String> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        schedule: StoredSchedule {
            train_steps: model.schedule.train_steps,
            beta_start: model.schedule.beta_start,
            beta_end: model.schedule.beta_end,
            alpha_bar: model.schedule.alpha_bars().to_vec(),
        },
        vocab: model.vocab.tokens().to_vec(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&ckpt)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<ToyDenoiser> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag `{}`", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (this build reads {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    let s = ckpt.schedule;
    if s.alpha_bar.len() != s.train_steps + 1 {
        return Err(Error::Checkpoint("schedule length does not match train_steps".into()));
    }
    let mut schedule = NoiseSchedule::from_alpha_bar(s.alpha_bar)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    schedule.beta_start = s.beta_start;
    schedule.beta_end = s.beta_end;
    let vocab = TokenVocabulary::from_tokens(ckpt.vocab)?;
    let mut params = BTreeMap::new();
    for t in ckpt.tensors {
        let tensor = Tensor::new(&t.shape, t.data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))?;
        if params.insert(t.name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
        }
    }
    ToyDenoiser::from_parts(ckpt.config, vocab, schedule, params)
}

pub fn save_checkpoint(model: &ToyDenoiser, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
