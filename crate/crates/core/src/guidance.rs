//! Reverse diffusion with classifier-free guidance and layout-driven latent
//! optimization during the highest-noise sampler steps.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate_vars, phrase_map_var, EnhancedPhraseMap};
use crate::error::{Error, Result};
use crate::layout::{rasterize, Layout, MaskSet};
use crate::losses::{combine_var, loss_terms_var, Ablation, LossBreakdown, TraceRecord};
use crate::model::{latent_to_image, NoiseSchedule, ToyDenoiser};
use crate::numeric::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Latent step size.
    pub eta: f64,
    /// Marginal loss weight.
    pub lambda: f64,
    /// Regularization loss weight.
    pub alpha: f64,
    /// Power of the self-attention matrix used for enhancement.
    pub tau: u32,
    pub total_steps: usize,
    /// Number of leading (highest-noise) sampler steps that optimize the latent.
    pub optim_steps: usize,
    pub max_inner_iters: usize,
    pub early_stop_threshold: f64,
    pub cfg_weight: f64,
    /// Clamp the sampler's clean-sample estimate to `[-1, 1]`.
    pub clip_sample: bool,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 70.0,
            lambda: 0.5,
            alpha: 0.5,
            tau: 1,
            total_steps: 50,
            optim_steps: 10,
            max_inner_iters: 5,
            early_stop_threshold: 1e-6,
            cfg_weight: 7.5,
            clip_sample: true,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

const CONFIG_KEYS: [&str; 12] = [
    "eta",
    "lambda",
    "alpha",
    "tau",
    "total_steps",
    "optim_steps",
    "max_inner_iters",
    "early_stop_threshold",
    "cfg_weight",
    "clip_sample",
    "seed",
    "ablation",
];

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.optim_steps > self.total_steps {
            return Err(Error::Config(format!(
                "optim_steps {} exceeds total_steps {}",
                self.optim_steps, self.total_steps
            )));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("early_stop_threshold", self.early_stop_threshold),
            ("cfg_weight", self.cfg_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{value}` is not a valid value for {key}")))
        }
        match key {
            "eta" => self.eta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "optim_steps" => self.optim_steps = num(key, value)?,
            "max_inner_iters" => self.max_inner_iters = num(key, value)?,
            "early_stop_threshold" => self.early_stop_threshold = num(key, value)?,
            "cfg_weight" => self.cfg_weight = num(key, value)?,
            "clip_sample" => self.clip_sample = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(n + 1, "line", "expected `key = value`"))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::parse(n + 1, key.trim(), m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "eta = {}", self.eta);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "total_steps = {}", self.total_steps);
        let _ = writeln!(out, "optim_steps = {}", self.optim_steps);
        let _ = writeln!(out, "max_inner_iters = {}", self.max_inner_iters);
        let _ = writeln!(out, "early_stop_threshold = {}", self.early_stop_threshold);
        let _ = writeln!(out, "cfg_weight = {}", self.cfg_weight);
        let _ = writeln!(out, "clip_sample = {}", self.clip_sample);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "ablation = {}", self.ablation);
        out
    }
}

/// Cumulative noise levels at the sampler's timesteps. Sampler state `k`
/// in `0..=total_steps` sits at training step `k * train_steps / total_steps`.
///
/// With clipping enabled, a clean-sample estimate outside `[-1, 1]` is clamped
/// and the noise estimate recomputed from it before stepping.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    train_steps: Vec<usize>,
    alpha_bar: Vec<f64>,
    clip_sample: bool,
}

impl DdimSchedule {
    pub fn new(schedule: &NoiseSchedule, total_steps: usize) -> Result<Self> {
        if total_steps == 0 || total_steps > schedule.train_steps {
            return Err(Error::Config(format!(
                "cannot run {total_steps} sampler steps on a {}-step schedule",
                schedule.train_steps
            )));
        }
        let train_steps: Vec<usize> = (0..=total_steps)
            .map(|k| k * schedule.train_steps / total_steps)
            .collect();
        let alpha_bar = train_steps
            .iter()
            .map(|&t| schedule.alpha_bar(t))
            .collect::<Result<_>>()?;
        Ok(Self {
            train_steps,
            alpha_bar,
            clip_sample: false,
        })
    }

    pub fn with_clipping(self, clip_sample: bool) -> Self {
        Self { clip_sample, ..self }
    }

    pub fn total_steps(&self) -> usize {
        self.train_steps.len() - 1
    }

    /// Training step matching sampler state `k`.
    pub fn train_step(&self, k: usize) -> usize {
        self.train_steps[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }
}

/// The sample being denoised, the sampler state it sits at and every loss
/// evaluation recorded so far.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
    pub trace: Vec<TraceRecord>,
}

/// Deterministic update from sampler state `t` to `t - 1`.
pub fn ddim_step(state: LatentState, eps_pred: &Tensor, schedule: &DdimSchedule) -> Result<LatentState> {
    if state.t == 0 {
        return Err(Error::TerminalState);
    }
    if state.t > schedule.total_steps() {
        return Err(Error::Timestep {
            t: state.t,
            max: schedule.total_steps(),
        });
    }
    if eps_pred.shape() != state.z.shape() {
        return Err(Error::Dimension(format!(
            "noise prediction {:?} does not match latent {:?}",
            eps_pred.shape(),
            state.z.shape()
        )));
    }
    let ab = schedule.alpha_bar(state.t);
    let ab_prev = schedule.alpha_bar(state.t - 1);
    // sqrt(ab_prev) * x0_pred + sqrt(1 - ab_prev) * eps, with x0_pred expanded.
    let ratio = (ab_prev / ab).sqrt();
    let noise_coef = (1.0 - ab_prev).sqrt() - ratio * (1.0 - ab).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let clip = schedule.clip_sample && sb > 0.0;
    let z = state.z.zip_map(eps_pred, |z, e| {
        let x0 = (z - sb * e) / sa;
        if clip && !(-1.0..=1.0).contains(&x0) {
            let x0 = x0.clamp(-1.0, 1.0);
            let e = (z - sa * x0) / sb;
            pa * x0 + pb * e
        } else {
            ratio * z + noise_coef * e
        }
    })?;
    Ok(LatentState {
        z,
        t: state.t - 1,
        trace: state.trace,
    })
}

/// `eps_uncond + w (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// A constrained phrase ready for loss evaluation.
#[derive(Debug, Clone)]
pub struct PhraseTarget {
    pub phrase_index: usize,
    pub tokens: Vec<usize>,
    pub masks: MaskSet,
}

/// Rasterizes every phrase of `layout` on the model's attention grid.
pub fn phrase_targets(layout: &Layout, model: &ToyDenoiser) -> Result<Vec<PhraseTarget>> {
    let g = model.config.grid1();
    layout
        .phrases
        .iter()
        .map(|p| {
            Ok(PhraseTarget {
                phrase_index: p.index,
                tokens: p.tokens.clone(),
                masks: rasterize(&p.boxes, g, g)?,
            })
        })
        .collect()
}

/// One evaluation of the combined loss at a latent.
#[derive(Debug, Clone)]
pub struct GuidanceEval {
    pub loss: LossBreakdown,
    /// Gradient of the combined loss with respect to the latent.
    pub grad: Tensor,
    pub maps: Vec<EnhancedPhraseMap>,
}

/// Runs the conditional attention pass at `z`, builds the enhanced phrase maps
/// and returns the combined loss with its gradient with respect to `z`.
pub fn guidance_loss(
    model: &ToyDenoiser,
    z: &Tensor,
    tokens: &[usize],
    train_step: usize,
    targets: &[PhraseTarget],
    config: &GuidanceConfig,
) -> Result<GuidanceEval> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let zv = tape.var(z.clone());
    let pass = model.forward_var(&mut tape, &params, zv, tokens, train_step, false)?;
    let (cross, self_map, grid) = aggregate_vars(&mut tape, &pass.layers)?;
    let mut map_vars = Vec::with_capacity(targets.len());
    for t in targets {
        map_vars.push(phrase_map_var(&mut tape, cross, self_map, &t.tokens, config.tau, grid)?);
    }
    let masks: Vec<MaskSet> = targets.iter().map(|t| t.masks.clone()).collect();
    let terms = loss_terms_var(&mut tape, &map_vars, &masks)?;
    let (combined, loss) = combine_var(&mut tape, &terms, config.lambda, config.alpha, config.ablation)?;
    let grad = tape.grad(combined, zv)?.value;
    let maps = targets
        .iter()
        .zip(&map_vars)
        .map(|(t, &v)| EnhancedPhraseMap {
            phrase_index: t.phrase_index,
            map: tape.value(v).clone(),
        })
        .collect();
    Ok(GuidanceEval { loss, grad, maps })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceWarning {
    pub step: usize,
    pub iteration: usize,
    pub message: String,
}

/// Result of the inner loop at one sampler step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: LatentState,
    /// Phrase maps from the last loss evaluation.
    pub maps: Vec<EnhancedPhraseMap>,
    pub warning: Option<GuidanceWarning>,
}

/// Descends the combined layout loss on `state.z` for up to
/// `max_inner_iters` iterations, recomputing attention after every update.
/// The loop stops before updating once the loss falls below the threshold.
/// `step` is the 1-based sampler step number used in trace records.
pub fn optimize_latent(
    state: LatentState,
    tokens: &[usize],
    targets: &[PhraseTarget],
    config: &GuidanceConfig,
    model: &ToyDenoiser,
    schedule: &DdimSchedule,
    step: usize,
) -> Result<StepOutcome> {
    let mut state = state;
    let mut maps = Vec::new();
    if targets.is_empty() {
        return Ok(StepOutcome {
            state,
            maps,
            warning: None,
        });
    }
    let train_step = schedule.train_step(state.t);
    for iteration in 1..=config.max_inner_iters {
        let eval = guidance_loss(model, &state.z, tokens, train_step, targets, config)?;
        maps = eval.maps;
        state.trace.push(TraceRecord {
            step,
            iteration,
            loss: eval.loss,
        });
        if eval.loss.combined < config.early_stop_threshold {
            break;
        }
        if !eval.grad.all_finite() {
            let message = "non-finite latent gradient; keeping the last finite latent".to_string();
            log::warn!("step {step}, iteration {iteration}: {message}");
            return Ok(StepOutcome {
                state,
                maps,
                warning: Some(GuidanceWarning {
                    step,
                    iteration,
                    message,
                }),
            });
        }
        let eta = config.eta;
        state.z = state.z.zip_map(&eval.grad, |z, g| z - eta * g)?;
    }
    Ok(StepOutcome {
        state,
        maps,
        warning: None,
    })
}

/// Phrase maps captured after the inner loop of one optimized step.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub step: usize,
    pub maps: Vec<EnhancedPhraseMap>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// `[3, size, size]` in `[0, 1]`.
    pub image: Tensor,
    /// Final sample in model space.
    pub z0: Tensor,
    pub trace: Vec<TraceRecord>,
    pub dumps: Vec<AttentionDump>,
    pub warnings: Vec<GuidanceWarning>,
}

/// The seed-determined starting latent.
pub fn initial_latent(model: &ToyDenoiser, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&model.config.latent_shape(), |_| rng.sample(StandardNormal))
}

/// Samples an image for `tokens`, optimizing the latent toward `layout`
/// during the first `optim_steps` sampler steps.
pub fn generate(tokens: &[usize], layout: &Layout, config: &GuidanceConfig, model: &ToyDenoiser) -> Result<Generation> {
    config.validate()?;
    let schedule = DdimSchedule::new(&model.schedule, config.total_steps)?.with_clipping(config.clip_sample);
    let targets = if config.optim_steps > 0 {
        phrase_targets(layout, model)?
    } else {
        Vec::new()
    };
    let uncond = model.vocab.unconditional();
    let mut state = LatentState {
        z: initial_latent(model, config.seed),
        t: config.total_steps,
        trace: Vec::new(),
    };
    let mut dumps = Vec::new();
    let mut warnings = Vec::new();
    for step in 1..=config.total_steps {
        if step <= config.optim_steps && !targets.is_empty() {
            let out = optimize_latent(state, tokens, &targets, config, model, &schedule, step)?;
            state = out.state;
            dumps.push(AttentionDump {
                step,
                maps: out.maps,
            });
            warnings.extend(out.warning);
        }
        let ts = schedule.train_step(state.t);
        let eps_c = model.predict_eps(&state.z, tokens, ts)?;
        let eps = if config.cfg_weight == 1.0 {
            eps_c
        } else {
            let eps_u = model.predict_eps(&state.z, &uncond, ts)?;
            cfg_combine(&eps_u, &eps_c, config.cfg_weight)?
        };
        state = ddim_step(state, &eps, &schedule)?;
    }
    Ok(Generation {
        image: latent_to_image(&state.z),
        z0: state.z,
        trace: state.trace,
        dumps,
        warnings,
    })
}
