use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Linear beta schedule. `alpha_bar[0] = 1` is the clean sample and
/// `alpha_bar[t]` for `t` in `1..=train_steps` the cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..train_steps {
            let beta = if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self {
            train_steps,
            beta_start,
            beta_end,
            alpha_bar,
        }
    }

    /// Builds a schedule from explicit cumulative products (index 0 must be 1).
    /// The beta fields are set to zero since no linear ramp is implied.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.first() != Some(&1.0)
            || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a))
        {
            return Err(Error::Config(
                "alpha_bar must start at 1 and stay within [0, 1]".into(),
            ));
        }
        Ok(Self {
            train_steps: alpha_bar.len() - 1,
            beta_start: 0.0,
            beta_end: 0.0,
            alpha_bar,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::Timestep {
            t,
            max: self.train_steps,
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_noise(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(noise, |x, n| a * x + b * n)
}
