//! Region, marginal and regularization losses over enhanced phrase maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::EnhancedPhraseMap;
use crate::error::{Error, Result};
use crate::layout::MaskSet;
use crate::numeric::{Tape, Tensor, Var};

/// Which loss terms enter the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    /// Region loss only.
    #[serde(rename = "r")]
    Region,
    /// Region plus marginal loss.
    #[serde(rename = "rm")]
    RegionMarginal,
    /// All three terms.
    #[default]
    #[serde(rename = "rmreg")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Region, Ablation::RegionMarginal, Ablation::Full];

    /// `(lambda, alpha)` after zeroing the terms this mode excludes.
    pub fn effective_weights(self, lambda: f64, alpha: f64) -> (f64, f64) {
        match self {
            Ablation::Region => (0.0, 0.0),
            Ablation::RegionMarginal => (lambda, 0.0),
            Ablation::Full => (lambda, alpha),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Region => "R",
            Ablation::RegionMarginal => "R+M",
            Ablation::Full => "R+M+Reg",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Region => "r",
            Ablation::RegionMarginal => "rm",
            Ablation::Full => "rmreg",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['+', '-', '_'], "").as_str() {
            "r" => Ok(Ablation::Region),
            "rm" => Ok(Ablation::RegionMarginal),
            "rmreg" => Ok(Ablation::Full),
            other => Err(Error::Config(format!("unknown ablation mode `{other}` (expected r, rm, rmreg)"))),
        }
    }
}

/// The three loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub region: f64,
    pub marginal: f64,
    pub regularization: f64,
    pub combined: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// A loss value plus the phrases whose maps carried no mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    /// Phrase positions scored at the worst case because their map sums to zero.
    pub zero_mass: Vec<usize>,
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub region: Var,
    pub marginal: Var,
    pub regularization: Var,
    pub zero_mass: Vec<usize>,
}

fn check_grid(tape: &Tape, map: Var, masks: &MaskSet) -> Result<()> {
    let shape = tape.shape(map);
    if shape != [masks.grid_h, masks.grid_w] {
        return Err(Error::Dimension(format!(
            "map shape {:?} does not match mask grid {}x{}",
            shape, masks.grid_w, masks.grid_h
        )));
    }
    Ok(())
}

fn masked_sum(tape: &mut Tape, map: Var, mask: &Tensor) -> Result<Var> {
    let m = tape.constant(mask.clone());
    let prod = tape.mul(map, m)?;
    tape.sum(prod)
}

fn mean_of(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = terms.len();
    let stacked = tape.concat(&terms)?;
    let s = tape.sum(stacked)?;
    tape.scale(s, 1.0 / n as f64)
}

/// `(1 - x)^2` for a scalar node.
fn one_minus_squared(tape: &mut Tape, x: Var) -> Result<Var> {
    let neg = tape.scale(x, -1.0)?;
    let d = tape.add_const(neg, 1.0)?;
    tape.square(d)
}

/// Records all three loss terms for a set of phrase maps.
pub fn loss_terms_var(tape: &mut Tape, maps: &[Var], masks: &[MaskSet]) -> Result<LossVars> {
    if maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} maps but {} mask sets",
            maps.len(),
            masks.len()
        )));
    }
    let mut region = Vec::with_capacity(maps.len());
    let mut marginal = Vec::with_capacity(maps.len());
    let mut regularization = Vec::with_capacity(maps.len());
    let mut zero_mass = Vec::new();
    for (i, (&map, m)) in maps.iter().zip(masks).enumerate() {
        check_grid(tape, map, m)?;
        let total = tape.sum(map)?;

        let boundary = masked_sum(tape, map, &m.boundary.to_tensor())?;
        marginal.push(tape.scale(boundary, 1.0 / m.perimeter_sum as f64)?);

        if tape.scalar(total) <= 0.0 {
            zero_mass.push(i);
            region.push(tape.constant(Tensor::scalar(1.0)));
            regularization.push(tape.constant(Tensor::scalar(1.0)));
            continue;
        }

        let inside = masked_sum(tape, map, &m.interior.to_tensor())?;
        let frac = tape.div(inside, total)?;
        region.push(one_minus_squared(tape, frac)?);

        let mut per_object = Vec::with_capacity(m.per_object.len());
        for obj in &m.per_object {
            let s = masked_sum(tape, map, &obj.to_tensor())?;
            per_object.push(tape.div(s, total)?);
        }
        let fracs = tape.concat(&per_object)?;
        let least = tape.min(fracs)?;
        regularization.push(one_minus_squared(tape, least)?);
    }
    Ok(LossVars {
        region: mean_of(tape, region)?,
        marginal: mean_of(tape, marginal)?,
        regularization: mean_of(tape, regularization)?,
        zero_mass,
    })
}

fn check_weights(lambda: f64, alpha: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) || !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got lambda = {lambda}, alpha = {alpha}"
        )));
    }
    Ok(())
}

/// Records `L_r + lambda L_m + alpha L_reg` with the ablation's weights and
/// returns it with the numeric breakdown.
pub fn combine_var(
    tape: &mut Tape,
    terms: &LossVars,
    lambda: f64,
    alpha: f64,
    ablation: Ablation,
) -> Result<(Var, LossBreakdown)> {
    check_weights(lambda, alpha)?;
    let (lambda, alpha) = ablation.effective_weights(lambda, alpha);
    let m = tape.scale(terms.marginal, lambda)?;
    let r = tape.scale(terms.regularization, alpha)?;
    let sum = tape.add(terms.region, m)?;
    let combined = tape.add(sum, r)?;
    let breakdown = LossBreakdown {
        region: tape.scalar(terms.region),
        marginal: tape.scalar(terms.marginal),
        regularization: tape.scalar(terms.regularization),
        combined: tape.scalar(combined),
        lambda,
        alpha,
    };
    Ok((combined, breakdown))
}

fn evaluate(maps: &[EnhancedPhraseMap], masks: &[MaskSet]) -> Result<(Tape, LossVars)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = maps.iter().map(|m| tape.constant(m.map.clone())).collect();
    let terms = loss_terms_var(&mut tape, &vars, masks)?;
    Ok((tape, terms))
}

/// Mean over phrases of `(1 - mass inside / total mass)^2`.
pub fn region_loss(maps: &[EnhancedPhraseMap], masks: &[MaskSet]) -> Result<LossTerm> {
    let (tape, t) = evaluate(maps, masks)?;
    Ok(LossTerm {
        value: tape.scalar(t.region),
        zero_mass: t.zero_mass,
    })
}

/// Mean over phrases of boundary mass divided by the summed box perimeters.
pub fn marginal_loss(maps: &[EnhancedPhraseMap], masks: &[MaskSet]) -> Result<LossTerm> {
    let (tape, t) = evaluate(maps, masks)?;
    Ok(LossTerm {
        value: tape.scalar(t.marginal),
        zero_mass: Vec::new(),
    })
}

/// Mean over phrases of `(1 - smallest per-object mass fraction)^2`.
pub fn regularization_loss(maps: &[EnhancedPhraseMap], masks: &[MaskSet]) -> Result<LossTerm> {
    let (tape, t) = evaluate(maps, masks)?;
    Ok(LossTerm {
        value: tape.scalar(t.regularization),
        zero_mass: t.zero_mass,
    })
}

pub fn combined_loss(
    region: f64,
    marginal: f64,
    regularization: f64,
    lambda: f64,
    alpha: f64,
    ablation: Ablation,
) -> Result<LossBreakdown> {
    check_weights(lambda, alpha)?;
    let (lambda, alpha) = ablation.effective_weights(lambda, alpha);
    Ok(LossBreakdown {
        region,
        marginal,
        regularization,
        combined: region + lambda * marginal + alpha * regularization,
        lambda,
        alpha,
    })
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based sampler step.
    pub step: usize,
    /// 1-based inner iteration within the step.
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub const TRACE_HEADER: &str = "step,iteration,L_r,L_m,L_reg,L_mac";

pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.iteration, r.loss.region, r.loss.marginal, r.loss.regularization, r.loss.combined
        ));
    }
    out
}

/// Parses a trace CSV. Weights are not stored in the file and come back as NaN.
pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        _ => return Err(Error::parse(1, "header", format!("expected `{TRACE_HEADER}`"))),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::parse(n + 1, "row", format!("expected 6 columns, got {}", f.len())));
            }
            let int = |k: usize, name: &str| {
                f[k].parse::<usize>()
                    .map_err(|_| Error::parse(n + 1, name, format!("`{}` is not an integer", f[k])))
            };
            let num = |k: usize, name: &str| {
                f[k].parse::<f64>()
                    .map_err(|_| Error::parse(n + 1, name, format!("`{}` is not a number", f[k])))
            };
            Ok(TraceRecord {
                step: int(0, "step")?,
                iteration: int(1, "iteration")?,
                loss: LossBreakdown {
                    region: num(2, "L_r")?,
                    marginal: num(3, "L_m")?,
                    regularization: num(4, "L_reg")?,
                    combined: num(5, "L_mac")?,
                    lambda: f64::NAN,
                    alpha: f64::NAN,
                },
            })
        })
        .collect()
}
