use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BoundingBox, MaskSet};
use crate::model::Color;
use crate::numeric::Tensor;

/// Per-phrase box counts and the derived correct / false / missed counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseCounts {
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_cor: usize,
    pub n_fal: usize,
    pub n_neg: usize,
}

impl PhraseCounts {
    pub fn new(n_pred: usize, n_gt: usize) -> Self {
        Self {
            n_pred,
            n_gt,
            n_cor: n_pred.min(n_gt),
            n_fal: n_pred.saturating_sub(n_gt),
            n_neg: n_gt.saturating_sub(n_pred),
        }
    }
}

/// Micro-averaged precision, recall and F1, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No predictions at all, so precision was reported as 0.
    pub precision_undefined: bool,
    /// No ground-truth boxes at all, so recall was reported as 0.
    pub recall_undefined: bool,
}

/// Sums correct, false and missed counts over phrases, then divides.
pub fn counting_metrics(counts: &[PhraseCounts]) -> CountingMetrics {
    let (cor, fal, neg) = counts.iter().fold((0usize, 0usize, 0usize), |(c, f, n), p| {
        (c + p.n_cor, f + p.n_fal, n + p.n_neg)
    });
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (100.0 * num as f64 / den as f64, false)
        }
    };
    let (precision, precision_undefined) = ratio(cor, cor + fal);
    let (recall, recall_undefined) = ratio(cor, cor + neg);
    CountingMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        precision_undefined,
        recall_undefined,
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
    Smaller,
    Larger,
}

impl Relation {
    fn is_spatial(self) -> bool {
        matches!(self, Relation::Left | Relation::Right | Relation::Above | Relation::Below)
    }

    fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Smaller => "smaller",
            Relation::Larger => "larger",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Relation::Left,
            Relation::Right,
            Relation::Above,
            Relation::Below,
            Relation::Smaller,
            Relation::Larger,
        ]
        .into_iter()
        .find(|r| r.word() == s)
        .ok_or_else(|| Error::Config(format!("unknown relation `{s}`")))
    }
}

/// A relation to check between the boxes predicted for two phrases. A missing
/// box counts as incorrect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationPair {
    pub a: Option<BoundingBox>,
    pub b: Option<BoundingBox>,
    pub relation: Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    /// `100 * correct / total`, or 0 when `total == 0`.
    pub percent: f64,
}

impl Accuracy {
    fn new(correct: usize, total: usize) -> Self {
        Self {
            correct,
            total,
            percent: if total == 0 {
                0.0
            } else {
                100.0 * correct as f64 / total as f64
            },
        }
    }
}

fn relation_holds(pair: &RelationPair) -> bool {
    let (Some(a), Some(b)) = (pair.a, pair.b) else {
        return false;
    };
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    match pair.relation {
        Relation::Left => ax < bx,
        Relation::Right => ax > bx,
        // Image rows grow downward.
        Relation::Above => ay < by,
        Relation::Below => ay > by,
        Relation::Smaller => a.area() < b.area(),
        Relation::Larger => a.area() > b.area(),
    }
}

fn relation_accuracy(pairs: &[RelationPair], spatial: bool) -> Result<Accuracy> {
    if let Some(p) = pairs.iter().find(|p| p.relation.is_spatial() != spatial) {
        return Err(Error::Config(format!(
            "relation `{}` is not a {} relation",
            p.relation,
            if spatial { "spatial" } else { "size" }
        )));
    }
    let correct = pairs.iter().filter(|p| relation_holds(p)).count();
    Ok(Accuracy::new(correct, pairs.len()))
}

/// Centroid comparisons for left / right / above / below; ties are incorrect.
pub fn spatial_accuracy(pairs: &[RelationPair]) -> Result<Accuracy> {
    relation_accuracy(pairs, true)
}

/// Area comparisons for smaller / larger; ties are incorrect.
pub fn size_accuracy(pairs: &[RelationPair]) -> Result<Accuracy> {
    relation_accuracy(pairs, false)
}

/// Fraction of phrases whose matched detection carries the expected color.
pub fn color_accuracy(predicted: &[Option<Color>], expected: &[Color]) -> Result<Accuracy> {
    if predicted.len() != expected.len() {
        return Err(Error::Dimension(format!(
            "{} predicted colors for {} phrases",
            predicted.len(),
            expected.len()
        )));
    }
    let correct = predicted
        .iter()
        .zip(expected)
        .filter(|(p, e)| **p == Some(**e))
        .count();
    Ok(Accuracy::new(correct, expected.len()))
}

/// Share of a phrase map's mass lying on cells covered by two or more
/// per-object masks after each is dilated by one cell (8-neighbourhood).
///
/// A map with no mass scores 0.
pub fn boundary_overlap_diagnostic(map: &Tensor, masks: &MaskSet) -> Result<f64> {
    if masks.per_object.len() < 2 {
        return Err(Error::DiagnosticUndefined(format!(
            "phrase has {} object(s); the overlap needs at least two",
            masks.per_object.len()
        )));
    }
    if map.shape() != [masks.grid_h, masks.grid_w] {
        return Err(Error::Dimension(format!(
            "map shape {:?} does not match mask grid {}x{}",
            map.shape(),
            masks.grid_w,
            masks.grid_h
        )));
    }
    let mut cover = vec![0usize; masks.grid_w * masks.grid_h];
    for m in &masks.per_object {
        for (c, &on) in cover.iter_mut().zip(&m.dilate().cells) {
            *c += on as usize;
        }
    }
    let total = map.sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let shared: f64 = map
        .data()
        .iter()
        .zip(&cover)
        .filter(|(_, &c)| c >= 2)
        .fold(0.0, |s, (&v, _)| s + v);
    Ok(shared / total)
}
