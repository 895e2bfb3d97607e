//! Detector oracle for toy scenes, detection-to-phrase matching, counting
//! precision / recall / F1, spatial, size and color accuracy, and the
//! attention overlap diagnostic.

mod detect;
mod io;
mod metrics;

pub use detect::{
    assign_detections, detect, phrase_categories, representative, Detection, DetectorConfig, PhraseCategory,
};
pub use io::{
    detections_from_csv, detections_to_csv, report_from_json, report_rows_from_csv, report_rows_to_csv,
    report_to_json, DETECTIONS_HEADER, REPORT_ROWS_HEADER,
};
pub use metrics::{
    boundary_overlap_diagnostic, color_accuracy, counting_metrics, f1_score, size_accuracy, spatial_accuracy,
    Accuracy, CountingMetrics, PhraseCounts, Relation, RelationPair,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layout::Layout;

/// Counts for one phrase of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt_id: String,
    pub phrase_index: usize,
    pub label: String,
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_cor: usize,
    pub n_fal: usize,
    pub n_neg: usize,
}

/// All metrics as percentages. Accuracies are `None` when no pair or phrase
/// qualified for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub spatial_acc: Option<f64>,
    pub size_acc: Option<f64>,
    pub color_acc: Option<f64>,
    pub rows: Vec<PromptRow>,
}

impl MetricsReport {
    /// Recomputes the counting metrics from the per-prompt rows; the
    /// accuracies are left as they are.
    pub fn recount(&mut self) {
        let counts: Vec<PhraseCounts> = self.rows.iter().map(|r| PhraseCounts::new(r.n_pred, r.n_gt)).collect();
        let m = counting_metrics(&counts);
        self.precision = m.precision;
        self.recall = m.recall;
        self.f1 = m.f1;
        self.precision_undefined = m.precision_undefined;
        self.recall_undefined = m.recall_undefined;
    }
}

/// One scored image: its ground-truth layout and its detections.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub image_id: String,
    pub layout: Layout,
    pub detections: Vec<Detection>,
}

fn phrase_label(layout: &Layout, tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| layout.prompt_tokens[t].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relation pairs implied by the ground truth: every pair of single-box
/// phrases gets its dominant-axis spatial relation and, when the areas
/// differ, its size relation.
fn relation_pairs(item: &EvalItem) -> (Vec<RelationPair>, Vec<RelationPair>) {
    let single: Vec<_> = item.layout.phrases.iter().filter(|p| p.boxes.len() == 1).collect();
    let mut spatial = Vec::new();
    let mut size = Vec::new();
    for (i, pa) in single.iter().enumerate() {
        for pb in &single[i + 1..] {
            let (ga, gb) = (pa.boxes[0], pb.boxes[0]);
            let a = representative(&item.detections, pa.index).map(|d| d.bbox);
            let b = representative(&item.detections, pb.index).map(|d| d.bbox);
            let ((ax, ay), (bx, by)) = (ga.center(), gb.center());
            let (dx, dy) = (bx - ax, by - ay);
            let relation = if dx.abs() >= dy.abs() && dx != 0.0 {
                Some(if dx > 0.0 { Relation::Left } else { Relation::Right })
            } else if dy != 0.0 {
                Some(if dy > 0.0 { Relation::Above } else { Relation::Below })
            } else {
                None
            };
            if let Some(relation) = relation {
                spatial.push(RelationPair { a, b, relation });
            }
            if ga.area() != gb.area() {
                let relation = if ga.area() < gb.area() {
                    Relation::Smaller
                } else {
                    Relation::Larger
                };
                size.push(RelationPair { a, b, relation });
            }
        }
    }
    (spatial, size)
}

/// Scores a batch. Detections without a phrase index are matched with
/// [`assign_detections`]; given indices are kept.
///
/// Color accuracy matches by location: a phrase's predicted color is that of
/// the highest-confidence detection whose centroid lies in one of its
/// ground-truth boxes, whatever phrase that detection was assigned to.
pub fn evaluate(items: &[EvalItem]) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut spatial = Vec::new();
    let mut size = Vec::new();
    let mut predicted_colors = Vec::new();
    let mut expected_colors = Vec::new();
    for item in items {
        let mut item = item.clone();
        let unassigned: Vec<usize> = (0..item.detections.len())
            .filter(|&i| item.detections[i].phrase_index.is_none())
            .collect();
        let mut pending: Vec<Detection> = unassigned.iter().map(|&i| item.detections[i].clone()).collect();
        assign_detections(&mut pending, &item.layout);
        for (&i, d) in unassigned.iter().zip(pending) {
            item.detections[i] = d;
        }

        for p in &item.layout.phrases {
            let n_pred = item.detections.iter().filter(|d| d.phrase_index == Some(p.index)).count();
            let c = PhraseCounts::new(n_pred, p.boxes.len());
            rows.push(PromptRow {
                prompt_id: item.image_id.clone(),
                phrase_index: p.index,
                label: phrase_label(&item.layout, &p.tokens),
                n_pred: c.n_pred,
                n_gt: c.n_gt,
                n_cor: c.n_cor,
                n_fal: c.n_fal,
                n_neg: c.n_neg,
            });
        }
        let (s, z) = relation_pairs(&item);
        spatial.extend(s);
        size.extend(z);
        for cat in phrase_categories(&item.layout) {
            let Some(expected) = cat.color else { continue };
            let phrase = item.layout.phrase(cat.phrase_index).expect("category from layout");
            let found = item
                .detections
                .iter()
                .filter(|d| {
                    let (cx, cy) = d.centroid();
                    phrase.boxes.iter().any(|b| b.contains(cx, cy))
                })
                .fold(None, |best: Option<&Detection>, d| match best {
                    Some(b) if b.confidence >= d.confidence => Some(b),
                    _ => Some(d),
                });
            predicted_colors.push(found.map(|d| d.color));
            expected_colors.push(expected);
        }
    }
    let non_empty = |a: Accuracy| (a.total > 0).then_some(a.percent);
    let mut report = MetricsReport {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        precision_undefined: false,
        recall_undefined: false,
        spatial_acc: non_empty(spatial_accuracy(&spatial)?),
        size_acc: non_empty(size_accuracy(&size)?),
        color_acc: non_empty(color_accuracy(&predicted_colors, &expected_colors)?),
        rows,
    };
    report.recount();
    Ok(report)
}
