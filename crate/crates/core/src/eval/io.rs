use std::fmt::Write as _;

use super::detect::Detection;
use super::{MetricsReport, PromptRow};
use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::{Color, Shape};

pub const DETECTIONS_HEADER: &str = "image_id,phrase_index,label,x1,y1,x2,y2,color,confidence";
pub const REPORT_ROWS_HEADER: &str = "prompt_id,phrase_index,label,n_pred,n_gt,n_cor,n_fal,n_neg";

/// One detection per row; unassigned detections leave `phrase_index` empty.
pub fn detections_to_csv(rows: &[(String, Detection)]) -> String {
    let mut out = String::from(DETECTIONS_HEADER);
    out.push('\n');
    for (id, d) in rows {
        let phrase = d.phrase_index.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{id},{phrase},{},{},{},{},{},{},{}",
            d.label, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.color, d.confidence
        );
    }
    out
}

fn fields(line: &str, n: usize, expected: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != expected {
        return Err(Error::parse(n, "row", format!("expected {expected} columns, got {}", f.len())));
    }
    Ok(f)
}

fn check_header(text: &str, header: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h.trim() == header => Ok(()),
        _ => Err(Error::parse(1, "header", format!("expected `{header}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, n: usize, field: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(n, field, format!("`{s}` is not a valid {field}")))
}

/// Reads a detections file. The shape comes from the label's shape word when
/// present and from the confidence otherwise.
pub fn detections_from_csv(text: &str) -> Result<Vec<(String, Detection)>> {
    check_header(text, DETECTIONS_HEADER)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let n = i + 1;
            let f = fields(line, n, 9)?;
            let phrase_index = if f[1].is_empty() {
                None
            } else {
                Some(parse_num(f[1], n, "phrase_index")?)
            };
            let coord = |k: usize, name: &str| parse_num::<f64>(f[k], n, name);
            let bbox = BoundingBox::new(coord(3, "x1")?, coord(4, "y1")?, coord(5, "x2")?, coord(6, "y2")?)
                .map_err(|e| Error::parse(n, "box", e.to_string()))?;
            let color: Color = f[7]
                .parse()
                .map_err(|_| Error::parse(n, "color", format!("unknown color `{}`", f[7])))?;
            let confidence: f64 = parse_num(f[8], n, "confidence")?;
            let shape = f[2]
                .split_whitespace()
                .find_map(|w| w.parse::<Shape>().ok())
                .unwrap_or(if confidence >= 0.93 { Shape::Square } else { Shape::Circle });
            Ok((
                f[0].to_string(),
                Detection {
                    label: f[2].to_string(),
                    phrase_index,
                    bbox,
                    color,
                    shape,
                    confidence,
                },
            ))
        })
        .collect()
}

pub fn report_to_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn report_from_json(text: &str) -> Result<MetricsReport> {
    Ok(serde_json::from_str(text)?)
}

pub fn report_rows_to_csv(rows: &[PromptRow]) -> String {
    let mut out = String::from(REPORT_ROWS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.prompt_id, r.phrase_index, r.label, r.n_pred, r.n_gt, r.n_cor, r.n_fal, r.n_neg
        );
    }
    out
}

pub fn report_rows_from_csv(text: &str) -> Result<Vec<PromptRow>> {
    check_header(text, REPORT_ROWS_HEADER)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let n = i + 1;
            let f = fields(line, n, 8)?;
            Ok(PromptRow {
                prompt_id: f[0].to_string(),
                phrase_index: parse_num(f[1], n, "phrase_index")?,
                label: f[2].to_string(),
                n_pred: parse_num(f[3], n, "n_pred")?,
                n_gt: parse_num(f[4], n, "n_gt")?,
                n_cor: parse_num(f[5], n, "n_cor")?,
                n_fal: parse_num(f[6], n, "n_fal")?,
                n_neg: parse_num(f[7], n, "n_neg")?,
            })
        })
        .collect()
}
