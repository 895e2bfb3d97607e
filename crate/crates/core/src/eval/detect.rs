//! Connected-component detector for rendered toy scenes.

use serde::{Deserialize, Serialize};

use crate::layout::{BoundingBox, Layout};
use crate::model::{Color, Shape, BACKGROUND, COLOR_WORDS, SHAPE_WORDS};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Detections with lower confidence are dropped.
    pub min_confidence: f64,
    /// Components with fewer pixels are treated as speckle.
    pub min_area: usize,
    /// Largest RGB distance at which a pixel still takes a palette color.
    pub color_tolerance: f64,
    /// Solidity at or above which a component is labelled a square.
    pub square_solidity: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.25,
            min_area: 4,
            color_tolerance: 0.35,
            square_solidity: 0.93,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Predicted category, `"<color> <shape>"`.
    pub label: String,
    /// Phrase this detection was assigned to, if any.
    pub phrase_index: Option<usize>,
    /// Normalized tight pixel box.
    pub bbox: BoundingBox,
    pub color: Color,
    pub shape: Shape,
    /// Component area over bounding-box area.
    pub confidence: f64,
}

impl Detection {
    pub fn centroid(&self) -> (f64, f64) {
        self.bbox.center()
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Palette index of each pixel, or `None` for background and unclassifiable
/// pixels.
fn classify(image: &Tensor, palette: &[Color], tol: f64) -> Vec<Option<usize>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    (0..h * w)
        .map(|p| {
            let px = [d[p], d[h * w + p], d[2 * h * w + p]];
            let bg = dist2(px, BACKGROUND);
            let (k, best) = palette
                .iter()
                .enumerate()
                .map(|(k, c)| (k, dist2(px, c.rgb())))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            (best < bg && best < tol * tol).then_some(k)
        })
        .collect()
}

/// One detection per 4-connected same-color component of a `[3, h, w]` image.
///
/// Components are visited in raster order of their first pixel, so the output
/// order is deterministic.
pub fn detect(image: &Tensor, palette: &[Color], cfg: &DetectorConfig) -> Vec<Detection> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || palette.is_empty() {
        return Vec::new();
    }
    let (h, w) = (shape[1], shape[2]);
    let labels = classify(image, palette, cfg.color_tolerance);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let Some(k) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut x0, mut y0, mut x1, mut y1) = (0usize, w, h, 0usize, 0usize);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == Some(k) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if area < cfg.min_area {
            continue;
        }
        let box_area = (x1 - x0 + 1) * (y1 - y0 + 1);
        let confidence = area as f64 / box_area as f64;
        if confidence < cfg.min_confidence {
            continue;
        }
        let color = palette[k];
        let shape = if confidence >= cfg.square_solidity {
            Shape::Square
        } else {
            Shape::Circle
        };
        let bbox = BoundingBox {
            x1: x0 as f64 / w as f64,
            y1: y0 as f64 / h as f64,
            x2: (x1 + 1) as f64 / w as f64,
            y2: (y1 + 1) as f64 / h as f64,
        };
        out.push(Detection {
            label: format!("{color} {shape}"),
            phrase_index: None,
            bbox,
            color,
            shape,
            confidence,
        });
    }
    out
}

/// Color and shape named by a phrase's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseCategory {
    pub phrase_index: usize,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
}

pub fn phrase_categories(layout: &Layout) -> Vec<PhraseCategory> {
    layout
        .phrases
        .iter()
        .map(|p| {
            let words: Vec<&str> = p.tokens.iter().map(|&t| layout.prompt_tokens[t].as_str()).collect();
            PhraseCategory {
                phrase_index: p.index,
                color: words
                    .iter()
                    .find(|w| COLOR_WORDS.contains(w))
                    .and_then(|w| w.parse().ok()),
                shape: words
                    .iter()
                    .find(|w| SHAPE_WORDS.contains(&w.trim_end_matches('s')))
                    .and_then(|w| w.parse().ok()),
            }
        })
        .collect()
}

/// Assigns each detection to a phrase of `layout`.
///
/// A detection is a candidate for every phrase whose color it carries (a
/// phrase naming no color accepts any). Among candidates, a matching shape
/// wins; remaining ties go to a phrase with a ground-truth box containing the
/// detection's centroid, then to the lowest phrase index. Detections with no
/// candidate stay unassigned.
pub fn assign_detections(detections: &mut [Detection], layout: &Layout) {
    let cats = phrase_categories(layout);
    for d in detections.iter_mut() {
        let (cx, cy) = d.centroid();
        d.phrase_index = cats
            .iter()
            .filter(|c| c.color.is_none_or(|col| col == d.color))
            .map(|c| {
                let shape_ok = c.shape.is_none_or(|s| s == d.shape);
                let inside = layout
                    .phrase(c.phrase_index)
                    .is_some_and(|p| p.boxes.iter().any(|b| b.contains(cx, cy)));
                ((shape_ok, inside), std::cmp::Reverse(c.phrase_index))
            })
            .max()
            .map(|(_, std::cmp::Reverse(i))| i);
    }
}

/// Highest-confidence detection assigned to `phrase_index`; earlier wins ties.
pub fn representative(detections: &[Detection], phrase_index: usize) -> Option<&Detection> {
    detections
        .iter()
        .filter(|d| d.phrase_index == Some(phrase_index))
        .fold(None, |best: Option<&Detection>, d| match best {
            Some(b) if b.confidence >= d.confidence => Some(b),
            _ => Some(d),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::parse_layout;
    use crate::model::{make_scene, SceneSpec};

    fn blank() -> Tensor {
        Tensor::full(&[3, 32, 32], 0.5)
    }

    fn paint(img: &mut Tensor, x: usize, y: usize, w: usize, h: usize, c: Color) {
        let rgb = c.rgb();
        let d = img.data_mut();
        for j in y..y + h {
            for i in x..x + w {
                for (ch, &v) in rgb.iter().enumerate() {
                    d[ch * 1024 + j * 32 + i] = v;
                }
            }
        }
    }

    #[test]
    fn blank_image_has_no_detections() {
        assert!(detect(&blank(), &Color::ALL, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn rendered_square_round_trip() {
        let scene = make_scene(&"one red square".parse::<SceneSpec>().unwrap(), 3).unwrap();
        let dets = detect(&scene.image, &Color::ALL, &DetectorConfig::default());
        assert_eq!(dets.len(), 1);
        let o = scene.objects[0];
        assert_eq!(dets[0].color, Color::Red);
        assert_eq!(dets[0].shape, Shape::Square);
        assert_eq!(dets[0].confidence, 1.0);
        let b = dets[0].bbox;
        assert_eq!(
            (b.x1, b.y1, b.x2, b.y2),
            (
                o.x as f64 / 32.0,
                o.y as f64 / 32.0,
                (o.x + o.size) as f64 / 32.0,
                (o.y + o.size) as f64 / 32.0
            )
        );
    }

    #[test]
    fn touching_squares_merge_into_one_component() {
        let mut img = blank();
        paint(&mut img, 4, 4, 6, 6, Color::Blue);
        paint(&mut img, 10, 4, 6, 6, Color::Blue);
        let dets = detect(&img, &Color::ALL, &DetectorConfig::default());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox.width(), 12.0 / 32.0);
    }

    #[test]
    fn speckle_and_sparse_components_dropped() {
        let mut img = blank();
        paint(&mut img, 2, 2, 1, 1, Color::Green);
        // An L shape one pixel thick inside a 10x10 box: solidity 0.19.
        paint(&mut img, 10, 10, 10, 1, Color::Yellow);
        paint(&mut img, 10, 11, 1, 9, Color::Yellow);
        assert!(detect(&img, &Color::ALL, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn circles_are_labelled_circles() {
        let scene = make_scene(&"three green circle".parse::<SceneSpec>().unwrap(), 8).unwrap();
        let dets = detect(&scene.image, &Color::ALL, &DetectorConfig::default());
        assert_eq!(dets.len(), 3);
        assert!(dets.iter().all(|d| d.shape == Shape::Circle && d.color == Color::Green));
    }

    #[test]
    fn assignment_prefers_color_then_shape_then_location() {
        let layout = parse_layout(
            "<sot> one red square and one red circle and one blue square <eot>\n\
             phrase 2,3 0.0 0.0 0.5 0.5\n\
             phrase 6,7 0.5 0.5 1.0 1.0\n\
             phrase 10,11 0.0 0.5 0.5 1.0\n",
        )
        .unwrap();
        let det = |color, shape, x: f64| Detection {
            label: String::new(),
            phrase_index: None,
            bbox: BoundingBox::new(x, x, x + 0.1, x + 0.1).unwrap(),
            color,
            shape,
            confidence: 1.0,
        };
        let mut dets = vec![
            det(Color::Red, Shape::Circle, 0.1),
            det(Color::Red, Shape::Square, 0.7),
            det(Color::Blue, Shape::Circle, 0.1),
            det(Color::Green, Shape::Square, 0.1),
        ];
        assign_detections(&mut dets, &layout);
        assert_eq!(dets[0].phrase_index, Some(6));
        assert_eq!(dets[1].phrase_index, Some(2));
        assert_eq!(dets[2].phrase_index, Some(10));
        assert_eq!(dets[3].phrase_index, None);
    }
}
