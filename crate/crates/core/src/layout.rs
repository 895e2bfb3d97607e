//! Layout instructions and their rasterization onto attention grids.
//!
//! A layout file is line oriented:
//!
//! ```text
//! # comment
//! <sot> two red square <eot>
//! phrase 2,3 0.10 0.10 0.40 0.40
//! phrase 2,3 0.55 0.10 0.85 0.40
//! ```
//!
//! The first non-comment line holds the prompt tokens. Every following line
//! binds one box to a phrase; repeating the token index adds another box for
//! the same phrase. A phrase may name several tokens joined by commas, in which
//! case its attention map is the mean over those token columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Axis-aligned box in normalized image coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate().map_err(|m| Error::parse(0, "box", m))?;
        Ok(b)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("x1", self.x1), ("y1", self.y1), ("x2", self.x2), ("y2", self.y2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.x1 >= self.x2 {
            return Err("x1 >= x2".into());
        }
        if self.y1 >= self.y2 {
            return Err("y1 >= y2".into());
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }
}

/// A constrained phrase: the prompt tokens it names and one box per object.
#[derive(Debug, Clone, PartialEq)]
pub struct Phrase {
    /// Phrase index `i`: the first of its tokens.
    pub index: usize,
    pub tokens: Vec<usize>,
    pub boxes: Vec<BoundingBox>,
}

impl Phrase {
    pub fn object_count(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub prompt_tokens: Vec<String>,
    /// Sorted by phrase index.
    pub phrases: Vec<Phrase>,
}

impl Layout {
    pub fn new(prompt_tokens: Vec<String>, phrases: Vec<Phrase>) -> Result<Self> {
        let mut phrases = phrases;
        phrases.sort_by_key(|p| p.index);
        for p in &phrases {
            if p.boxes.is_empty() {
                return Err(Error::parse(0, "phrase", format!("phrase {} has no boxes", p.index)));
            }
            if let Some(&t) = p.tokens.iter().find(|&&t| t >= prompt_tokens.len()) {
                return Err(Error::parse(
                    0,
                    "token_index",
                    format!("token index {t} outside prompt of {} tokens", prompt_tokens.len()),
                ));
            }
        }
        Ok(Self {
            prompt_tokens,
            phrases,
        })
    }

    /// Per-phrase box counts `N_i` in phrase order.
    pub fn object_counts(&self) -> Vec<usize> {
        self.phrases.iter().map(Phrase::object_count).collect()
    }

    pub fn phrase(&self, index: usize) -> Option<&Phrase> {
        self.phrases.iter().find(|p| p.index == index)
    }

    /// Serializes back into the layout file format.
    pub fn to_text(&self) -> String {
        let mut out = self.prompt_tokens.join(" ");
        out.push('\n');
        for p in &self.phrases {
            let key = p
                .tokens
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            for b in &p.boxes {
                let _ = writeln!(out, "phrase {key} {} {} {} {}", b.x1, b.y1, b.x2, b.y2);
            }
        }
        out
    }
}

/// Parses a layout file.
pub fn parse_layout(text: &str) -> Result<Layout> {
    let mut prompt: Option<Vec<String>> = None;
    let mut groups: BTreeMap<Vec<usize>, Vec<BoundingBox>> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some(tokens) = &prompt else {
            prompt = Some(line.split_whitespace().map(str::to_string).collect());
            continue;
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "phrase" {
            return Err(Error::parse(line_no, "keyword", format!("expected `phrase`, got `{}`", fields[0])));
        }
        if fields.len() != 6 {
            return Err(Error::parse(
                line_no,
                "phrase",
                format!("expected 5 fields after `phrase`, got {}", fields.len() - 1),
            ));
        }
        let mut token_idx = Vec::new();
        for part in fields[1].split(',') {
            let t: usize = part
                .parse()
                .map_err(|_| Error::parse(line_no, "token_index", format!("`{part}` is not an index")))?;
            if t >= tokens.len() {
                return Err(Error::parse(
                    line_no,
                    "token_index",
                    format!("token index {t} outside prompt of {} tokens", tokens.len()),
                ));
            }
            token_idx.push(t);
        }
        let mut coords = [0.0; 4];
        for (k, name) in ["x1", "y1", "x2", "y2"].iter().enumerate() {
            let s = fields[2 + k];
            let v: f64 = s
                .parse()
                .map_err(|_| Error::parse(line_no, name, format!("`{s}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, name, "coordinate must be finite"));
            }
            coords[k] = v;
        }
        let b = BoundingBox {
            x1: coords[0],
            y1: coords[1],
            x2: coords[2],
            y2: coords[3],
        };
        if let Err(message) = b.validate() {
            let field = if message.starts_with("x1 >=") {
                "x2"
            } else if message.starts_with("y1 >=") {
                "y2"
            } else {
                message.split_whitespace().next().unwrap_or("box")
            }
            .to_string();
            return Err(Error::parse(line_no, &field, message));
        }
        groups.entry(token_idx).or_default().push(b);
    }
    let prompt_tokens =
        prompt.ok_or_else(|| Error::parse(1, "prompt", "layout file has no prompt line"))?;
    let phrases = groups
        .into_iter()
        .map(|(tokens, boxes)| Phrase {
            index: tokens[0],
            tokens,
            boxes,
        })
        .collect::<Vec<_>>();
    let mut seen = std::collections::BTreeSet::new();
    for p in &phrases {
        if !seen.insert(p.index) {
            return Err(Error::parse(
                0,
                "token_index",
                format!("phrase index {} is bound to two different token groups", p.index),
            ));
        }
    }
    Layout::new(prompt_tokens, phrases)
}

/// Binary grid of `height` rows by `width` columns, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl CellGrid {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.cells[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// 0/1 tensor of shape `[height, width]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| if self.cells[i] { 1.0 } else { 0.0 })
    }

    pub fn union(&self, other: &CellGrid) -> CellGrid {
        CellGrid {
            width: self.width,
            height: self.height,
            cells: self.cells.iter().zip(&other.cells).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// One-cell dilation over the 8-neighbourhood.
    pub fn dilate(&self) -> CellGrid {
        let mut out = CellGrid::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(self.height - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(self.width - 1) {
                        out.set(nx, ny, true);
                    }
                }
            }
        }
        out
    }
}

/// Interior, boundary and per-object masks for one phrase on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub grid_w: usize,
    pub grid_h: usize,
    pub interior: CellGrid,
    pub boundary: CellGrid,
    pub per_object: Vec<CellGrid>,
    /// `2 * (sum of box widths + sum of box heights)`, in cells.
    pub perimeter_sum: usize,
}

/// Rasterizes a phrase's boxes by the cell-center rule.
///
/// A cell belongs to a box when its center lies in `[x1, x2) x [y1, y2)`. The
/// boundary is the inner one-cell ring of each box (cells of the box with a
/// 4-neighbour outside that same box or outside the grid), unioned over boxes.
pub fn rasterize(boxes: &[BoundingBox], grid_w: usize, grid_h: usize) -> Result<MaskSet> {
    if grid_w < 4 || grid_h < 4 {
        return Err(Error::Resolution(format!(
            "grid {grid_w}x{grid_h} is smaller than the 4x4 minimum"
        )));
    }
    let mut interior = CellGrid::empty(grid_w, grid_h);
    let mut boundary = CellGrid::empty(grid_w, grid_h);
    let mut per_object = Vec::with_capacity(boxes.len());
    let mut width_sum = 0;
    let mut height_sum = 0;
    for (k, b) in boxes.iter().enumerate() {
        let cols: Vec<usize> = (0..grid_w)
            .filter(|&x| {
                let c = (x as f64 + 0.5) / grid_w as f64;
                b.x1 <= c && c < b.x2
            })
            .collect();
        let rows: Vec<usize> = (0..grid_h)
            .filter(|&y| {
                let c = (y as f64 + 0.5) / grid_h as f64;
                b.y1 <= c && c < b.y2
            })
            .collect();
        if cols.is_empty() || rows.is_empty() {
            return Err(Error::DegenerateBox {
                index: k,
                grid_w,
                grid_h,
            });
        }
        let mut mask = CellGrid::empty(grid_w, grid_h);
        for &y in &rows {
            for &x in &cols {
                mask.set(x, y, true);
            }
        }
        for &y in &rows {
            for &x in &cols {
                let outside = |nx: isize, ny: isize| {
                    nx < 0
                        || ny < 0
                        || nx >= grid_w as isize
                        || ny >= grid_h as isize
                        || !mask.get(nx as usize, ny as usize)
                };
                let (xi, yi) = (x as isize, y as isize);
                if outside(xi - 1, yi) || outside(xi + 1, yi) || outside(xi, yi - 1) || outside(xi, yi + 1) {
                    boundary.set(x, y, true);
                }
            }
        }
        interior = interior.union(&mask);
        width_sum += cols.len();
        height_sum += rows.len();
        per_object.push(mask);
    }
    Ok(MaskSet {
        grid_w,
        grid_h,
        interior,
        boundary,
        per_object,
        perimeter_sum: 2 * (width_sum + height_sum),
    })
}

/// Attention-grid shape `(grid_w, grid_h)` for an image whose height maps onto
/// `attention_resolution` cells.
pub fn grid_for_resolution(
    image_w: usize,
    image_h: usize,
    attention_resolution: usize,
) -> Result<(usize, usize)> {
    if attention_resolution == 0
        || !image_w.is_multiple_of(attention_resolution)
        || !image_h.is_multiple_of(attention_resolution)
    {
        return Err(Error::Resolution(format!(
            "attention resolution {attention_resolution} does not divide image {image_w}x{image_h}"
        )));
    }
    let factor = image_h / attention_resolution;
    if !image_w.is_multiple_of(factor) {
        return Err(Error::Resolution(format!(
            "downsampling factor {factor} does not divide image width {image_w}"
        )));
    }
    Ok((image_w / factor, attention_resolution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn minimal_layout() {
        let layout = parse_layout("<sot> a cat <eot>\nphrase 2 0.1 0.1 0.5 0.5\n").unwrap();
        assert_eq!(layout.phrases.len(), 1);
        assert_eq!(layout.object_counts(), vec![1]);
        assert_eq!(layout.phrases[0].index, 2);
    }

    #[test]
    fn inverted_box_names_line_and_field() {
        let err = parse_layout("<sot> a cat <eot>\n# c\nphrase 2 0.5 0.1 0.1 0.5\n").unwrap_err();
        match err {
            Error::Parse { line, field, message } => {
                assert_eq!(line, 3);
                assert_eq!(field, "x2");
                assert!(message.contains("x1 >= x2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_counts() {
        let text = "<sot> a cat and three dogs <eot>\n\
                    phrase 2 0.1 0.1 0.3 0.3\n\
                    phrase 5 0.5 0.1 0.6 0.3\n\
                    phrase 5 0.6 0.4 0.7 0.6 # second dog\n\
                    phrase 5 0.8 0.1 0.9 0.3\n";
        let layout = parse_layout(text).unwrap();
        assert_eq!(layout.object_counts(), vec![1, 3]);
        assert_eq!(parse_layout(&layout.to_text()).unwrap(), layout);
    }

    #[test]
    fn bad_token_index_and_numbers() {
        assert!(matches!(
            parse_layout("<sot> cat <eot>\nphrase 7 0.1 0.1 0.5 0.5"),
            Err(Error::Parse { field, .. }) if field == "token_index"
        ));
        assert!(matches!(
            parse_layout("<sot> cat <eot>\nphrase 1 0.1 abc 0.5 0.5"),
            Err(Error::Parse { field, .. }) if field == "y1"
        ));
        assert!(matches!(
            parse_layout("<sot> cat <eot>\nphrase 1 0.1 0.1 1.5 0.5"),
            Err(Error::Parse { field, .. }) if field == "x2"
        ));
    }

    #[test]
    fn multi_token_phrase() {
        let layout = parse_layout("<sot> red square <eot>\nphrase 1,2 0.1 0.1 0.5 0.5").unwrap();
        assert_eq!(layout.phrases[0].tokens, vec![1, 2]);
        assert_eq!(layout.phrases[0].index, 1);
    }

    #[test]
    fn full_frame_box() {
        let m = rasterize(&[bx(0.0, 0.0, 1.0, 1.0)], 16, 16).unwrap();
        assert_eq!(m.interior.count(), 256);
        assert_eq!(m.boundary.count(), 60);
        assert_eq!(m.perimeter_sum, 64);
    }

    /// Independent cell-center count for an axis-aligned box.
    fn brute_force(b: &BoundingBox, g: usize) -> (usize, usize) {
        let mut inside = vec![vec![false; g]; g];
        for (y, row) in inside.iter_mut().enumerate() {
            for (x, cell) in row.iter_mut().enumerate() {
                let cx = (x as f64 + 0.5) / g as f64;
                let cy = (y as f64 + 0.5) / g as f64;
                *cell = cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2;
            }
        }
        let mut interior = 0;
        let mut ring = 0;
        for y in 0..g {
            for x in 0..g {
                if !inside[y][x] {
                    continue;
                }
                interior += 1;
                let nbrs = [(x as i64 - 1, y as i64), (x as i64 + 1, y as i64), (x as i64, y as i64 - 1), (x as i64, y as i64 + 1)];
                if nbrs.iter().any(|&(nx, ny)| {
                    nx < 0 || ny < 0 || nx >= g as i64 || ny >= g as i64 || !inside[ny as usize][nx as usize]
                }) {
                    ring += 1;
                }
            }
        }
        (interior, ring)
    }

    #[test]
    fn centered_half_box() {
        let b = bx(0.25, 0.25, 0.75, 0.75);
        let m = rasterize(&[b], 16, 16).unwrap();
        assert_eq!(brute_force(&b, 16), (64, 28));
        assert_eq!(m.interior.count(), 64);
        assert_eq!(m.boundary.count(), 28);
        assert_eq!(m.perimeter_sum, 2 * (8 + 8));
    }

    #[test]
    fn disjoint_boxes_union() {
        let a = bx(0.0, 0.0, 0.25, 0.25);
        let b = bx(0.5, 0.5, 0.75, 0.75);
        let m = rasterize(&[a, b], 16, 16).unwrap();
        let ma = rasterize(&[a], 16, 16).unwrap();
        let mb = rasterize(&[b], 16, 16).unwrap();
        assert_eq!(m.interior, ma.interior.union(&mb.interior));
        assert_eq!(m.boundary, ma.boundary.union(&mb.boundary));
        assert!(m.per_object[0]
            .cells
            .iter()
            .zip(&m.per_object[1].cells)
            .all(|(&x, &y)| !(x && y)));
        assert_eq!(m.perimeter_sum, ma.perimeter_sum + mb.perimeter_sum);
    }

    #[test]
    fn degenerate_box_rejected() {
        let b = bx(0.50, 0.50, 0.51, 0.51);
        assert!(matches!(rasterize(&[b], 16, 16), Err(Error::DegenerateBox { .. })));
        assert!(rasterize(&[bx(0.0, 0.0, 1.0, 1.0)], 3, 16).is_err());
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_for_resolution(32, 32, 16).unwrap(), (16, 16));
        assert_eq!(grid_for_resolution(32, 32, 8).unwrap(), (8, 8));
        assert_eq!(grid_for_resolution(48, 32, 16).unwrap(), (24, 16));
        assert!(matches!(grid_for_resolution(32, 32, 12), Err(Error::Resolution(_))));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..0.8, 0.0f64..0.8, 0.13f64..0.5, 0.13f64..0.5).prop_map(|(x, y, w, h)| BoundingBox {
            x1: x,
            y1: y,
            x2: (x + w).min(1.0),
            y2: (y + h).min(1.0),
        })
    }

    proptest! {
        #[test]
        fn union_and_containment(boxes in prop::collection::vec(arb_box(), 1..5)) {
            let m = rasterize(&boxes, 16, 16).unwrap();
            let mut union = CellGrid::empty(16, 16);
            for o in &m.per_object {
                union = union.union(o);
            }
            prop_assert_eq!(&union, &m.interior);
            for (b, i) in m.boundary.cells.iter().zip(&m.interior.cells) {
                prop_assert!(!b || *i);
            }
        }

        #[test]
        fn enlarging_never_removes_cells(b in arb_box(), grow in 0.0f64..0.2) {
            let big = BoundingBox {
                x1: (b.x1 - grow).max(0.0),
                y1: (b.y1 - grow).max(0.0),
                x2: (b.x2 + grow).min(1.0),
                y2: (b.y2 + grow).min(1.0),
            };
            let small = rasterize(&[b], 16, 16).unwrap();
            let large = rasterize(&[big], 16, 16).unwrap();
            for (s, l) in small.interior.cells.iter().zip(&large.interior.cells) {
                prop_assert!(!s || *l);
            }
        }

        #[test]
        fn finer_grid_covers_coarser(boxes in prop::collection::vec(arb_box(), 1..4)) {
            let coarse = rasterize(&boxes, 8, 8).unwrap();
            let fine = rasterize(&boxes, 16, 16).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let any = fine.interior.get(2 * x, 2 * y)
                        || fine.interior.get(2 * x + 1, 2 * y)
                        || fine.interior.get(2 * x, 2 * y + 1)
                        || fine.interior.get(2 * x + 1, 2 * y + 1);
                    prop_assert!(!coarse.interior.get(x, y) || any);
                }
            }
        }
    }
}
