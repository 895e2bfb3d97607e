//! Synthetic scenes of colored squares and circles with matching prompts and
//! ground-truth layouts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{COUNT_WORDS, END_TOKEN, START_TOKEN};
use crate::error::{Error, Result};
use crate::layout::{BoundingBox, Layout, Phrase};
use crate::numeric::Tensor;

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Color {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|c| c.word() == s)
            .ok_or_else(|| Error::UnknownToken(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
}

impl Shape {
    pub const ALL: [Shape; 2] = [Shape::Square, Shape::Circle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let singular = s.strip_suffix('s').unwrap_or(s);
        Shape::ALL
            .into_iter()
            .find(|c| c.word() == singular)
            .ok_or_else(|| Error::UnknownToken(s.to_string()))
    }
}

/// `count` objects of one color and shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectGroup {
    pub count: usize,
    pub color: Color,
    pub shape: Shape,
}

/// What a scene should contain, e.g. `two red square and one blue circle`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub groups: Vec<ObjectGroup>,
}

impl SceneSpec {
    pub fn total_objects(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    /// Prompt words including the start and end markers.
    pub fn prompt_words(&self) -> Vec<String> {
        let mut words = vec![START_TOKEN.to_string()];
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                words.push("and".into());
            }
            words.push(COUNT_WORDS[g.count - 1].into());
            words.push(g.color.word().into());
            words.push(g.shape.word().into());
        }
        words.push(END_TOKEN.into());
        words
    }

    /// Prompt positions of each group's color and shape words.
    pub fn phrase_tokens(&self) -> Vec<Vec<usize>> {
        (0..self.groups.len())
            .map(|i| {
                let count_pos = 1 + 4 * i;
                vec![count_pos + 1, count_pos + 2]
            })
            .collect()
    }

    /// A random spec with one or two groups and at most `max_objects` objects.
    pub fn random(rng: &mut impl Rng, max_objects: usize) -> Self {
        let max_objects = max_objects.clamp(1, COUNT_WORDS.len());
        let n_groups = if max_objects >= 2 && rng.gen_bool(0.5) { 2 } else { 1 };
        let mut groups: Vec<ObjectGroup> = Vec::with_capacity(n_groups);
        let mut left = max_objects;
        for g in 0..n_groups {
            let reserve = n_groups - g - 1;
            let count = rng.gen_range(1..=(left - reserve).min(3));
            left -= count;
            loop {
                let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
                let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
                if !groups.iter().any(|o| o.color == color && o.shape == shape) {
                    groups.push(ObjectGroup { count, color, shape });
                    break;
                }
            }
        }
        Self { groups }
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(" and ")?;
            }
            write!(f, "{} {} {}", COUNT_WORDS[g.count - 1], g.color, g.shape)?;
        }
        Ok(())
    }
}

impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let mut groups: Vec<ObjectGroup> = Vec::new();
        for (gi, chunk) in words.split(|w| *w == "and").enumerate() {
            let [count, color, shape] = chunk else {
                return Err(Error::parse(
                    0,
                    "group",
                    format!("group {} must be `<count> <color> <shape>`, got `{}`", gi + 1, chunk.join(" ")),
                ));
            };
            let count = match count.parse::<usize>() {
                Ok(n) => n,
                Err(_) => COUNT_WORDS
                    .iter()
                    .position(|w| w == count)
                    .map(|p| p + 1)
                    .ok_or_else(|| Error::parse(0, "count", format!("`{count}` is not a count")))?,
            };
            if !(1..=COUNT_WORDS.len()).contains(&count) {
                return Err(Error::parse(0, "count", format!("count {count} outside 1..=5")));
            }
            let color: Color = color
                .parse()
                .map_err(|_| Error::parse(0, "color", format!("unknown color `{color}`")))?;
            let shape: Shape = shape
                .parse()
                .map_err(|_| Error::parse(0, "shape", format!("unknown shape `{shape}`")))?;
            if groups.iter().any(|g| g.color == color && g.shape == shape) {
                return Err(Error::parse(0, "group", format!("{color} {shape} listed twice")));
            }
            groups.push(ObjectGroup { count, color, shape });
        }
        if groups.is_empty() {
            return Err(Error::parse(0, "group", "empty scene spec"));
        }
        Ok(Self { groups })
    }
}

/// Image size and object size range for scene rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_object: usize,
    pub max_object: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            min_object: 6,
            max_object: 10,
        }
    }
}

impl SceneConfig {
    /// Object sizes scaled for a smaller or larger canvas.
    pub fn for_size(image_size: usize) -> Self {
        let d = Self::default();
        Self {
            image_size,
            min_object: (d.min_object * image_size / d.image_size).max(2),
            max_object: (d.max_object * image_size / d.image_size).max(3),
        }
    }
}

/// One rendered object in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub group: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3, size, size]` in `[0, 1]`.
    pub image: Tensor,
    pub spec: SceneSpec,
    pub prompt_tokens: Vec<String>,
    pub layout: Layout,
    pub objects: Vec<PlacedObject>,
    pub seed: u64,
}

/// Minimum empty pixels between two objects, so their layout boxes (object
/// extent plus one pixel) never touch.
const GAP: usize = 3;
const PLACEMENT_RESTARTS: usize = 50;
const ATTEMPTS_PER_OBJECT: usize = 100;

fn separated(a: &PlacedObject, b: &PlacedObject) -> bool {
    a.x + a.size + GAP <= b.x
        || b.x + b.size + GAP <= a.x
        || a.y + a.size + GAP <= b.y
        || b.y + b.size + GAP <= a.y
}

fn place(spec: &SceneSpec, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<Vec<PlacedObject>> {
    let mut placed = Vec::with_capacity(spec.total_objects());
    for (gi, g) in spec.groups.iter().enumerate() {
        for _ in 0..g.count {
            let mut ok = false;
            for _ in 0..ATTEMPTS_PER_OBJECT {
                let size = rng.gen_range(cfg.min_object..=cfg.max_object);
                if size + 2 > cfg.image_size {
                    return None;
                }
                let hi = cfg.image_size - 1 - size;
                let cand = PlacedObject {
                    group: gi,
                    x: rng.gen_range(1..=hi),
                    y: rng.gen_range(1..=hi),
                    size,
                };
                if placed.iter().all(|p| separated(p, &cand)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                return None;
            }
        }
    }
    Some(placed)
}

/// Whether pixel `(i, j)` of an object's square footprint is painted.
pub fn shape_covers(shape: Shape, size: usize, i: usize, j: usize) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = size as f64 / 2.0;
            let dx = i as f64 + 0.5 - r;
            let dy = j as f64 + 0.5 - r;
            dx * dx + dy * dy <= r * r
        }
    }
}

pub fn make_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    make_scene_with(spec, seed, &SceneConfig::default())
}

pub fn make_scene_with(spec: &SceneSpec, seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    if spec.groups.is_empty() {
        return Err(Error::Placement("scene spec has no objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..PLACEMENT_RESTARTS)
        .find_map(|_| place(spec, cfg, &mut rng))
        .ok_or_else(|| {
            Error::Placement(format!(
                "`{spec}` does not fit on a {0}x{0} canvas",
                cfg.image_size
            ))
        })?;

    let s = cfg.image_size;
    let mut data = vec![0.0; 3 * s * s];
    for (c, &bg) in BACKGROUND.iter().enumerate() {
        data[c * s * s..(c + 1) * s * s].fill(bg);
    }
    for o in &objects {
        let g = spec.groups[o.group];
        let rgb = g.color.rgb();
        for j in 0..o.size {
            for i in 0..o.size {
                if shape_covers(g.shape, o.size, i, j) {
                    let p = (o.y + j) * s + o.x + i;
                    for (c, &v) in rgb.iter().enumerate() {
                        data[c * s * s + p] = v;
                    }
                }
            }
        }
    }
    let image = Tensor::new(&[3, s, s], data)?;

    let prompt_tokens = spec.prompt_words();
    let sf = s as f64;
    let phrases = spec
        .phrase_tokens()
        .into_iter()
        .enumerate()
        .map(|(gi, tokens)| {
            let boxes = objects
                .iter()
                .filter(|o| o.group == gi)
                .map(|o| {
                    BoundingBox::new(
                        (o.x - 1) as f64 / sf,
                        (o.y - 1) as f64 / sf,
                        (o.x + o.size + 1) as f64 / sf,
                        (o.y + o.size + 1) as f64 / sf,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Phrase {
                index: tokens[0],
                tokens,
                boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = Layout::new(prompt_tokens.clone(), phrases)?;
    Ok(SyntheticScene {
        image,
        spec: spec.clone(),
        prompt_tokens,
        layout,
        objects,
        seed,
    })
}

/// Parses a dataset manifest: one scene spec per line, `#` comments.
pub fn parse_manifest(text: &str) -> Result<Vec<SceneSpec>> {
    text.lines()
        .enumerate()
        .filter_map(|(n, raw)| {
            let line = raw.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| {
                line.parse::<SceneSpec>().map_err(|e| match e {
                    Error::Parse { field, message, .. } => Error::Parse {
                        line: n + 1,
                        field,
                        message,
                    },
                    other => other,
                })
            })
        })
        .collect()
}

/// `count` random specs, one per line.
pub fn random_manifest(count: usize, max_objects: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..count {
        out.push_str(&SceneSpec::random(&mut rng, max_objects).to_string());
        out.push('\n');
    }
    out
}

/// Renders every spec; scene `i` uses seed `base_seed + i`.
pub fn make_dataset(specs: &[SceneSpec], base_seed: u64, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| make_scene_with(s, base_seed.wrapping_add(i as u64), cfg))
        .collect()
}
