//! Cross/self attention maps, layer aggregation, self-attention enhancement
//! and min-max normalization of per-phrase maps.
//!
//! The differentiable forms live on a [`Tape`] so the guidance loop can push a
//! gradient from the layout losses back to the latent. The plain-tensor
//! functions wrap the same code on a throwaway tape.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Maps from one attention layer at that layer's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub grid_w: usize,
    pub grid_h: usize,
    /// `[hw x n]`, rows sum to one.
    pub cross: Tensor,
    /// `[hw x hw]`, rows sum to one.
    pub self_map: Tensor,
}

/// Per-layer maps plus their mean at the reference resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
    /// `(grid_w, grid_h)` of the aggregated maps.
    pub reference_resolution: (usize, usize),
    pub aggregated_cross: Tensor,
    pub aggregated_self: Tensor,
}

impl AttentionStack {
    pub fn from_layers(layers: Vec<AttentionLayer>) -> Result<Self> {
        let (aggregated_cross, aggregated_self, reference_resolution) = aggregate(&layers)?;
        Ok(Self {
            layers,
            reference_resolution,
            aggregated_cross,
            aggregated_self,
        })
    }
}

/// A phrase's enhanced attention, normalized to `[0, 1]`, shape `[grid_h, grid_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedPhraseMap {
    pub phrase_index: usize,
    pub map: Tensor,
}

impl EnhancedPhraseMap {
    pub fn grid(&self) -> (usize, usize) {
        (self.map.shape()[1], self.map.shape()[0])
    }
}

/// Layer maps recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub grid_w: usize,
    pub grid_h: usize,
    pub cross: Var,
    pub self_map: Var,
}

/// `softmax(query * key^T / sqrt(d))` over rows.
pub fn attention_var(tape: &mut Tape, query: Var, key: Var) -> Result<Var> {
    let (_, d) = tape.value(query).dims2()?;
    let (_, dk) = tape.value(key).dims2()?;
    if d != dk || d == 0 {
        return Err(Error::Dimension(format!(
            "query width {d} does not match key width {dk}"
        )));
    }
    let scores = tape.matmul_nt(query, key)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    tape.softmax_rows(scaled)
}

/// Pixel-to-token attention `[hw x n]`.
pub fn cross_attention(query: &Tensor, key: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let a = attention_var(&mut tape, q, k)?;
    Ok(tape.value(a).clone())
}

/// Pixel-to-pixel attention `[hw x hw]`; `key` comes from the visual features.
pub fn self_attention(query: &Tensor, key: &Tensor) -> Result<Tensor> {
    let (p, _) = query.dims2()?;
    let (pk, _) = key.dims2()?;
    if p != pk {
        return Err(Error::Dimension(format!(
            "self-attention needs one key per pixel: {p} queries, {pk} keys"
        )));
    }
    cross_attention(query, key)
}

/// Gather indices that nearest-neighbour upsample the rows of a
/// `[gh*gw x cols]` matrix to a `[rh*rw x cols]` one.
fn upsample_row_index(gw: usize, gh: usize, rw: usize, rh: usize) -> Vec<usize> {
    let (fx, fy) = (rw / gw, rh / gh);
    (0..rh * rw)
        .map(|p| {
            let (y, x) = (p / rw, p % rw);
            (y / fy) * gw + x / fx
        })
        .collect()
}

fn alignment(layers: &[(usize, usize)]) -> Result<(usize, usize)> {
    let reference = layers
        .iter()
        .copied()
        .max_by_key(|&(w, h)| w * h)
        .ok_or(Error::EmptyStack)?;
    for &(w, h) in layers {
        if reference.0 % w != 0 || reference.1 % h != 0 {
            return Err(Error::Resolution(format!(
                "layer grid {w}x{h} does not divide reference grid {}x{}",
                reference.0, reference.1
            )));
        }
    }
    Ok(reference)
}

/// Upsamples every layer to the largest grid and averages.
///
/// Cross maps repeat each coarse pixel's row. Self maps repeat along both
/// axes and divide by the number of fine key pixels per coarse one, so rows
/// stay stochastic after alignment.
pub fn aggregate_vars(tape: &mut Tape, layers: &[LayerVars]) -> Result<(Var, Var, (usize, usize))> {
    let grids: Vec<_> = layers.iter().map(|l| (l.grid_w, l.grid_h)).collect();
    let (rw, rh) = alignment(&grids)?;
    let p = rw * rh;
    let mut cross_sum: Option<Var> = None;
    let mut self_sum: Option<Var> = None;
    for l in layers {
        let (rows, n) = tape.value(l.cross).dims2()?;
        if rows != l.grid_w * l.grid_h || tape.value(l.self_map).shape() != [rows, rows] {
            return Err(Error::Dimension(format!(
                "layer maps do not match a {}x{} grid",
                l.grid_w, l.grid_h
            )));
        }
        let (cross, self_map) = if (l.grid_w, l.grid_h) == (rw, rh) {
            (l.cross, l.self_map)
        } else {
            let up = upsample_row_index(l.grid_w, l.grid_h, rw, rh);
            let cross_idx: Arc<[usize]> = up
                .iter()
                .flat_map(|&src| (0..n).map(move |j| src * n + j))
                .collect();
            let cross = tape.gather(l.cross, cross_idx, &[p, n])?;
            let self_idx: Arc<[usize]> = up
                .iter()
                .flat_map(|&src_row| up.iter().map(move |&src_col| src_row * rows + src_col))
                .collect();
            let s = tape.gather(l.self_map, self_idx, &[p, p])?;
            let per_coarse = (rw / l.grid_w) * (rh / l.grid_h);
            let s = tape.scale(s, 1.0 / per_coarse as f64)?;
            (cross, s)
        };
        cross_sum = Some(match cross_sum {
            Some(acc) => tape.add(acc, cross)?,
            None => cross,
        });
        self_sum = Some(match self_sum {
            Some(acc) => tape.add(acc, self_map)?,
            None => self_map,
        });
    }
    let inv = 1.0 / layers.len() as f64;
    let cross = tape.scale(cross_sum.ok_or(Error::EmptyStack)?, inv)?;
    let self_map = tape.scale(self_sum.ok_or(Error::EmptyStack)?, inv)?;
    Ok((cross, self_map, (rw, rh)))
}

/// Mean cross map `A_c` and mean self map `A_s` over layers, plus the
/// reference `(grid_w, grid_h)`.
pub fn aggregate(layers: &[AttentionLayer]) -> Result<(Tensor, Tensor, (usize, usize))> {
    if layers.is_empty() {
        return Err(Error::EmptyStack);
    }
    let mut tape = Tape::new();
    let vars: Vec<LayerVars> = layers
        .iter()
        .map(|l| LayerVars {
            grid_w: l.grid_w,
            grid_h: l.grid_h,
            cross: tape.constant(l.cross.clone()),
            self_map: tape.constant(l.self_map.clone()),
        })
        .collect();
    let (c, s, r) = aggregate_vars(&mut tape, &vars)?;
    Ok((tape.value(c).clone(), tape.value(s).clone(), r))
}

/// Mean of the given token columns of `A_c`, as an `[hw]` vector.
pub fn phrase_column_var(tape: &mut Tape, cross: Var, tokens: &[usize]) -> Result<Var> {
    let (first, rest) = tokens
        .split_first()
        .ok_or_else(|| Error::Dimension("phrase names no tokens".into()))?;
    let mut acc = tape.column(cross, *first)?;
    for &t in rest {
        let col = tape.column(cross, t)?;
        acc = tape.add(acc, col)?;
    }
    if rest.is_empty() {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / tokens.len() as f64)
    }
}

/// `(A_s)^tau * column` by repeated multiplication.
pub fn enhance_var(tape: &mut Tape, self_map: Var, column: Var, tau: u32) -> Result<Var> {
    let n = tape.value(column).len();
    let (r, c) = tape.value(self_map).dims2()?;
    if r != n || c != n {
        return Err(Error::Dimension(format!(
            "self map {r}x{c} cannot act on a column of {n}"
        )));
    }
    let mut v = tape.reshape(column, &[n, 1])?;
    for _ in 0..tau {
        v = tape.matmul(self_map, v)?;
    }
    tape.reshape(v, &[n])
}

pub fn enhance(self_map: &Tensor, column: &Tensor, tau: u32) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(self_map.clone());
    let c = tape.constant(column.clone());
    let v = enhance_var(&mut tape, s, c, tau)?;
    Ok(tape.value(v).clone())
}

/// `(v - min) / (max - min)` reshaped to `[grid_h, grid_w]`; a constant
/// vector maps to zeros.
pub fn normalize_reshape_var(tape: &mut Tape, v: Var, grid_w: usize, grid_h: usize) -> Result<Var> {
    let n = tape.value(v).len();
    if n != grid_w * grid_h {
        return Err(Error::Dimension(format!(
            "{n} values cannot be reshaped to {grid_w}x{grid_h}"
        )));
    }
    let lo = tape.min(v)?;
    let hi = tape.max(v)?;
    let range = tape.scalar(hi) - tape.scalar(lo);
    if range <= 0.0 {
        let zero = tape.scale(v, 0.0)?;
        return tape.reshape(zero, &[grid_h, grid_w]);
    }
    let shifted = tape.sub(v, lo)?;
    let width = tape.sub(hi, lo)?;
    let norm = tape.div(shifted, width)?;
    tape.reshape(norm, &[grid_h, grid_w])
}

pub fn normalize_reshape(
    v: &Tensor,
    grid_w: usize,
    grid_h: usize,
    phrase_index: usize,
) -> Result<EnhancedPhraseMap> {
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let m = normalize_reshape_var(&mut tape, x, grid_w, grid_h)?;
    Ok(EnhancedPhraseMap {
        phrase_index,
        map: tape.value(m).clone(),
    })
}

/// Enhanced, normalized map for one phrase from aggregated maps on a tape.
pub fn phrase_map_var(
    tape: &mut Tape,
    cross: Var,
    self_map: Var,
    tokens: &[usize],
    tau: u32,
    grid: (usize, usize),
) -> Result<Var> {
    let col = phrase_column_var(tape, cross, tokens)?;
    let enhanced = enhance_var(tape, self_map, col, tau)?;
    normalize_reshape_var(tape, enhanced, grid.0, grid.1)
}

/// Enhanced maps for every phrase of a stack.
pub fn phrase_maps(
    stack: &AttentionStack,
    phrases: &[(usize, Vec<usize>)],
    tau: u32,
) -> Result<Vec<EnhancedPhraseMap>> {
    let mut tape = Tape::new();
    let c = tape.constant(stack.aggregated_cross.clone());
    let s = tape.constant(stack.aggregated_self.clone());
    phrases
        .iter()
        .map(|(index, tokens)| {
            let m = phrase_map_var(&mut tape, c, s, tokens, tau, stack.reference_resolution)?;
            Ok(EnhancedPhraseMap {
                phrase_index: *index,
                map: tape.value(m).clone(),
            })
        })
        .collect()
}

/// File name for a phrase map dumped at a sampler step.
pub fn dump_file_name(step: usize, phrase: usize) -> String {
    format!("attn_t{step}_p{phrase}.txt")
}

/// Plain-text grid: one line per row, space-separated decimals.
pub fn map_to_text(map: &Tensor) -> String {
    let (h, w) = map.dims2().unwrap_or((1, map.len()));
    let mut out = String::with_capacity(h * w * 10);
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", map.data()[y * w + x]);
        }
        out.push('\n');
    }
    out
}

/// Parses a grid written by [`map_to_text`].
pub fn map_from_text(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| Error::parse(n + 1, "value", format!("`{s}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::parse(n + 1, "row", format!("expected {w} values, got {}", row.len())))
            }
            _ => {}
        }
        data.extend(row);
        height += 1;
    }
    Tensor::new(&[height, width.unwrap_or(0)], data)
}

/// 8-bit binary PGM of a map with values in `[0, 1]`.
pub fn map_to_pgm(map: &Tensor) -> Vec<u8> {
    let (h, w) = map.dims2().unwrap_or((1, map.len()));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_map_dump(dir: &Path, step: usize, map: &EnhancedPhraseMap, grayscale: bool) -> Result<()> {
    let path = dir.join(dump_file_name(step, map.phrase_index));
    std::fs::write(&path, map_to_text(&map.map)).map_err(|e| Error::io(&path, e))?;
    if grayscale {
        let pgm = path.with_extension("pgm");
        std::fs::write(&pgm, map_to_pgm(&map.map)).map_err(|e| Error::io(&pgm, e))?;
    }
    Ok(())
}
