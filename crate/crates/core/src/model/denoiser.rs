//! Two-level pixel-space denoiser with fused self/cross attention at each level.
//!
//! Features are `[pixels x channels]` matrices with pixels in row-major grid
//! order. The 2x2-patchified input grid is level one; a 2x2 merge gives level
//! two. Each attention block computes one query projection and uses it for both
//! the self map over the level's pixels and the cross map over prompt tokens.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::vocab::TokenVocabulary;
use crate::attention::{attention_var, AttentionLayer, AttentionStack, LayerVars};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Number of attention layers in every pass.
pub const ATTENTION_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square RGB input.
    pub image_size: usize,
    /// Channels at the patch grid (`image_size / 2` per side).
    pub width1: usize,
    /// Channels at the merged grid (`image_size / 4` per side).
    pub width2: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            width1: 32,
            width2: 64,
            attn_dim: 16,
            embed_dim: 16,
            time_dim: 32,
        }
    }
}

impl ModelConfig {
    /// A narrow model on a 16x16 canvas, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            width1: 8,
            width2: 12,
            attn_dim: 4,
            embed_dim: 4,
            time_dim: 8,
        }
    }

    pub fn grid1(&self) -> usize {
        self.image_size / 2
    }

    pub fn grid2(&self) -> usize {
        self.image_size / 4
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 4 and at least 16, got {}",
                self.image_size
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even".into()));
        }
        let dims = [self.width1, self.width2, self.attn_dim, self.embed_dim, self.time_dim];
        if dims.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in a fixed order.
    pub fn parameter_shapes(&self, vocab: usize) -> Vec<(String, Vec<usize>)> {
        let (c1, c2, d, de, tm) = (
            self.width1,
            self.width2,
            self.attn_dim,
            self.embed_dim,
            self.time_dim,
        );
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![vocab, de]),
            ("time.w".into(), vec![tm, tm]),
            ("time.b".into(), vec![tm]),
            ("time.w1".into(), vec![tm, c1]),
            ("time.w2".into(), vec![tm, c2]),
            ("in.w".into(), vec![12, c1]),
            ("in.b".into(), vec![c1]),
            ("down.w".into(), vec![4 * c1, c2]),
            ("down.b".into(), vec![c2]),
            ("up.w".into(), vec![c2, 4 * c1]),
            ("up.b".into(), vec![4 * c1]),
            ("fuse.w".into(), vec![2 * c1, c1]),
            ("fuse.b".into(), vec![c1]),
            ("out.w".into(), vec![c1, 12]),
            ("out.b".into(), vec![12]),
        ];
        for (name, c) in [("res1", c1), ("res2", c2), ("res3", c1)] {
            v.push((format!("{name}.dw"), vec![9, c]));
            v.push((format!("{name}.pw"), vec![c, c]));
            v.push((format!("{name}.b"), vec![c]));
        }
        for (name, c) in [("attn1", c1), ("attn2", c2)] {
            for w in ["wq", "wk", "wv"] {
                v.push((format!("{name}.{w}"), vec![c, d]));
            }
            v.push((format!("{name}.wke"), vec![de, d]));
            v.push((format!("{name}.wve"), vec![de, d]));
            v.push((format!("{name}.wo"), vec![d, c]));
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

/// Gather tables for the fixed reshuffles of a forward pass.
#[derive(Debug, Clone)]
struct Indices {
    patchify: Arc<[usize]>,
    merge: Arc<[usize]>,
    split: Arc<[usize]>,
    unpatchify: Arc<[usize]>,
}

impl Indices {
    fn new(cfg: &ModelConfig) -> Self {
        let (s, g, g2, c1) = (cfg.image_size, cfg.grid1(), cfg.grid2(), cfg.width1);
        let mut patchify = Vec::with_capacity(3 * s * s);
        for py in 0..g {
            for px in 0..g {
                for c in 0..3 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            patchify.push(c * s * s + (2 * py + dy) * s + 2 * px + dx);
                        }
                    }
                }
            }
        }
        let mut merge = Vec::with_capacity(g * g * c1);
        for qy in 0..g2 {
            for qx in 0..g2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..c1 {
                            merge.push(((2 * qy + dy) * g + 2 * qx + dx) * c1 + c);
                        }
                    }
                }
            }
        }
        let mut split = Vec::with_capacity(g * g * c1);
        for y in 0..g {
            for x in 0..g {
                for c in 0..c1 {
                    split.push(((y / 2) * g2 + x / 2) * 4 * c1 + ((y % 2) * 2 + x % 2) * c1 + c);
                }
            }
        }
        let mut unpatchify = Vec::with_capacity(3 * s * s);
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    unpatchify.push(((y / 2) * g + x / 2) * 12 + c * 4 + (y % 2) * 2 + x % 2);
                }
            }
        }
        Self {
            patchify: patchify.into(),
            merge: merge.into(),
            split: split.into(),
            unpatchify: unpatchify.into(),
        }
    }
}

/// Model parameters recorded on a tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// `(name, var)` pairs in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Recorded outputs of one forward pass.
pub struct Pass {
    /// `[3, size, size]` noise prediction; absent for attention-only passes.
    pub eps: Option<Var>,
    /// Attention maps from the fine layer then the coarse one.
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub config: ModelConfig,
    pub vocab: TokenVocabulary,
    pub schedule: NoiseSchedule,
    pub params: BTreeMap<String, Tensor>,
    indices: Indices,
}

impl PartialEq for ToyDenoiser {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.schedule == other.schedule
            && self.params == other.params
    }
}

fn sinusoid(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v.push((t as f64 * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v.push((t as f64 * freq).cos());
    }
    Tensor::from_parts(vec![1, dim], v)
}

impl ToyDenoiser {
    /// Randomly initialized model.
    pub fn new(
        config: ModelConfig,
        vocab: TokenVocabulary,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes(vocab.len()) {
            let std = if name.ends_with(".b") {
                0.0
            } else if name == "tok_emb" {
                1.0
            } else if name.ends_with(".dw") {
                1.0 / 3.0
            } else {
                let fan_in = shape[0] as f64;
                let gain = if name.ends_with(".wo") || name.ends_with(".pw") || name == "out.w" {
                    0.5
                } else {
                    1.0
                };
                gain / fan_in.sqrt()
            };
            let tensor = if std == 0.0 {
                Tensor::zeros(&shape)
            } else {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            params.insert(name, tensor);
        }
        Self::from_parts(config, vocab, schedule, params)
    }

    /// Assembles a model from stored parameters, checking every name and shape.
    pub fn from_parts(
        config: ModelConfig,
        vocab: TokenVocabulary,
        schedule: NoiseSchedule,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes(vocab.len());
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self {
            indices: Indices::new(&config),
            config,
            vocab,
            schedule,
            params,
        })
    }

    pub fn embedding_table(&self) -> &Tensor {
        &self.params["tok_emb"]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as differentiable inputs when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.var(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_inputs(&self, z_shape: &[usize], tokens: &[usize], t: usize) -> Result<()> {
        if z_shape != self.config.latent_shape() {
            return Err(Error::Dimension(format!(
                "latent shape {z_shape:?}, model expects {:?}",
                self.config.latent_shape()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Dimension("prompt has no tokens".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&k| k >= self.vocab.len()) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        if t > self.schedule.train_steps {
            return Err(Error::Timestep {
                t,
                max: self.schedule.train_steps,
            });
        }
        Ok(())
    }

    fn residual(&self, tape: &mut Tape, p: &BoundParams, h: Var, name: &str, grid: usize) -> Result<Var> {
        let n = tape.layer_norm_rows(h)?;
        let c = tape.dwconv3x3(n, p.get(&format!("{name}.dw")), grid, grid)?;
        let a = tape.silu(c)?;
        let o = tape.matmul(a, p.get(&format!("{name}.pw")))?;
        let o = tape.add(o, p.get(&format!("{name}.b")))?;
        tape.add(h, o)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        h: Var,
        emb: Var,
        name: &str,
        grid: usize,
    ) -> Result<(Var, LayerVars)> {
        let w = |s: &str| p.get(&format!("{name}.{s}"));
        let n = tape.layer_norm_rows(h)?;
        let q = tape.matmul(n, w("wq"))?;
        let k = tape.matmul(n, w("wk"))?;
        let v = tape.matmul(n, w("wv"))?;
        let self_map = attention_var(tape, q, k)?;
        let ke = tape.matmul(emb, w("wke"))?;
        let ve = tape.matmul(emb, w("wve"))?;
        let cross = attention_var(tape, q, ke)?;
        let sv = tape.matmul(self_map, v)?;
        let cv = tape.matmul(cross, ve)?;
        let mixed = tape.add(sv, cv)?;
        let o = tape.matmul(mixed, w("wo"))?;
        let out = tape.add(h, o)?;
        Ok((
            out,
            LayerVars {
                grid_w: grid,
                grid_h: grid,
                cross,
                self_map,
            },
        ))
    }

    /// Records a forward pass. With `decode == false` the pass stops after the
    /// last attention layer and returns no noise prediction.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        z: Var,
        tokens: &[usize],
        t: usize,
        decode: bool,
    ) -> Result<Pass> {
        self.check_inputs(tape.shape(z), tokens, t)?;
        let cfg = &self.config;
        let (g, g2) = (cfg.grid1(), cfg.grid2());

        let x = tape.gather(z, self.indices.patchify.clone(), &[g * g, 12])?;
        let rows: Arc<[usize]> = tokens
            .iter()
            .flat_map(|&k| (0..cfg.embed_dim).map(move |j| k * cfg.embed_dim + j))
            .collect();
        let emb = tape.gather(p.get("tok_emb"), rows, &[tokens.len(), cfg.embed_dim])?;

        let s = tape.constant(sinusoid(t, cfg.time_dim));
        let ht = tape.matmul(s, p.get("time.w"))?;
        let ht = tape.add(ht, p.get("time.b"))?;
        let ht = tape.silu(ht)?;
        let bias1 = tape.matmul(ht, p.get("time.w1"))?;
        let bias2 = tape.matmul(ht, p.get("time.w2"))?;

        let h = tape.matmul(x, p.get("in.w"))?;
        let h = tape.add(h, p.get("in.b"))?;
        let h = tape.add(h, bias1)?;
        let h = self.residual(tape, p, h, "res1", g)?;
        let (h, layer1) = self.attention(tape, p, h, emb, "attn1", g)?;
        let skip = h;

        let d = tape.gather(h, self.indices.merge.clone(), &[g2 * g2, 4 * cfg.width1])?;
        let h2 = tape.matmul(d, p.get("down.w"))?;
        let h2 = tape.add(h2, p.get("down.b"))?;
        let h2 = tape.add(h2, bias2)?;
        let h2 = self.residual(tape, p, h2, "res2", g2)?;
        let (h2, layer2) = self.attention(tape, p, h2, emb, "attn2", g2)?;
        let layers = vec![layer1, layer2];
        if !decode {
            return Ok(Pass { eps: None, layers });
        }

        let u = tape.matmul(h2, p.get("up.w"))?;
        let u = tape.add(u, p.get("up.b"))?;
        let u = tape.gather(u, self.indices.split.clone(), &[g * g, cfg.width1])?;
        let cat = tape.concat_cols(u, skip)?;
        let h = tape.matmul(cat, p.get("fuse.w"))?;
        let h = tape.add(h, p.get("fuse.b"))?;
        let h = self.residual(tape, p, h, "res3", g)?;
        let h = tape.layer_norm_rows(h)?;
        let o = tape.matmul(h, p.get("out.w"))?;
        let o = tape.add(o, p.get("out.b"))?;
        let shape = cfg.latent_shape();
        let eps = tape.gather(o, self.indices.unpatchify.clone(), &shape)?;
        Ok(Pass {
            eps: Some(eps),
            layers,
        })
    }

    /// Noise prediction plus every attention map of the pass.
    pub fn predict_noise(&self, z: &Tensor, tokens: &[usize], t: usize) -> Result<(Tensor, AttentionStack)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let pass = self.forward_var(&mut tape, &p, zv, tokens, t, true)?;
        let eps = tape.value(pass.eps.expect("decoding pass")).clone();
        let layers = pass
            .layers
            .iter()
            .map(|l| AttentionLayer {
                grid_w: l.grid_w,
                grid_h: l.grid_h,
                cross: tape.value(l.cross).clone(),
                self_map: tape.value(l.self_map).clone(),
            })
            .collect();
        Ok((eps, AttentionStack::from_layers(layers)?))
    }

    /// Noise prediction only.
    pub fn predict_eps(&self, z: &Tensor, tokens: &[usize], t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let pass = self.forward_var(&mut tape, &p, zv, tokens, t, true)?;
        Ok(tape.value(pass.eps.expect("decoding pass")).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(cfg: ModelConfig) -> ToyDenoiser {
        ToyDenoiser::new(cfg, TokenVocabulary::default(), NoiseSchedule::default(), 3).unwrap()
    }

    fn latent(cfg: &ModelConfig, scale: f64) -> Tensor {
        Tensor::from_fn(&cfg.latent_shape(), |i| scale * ((i as f64) * 0.61).sin())
    }

    #[test]
    fn output_shape_and_stochastic_rows() {
        let m = model(ModelConfig::default());
        let z = latent(&m.config, 1.0);
        let (eps, stack) = m.predict_noise(&z, &[0, 1, 5, 16], 500).unwrap();
        assert_eq!(eps.shape(), z.shape());
        assert_eq!(stack.layers.len(), ATTENTION_LAYERS);
        assert_eq!(stack.reference_resolution, (16, 16));
        for l in &stack.layers {
            for m in [&l.cross, &l.self_map] {
                let (r, c) = m.dims2().unwrap();
                for i in 0..r {
                    let s: f64 = (0..c).map(|j| m.at2(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let m = model(ModelConfig::default());
        let z = latent(&m.config, 100.0);
        let (eps, stack) = m.predict_noise(&z, &[0, 16], 1000).unwrap();
        assert!(eps.all_finite());
        assert!(stack.aggregated_self.all_finite());
    }

    #[test]
    fn deterministic_and_input_checks() {
        let m = model(ModelConfig::tiny());
        let z = latent(&m.config, 1.0);
        let a = m.predict_eps(&z, &[0, 2, 16], 10).unwrap();
        let b = m.predict_eps(&z, &[0, 2, 16], 10).unwrap();
        assert_eq!(a, b);
        let wrong = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(m.predict_eps(&wrong, &[0], 1), Err(Error::Dimension(_))));
        assert!(m.predict_eps(&z, &[99], 1).is_err());
        assert!(matches!(m.predict_eps(&z, &[0], 5000), Err(Error::Timestep { .. })));
    }

    #[test]
    fn attention_only_pass_matches_full_pass_maps() {
        let m = model(ModelConfig::tiny());
        let z = latent(&m.config, 1.0);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let short = m.forward_var(&mut tape, &p, zv, &[0, 3, 16], 40, false).unwrap();
        assert!(short.eps.is_none());
        let (_, stack) = m.predict_noise(&z, &[0, 3, 16], 40).unwrap();
        assert_eq!(tape.value(short.layers[1].cross), &stack.layers[1].cross);
    }

    #[test]
    fn index_tables_are_permutations() {
        let cfg = ModelConfig::default();
        let idx = Indices::new(&cfg);
        for table in [&idx.patchify, &idx.unpatchify] {
            let mut v = table.to_vec();
            v.sort_unstable();
            assert!(v.iter().enumerate().all(|(i, &x)| i == x));
        }
        let mut m = idx.merge.to_vec();
        m.sort_unstable();
        assert!(m.iter().enumerate().all(|(i, &x)| i == x));
        // unpatchify undoes patchify
        let composed: Vec<usize> = idx.unpatchify.iter().map(|&i| idx.patchify[i]).collect();
        assert!(composed.iter().enumerate().all(|(i, &x)| i == x));
    }
}
