//! Tiny pre-norm vision transformer with per-block feature taps and a
//! per-token segmentation head.
//!
//! Features are token matrices of shape `(batch·n) × c`, `n = grid²`, with
//! tokens of each image in row-major grid order. There is no class token.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const BACKBONE: &str = "backbone/";
pub const DECODER: &str = "decoder/";

/// Called after every transformer block with that block's output; the
/// returned value replaces the feature fed to the next block.
pub trait FeatureHook {
    fn after_block(&mut self, graph: &mut Graph, layer: usize, feature: Var) -> Result<Var>;
}

pub fn block_name(layer: usize, part: &str) -> String {
    format!("{BACKBONE}blocks.{layer}.{part}")
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Fresh backbone and decoder parameters.
pub fn init_params(cfg: &BackboneConfig, rng: &mut impl Rng) -> ParamStore {
    let c = cfg.dim;
    let hidden = c * cfg.mlp_ratio;
    let patch_in = 3 * cfg.patch * cfg.patch;
    let resid = 1.0 / (2.0 * cfg.depth as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert(format!("{BACKBONE}patch.w"), normal(rng, &[patch_in, c], 1.0 / (patch_in as f64).sqrt()));
    p.insert(format!("{BACKBONE}patch.b"), Tensor::zeros(&[c]));
    for i in 0..cfg.depth {
        let s = 1.0 / (c as f64).sqrt();
        p.insert(block_name(i, "ln1.g"), Tensor::full(&[c], 1.0));
        p.insert(block_name(i, "ln1.b"), Tensor::zeros(&[c]));
        p.insert(block_name(i, "qkv.w"), normal(rng, &[c, 3 * c], s));
        p.insert(block_name(i, "qkv.b"), Tensor::zeros(&[3 * c]));
        p.insert(block_name(i, "proj.w"), normal(rng, &[c, c], s * resid));
        p.insert(block_name(i, "proj.b"), Tensor::zeros(&[c]));
        p.insert(block_name(i, "ln2.g"), Tensor::full(&[c], 1.0));
        p.insert(block_name(i, "ln2.b"), Tensor::zeros(&[c]));
        p.insert(block_name(i, "mlp1.w"), normal(rng, &[c, hidden], s));
        p.insert(block_name(i, "mlp1.b"), Tensor::zeros(&[hidden]));
        p.insert(block_name(i, "mlp2.w"), normal(rng, &[hidden, c], resid / (hidden as f64).sqrt()));
        p.insert(block_name(i, "mlp2.b"), Tensor::zeros(&[c]));
    }
    let d = cfg.decoder_dim;
    p.insert(format!("{DECODER}ln.g"), Tensor::full(&[c], 1.0));
    p.insert(format!("{DECODER}ln.b"), Tensor::zeros(&[c]));
    p.insert(format!("{DECODER}fc1.w"), normal(rng, &[c, d], 1.0 / (c as f64).sqrt()));
    p.insert(format!("{DECODER}fc1.b"), Tensor::zeros(&[d]));
    p.insert(format!("{DECODER}fc2.w"), normal(rng, &[d, cfg.num_classes], 1.0 / (d as f64).sqrt()));
    p.insert(format!("{DECODER}fc2.b"), Tensor::zeros(&[cfg.num_classes]));
    p
}

/// Fixed sinusoidal position code, `n × c`.
pub fn position_encoding(n: usize, c: usize) -> Tensor {
    let mut data = vec![0.0; n * c];
    for t in 0..n {
        for j in 0..c {
            let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / c as f64);
            let a = t as f64 * freq;
            data[t * c + j] = if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(&[n, c], data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: BackboneConfig,
}

impl SegModel {
    pub fn new(config: BackboneConfig) -> Self {
        SegModel { config }
    }

    /// Flattens each image into `(batch·n) × (3·p·p)` patch rows.
    pub fn patchify(&self, images: &[Tensor]) -> Result<Tensor> {
        let cfg = &self.config;
        let (s, p, grid) = (cfg.image_size, cfg.patch, cfg.grid());
        let width = 3 * p * p;
        let mut out = Vec::with_capacity(images.len() * grid * grid * width);
        for img in images {
            if img.shape() != [3, s, s] {
                return Err(Error::shape("patch_embed", img.shape(), &[3, s, s]));
            }
            let d = img.data();
            for gy in 0..grid {
                for gx in 0..grid {
                    for ch in 0..3 {
                        for py in 0..p {
                            for px in 0..p {
                                out.push(d[(ch * s + gy * p + py) * s + gx * p + px]);
                            }
                        }
                    }
                }
            }
        }
        if images.is_empty() {
            return Err(Error::Invalid("empty image batch".into()));
        }
        Tensor::new(&[images.len() * grid * grid, width], out)
    }

    pub fn patch_embed(&self, g: &mut Graph, params: &Bound, images: &[Tensor]) -> Result<Var> {
        let cfg = &self.config;
        let patches = g.constant(self.patchify(images)?);
        let x = g.matmul(patches, params.var(&format!("{BACKBONE}patch.w"))?)?;
        let x = g.add_bias(x, params.var(&format!("{BACKBONE}patch.b"))?)?;
        let pe = position_encoding(cfg.tokens(), cfg.dim);
        let mut tiled = Vec::with_capacity(images.len() * pe.numel());
        for _ in images {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::new(&[images.len() * cfg.tokens(), cfg.dim], tiled)?);
        g.add(x, pe)
    }

    fn block(&self, g: &mut Graph, params: &Bound, layer: usize, x: Var, batch: usize) -> Result<Var> {
        let v = |part: &str| params.var(&block_name(layer, part));
        let h = g.layer_norm(x, v("ln1.g")?, v("ln1.b")?)?;
        let qkv = g.matmul(h, v("qkv.w")?)?;
        let qkv = g.add_bias(qkv, v("qkv.b")?)?;
        let a = g.attention(qkv, batch, self.config.heads)?;
        let a = g.matmul(a, v("proj.w")?)?;
        let a = g.add_bias(a, v("proj.b")?)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, v("ln2.g")?, v("ln2.b")?)?;
        let h = g.matmul(h, v("mlp1.w")?)?;
        let h = g.add_bias(h, v("mlp1.b")?)?;
        let h = g.gelu(h);
        let h = g.matmul(h, v("mlp2.w")?)?;
        let h = g.add_bias(h, v("mlp2.b")?)?;
        g.add(x, h)
    }

    /// Runs every block and returns the (possibly hook-adjusted) feature
    /// after each one.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        params: &Bound,
        images: &[Tensor],
        mut hook: Option<&mut dyn FeatureHook>,
    ) -> Result<Vec<Var>> {
        let batch = images.len();
        let mut x = self.patch_embed(g, params, images)?;
        let mut feats = Vec::with_capacity(self.config.depth);
        for layer in 0..self.config.depth {
            x = self.block(g, params, layer, x, batch)?;
            if let Some(h) = hook.as_deref_mut() {
                x = h.after_block(g, layer, x)?;
            }
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("output of block {layer}")));
            }
            feats.push(x);
        }
        Ok(feats)
    }

    /// Per-pixel class logits, `(batch·S·S) × K`.
    pub fn decode(&self, g: &mut Graph, params: &Bound, feature: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        if g.shape(feature) != [batch * cfg.tokens(), cfg.dim] {
            return Err(Error::shape("decode", g.shape(feature), &[batch * cfg.tokens(), cfg.dim]));
        }
        let v = |part: &str| params.var(&format!("{DECODER}{part}"));
        let h = g.layer_norm(feature, v("ln.g")?, v("ln.b")?)?;
        let h = g.matmul(h, v("fc1.w")?)?;
        let h = g.add_bias(h, v("fc1.b")?)?;
        let h = g.relu(h);
        let h = g.matmul(h, v("fc2.w")?)?;
        let h = g.add_bias(h, v("fc2.b")?)?;
        g.upsample(h, batch, cfg.grid(), cfg.patch)
    }

    /// Full forward pass to per-pixel logits.
    pub fn logits(
        &self,
        g: &mut Graph,
        params: &Bound,
        images: &[Tensor],
        hook: Option<&mut dyn FeatureHook>,
    ) -> Result<Var> {
        let feats = self.forward_features(g, params, images, hook)?;
        let last = *feats.last().ok_or_else(|| Error::Invalid("depth is zero".into()))?;
        self.decode(g, params, last, images.len())
    }
}

/// Splits `(batch·S·S) × K` pixel logits into one `K × S × S` map per image.
pub fn logit_maps(logits: &Tensor, batch: usize, side: usize) -> Result<Vec<Tensor>> {
    let (rows, k) = logits.dims2()?;
    if rows != batch * side * side {
        return Err(Error::shape("logit_maps", logits.shape(), &[batch * side * side, k]));
    }
    let d = logits.data();
    (0..batch)
        .map(|b| {
            let mut m = vec![0.0; k * side * side];
            for p in 0..side * side {
                for c in 0..k {
                    m[c * side * side + p] = d[(b * side * side + p) * k + c];
                }
            }
            Tensor::new(&[k, side, side], m)
        })
        .collect()
}

/// Row-wise argmax with ties resolved toward the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
