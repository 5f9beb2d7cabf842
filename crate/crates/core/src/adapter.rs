//! Mixture of frequency-aware adapters injected after backbone blocks.
//!
//! For the feature `F` (`n × c` per image) leaving block `i`:
//!
//! ```text
//! ΔF_spatial = W_up·ReLU(W_down·F)              per token, along channels
//! F_low, F_high = masked DFT split of F viewed as c × H × W
//! ΔF_low  = Adapter_low(F_low)
//! ΔF_high = Adapter_high(F_high)
//! w = softmax(R(mean_tokens(F)))                one weight triple per image
//! F̄ = F + α·Σ_k w_k·ΔF_k
//! ```
//!
//! Layers outside the frequency set only carry the spatial expert, giving
//! `F̄ = F + α·ΔF_spatial`. Experts are biasless and `W_up` starts at zero,
//! so a freshly built adapter leaves every feature unchanged.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureHook;
use crate::config::{AdapterConfig, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::spectral::TokenSplitter;
use crate::tensor::Tensor;

pub const PEFT: &str = "peft/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expert {
    Spatial,
    Low,
    High,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Spatial, Expert::Low, Expert::High];

    pub fn name(self) -> &'static str {
        match self {
            Expert::Spatial => "spatial",
            Expert::Low => "low",
            Expert::High => "high",
        }
    }
}

pub fn param_name(layer: usize, part: &str) -> String {
    format!("{PEFT}layer{layer}.{part}")
}

/// Adapter layout of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct MoALayer {
    pub layer: usize,
    /// Active experts in routing order.
    pub experts: Vec<Expert>,
    pub has_frequency: bool,
    pub rho: f64,
}

impl MoALayer {
    /// Router exists only when more than one expert competes.
    pub fn has_router(&self) -> bool {
        self.experts.len() > 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarthAdapter {
    pub layers: Vec<MoALayer>,
    pub dim: usize,
    pub rank: usize,
    pub grid: usize,
}

impl EarthAdapter {
    pub fn layer(&self, index: usize) -> Option<&MoALayer> {
        self.layers.iter().find(|l| l.layer == index)
    }

    pub fn frequency_layers(&self) -> impl Iterator<Item = &MoALayer> {
        self.layers.iter().filter(|l| l.has_frequency)
    }
}

/// Lays out adapters for every block and draws their initial parameters.
pub fn build_moa(
    backbone: &BackboneConfig,
    config: &AdapterConfig,
    rng: &mut impl Rng,
) -> Result<(EarthAdapter, ParamStore)> {
    if let Some(&l) = config.freq_layers.iter().find(|&&l| l >= backbone.depth) {
        return Err(Error::Range {
            name: "frequency layer",
            detail: format!("layer {l} with depth {}", backbone.depth),
        });
    }
    let (c, d) = (backbone.dim, config.dim);
    let toggles = config.experts;
    let mut layers = Vec::new();
    let mut params = ParamStore::new();
    for layer in 0..backbone.depth {
        let freq = config.freq_layers.contains(&layer);
        let experts: Vec<Expert> = Expert::ALL
            .into_iter()
            .filter(|e| match e {
                Expert::Spatial => toggles.spatial,
                Expert::Low => freq && toggles.low,
                Expert::High => freq && toggles.high,
            })
            .collect();
        if experts.is_empty() {
            continue;
        }
        // fixed draw order per layer so an expert's init does not depend on
        // which other experts are enabled
        let std = 1.0 / (c as f64).sqrt();
        let downs: Vec<Tensor> = (0..3)
            .map(|_| {
                let data = (0..c * d).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor::new(&[c, d], data).expect("shape")
            })
            .collect();
        for (e, down) in Expert::ALL.into_iter().zip(downs) {
            if experts.contains(&e) {
                params.insert(param_name(layer, &format!("{}.down", e.name())), down);
                params.insert(param_name(layer, &format!("{}.up", e.name())), Tensor::zeros(&[d, c]));
            }
        }
        let entry = MoALayer {
            layer,
            has_frequency: experts.iter().any(|e| *e != Expert::Spatial),
            experts,
            rho: config.cutoff,
        };
        if entry.has_router() {
            params.insert(param_name(layer, "router.w"), Tensor::zeros(&[c, entry.experts.len()]));
            params.insert(param_name(layer, "router.b"), Tensor::zeros(&[entry.experts.len()]));
        }
        params.insert(param_name(layer, "alpha"), Tensor::scalar(config.alpha_init));
        layers.push(entry);
    }
    Ok((
        EarthAdapter {
            layers,
            dim: c,
            rank: d,
            grid: backbone.grid(),
        },
        params,
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub down: Var,
    pub up: Var,
}

impl ExpertVars {
    pub fn bind(params: &Bound, layer: usize, expert: Expert) -> Result<Self> {
        Ok(ExpertVars {
            down: params.var(&param_name(layer, &format!("{}.down", expert.name())))?,
            up: params.var(&param_name(layer, &format!("{}.up", expert.name())))?,
        })
    }
}

/// `W_up·ReLU(W_down·F)` applied to each token row.
pub fn spatial_delta(g: &mut Graph, feature: Var, expert: ExpertVars) -> Result<Var> {
    let h = g.matmul(feature, expert.down)?;
    let h = g.relu(h);
    g.matmul(h, expert.up)
}

/// Splits `feature` into low and high frequency parts and runs each through
/// its own expert. Returns `(ΔF_low, ΔF_high)`.
pub fn frequency_deltas(
    g: &mut Graph,
    feature: Var,
    low: ExpertVars,
    high: ExpertVars,
    splitter: &TokenSplitter,
) -> Result<(Var, Var)> {
    let f_low = g.frequency(feature, splitter, true)?;
    let f_high = g.frequency(feature, splitter, false)?;
    Ok((spatial_delta(g, f_low, low)?, spatial_delta(g, f_high, high)?))
}

/// Softmax of a linear map applied to the token mean of each image.
/// Returns `batch × experts` weights.
pub fn router_weights(g: &mut Graph, feature: Var, weight: Var, bias: Var, tokens: usize) -> Result<Var> {
    let pooled = g.mean_groups(feature, tokens)?;
    let logits = g.matmul(pooled, weight)?;
    let logits = g.add_bias(logits, bias)?;
    g.softmax(logits, 1)
}

/// `F + α·Σ_k w_k·ΔF_k`. Without router weights the single delta is used
/// as is.
pub fn aggregate_inject(
    g: &mut Graph,
    feature: Var,
    deltas: &[Var],
    weights: Option<Var>,
    alpha: Var,
    tokens: usize,
) -> Result<Var> {
    let delta = aggregate(g, deltas, weights, alpha, tokens)?;
    g.add(feature, delta)
}

/// `α·Σ_k w_k·ΔF_k`.
pub fn aggregate(g: &mut Graph, deltas: &[Var], weights: Option<Var>, alpha: Var, tokens: usize) -> Result<Var> {
    let mixed = match weights {
        None => match deltas {
            [only] => *only,
            _ => return Err(Error::Invalid(format!("{} deltas need router weights", deltas.len()))),
        },
        Some(w) => {
            if g.shape(w).get(1) != Some(&deltas.len()) {
                return Err(Error::shape("aggregate_inject", g.shape(w), &[deltas.len()]));
            }
            let mut acc: Option<Var> = None;
            for (k, d) in deltas.iter().enumerate() {
                let term = g.scale_groups(*d, w, tokens, k)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            acc.ok_or_else(|| Error::Invalid("no deltas".into()))?
        }
    };
    g.scale_by(mixed, alpha)
}

/// Per-layer intermediate values recorded during a hooked forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub layer: usize,
    pub input: Var,
    pub deltas: Vec<(Expert, Var)>,
    pub weights: Option<Var>,
    /// `α·Σ w_k ΔF_k`
    pub aggregated: Var,
}

/// [`FeatureHook`] that applies an [`EarthAdapter`] bound into a graph.
pub struct MoAHook<'a> {
    adapter: &'a EarthAdapter,
    params: &'a Bound,
    batch: usize,
    pub traces: Vec<LayerTrace>,
}

impl<'a> MoAHook<'a> {
    pub fn new(adapter: &'a EarthAdapter, params: &'a Bound, batch: usize) -> Self {
        MoAHook {
            adapter,
            params,
            batch,
            traces: Vec::new(),
        }
    }

    pub fn trace(&self, layer: usize) -> Option<&LayerTrace> {
        self.traces.iter().find(|t| t.layer == layer)
    }
}

impl FeatureHook for MoAHook<'_> {
    fn after_block(&mut self, g: &mut Graph, layer: usize, feature: Var) -> Result<Var> {
        let Some(spec) = self.adapter.layer(layer) else {
            return Ok(feature);
        };
        let tokens = self.adapter.grid * self.adapter.grid;
        let mut deltas = Vec::with_capacity(spec.experts.len());
        if spec.experts.contains(&Expert::Spatial) {
            let e = ExpertVars::bind(self.params, layer, Expert::Spatial)?;
            deltas.push((Expert::Spatial, spatial_delta(g, feature, e)?));
        }
        if spec.has_frequency {
            let splitter = TokenSplitter::new(self.batch, self.adapter.grid, self.adapter.grid, self.adapter.dim, spec.rho)?;
            for (expert, keep_low) in [(Expert::Low, true), (Expert::High, false)] {
                if spec.experts.contains(&expert) {
                    let e = ExpertVars::bind(self.params, layer, expert)?;
                    let part = g.frequency(feature, &splitter, keep_low)?;
                    deltas.push((expert, spatial_delta(g, part, e)?));
                }
            }
        }
        let weights = if spec.has_router() {
            let w = self.params.var(&param_name(layer, "router.w"))?;
            let b = self.params.var(&param_name(layer, "router.b"))?;
            Some(router_weights(g, feature, w, b, tokens)?)
        } else {
            None
        };
        let alpha = self.params.var(&param_name(layer, "alpha"))?;
        let only: Vec<Var> = deltas.iter().map(|(_, v)| *v).collect();
        let aggregated = aggregate(g, &only, weights, alpha, tokens)?;
        let out = g.add(feature, aggregated)?;
        self.traces.push(LayerTrace {
            layer,
            input: feature,
            deltas,
            weights,
            aggregated,
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExpertToggles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn zero_up_projection_gives_zero_delta() {
        let mut g = Graph::new();
        let f = g.constant(t(&[4, 6], |i| (i as f64 * 0.37).sin()));
        let e = ExpertVars {
            down: g.constant(t(&[6, 3], |i| i as f64 * 0.1 - 0.5)),
            up: g.constant(Tensor::zeros(&[3, 6])),
        };
        let d = spatial_delta(&mut g, f, e).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_expert_on_nonnegative_feature() {
        let mut g = Graph::new();
        let x = t(&[4, 5], |i| (i % 7) as f64 * 0.5);
        let f = g.constant(x.clone());
        let e = ExpertVars {
            down: g.constant(Tensor::eye(5)),
            up: g.constant(Tensor::eye(5)),
        };
        let d = spatial_delta(&mut g, f, e).unwrap();
        assert_eq!(g.value(d), &x);
    }

    #[test]
    fn constant_channels_have_no_high_part() {
        let mut g = Graph::new();
        // 1 image, 4x4 grid, 3 channels; each channel constant over tokens
        let f = g.constant(t(&[16, 3], |i| [1.5, -2.0, 0.25][i % 3]));
        let mk = |g: &mut Graph, s: f64| ExpertVars {
            down: g.constant(t(&[3, 2], |i| s * (i as f64 + 1.0))),
            up: g.constant(t(&[2, 3], |i| s - i as f64 * 0.3)),
        };
        let (low, high) = (mk(&mut g, 0.5), mk(&mut g, -0.7));
        let sp = TokenSplitter::new(1, 4, 4, 3, 0.3).unwrap();
        let (_, dh) = frequency_deltas(&mut g, f, low, high, &sp).unwrap();
        assert!(g.value(dh).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_pass_mask_routes_everything_low() {
        let mut g = Graph::new();
        let f = g.constant(t(&[16, 3], |i| ((i * 31) % 17) as f64 / 5.0 - 1.0));
        let low = ExpertVars {
            down: g.constant(t(&[3, 2], |i| 0.3 * i as f64 - 0.4)),
            up: g.constant(t(&[2, 3], |i| 0.2 * i as f64 + 0.1)),
        };
        let high = ExpertVars {
            down: g.constant(t(&[3, 2], |i| 0.5 - 0.1 * i as f64)),
            up: g.constant(t(&[2, 3], |i| 1.0 - 0.2 * i as f64)),
        };
        let sp = TokenSplitter::new(1, 4, 4, 3, 1.0).unwrap();
        let (dl, dh) = frequency_deltas(&mut g, f, low, high, &sp).unwrap();
        let direct = spatial_delta(&mut g, f, low).unwrap();
        assert!(g.value(dl).max_abs_diff(g.value(direct)) < 1e-12);
        assert!(g.value(dh).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn router_examples() {
        let mut g = Graph::new();
        let f = g.constant(t(&[8, 4], |i| (i as f64).cos()));
        let w = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let r = router_weights(&mut g, f, w, b, 4).unwrap();
        assert_eq!(g.shape(r), &[2, 3]);
        assert!(g.value(r).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let b = g.constant(Tensor::new(&[3], vec![2f64.ln(), 0., 0.]).unwrap());
        let r = router_weights(&mut g, f, w, b, 4).unwrap();
        for row in g.value(r).data().chunks(3) {
            assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] - 0.25).abs() < 1e-15 && (row[2] - 0.25).abs() < 1e-15);
        }
        let w = g.constant(t(&[4, 3], |i| (i as f64 * 1.7).sin() * 3.0));
        let r = router_weights(&mut g, f, w, b, 4).unwrap();
        for row in g.value(r).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut g = Graph::new();
        let x = t(&[4, 2], |i| i as f64);
        let f = g.constant(x.clone());
        let ones = g.constant(Tensor::full(&[4, 2], 1.0));
        let other = g.constant(Tensor::full(&[4, 2], 7.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let alpha = g.constant(Tensor::scalar(0.01));
        let third = g.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
        let onehot = g.constant(Tensor::new(&[1, 3], vec![1., 0., 0.]).unwrap());

        let out = aggregate_inject(&mut g, f, &[ones, other, other], Some(third), zero, 4).unwrap();
        assert_eq!(g.value(out), &x);

        let out = aggregate_inject(&mut g, f, &[ones, other, other], Some(onehot), alpha, 4).unwrap();
        assert_eq!(g.value(out), &x.map(|v| v + 0.01));

        let out = aggregate_inject(&mut g, f, &[ones, ones, ones], Some(third), alpha, 4).unwrap();
        assert!(g.value(out).max_abs_diff(&x.map(|v| v + 0.01)) < 1e-15);

        let out = aggregate_inject(&mut g, f, &[other], None, alpha, 4).unwrap();
        assert!(g.value(out).max_abs_diff(&x.map(|v| v + 0.07)) < 1e-15);

        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(aggregate_inject(&mut g, f, &[bad], None, alpha, 4).is_err());
    }

    #[test]
    fn default_layout_and_parameter_count() {
        let bb = BackboneConfig::default();
        let (moa, params) = build_moa(&bb, &AdapterConfig::default(), &mut rng()).unwrap();
        assert_eq!(moa.layers.len(), 8);
        assert_eq!(moa.frequency_layers().count(), 3);
        assert_eq!(moa.frequency_layers().map(|l| l.layer).collect::<Vec<_>>(), vec![5, 6, 7]);
        // count by enumeration of the layout
        let (c, d) = (64usize, 16usize);
        let expert = 2 * c * d;
        let mut expected = 0;
        for layer in 0..8 {
            let freq = layer >= 5;
            let experts = if freq { 3 } else { 1 };
            expected += experts * expert + 1;
            if freq {
                expected += c * 3 + 3;
            }
        }
        assert_eq!(expected, 29_265);
        assert_eq!(params.scalar_count(), expected);
        for (k, v) in params.iter() {
            if k.ends_with(".up") {
                assert!(v.data().iter().all(|&x| x == 0.0));
            }
            if k.ends_with("alpha") {
                assert_eq!(v.data(), &[0.01]);
            }
        }
    }

    #[test]
    fn empty_frequency_set_is_spatial_baseline() {
        let bb = BackboneConfig::default();
        let cfg = AdapterConfig {
            freq_layers: vec![],
            ..AdapterConfig::default()
        };
        let (moa, params) = build_moa(&bb, &cfg, &mut rng()).unwrap();
        assert_eq!(moa.layers.len(), 8);
        assert!(moa.layers.iter().all(|l| l.experts == vec![Expert::Spatial] && !l.has_router()));
        assert!(!params.names().any(|n| n.contains("router") || n.contains("low") || n.contains("high")));
    }

    #[test]
    fn out_of_range_layer_is_rejected() {
        let cfg = AdapterConfig {
            freq_layers: vec![8],
            ..AdapterConfig::default()
        };
        assert!(build_moa(&BackboneConfig::default(), &cfg, &mut rng()).is_err());
    }

    #[test]
    fn spatial_init_is_independent_of_frequency_experts() {
        let bb = BackboneConfig::default();
        let (_, full) = build_moa(&bb, &AdapterConfig::default(), &mut rng()).unwrap();
        let (_, spatial) = build_moa(&bb, &AdapterConfig::default().spatial_only(), &mut rng()).unwrap();
        for (k, v) in spatial.iter() {
            if k.contains("spatial") {
                assert_eq!(full.get(k).unwrap(), v, "{k}");
            }
        }
    }

    #[test]
    fn toggles_restrict_experts() {
        let bb = BackboneConfig::default();
        let cfg = AdapterConfig {
            experts: ExpertToggles {
                spatial: false,
                low: true,
                high: false,
            },
            ..AdapterConfig::default()
        };
        let (moa, _) = build_moa(&bb, &cfg, &mut rng()).unwrap();
        assert_eq!(moa.layers.len(), 3);
        assert!(moa.layers.iter().all(|l| l.experts == vec![Expert::Low] && !l.has_router()));
    }
}
