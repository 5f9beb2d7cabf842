//! Source pretraining, supervised DG fine-tuning and DACS-style UDA
//! self-training with an EMA teacher, pseudo-labels and ClassMix.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{build_moa, EarthAdapter, MoAHook, PEFT};
use crate::autodiff::{Graph, Var};
use crate::backbone::{self, argmax_rows, SegModel, BACKBONE, DECODER};
use crate::bench::{classes_present, evaluate, mix_seed, Benchmark, Domain, Evaluation, Sample, Unlabeled};
use crate::config::{AdapterConfig, BackboneConfig, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, ParamGroup};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

const NO_IGNORE: usize = usize::MAX;
const EVAL_CHUNK: usize = 10;
const ADAPTER_STREAM: u64 = 0xada9;
const BACKBONE_STREAM: u64 = 0xbb0e;

/// Backbone with its adapter layout. Parameters live in separate stores so
/// a teacher can override the trainable part while sharing the backbone.
#[derive(Clone, Debug)]
pub struct Network {
    pub seg: SegModel,
    pub adapter: EarthAdapter,
}

impl Network {
    /// Builds the layout and draws fresh adapter parameters.
    pub fn new(backbone: &BackboneConfig, adapter: &AdapterConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        let (moa, params) = build_moa(backbone, adapter, rng)?;
        Ok((
            Network {
                seg: SegModel::new(backbone.clone()),
                adapter: moa,
            },
            params,
        ))
    }

    pub fn logits(&self, g: &mut Graph, bound: &Bound, images: &[Tensor]) -> Result<Var> {
        let mut hook = MoAHook::new(&self.adapter, bound, images.len());
        self.seg.logits(g, bound, images, Some(&mut hook))
    }

    /// Per-pixel argmax predictions. Earlier stores win on name clashes.
    pub fn predict(&self, stores: &[&ParamStore], images: &[Tensor]) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(images.len());
        let side = self.seg.config.image_size;
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let mut bound = Bound::default();
            for s in stores {
                bound.extend(&mut g, s, |_| false);
            }
            let logits = self.logits(&mut g, &bound, chunk)?;
            let labels = argmax_rows(g.value(logits))?;
            out.extend(labels.chunks(side * side).map(|c| c.iter().map(|&l| l as u8).collect()));
        }
        Ok(out)
    }

    pub fn evaluate(&self, stores: &[&ParamStore], samples: &[Sample]) -> Result<Evaluation> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let preds = self.predict(stores, &images)?;
        let labels: Vec<&[u8]> = samples.iter().map(|s| s.label.as_slice()).collect();
        evaluate(&preds, &labels, self.seg.config.num_classes)
    }
}

/// EMA copy of the student's trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub alpha: f64,
}

impl TeacherState {
    /// Exact clone of the student parameters under `prefixes`.
    pub fn from_student(student: &ParamStore, prefixes: &[&str], alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Range {
                name: "ema alpha",
                detail: format!("{alpha} is outside [0, 1)"),
            });
        }
        let mut params = ParamStore::new();
        for p in prefixes {
            params.merge(&student.with_prefix(p));
        }
        Ok(TeacherState { params, alpha })
    }
}

/// `p† ← α·p† + (1 − α)·p` for every teacher parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore) -> Result<()> {
    let a = teacher.alpha;
    for (name, t) in teacher.params.iter() {
        let s = student
            .get(name)
            .map_err(|_| Error::Invalid(format!("teacher parameter `{name}` has no student counterpart")))?;
        if s.shape() != t.shape() {
            return Err(Error::shape("ema_update", t.shape(), s.shape()));
        }
    }
    for (name, t) in teacher.params.iter_mut() {
        let s = student.get(name)?;
        for (ti, si) in t.data_mut().iter_mut().zip(s.data()) {
            *ti = a * *ti + (1.0 - a) * si;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixBatch {
    pub image: Tensor,
    pub label: Vec<u8>,
    /// True where the pixel comes from the source image.
    pub mask: Vec<bool>,
    pub provenance: Vec<Domain>,
    pub chosen: Vec<u8>,
}

/// Mixes with an explicit set of source classes pasted onto the target.
pub fn classmix_with(x_s: &Tensor, y_s: &[u8], x_t: &Tensor, y_t: &[u8], chosen: &[u8]) -> Result<MixBatch> {
    let &[c, h, w] = x_s.shape() else {
        return Err(Error::Invalid(format!("expected a c x H x W image, got {:?}", x_s.shape())));
    };
    if x_t.shape() != x_s.shape() {
        return Err(Error::shape("classmix", x_s.shape(), x_t.shape()));
    }
    let n = h * w;
    if y_s.len() != n || y_t.len() != n {
        return Err(Error::shape("classmix", &[y_s.len(), y_t.len()], &[n]));
    }
    let mask: Vec<bool> = y_s.iter().map(|l| chosen.contains(l)).collect();
    let (ds, dt) = (x_s.data(), x_t.data());
    let mut image = vec![0.0; c * n];
    for ch in 0..c {
        for p in 0..n {
            let i = ch * n + p;
            image[i] = if mask[p] { ds[i] } else { dt[i] };
        }
    }
    let label = (0..n).map(|p| if mask[p] { y_s[p] } else { y_t[p] }).collect();
    let provenance = mask
        .iter()
        .map(|&m| if m { Domain::Source } else { Domain::Target })
        .collect();
    Ok(MixBatch {
        image: Tensor::new(&[c, h, w], image)?,
        label,
        mask,
        provenance,
        chosen: chosen.to_vec(),
    })
}

/// Pastes `⌈n/2⌉` of the `n` classes present in the source label map,
/// chosen uniformly at random, onto the target.
pub fn classmix(x_s: &Tensor, y_s: &[u8], x_t: &Tensor, y_t: &[u8], rng: &mut impl Rng) -> Result<MixBatch> {
    let present = classes_present(y_s);
    let take = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = sample_indices(rng, present.len(), take)
        .into_iter()
        .map(|i| present[i])
        .collect();
    chosen.sort_unstable();
    classmix_with(x_s, y_s, x_t, y_t, &chosen)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l_src: f64,
    pub l_mix: Option<f64>,
    pub total: f64,
}

/// One evaluation row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_src: Option<f64>,
    pub l_mix: Option<f64>,
    pub source_miou: f64,
    pub target_miou: f64,
    /// Target-domain IoU per class; `None` for excluded classes.
    pub per_class: Vec<Option<f64>>,
}

/// Floats are written with 17 significant digits so values roundtrip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "nan".into())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "nan" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Invalid(format!("bad metrics value `{s}`: {e}")))
}

impl MetricsRow {
    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("step,l_src,l_mix,source_miou,target_miou");
        for c in 0..classes {
            h.push_str(&format!(",target_iou_{c}"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![
            self.step.to_string(),
            fmt_opt(self.l_src),
            fmt_opt(self.l_mix),
            fmt_f64(self.source_miou),
            fmt_f64(self.target_miou),
        ];
        cols.extend(self.per_class.iter().map(|v| fmt_opt(*v)));
        cols.join(",")
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            return Err(Error::Invalid(format!("metrics row has {} columns", cols.len())));
        }
        let step = cols[0]
            .parse()
            .map_err(|e| Error::Invalid(format!("bad step `{}`: {e}", cols[0])))?;
        let need = |s: &str| parse_opt(s)?.ok_or_else(|| Error::Invalid("missing mIoU".into()));
        Ok(MetricsRow {
            step,
            l_src: parse_opt(cols[1])?,
            l_mix: parse_opt(cols[2])?,
            source_miou: need(cols[3])?,
            target_miou: need(cols[4])?,
            per_class: cols[5..].iter().map(|s| parse_opt(s)).collect::<Result<_>>()?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow], classes: usize) -> String {
    let mut out = MetricsRow::csv_header(classes);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

/// RNG for everything random inside one training step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64))
}

fn images_of(samples: &[&Sample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.image.clone()).collect()
}

fn labels_of(labels: &[&[u8]]) -> Vec<usize> {
    labels.iter().flat_map(|l| l.iter().map(|&v| v as usize)).collect()
}

/// Student, optimizer, teacher and evaluation history for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub params: ParamStore,
    pub optim: AdamW,
    pub teacher: Option<TeacherState>,
    pub step: usize,
    pub history: Vec<MetricsRow>,
}

impl Trainer {
    fn groups(config: &TrainConfig) -> Vec<ParamGroup> {
        let t = &config.train;
        let g = |prefix: &str, lr| ParamGroup {
            prefix: prefix.into(),
            lr,
        };
        match config.mode {
            Mode::Pretrain => vec![g(BACKBONE, t.lr_pretrain), g(DECODER, t.lr_pretrain)],
            Mode::Dg | Mode::Da => vec![g(DECODER, t.lr_decoder), g(PEFT, t.lr_peft)],
        }
    }

    fn optimizer(config: &TrainConfig) -> Result<AdamW> {
        AdamW::new(
            AdamWConfig {
                weight_decay: config.train.weight_decay,
                ..AdamWConfig::default()
            },
            Self::groups(config),
        )
    }

    /// Fresh run. Pretraining draws the backbone and decoder from the seed;
    /// the other modes take them from `pretrained` and add adapters.
    pub fn new(config: &TrainConfig, pretrained: Option<&ParamStore>) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let (net, params) = match config.mode {
            Mode::Pretrain => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, BACKBONE_STREAM));
                let (net, _) = Network::new(&config.backbone, &config.adapter.disabled(), &mut rng)?;
                (net, backbone::init_params(&config.backbone, &mut rng))
            }
            Mode::Dg | Mode::Da => {
                let base = pretrained
                    .ok_or_else(|| Error::Invalid("PEFT training needs pretrained backbone weights".into()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ADAPTER_STREAM));
                let (net, peft) = Network::new(&config.backbone, &config.adapter, &mut rng)?;
                let mut params = base.with_prefix(BACKBONE);
                params.merge(&base.with_prefix(DECODER));
                check_shapes(&params, &backbone::init_params(&config.backbone, &mut ChaCha8Rng::seed_from_u64(0)))?;
                params.merge(&peft);
                (net, params)
            }
        };
        Self::new_layout(config, net, params)
    }

    /// Trainer at step 0 around existing parameters; the teacher, if the
    /// mode has one, starts as an exact copy of the student.
    pub fn new_layout(config: &TrainConfig, net: Network, params: ParamStore) -> Result<Self> {
        let teacher = match config.mode {
            Mode::Da => Some(TeacherState::from_student(&params, &[DECODER, PEFT], config.train.ema_alpha)?),
            Mode::Dg | Mode::Pretrain => None,
        };
        Ok(Trainer {
            config: config.clone(),
            net,
            params,
            optim: Self::optimizer(config)?,
            teacher,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.optim.lr_for(name).is_some()
    }

    fn forward_loss(&self, g: &mut Graph, bound: &Bound, images: &[Tensor], labels: &[usize]) -> Result<Var> {
        let logits = self.net.logits(g, bound, images)?;
        Ok(g.cross_entropy(logits, labels, NO_IGNORE)?.0)
    }

    fn finish_step(&mut self, mut g: Graph, bound: Bound, total: Var) -> Result<()> {
        if !g.value(total).is_finite() {
            return Err(self.diverged("loss"));
        }
        g.backward(total)?;
        let grads = bound.grads(&g);
        drop(g);
        self.optim.step(&mut self.params, &grads).map_err(|e| match e {
            Error::NonFinite(what) => self.diverged(&what),
            e => e,
        })?;
        self.step += 1;
        Ok(())
    }

    fn diverged(&self, what: &str) -> Error {
        Error::NonFinite(format!(
            "{what} at step {} (seed {}, mode {:?}, lr_decoder {}, lr_peft {}, lr_pretrain {})",
            self.step,
            self.config.train.seed,
            self.config.mode,
            self.config.train.lr_decoder,
            self.config.train.lr_peft,
            self.config.train.lr_pretrain
        ))
    }

    /// Supervised step on a source batch; used for both DG and pretraining.
    pub fn supervised_step(&mut self, batch: &[&Sample]) -> Result<LossReport> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, |n| self.is_trainable(n));
        let images = images_of(batch);
        let labels: Vec<&[u8]> = batch.iter().map(|s| s.label.as_slice()).collect();
        let loss = self.forward_loss(&mut g, &bound, &images, &labels_of(&labels))?;
        let l_src = g.value(loss).data()[0];
        let report = LossReport {
            step: self.step,
            l_src,
            l_mix: None,
            total: l_src,
        };
        self.finish_step(g, bound, loss)?;
        Ok(report)
    }

    /// Teacher argmax labels for target images.
    pub fn pseudo_label(&self, images: &[Tensor]) -> Result<Vec<Vec<u8>>> {
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Invalid("pseudo-labels need a teacher".into()))?;
        self.net.predict(&[&teacher.params, &self.params], images)
    }

    /// One UDA step: source CE plus `λ`-weighted CE on ClassMix images with
    /// teacher pseudo-labels, then an EMA teacher update.
    pub fn uda_step(&mut self, source: &[&Sample], target: &[&Tensor], rng: &mut impl Rng) -> Result<LossReport> {
        if source.len() != target.len() {
            return Err(Error::Invalid("source and target batches differ in size".into()));
        }
        let target: Vec<Tensor> = target.iter().map(|t| (*t).clone()).collect();
        let pseudo = self.pseudo_label(&target)?;
        let mixes = source
            .iter()
            .zip(&target)
            .zip(&pseudo)
            .map(|((s, t), p)| classmix(&s.image, &s.label, t, p, rng))
            .collect::<Result<Vec<_>>>()?;

        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, |n| self.is_trainable(n));
        let src_labels: Vec<&[u8]> = source.iter().map(|s| s.label.as_slice()).collect();
        let l_src = self.forward_loss(&mut g, &bound, &images_of(source), &labels_of(&src_labels))?;
        let mix_images: Vec<Tensor> = mixes.iter().map(|m| m.image.clone()).collect();
        let mix_labels: Vec<&[u8]> = mixes.iter().map(|m| m.label.as_slice()).collect();
        let l_mix = self.forward_loss(&mut g, &bound, &mix_images, &labels_of(&mix_labels))?;
        let lambda = self.config.train.lambda_uda;
        let weighted = g.scale(l_mix, lambda);
        let total = g.add(l_src, weighted)?;
        let report = LossReport {
            step: self.step,
            l_src: g.value(l_src).data()[0],
            l_mix: Some(g.value(l_mix).data()[0]),
            total: g.value(total).data()[0],
        };
        self.finish_step(g, bound, total)?;
        let teacher = self.teacher.as_mut().expect("checked by pseudo_label");
        ema_update(teacher, &self.params)?;
        Ok(report)
    }

    /// Draws this step's batch from `(seed, step)` and applies the mode's
    /// update.
    pub fn train_step(&mut self, bench: &Benchmark, target: &Unlabeled) -> Result<LossReport> {
        let mut rng = step_rng(self.config.train.seed, self.step);
        let b = self.config.train.batch;
        if bench.source_train.is_empty() {
            return Err(Error::Invalid("empty source training split".into()));
        }
        let source: Vec<&Sample> = (0..b)
            .map(|_| &bench.source_train[rng.random_range(0..bench.source_train.len())])
            .collect();
        match self.config.mode {
            Mode::Pretrain | Mode::Dg => self.supervised_step(&source),
            Mode::Da => {
                if target.is_empty() {
                    return Err(Error::Invalid("empty target training split".into()));
                }
                let t: Vec<&Tensor> = (0..b).map(|_| target.image(rng.random_range(0..target.len()))).collect();
                self.uda_step(&source, &t, &mut rng)
            }
        }
    }

    pub fn evaluate(&self, bench: &Benchmark) -> Result<(Evaluation, Evaluation)> {
        let src = self.net.evaluate(&[&self.params], &bench.source_val)?;
        let tgt = if bench.target_val.is_empty() {
            Evaluation {
                per_class: vec![None; self.config.backbone.num_classes],
                miou: 0.0,
            }
        } else {
            self.net.evaluate(&[&self.params], &bench.target_val)?
        };
        Ok((src, tgt))
    }

    fn record(&mut self, bench: &Benchmark, last: Option<LossReport>) -> Result<()> {
        let (src, tgt) = self.evaluate(bench)?;
        self.history.push(MetricsRow {
            step: self.step,
            l_src: last.map(|r| r.l_src),
            l_mix: last.and_then(|r| r.l_mix),
            source_miou: src.miou,
            target_miou: tgt.miou,
            per_class: tgt.per_class,
        });
        Ok(())
    }

    /// Trains toward `config.train.steps`, evaluating at step 0, every
    /// `eval_interval` steps and at the final step. Stops early after
    /// `stop_at` steps if given; `on_eval` runs after each evaluation.
    pub fn fit(
        &mut self,
        bench: &Benchmark,
        stop_at: Option<usize>,
        mut on_eval: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let target = bench.target_unlabeled();
        let total = self.config.train.steps;
        let end = stop_at.map_or(total, |s| s.min(total));
        let interval = self.config.train.eval_interval;
        if self.step == 0 && self.history.is_empty() {
            self.record(bench, None)?;
            on_eval(self)?;
        }
        while self.step < end {
            let report = self.train_step(bench, &target)?;
            if self.step % interval == 0 || self.step == total {
                self.record(bench, Some(report))?;
                on_eval(self)?;
            }
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history, self.config.backbone.num_classes)
    }
}

/// Every parameter in `expected` must be present in `actual` with the same
/// shape.
pub fn check_shapes(actual: &ParamStore, expected: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let a = actual
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing array `{name}`")))?;
        if a.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, config expects {:?}",
                a.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let mut s = ParamStore::new();
        s.insert("peft/x", Tensor::scalar(0.0));
        let mut t = TeacherState {
            params: {
                let mut p = ParamStore::new();
                p.insert("peft/x", Tensor::scalar(1.0));
                p
            },
            alpha: 0.99,
        };
        ema_update(&mut t, &s).unwrap();
        assert_eq!(t.params.get("peft/x").unwrap().data()[0], 0.99);

        t.alpha = 0.0;
        s.insert("peft/x", Tensor::scalar(-3.5));
        ema_update(&mut t, &s).unwrap();
        assert_eq!(t.params.get("peft/x").unwrap(), s.get("peft/x").unwrap());

        let mut missing = t.clone();
        missing.params.insert("peft/y", Tensor::scalar(1.0));
        assert!(ema_update(&mut missing, &s).is_err());
    }

    #[test]
    fn teacher_alpha_range() {
        let s = ParamStore::new();
        assert!(TeacherState::from_student(&s, &[PEFT], 1.0).is_err());
        assert!(TeacherState::from_student(&s, &[PEFT], 0.0).is_ok());
    }

    #[test]
    fn classmix_examples() {
        let xs = Tensor::full(&[3, 2, 2], 0.25);
        let xt = Tensor::full(&[3, 2, 2], 0.75);
        let single = [2u8; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = classmix(&xs, &single, &xt, &[0; 4], &mut rng).unwrap();
        assert_eq!(m.chosen, vec![2]);
        assert_eq!(m.image, xs);
        assert_eq!(m.label, single.to_vec());

        let m = classmix_with(&xs, &[0, 1, 0, 1], &xt, &[3, 3, 3, 3], &[]).unwrap();
        assert_eq!(m.image, xt);
        assert_eq!(m.label, vec![3; 4]);

        let m = classmix_with(&xs, &[0, 1, 0, 1], &xt, &[3, 3, 3, 3], &[0]).unwrap();
        assert_eq!(m.label, vec![0, 3, 0, 3]);
        assert_eq!(
            m.provenance,
            vec![Domain::Source, Domain::Target, Domain::Source, Domain::Target]
        );
    }

    #[test]
    fn classmix_picks_half_rounded_up() {
        let xs = Tensor::zeros(&[1, 1, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = classmix(&xs, &[0, 1, 2, 3, 4], &xs, &[0; 5], &mut rng).unwrap();
            assert_eq!(m.chosen.len(), 3);
            let m = classmix(&xs, &[1, 1, 2, 2, 2], &xs, &[0; 5], &mut rng).unwrap();
            assert_eq!(m.chosen.len(), 1);
        }
    }

    #[test]
    fn metrics_rows_roundtrip() {
        let row = MetricsRow {
            step: 100,
            l_src: Some(0.1 + 0.2),
            l_mix: None,
            source_miou: 1.0 / 3.0,
            target_miou: 0.0,
            per_class: vec![Some(0.5), None],
        };
        let csv = metrics_csv(&[row.clone()], 2);
        assert!(csv.starts_with("step,l_src,l_mix,source_miou,target_miou,target_iou_0,target_iou_1\n"));
        assert_eq!(parse_metrics_csv(&csv).unwrap(), vec![row]);
    }
}
