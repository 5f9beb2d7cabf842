//! Synthetic two-domain segmentation benchmark and mIoU evaluation.
//!
//! Each sample is a Voronoi partition of the image into `K` regions, one per
//! class. A region is filled with its class color, an oriented sinusoidal
//! texture whose frequency depends on the class, and Gaussian noise. The
//! target domain shifts the palette and adds a periodic artifact.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactSpec {
    pub enabled: bool,
    pub period: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub palette: Vec<[f64; 3]>,
    /// Texture cycles across the image, per class.
    pub texture_freq: Vec<f64>,
    pub texture_amp: f64,
    pub noise_sigma: f64,
    pub artifact: ArtifactSpec,
    pub class_count: usize,
    pub image_size: usize,
    pub shape_seed: u64,
}

const SOURCE_PALETTE: [[f64; 3]; 4] = [
    [0.72, 0.72, 0.70],
    [0.62, 0.34, 0.28],
    [0.32, 0.58, 0.28],
    [0.22, 0.34, 0.62],
];

const TEXTURE_FREQ: [f64; 4] = [2.0, 4.0, 6.0, 8.0];

impl DomainSpec {
    /// Clean source domain with `k` classes.
    pub fn source(k: usize, image_size: usize) -> Self {
        DomainSpec {
            palette: (0..k).map(|c| palette_color(c)).collect(),
            texture_freq: (0..k).map(|c| TEXTURE_FREQ[c % 4] + 2.0 * (c / 4) as f64).collect(),
            texture_amp: 0.08,
            noise_sigma: 0.03,
            artifact: ArtifactSpec {
                enabled: false,
                period: 2,
                amplitude: 0.0,
            },
            class_count: k,
            image_size,
            shape_seed: 0x5eed_0001,
        }
    }

    /// Target domain: every palette color moved by `offset` (clamped to
    /// `[0, 1]`), plus a period-2 artifact. A uniform offset keeps the
    /// distances between class colors.
    pub fn target(k: usize, image_size: usize, offset: [f64; 3], artifact_amplitude: f64) -> Self {
        let src = Self::source(k, image_size);
        DomainSpec {
            palette: src
                .palette
                .iter()
                .map(|c| std::array::from_fn(|i| (c[i] + offset[i]).clamp(0.0, 1.0)))
                .collect(),
            artifact: ArtifactSpec {
                enabled: artifact_amplitude > 0.0,
                period: 2,
                amplitude: artifact_amplitude,
            },
            shape_seed: 0x5eed_0002,
            ..src
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Invalid("a domain needs at least 2 classes".into()));
        }
        if self.palette.len() != self.class_count || self.texture_freq.len() != self.class_count {
            return Err(Error::Invalid("palette and texture tables must have one entry per class".into()));
        }
        if self.artifact.period < 2 {
            return Err(Error::Range {
                name: "artifact period",
                detail: format!("{} < 2", self.artifact.period),
            });
        }
        if self.artifact.amplitude < 0.0 {
            return Err(Error::Range {
                name: "artifact amplitude",
                detail: format!("{} < 0", self.artifact.amplitude),
            });
        }
        if self.image_size * self.image_size < self.class_count {
            return Err(Error::Invalid("image too small for the class count".into()));
        }
        Ok(())
    }
}

fn palette_color(class: usize) -> [f64; 3] {
    let base = SOURCE_PALETTE[class % 4];
    let cycle = (class / 4) as f64 * 0.13;
    std::array::from_fn(|i| (base[i] + cycle).fract())
}

/// SplitMix64 finalizer; derives well-spread child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 × S × S`, values in `[0, 1]`.
    pub image: Tensor,
    /// `S × S` class indices, row-major.
    pub label: Vec<u8>,
}

/// Voronoi class map with one site per class.
fn voronoi(k: usize, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let sites: Vec<(f64, f64)> = sample_indices(rng, size * size, k)
        .into_iter()
        .map(|i| ((i / size) as f64, (i % size) as f64))
        .collect();
    let mut classes: Vec<u8> = (0..k as u8).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let mut label = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (s, (sy, sx)) in sites.iter().enumerate() {
                let d = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            label[y * size + x] = classes[best];
        }
    }
    label
}

pub fn generate_sample(spec: &DomainSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.shape_seed, seed));
    let label = voronoi(spec.class_count, s, &mut rng);
    let orientations: Vec<f64> = (0..spec.class_count)
        .map(|_| rng.random_range(0.0..std::f64::consts::PI))
        .collect();
    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let cls = label[y * s + x] as usize;
            let theta = orientations[cls];
            let phase = (x as f64 * theta.cos() + y as f64 * theta.sin()) / s as f64;
            let tex = if spec.texture_amp > 0.0 {
                spec.texture_amp * (2.0 * std::f64::consts::PI * spec.texture_freq[cls] * phase).sin()
            } else {
                0.0
            };
            for c in 0..3 {
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                img[(c * s + y) * s + x] = (spec.palette[cls][c] + tex + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut image = Tensor::new(&[3, s, s], img)?;
    if spec.artifact.enabled {
        image = inject_artifact(&image, spec.artifact.period, spec.artifact.amplitude)?;
    }
    Ok(Sample { image, label })
}

/// Adds `amplitude·cos(2π(h + w)/period)` to every channel and clamps to
/// `[0, 1]`. Period 2 gives an exact ±amplitude checkerboard.
pub fn inject_artifact(img: &Tensor, period: usize, amplitude: f64) -> Result<Tensor> {
    if period < 2 {
        return Err(Error::Range {
            name: "artifact period",
            detail: format!("{period} < 2"),
        });
    }
    let &[c, h, w] = img.shape() else {
        return Err(Error::Invalid(format!("expected a c x H x W image, got {:?}", img.shape())));
    };
    if amplitude == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let a = amplitude * (2.0 * std::f64::consts::PI * ((y + x) % period) as f64 / period as f64).cos();
                let v = &mut d[(ch * h + y) * w + x];
                *v = (*v + a).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// `K × K` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Range {
                name: "class",
                detail: format!("truth {truth}, prediction {pred} with {} classes", self.k),
            });
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU of class `c`, or `None` when it appears in neither truth nor
    /// prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.k).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
        let fp: u64 = (0..self.k).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn summary(&self) -> Evaluation {
        let per_class: Vec<Option<f64>> = (0..self.k).map(|c| self.iou(c)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Evaluation { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn evaluate<P: AsRef<[u8]>, L: AsRef<[u8]>>(preds: &[P], labels: &[L], k: usize) -> Result<Evaluation> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "evaluate needs matching non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (p, l) in preds.iter().zip(labels) {
        let (p, l) = (p.as_ref(), l.as_ref());
        if p.len() != l.len() || p.is_empty() {
            return Err(Error::shape("evaluate", &[p.len()], &[l.len()]));
        }
        for (&pi, &li) in p.iter().zip(l) {
            cm.add(li as usize, pi as usize)?;
        }
    }
    Ok(cm.summary())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub name: String,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// Named presets: `da-analog` and `dg-analog` share the source domain and
    /// differ in how the target is shifted.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (k, s) = (4, 32);
        let target = match name {
            "da-analog" => DomainSpec::target(k, s, [0.25, 0.0, -0.25], 0.25),
            "dg-analog" => DomainSpec::target(k, s, [-0.2, 0.1, 0.2], 0.25),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown benchmark `{other}` (expected da-analog or dg-analog)"
                )))
            }
        };
        Ok(BenchmarkSpec {
            name: name.to_string(),
            source: DomainSpec::source(k, s),
            target,
            source_train: 200,
            source_val: 50,
            target_train: 200,
            target_val: 50,
            seed,
        })
    }

    fn parts(&self) -> [(Domain, Split, usize); 4] {
        [
            (Domain::Source, Split::Train, self.source_train),
            (Domain::Source, Split::Val, self.source_val),
            (Domain::Target, Split::Train, self.target_train),
            (Domain::Target, Split::Val, self.target_val),
        ]
    }

    pub fn sample_seed(&self, domain: Domain, split: Split, index: usize) -> u64 {
        let tag = (domain as u64) << 1 | split as u64;
        mix_seed(mix_seed(self.seed, tag), index as u64)
    }
}

/// Target training images with their labels withheld.
#[derive(Clone, Debug, Default)]
pub struct Unlabeled {
    images: Vec<Tensor>,
}

impl Unlabeled {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Benchmark {
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    target_train: Vec<Sample>,
    pub target_val: Vec<Sample>,
}

impl Benchmark {
    /// Generates every split in memory, quantized exactly as it would be
    /// after a trip through the on-disk format.
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        let mut b = Benchmark::default();
        for (domain, split, count) in spec.parts() {
            let dspec = match domain {
                Domain::Source => &spec.source,
                Domain::Target => &spec.target,
            };
            let samples = (0..count)
                .map(|i| {
                    let s = generate_sample(dspec, spec.sample_seed(domain, split, i))?;
                    Ok(Sample {
                        image: pnm::quantize(&s.image),
                        label: s.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            *b.split_mut(domain, split) = samples;
        }
        Ok(b)
    }

    fn split_mut(&mut self, domain: Domain, split: Split) -> &mut Vec<Sample> {
        match (domain, split) {
            (Domain::Source, Split::Train) => &mut self.source_train,
            (Domain::Source, Split::Val) => &mut self.source_val,
            (Domain::Target, Split::Train) => &mut self.target_train,
            (Domain::Target, Split::Val) => &mut self.target_val,
        }
    }

    /// Target training images for self-training; labels stay hidden.
    pub fn target_unlabeled(&self) -> Unlabeled {
        Unlabeled {
            images: self.target_train.iter().map(|s| s.image.clone()).collect(),
        }
    }

    /// Ground truth for the target training split. Only for audits.
    pub fn target_train_audit(&self) -> &[Sample] {
        &self.target_train
    }

    /// Reads a benchmark written by [`make_benchmark`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format {
                path: manifest_path,
                reason: format!("expected header `{MANIFEST_HEADER}`"),
            });
        }
        let mut b = Benchmark::default();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = |reason: String| Error::Format {
                path: manifest_path.clone(),
                reason: format!("line {}: {reason}", n + 2),
            };
            let [path, split, domain, _seed] = cols[..] else {
                return Err(bad(format!("expected 4 columns, got {}", cols.len())));
            };
            let split = match split {
                "train" => Split::Train,
                "val" => Split::Val,
                s => return Err(bad(format!("unknown split `{s}`"))),
            };
            let domain = match domain {
                "source" => Domain::Source,
                "target" => Domain::Target,
                d => return Err(bad(format!("unknown domain `{d}`"))),
            };
            let image = pnm::read_ppm(&dir.join(path))?;
            let label_path = dir.join(label_path_for(path));
            let (label, w, h) = pnm::read_pgm(&label_path)?;
            if image.shape() != [3, h, w] {
                return Err(bad(format!("label size {w}x{h} does not match image")));
            }
            b.split_mut(domain, split).push(Sample { image, label });
        }
        Ok(b)
    }
}

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "path,split,domain,seed";

pub fn label_path_for(image_path: &str) -> String {
    match image_path.strip_suffix(".ppm") {
        Some(stem) => format!("{stem}.pgm"),
        None => format!("{image_path}.pgm"),
    }
}

/// Writes every split as PPM images plus PGM labels and a manifest.
/// Returns the manifest path.
pub fn make_benchmark(spec: &BenchmarkSpec, out: &Path) -> Result<PathBuf> {
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (domain, split, count) in spec.parts() {
        let rel_dir = format!("{}/{}", domain.name(), split.name());
        let dir = out.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let dspec = match domain {
            Domain::Source => &spec.source,
            Domain::Target => &spec.target,
        };
        for i in 0..count {
            let seed = spec.sample_seed(domain, split, i);
            let s = generate_sample(dspec, seed)?;
            let rel = format!("{rel_dir}/{i:05}.ppm");
            pnm::write_ppm(&out.join(&rel), &s.image)?;
            let size = dspec.image_size;
            pnm::write_pgm(&out.join(label_path_for(&rel)), &s.label, size, size)?;
            let _ = writeln!(manifest, "{rel},{},{},{seed}", split.name(), domain.name());
        }
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Classes present in a label map, ascending.
pub fn classes_present(label: &[u8]) -> Vec<u8> {
    label.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}
