//! Config-driven runs, parameter sweeps and visualization exports.
//!
//! A run directory holds:
//!
//! - `metrics.csv`: one row per evaluation, see [`MetricsRow::csv_header`]
//! - `last.eadk`: checkpoint written after every evaluation, for `--resume`
//! - `final.eadk`: checkpoint after the last step
//! - `summary.txt`: `step=<n> source_miou=<x> target_miou=<y>`
//!
//! A sweep writes `sweep-<axis>.csv` with columns
//! `value,status,source_miou,target_miou`, sorted by value.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::adapter::Expert;
use crate::autodiff::Graph;
use crate::bench::{Benchmark, BenchmarkSpec};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pca;
use crate::pnm;
use crate::spectral::split_frequency;
use crate::tensor::Tensor;
use crate::trainer::{fmt_f64, MetricsRow, Network, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.eadk";
pub const FINAL_CHECKPOINT: &str = "final.eadk";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub step: usize,
    pub source_miou: f64,
    pub target_miou: f64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} source_miou={} target_miou={}",
            self.step,
            fmt_f64(self.source_miou),
            fmt_f64(self.target_miou)
        )
    }
}

impl From<&MetricsRow> for Summary {
    fn from(r: &MetricsRow) -> Self {
        Summary {
            step: r.step,
            source_miou: r.source_miou,
            target_miou: r.target_miou,
        }
    }
}

pub struct RunOutcome {
    pub summary: Summary,
    pub trainer: Trainer,
    pub dir: PathBuf,
}

/// The benchmark named in the config. Pretraining without one falls back to
/// the in-memory `da-analog` preset, whose source domain all presets share.
pub fn load_benchmark(config: &TrainConfig) -> Result<Benchmark> {
    match (&config.data.benchmark, config.mode) {
        (Some(dir), _) => Benchmark::load(dir),
        (None, Mode::Pretrain) => Benchmark::generate(&BenchmarkSpec::preset("da-analog", 0)?),
        (None, _) => Err(Error::Config {
            key: "data.benchmark".into(),
            reason: "required for dg and da runs".into(),
        }),
    }
}

pub fn load_pretrained(config: &TrainConfig) -> Result<Option<ParamStore>> {
    match (&config.data.pretrained, config.mode) {
        (_, Mode::Pretrain) => Ok(None),
        (Some(path), _) => Ok(Some(Checkpoint::load(path)?.student())),
        (None, _) => Err(Error::Config {
            key: "data.pretrained".into(),
            reason: "required for dg and da runs".into(),
        }),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the configured loop from disk inputs.
pub fn run(config: &TrainConfig, resume: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let bench = load_benchmark(config)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let pretrained = if resume.is_some() { None } else { load_pretrained(config)? };
    run_with(config, &bench, pretrained.as_ref(), resume.as_ref(), None)
}

/// Runs with inputs already in memory. `stop_at` interrupts the run after
/// that many steps, leaving `last.eadk` to resume from.
pub fn run_with(
    config: &TrainConfig,
    bench: &Benchmark,
    pretrained: Option<&ParamStore>,
    resume: Option<&Checkpoint>,
    stop_at: Option<usize>,
) -> Result<RunOutcome> {
    let mut trainer = match resume {
        Some(ckpt) => ckpt.restore(config)?,
        None => Trainer::new(config, pretrained)?,
    };
    let dir = config.out.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let last_path = dir.join(LAST_CHECKPOINT);
    trainer.fit(bench, stop_at, |t| {
        write(&metrics_path, &t.metrics_csv())?;
        Checkpoint::from_trainer(t).save(&last_path)
    })?;
    write(&metrics_path, &trainer.metrics_csv())?;
    let summary = Summary::from(
        trainer
            .history
            .last()
            .ok_or_else(|| Error::Invalid("run produced no evaluation".into()))?,
    );
    if trainer.step == config.train.steps {
        Checkpoint::from_trainer(&trainer).save(&dir.join(FINAL_CHECKPOINT))?;
        write(&dir.join(SUMMARY_FILE), &format!("{summary}\n"))?;
    }
    Ok(RunOutcome { summary, trainer, dir })
}

/// Evaluates a checkpoint's student on the validation splits.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, bench: &Benchmark) -> Result<Summary> {
    let config = ckpt.train_config()?;
    let trainer = ckpt.restore(&config)?;
    let (src, tgt) = trainer.evaluate(bench)?;
    Ok(Summary {
        step: trainer.step,
        source_miou: src.miou,
        target_miou: tgt.miou,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Cutoff,
    Dim,
    FreqLayers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Cutoff => "cutoff",
            SweepAxis::Dim => "dim",
            SweepAxis::FreqLayers => "freq_layers",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cutoff" => Ok(SweepAxis::Cutoff),
            "dim" => Ok(SweepAxis::Dim),
            "freq_layers" | "freq-layers" => Ok(SweepAxis::FreqLayers),
            _ => Err(Error::Invalid(format!("unknown sweep axis `{s}` (cutoff, dim, freq_layers)"))),
        }
    }

    /// Parses a value list: comma-separated numbers for `cutoff` and `dim`,
    /// `;`-separated groups of space-separated layer indices for
    /// `freq_layers` (e.g. `0 1 2;5 6 7`).
    pub fn parse_values(self, s: &str) -> Result<Vec<SweepValue>> {
        let bad = |v: &str| Error::Invalid(format!("bad {} value `{v}`", self.name()));
        let values = match self {
            SweepAxis::Cutoff => s
                .split(',')
                .map(|v| v.trim().parse::<f64>().map(SweepValue::Cutoff).map_err(|_| bad(v)))
                .collect::<Result<Vec<_>>>()?,
            SweepAxis::Dim => s
                .split(',')
                .map(|v| v.trim().parse::<usize>().map(SweepValue::Dim).map_err(|_| bad(v)))
                .collect::<Result<Vec<_>>>()?,
            SweepAxis::FreqLayers => s
                .split(';')
                .map(|group| {
                    group
                        .split_whitespace()
                        .map(|l| l.parse::<usize>().map_err(|_| bad(group)))
                        .collect::<Result<Vec<_>>>()
                        .map(SweepValue::FreqLayers)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if values.is_empty() {
            return Err(Error::Invalid("a sweep needs at least one value".into()));
        }
        Ok(values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepValue {
    Cutoff(f64),
    Dim(usize),
    FreqLayers(Vec<usize>),
}

impl SweepValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            SweepValue::Cutoff(_) => SweepAxis::Cutoff,
            SweepValue::Dim(_) => SweepAxis::Dim,
            SweepValue::FreqLayers(_) => SweepAxis::FreqLayers,
        }
    }

    fn apply(&self, config: &mut TrainConfig) {
        match self {
            SweepValue::Cutoff(v) => config.adapter.cutoff = *v,
            SweepValue::Dim(v) => config.adapter.dim = *v,
            SweepValue::FreqLayers(v) => config.adapter.freq_layers = v.clone(),
        }
    }

    fn sort_key(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (SweepValue::Cutoff(a), SweepValue::Cutoff(b)) => a.total_cmp(b),
            (SweepValue::Dim(a), SweepValue::Dim(b)) => a.cmp(b),
            (SweepValue::FreqLayers(a), SweepValue::FreqLayers(b)) => a.cmp(b),
            _ => std::cmp::Ordering::Equal,
        }
    }

    /// Label used in the CSV and as the run directory name.
    pub fn label(&self) -> String {
        match self {
            SweepValue::Cutoff(v) => format!("{v}"),
            SweepValue::Dim(v) => v.to_string(),
            SweepValue::FreqLayers(v) => v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: SweepValue,
    /// `ok`, or the failure reason.
    pub status: String,
    pub summary: Option<Summary>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,status,source_miou,target_miou\n");
    for r in rows {
        let (s, t) = match &r.summary {
            Some(s) => (fmt_f64(s.source_miou), fmt_f64(s.target_miou)),
            None => ("nan".into(), "nan".into()),
        };
        out.push_str(&format!("{},{},{s},{t}\n", r.value.label(), r.status.replace([',', '\n'], ";")));
    }
    out
}

/// Worker cap from `EA_THREADS`, default 1.
pub fn worker_limit() -> usize {
    std::env::var("EA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// One run per value with the base seed. Failed runs are recorded and the
/// sweep moves on. Writes `sweep-<axis>.csv` under the base output dir.
pub fn sweep(
    base: &TrainConfig,
    values: &[SweepValue],
    bench: &Benchmark,
    pretrained: Option<&ParamStore>,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let axis = values
        .first()
        .ok_or_else(|| Error::Invalid("a sweep needs at least one value".into()))?
        .axis();
    if values.iter().any(|v| v.axis() != axis) {
        return Err(Error::Invalid("sweep values mix axes".into()));
    }
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<SweepRow>> = Mutex::new(Vec::with_capacity(values.len()));
    let one = |value: &SweepValue| {
        let mut config = base.clone();
        value.apply(&mut config);
        config.out.dir = base.out.dir.join(axis.name()).join(value.label().replace(' ', "-"));
        let result = config.validate().and_then(|_| run_with(&config, bench, pretrained, None, None));
        let (status, summary) = match result {
            Ok(out) => ("ok".to_string(), Some(out.summary)),
            Err(e) if e.is_numeric() => (format!("numeric failure: {e}"), None),
            Err(e) => (format!("error: {e}"), None),
        };
        SweepRow {
            value: value.clone(),
            status,
            summary,
        }
    };
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, values.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(v) = values.get(i) else { break };
                let row = one(v);
                rows.lock().expect("sweep rows").push(row);
            });
        }
    });
    let mut rows = rows.into_inner().expect("sweep rows");
    rows.sort_by(|a, b| a.value.sort_key(&b.value));
    fs::create_dir_all(&base.out.dir).map_err(|e| Error::io(&base.out.dir, e))?;
    write(&base.out.dir.join(format!("sweep-{}.csv", axis.name())), &sweep_csv(&rows))?;
    Ok(rows)
}

/// PCA renderings of one adapted layer, each `3 × grid × grid`.
#[derive(Clone, Debug)]
pub struct PcaMaps {
    pub spatial: Option<Tensor>,
    pub low: Option<Tensor>,
    pub high: Option<Tensor>,
    pub aggregated: Tensor,
}

impl PcaMaps {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = Vec::new();
        for (name, t) in [("spatial", &self.spatial), ("low", &self.low), ("high", &self.high)] {
            if let Some(t) = t {
                v.push((name, t));
            }
        }
        v.push(("aggregated", &self.aggregated));
        v
    }
}

/// Runs one image through the model and renders each expert's delta and the
/// aggregated delta at `layer`.
pub fn export_pca(net: &Network, params: &ParamStore, image: &Tensor, layer: usize) -> Result<PcaMaps> {
    let spec = net
        .adapter
        .layer(layer)
        .filter(|l| l.has_frequency)
        .ok_or_else(|| Error::Invalid(format!("layer {layer} has no frequency adapters")))?;
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |_| false);
    let mut hook = crate::adapter::MoAHook::new(&net.adapter, &bound, 1);
    net.seg.forward_features(&mut g, &bound, std::slice::from_ref(image), Some(&mut hook))?;
    let trace = hook.trace(layer).ok_or_else(|| Error::Invalid(format!("layer {layer} was not traced")))?;
    let grid = net.adapter.grid;
    let map = |e: Expert| -> Result<Option<Tensor>> {
        if !spec.experts.contains(&e) {
            return Ok(None);
        }
        let v = trace.deltas.iter().find(|(k, _)| *k == e).expect("traced expert").1;
        pca::render(g.value(v), grid).map(Some)
    };
    Ok(PcaMaps {
        spatial: map(Expert::Spatial)?,
        low: map(Expert::Low)?,
        high: map(Expert::High)?,
        aggregated: pca::render(g.value(trace.aggregated), grid)?,
    })
}

/// Writes `pca_<name>.ppm` for every map, enlarged by `scale`.
pub fn write_pca(maps: &PcaMaps, out_dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    maps.named()
        .into_iter()
        .map(|(name, t)| {
            let path = out_dir.join(format!("pca_{name}.ppm"));
            pnm::write_ppm(&path, &pca::enlarge(t, scale)?)?;
            Ok(path)
        })
        .collect()
}

/// Splits a P6 image at cutoff `rho`. Writes `low.ppm`,
/// `high_plus_half.ppm` (high part offset by 0.5), and exact `low.f64` /
/// `high.f64` grids. Returns `(low, high)`.
pub fn split_freq_cmd(image_path: &Path, rho: f64, out_dir: &Path) -> Result<(Tensor, Tensor)> {
    let img = pnm::read_ppm(image_path)?;
    let (low, high) = split_frequency(&img, rho)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    pnm::write_ppm(&out_dir.join("low.ppm"), &low)?;
    pnm::write_ppm(&out_dir.join("high_plus_half.ppm"), &high.map(|v| v + 0.5))?;
    pnm::write_raw(&out_dir.join("low.f64"), &low)?;
    pnm::write_raw(&out_dir.join("high.f64"), &high)?;
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_parse() {
        assert_eq!(
            SweepAxis::Cutoff.parse_values("0.1,0.5").unwrap(),
            vec![SweepValue::Cutoff(0.1), SweepValue::Cutoff(0.5)]
        );
        assert_eq!(
            SweepAxis::FreqLayers.parse_values("0 1 2;5 6 7").unwrap(),
            vec![SweepValue::FreqLayers(vec![0, 1, 2]), SweepValue::FreqLayers(vec![5, 6, 7])]
        );
        assert!(SweepAxis::Dim.parse_values("16,x").is_err());
        assert!(SweepAxis::parse("depth").is_err());
    }

    #[test]
    fn sweep_csv_escapes_status() {
        let rows = vec![SweepRow {
            value: SweepValue::FreqLayers(vec![5, 6]),
            status: "error: a, b".into(),
            summary: None,
        }];
        assert_eq!(sweep_csv(&rows), "value,status,source_miou,target_miou\n5 6,error: a; b,nan,nan\n");
    }
}
