//! The `EADK1` checkpoint container.
//!
//! ```text
//! EADK1
//! version 1
//! step <n>
//! config <bytes>          followed by that many bytes of TOML and a newline
//! metrics <bytes>         followed by that many bytes of CSV and a newline
//! arrays <count>
//! <name> f64 <d0>x<d1>... <offset>     one line per array, offset in bytes
//! data <bytes>
//! <little-endian f64 values>
//! ```
//!
//! Array names carry their role as a prefix: `backbone/`, `decoder/` and
//! `peft/` for the student, `teacher/` for the EMA copy and `optim/` for
//! AdamW state.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BACKBONE, DECODER};
use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{check_shapes, parse_metrics_csv, Network, TeacherState, Trainer};

pub const MAGIC: &str = "EADK1";
pub const VERSION: u32 = 1;
pub const TEACHER: &str = "teacher/";
pub const OPTIM: &str = "optim/";
const OPTIM_STEP: &str = "optim/step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    /// TOML echo of the default-filled config.
    pub config: String,
    /// Metrics CSV accumulated so far.
    pub metrics: String,
    pub arrays: ParamStore,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
    }

    fn keyed(&mut self, key: &str) -> Result<u64> {
        let line = self.line()?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| bad(format!("expected `{key} <n>`, found `{line}`")))?;
        value.parse().map_err(|_| bad(format!("bad number in `{line}`")))
    }

    fn blob(&mut self, key: &str) -> Result<String> {
        let len = self.keyed(key)? as usize;
        let end = self.pos.checked_add(len).filter(|&e| e < self.bytes.len()).ok_or_else(|| bad(format!("truncated {key} block")))?;
        let text = std::str::from_utf8(&self.bytes[self.pos..end]).map_err(|_| bad(format!("{key} block is not UTF-8")))?;
        if self.bytes[end] != b'\n' {
            return Err(bad(format!("{key} block is not newline-terminated")));
        }
        self.pos = end + 1;
        Ok(text.to_string())
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nversion {}\nstep {}\n", self.version, self.step);
        head.push_str(&format!("config {}\n{}\n", self.config.len(), self.config));
        head.push_str(&format!("metrics {}\n{}\n", self.metrics.len(), self.metrics));
        head.push_str(&format!("arrays {}\n", self.arrays.len()));
        let mut offset = 0;
        for (name, t) in self.arrays.iter() {
            head.push_str(&format!("{name} f64 {} {offset}\n", shape_text(t.shape())));
            offset += 8 * t.numel();
        }
        head.push_str(&format!("data {offset}\n"));
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in self.arrays.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.line()? != MAGIC {
            return Err(bad("bad magic, not an EADK1 file"));
        }
        let version = c.keyed("version")?;
        if version != VERSION as u64 {
            return Err(bad(format!("unsupported version {version}")));
        }
        let step = c.keyed("step")?;
        let config = c.blob("config")?;
        let metrics = c.blob("metrics")?;
        let count = c.keyed("arrays")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let line = c.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, dtype, shape, offset] = parts[..] else {
                return Err(bad(format!("malformed array entry `{line}`")));
            };
            if dtype != "f64" {
                return Err(bad(format!("array `{name}` has unsupported dtype {dtype}")));
            }
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("array `{name}` has a bad shape `{shape}`")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("array `{name}` has a bad offset")))?;
            entries.push((name.to_string(), shape, offset));
        }
        let data_len = c.keyed("data")? as usize;
        let data = &bytes[c.pos..];
        if data.len() != data_len {
            return Err(bad(format!("data section holds {} bytes, header declares {data_len}", data.len())));
        }
        let mut arrays = ParamStore::new();
        let mut expected = 0;
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            if offset != expected || offset + 8 * n > data.len() {
                return Err(bad(format!("array `{name}` at offset {offset} does not fit its shape {shape:?}")));
            }
            if arrays.contains(&name) {
                return Err(bad(format!("duplicate array `{name}`")));
            }
            let values = data[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name, Tensor::new(&shape, values)?);
            expected = offset + 8 * n;
        }
        if expected != data.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(Checkpoint {
            version: VERSION,
            step,
            config,
            metrics,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(r) => Error::Checkpoint(format!("{}: {r}", path.display())),
            e => e,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml(&self.config)
    }

    /// Student parameters (backbone, decoder, adapters) only.
    pub fn student(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for prefix in [BACKBONE, DECODER, crate::adapter::PEFT] {
            p.merge(&self.arrays.with_prefix(prefix));
        }
        p
    }

    /// Captures the full state of a trainer.
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut arrays = t.params.clone();
        if let Some(teacher) = &t.teacher {
            for (name, v) in teacher.params.iter() {
                arrays.insert(format!("{TEACHER}{name}"), v.clone());
            }
        }
        arrays.insert(OPTIM_STEP, Tensor::scalar(t.optim.step as f64));
        for (name, m) in &t.optim.moments {
            let shape = t.params.get(name).map(|p| p.shape().to_vec()).unwrap_or_else(|_| vec![m.m.len()]);
            arrays.insert(format!("{OPTIM}m/{name}"), Tensor::new(&shape, m.m.clone()).expect("moment shape"));
            arrays.insert(format!("{OPTIM}v/{name}"), Tensor::new(&shape, m.v.clone()).expect("moment shape"));
        }
        Checkpoint {
            version: VERSION,
            step: t.step as u64,
            config: t.config.to_toml(),
            metrics: t.metrics_csv(),
            arrays,
        }
    }

    /// Rebuilds a trainer under `config`, which must describe the same model
    /// as the checkpoint. Every array shape is checked against the layout
    /// the config implies.
    pub fn restore(&self, config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let saved = self.train_config()?;
        if saved.mode != config.mode || saved.backbone != config.backbone || saved.adapter != config.adapter {
            return Err(bad("checkpoint was written for a different mode or model layout"));
        }
        let adapter_cfg = match config.mode {
            Mode::Pretrain => config.adapter.disabled(),
            Mode::Dg | Mode::Da => config.adapter.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (net, peft) = Network::new(&config.backbone, &adapter_cfg, &mut rng)?;
        let mut expected = backbone::init_params(&config.backbone, &mut rng);
        expected.merge(&peft);
        let params = self.student();
        check_shapes(&params, &expected)?;
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return Err(bad(format!("unexpected array `{extra}`")));
        }

        let mut trainer = Trainer::new_layout(config, net, params)?;
        let teacher_arrays = self.arrays.with_prefix(TEACHER);
        if config.mode == Mode::Da {
            let mut tp = ParamStore::new();
            for (name, v) in teacher_arrays.iter() {
                tp.insert(&name[TEACHER.len()..], v.clone());
            }
            let fresh = trainer.teacher.as_ref().expect("DA trainers have a teacher");
            check_shapes(&tp, &fresh.params)?;
            if tp.len() != fresh.params.len() {
                return Err(bad("teacher holds arrays the student does not train"));
            }
            trainer.teacher = Some(TeacherState {
                params: tp,
                alpha: config.train.ema_alpha,
            });
        } else if !teacher_arrays.is_empty() {
            return Err(bad("teacher arrays in a checkpoint without a teacher"));
        }

        let step = self.arrays.get(OPTIM_STEP).map_err(|_| bad("missing optimizer step"))?.data()[0];
        trainer.optim.step = step as u64;
        let m = self.arrays.with_prefix(&format!("{OPTIM}m/"));
        for (key, mt) in m.iter() {
            let name = &key[OPTIM.len() + 2..];
            let vt = self.arrays.get(&format!("{OPTIM}v/{name}")).map_err(|_| bad(format!("missing second moment of `{name}`")))?;
            let p = trainer.params.get(name).map_err(|_| bad(format!("moments for unknown parameter `{name}`")))?;
            if mt.shape() != p.shape() || vt.shape() != p.shape() {
                return Err(bad(format!("moments of `{name}` do not match its shape")));
            }
            if !trainer.is_trainable(name) {
                return Err(bad(format!("moments for frozen parameter `{name}`")));
            }
            trainer.optim.moments.insert(
                name.to_string(),
                Moments {
                    m: mt.data().to_vec(),
                    v: vt.data().to_vec(),
                },
            );
        }
        trainer.step = self.step as usize;
        trainer.history = parse_metrics_csv(&self.metrics)?;
        Ok(trainer)
    }
}
