//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HCVAECKP"
//! version  u32
//! config   u64 length + UTF-8 run config text
//! step     u64      steps completed
//! adam_t   u64      optimizer update count
//! count    u64      number of array records
//! record   u64 name length + name, u64 rank, rank × u64 dims, f64 values
//! ```
//!
//! Records are `param/<name>`, `adam_m/<name>`, `adam_v/<name>`,
//! `normalizer/mean` and `normalizer/std`, in that order.

use std::path::Path;

use hiercvae_core::data::Normalizer;
use hiercvae_core::model::HierCvae;
use hiercvae_core::tensor::Tensor;
use hiercvae_core::train::{AdamState, Trainer};

use crate::error::{AppError, AppResult};
use crate::runconfig::RunConfig;

pub const MAGIC: &[u8; 8] = b"HCVAECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub normalizer: Normalizer,
    pub trainer: Trainer,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.bytes(name.as_bytes());
        self.u64(shape.len() as u64);
        for &s in shape {
            self.u64(s as u64);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflow".to_string())
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), String> {
        let name = self.string()?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s)).ok_or("shape overflow")?;
        let raw = self.take(numel.checked_mul(8).ok_or("shape overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.bytes(self.run.to_text().as_bytes());
        w.u64(self.trainer.step as u64);
        w.u64(self.trainer.adam.t);
        let store = &self.trainer.model.store;
        w.u64(3 * store.len() as u64 + 2);
        for (name, t) in store.iter() {
            w.record(&format!("param/{name}"), t.shape(), t.data());
        }
        for (tag, moments) in [("adam_m", &self.trainer.adam.m), ("adam_v", &self.trainer.adam.v)] {
            for ((name, t), m) in store.iter().zip(moments) {
                w.record(&format!("{tag}/{name}"), t.shape(), m);
            }
        }
        let d = self.normalizer.dim();
        w.record("normalizer/mean", &[d], &self.normalizer.mean);
        w.record("normalizer/std", &[d], &self.normalizer.std);
        w.0
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| AppError::Checkpoint { path: path.into(), detail })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format!("unsupported version {version}, expected {VERSION}"));
        }
        let text = r.string()?;
        let run = RunConfig::parse(&text).map_err(|(line, e)| format!("embedded config line {line}: {e}"))?;
        let step = r.len()?;
        let adam_t = r.u64()?;
        let count = r.len()?;
        let records = (0..count).map(|_| r.record()).collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>), String> {
            records.iter().find(|(n, _, _)| n == name).ok_or_else(|| format!("missing record {name}"))
        };
        let mean = find("normalizer/mean")?.2.clone();
        let std = find("normalizer/std")?.2.clone();
        let normalizer = Normalizer { mean, std };
        let mut model = HierCvae::new(run.model_for(normalizer.dim()), run.loss.clone()).map_err(|e| e.to_string())?;
        if count != 3 * model.store.len() + 2 {
            return Err(format!("{count} records, model expects {}", 3 * model.store.len() + 2));
        }
        let mut adam = AdamState::new(&model.store);
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            let (_, shape, data) = find(&format!("param/{name}"))?;
            let t = Tensor::new(shape.clone(), data.clone()).map_err(|e| e.to_string())?;
            model.store.set(name, t).map_err(|e| e.to_string())?;
            adam.m[k] = find(&format!("adam_m/{name}"))?.2.clone();
            adam.v[k] = find(&format!("adam_v/{name}"))?.2.clone();
            if adam.m[k].len() != shape.iter().product::<usize>() || adam.v[k].len() != adam.m[k].len() {
                return Err(format!("optimizer moments for {name} have the wrong size"));
            }
        }
        adam.t = adam_t;
        let mut trainer = Trainer::new(model, run.train.clone()).map_err(|e| e.to_string())?;
        trainer.adam = adam;
        trainer.step = step;
        Ok(Checkpoint { run, normalizer, trainer })
    }
}
