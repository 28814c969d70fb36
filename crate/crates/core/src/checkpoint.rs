//! Single-file binary checkpoint.
//!
//! Layout (little-endian): magic `CACLCKPT`, format version, config text,
//! step, codebook and its EMA state, usage windows, both parameter sets,
//! both optimizer states, both image pools with their RNG positions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::TrainConfig;
use crate::error::{io_err, CaclError, Result};
use crate::io::atomic_write;
use crate::nn::{Adam, ParamStore};
use crate::training::Trainer;

pub const MAGIC: &[u8; 8] = b"CACLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct PoolState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
    stored: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct AdamState {
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    num_shared: usize,
    num_class: usize,
    dim: usize,
    decay: f64,
    codes: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    usage: [Vec<u64>; 3],
    autoencoder: Vec<(String, Tensor)>,
    classifier: Vec<(String, Tensor)>,
    adam: [AdamState; 2],
    pools: [PoolState; 2],
}

fn snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.vars().iter().map(|(n, v)| (n.clone(), v.as_tensor().copy().expect("cpu copy"))).collect()
}

fn adam_state(opt: &Adam) -> AdamState {
    let (first, second) = opt.moments();
    AdamState { step: opt.step_count(), first: first.to_vec(), second: second.to_vec() }
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Result<Self> {
        let cb = &t.codebook;
        let pool = |p: &crate::adversarial::ImagePool| {
            let (stream, word_pos) = p.rng_state();
            PoolState { seed: p.rng_seed(), stream, word_pos, stored: p.stored().to_vec() }
        };
        Ok(Self {
            config: t.config.clone(),
            step: t.step,
            num_shared: cb.num_shared(),
            num_class: cb.num_class(),
            dim: cb.dim(),
            decay: cb.decay(),
            codes: cb.codes().to_vec(),
            ema_counts: cb.ema_counts().to_vec(),
            ema_sums: cb.ema_sums().to_vec(),
            usage: [t.usage_shared.clone(), t.usage_class_pos.clone(), t.usage_class_neg.clone()],
            autoencoder: snapshot(t.autoencoder.params()),
            classifier: snapshot(t.classifier.params()),
            adam: [adam_state(&t.opt_generator), adam_state(&t.opt_classifier)],
            pools: [pool(&t.pool_pos), pool(&t.pool_neg)],
        })
    }

    pub fn restore(self) -> Result<Trainer> {
        let mut t = Trainer::new(self.config.clone())?;
        t.step = self.step;
        t.codebook = crate::codebook::CodebookPartitioned::from_raw(
            self.num_shared,
            self.num_class,
            self.dim,
            self.codes,
            self.ema_counts,
            self.ema_sums,
            self.decay,
        )?;
        let [a, b, c] = self.usage;
        let k = t.codebook.num_codes();
        if a.len() != k || b.len() != k || c.len() != k {
            return Err(format_err("usage windows do not match the codebook"));
        }
        t.usage_shared = a;
        t.usage_class_pos = b;
        t.usage_class_neg = c;
        t.autoencoder.params().load(&self.autoencoder)?;
        t.classifier.params().load(&self.classifier)?;
        let [ga, ca] = self.adam;
        t.opt_generator.restore(ga.step, ga.first, ga.second)?;
        t.opt_classifier.restore(ca.step, ca.first, ca.second)?;
        let [pp, pn] = self.pools;
        let dtype = t.config.dtype();
        for (pool, s) in [(&mut t.pool_pos, pp), (&mut t.pool_neg, pn)] {
            let stored = s.stored.into_iter().map(|x| x.to_dtype(dtype)).collect::<candle_core::Result<_>>()?;
            pool.restore(s.seed, s.stream, s.word_pos, stored)?;
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.u64(self.step);
        w.u64(self.num_shared as u64);
        w.u64(self.num_class as u64);
        w.u64(self.dim as u64);
        w.f64(self.decay);
        w.f64s(&self.codes);
        w.f64s(&self.ema_counts);
        w.f64s(&self.ema_sums);
        for u in &self.usage {
            w.u64(u.len() as u64);
            u.iter().for_each(|&x| w.u64(x));
        }
        for set in [&self.autoencoder, &self.classifier] {
            w.u64(set.len() as u64);
            for (name, t) in set {
                w.str(name);
                w.tensor(t)?;
            }
        }
        for a in &self.adam {
            w.u64(a.step);
            w.tensors(&a.first)?;
            w.tensors(&a.second)?;
        }
        for p in &self.pools {
            w.0.extend_from_slice(&p.seed);
            w.u64(p.stream);
            w.0.extend_from_slice(&p.word_pos.to_le_bytes());
            w.tensors(&p.stored)?;
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_err("missing checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let config = TrainConfig::parse(&r.str()?)?;
        let step = r.u64()?;
        let num_shared = r.u64()? as usize;
        let num_class = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let decay = r.f64()?;
        let codes = r.f64s()?;
        let ema_counts = r.f64s()?;
        let ema_sums = r.f64s()?;
        let mut usage: [Vec<u64>; 3] = Default::default();
        for u in &mut usage {
            let n = r.len()?;
            *u = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
        }
        let mut sets: [Vec<(String, Tensor)>; 2] = Default::default();
        for set in &mut sets {
            let n = r.len()?;
            for _ in 0..n {
                let name = r.str()?;
                set.push((name, r.tensor()?));
            }
        }
        let mut adam = Vec::new();
        for _ in 0..2 {
            let step = r.u64()?;
            let first = r.tensors()?;
            let second = r.tensors()?;
            adam.push(AdamState { step, first, second });
        }
        let mut pools = Vec::new();
        for _ in 0..2 {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            pools.push(PoolState { seed, stream, word_pos, stored: r.tensors()? });
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes after checkpoint"));
        }
        let [autoencoder, classifier] = sets;
        Ok(Self {
            config,
            step,
            num_shared,
            num_class,
            dim,
            decay,
            codes,
            ema_counts,
            ema_sums,
            usage,
            autoencoder,
            classifier,
            adam: adam.try_into().expect("two optimizers"),
            pools: pools.try_into().expect("two pools"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

fn format_err(detail: impl Into<String>) -> CaclError {
    CaclError::Format { what: "checkpoint", detail: detail.into() }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        let dims = t.dims();
        self.u32(dims.len() as u32);
        dims.iter().for_each(|&d| self.u64(d as u64));
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => {
                self.0.push(0);
                flat.to_vec1::<f32>()?.iter().for_each(|v| self.0.extend_from_slice(&v.to_le_bytes()));
            }
            _ => {
                self.0.push(1);
                flat.to_dtype(DType::F64)?
                    .to_vec1::<f64>()?
                    .iter()
                    .for_each(|v| self.0.extend_from_slice(&v.to_le_bytes()));
            }
        }
        Ok(())
    }
    fn tensors(&mut self, ts: &[Tensor]) -> Result<()> {
        self.u64(ts.len() as u64);
        ts.iter().try_for_each(|t| self.tensor(t))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in the remaining input.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() - self.pos {
            return Err(format_err("length field exceeds file size"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("string is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(format_err("tensor rank too large"));
        }
        let dims: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let count: usize = dims.iter().product();
        let kind = self.take(1)?[0];
        let width = if kind == 0 { 4 } else { 8 };
        let raw = self.take(count.checked_mul(width).ok_or_else(|| format_err("tensor too large"))?)?;
        let t = match kind {
            0 => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(format_err(format!("unknown tensor kind {other}"))),
        };
        Ok(t)
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.len()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}
