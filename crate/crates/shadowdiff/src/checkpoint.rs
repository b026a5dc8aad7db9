//! Flat binary checkpoint container: magic, format version, the noise
//! schedule, provenance strings (config hash, code version), then named
//! tensor records with dtype, shape, and raw little-endian values.
//! Round-trips byte-exactly.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::schedule::ScheduleTable;
use crate::tensor::{Dtype, Scalar, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SHDWDIF1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>, // little-endian scalar values
}

/// Everything one run needs to resume or sample: schedule parameters,
/// provenance, scalar metadata (e.g. the latent rescale factor), and any
/// number of named tensors (store contents live under `prefix/name` keys).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub config_hash: String,
    pub code_version: String,
    /// Resolved configuration, JSON-serialized, for provenance.
    pub config_json: String,
    pub meta: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(sched: &ScheduleTable, config_hash: &str) -> Self {
        let (beta_min, beta_max) = sched.beta_range();
        Self {
            t_max: sched.t_max(),
            beta_min,
            beta_max,
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_json: String::new(),
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn schedule(&self) -> Result<ScheduleTable> {
        ScheduleTable::build(self.t_max, self.beta_min, self.beta_max)
    }

    /// Add every parameter of `store` under `prefix/`.
    pub fn put_store<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for p in store.entries() {
            let mut data = Vec::with_capacity(p.value.len() * S::DTYPE.size());
            for i in 0..p.value.len() {
                match S::DTYPE {
                    Dtype::F32 => {
                        data.extend_from_slice(&(p.value[i].as_f64() as f32).to_le_bytes())
                    }
                    Dtype::F64 => data.extend_from_slice(&p.value[i].as_f64().to_le_bytes()),
                }
            }
            self.tensors.insert(
                format!("{prefix}/{}", p.name),
                TensorRecord {
                    dtype: S::DTYPE,
                    shape: p.value.shape().to_vec(),
                    data,
                },
            );
        }
    }

    /// Rebuild a parameter store from every tensor under `prefix/`.
    pub fn get_store<S: Scalar>(&self, prefix: &str) -> Result<ParamStore<S>> {
        let want = format!("{prefix}/");
        let mut store = ParamStore::new();
        let mut found = false;
        for (key, rec) in &self.tensors {
            let Some(name) = key.strip_prefix(&want) else {
                continue;
            };
            found = true;
            if rec.dtype != S::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} is {} but {} was requested",
                    rec.dtype.name(),
                    S::DTYPE.name()
                )));
            }
            let elem = rec.dtype.size();
            let n: usize = rec.shape.iter().product();
            if rec.data.len() != n * elem {
                return Err(Error::Checkpoint(format!(
                    "tensor {key}: {} bytes for {n} elements",
                    rec.data.len()
                )));
            }
            let mut vals = Vec::with_capacity(n);
            for chunk in rec.data.chunks_exact(elem) {
                let v = if elem == 4 {
                    f32::from_le_bytes(chunk.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(chunk.try_into().unwrap())
                };
                vals.push(S::of_f64(v));
            }
            store.insert(name, Tensor::new(&rec.shape, vals)?)?;
        }
        if !found {
            return Err(Error::Checkpoint(format!(
                "no tensors under prefix {prefix}/"
            )));
        }
        Ok(store)
    }

    pub fn has_store(&self, prefix: &str) -> bool {
        let want = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&want))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.t_max as u64).to_le_bytes())?;
        w.write_all(&self.beta_min.to_le_bytes())?;
        w.write_all(&self.beta_max.to_le_bytes())?;
        write_str(w, &self.config_hash)?;
        write_str(w, &self.code_version)?;
        write_str(w, &self.config_json)?;
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, rec) in &self.tensors {
            write_str(w, name)?;
            write_str(w, rec.dtype.name())?;
            w.write_all(&(rec.shape.len() as u64).to_le_bytes())?;
            for &d in &rec.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&(rec.data.len() as u64).to_le_bytes())?;
            w.write_all(&rec.data)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let mut r = data.as_slice();
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let t_max = read_u64(&mut r)? as usize;
        let beta_min = read_f64(&mut r)?;
        let beta_max = read_f64(&mut r)?;
        let config_hash = read_str(&mut r)?;
        let code_version = read_str(&mut r)?;
        let config_json = read_str(&mut r)?;
        let n_meta = read_u64(&mut r)? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_f64(&mut r)?;
            meta.insert(k, v);
        }
        let n_tensors = read_u64(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let dtype_s = read_str(&mut r)?;
            let dtype = Dtype::from_name(&dtype_s)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype {dtype_s}")))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len = read_u64(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            read_exact(&mut r, &mut buf)?;
            tensors.insert(
                name,
                TensorRecord {
                    dtype,
                    shape,
                    data: buf,
                },
            );
        }
        Ok(Self {
            t_max,
            beta_min,
            beta_max,
            config_hash,
            code_version,
            config_json,
            meta,
            tensors,
        })
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF8 string".into()))
}
