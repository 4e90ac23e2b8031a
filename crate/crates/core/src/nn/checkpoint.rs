//! ECKP checkpoints: "ECKP", u32 version, u32 tensor count, then per
//! tensor u32 name length, UTF-8 name, u8 rank, u32 dims and f32 values,
//! all little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Adam, Model, ModelConfig, NnError, PoolMode, Tensor};
use crate::features::{Standardizer, NUM_FEATURES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named f32 tensors in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn err(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| err("bad magic"))? != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unknown version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| err("tensor name not UTF-8"))?.to_string();
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| err("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self { tensors })
    }

    fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    fn vector(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }
}

/// Serializes the model (and optionally optimizer state).
pub fn to_checkpoint(model: &Model<f32>, adam: Option<&Adam<f32>>) -> Checkpoint {
    let mut model = model.clone();
    let mut ck = Checkpoint::default();
    let c = model.config;
    ck.push("config.channels", Checkpoint::vector(&c.channels.map(|v| v as f32)));
    ck.push("config.kernels", Checkpoint::vector(&[c.stem_kernel as f32, c.kernel as f32]));
    ck.push("config.use_features", Checkpoint::vector(&[c.use_features as u8 as f32]));
    ck.push("config.pool", Checkpoint::vector(&[c.pool.code() as f32]));
    ck.push("features.mean", Checkpoint::vector(&model.standardizer.mean.map(|v| v as f32)));
    ck.push("features.std", Checkpoint::vector(&model.standardizer.std.map(|v| v as f32)));
    let names: Vec<String> = model
        .params_mut()
        .into_iter()
        .map(|(n, p)| {
            ck.push(n.clone(), p.value.clone());
            n
        })
        .collect();
    for (n, bn) in model.batchnorms_mut() {
        ck.push(format!("{n}.running_mean"), Checkpoint::vector(&bn.running_mean));
        ck.push(format!("{n}.running_var"), Checkpoint::vector(&bn.running_var));
        ck.push(format!("{n}.tracked"), Checkpoint::vector(&[bn.tracked as u8 as f32]));
    }
    if let Some(a) = adam.filter(|a| !a.m.is_empty()) {
        // The step count is split into two exact f32 halves.
        ck.push("adam.step", Checkpoint::vector(&[(a.step >> 16) as f32, (a.step & 0xffff) as f32]));
        ck.push("adam.weight_decay", Checkpoint::vector(&[a.weight_decay as f32]));
        for ((n, m), v) in names.iter().zip(&a.m).zip(&a.v) {
            ck.push(format!("adam.m.{n}"), Checkpoint::vector(m));
            ck.push(format!("adam.v.{n}"), Checkpoint::vector(v));
        }
    }
    ck
}

/// Rebuilds a model (and optimizer state, if stored).
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model<f32>, Option<Adam<f32>>), NnError> {
    let mut map: BTreeMap<&str, &Tensor<f32>> = BTreeMap::new();
    for (n, t) in &ck.tensors {
        if map.insert(n.as_str(), t).is_some() {
            return Err(err(format!("duplicate tensor {n}")));
        }
    }
    let get = |name: &str, len: Option<usize>| -> Result<&[f32], NnError> {
        let t = map.get(name).ok_or_else(|| err(format!("missing tensor {name}")))?;
        if len.is_some_and(|l| t.len() != l) {
            return Err(err(format!("tensor {name} has {} values", t.len())));
        }
        Ok(t.data())
    };
    let ch = get("config.channels", Some(4))?;
    let k = get("config.kernels", Some(2))?;
    let pool = PoolMode::from_code(get("config.pool", Some(1))?[0] as u8).ok_or_else(|| err("unknown pool mode"))?;
    let config = ModelConfig {
        channels: [ch[0] as usize, ch[1] as usize, ch[2] as usize, ch[3] as usize],
        stem_kernel: k[0] as usize,
        kernel: k[1] as usize,
        use_features: get("config.use_features", Some(1))?[0] != 0.0,
        pool,
    };
    let mut model = Model::<f32>::new(config, 0)?;
    let (mean, std) = (get("features.mean", Some(NUM_FEATURES))?, get("features.std", Some(NUM_FEATURES))?);
    model.standardizer =
        Standardizer { mean: std::array::from_fn(|i| mean[i] as f64), std: std::array::from_fn(|i| std[i] as f64) };
    let mut names = Vec::new();
    for (n, p) in model.params_mut() {
        let t = map.get(n.as_str()).ok_or_else(|| err(format!("missing tensor {n}")))?;
        if t.shape() != p.value.shape() {
            return Err(err(format!("tensor {n}: shape {:?}, expected {:?}", t.shape(), p.value.shape())));
        }
        p.value = (*t).clone();
        names.push(n);
    }
    for (n, bn) in model.batchnorms_mut() {
        let c = bn.channels();
        bn.running_mean = get(&format!("{n}.running_mean"), Some(c))?.to_vec();
        bn.running_var = get(&format!("{n}.running_var"), Some(c))?.to_vec();
        bn.tracked = get(&format!("{n}.tracked"), Some(1))?[0] != 0.0;
    }
    let adam = match map.get("adam.step") {
        None => None,
        Some(step) => {
            let s = step.data();
            let mut a = Adam::new(get("adam.weight_decay", Some(1))?[0] as f64);
            a.step = ((s[0] as u64) << 16) | s[1] as u64;
            for n in &names {
                a.m.push(get(&format!("adam.m.{n}"), None)?.to_vec());
                a.v.push(get(&format!("adam.v.{n}"), None)?.to_vec());
            }
            Some(a)
        }
    };
    Ok((model, adam))
}

pub fn save_checkpoint(model: &Model<f32>, adam: Option<&Adam<f32>>, path: impl AsRef<Path>) -> Result<(), NnError> {
    let path = path.as_ref();
    std::fs::write(path, to_checkpoint(model, adam).encode())
        .map_err(|e| NnError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Option<Adam<f32>>), NnError> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| NnError::Io { path: path.display().to_string(), message: e.to_string() })?;
    from_checkpoint(&Checkpoint::decode(&bytes)?)
}
