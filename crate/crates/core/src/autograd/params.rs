use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SGPARAMS";
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// How a block was initialized; kept so checkpoints are self-describing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Given,
}

/// Named parameter blocks, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: BTreeMap<String, Tensor>,
    init: BTreeMap<String, Init>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.init.insert(name.clone(), Init::Given);
        self.blocks.insert(name, t);
    }

    pub fn init_block(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) {
        let t = match init {
            Init::Zeros | Init::Given => Tensor::zeros(rows, cols),
            Init::XavierUniform => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
            }
        };
        let name = name.into();
        self.init.insert(name.clone(), init);
        self.blocks.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.blocks.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.init.remove(name);
        self.blocks.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn init_kind(&self, name: &str) -> Option<Init> {
        self.init.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.blocks.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.values().map(Tensor::len).sum()
    }

    /// Zero tensors shaped like every block (optimizer moments, accumulators).
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.blocks {
            out.insert(k.clone(), Tensor::zeros(v.rows(), v.cols()));
        }
        out
    }

    /// Name and Frobenius norm of every block.
    pub fn norm_table(&self) -> Vec<(String, f64)> {
        self.blocks.iter().map(|(k, v)| (k.clone(), v.norm())).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&PARAM_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for (name, t) in &self.blocks {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            let init = match self.init.get(name).copied().unwrap_or(Init::Given) {
                Init::Zeros => 0u8,
                Init::XavierUniform => 1,
                Init::Given => 2,
            };
            w.write_all(&[init])?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        Self::read_from(&mut r, path)
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a parameter checkpoint (bad magic)"));
        }
        let version = read_u32(r).map_err(io)?;
        if version != PARAM_FORMAT_VERSION {
            return Err(Error::Version {
                what: "parameter checkpoint",
                expected: PARAM_FORMAT_VERSION,
                found: version,
            });
        }
        let count = read_u32(r).map_err(io)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r).map_err(io)? as usize;
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb).map_err(io)?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::format(path, "block name is not UTF-8"))?;
            let mut init = [0u8; 1];
            r.read_exact(&mut init).map_err(io)?;
            let init = match init[0] {
                0 => Init::Zeros,
                1 => Init::XavierUniform,
                2 => Init::Given,
                b => return Err(Error::format(path, format!("unknown init tag {b}"))),
            };
            let rows = read_u64(r).map_err(io)? as usize;
            let cols = read_u64(r).map_err(io)? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
            store.blocks.insert(name.clone(), Tensor::from_vec(rows, cols, data)?);
            store.init.insert(name, init);
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
