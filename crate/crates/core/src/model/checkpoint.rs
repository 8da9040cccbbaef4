use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::DenseTensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIPCLCKP";
const VERSION: u32 = 1;
const FLAG_BIDIRECTIONAL: u8 = 1;

/// Model configuration plus an ordered list of named tensors. Besides the
/// model weights it may carry extra tensors (optimizer state, counters).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, DenseTensor)>,
}

fn read_exact<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(input)?))
}

fn read_usize(input: &mut impl Read) -> Result<usize> {
    usize::try_from(read_u64(input)?).map_err(|_| Error::Format("size overflows usize".into()))
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        let tensors = params
            .weights
            .names()
            .into_iter()
            .zip(params.weights.iter().into_iter().cloned())
            .collect();
        Self {
            config: params.config,
            tensors,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: DenseTensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds model weights by name; extra tensors are ignored.
    pub fn to_params(&self) -> Result<ModelParams> {
        let layout = ParamSet::from_vec(vec![(); 6 + 10 * self.config.blocks], self.config.blocks)
            .expect("layout");
        let tensors = layout
            .names()
            .into_iter()
            .map(|name| {
                self.get(&name)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams {
            config: self.config,
            weights: ParamSet::from_vec(tensors, self.config.blocks).expect("layout"),
        };
        params
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(params)
    }

    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut out = BufWriter::new(out);
        let c = &self.config;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for v in [
            c.dim,
            c.n_intents,
            c.max_len,
            c.depth,
            c.blocks,
            c.heads,
            c.n_items,
        ] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&[if c.causal { 0 } else { FLAG_BIDIRECTIONAL }])?;
        out.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&2u32.to_le_bytes())?;
            out.write_all(&(t.rows() as u64).to_le_bytes())?;
            out.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.values() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self> {
        let mut input = BufReader::new(input);
        if &read_exact::<8>(&mut input)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_exact::<4>(&mut input)?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = read_usize(&mut input)?;
        }
        let [flags] = read_exact::<1>(&mut input)?;
        let config = ModelConfig {
            dim: dims[0],
            n_intents: dims[1],
            max_len: dims[2],
            depth: dims[3],
            blocks: dims[4],
            heads: dims[5],
            n_items: dims[6],
            causal: flags & FLAG_BIDIRECTIONAL == 0,
        };
        let count = read_usize(&mut input)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_exact::<4>(&mut input)?) as usize;
            let mut name = vec![0u8; len];
            input
                .read_exact(&mut name)
                .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(read_exact::<4>(&mut input)?);
            if ndim != 2 {
                return Err(Error::Format(format!(
                    "tensor {name} has rank {ndim}, expected 2"
                )));
            }
            let rows = read_usize(&mut input)?;
            let cols = read_usize(&mut input)?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
            let mut values = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                values.push(f64::from_le_bytes(read_exact::<8>(&mut input)?));
            }
            tensors.push((name, DenseTensor::new(rows, cols, values)?));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}
