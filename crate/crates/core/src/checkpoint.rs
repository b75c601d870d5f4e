//! Self-describing binary checkpoints.
//!
//! ```text
//! "HSEG1\n"
//! u64 header length, TOML header (network config, hierarchy, mode, step)
//! per parameter:   name, shape, f64 values
//! per parameter:   velocity (when present)
//! per norm layer:  name, mean, var
//! ```
//!
//! Integers are little-endian u64; strings are length-prefixed UTF-8.

use std::fs;
use std::path::Path;

use hseg_tensor::{RunningStats, Sgd, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::hierarchy::{parse_hierarchy, FlatSpace, LabelHierarchy};
use crate::network::{Network, NetworkConfig};

const MAGIC: &[u8] = b"HSEG1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    step: usize,
    /// Present for flat networks: whether the extra "unlabeled" class exists.
    flat_unlabeled: Option<bool>,
    network: NetworkConfig,
    hierarchy: String,
}

/// A trained network with everything needed to rebuild and resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub hierarchy: LabelHierarchy,
    pub flat: Option<FlatSpace>,
    pub network: Network,
    pub velocity: Option<Vec<Tensor>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len());
        for &d in t.shape() {
            self.u64(d);
        }
        self.f64s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes"))).map_err(|_| corrupt("length overflow"))
    }

    fn len(&mut self, item: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(item) > self.buf.len() - self.pos {
            return Err(corrupt("length exceeds file size"));
        }
        Ok(n)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.len(8)?;
        let shape = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let data = self.f64s()?;
        Ok(Tensor::new(&shape, data)?)
    }
}

fn corrupt(reason: &str) -> Error {
    Error::Checkpoint(reason.to_string())
}

impl Checkpoint {
    pub fn new(network: Network, hierarchy: LabelHierarchy, flat: Option<FlatSpace>, optimizer: Option<&Sgd>, step: usize) -> Self {
        Self {
            step,
            hierarchy,
            flat,
            velocity: optimizer.map(|o| o.velocity().to_vec()),
            network,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            flat_unlabeled: self.flat.as_ref().map(|f| f.unlabeled.is_some()),
            network: self.network.cfg.clone(),
            hierarchy: self.hierarchy.to_config_string(),
        };
        let mut w = Writer(MAGIC.to_vec());
        w.str(&toml::to_string(&header).expect("checkpoint header serializes"));
        let params = &self.network.params;
        w.u64(params.len());
        for p in params.iter() {
            w.str(&p.name);
            w.tensor(&p.value);
        }
        match &self.velocity {
            Some(v) => {
                w.u64(v.len());
                v.iter().for_each(|t| w.tensor(t));
            }
            None => w.u64(0),
        }
        w.u64(self.network.stats.len());
        for (name, s) in &self.network.stats {
            w.str(name);
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let header: Header = toml::from_str(&r.str()?).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let hierarchy = parse_hierarchy(&header.hierarchy)?;
        let flat = header.flat_unlabeled.map(|u| hierarchy.flatten_union(u));
        // the seed is irrelevant: every value is overwritten below
        let mut network = match &flat {
            None => Network::build(&hierarchy, &header.network, 0)?,
            Some(f) => Network::build_flat(f, &header.network, 0)?,
        };
        let count = r.len(1)?;
        if count != network.params.len() {
            return Err(corrupt(&format!("{count} parameters, the architecture has {}", network.params.len())));
        }
        for p in network.params.iter_mut() {
            let name = r.str()?;
            let value = r.tensor()?;
            if name != p.name || value.shape() != p.value.shape() {
                return Err(corrupt(&format!("parameter `{name}` does not match `{}`", p.name)));
            }
            p.value = value;
        }
        let velocity = match r.len(1)? {
            0 => None,
            n if n == count => {
                let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                if v.iter().zip(network.params.iter()).any(|(a, p)| a.shape() != p.value.shape()) {
                    return Err(corrupt("velocity shapes do not match the parameters"));
                }
                Some(v)
            }
            _ => return Err(corrupt("velocity count does not match the parameters")),
        };
        if r.len(1)? != network.stats.len() {
            return Err(corrupt("norm layer count does not match the architecture"));
        }
        for (name, s) in network.stats.iter_mut() {
            let stored = r.str()?;
            let (mean, var) = (r.f64s()?, r.f64s()?);
            if stored != *name || mean.len() != s.mean.len() || var.len() != s.var.len() {
                return Err(corrupt(&format!("norm statistics `{stored}` do not match `{name}`")));
            }
            *s = RunningStats { mean, var };
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            step: header.step,
            hierarchy,
            flat,
            network,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes)
    }
}
