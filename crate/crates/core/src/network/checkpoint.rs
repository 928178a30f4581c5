//! Little-endian checkpoint container.
//!
//! ```text
//! "R2B1"  u32 version
//! u32 tag_len, tag bytes             variant tag (or "DATASET")
//! [u8; 32]                           sha256 of the config JSON
//! u32 config_len, config JSON bytes
//! u32 entry_count
//! entry: u32 name_len, name, u32 rank, rank x u32 extents, f32 values
//! ```
//!
//! Values are stored as `f32`; a loaded checkpoint re-saves byte for byte.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NetConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"R2B1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub config_json: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config_digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_json.as_bytes()).into()
    }
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut buf, ckpt.tag.as_bytes())?;
    buf.extend_from_slice(&ckpt.config_digest());
    put_bytes(&mut buf, ckpt.config_json.as_bytes())?;
    put_u32(&mut buf, ckpt.entries.len())?;
    for (name, t) in &ckpt.entries {
        put_bytes(&mut buf, name.as_bytes())?;
        put_u32(&mut buf, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(buf, bytes.len())?;
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let start = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic; not an R2B1 checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let tag = r.string("variant tag")?;
    let digest_at = r.pos;
    let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let config_json = r.string("config")?;
    if <[u8; 32]>::from(Sha256::digest(config_json.as_bytes())) != digest {
        return Err(Error::Format {
            offset: digest_at as u64,
            message: "config digest mismatch".into(),
        });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("entry name")?;
        let rank = r.u32("rank")?;
        if rank > 8 {
            r.pos -= 4;
            return Err(r.fail(format!("entry {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| r.fail(format!("entry {name:?} is too large")))?;
        let raw = r.take(numel * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        tag,
        config_json,
        entries,
    })
}

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

impl Network {
    /// Parameters, running statistics and `extra` entries in one container.
    pub fn to_checkpoint(&self, extra: &[(String, Tensor)]) -> Result<Checkpoint> {
        let mut entries: Vec<(String, Tensor)> = self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for bn in self.bn_layers() {
            let s = &self.stats[bn.stats];
            entries.push((format!("{}{RUNNING_MEAN}", bn.name), Tensor::new(vec![s.mean.len()], s.mean.clone())?));
            entries.push((format!("{}{RUNNING_VAR}", bn.name), Tensor::new(vec![s.var.len()], s.var.clone())?));
        }
        entries.extend(extra.iter().cloned());
        Ok(Checkpoint {
            tag: self.config.variant.tag().to_string(),
            config_json: serde_json::to_string(&self.config)?,
            entries,
        })
    }

    /// Rebuilds a network; returns it with the entries it did not consume.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Network, Vec<(String, Tensor)>)> {
        let config: NetConfig = serde_json::from_str(&ckpt.config_json)?;
        if config.variant.tag() != ckpt.tag {
            return Err(Error::Format {
                offset: 8,
                message: format!("tag {} does not match config variant {}", ckpt.tag, config.variant),
            });
        }
        let mut net = Network::build(config)?;
        let mut used = vec![false; ckpt.entries.len()];
        let mut lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let i = ckpt
                .entries
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            let t = &ckpt.entries[i].1;
            if t.shape() != shape {
                return Err(Error::shape(format!("{name}: checkpoint {:?}, network {shape:?}", t.shape())));
            }
            used[i] = true;
            Ok(t.clone())
        };
        for p in net.store.iter_mut() {
            p.value = lookup(&p.name, p.value.shape())?;
        }
        let layers: Vec<(String, usize)> = net.bn_layers().iter().map(|b| (b.name.clone(), b.stats)).collect();
        for (name, idx) in layers {
            let c = net.stats[idx].mean.len();
            net.stats[idx].mean = lookup(&format!("{name}{RUNNING_MEAN}"), &[c])?.into_data();
            net.stats[idx].var = lookup(&format!("{name}{RUNNING_VAR}"), &[c])?.into_data();
        }
        let extra = ckpt
            .entries
            .iter()
            .zip(&used)
            .filter(|(_, u)| !**u)
            .map(|(e, _)| e.clone())
            .collect();
        Ok((net, extra))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network, extra: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), &net.to_checkpoint(extra)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path)?;
    Network::from_checkpoint(&read_checkpoint(&bytes)?)
}
