//! Binary checkpoint format.
//!
//! ```text
//! "BBLM" | version u8 | tag_len u8 | tag | dataset_len u8 | dataset
//!        | seed u64 | epoch u32 | count u64 | count x f64 | crc32 u32
//! ```
//!
//! Integers and reals are little-endian; the CRC covers every preceding
//! byte. Parameters are always stored at full width.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{AnyClassifier, Architecture, Denoiser, LinearSvm, Params, SimpleCnn};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BBLM";
const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub dataset_tag: String,
    pub seed: u64,
    pub epoch: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(architecture: Architecture, params: &Params, meta: CheckpointMeta) -> Self {
        Self {
            architecture,
            meta,
            params: params.data().to_vec(),
        }
    }

    fn expect(&self, arch: Architecture) -> Result<()> {
        if self.architecture != arch {
            return Err(Error::Compatibility {
                expected: arch.tag().into(),
                found: self.architecture.tag().into(),
            });
        }
        Ok(())
    }

    fn params_for(&self, layout: Vec<super::ParamSpec>) -> Result<Params> {
        let needed: usize = layout.iter().map(|s| s.len()).sum();
        if needed != self.params.len() {
            return Err(Error::format(
                0,
                format!(
                    "{} checkpoint holds {} parameters, architecture needs {needed}",
                    self.architecture.tag(),
                    self.params.len()
                ),
            ));
        }
        Params::from_data(layout, self.params.clone())
    }

    pub fn into_svm(self) -> Result<LinearSvm> {
        self.expect(Architecture::SvmLinear)?;
        LinearSvm::from_params(self.params_for(LinearSvm::layout())?)
    }

    pub fn into_cnn(self) -> Result<SimpleCnn> {
        self.expect(Architecture::SimpleCnn)?;
        SimpleCnn::from_params(self.params_for(SimpleCnn::layout())?)
    }

    pub fn into_denoiser(self) -> Result<Denoiser> {
        self.expect(Architecture::Denoiser)?;
        Denoiser::from_params(self.params_for(Denoiser::layout())?)
    }

    pub fn into_classifier(self) -> Result<AnyClassifier> {
        match self.architecture {
            Architecture::SvmLinear => Ok(AnyClassifier::Svm(self.into_svm()?)),
            Architecture::SimpleCnn => Ok(AnyClassifier::Cnn(self.into_cnn()?)),
            Architecture::Denoiser => Err(Error::Compatibility {
                expected: "a classifier".into(),
                found: self.architecture.tag().into(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tag = self.architecture.tag().as_bytes();
        let ds = self.meta.dataset_tag.as_bytes();
        if ds.len() > u8::MAX as usize {
            return Err(Error::Validation("dataset tag longer than 255 bytes".into()));
        }
        let mut buf = Vec::with_capacity(40 + tag.len() + ds.len() + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(tag.len() as u8);
        buf.extend_from_slice(tag);
        buf.push(ds.len() as u8);
        buf.extend_from_slice(ds);
        buf.extend_from_slice(&self.meta.seed.to_le_bytes());
        buf.extend_from_slice(&self.meta.epoch.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, not a model checkpoint"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let tag_len = r.u8("architecture tag length")? as usize;
        let tag_at = r.pos;
        let tag = std::str::from_utf8(r.take(tag_len, "architecture tag")?)
            .map_err(|_| Error::format(tag_at as u64, "architecture tag is not UTF-8"))?;
        let architecture = Architecture::from_tag(tag)
            .ok_or_else(|| Error::format(tag_at as u64, format!("unknown architecture `{tag}`")))?;
        let ds_len = r.u8("dataset tag length")? as usize;
        let ds_at = r.pos;
        let dataset_tag = String::from_utf8(r.take(ds_len, "dataset tag")?.to_vec())
            .map_err(|_| Error::format(ds_at as u64, "dataset tag is not UTF-8"))?;
        let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().unwrap());
        let epoch = u32::from_le_bytes(r.take(4, "epoch")?.try_into().unwrap());
        let count_at = r.pos;
        let count = u64::from_le_bytes(r.take(8, "parameter count")?.try_into().unwrap());
        let remaining = (bytes.len() - r.pos) as u64;
        if count.checked_mul(8).and_then(|n| n.checked_add(4)) != Some(remaining) {
            return Err(Error::format(
                count_at as u64,
                format!("header announces {count} parameters but {remaining} bytes follow"),
            ));
        }
        let params = r
            .take(count as usize * 8, "parameters")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let crc_at = r.pos;
        let stored = u32::from_le_bytes(r.take(4, "checksum")?.try_into().unwrap());
        if crc32fast::hash(&bytes[..crc_at]) != stored {
            return Err(Error::format(crc_at as u64, "checksum mismatch"));
        }
        Ok(Self {
            architecture,
            meta: CheckpointMeta {
                dataset_tag,
                seed,
                epoch,
            },
            params,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
