//! Binary checkpoint format.
//!
//! ```text
//! "STPN1"                   5 bytes
//! version                   u32 LE
//! header length             u32 LE
//! header                    JSON: { config, tensors: [{ name, shape, offset, trainable }] }
//! payload                   f32 LE values, tensors in manifest order
//! crc32(payload)            u32 LE
//! ```
//!
//! `offset` counts f32 elements from the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use stpnet_autodiff::{Element, Tensor};

use crate::error::{Error, Result};
use crate::model::{StpnetConfig, StpnetModel};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STPN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Header {
    pub config: StpnetConfig,
    pub tensors: Vec<ManifestEntry>,
}

pub fn manifest<T: Element>(model: &StpnetModel<T>) -> Vec<ManifestEntry> {
    let mut offset = 0;
    model
        .store
        .iter()
        .map(|(_, p)| {
            let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset, trainable: p.trainable };
            offset += p.value.numel();
            e
        })
        .collect()
}

pub fn write_checkpoint<T: Element>(w: &mut impl Write, model: &StpnetModel<T>) -> Result<()> {
    let header = Header { config: model.cfg().clone(), tensors: manifest(model) };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut payload = Vec::new();
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?.to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("four bytes"))
}

/// Parses and verifies a checkpoint, rebuilding the model from its config.
pub fn read_checkpoint<T: Element>(r: &mut impl Read) -> Result<StpnetModel<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 5, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32_le(take(&mut buf, 4, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u32_le(take(&mut buf, 4, "header length")?) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut buf, hlen, "header")?).map_err(|e| Error::Format(format!("header: {e}")))?;
    if buf.len() < 4 {
        return Err(Error::Format("truncated checkpoint while reading payload".into()));
    }
    let (payload, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(payload) != u32_le(crc) {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    if payload.len() % 4 != 0 {
        return Err(Error::Format("payload length is not a multiple of 4".into()));
    }

    let mut model = StpnetModel::<T>::new(&header.config)?;
    let expected = manifest(&model);
    if expected.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config builds {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want != got {
            return Err(Error::Format(format!("manifest entry {got:?} does not match the model ({want:?})")));
        }
    }
    let total = expected.last().map_or(0, |e| e.offset + e.shape.iter().product::<usize>());
    if payload.len() != 4 * total {
        return Err(Error::Format(format!("payload holds {} values, manifest needs {total}", payload.len() / 4)));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, e) in ids.into_iter().zip(&header.tensors) {
        let n: usize = e.shape.iter().product();
        let vals: Vec<T> = payload[4 * e.offset..4 * (e.offset + n)]
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f64::from(f32::from_le_bytes(c.try_into().expect("four bytes")))))
            .collect();
        model.store.set(id, Tensor::from_vec(&e.shape, vals)?)?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &StpnetModel<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<StpnetModel<T>> {
    read_checkpoint(&mut std::fs::File::open(path)?)
}

/// Config file: model and training sections plus a schema version.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: StpnetConfig,
    pub train: crate::train::TrainConfig,
}

pub const CONFIG_VERSION: u32 = 1;

impl RunConfig {
    pub fn new() -> Self {
        Self { version: CONFIG_VERSION, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version { found: cfg.version, expected: CONFIG_VERSION });
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
