//! Checkpoint directories: a `key=value` manifest and a parameter blob.
//!
//! Blob layout (little-endian): the 8-byte magic `MBDIFFCK`, a `u32`
//! version, a `u32` tensor count, then per tensor a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u64` dimensions and the `f64` values in
//! row-major order.

use std::fs;
use std::path::Path;

use crate::config::{Config, KeyValues};
use crate::data::DatasetHeader;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::mbae::Mbae;
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
const MAGIC: &[u8; 8] = b"MBDIFFCK";
const VERSION: u32 = 1;
const FORMAT: &str = "mbdiff-checkpoint";

/// A trained model after `stage` (1, 2 or 3) with the configuration it was
/// trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub header: DatasetHeader,
    pub stage: u8,
    pub mbae: Mbae,
    pub denoiser: Option<Denoiser>,
}

pub fn write_blob(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("blob truncated at byte {}", self.pos)))?;
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
}

pub fn read_blob(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter blob (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

/// Copies every blob tensor into the store entry of the same name.
fn fill(store: &mut ParamStore, blob: &mut Vec<(String, Tensor)>) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let pos = blob
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("blob lacks tensor {name}")))?;
        let (_, t) = blob.swap_remove(pos);
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, the manifest implies {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(config: Config, header: DatasetHeader, stage: u8, mbae: Mbae, denoiser: Option<Denoiser>) -> Self {
        Self {
            config,
            header,
            stage,
            mbae,
            denoiser,
        }
    }

    /// Errors unless this checkpoint has completed `stage` and was built
    /// with the model shape of `cfg`.
    pub fn check_compatible(&self, cfg: &Config, stage: u8) -> Result<()> {
        if self.stage < stage {
            return Err(Error::Checkpoint(format!(
                "a stage-{stage} checkpoint is required, found stage {}",
                self.stage
            )));
        }
        if cfg.model != self.config.model || cfg.data.seq_len != self.config.data.seq_len {
            return Err(Error::Checkpoint(
                "model configuration differs from the checkpoint's".into(),
            ));
        }
        if stage >= 2 && (cfg.denoiser != self.config.denoiser || cfg.schedule != self.config.schedule) {
            return Err(Error::Checkpoint(
                "denoiser or noise schedule differs from the checkpoint's".into(),
            ));
        }
        Ok(())
    }

    pub fn manifest(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("format", FORMAT);
        kv.set("version", VERSION);
        kv.set("stage", self.stage);
        kv.set("tensors", self.tensors().len());
        kv.set("header.num_users", self.header.num_users);
        kv.set("header.num_items", self.header.num_items);
        kv.set("header.num_behaviors", self.header.num_behaviors);
        kv.set("header.behavior_names", self.header.behavior_names.join(","));
        for (k, v) in self.config.to_kv().iter() {
            kv.set(k, v);
        }
        kv
    }

    pub fn tensors(&self) -> Vec<(&str, &Tensor)> {
        let mut out: Vec<(&str, &Tensor)> = self.mbae.store.iter().collect();
        if let Some(den) = &self.denoiser {
            out.extend(den.store.iter());
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest().save(&dir.join(MANIFEST_FILE))?;
        let blob = dir.join(BLOB_FILE);
        fs::write(&blob, write_blob(&self.tensors())).map_err(|e| Error::io(&blob, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::load(&dir.join(MANIFEST_FILE))?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest key {k} is not an integer")))
        };
        if get("format")? != FORMAT || num("version")? != VERSION as usize {
            return Err(Error::Checkpoint("unrecognized manifest format or version".into()));
        }
        let stage = num("stage")?;
        if !(1..=3).contains(&stage) {
            return Err(Error::Checkpoint(format!("invalid stage {stage}")));
        }
        let names = get("header.behavior_names")?;
        let header = DatasetHeader {
            num_users: num("header.num_users")?,
            num_items: num("header.num_items")?,
            num_behaviors: num("header.num_behaviors")?,
            behavior_names: if names.is_empty() {
                Vec::new()
            } else {
                names.split(',').map(str::to_string).collect()
            },
        };
        let mut config = Config::default();
        for (k, v) in kv.iter() {
            if !matches!(k, "format" | "version" | "stage" | "tensors") && !k.starts_with("header.") {
                config.set(k, v)?;
            }
        }
        config.validate()?;
        let path = dir.join(BLOB_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut blob = read_blob(&bytes)?;
        if blob.len() != num("tensors")? {
            return Err(Error::Checkpoint("manifest tensor count differs from the blob".into()));
        }
        let mut rng = stream(0, "checkpoint-shapes", 0);
        let mut mbae = Mbae::new(config.model.clone(), header.vocab(), config.data.seq_len, &mut rng)?;
        fill(&mut mbae.store, &mut blob)?;
        let denoiser = if stage >= 2 {
            let mut den = Denoiser::new(config.denoiser.clone(), config.model.d, header.num_behaviors, &mut rng)?;
            fill(&mut den.store, &mut blob)?;
            Some(den)
        } else {
            None
        };
        if let Some((name, _)) = blob.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name} in blob")));
        }
        Ok(Self::new(config, header, stage as u8, mbae, denoiser))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_corruption() {
        let a = Tensor::matrix(2, 2, vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]);
        let b = Tensor::vector(vec![7.0]);
        let bytes = write_blob(&[("x.w", &a), ("y", &b)]);
        let back = read_blob(&bytes).unwrap();
        assert_eq!(back, vec![("x.w".to_string(), a), ("y".to_string(), b)]);
        assert!(read_blob(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_blob(&bad).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut cfg = Config::default();
        cfg.model.d = 8;
        cfg.model.ffn_dim = 8;
        cfg.denoiser.hidden = 8;
        let header = DatasetHeader {
            num_users: 3,
            num_items: 12,
            num_behaviors: 2,
            behavior_names: vec!["view".into(), "buy".into()],
        };
        let mut rng = stream(5, "ck", 0);
        let mbae = Mbae::new(cfg.model.clone(), header.vocab(), cfg.data.seq_len, &mut rng).unwrap();
        let mut den = Denoiser::new(cfg.denoiser.clone(), 8, 2, &mut rng).unwrap();
        den.randomize(0.1, &mut rng);
        let ck = Checkpoint::new(cfg, header, 2, mbae, Some(den));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = Config::default();
        let header = DatasetHeader {
            num_users: 1,
            num_items: 5,
            num_behaviors: 2,
            behavior_names: Vec::new(),
        };
        let mbae = Mbae::new(cfg.model.clone(), header.vocab(), 50, &mut stream(0, "s", 0)).unwrap();
        let ck = Checkpoint::new(cfg, header, 1, mbae, None);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).unwrap().replace("header.num_items=5", "header.num_items=6");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
