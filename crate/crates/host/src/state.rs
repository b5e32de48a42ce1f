//! The client's state directory.
//!
//! ```text
//! <state>/client.vscc               configuration (below)
//! <state>/model.vsml                the model being offloaded
//! <state>/masks/layer-<i>.vsmk      MaskSet for offloaded layer i
//! <state>/records/<id>.vsrc         InferenceRecord, id as 20 decimal digits
//! ```
//!
//! `client.vscc`, little-endian:
//!
//! ```text
//! "VSCC" u16 version=1
//! u32 worker_count, then per worker: u32 len, utf8 address
//! u8 privacy_flag [f32 k]       flag 0 = off, 1 = on
//! u8 confidentiality_flag [f32 k]
//! u64 next_inference_id
//! u64 seed
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use offload_core::client::InferenceRecord;
use offload_core::codec::{DecodeError, Reader, Writer};
use offload_core::masking::MaskSet;
use offload_core::ModelSpec;

use crate::files::{read_bytes, read_model, write_atomic, write_model, FileError};

pub const CONFIG_MAGIC: [u8; 4] = *b"VSCC";
pub const CONFIG_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub workers: Vec<String>,
    pub privacy: Option<f32>,
    pub confidentiality: Option<f32>,
    pub next_id: u64,
    pub seed: u64,
}

fn write_opt(w: &mut Writer, v: Option<f32>) {
    match v {
        Some(k) => {
            w.u8(1).f32(k);
        }
        None => {
            w.u8(0);
        }
    }
}

fn read_opt(r: &mut Reader<'_>) -> Result<Option<f32>, DecodeError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.f32()?)),
        v => Err(DecodeError::Invalid {
            what: "option flag",
            value: v as u64,
        }),
    }
}

impl ClientConfig {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CONFIG_MAGIC).u16(CONFIG_VERSION).len32(self.workers.len());
        for addr in &self.workers {
            w.len32(addr.len()).bytes(addr.as_bytes());
        }
        write_opt(&mut w, self.privacy);
        write_opt(&mut w, self.confidentiality);
        w.u64(self.next_id).u64(self.seed);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.array::<4>()? != CONFIG_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let version = r.u16()?;
        if version != CONFIG_VERSION {
            return Err(DecodeError::Version(version));
        }
        let n = r.count(4)?;
        let mut workers = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.count(1)?;
            let raw = r.take(len)?;
            let addr = std::str::from_utf8(raw).map_err(|_| DecodeError::Invalid {
                what: "utf8 address",
                value: len as u64,
            })?;
            workers.push(addr.to_string());
        }
        let privacy = read_opt(&mut r)?;
        let confidentiality = read_opt(&mut r)?;
        let next_id = r.u64()?;
        let seed = r.u64()?;
        r.finish()?;
        Ok(ClientConfig {
            workers,
            privacy,
            confidentiality,
            next_id,
            seed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StateDir {
    dir: PathBuf,
}

impl StateDir {
    pub fn new(dir: &Path) -> Self {
        StateDir { dir: dir.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn config_path(&self) -> PathBuf {
        self.dir.join("client.vscc")
    }

    fn model_path(&self) -> PathBuf {
        self.dir.join("model.vsml")
    }

    pub fn mask_path(&self, layer: usize) -> PathBuf {
        self.dir.join("masks").join(format!("layer-{layer}.vsmk"))
    }

    pub fn record_path(&self, id: u64) -> PathBuf {
        self.dir.join("records").join(format!("{id:020}.vsrc"))
    }

    pub fn save_config(&self, config: &ClientConfig) -> Result<(), FileError> {
        write_atomic(&self.config_path(), &config.to_bytes())
    }

    pub fn load_config(&self) -> Result<ClientConfig, FileError> {
        let p = self.config_path();
        ClientConfig::from_bytes(&read_bytes(&p)?).map_err(|e| FileError::decode(&p, e))
    }

    pub fn save_model(&self, model: &ModelSpec) -> Result<(), FileError> {
        write_model(&self.model_path(), model)
    }

    pub fn load_model(&self) -> Result<ModelSpec, FileError> {
        read_model(&self.model_path())
    }

    pub fn save_masks(&self, set: &MaskSet) -> Result<(), FileError> {
        write_atomic(&self.mask_path(set.layer_index()), &set.to_bytes())
    }

    /// All stored mask sets, in layer order.
    pub fn load_masks(&self) -> Result<Vec<MaskSet>, FileError> {
        let dir = self.dir.join("masks");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut sets = Vec::new();
        for path in sorted_files(&dir, "vsmk")? {
            sets.push(MaskSet::from_bytes(&read_bytes(&path)?).map_err(|e| FileError::decode(&path, e))?);
        }
        sets.sort_by_key(MaskSet::layer_index);
        Ok(sets)
    }

    pub fn clear_masks(&self) -> Result<(), FileError> {
        let dir = self.dir.join("masks");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| FileError::io(&dir, e))?;
        }
        Ok(())
    }

    pub fn save_record(&self, record: &InferenceRecord) -> Result<(), FileError> {
        write_atomic(&self.record_path(record.inference_id), &record.to_bytes())
    }

    pub fn load_record(&self, id: u64) -> Result<InferenceRecord, FileError> {
        let p = self.record_path(id);
        InferenceRecord::from_bytes(&read_bytes(&p)?).map_err(|e| FileError::decode(&p, e))
    }

    /// All stored records, in id order.
    pub fn load_records(&self) -> Result<Vec<InferenceRecord>, FileError> {
        let dir = self.dir.join("records");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        sorted_files(&dir, "vsrc")?
            .into_iter()
            .map(|p| InferenceRecord::from_bytes(&read_bytes(&p)?).map_err(|e| FileError::decode(&p, e)))
            .collect()
    }

    /// Bytes on disk for one record.
    pub fn record_size(&self, id: u64) -> Result<u64, FileError> {
        let p = self.record_path(id);
        fs::metadata(&p).map(|m| m.len()).map_err(|e| FileError::io(&p, e))
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, FileError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| FileError::io(dir, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    paths.sort();
    Ok(paths)
}
