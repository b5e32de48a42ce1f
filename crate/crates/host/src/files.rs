//! Reading and writing model containers and tensor files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use offload_core::codec::DecodeError;
use offload_core::container::{decode_model, decode_tensor_file, encode_model, encode_tensor_file, ContainerError};
use offload_core::{ModelSpec, Tensor};
use thiserror::Error;

/// Extension used for tensor files.
pub const TENSOR_EXT: &str = "vst";
pub const MODEL_EXT: &str = "vsml";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Container { path: PathBuf, source: ContainerError },
    #[error("{}: {source}", path.display())]
    Decode { path: PathBuf, source: DecodeError },
}

impl FileError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        FileError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn decode(path: &Path, source: DecodeError) -> Self {
        FileError::Decode {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, FileError> {
    fs::read(path).map_err(|e| FileError::io(path, e))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FileError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| FileError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FileError::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ModelSpec, FileError> {
    decode_model(&read_bytes(path)?).map_err(|source| FileError::Container {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_model(path: &Path, model: &ModelSpec) -> Result<(), FileError> {
    write_atomic(path, &encode_model(model))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FileError> {
    decode_tensor_file(&read_bytes(path)?).map_err(|e| FileError::decode(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), FileError> {
    write_atomic(path, &encode_tensor_file(t))
}

/// Every `*.vst` file in `dir`, sorted by file name.
pub fn read_tensor_dir(dir: &Path) -> Result<Vec<(PathBuf, Tensor)>, FileError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| FileError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == TENSOR_EXT))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| read_tensor(&p).map(|t| (p, t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_round_trip_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::vector(&[1.0, -2.5]);
        write_tensor(&dir.path().join("b.vst"), &a).unwrap();
        write_tensor(&dir.path().join("a.vst"), &Tensor::vector(&[3.0])).unwrap();
        fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let all = read_tensor_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert!(all[0].0.ends_with("a.vst"));
        assert_eq!(all[1].1, a);
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vst");
        fs::write(&p, b"VSTNxx").unwrap();
        let msg = read_tensor(&p).unwrap_err().to_string();
        assert!(msg.contains("bad.vst"), "{msg}");
        assert!(read_model(&dir.path().join("missing.vsml")).is_err());
    }
}
