//! The worker service: one thread per connection around a shared
//! [`Worker`], with models and records mirrored to a store directory.
//!
//! Store layout:
//!
//! ```text
//! <store>/models/<role>.vsml     model container, role = full | share_plus |
//!                                share_minus | layer-<i>
//! <store>/records/<id>.vswr      worker record (input + commit, no
//!                                intermediates), id as 20 decimal digits
//! ```

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use offload_core::protocol::{
    ErrorCode, Message, ModelRole, Session, SessionError, Transport, TransportError, PROTOCOL_VERSION,
};
use offload_core::worker::{StoreEvent, Worker, WorkerRecord};

use crate::files::{read_bytes, write_atomic, FileError};
use crate::net::StreamTransport;

pub fn role_name(role: ModelRole) -> String {
    match role {
        ModelRole::Full => "full".into(),
        ModelRole::SharePlus => "share_plus".into(),
        ModelRole::ShareMinus => "share_minus".into(),
        ModelRole::SingleLayer(i) => format!("layer-{i}"),
    }
}

pub fn parse_role(name: &str) -> Option<ModelRole> {
    match name {
        "full" => Some(ModelRole::Full),
        "share_plus" => Some(ModelRole::SharePlus),
        "share_minus" => Some(ModelRole::ShareMinus),
        other => other.strip_prefix("layer-")?.parse().ok().map(ModelRole::SingleLayer),
    }
}

#[derive(Debug, Clone)]
pub struct WorkerStore {
    dir: PathBuf,
}

impl WorkerStore {
    pub fn open(dir: &Path) -> Result<Self, FileError> {
        for sub in ["models", "records"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| FileError::io(&p, e))?;
        }
        Ok(WorkerStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record_path(&self, id: u64) -> PathBuf {
        self.dir.join("records").join(format!("{id:020}.vswr"))
    }

    fn model_path(&self, role: ModelRole) -> PathBuf {
        self.dir.join("models").join(format!("{}.vsml", role_name(role)))
    }

    /// Reinstates stored models and records into `worker`.
    pub fn load(&self, worker: &mut Worker) -> Result<(), FileError> {
        let models = self.dir.join("models");
        for entry in fs::read_dir(&models).map_err(|e| FileError::io(&models, e))?.flatten() {
            let path = entry.path();
            let Some(role) = path.file_stem().and_then(|s| s.to_str()).and_then(parse_role) else {
                continue;
            };
            if path.extension().is_some_and(|x| x == "vsml") {
                worker
                    .restore_model(role, read_bytes(&path)?)
                    .map_err(|e| FileError::Io {
                        path: path.clone(),
                        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
                    })?;
            }
        }
        let records = self.dir.join("records");
        let mut paths: Vec<PathBuf> = fs::read_dir(&records)
            .map_err(|e| FileError::io(&records, e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "vswr"))
            .collect();
        paths.sort();
        for path in paths {
            let record = WorkerRecord::from_bytes(&read_bytes(&path)?).map_err(|e| FileError::decode(&path, e))?;
            worker.restore_record(record);
        }
        Ok(())
    }

    pub fn apply(&self, events: Vec<StoreEvent>) -> Result<(), FileError> {
        for event in events {
            match event {
                StoreEvent::ModelStored { role, container } => write_atomic(&self.model_path(role), &container)?,
                StoreEvent::ModelRemoved(role) => {
                    let p = self.model_path(role);
                    if p.exists() {
                        fs::remove_file(&p).map_err(|e| FileError::io(&p, e))?;
                    }
                }
                StoreEvent::RecordStored(record) => {
                    write_atomic(&self.record_path(record.inference_id), &record.to_bytes())?
                }
                StoreEvent::RecordEvicted(id) => {
                    let p = self.record_path(id);
                    if p.exists() {
                        fs::remove_file(&p).map_err(|e| FileError::io(&p, e))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Total bytes of stored records.
    pub fn record_bytes(&self) -> u64 {
        fs::read_dir(self.dir.join("records"))
            .map(|rd| rd.flatten().filter_map(|e| e.metadata().ok()).map(|m| m.len()).sum())
            .unwrap_or(0)
    }
}

#[derive(Debug)]
pub struct WorkerServer {
    worker: Mutex<Worker>,
    store: Option<WorkerStore>,
}

impl WorkerServer {
    pub fn new(mut worker: Worker, store: Option<WorkerStore>) -> Result<Arc<Self>, FileError> {
        if let Some(store) = &store {
            store.load(&mut worker)?;
            worker.take_events();
        }
        Ok(Arc::new(WorkerServer {
            worker: Mutex::new(worker),
            store,
        }))
    }

    pub fn with_worker<R>(&self, f: impl FnOnce(&mut Worker) -> R) -> R {
        f(&mut self.worker.lock().expect("worker lock poisoned"))
    }

    fn handle(&self, msg: &Message) -> Message {
        let mut worker = self.worker.lock().expect("worker lock poisoned");
        let reply = worker.handle(msg);
        let events = worker.take_events();
        if let Some(store) = &self.store {
            if let Err(e) = store.apply(events) {
                return Message::error(ErrorCode::Internal, format!("store: {e}"));
            }
        }
        reply
    }

    /// Serves one connection until the peer hangs up.
    pub fn serve_connection<T: Transport>(&self, transport: T) -> Result<(), SessionError> {
        let mut session = Session::accept(transport, PROTOCOL_VERSION)?;
        loop {
            let msg = match session.recv() {
                Ok(m) => m,
                Err(SessionError::Transport(TransportError::Closed)) => return Ok(()),
                Err(SessionError::Parse(e)) => {
                    let _ = session.send(&Message::error(ErrorCode::Malformed, e.to_string()));
                    return Err(SessionError::Parse(e));
                }
                Err(e) => return Err(e),
            };
            session.send(&self.handle(&msg))?;
        }
    }

    /// Accepts connections forever, one thread each.
    pub fn serve(self: &Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            stream.set_nodelay(true).ok();
            let server = Arc::clone(self);
            thread::spawn(move || {
                if let Err(e) = server.serve_connection(StreamTransport(stream)) {
                    eprintln!("connection ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Serves on a background thread; for tests and in-process setups.
    pub fn spawn(self: &Arc<Self>, listener: TcpListener) -> thread::JoinHandle<std::io::Result<()>> {
        let server = Arc::clone(self);
        thread::spawn(move || server.serve(listener))
    }
}
