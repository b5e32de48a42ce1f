//! The untrusted worker: holds models, runs inferences, commits to every
//! intermediate and keeps only the input, recomputing on demand to answer
//! openings.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::commitment::{build_commit, model_layouts, open_units, slice_layout, MerkleCommit, UnitLayout};
use crate::container::{decode_model, ContainerError};
use crate::nn::ModelSpec;
use crate::protocol::{
    decode, encode, ErrorCode, InferMode, InferRequest, InferResponse, Message, ModelRole, SessionError, VerifyRequest,
    VerifyResponse, WorkerLink, PROTOCOL_VERSION,
};
use crate::rng::DetRng;
use crate::tensor::{Region, Tensor};

pub const RECORD_MAGIC: [u8; 4] = *b"VSWR";
pub const DEFAULT_CAPACITY: usize = 1024;

/// How the worker treats the computations it is given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    Honest,
    /// Adds `+1.0` to every element of `ceil(beta * n)` randomly chosen
    /// units of layer `target_layer`'s output before committing. Units are
    /// drawn from a stream keyed by `(seed, inference_id)`, so re-execution
    /// reproduces them.
    Cheat {
        beta: f64,
        target_layer: usize,
        seed: u64,
    },
    /// Commits honestly, then alters the first value of every opened unit.
    TamperOpenings,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkerError {
    #[error("no model for role {0:?}")]
    RoleMismatch(ModelRole),
    #[error("unknown inference {0}")]
    UnknownInference(u64),
    #[error("inference {0} was evicted")]
    Evicted(u64),
    #[error("shape: {0}")]
    Shape(alloc::string::String),
    #[error("malformed request: {0}")]
    Malformed(alloc::string::String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl WorkerError {
    pub fn code(&self) -> ErrorCode {
        match self {
            WorkerError::RoleMismatch(_) => ErrorCode::RoleMismatch,
            WorkerError::UnknownInference(_) => ErrorCode::UnknownInference,
            WorkerError::Evicted(_) => ErrorCode::Evicted,
            WorkerError::Shape(_) => ErrorCode::Shape,
            WorkerError::Malformed(_) | WorkerError::Container(_) => ErrorCode::Malformed,
        }
    }
}

/// Everything the worker keeps about one inference. There is deliberately
/// no field for intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRecord {
    pub inference_id: u64,
    pub mode: InferMode,
    pub role: ModelRole,
    pub verify_ratio: f32,
    pub input: Tensor,
    pub commit: MerkleCommit,
}

impl WorkerRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&RECORD_MAGIC).u16(1).u64(self.inference_id);
        match self.mode {
            InferMode::Holistic => w.u8(0).u32(0),
            InferMode::Layer(i) => w.u8(1).u32(i),
        };
        match self.role {
            ModelRole::Full => w.u8(0).u32(0),
            ModelRole::SharePlus => w.u8(1).u32(0),
            ModelRole::ShareMinus => w.u8(2).u32(0),
            ModelRole::SingleLayer(i) => w.u8(3).u32(i),
        };
        w.f32(self.verify_ratio).tensor(&self.input);
        self.commit.encode(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.array::<4>()? != RECORD_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let version = r.u16()?;
        if version != 1 {
            return Err(DecodeError::Version(version));
        }
        let inference_id = r.u64()?;
        let mode = match (r.u8()?, r.u32()?) {
            (0, _) => InferMode::Holistic,
            (1, i) => InferMode::Layer(i),
            (v, _) => return Err(DecodeError::invalid("inference mode", v)),
        };
        let role = match (r.u8()?, r.u32()?) {
            (0, _) => ModelRole::Full,
            (1, _) => ModelRole::SharePlus,
            (2, _) => ModelRole::ShareMinus,
            (3, i) => ModelRole::SingleLayer(i),
            (v, _) => return Err(DecodeError::invalid("model role", v)),
        };
        let verify_ratio = r.f32()?;
        let input = r.tensor()?;
        let commit = MerkleCommit::decode(&mut r)?;
        r.finish()?;
        Ok(WorkerRecord {
            inference_id,
            mode,
            role,
            verify_ratio,
            input,
            commit,
        })
    }
}

/// Changes to persistent state, for a host that mirrors them to disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoreEvent {
    ModelStored { role: ModelRole, container: Vec<u8> },
    ModelRemoved(ModelRole),
    RecordStored(WorkerRecord),
    RecordEvicted(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    pub inferences: u64,
    pub verifications: u64,
    /// Bytes of every intermediate produced, summed over all runs. None of
    /// them is retained.
    pub intermediate_bytes_computed: u64,
}

#[derive(Debug)]
pub struct Worker {
    behavior: Behavior,
    capacity: usize,
    models: BTreeMap<ModelRole, (Vec<u8>, ModelSpec)>,
    records: BTreeMap<u64, (WorkerRecord, u64)>,
    evicted: BTreeSet<u64>,
    tick: u64,
    stats: WorkerStats,
    events: Vec<StoreEvent>,
}

impl Default for Worker {
    fn default() -> Self {
        Worker::new(Behavior::Honest, DEFAULT_CAPACITY)
    }
}

impl Worker {
    pub fn new(behavior: Behavior, capacity: usize) -> Self {
        Worker {
            behavior,
            capacity: capacity.max(1),
            models: BTreeMap::new(),
            records: BTreeMap::new(),
            evicted: BTreeSet::new(),
            tick: 0,
            stats: WorkerStats::default(),
            events: Vec::new(),
        }
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn set_behavior(&mut self, behavior: Behavior) {
        self.behavior = behavior;
    }

    pub fn stats(&self) -> WorkerStats {
        self.stats
    }

    pub fn roles(&self) -> impl Iterator<Item = ModelRole> + '_ {
        self.models.keys().copied()
    }

    pub fn record(&self, inference_id: u64) -> Option<&WorkerRecord> {
        self.records.get(&inference_id).map(|(r, _)| r)
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Serialized size of everything retained for one inference.
    pub fn record_bytes(&self, inference_id: u64) -> Option<usize> {
        self.record(inference_id).map(|r| r.to_bytes().len())
    }

    pub fn persistent_record_bytes(&self) -> usize {
        self.records.values().map(|(r, _)| r.to_bytes().len()).sum()
    }

    /// Drains the pending persistence events.
    pub fn take_events(&mut self) -> Vec<StoreEvent> {
        core::mem::take(&mut self.events)
    }

    /// Installs a model without emitting an event (used when reloading).
    pub fn restore_model(&mut self, role: ModelRole, container: Vec<u8>) -> Result<(), WorkerError> {
        let model = decode_model(&container)?;
        self.models.insert(role, (container, model));
        Ok(())
    }

    /// Reinstates a record without emitting an event (used when reloading).
    pub fn restore_record(&mut self, record: WorkerRecord) {
        self.insert_record(record, false);
    }

    pub fn handle_setup(&mut self, role: ModelRole, container: &[u8]) -> Result<(), WorkerError> {
        if let Some((existing, _)) = self.models.get(&role) {
            if existing.as_slice() == container {
                return Ok(());
            }
        }
        let model = decode_model(container)?;
        // A worker holds one whole model: full or a single share.
        let replaced: Vec<ModelRole> = match role {
            ModelRole::SingleLayer(_) => vec![role],
            _ => [ModelRole::Full, ModelRole::SharePlus, ModelRole::ShareMinus].to_vec(),
        };
        let stale: Vec<u64> = self
            .records
            .values()
            .filter(|(r, _)| replaced.contains(&r.role))
            .map(|(r, _)| r.inference_id)
            .collect();
        for id in stale {
            self.evict(id);
        }
        for old in replaced {
            if old != role && self.models.remove(&old).is_some() {
                self.events.push(StoreEvent::ModelRemoved(old));
            }
        }
        self.models.insert(role, (container.to_vec(), model));
        self.events.push(StoreEvent::ModelStored {
            role,
            container: container.to_vec(),
        });
        Ok(())
    }

    fn resolve(&self, mode: InferMode) -> Result<(ModelRole, ModelSpec), WorkerError> {
        match mode {
            InferMode::Holistic => self
                .models
                .get(&ModelRole::Full)
                .map(|(_, m)| (ModelRole::Full, m.clone()))
                .ok_or(WorkerError::RoleMismatch(ModelRole::Full)),
            InferMode::Layer(i) => {
                if let Some((_, m)) = self.models.get(&ModelRole::SingleLayer(i)) {
                    return Ok((ModelRole::SingleLayer(i), m.clone()));
                }
                for role in [ModelRole::Full, ModelRole::SharePlus, ModelRole::ShareMinus] {
                    if let Some((_, m)) = self.models.get(&role) {
                        let single = m
                            .single_layer(i as usize)
                            .ok_or_else(|| WorkerError::Malformed(format!("model has no layer {i}")))?;
                        return Ok((role, single));
                    }
                }
                Err(WorkerError::RoleMismatch(ModelRole::SingleLayer(i)))
            }
        }
    }

    /// Index, within the model actually run, of the layer to corrupt.
    fn cheat_layer(&self, mode: InferMode) -> Option<(usize, f64, u64)> {
        let Behavior::Cheat {
            beta,
            target_layer,
            seed,
        } = self.behavior
        else {
            return None;
        };
        match mode {
            InferMode::Holistic => Some((target_layer, beta, seed)),
            InferMode::Layer(i) if i as usize == target_layer => Some((0, beta, seed)),
            InferMode::Layer(_) => None,
        }
    }

    /// Runs the model, applying the configured cheat, and returns the
    /// intermediates and their layouts.
    fn execute(
        &mut self,
        model: &ModelSpec,
        mode: InferMode,
        inference_id: u64,
        input: &Tensor,
        ratio: f64,
    ) -> Result<(Vec<Tensor>, Vec<UnitLayout>), WorkerError> {
        let layouts =
            model_layouts(model.layers(), &model.shapes(), ratio).map_err(|e| WorkerError::Malformed(e.to_string()))?;
        let cheat = self.cheat_layer(mode);
        let (_, intermediates) = model
            .forward_with(input, |layer, out| {
                let Some((target, beta, seed)) = cheat else { return };
                if layer != target {
                    return;
                }
                let layout = &layouts[layer + 1];
                corrupt_units(out, layout, beta, seed, inference_id);
            })
            .map_err(|e| WorkerError::Shape(e.to_string()))?;
        self.stats.intermediate_bytes_computed += intermediates.iter().map(|t| 4 * t.len() as u64).sum::<u64>();
        Ok((intermediates, layouts))
    }

    pub fn handle_infer(&mut self, req: &InferRequest) -> Result<InferResponse, WorkerError> {
        let (role, model) = self.resolve(req.mode)?;
        let ratio = req.verify_ratio as f64;
        let (intermediates, layouts) = self.execute(&model, req.mode, req.inference_id, &req.input, ratio)?;
        let commit = build_commit(&intermediates, &layouts).map_err(|e| WorkerError::Malformed(e.to_string()))?;
        let output = intermediates.last().expect("non-empty").clone();
        drop(intermediates);
        self.insert_record(
            WorkerRecord {
                inference_id: req.inference_id,
                mode: req.mode,
                role,
                verify_ratio: req.verify_ratio,
                input: req.input.clone(),
                commit: commit.clone(),
            },
            true,
        );
        self.stats.inferences += 1;
        Ok(InferResponse {
            inference_id: req.inference_id,
            output,
            commit,
        })
    }

    pub fn handle_verify(&mut self, req: &VerifyRequest) -> Result<VerifyResponse, WorkerError> {
        let id = req.inference_id;
        let record = match self.records.get_mut(&id) {
            Some((record, used)) => {
                self.tick += 1;
                *used = self.tick;
                record.clone()
            }
            None if self.evicted.contains(&id) => return Err(WorkerError::Evicted(id)),
            None => return Err(WorkerError::UnknownInference(id)),
        };
        let model = match (record.role, record.mode) {
            (_, InferMode::Holistic) => self.resolve(InferMode::Holistic)?.1,
            (role, InferMode::Layer(i)) => {
                let (_, m) = self.models.get(&role).ok_or(WorkerError::RoleMismatch(role))?;
                match role {
                    ModelRole::SingleLayer(_) => m.clone(),
                    _ => m
                        .single_layer(i as usize)
                        .ok_or_else(|| WorkerError::Malformed(format!("model has no layer {i}")))?,
                }
            }
        };
        let (intermediates, layouts) =
            self.execute(&model, record.mode, id, &record.input, record.verify_ratio as f64)?;
        let requested: Vec<(usize, Region)> = req.regions.iter().map(|(i, r)| (*i as usize, r.clone())).collect();
        let mut proof =
            open_units(id, &intermediates, &layouts, &requested).map_err(|e| WorkerError::Malformed(e.to_string()))?;
        if self.behavior == Behavior::TamperOpenings {
            for unit in &mut proof.opened {
                let v = f32::from_le_bytes(unit.bytes[..4].try_into().expect("4 bytes")) + 1.0;
                unit.bytes[..4].copy_from_slice(&v.to_le_bytes());
            }
        }
        self.stats.verifications += 1;
        Ok(VerifyResponse {
            inference_id: id,
            proof: proof.to_bytes(),
        })
    }

    /// Dispatches one request. Errors become [`Message::Error`] replies.
    pub fn handle(&mut self, msg: &Message) -> Message {
        let result = match msg {
            Message::Hello { .. } => Ok(Message::Hello {
                version: PROTOCOL_VERSION,
            }),
            Message::SetupModel { role, model } => self
                .handle_setup(*role, model)
                .map(|_| Message::SetupAck { role: *role }),
            Message::InferRequest(req) => self.handle_infer(req).map(Message::InferResponse),
            Message::VerifyRequest(req) => self.handle_verify(req).map(Message::VerifyResponse),
            other => return Message::error(ErrorCode::Unsupported, format!("{} is not a request", other.name())),
        };
        result.unwrap_or_else(|e| Message::error(e.code(), e.to_string()))
    }

    fn insert_record(&mut self, record: WorkerRecord, emit: bool) {
        let id = record.inference_id;
        self.evicted.remove(&id);
        if !self.records.contains_key(&id) && self.records.len() >= self.capacity {
            let oldest = self
                .records
                .iter()
                .min_by_key(|(_, (_, used))| *used)
                .map(|(id, _)| *id)
                .expect("capacity >= 1");
            self.evict(oldest);
        }
        self.tick += 1;
        if emit {
            self.events.push(StoreEvent::RecordStored(record.clone()));
        }
        self.records.insert(id, (record, self.tick));
    }

    fn evict(&mut self, id: u64) {
        if self.records.remove(&id).is_some() {
            self.evicted.insert(id);
            self.events.push(StoreEvent::RecordEvicted(id));
        }
    }
}

/// Units of `layout` a cheating worker corrupts for one inference.
pub fn cheat_units(layout: &UnitLayout, beta: f64, seed: u64, inference_id: u64) -> Vec<usize> {
    let n = layout.unit_count();
    let b = (crate::ceil_tolerant(beta * n as f64)).min(n);
    DetRng::stream(seed, inference_id).sample_indices(n, b)
}

fn corrupt_units(out: &mut Tensor, layout: &UnitLayout, beta: f64, seed: u64, inference_id: u64) {
    let shape = out.shape().clone();
    for u in cheat_units(layout, beta, seed, inference_id) {
        let region = layout.unit(u).expect("unit in range");
        for i in region.flat_indices(&shape) {
            out.data_mut()[i] += 1.0;
        }
    }
}

/// Layout of a one-layer model's output, as the worker will build it.
pub fn output_layout(model: &ModelSpec, verify_ratio: f64) -> Option<UnitLayout> {
    let shapes = model.shapes();
    let last = shapes.len() - 1;
    let sliceable = crate::commitment::intermediate_sliceable(model.layers(), last);
    slice_layout(&shapes[last], verify_ratio, sliceable).ok()
}

/// In-process link to a [`Worker`], optionally passing every message
/// through the wire codec.
#[derive(Debug)]
pub struct LocalLink {
    worker: Worker,
    through_codec: bool,
    bytes_sent: u64,
    bytes_received: u64,
}

impl LocalLink {
    pub fn new(worker: Worker) -> Self {
        LocalLink {
            worker,
            through_codec: false,
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    pub fn with_codec(worker: Worker) -> Self {
        LocalLink {
            through_codec: true,
            ..LocalLink::new(worker)
        }
    }

    pub fn worker(&self) -> &Worker {
        &self.worker
    }

    pub fn worker_mut(&mut self) -> &mut Worker {
        &mut self.worker
    }

    pub fn into_worker(self) -> Worker {
        self.worker
    }

    /// Encoded bytes sent and received so far (only counted with the codec).
    pub fn traffic(&self) -> (u64, u64) {
        (self.bytes_sent, self.bytes_received)
    }
}

impl WorkerLink for LocalLink {
    fn call(&mut self, request: &Message) -> Result<Message, SessionError> {
        if !self.through_codec {
            return Ok(self.worker.handle(request));
        }
        let frame = encode(request);
        self.bytes_sent += frame.len() as u64;
        let reply = self.worker.handle(&decode(&frame)?);
        let frame = encode(&reply);
        self.bytes_received += frame.len() as u64;
        Ok(decode(&frame)?)
    }
}
