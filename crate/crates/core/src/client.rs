//! The offloading device: plans, offloads, and later spot-checks what its
//! workers claimed.
//!
//! Holistic offload sends the model once and each input whole; the client
//! keeps only the returned commit, the output and the intermediate shapes.
//! Layered offload runs non-linear layers locally, sends each linear layer
//! to the worker(s), optionally masked, and keeps every intermediate so that
//! verification needs no worker round trip.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::commitment::{model_layouts, slice_layout, verify_proof, MerkleCommit, MerkleProof, UnitLayout};
use crate::container::encode_model;
use crate::masking::{
    combine_shares, generate_masks, mask_input, split_weights, unmask_output, DomainError, MaskSet, MaskingError,
};
use crate::nn::{forward_layer, LayerKind, ModelSpec, NnError};
use crate::protocol::{
    InferMode, InferRequest, Message, ModelRole, SessionError, VerifyRequest, VerifyResponse, WorkerLink,
};
use crate::rng::DetRng;
use crate::tensor::{le_bytes_to_f32s, Region, Shape, Tensor};
use crate::{approx_eq, ceil_tolerant, RECOMPUTE_ABS_TOL, RECOMPUTE_REL_TOL};

pub const RECORD_MAGIC: [u8; 4] = *b"VSRC";
pub const RECORD_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffloadMode {
    Holistic,
    Layered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Local,
    Offload,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("privacy and confidentiality need layered offload")]
    MaskingNeedsLayered,
    #[error("plan needs {required} worker(s), {given} given")]
    WorkerCount { required: usize, given: usize },
    #[error("placement covers {found} layers, model has {expected}")]
    PlacementLength { expected: usize, found: usize },
    #[error("layer {layer} ({kind:?}) cannot be offloaded; only Dense and Conv2D can")]
    NotOffloadable { layer: usize, kind: LayerKind },
    #[error("verify ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f32),
    #[error("mask scale must be finite and positive, got {0}")]
    InvalidScale(f32),
}

/// Which layers go where and which protections apply.
#[derive(Debug, Clone, PartialEq)]
pub struct OffloadPlan {
    pub mode: OffloadMode,
    /// One entry per layer; ignored in holistic mode.
    pub placement: Vec<Placement>,
    pub privacy: Option<f32>,
    pub confidentiality: Option<f32>,
    pub verify_ratio: f32,
}

impl OffloadPlan {
    pub fn holistic(verify_ratio: f32) -> Self {
        OffloadPlan {
            mode: OffloadMode::Holistic,
            placement: Vec::new(),
            privacy: None,
            confidentiality: None,
            verify_ratio,
        }
    }

    /// Offloads every Dense and Conv2D layer, keeps the rest local.
    pub fn layered(model: &ModelSpec, verify_ratio: f32) -> Self {
        let placement = model
            .layers()
            .iter()
            .map(|l| {
                if l.kind().has_params() {
                    Placement::Offload
                } else {
                    Placement::Local
                }
            })
            .collect();
        OffloadPlan {
            mode: OffloadMode::Layered,
            placement,
            privacy: None,
            confidentiality: None,
            verify_ratio,
        }
    }

    pub fn with_privacy(mut self, k_scale: f32) -> Self {
        self.privacy = Some(k_scale);
        self
    }

    pub fn with_confidentiality(mut self, k_scale: f32) -> Self {
        self.confidentiality = Some(k_scale);
        self
    }

    pub fn workers_required(&self) -> usize {
        if self.confidentiality.is_some() {
            2
        } else {
            1
        }
    }

    pub fn is_offloaded(&self, layer: usize) -> bool {
        match self.mode {
            OffloadMode::Holistic => true,
            OffloadMode::Layered => self.placement.get(layer) == Some(&Placement::Offload),
        }
    }

    pub fn validate(&self, model: &ModelSpec, workers: usize) -> Result<(), PlanError> {
        if !(self.verify_ratio > 0.0 && self.verify_ratio <= 1.0) {
            return Err(PlanError::InvalidRatio(self.verify_ratio));
        }
        for k in self.privacy.iter().chain(&self.confidentiality) {
            if !(k.is_finite() && *k > 0.0) {
                return Err(PlanError::InvalidScale(*k));
            }
        }
        let masking = self.privacy.is_some() || self.confidentiality.is_some();
        if masking && self.mode != OffloadMode::Layered {
            return Err(PlanError::MaskingNeedsLayered);
        }
        if workers != self.workers_required() {
            return Err(PlanError::WorkerCount {
                required: self.workers_required(),
                given: workers,
            });
        }
        if self.mode == OffloadMode::Layered {
            if self.placement.len() != model.len() {
                return Err(PlanError::PlacementLength {
                    expected: model.len(),
                    found: self.placement.len(),
                });
            }
            for (i, layer) in model.layers().iter().enumerate() {
                if self.placement[i] == Placement::Offload && !layer.kind().has_params() {
                    return Err(PlanError::NotOffloadable {
                        layer: i,
                        kind: layer.kind(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Why a verification failed.
#[derive(Debug, Clone, PartialEq)]
pub enum Evidence {
    /// The response answered a different inference.
    WrongInference { expected: u64, got: u64 },
    /// Proof bytes did not parse or were structurally invalid.
    Malformed(String),
    /// The openings do not hash to the committed root.
    Proof,
    /// A unit needed for the check was not opened.
    MissingUnit { intermediate: usize, unit: usize },
    /// The opened output disagrees with recomputation from the opened input.
    Recompute { intermediate: usize, unit: usize },
    /// An opened unit of the final output differs from what was returned.
    OutputMismatch { unit: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Passed { units_checked: usize },
    Failed(Evidence),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Passed { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerificationStatus {
    Unverified,
    Passed { fraction: f64 },
    Failed(Evidence),
}

/// Client-side bookkeeping for one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRecord {
    pub inference_id: u64,
    pub mode: OffloadMode,
    pub verify_ratio: f32,
    pub shapes: Vec<Shape>,
    pub output: Tensor,
    /// Holistic mode only.
    pub commit: Option<MerkleCommit>,
    /// Layered mode only: every intermediate, input first.
    pub intermediates: Vec<Tensor>,
    /// Layered mode only: `(layer, absolute tolerance)` per offloaded layer.
    pub offloaded: Vec<(usize, f32)>,
    pub status: VerificationStatus,
}

impl InferenceRecord {
    /// Intermediates whose units can be selected for checking.
    pub fn verifiable(&self) -> Vec<usize> {
        match self.mode {
            OffloadMode::Holistic => (1..self.shapes.len()).collect(),
            OffloadMode::Layered => self.offloaded.iter().map(|(l, _)| l + 1).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&RECORD_MAGIC)
            .u16(RECORD_VERSION)
            .u64(self.inference_id)
            .u8(match self.mode {
                OffloadMode::Holistic => 0,
                OffloadMode::Layered => 1,
            })
            .f32(self.verify_ratio)
            .len32(self.shapes.len());
        for s in &self.shapes {
            w.shape(s);
        }
        w.tensor(&self.output);
        match &self.commit {
            None => {
                w.u8(0);
            }
            Some(c) => {
                w.u8(1);
                c.encode(&mut w);
            }
        }
        w.len32(self.intermediates.len());
        for t in &self.intermediates {
            w.tensor(t);
        }
        w.len32(self.offloaded.len());
        for (layer, tol) in &self.offloaded {
            w.len32(*layer).f32(*tol);
        }
        match &self.status {
            VerificationStatus::Unverified => {
                w.u8(0);
            }
            VerificationStatus::Passed { fraction } => {
                w.u8(1).u64(fraction.to_bits());
            }
            VerificationStatus::Failed(e) => {
                w.u8(2);
                write_evidence(&mut w, e);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.array::<4>()? != RECORD_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let version = r.u16()?;
        if version != RECORD_VERSION {
            return Err(DecodeError::Version(version));
        }
        let inference_id = r.u64()?;
        let mode = match r.u8()? {
            0 => OffloadMode::Holistic,
            1 => OffloadMode::Layered,
            v => return Err(DecodeError::invalid("offload mode", v)),
        };
        let verify_ratio = r.f32()?;
        let n = r.count(5)?;
        let shapes = (0..n).map(|_| r.shape()).collect::<Result<Vec<_>, _>>()?;
        let output = r.tensor()?;
        let commit = match r.u8()? {
            0 => None,
            1 => Some(MerkleCommit::decode(&mut r)?),
            v => return Err(DecodeError::invalid("commit flag", v)),
        };
        let n = r.count(9)?;
        let intermediates = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
        let n = r.count(8)?;
        let offloaded = (0..n)
            .map(|_| Ok((r.u32()? as usize, r.f32()?)))
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let status = match r.u8()? {
            0 => VerificationStatus::Unverified,
            1 => VerificationStatus::Passed {
                fraction: f64::from_bits(r.u64()?),
            },
            2 => VerificationStatus::Failed(read_evidence(&mut r)?),
            v => return Err(DecodeError::invalid("verification status", v)),
        };
        r.finish()?;
        Ok(InferenceRecord {
            inference_id,
            mode,
            verify_ratio,
            shapes,
            output,
            commit,
            intermediates,
            offloaded,
            status,
        })
    }
}

fn write_evidence(w: &mut Writer, e: &Evidence) {
    match e {
        Evidence::WrongInference { expected, got } => {
            w.u8(0).u64(*expected).u64(*got);
        }
        Evidence::Malformed(text) => {
            w.u8(1).len32(text.len()).bytes(text.as_bytes());
        }
        Evidence::Proof => {
            w.u8(2);
        }
        Evidence::MissingUnit { intermediate, unit } => {
            w.u8(3).len32(*intermediate).len32(*unit);
        }
        Evidence::Recompute { intermediate, unit } => {
            w.u8(4).len32(*intermediate).len32(*unit);
        }
        Evidence::OutputMismatch { unit } => {
            w.u8(5).len32(*unit);
        }
    }
}

fn read_evidence(r: &mut Reader<'_>) -> Result<Evidence, DecodeError> {
    Ok(match r.u8()? {
        0 => Evidence::WrongInference {
            expected: r.u64()?,
            got: r.u64()?,
        },
        1 => {
            let len = r.u32()? as usize;
            let text =
                core::str::from_utf8(r.take(len)?).map_err(|_| DecodeError::invalid("utf-8 text", len as u64))?;
            Evidence::Malformed(text.into())
        }
        2 => Evidence::Proof,
        3 => Evidence::MissingUnit {
            intermediate: r.u32()? as usize,
            unit: r.u32()? as usize,
        },
        4 => Evidence::Recompute {
            intermediate: r.u32()? as usize,
            unit: r.u32()? as usize,
        },
        5 => Evidence::OutputMismatch {
            unit: r.u32()? as usize,
        },
        v => return Err(DecodeError::invalid("evidence tag", v)),
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("worker unreachable: {0}")]
    Transport(#[from] SessionError),
    #[error("worker error {code}: {text}")]
    Remote { code: u16, text: String },
    #[error("unexpected {got} reply, expected {expected}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("worker returned shape {found}, expected {expected}")]
    ShapeDivergence { expected: Shape, found: Shape },
    #[error("commit does not match the model's {expected} intermediates")]
    BadCommit { expected: usize },
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("fraction {fraction} is finer than the committed unit ratio {ratio}")]
    Granularity { fraction: f64, ratio: f32 },
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("selection refers to intermediate {0}, which is not verifiable")]
    NotVerifiable(usize),
    #[error("record has no commit to verify against")]
    NoCommit,
    #[error("retryable transport failure: {0}")]
    Transport(#[from] SessionError),
    #[error("worker error {code}: {text}")]
    Remote { code: u16, text: String },
    #[error("unexpected {0} reply to a verification request")]
    Unexpected(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl VerifyError {
    /// Transport failures may succeed on a later attempt; verdicts never
    /// arrive as errors.
    pub fn is_retryable(&self) -> bool {
        matches!(self, VerifyError::Transport(_))
    }
}

/// Closed-form probability that `k` independent rounds of checking
/// `a = ceil(alpha n)` of `n` units all miss `b = ceil(beta n)` corrupted
/// ones: `(C(n-b, a) / C(n, a))^k`, evaluated as a log-space product.
pub fn detection_failure_probability(n: u64, alpha: f64, beta: f64, rounds: u32) -> Result<f64, DomainError> {
    if n == 0 {
        return Err(DomainError {
            what: "unit count n",
            value: 0.0,
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DomainError {
            what: "alpha",
            value: alpha,
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(DomainError {
            what: "beta",
            value: beta,
        });
    }
    if rounds == 0 {
        return Err(DomainError {
            what: "rounds k",
            value: 0.0,
        });
    }
    let a = (ceil_tolerant(alpha * n as f64) as u64).clamp(1, n);
    let b = (ceil_tolerant(beta * n as f64) as u64).min(n);
    if a + b > n {
        return Ok(0.0);
    }
    let log_ratio: f64 = (0..a).map(|i| libm::log((n - b - i) as f64 / (n - i) as f64)).sum();
    Ok(libm::exp(log_ratio * rounds as f64))
}

/// Per-intermediate `(min, max)` over sample inputs, for sizing masks. A
/// constant intermediate gets a unit-width range.
pub fn layer_input_ranges(model: &ModelSpec, samples: &[Tensor]) -> Result<Vec<(f32, f32)>, NnError> {
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); model.len() + 1];
    for x in samples {
        let (_, inter) = model.forward(x)?;
        for (range, t) in ranges.iter_mut().zip(&inter) {
            for &v in t.data() {
                range.0 = range.0.min(v);
                range.1 = range.1.max(v);
            }
        }
    }
    for r in &mut ranges {
        if !(r.0 < r.1) {
            let lo = if r.0.is_finite() { r.0 } else { 0.0 };
            *r = (lo, lo + 1.0);
        }
    }
    Ok(ranges)
}

fn layouts_for(model: &ModelSpec, record: &InferenceRecord) -> Vec<UnitLayout> {
    match record.mode {
        OffloadMode::Holistic => model_layouts(model.layers(), &record.shapes, record.verify_ratio as f64)
            .expect("ratio validated when the record was made"),
        OffloadMode::Layered => record
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sliceable = i == 0 || model.layers()[i - 1].is_sliceable();
                slice_layout(s, record.verify_ratio as f64, sliceable).expect("ratio validated")
            })
            .collect(),
    }
}

/// Picks `ceil(fraction * n)` of the `n` units of the record's verifiable
/// intermediates, uniformly without replacement.
pub fn select_verification(
    model: &ModelSpec,
    record: &InferenceRecord,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(usize, Region)>, VerifyError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(VerifyError::InvalidFraction(fraction));
    }
    if fraction < record.verify_ratio as f64 * (1.0 - 1e-6) {
        return Err(VerifyError::Granularity {
            fraction,
            ratio: record.verify_ratio,
        });
    }
    let layouts = layouts_for(model, record);
    let units: Vec<(usize, usize)> = record
        .verifiable()
        .into_iter()
        .flat_map(|ii| (0..layouts[ii].unit_count()).map(move |u| (ii, u)))
        .collect();
    if units.is_empty() {
        return Ok(Vec::new());
    }
    let a = ceil_tolerant(fraction * units.len() as f64).clamp(1, units.len());
    let picked = DetRng::seeded(seed).sample_indices(units.len(), a);
    Ok(picked
        .into_iter()
        .map(|p| {
            let (ii, u) = units[p];
            (ii, layouts[ii].unit(u).expect("unit in range"))
        })
        .collect())
}

/// Receptive field of every unit touched by `region` of intermediate `ii`.
fn unit_input_region(
    model: &ModelSpec,
    record: &InferenceRecord,
    layout: &UnitLayout,
    ii: usize,
    region: &Region,
) -> Result<Region, NnError> {
    region.check_fits(layout.shape())?;
    let aligned = layout.aligned(region).expect("region fits the layout");
    model.layers()[ii - 1].input_region(&record.shapes[ii - 1], &aligned)
}

/// The openings needed to check `selection`: each region plus the input
/// region (receptive field) of the units covering it.
pub fn verification_request(
    model: &ModelSpec,
    record: &InferenceRecord,
    selection: &[(usize, Region)],
) -> Result<VerifyRequest, VerifyError> {
    let layouts = layouts_for(model, record);
    let mut regions = Vec::with_capacity(2 * selection.len());
    for (ii, region) in selection {
        if *ii == 0 || *ii >= record.shapes.len() {
            return Err(VerifyError::NotVerifiable(*ii));
        }
        let input = unit_input_region(model, record, &layouts[*ii], *ii, region)?;
        regions.push((*ii as u32, region.clone()));
        regions.push((*ii as u32 - 1, input));
    }
    Ok(VerifyRequest {
        inference_id: record.inference_id,
        regions,
    })
}

/// Rebuilds the parts of intermediate `ii` covered by opened units.
struct Opened {
    tensor: Tensor,
}

impl Opened {
    fn assemble(proof: &MerkleProof, ii: usize, layout: &UnitLayout) -> Result<Opened, Evidence> {
        let mut tensor = Tensor::zeros(layout.shape().clone());
        for unit in proof.opened.iter().filter(|u| u.intermediate as usize == ii) {
            let region = layout
                .unit(unit.unit as usize)
                .ok_or_else(|| Evidence::Malformed(format!("intermediate {ii} has no unit {}", unit.unit)))?;
            let values = le_bytes_to_f32s(&unit.bytes)
                .filter(|v| v.len() == region.len())
                .ok_or_else(|| {
                    Evidence::Malformed(format!("unit {} of intermediate {ii} has the wrong size", unit.unit))
                })?;
            tensor.write_region(&region, &values).expect("unit fits its layout");
        }
        Ok(Opened { tensor })
    }
}

fn require_units(proof: &MerkleProof, ii: usize, layout: &UnitLayout, region: &Region) -> Result<Vec<usize>, Evidence> {
    let units = layout
        .covering_units(region)
        .map_err(|e| Evidence::Malformed(e.to_string()))?;
    for &u in &units {
        if proof.find(ii, u).is_none() {
            return Err(Evidence::MissingUnit {
                intermediate: ii,
                unit: u,
            });
        }
    }
    Ok(units)
}

fn values_match(claimed: &[f32], recomputed: &[f32], abs_tol: f32) -> bool {
    claimed.len() == recomputed.len()
        && claimed
            .iter()
            .zip(recomputed)
            .all(|(&c, &r)| approx_eq(c, r, RECOMPUTE_REL_TOL, abs_tol))
}

/// Judges a worker's answer to `verification_request(selection)`.
pub fn judge(
    model: &ModelSpec,
    record: &InferenceRecord,
    selection: &[(usize, Region)],
    response: &VerifyResponse,
) -> Result<Verdict, VerifyError> {
    let commit = record.commit.as_ref().ok_or(VerifyError::NoCommit)?;
    if response.inference_id != record.inference_id {
        return Ok(Verdict::Failed(Evidence::WrongInference {
            expected: record.inference_id,
            got: response.inference_id,
        }));
    }
    let proof = match MerkleProof::from_bytes(&response.proof) {
        Ok(p) => p,
        Err(e) => return Ok(Verdict::Failed(Evidence::Malformed(e.to_string()))),
    };
    match verify_proof(commit, &proof) {
        Ok(true) => {}
        Ok(false) => return Ok(Verdict::Failed(Evidence::Proof)),
        Err(e) => return Ok(Verdict::Failed(Evidence::Malformed(e.to_string()))),
    }
    if proof.inference_id != record.inference_id {
        return Ok(Verdict::Failed(Evidence::WrongInference {
            expected: record.inference_id,
            got: proof.inference_id,
        }));
    }
    Ok(match check_openings(model, record, selection, &proof) {
        Ok(units_checked) => Verdict::Passed { units_checked },
        Err(evidence) => Verdict::Failed(evidence),
    })
}

fn check_openings(
    model: &ModelSpec,
    record: &InferenceRecord,
    selection: &[(usize, Region)],
    proof: &MerkleProof,
) -> Result<usize, Evidence> {
    let layouts = layouts_for(model, record);
    let last = record.shapes.len() - 1;
    let mut cache: BTreeMap<usize, Opened> = BTreeMap::new();
    let mut checked = 0;
    for (ii, region) in selection {
        let ii = *ii;
        let layer = &model.layers()[ii - 1];
        let out_units = require_units(proof, ii, &layouts[ii], region)?;
        let input_region = unit_input_region(model, record, &layouts[ii], ii, region)
            .map_err(|e| Evidence::Malformed(e.to_string()))?;
        require_units(proof, ii - 1, &layouts[ii - 1], &input_region)?;
        for i in [ii - 1, ii] {
            if let alloc::collections::btree_map::Entry::Vacant(e) = cache.entry(i) {
                e.insert(Opened::assemble(proof, i, &layouts[i])?);
            }
        }
        let input = &cache[&(ii - 1)].tensor;
        let output = &cache[&ii].tensor;
        for u in out_units {
            let unit_region = layouts[ii].unit(u).expect("unit in range");
            let recomputed = layer
                .forward_region(input, &unit_region)
                .map_err(|e| Evidence::Malformed(e.to_string()))?;
            let claimed = output.extract(&unit_region).expect("unit fits");
            if !values_match(&claimed, &recomputed, RECOMPUTE_ABS_TOL) {
                return Err(Evidence::Recompute {
                    intermediate: ii,
                    unit: u,
                });
            }
            if ii == last {
                let returned = record.output.extract(&unit_region).expect("unit fits");
                if claimed.iter().zip(&returned).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(Evidence::OutputMismatch { unit: u });
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Checks a layered-mode record against its own stored intermediates.
pub fn verify_layered(
    model: &ModelSpec,
    record: &InferenceRecord,
    selection: &[(usize, Region)],
) -> Result<Verdict, VerifyError> {
    let layouts = layouts_for(model, record);
    let mut checked = 0;
    for (ii, region) in selection {
        let ii = *ii;
        let Some(&(_, abs_tol)) = record.offloaded.iter().find(|(l, _)| l + 1 == ii) else {
            return Err(VerifyError::NotVerifiable(ii));
        };
        let layer = &model.layers()[ii - 1];
        let units = layouts[ii]
            .covering_units(region)
            .map_err(|_| VerifyError::NotVerifiable(ii))?;
        for u in units {
            let unit_region = layouts[ii].unit(u).expect("unit in range");
            let recomputed = layer.forward_region(&record.intermediates[ii - 1], &unit_region)?;
            let claimed = record.intermediates[ii].extract(&unit_region).expect("unit fits");
            if !values_match(&claimed, &recomputed, abs_tol) {
                return Ok(Verdict::Failed(Evidence::Recompute {
                    intermediate: ii,
                    unit: u,
                }));
            }
            checked += 1;
        }
    }
    Ok(Verdict::Passed { units_checked: checked })
}

fn remote_or_unexpected(reply: Message, expected: &'static str) -> ClientError {
    match reply {
        Message::Error { code, text } => ClientError::Remote { code, text },
        other => ClientError::Unexpected {
            expected,
            got: other.name(),
        },
    }
}

/// Models each worker receives at setup, in link order.
pub fn setup_messages(model: &ModelSpec, plan: &OffloadPlan, seed: u64) -> Result<Vec<Message>, ClientError> {
    let Some(k) = plan.confidentiality else {
        return Ok(vec![Message::SetupModel {
            role: ModelRole::Full,
            model: encode_model(model),
        }]);
    };
    let mut plus = Vec::with_capacity(model.len());
    let mut minus = Vec::with_capacity(model.len());
    for (i, layer) in model.layers().iter().enumerate() {
        match layer.params() {
            Some(_) if plan.is_offloaded(i) => {
                let shares = split_weights(layer, k, seed.wrapping_add(i as u64))?;
                plus.push(shares.share_plus);
                minus.push(shares.share_minus);
            }
            Some((w, b)) => {
                // Local layers are never revealed; workers get zeros.
                let blank = layer.with_params(Tensor::zeros(w.shape().clone()), Tensor::zeros(b.shape().clone()))?;
                plus.push(blank.clone());
                minus.push(blank);
            }
            None => {
                plus.push(layer.clone());
                minus.push(layer.clone());
            }
        }
    }
    let plus = ModelSpec::new(model.input_shape().clone(), plus)?;
    let minus = ModelSpec::new(model.input_shape().clone(), minus)?;
    Ok(vec![
        Message::SetupModel {
            role: ModelRole::SharePlus,
            model: encode_model(&plus),
        },
        Message::SetupModel {
            role: ModelRole::ShareMinus,
            model: encode_model(&minus),
        },
    ])
}

fn max_abs(t: &Tensor) -> f32 {
    t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Drives offloaded inference over one or two worker links.
#[derive(Debug)]
pub struct Client<L> {
    model: ModelSpec,
    plan: OffloadPlan,
    links: Vec<L>,
    masks: BTreeMap<usize, MaskSet>,
    next_id: u64,
}

impl<L: WorkerLink> Client<L> {
    pub fn new(model: ModelSpec, plan: OffloadPlan, links: Vec<L>) -> Result<Self, ClientError> {
        plan.validate(&model, links.len())?;
        Ok(Client {
            model,
            plan,
            links,
            masks: BTreeMap::new(),
            next_id: 1,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn plan(&self) -> &OffloadPlan {
        &self.plan
    }

    pub fn links(&self) -> &[L] {
        &self.links
    }

    pub fn links_mut(&mut self) -> &mut [L] {
        &mut self.links
    }

    pub fn masks(&self) -> &BTreeMap<usize, MaskSet> {
        &self.masks
    }

    pub fn install_masks(&mut self, set: MaskSet) {
        self.masks.insert(set.layer_index(), set);
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn set_next_id(&mut self, id: u64) {
        self.next_id = id;
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn setup(&mut self, seed: u64) -> Result<(), ClientError> {
        let messages = setup_messages(&self.model, &self.plan, seed)?;
        for (link, msg) in self.links.iter_mut().zip(&messages) {
            match link.call(msg)? {
                Message::SetupAck { .. } => {}
                other => return Err(remote_or_unexpected(other, "SetupAck")),
            }
        }
        Ok(())
    }

    /// Generates `count` masks for every offloaded layer, sized by the
    /// per-intermediate `ranges` (see [`layer_input_ranges`]).
    pub fn prepare_masks(&mut self, count: usize, ranges: &[(f32, f32)], seed: u64) -> Result<(), ClientError> {
        let Some(k) = self.plan.privacy else {
            return Ok(());
        };
        let shapes = self.model.shapes();
        for (i, layer) in self.model.layers().iter().enumerate() {
            if !self.plan.is_offloaded(i) {
                continue;
            }
            let set = generate_masks(layer, i, &shapes[i], count, k, ranges[i], seed.wrapping_add(i as u64))?;
            self.masks.insert(i, set);
        }
        Ok(())
    }

    pub fn offload_infer(&mut self, x: &Tensor) -> Result<(Tensor, InferenceRecord), ClientError> {
        match self.plan.mode {
            OffloadMode::Holistic => self.infer_holistic(x),
            OffloadMode::Layered => self.infer_layered(x),
        }
    }

    fn infer_holistic(&mut self, x: &Tensor) -> Result<(Tensor, InferenceRecord), ClientError> {
        let shapes = self.model.shapes();
        if x.shape() != &shapes[0] {
            return Err(ClientError::ShapeDivergence {
                expected: shapes[0].clone(),
                found: x.shape().clone(),
            });
        }
        let id = self.fresh_id();
        let req = Message::InferRequest(InferRequest {
            inference_id: id,
            mode: InferMode::Holistic,
            input: x.clone(),
            verify_ratio: self.plan.verify_ratio,
        });
        let resp = match self.links[0].call(&req)? {
            Message::InferResponse(r) if r.inference_id == id => r,
            other => return Err(remote_or_unexpected(other, "InferResponse")),
        };
        let expected = shapes.last().expect("non-empty");
        if resp.output.shape() != expected {
            return Err(ClientError::ShapeDivergence {
                expected: expected.clone(),
                found: resp.output.shape().clone(),
            });
        }
        if resp.commit.layer_roots.len() != shapes.len() || !resp.commit.is_consistent() {
            return Err(ClientError::BadCommit { expected: shapes.len() });
        }
        let record = InferenceRecord {
            inference_id: id,
            mode: OffloadMode::Holistic,
            verify_ratio: self.plan.verify_ratio,
            shapes,
            output: resp.output.clone(),
            commit: Some(resp.commit),
            intermediates: Vec::new(),
            offloaded: Vec::new(),
            status: VerificationStatus::Unverified,
        };
        Ok((resp.output, record))
    }

    fn call_layer(
        &mut self,
        link: usize,
        layer: usize,
        input: &Tensor,
        expected: &Shape,
    ) -> Result<Tensor, ClientError> {
        let id = self.fresh_id();
        let req = Message::InferRequest(InferRequest {
            inference_id: id,
            mode: InferMode::Layer(layer as u32),
            input: input.clone(),
            verify_ratio: self.plan.verify_ratio,
        });
        let out = match self.links[link].call(&req)? {
            Message::InferResponse(r) if r.inference_id == id => r.output,
            other => return Err(remote_or_unexpected(other, "InferResponse")),
        };
        if out.shape() != expected {
            return Err(ClientError::ShapeDivergence {
                expected: expected.clone(),
                found: out.shape().clone(),
            });
        }
        Ok(out)
    }

    fn infer_layered(&mut self, x: &Tensor) -> Result<(Tensor, InferenceRecord), ClientError> {
        let shapes = self.model.shapes();
        let id = self.fresh_id();
        let mut intermediates = vec![x.clone()];
        let mut offloaded = Vec::new();
        for i in 0..self.model.len() {
            let cur = intermediates.last().expect("non-empty");
            if !self.plan.is_offloaded(i) {
                let y = forward_layer(&self.model.layers()[i], cur).map_err(|e| e.at_layer(i))?;
                intermediates.push(y);
                continue;
            }
            let (sent, mask_id) = match self.plan.privacy {
                Some(_) => {
                    let set = self.masks.get_mut(&i).ok_or(MaskingError::OutOfMasks)?;
                    let (masked, mask_id) = mask_input(cur, set)?;
                    (masked, Some(mask_id))
                }
                None => (cur.clone(), None),
            };
            let raw = self.call_layer(0, i, &sent, &shapes[i + 1])?;
            let mut magnitude = max_abs(&raw);
            let mut y = raw;
            if self.plan.confidentiality.is_some() {
                let other = self.call_layer(1, i, &sent, &shapes[i + 1])?;
                magnitude = magnitude.max(max_abs(&other));
                y = combine_shares(&y, &other)?;
            }
            if let Some(mask_id) = mask_id {
                let set = self.masks.get_mut(&i).expect("checked above");
                y = unmask_output(&y, set, mask_id)?;
            }
            let masked = self.plan.privacy.is_some() || self.plan.confidentiality.is_some();
            let abs_tol = if masked {
                RECOMPUTE_ABS_TOL.max(RECOMPUTE_REL_TOL * magnitude)
            } else {
                RECOMPUTE_ABS_TOL
            };
            offloaded.push((i, abs_tol));
            intermediates.push(y);
        }
        let output = intermediates.last().expect("non-empty").clone();
        let record = InferenceRecord {
            inference_id: id,
            mode: OffloadMode::Layered,
            verify_ratio: self.plan.verify_ratio,
            shapes,
            output: output.clone(),
            commit: None,
            intermediates,
            offloaded,
            status: VerificationStatus::Unverified,
        };
        Ok((output, record))
    }

    /// Selects, fetches (holistic) and judges one verification round.
    pub fn verify(&mut self, record: &InferenceRecord, fraction: f64, seed: u64) -> Result<Verdict, VerifyError> {
        let selection = select_verification(&self.model, record, fraction, seed)?;
        match record.mode {
            OffloadMode::Layered => verify_layered(&self.model, record, &selection),
            OffloadMode::Holistic => {
                let req = verification_request(&self.model, record, &selection)?;
                match self.links[0].call(&Message::VerifyRequest(req))? {
                    Message::VerifyResponse(resp) => judge(&self.model, record, &selection, &resp),
                    Message::Error { code, text } => Err(VerifyError::Remote { code, text }),
                    other => Err(VerifyError::Unexpected(other.name())),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationJob {
    pub inference_id: u64,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Verdict {
        inference_id: u64,
        verdict: Verdict,
    },
    /// Retryable; the job went back to the end of the queue.
    Deferred {
        inference_id: u64,
        error: VerifyError,
    },
    Dropped {
        inference_id: u64,
        error: VerifyError,
    },
}

/// Verification work kept off the inference path and drained by the
/// caller, one job per [`VerificationQueue::step`].
#[derive(Debug, Default)]
pub struct VerificationQueue {
    jobs: VecDeque<VerificationJob>,
}

impl VerificationQueue {
    pub fn new() -> Self {
        VerificationQueue::default()
    }

    pub fn push(&mut self, job: VerificationJob) {
        self.jobs.push_back(job);
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn step<L: WorkerLink>(
        &mut self,
        client: &mut Client<L>,
        records: &mut BTreeMap<u64, InferenceRecord>,
    ) -> Option<StepOutcome> {
        let job = self.jobs.pop_front()?;
        let id = job.inference_id;
        let Some(record) = records.get_mut(&id) else {
            return Some(StepOutcome::Dropped {
                inference_id: id,
                error: VerifyError::Remote {
                    code: crate::protocol::ErrorCode::UnknownInference as u16,
                    text: "no local record".into(),
                },
            });
        };
        Some(match client.verify(record, job.fraction, job.seed) {
            Ok(verdict) => {
                record.status = match &verdict {
                    Verdict::Passed { .. } => VerificationStatus::Passed { fraction: job.fraction },
                    Verdict::Failed(e) => VerificationStatus::Failed(e.clone()),
                };
                StepOutcome::Verdict {
                    inference_id: id,
                    verdict,
                }
            }
            Err(error) if error.is_retryable() => {
                self.jobs.push_back(job);
                StepOutcome::Deferred {
                    inference_id: id,
                    error,
                }
            }
            Err(error) => StepOutcome::Dropped {
                inference_id: id,
                error,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tensor_record_len;
    use crate::nn::LayerSpec;
    use crate::worker::{Behavior, LocalLink, Worker};

    fn mlp() -> ModelSpec {
        let w1 = Tensor::matrix(&[
            &[0.5, -1.0, 0.25],
            &[1.0, 0.5, -0.5],
            &[-0.25, 0.75, 1.0],
            &[0.1, 0.2, 0.3],
        ]);
        let w2 = Tensor::matrix(&[&[1.0, -1.0, 0.5, 0.25], &[-0.5, 0.5, 1.0, -1.0]]);
        ModelSpec::new(
            Shape::vector(3).unwrap(),
            vec![
                LayerSpec::dense(w1, Tensor::vector(&[0.1, -0.1, 0.2, 0.0])).unwrap(),
                LayerSpec::Relu,
                LayerSpec::dense(w2, Tensor::vector(&[0.05, -0.05])).unwrap(),
            ],
        )
        .unwrap()
    }

    fn client(plan: OffloadPlan, behavior: Behavior) -> Client<LocalLink> {
        let links = (0..plan.workers_required())
            .map(|_| LocalLink::with_codec(Worker::new(behavior, 64)))
            .collect();
        let mut c = Client::new(mlp(), plan, links).unwrap();
        c.setup(11).unwrap();
        c
    }

    fn x() -> Tensor {
        Tensor::vector(&[0.3, -0.7, 1.1])
    }

    #[test]
    fn detection_probability_examples() {
        assert!((detection_failure_probability(4, 0.25, 0.5, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!((detection_failure_probability(4, 0.25, 0.5, 2).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(detection_failure_probability(4, 0.25, 1.0, 1).unwrap(), 0.0);
        assert_eq!(detection_failure_probability(10, 0.5, 0.0, 1).unwrap(), 1.0);
        assert!((detection_failure_probability(100, 0.01, 0.01, 1).unwrap() - 0.99).abs() < 1e-12);
        assert!(detection_failure_probability(0, 0.5, 0.5, 1).is_err());
        assert!(detection_failure_probability(4, 0.0, 0.5, 1).is_err());
        assert!(detection_failure_probability(4, 0.5, 0.5, 0).is_err());
    }

    #[test]
    fn plan_validation() {
        let m = mlp();
        assert_eq!(
            OffloadPlan::holistic(0.5).with_privacy(1.0).validate(&m, 1),
            Err(PlanError::MaskingNeedsLayered)
        );
        assert_eq!(
            OffloadPlan::layered(&m, 0.5).with_confidentiality(1.0).validate(&m, 1),
            Err(PlanError::WorkerCount { required: 2, given: 1 })
        );
        assert_eq!(
            OffloadPlan::layered(&m, 0.5).validate(&m, 2),
            Err(PlanError::WorkerCount { required: 1, given: 2 })
        );
        let mut p = OffloadPlan::layered(&m, 0.5);
        p.placement[1] = Placement::Offload;
        assert!(matches!(
            p.validate(&m, 1),
            Err(PlanError::NotOffloadable { layer: 1, .. })
        ));
        assert_eq!(
            OffloadPlan::holistic(0.0).validate(&m, 1),
            Err(PlanError::InvalidRatio(0.0))
        );
    }

    #[test]
    fn holistic_round_trip_and_verification() {
        let mut c = client(OffloadPlan::holistic(0.25), Behavior::Honest);
        let (y, record) = c.offload_infer(&x()).unwrap();
        let (local, _) = mlp().forward(&x()).unwrap();
        assert_eq!(y, local);
        assert_eq!(
            c.verify(&record, 1.0, 1).unwrap(),
            Verdict::Passed { units_checked: 10 }
        );
        let storage = record.to_bytes().len();
        let commit = record.commit.as_ref().unwrap();
        let shapes: usize = record.shapes.iter().map(|s| 4 + 4 * s.rank()).sum();
        assert!(
            storage <= commit.encoded_len() + tensor_record_len(&y) + shapes + 40,
            "{storage}"
        );
        assert_eq!(InferenceRecord::from_bytes(&record.to_bytes()).unwrap(), record);
    }

    #[test]
    fn cheating_worker_is_caught_by_recomputation() {
        let cheat = Behavior::Cheat {
            beta: 1.0,
            target_layer: 0,
            seed: 5,
        };
        let mut c = client(OffloadPlan::holistic(0.25), cheat);
        let (_, record) = c.offload_infer(&x()).unwrap();
        let verdict = c.verify(&record, 1.0, 1).unwrap();
        assert!(
            matches!(verdict, Verdict::Failed(Evidence::Recompute { intermediate: 1, .. })),
            "{verdict:?}"
        );
    }

    #[test]
    fn tampered_openings_are_caught_by_the_proof() {
        let mut c = client(OffloadPlan::holistic(0.5), Behavior::TamperOpenings);
        let (_, record) = c.offload_infer(&x()).unwrap();
        assert_eq!(c.verify(&record, 1.0, 1).unwrap(), Verdict::Failed(Evidence::Proof));
    }

    #[test]
    fn layered_privacy_and_confidentiality() {
        let m = mlp();
        let ranges = layer_input_ranges(&m, &[x()]).unwrap();
        let (plain, _) = m.forward(&x()).unwrap();
        for plan in [
            OffloadPlan::layered(&m, 0.5),
            OffloadPlan::layered(&m, 0.5).with_privacy(10.0),
            OffloadPlan::layered(&m, 0.5).with_confidentiality(10.0),
            OffloadPlan::layered(&m, 0.5)
                .with_privacy(10.0)
                .with_confidentiality(10.0),
        ] {
            let mut c = client(plan.clone(), Behavior::Honest);
            c.prepare_masks(2, &ranges, 3).unwrap();
            let (y, record) = c.offload_infer(&x()).unwrap();
            assert!(y.max_relative_diff(&plain, 1e-3).unwrap() < 1e-3, "{plan:?}");
            assert_eq!(y.argmax(), plain.argmax());
            assert!(c.verify(&record, 1.0, 9).unwrap().passed(), "{plan:?}");
            assert_eq!(InferenceRecord::from_bytes(&record.to_bytes()).unwrap(), record);
        }
    }

    #[test]
    fn out_of_masks_is_an_error() {
        let m = mlp();
        let ranges = layer_input_ranges(&m, &[x()]).unwrap();
        let mut c = client(OffloadPlan::layered(&m, 1.0).with_privacy(1.0), Behavior::Honest);
        c.prepare_masks(1, &ranges, 3).unwrap();
        c.offload_infer(&x()).unwrap();
        assert_eq!(
            c.offload_infer(&x()).unwrap_err(),
            ClientError::Masking(MaskingError::OutOfMasks)
        );
    }

    #[test]
    fn selection_rules() {
        let mut c = client(OffloadPlan::holistic(0.25), Behavior::Honest);
        let (_, record) = c.offload_infer(&x()).unwrap();
        let all = select_verification(c.model(), &record, 1.0, 0).unwrap();
        assert_eq!(all.len(), 10);
        let some = select_verification(c.model(), &record, 0.25, 4).unwrap();
        assert_eq!(some.len(), 3);
        assert_eq!(some, select_verification(c.model(), &record, 0.25, 4).unwrap());
        assert!(matches!(
            select_verification(c.model(), &record, 0.1, 4),
            Err(VerifyError::Granularity { .. })
        ));
    }

    #[test]
    fn queue_records_verdicts_and_keeps_evicted_errors_distinct() {
        let mut c = client(OffloadPlan::holistic(0.5), Behavior::Honest);
        let mut records = BTreeMap::new();
        let (_, r) = c.offload_infer(&x()).unwrap();
        records.insert(r.inference_id, r);
        let mut q = VerificationQueue::new();
        q.push(VerificationJob {
            inference_id: 1,
            fraction: 0.5,
            seed: 2,
        });
        q.push(VerificationJob {
            inference_id: 42,
            fraction: 0.5,
            seed: 2,
        });
        assert!(matches!(
            q.step(&mut c, &mut records),
            Some(StepOutcome::Verdict { .. })
        ));
        assert_eq!(records[&1].status, VerificationStatus::Passed { fraction: 0.5 });
        assert!(matches!(
            q.step(&mut c, &mut records),
            Some(StepOutcome::Dropped { .. })
        ));
        assert!(q.step(&mut c, &mut records).is_none());
    }
}
