//! Verify-unit slicing and the Merkle inference commitment.
//!
//! Leaves commit to exact bytes. Whether those bytes are *correct* is a
//! separate, tolerance-based recomputation done by the client.

mod merkle;
mod slicing;

use alloc::vec::Vec;

use thiserror::Error;

use crate::nn::{LayerKind, LayerSpec};
use crate::tensor::{Region, Shape};

pub use merkle::{
    build_commit, hash_node, hash_unit, open_units, reduce, verify_proof, Hash, MerkleCommit, MerkleProof, OpenedUnit,
    PathStep,
};
pub use slicing::{slice_layout, units_for_ratio, UnitLayout};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommitError {
    #[error("verify ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("layout {index} does not match its tensor (or counts differ)")]
    LayoutMismatch { index: usize },
    #[error("no intermediate {0}")]
    NoSuchIntermediate(usize),
    #[error("region {region} is outside shape {shape}")]
    RegionOutOfBounds { region: Region, shape: Shape },
    #[error("malformed proof: {0}")]
    Malformed(&'static str),
}

/// Whether intermediate `index` of a model may be sliced: the input and
/// output of a Softmax layer are committed whole.
pub fn intermediate_sliceable(layers: &[LayerSpec], index: usize) -> bool {
    let is_softmax = |i: usize| layers.get(i).is_some_and(|l| l.kind() == LayerKind::Softmax);
    !(index > 0 && is_softmax(index - 1)) && !is_softmax(index)
}

/// Layouts for every intermediate of a model run at `verify_ratio`.
pub fn model_layouts(
    layers: &[LayerSpec],
    shapes: &[Shape],
    verify_ratio: f64,
) -> Result<Vec<UnitLayout>, CommitError> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| slice_layout(s, verify_ratio, intermediate_sliceable(layers, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn softmax_neighbours_are_whole() {
        let d = LayerSpec::dense(
            Tensor::zeros(Shape::new(vec![4, 4]).unwrap()),
            Tensor::zeros(Shape::vector(4).unwrap()),
        )
        .unwrap();
        let layers = vec![d, LayerSpec::Softmax];
        assert!(intermediate_sliceable(&layers, 0));
        assert!(!intermediate_sliceable(&layers, 1));
        assert!(!intermediate_sliceable(&layers, 2));
        let shapes = vec![Shape::vector(4).unwrap(); 3];
        let l = model_layouts(&layers, &shapes, 0.25).unwrap();
        assert_eq!(l.iter().map(UnitLayout::unit_count).collect::<Vec<_>>(), vec![4, 1, 1]);
    }
}
