//! Two-level Merkle commitment over every intermediate of an inference.
//!
//! Leaves: `H(0x00 || intermediate u32 LE || unit u32 LE || unit bytes)`,
//! unit bytes being the row-major LE f32 image of the unit. Internal nodes:
//! `H(0x01 || left || right)`. A level with an odd node count promotes its
//! last node unchanged. Each intermediate's unit leaves reduce to a layer
//! root; the layer roots reduce the same way to the inference root.
//! `H` is SHA-256.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::codec::{DecodeError, Reader, Writer};
use crate::tensor::{f32s_to_le_bytes, Region, Tensor};

use super::slicing::UnitLayout;
use super::CommitError;

pub type Hash = [u8; 32];

const LEAF_TAG: u8 = 0x00;
const NODE_TAG: u8 = 0x01;
/// Paths longer than this cannot come from a tree that fits in memory.
const MAX_PATH: usize = 64;

pub fn hash_unit(intermediate: u32, unit: u32, unit_bytes: &[u8]) -> Hash {
    let mut h = Sha256::new();
    h.update([LEAF_TAG]);
    h.update(intermediate.to_le_bytes());
    h.update(unit.to_le_bytes());
    h.update(unit_bytes);
    h.finalize().into()
}

pub fn hash_node(left: &Hash, right: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update([NODE_TAG]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

/// All levels of a tree, leaves first, root level last (one node).
fn levels(leaves: Vec<Hash>) -> Vec<Vec<Hash>> {
    let mut out = Vec::new();
    let mut cur = leaves;
    while cur.len() > 1 {
        let next = cur
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => hash_node(l, r),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
        out.push(cur);
        cur = next;
    }
    out.push(cur);
    out
}

/// Root of a tree over `leaves` (non-empty).
pub fn reduce(leaves: &[Hash]) -> Hash {
    levels(leaves.to_vec()).last().expect("levels")[0]
}

/// One authentication step: the sibling and whether it sits on the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub sibling: Hash,
    pub sibling_is_left: bool,
}

fn path(levels: &[Vec<Hash>], mut index: usize) -> Vec<PathStep> {
    let mut steps = Vec::new();
    for level in &levels[..levels.len() - 1] {
        let sib = index ^ 1;
        if sib < level.len() {
            steps.push(PathStep {
                sibling: level[sib],
                sibling_is_left: sib < index,
            });
        }
        index /= 2;
    }
    steps
}

fn climb(mut node: Hash, steps: &[PathStep]) -> Hash {
    for s in steps {
        node = if s.sibling_is_left {
            hash_node(&s.sibling, &node)
        } else {
            hash_node(&node, &s.sibling)
        };
    }
    node
}

/// The 32-byte inference commitment plus the per-intermediate roots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleCommit {
    pub root: Hash,
    pub leaf_count: u64,
    pub layer_roots: Vec<Hash>,
}

impl MerkleCommit {
    pub fn from_layer_roots(layer_roots: Vec<Hash>, leaf_count: u64) -> Self {
        MerkleCommit {
            root: reduce(&layer_roots),
            leaf_count,
            layer_roots,
        }
    }

    /// The root equals the reduction of the layer roots.
    pub fn is_consistent(&self) -> bool {
        !self.layer_roots.is_empty() && reduce(&self.layer_roots) == self.root
    }

    /// `root, u64 leaf_count, u32 n, n * root`.
    pub fn encode(&self, w: &mut Writer) {
        w.bytes(&self.root).u64(self.leaf_count).len32(self.layer_roots.len());
        for r in &self.layer_roots {
            w.bytes(r);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let root = r.array()?;
        let leaf_count = r.u64()?;
        let n = r.count(32)?;
        let layer_roots = (0..n).map(|_| r.array()).collect::<Result<_, _>>()?;
        Ok(MerkleCommit {
            root,
            leaf_count,
            layer_roots,
        })
    }

    pub fn encoded_len(&self) -> usize {
        32 + 8 + 4 + 32 * self.layer_roots.len()
    }
}

fn check_layouts(intermediates: &[Tensor], layouts: &[UnitLayout]) -> Result<(), CommitError> {
    if intermediates.is_empty() || intermediates.len() != layouts.len() {
        return Err(CommitError::LayoutMismatch {
            index: intermediates.len().min(layouts.len()),
        });
    }
    for (i, (t, l)) in intermediates.iter().zip(layouts).enumerate() {
        if t.shape() != l.shape() {
            return Err(CommitError::LayoutMismatch { index: i });
        }
    }
    Ok(())
}

fn unit_bytes(t: &Tensor, region: &Region) -> Vec<u8> {
    f32s_to_le_bytes(&t.extract(region).expect("layout regions fit"))
}

fn leaves(index: usize, t: &Tensor, layout: &UnitLayout) -> Vec<Hash> {
    layout
        .units()
        .enumerate()
        .map(|(u, r)| hash_unit(index as u32, u as u32, &unit_bytes(t, &r)))
        .collect()
}

pub fn build_commit(intermediates: &[Tensor], layouts: &[UnitLayout]) -> Result<MerkleCommit, CommitError> {
    check_layouts(intermediates, layouts)?;
    let mut count = 0u64;
    let roots = intermediates
        .iter()
        .zip(layouts)
        .enumerate()
        .map(|(i, (t, l))| {
            count += l.unit_count() as u64;
            reduce(&leaves(i, t, l))
        })
        .collect();
    Ok(MerkleCommit::from_layer_roots(roots, count))
}

/// One opened unit with its authentication paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedUnit {
    pub intermediate: u32,
    pub unit: u32,
    pub bytes: Vec<u8>,
    /// Leaf to the intermediate's root.
    pub unit_path: Vec<PathStep>,
    /// Intermediate root to the inference root.
    pub layer_path: Vec<PathStep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub inference_id: u64,
    pub opened: Vec<OpenedUnit>,
}

/// Opens the covering units of every requested `(intermediate, region)`.
/// Units shared between requests are opened once; output is ordered by
/// `(intermediate, unit)`.
pub fn open_units(
    inference_id: u64,
    intermediates: &[Tensor],
    layouts: &[UnitLayout],
    requested: &[(usize, Region)],
) -> Result<MerkleProof, CommitError> {
    check_layouts(intermediates, layouts)?;
    let mut wanted = BTreeSet::new();
    for (i, region) in requested {
        let layout = layouts.get(*i).ok_or(CommitError::NoSuchIntermediate(*i))?;
        for u in layout.covering_units(region)? {
            wanted.insert((*i, u));
        }
    }
    let touched: BTreeSet<usize> = wanted.iter().map(|&(i, _)| i).collect();
    let mut unit_trees = alloc::collections::BTreeMap::new();
    let mut roots = Vec::with_capacity(intermediates.len());
    for (i, (t, l)) in intermediates.iter().zip(layouts).enumerate() {
        let lv = levels(leaves(i, t, l));
        roots.push(lv.last().expect("levels")[0]);
        if touched.contains(&i) {
            unit_trees.insert(i, lv);
        }
    }
    let top = levels(roots);
    let opened = wanted
        .into_iter()
        .map(|(i, u)| OpenedUnit {
            intermediate: i as u32,
            unit: u as u32,
            bytes: unit_bytes(&intermediates[i], &layouts[i].unit(u).expect("unit")),
            unit_path: path(&unit_trees[&i], u),
            layer_path: path(&top, i),
        })
        .collect();
    Ok(MerkleProof { inference_id, opened })
}

/// Checks every opened unit against the commitment. `Ok(false)` means a
/// hash mismatch (the data is not what was committed); `Err` means the
/// proof is structurally unusable.
pub fn verify_proof(commit: &MerkleCommit, proof: &MerkleProof) -> Result<bool, CommitError> {
    let mut seen = BTreeSet::new();
    for o in &proof.opened {
        if o.bytes.is_empty() || o.bytes.len() % 4 != 0 {
            return Err(CommitError::Malformed(
                "unit byte length is not a positive multiple of 4",
            ));
        }
        if o.unit_path.len() > MAX_PATH || o.layer_path.len() > MAX_PATH {
            return Err(CommitError::Malformed("authentication path too long"));
        }
        if !seen.insert((o.intermediate, o.unit)) {
            return Err(CommitError::Malformed("unit opened twice"));
        }
        if o.intermediate as usize >= commit.layer_roots.len() {
            return Err(CommitError::Malformed("intermediate index beyond the commitment"));
        }
    }
    if !commit.is_consistent() {
        return Ok(false);
    }
    for o in &proof.opened {
        let layer_root = climb(hash_unit(o.intermediate, o.unit, &o.bytes), &o.unit_path);
        if layer_root != commit.layer_roots[o.intermediate as usize] {
            return Ok(false);
        }
        if climb(layer_root, &o.layer_path) != commit.root {
            return Ok(false);
        }
    }
    Ok(true)
}

fn write_path(w: &mut Writer, steps: &[PathStep]) {
    w.len32(steps.len());
    for s in steps {
        w.u8(u8::from(s.sibling_is_left)).bytes(&s.sibling);
    }
}

fn read_path(r: &mut Reader<'_>) -> Result<Vec<PathStep>, DecodeError> {
    let n = r.count(33)?;
    (0..n)
        .map(|_| {
            let sibling_is_left = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(DecodeError::invalid("path flag", f)),
            };
            Ok(PathStep {
                sibling: r.array()?,
                sibling_is_left,
            })
        })
        .collect()
}

impl MerkleProof {
    /// ```text
    /// u64 inference_id  u32 opened_count
    /// per opened unit:
    ///   u32 intermediate  u32 unit  u32 byte_len  bytes
    ///   u32 unit_path_len   (u8 sibling_is_left, 32-byte sibling) * len
    ///   u32 layer_path_len  (u8 sibling_is_left, 32-byte sibling) * len
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.inference_id).len32(self.opened.len());
        for o in &self.opened {
            w.u32(o.intermediate).u32(o.unit).len32(o.bytes.len()).bytes(&o.bytes);
            write_path(&mut w, &o.unit_path);
            write_path(&mut w, &o.layer_path);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let inference_id = r.u64()?;
        let n = r.count(20)?;
        let mut opened = Vec::with_capacity(n);
        for _ in 0..n {
            let intermediate = r.u32()?;
            let unit = r.u32()?;
            let len = r.u32()? as usize;
            let bytes = r.take(len)?.to_vec();
            let unit_path = read_path(&mut r)?;
            let layer_path = read_path(&mut r)?;
            opened.push(OpenedUnit {
                intermediate,
                unit,
                bytes,
                unit_path,
                layer_path,
            });
        }
        r.finish()?;
        Ok(MerkleProof { inference_id, opened })
    }

    pub fn find(&self, intermediate: usize, unit: usize) -> Option<&OpenedUnit> {
        self.opened
            .iter()
            .find(|o| o.intermediate as usize == intermediate && o.unit as usize == unit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commitment::slice_layout;
    use crate::tensor::Shape;
    use alloc::vec;

    fn hex(h: &Hash) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::new();
        for b in h {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    #[test]
    fn leaf_hash_golden_vector() {
        // sha256(00 00000000 00000000 0000803f), computed with hashlib.
        assert_eq!(
            hex(&hash_unit(0, 0, &1.0f32.to_le_bytes())),
            "1bcd2c5bb2a0dc021d9912349c176ec686bc431ec0468b48c9de06c6df2f0ae0"
        );
    }

    #[test]
    fn index_separates_identical_bytes() {
        let b = [1, 2, 3, 4];
        assert_ne!(hash_unit(0, 0, &b), hash_unit(0, 1, &b));
        assert_ne!(hash_unit(0, 0, &b), hash_unit(1, 0, &b));
    }

    #[test]
    fn single_unit_commit_is_leaf() {
        let t = Tensor::vector(&[1.0]);
        let l = slice_layout(t.shape(), 1.0, true).unwrap();
        let c = build_commit(&[t], &[l]).unwrap();
        assert_eq!(c.root, hash_unit(0, 0, &1.0f32.to_le_bytes()));
        assert_eq!(c.leaf_count, 1);
    }

    #[test]
    fn eight_roots_reduce_as_balanced_tree() {
        let roots: Vec<Hash> = (0..8u8).map(|i| [i; 32]).collect();
        let h = |a: &Hash, b: &Hash| hash_node(a, b);
        let h12 = h(&roots[0], &roots[1]);
        let h34 = h(&roots[2], &roots[3]);
        let h56 = h(&roots[4], &roots[5]);
        let h78 = h(&roots[6], &roots[7]);
        assert_eq!(reduce(&roots), h(&h(&h12, &h34), &h(&h56, &h78)));
    }

    #[test]
    fn odd_levels_promote_last_node() {
        let r: Vec<Hash> = (0..3u8).map(|i| [i; 32]).collect();
        assert_eq!(reduce(&r), hash_node(&hash_node(&r[0], &r[1]), &r[2]));
    }

    #[test]
    fn open_and_verify_every_unit() {
        let t0 = Tensor::new(Shape::new(vec![5, 3]).unwrap(), (0..15).map(|v| v as f32).collect()).unwrap();
        let t1 = Tensor::vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let layouts = vec![
            slice_layout(t0.shape(), 0.2, true).unwrap(),
            slice_layout(t1.shape(), 0.3, true).unwrap(),
        ];
        let inter = vec![t0, t1];
        let commit = build_commit(&inter, &layouts).unwrap();
        let req = vec![(0, inter[0].shape().full_region()), (1, Region::new(vec![2], vec![1]))];
        let proof = open_units(3, &inter, &layouts, &req).unwrap();
        assert_eq!(proof.opened.len(), layouts[0].unit_count() + 1);
        assert!(verify_proof(&commit, &proof).unwrap());
        let back = MerkleProof::from_bytes(&proof.to_bytes()).unwrap();
        assert_eq!(back, proof);
    }

    #[test]
    fn malformed_proofs_are_errors_not_false() {
        let t = Tensor::vector(&[1.0, 2.0]);
        let l = slice_layout(t.shape(), 0.5, true).unwrap();
        let inter = vec![t];
        let layouts = vec![l];
        let commit = build_commit(&inter, &layouts).unwrap();
        let mut proof = open_units(0, &inter, &layouts, &[(0, Region::new(vec![0], vec![2]))]).unwrap();
        proof.opened[0].bytes.pop();
        assert!(verify_proof(&commit, &proof).is_err());
        let mut proof = open_units(0, &inter, &layouts, &[(0, Region::new(vec![0], vec![1]))]).unwrap();
        proof.opened.push(proof.opened[0].clone());
        assert!(verify_proof(&commit, &proof).is_err());
        let mut bytes = open_units(0, &inter, &layouts, &[(0, Region::new(vec![0], vec![1]))])
            .unwrap()
            .to_bytes();
        // path flag byte of the first step
        let flag_at = 8 + 4 + 12 + 4 + 4;
        bytes[flag_at] = 2;
        assert!(MerkleProof::from_bytes(&bytes).is_err());
    }

    #[test]
    fn out_of_bounds_region_rejected() {
        let t = Tensor::vector(&[1.0, 2.0]);
        let l = slice_layout(t.shape(), 0.5, true).unwrap();
        assert!(open_units(
            0,
            core::slice::from_ref(&t),
            core::slice::from_ref(&l),
            &[(0, Region::new(vec![1], vec![2]))]
        )
        .is_err());
        assert!(open_units(0, &[t], &[l], &[(1, Region::new(vec![0], vec![1]))]).is_err());
    }
}
