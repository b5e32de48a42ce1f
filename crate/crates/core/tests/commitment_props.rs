mod common;

use offload_core::commitment::{
    build_commit, hash_node, hash_unit, open_units, slice_layout, verify_proof, MerkleProof, UnitLayout,
};
use offload_core::{Region, Shape, Tensor};
use proptest::prelude::*;

const RATIOS: [f64; 5] = [1.0, 0.5, 0.25, 0.1, 0.01];

fn check_partition(layout: &UnitLayout) -> Result<(), TestCaseError> {
    let shape = layout.shape();
    let mut owner = vec![usize::MAX; shape.len()];
    for (u, region) in layout.units().enumerate() {
        prop_assert!(!region.is_empty());
        for i in region.flat_indices(shape) {
            prop_assert_eq!(owner[i], usize::MAX, "element {} in two units", i);
            owner[i] = u;
        }
    }
    prop_assert!(owner.iter().all(|&o| o != usize::MAX));
    Ok(())
}

fn arb_shape() -> impl Strategy<Value = Shape> {
    prop::collection::vec(1usize..=20, 1..=4).prop_map(|d| Shape::new(d).unwrap())
}

proptest! {
    #[test]
    fn units_partition_every_shape(s in arb_shape(), r in prop::sample::select(RATIOS.to_vec())) {
        let layout = slice_layout(&s, r, true).unwrap();
        check_partition(&layout)?;
        let want = (1.0 / r).round() as usize;
        prop_assert!(layout.unit_count() >= want.min(s.len()), "{:?} at {r}: {}", s, layout.unit_count());
    }

    #[test]
    fn covering_units_cover_exactly_the_touched_units(
        s in arb_shape(),
        r in prop::sample::select(RATIOS.to_vec()),
        picks in prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 4),
    ) {
        let layout = slice_layout(&s, r, true).unwrap();
        let (offset, extent): (Vec<usize>, Vec<usize>) = s
            .dims()
            .iter()
            .zip(picks.iter().cycle())
            .map(|(&d, (a, b))| {
                let o = a.index(d);
                (o, 1 + b.index(d - o))
            })
            .unzip();
        let region = Region::new(offset, extent);
        let covering = layout.covering_units(&region).unwrap();
        let touched: Vec<usize> = layout
            .units()
            .enumerate()
            .filter(|(_, u)| u.intersects(&region))
            .map(|(i, _)| i)
            .collect();
        prop_assert_eq!(covering, touched);
    }

    #[test]
    fn honest_openings_verify_and_round_trip(
        tensors in prop::collection::vec(common::arb_tensor(3, 6), 1..4),
        r in prop::sample::select(RATIOS.to_vec()),
        which in any::<prop::sample::Index>(),
        id in any::<u64>(),
    ) {
        let layouts: Vec<UnitLayout> = tensors.iter().map(|t| slice_layout(t.shape(), r, true).unwrap()).collect();
        let commit = build_commit(&tensors, &layouts).unwrap();
        prop_assert!(commit.is_consistent());
        let ii = which.index(tensors.len());
        let region = tensors[ii].shape().full_region();
        let proof = open_units(id, &tensors, &layouts, &[(ii, region)]).unwrap();
        prop_assert_eq!(proof.opened.len(), layouts[ii].unit_count());
        prop_assert!(verify_proof(&commit, &proof).unwrap());
        let decoded = MerkleProof::from_bytes(&proof.to_bytes()).unwrap();
        prop_assert_eq!(&decoded, &proof);
    }

    #[test]
    fn single_byte_mutations_are_rejected(
        tensors in prop::collection::vec(common::arb_tensor(2, 5), 1..3),
        pos in any::<prop::sample::Index>(),
        delta in 1u8..=255,
    ) {
        let layouts: Vec<UnitLayout> = tensors.iter().map(|t| slice_layout(t.shape(), 0.25, true).unwrap()).collect();
        let commit = build_commit(&tensors, &layouts).unwrap();
        let requested: Vec<(usize, Region)> = tensors.iter().enumerate().map(|(i, t)| (i, t.shape().full_region())).collect();
        let bytes = open_units(5, &tensors, &layouts, &requested).unwrap().to_bytes();
        // The leading inference id is not hashed; the client checks it separately.
        let p = 8 + pos.index(bytes.len() - 8);
        let mut mutated = bytes.clone();
        mutated[p] = mutated[p].wrapping_add(delta);
        let accepted = match MerkleProof::from_bytes(&mutated) {
            Err(_) => false,
            Ok(proof) => matches!(verify_proof(&commit, &proof), Ok(true)),
        };
        prop_assert!(!accepted, "mutation at byte {p} accepted");
    }
}

#[test]
fn leaf_and_node_hashes_are_domain_separated() {
    let leaf = hash_unit(0, 0, &[0u8; 60]);
    let mut node_input = [0u8; 64];
    node_input[..4].copy_from_slice(&0u32.to_le_bytes());
    let l: [u8; 32] = node_input[..32].try_into().unwrap();
    let r: [u8; 32] = node_input[32..].try_into().unwrap();
    assert_ne!(leaf, hash_node(&l, &r));
}

#[test]
fn commit_changes_with_any_value() {
    let t = Tensor::vector(&[1.0, 2.0, 3.0, 4.0]);
    let layouts = vec![slice_layout(t.shape(), 0.5, true).unwrap()];
    let base = build_commit(std::slice::from_ref(&t), &layouts).unwrap();
    for i in 0..4 {
        let mut u = t.clone();
        u.data_mut()[i] = f32::from_bits(u.data()[i].to_bits() ^ 1);
        assert_ne!(build_commit(&[u], &layouts).unwrap().root, base.root);
    }
}
