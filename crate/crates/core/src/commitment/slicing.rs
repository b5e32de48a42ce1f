//! Disjoint slicing of a tensor into verify units.
//!
//! For a verify ratio `r`, let `u = ceil(1/r)`. Rank-1 tensors are cut into
//! `u` segments. Higher ranks cut the two largest axes (ties go to the
//! leading axis) into `f = ceil(sqrt(u))` segments each, so a
//! `(224, 224, 128)` activation at `r = 0.01` becomes a 10 x 10 grid of
//! `(22, 22, 128)` blocks with the last row and column absorbing the
//! remainder.
//!
//! An axis shorter than its segment count is cut into single elements and
//! the shortfall is made up on the other chosen axis, then on the remaining
//! axes in size order. The result always has at least `min(u, elements)`
//! units. A segment of an axis of length `d` cut `s` ways has length
//! `floor(d/s)`, except the last which takes the rest.
//!
//! Overlapping ("continuous") units would let a verifier pick any window,
//! but their count grows with every possible offset; they are not offered.

use alloc::vec;
use alloc::vec::Vec;

use crate::ceil_tolerant;
use crate::tensor::{Region, Shape};

use super::CommitError;

/// Grid of verify units over one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitLayout {
    shape: Shape,
    verify_ratio: f64,
    sliceable: bool,
    /// Segment start offsets per axis; segment `i` ends where `i+1` starts.
    cuts: Vec<Vec<usize>>,
}

impl UnitLayout {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn verify_ratio(&self) -> f64 {
        self.verify_ratio
    }

    pub fn sliceable(&self) -> bool {
        self.sliceable
    }

    /// Number of segments along each axis.
    pub fn segments(&self) -> Vec<usize> {
        self.cuts.iter().map(Vec::len).collect()
    }

    pub fn unit_count(&self) -> usize {
        self.cuts.iter().map(Vec::len).product()
    }

    fn segment(&self, axis: usize, i: usize) -> (usize, usize) {
        let start = self.cuts[axis][i];
        let end = self.cuts[axis].get(i + 1).copied().unwrap_or(self.shape.dims()[axis]);
        (start, end - start)
    }

    fn grid_index(&self, unit: usize) -> Vec<usize> {
        let counts = self.segments();
        let mut idx = vec![0; counts.len()];
        let mut rest = unit;
        for a in (0..counts.len()).rev() {
            idx[a] = rest % counts[a];
            rest /= counts[a];
        }
        idx
    }

    /// Region of unit `unit` (row-major over the segment grid).
    pub fn unit(&self, unit: usize) -> Option<Region> {
        if unit >= self.unit_count() {
            return None;
        }
        let idx = self.grid_index(unit);
        let (offset, extent) = idx.iter().enumerate().map(|(a, &i)| self.segment(a, i)).unzip();
        Some(Region::new(offset, extent))
    }

    pub fn units(&self) -> impl Iterator<Item = Region> + '_ {
        (0..self.unit_count()).map(|u| self.unit(u).expect("in range"))
    }

    /// Unit holding the element at `index`.
    pub fn unit_of(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.rank() {
            return None;
        }
        let mut unit = 0;
        for (a, &i) in index.iter().enumerate() {
            if i >= self.shape.dims()[a] {
                return None;
            }
            let seg = self.cuts[a].partition_point(|&c| c <= i) - 1;
            unit = unit * self.cuts[a].len() + seg;
        }
        Some(unit)
    }

    /// The minimal set of units whose union covers `region`, ascending.
    pub fn covering_units(&self, region: &Region) -> Result<Vec<usize>, CommitError> {
        if !region.fits(&self.shape) {
            return Err(CommitError::RegionOutOfBounds {
                region: region.clone(),
                shape: self.shape.clone(),
            });
        }
        let ranges: Vec<(usize, usize)> = (0..self.shape.rank())
            .map(|a| {
                let first = self.cuts[a].partition_point(|&c| c <= region.offset[a]) - 1;
                let last_elem = region.offset[a] + region.extent[a] - 1;
                let last = self.cuts[a].partition_point(|&c| c <= last_elem) - 1;
                (first, last)
            })
            .collect();
        let counts = self.segments();
        let mut out = Vec::new();
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            out.push(idx.iter().zip(&counts).fold(0, |acc, (&i, &c)| acc * c + i));
            let mut a = idx.len();
            loop {
                if a == 0 {
                    return Ok(out);
                }
                a -= 1;
                if idx[a] < ranges[a].1 {
                    idx[a] += 1;
                    break;
                }
                idx[a] = ranges[a].0;
            }
        }
    }

    /// Smallest unit-aligned region containing `region`: the union of its
    /// covering units.
    pub fn aligned(&self, region: &Region) -> Result<Region, CommitError> {
        let units = self.covering_units(region)?;
        let first = self.unit(units[0]).expect("unit in range");
        let last = self.unit(*units.last().expect("non-empty")).expect("unit in range");
        let extent = first
            .offset
            .iter()
            .zip(last.offset.iter().zip(&last.extent))
            .map(|(&lo, (&o, &e))| o + e - lo)
            .collect();
        Ok(Region::new(first.offset, extent))
    }
}

fn isqrt_ceil(u: usize) -> usize {
    let mut f = libm::sqrt(u as f64) as usize;
    while f * f < u {
        f += 1;
    }
    while f > 1 && (f - 1) * (f - 1) >= u {
        f -= 1;
    }
    f.max(1)
}

/// Number of units requested by a verify ratio, `ceil(1/ratio)`.
pub fn units_for_ratio(verify_ratio: f64) -> Result<usize, CommitError> {
    if !(verify_ratio > 0.0 && verify_ratio <= 1.0) {
        return Err(CommitError::InvalidRatio(verify_ratio));
    }
    Ok(ceil_tolerant(1.0 / verify_ratio).max(1))
}

pub fn slice_layout(shape: &Shape, verify_ratio: f64, sliceable: bool) -> Result<UnitLayout, CommitError> {
    let u = units_for_ratio(verify_ratio)?;
    let dims = shape.dims();
    let mut segs = vec![1usize; dims.len()];
    if sliceable && u > 1 {
        // Axes by size, largest first; ties keep the leading axis first.
        let mut order: Vec<usize> = (0..dims.len()).collect();
        order.sort_by(|&a, &b| dims[b].cmp(&dims[a]).then(a.cmp(&b)));
        if dims.len() == 1 {
            segs[0] = u.min(dims[0]);
        } else {
            let (a, b) = (order[0], order[1]);
            let f = isqrt_ceil(u);
            segs[a] = f.min(dims[a]);
            segs[b] = f.min(dims[b]);
            if segs[a] * segs[b] < u {
                segs[b] = u.div_ceil(segs[a]).min(dims[b]);
            }
            if segs[a] * segs[b] < u {
                segs[a] = u.div_ceil(segs[b]).min(dims[a]);
            }
            for &c in &order[2..] {
                let have: usize = segs.iter().product();
                if have >= u {
                    break;
                }
                segs[c] = u.div_ceil(have).min(dims[c]);
            }
        }
    }
    let cuts = dims
        .iter()
        .zip(&segs)
        .map(|(&d, &s)| {
            let base = d / s;
            (0..s).map(|i| i * base).collect()
        })
        .collect();
    Ok(UnitLayout {
        shape: shape.clone(),
        verify_ratio,
        sliceable,
        cuts,
    })
}
