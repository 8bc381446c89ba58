//! Two-subpass iterative thinning of binary glyphs.
//!
//! Neighbors of a pixel `P1` are numbered clockwise starting directly above it:
//!
//! ```text
//! P9 P2 P3
//! P8 P1 P4
//! P7 P6 P5
//! ```
//!
//! Pixels outside the grid read as background.

use crate::error::{Error, Result};
use crate::imgcore::{binarize, to_gray, BinaryGrid, RasterImage};

/// Offsets `(dx, dy)` of P2..P9.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

/// Neighborhood summary of one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchStats {
    /// Number of ink neighbors, P1 excluded.
    pub n: u8,
    /// Number of 0 -> 1 transitions around the cycle P2, P3, ..., P9, P2.
    pub p: u8,
    /// Values of P2..P9.
    pub neighbors: [u8; 8],
}

impl PatchStats {
    pub fn from_neighbors(neighbors: [u8; 8]) -> Self {
        let n = neighbors.iter().sum();
        let p = (0..8)
            .filter(|&i| neighbors[i] == 0 && neighbors[(i + 1) % 8] == 1)
            .count() as u8;
        Self { n, p, neighbors }
    }

    /// Value of `P_index` for index in 2..=9.
    #[inline]
    pub fn value(&self, index: usize) -> u8 {
        self.neighbors[index - 2]
    }
}

/// The two alternating phases of a thinning round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subpass {
    /// Removes south-east boundary and north-west corner pixels.
    A,
    /// Removes north-west boundary and south-east corner pixels.
    B,
}

pub fn patch_stats(grid: &BinaryGrid, x: usize, y: usize) -> Result<PatchStats> {
    if x >= grid.width() || y >= grid.height() {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: grid.width(),
            height: grid.height(),
        });
    }
    Ok(stats_unchecked(grid, x, y))
}

#[inline]
fn stats_unchecked(grid: &BinaryGrid, x: usize, y: usize) -> PatchStats {
    let mut neighbors = [0u8; 8];
    for (slot, (dx, dy)) in neighbors.iter_mut().zip(NEIGHBOR_OFFSETS) {
        *slot = grid.get_padded(x as isize + dx, y as isize + dy);
    }
    PatchStats::from_neighbors(neighbors)
}

pub fn deletable(stats: &PatchStats, subpass: Subpass) -> bool {
    if !(2..=6).contains(&stats.n) || stats.p != 1 {
        return false;
    }
    let p = |i| stats.value(i);
    match subpass {
        Subpass::A => p(2) * p(4) * p(6) == 0 && p(4) * p(6) * p(8) == 0,
        Subpass::B => p(2) * p(4) * p(8) == 0 && p(2) * p(6) * p(8) == 0,
    }
}

/// Runs one subpass against a frozen copy of `grid`, returning the number of deleted pixels.
fn run_subpass(grid: &mut BinaryGrid, subpass: Subpass) -> usize {
    let snapshot = grid.clone();
    let mut doomed = Vec::new();
    for y in 0..snapshot.height() {
        for x in 0..snapshot.width() {
            if snapshot.get(x, y) == 1 && deletable(&stats_unchecked(&snapshot, x, y), subpass) {
                doomed.push((x, y));
            }
        }
    }
    for &(x, y) in &doomed {
        grid.set(x, y, false);
    }
    doomed.len()
}

/// Thins until a full A+B round deletes nothing.
pub fn thin(grid: &BinaryGrid) -> BinaryGrid {
    let mut out = grid.clone();
    loop {
        let removed = run_subpass(&mut out, Subpass::A) + run_subpass(&mut out, Subpass::B);
        if removed == 0 {
            return out;
        }
    }
}

/// Skeleton of an RGB glyph image: `thin(binarize(to_gray(img)))`.
pub fn ske(img: &RasterImage, threshold: f64) -> Result<BinaryGrid> {
    Ok(thin(&binarize(&to_gray(img)?, threshold)?))
}
