//! Randomly shifted nested grids `G_{-1}, G_0, ..., G_L` over `[1, delta]^d`
//! with cell identification, centers, parent/child navigation, and
//! point-to-cell-box distances.
//!
//! `G_0` has side length `delta` and is translated so a grid vertex falls on
//! the random shift `v`; each refinement splits every cell into `2^d`
//! subcells. `G_L` has unit cells, so each holds at most one input point.
//! `G_{-1}` is a single root cell covering everything, with center at the
//! origin.

use rand::Rng;
use thiserror::Error;

use crate::hashing::subseed;
use crate::model::{Params, Point};

/// Packed cell key used as the sketch universe; unique per (level, index).
pub type CellKey = u128;

/// Packed point key: `d` fields of `L` bits, coordinate minus one each.
pub type PointKey = u128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("level {level} outside [-1, {max}]")]
    LevelOutOfRange { level: i32, max: u32 },
    #[error("the root cell has no parent")]
    RootHasNoParent,
    #[error("cells at the finest level have no children")]
    LeafHasNoChildren,
}

/// Identifier of one grid cell: a level in `[-1, L]` and the per-dimension
/// signed indices `(n_1, ..., n_d)` of its box
/// `[v_j + n_j W, v_j + (n_j + 1) W)` with `W = delta / 2^level`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId {
    pub level: i32,
    pub index: Vec<i64>,
}

impl CellId {
    pub fn root(d: usize) -> Self {
        CellId { level: -1, index: vec![0; d] }
    }

    pub fn is_root(&self) -> bool {
        self.level == -1
    }
}

/// A randomly shifted grid hierarchy. The shift is drawn once from the
/// seeded randomness and fixed for the lifetime of the system; every cell
/// computation is a pure function of (shift, level, point).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSystem {
    d: usize,
    delta: u64,
    levels: u32,
    shift: Vec<u64>,
}

impl GridSystem {
    /// Draws the shift `v` uniformly from `[0, delta - 1]^d` using the
    /// "shift" sub-stream of the master seed.
    pub fn new(params: &Params) -> Self {
        let mut rng = crate::hashing::rng_for(subseed(params.seed, "shift", &[]));
        let shift = (0..params.d).map(|_| rng.gen_range(0..params.delta)).collect();
        GridSystem { d: params.d, delta: params.delta, levels: params.levels, shift }
    }

    /// Builds a grid with an explicit shift (tests, statistical checkers).
    pub fn with_shift(d: usize, delta: u64, shift: Vec<u64>) -> Self {
        assert_eq!(shift.len(), d);
        assert!(delta.is_power_of_two());
        for &v in &shift {
            assert!(v < delta);
        }
        GridSystem { d, delta, levels: delta.trailing_zeros(), shift }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn delta(&self) -> u64 {
        self.delta
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn shift(&self) -> &[u64] {
        &self.shift
    }

    fn check_level(&self, level: i32) -> Result<(), GridError> {
        if level < -1 || level > self.levels as i32 {
            return Err(GridError::LevelOutOfRange { level, max: self.levels });
        }
        Ok(())
    }

    /// Side length of cells at `level >= 0`.
    pub fn side(&self, level: i32) -> u64 {
        debug_assert!(level >= 0 && level <= self.levels as i32);
        self.delta >> level as u32
    }

    /// Diameter `sqrt(d) * delta / 2^level` of a cell at `level >= 0`.
    pub fn cell_diameter(&self, level: i32) -> f64 {
        (self.d as f64).sqrt() * self.side(level) as f64
    }

    /// The cell of `G_level` containing `p`.
    pub fn cell_of(&self, p: &Point, level: i32) -> Result<CellId, GridError> {
        self.check_level(level)?;
        if level == -1 {
            return Ok(CellId::root(self.d));
        }
        let w = self.side(level) as i64;
        let index = p
            .coords()
            .iter()
            .zip(&self.shift)
            .map(|(&c, &v)| (c as i64 - v as i64).div_euclid(w))
            .collect();
        Ok(CellId { level, index })
    }

    /// Center of a cell. Level `-1` returns the origin; the finest level
    /// returns the unique lattice point of the unit cell (so the telescope
    /// identity is exact); other levels return the geometric midpoint.
    pub fn center_of(&self, cell: &CellId) -> Vec<f64> {
        if cell.level == -1 {
            return vec![0.0; self.d];
        }
        let w = self.side(cell.level);
        let half = if cell.level == self.levels as i32 { 0.0 } else { w as f64 / 2.0 };
        cell.index
            .iter()
            .zip(&self.shift)
            .map(|(&n, &v)| v as f64 + n as f64 * w as f64 + half)
            .collect()
    }

    /// The level-(i-1) cell geometrically containing `cell`.
    pub fn parent_of(&self, cell: &CellId) -> Result<CellId, GridError> {
        if cell.level == -1 {
            return Err(GridError::RootHasNoParent);
        }
        if cell.level == 0 {
            return Ok(CellId::root(self.d));
        }
        Ok(CellId {
            level: cell.level - 1,
            index: cell.index.iter().map(|&n| n.div_euclid(2)).collect(),
        })
    }

    /// The level-(i+1) cells contained in `cell`: `2^d` of them for interior
    /// cells, and for the root the level-0 cells intersecting the domain.
    pub fn children_of(&self, cell: &CellId) -> Result<Vec<CellId>, GridError> {
        if cell.level >= self.levels as i32 {
            return Err(GridError::LeafHasNoChildren);
        }
        if cell.level == -1 {
            // Per-coordinate index ranges of level-0 cells touching [1, delta].
            let w = self.delta as i64;
            let ranges: Vec<(i64, i64)> = self
                .shift
                .iter()
                .map(|&v| {
                    let lo = (1 - v as i64).div_euclid(w);
                    let hi = (self.delta as i64 - v as i64).div_euclid(w);
                    (lo, hi)
                })
                .collect();
            let mut out = Vec::new();
            let mut index = ranges.iter().map(|r| r.0).collect::<Vec<_>>();
            loop {
                out.push(CellId { level: 0, index: index.clone() });
                let mut dim = 0;
                loop {
                    if dim == self.d {
                        return Ok(out);
                    }
                    index[dim] += 1;
                    if index[dim] <= ranges[dim].1 {
                        break;
                    }
                    index[dim] = ranges[dim].0;
                    dim += 1;
                }
            }
        }
        let mut out = Vec::with_capacity(1 << self.d);
        for bits in 0..(1u64 << self.d) {
            let index = cell
                .index
                .iter()
                .enumerate()
                .map(|(j, &n)| 2 * n + ((bits >> j) & 1) as i64)
                .collect();
            out.push(CellId { level: cell.level + 1, index });
        }
        Ok(out)
    }

    /// Minimum Euclidean distance from any center to the closed cell box.
    pub fn dist_cell_to_positions(&self, cell: &CellId, centers: &[Vec<f64>]) -> f64 {
        debug_assert!(cell.level >= 0);
        let w = self.side(cell.level) as f64;
        let mut best = f64::INFINITY;
        for z in centers {
            let mut s = 0.0;
            for ((&n, &v), &zc) in cell.index.iter().zip(&self.shift).zip(z) {
                let lo = v as f64 + n as f64 * w;
                let hi = lo + w;
                let gap = (lo - zc).max(zc - hi).max(0.0);
                s += gap * gap;
            }
            best = best.min(s.sqrt());
        }
        best
    }

    /// Packed key: 7-bit level tag followed by `d` fields of `L + 2` bits,
    /// each index biased by `2^L` so shifted (negative) indices stay
    /// representable.
    pub fn pack_cell(&self, cell: &CellId) -> CellKey {
        let field_bits = self.levels + 2;
        let bias = 1i64 << self.levels;
        let mut key: u128 = (cell.level + 1) as u128;
        if cell.level == -1 {
            return key;
        }
        for (j, &n) in cell.index.iter().enumerate() {
            let biased = (n + bias) as u128;
            debug_assert!(biased < (1 << field_bits));
            key |= biased << (7 + j as u32 * field_bits);
        }
        key
    }

    /// Inverse of [`pack_cell`](Self::pack_cell).
    pub fn unpack_cell(&self, key: CellKey) -> CellId {
        let level = (key & 0x7f) as i32 - 1;
        if level == -1 {
            return CellId::root(self.d);
        }
        let field_bits = self.levels + 2;
        let mask = (1u128 << field_bits) - 1;
        let bias = 1i64 << self.levels;
        let index = (0..self.d)
            .map(|j| ((key >> (7 + j as u32 * field_bits)) & mask) as i64 - bias)
            .collect();
        CellId { level, index }
    }

    /// Packed point key: `d` fields of `L` bits holding coordinate minus one.
    pub fn pack_point(&self, p: &Point) -> PointKey {
        let mut key: u128 = 0;
        for (j, &c) in p.coords().iter().enumerate() {
            key |= ((c - 1) as u128) << (j as u32 * self.levels);
        }
        key
    }

    /// Inverse of [`pack_point`](Self::pack_point).
    pub fn unpack_point(&self, key: PointKey) -> Point {
        let mask = if self.levels == 0 { 0 } else { (1u128 << self.levels) - 1 };
        let coords = (0..self.d)
            .map(|j| ((key >> (j as u32 * self.levels)) & mask) as u64 + 1)
            .collect();
        Point::from_coords(coords)
    }

    /// Number of bits of a packed point key.
    pub fn point_key_bits(&self) -> u32 {
        (self.d as u32 * self.levels).max(1)
    }
}
