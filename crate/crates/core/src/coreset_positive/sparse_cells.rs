//! Sparse-cell point recovery: a composed turnstile sketch that outputs all
//! points lying in cells with few points, or `Fail`.
//!
//! A single instance hashes each point to one of `U = 100 * beta` tags and
//! feeds one K-Set per key bit with the triple (cell, tag, bit value). A
//! (cell, tag) group backed by exactly one point is a verified singleton in
//! every bit plane, so the point's key is read off bit by bit. The composed
//! sketch unions several independent single instances and cross-checks the
//! result against exact per-cell counts from one more K-Set; any incomplete
//! sub-`beta` cell forces `Fail`, so a non-`Fail` output is complete.

use std::collections::{BTreeMap, BTreeSet};

use crate::grid::{CellKey, PointKey};
use crate::hashing::{mix128, subseed};
use crate::kset::{KSet, SketchFail};
use crate::model::StreamOp;

/// 2-wise independent hash from point keys onto `[0, range)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TagHash {
    a: u64,
    b: u64,
    range: u64,
}

const MERSENNE_61: u64 = (1 << 61) - 1;

impl TagHash {
    fn new(seed: u64, range: u64) -> Self {
        let a = subseed(seed, "tag-a", &[]) % (MERSENNE_61 - 1) + 1;
        let b = subseed(seed, "tag-b", &[]) % MERSENNE_61;
        TagHash { a, b, range }
    }

    fn eval(&self, key: PointKey) -> u64 {
        let x = (key % MERSENNE_61 as u128) as u64;
        let v = ((self.a as u128 * x as u128 + self.b as u128) % MERSENNE_61 as u128) as u64;
        v % self.range
    }
}

/// One recovery instance: `t` bit-plane K-Sets plus the tag hash.
#[derive(Debug, Clone)]
pub struct SparseCellsSingle {
    tag: TagHash,
    bits: u32,
    planes: Vec<KSet>,
}

impl SparseCellsSingle {
    /// `point_bits` is the key width `ceil(log2 N)`; `alpha` the promised
    /// bound on occupied cells; `beta` the recovery threshold. The per-bit
    /// K-Set capacity defaults to `2 * alpha * U`; callers with tighter
    /// budgets pass their own via `kset_capacity`.
    pub fn new(
        point_bits: u32,
        alpha: usize,
        beta: usize,
        fail_delta: f64,
        kset_capacity: Option<usize>,
        seed: u64,
    ) -> Self {
        let u = 100 * beta.max(1) as u64;
        let t = point_bits.max(1);
        let capacity = kset_capacity.unwrap_or(2 * alpha * u as usize);
        let per_plane_delta = fail_delta / t as f64;
        SparseCellsSingle {
            tag: TagHash::new(subseed(seed, "sc-tag", &[]), u),
            bits: t,
            planes: (0..t)
                .map(|j| KSet::new(capacity, per_plane_delta, subseed(seed, "sc-plane", &[j as u64])))
                .collect(),
        }
    }

    fn plane_key(cell: CellKey, tag: u64, bit: u64) -> u128 {
        // Cell keys can use the full 128 bits, so the plane key folds the
        // cell down to a 64-bit fingerprint; tag collisions across distinct
        // cells are caught by the composed verification step.
        let cell_fp = mix128(0x5ca1_ab1e_0dd_u64, cell) as u128;
        (cell_fp << 33) | ((tag as u128) << 1) | bit as u128
    }

    pub fn update(&mut self, point: PointKey, cell: CellKey, op: StreamOp) {
        let tag = self.tag.eval(point);
        for j in 0..self.bits {
            let bit = (point >> j) as u64 & 1;
            self.planes[j as usize].update(Self::plane_key(cell, tag, bit), op);
        }
    }

    /// Recovers every point whose (cell, tag) group is a singleton in all
    /// bit planes. Fails if any plane fails or the planes disagree on the
    /// set of live groups.
    pub fn query(&self) -> Result<BTreeSet<PointKey>, SketchFail> {
        let mut plane_maps = Vec::with_capacity(self.bits as usize);
        for plane in &self.planes {
            plane_maps.push(plane.retrieve()?);
        }
        let mut out = BTreeSet::new();
        // Group keys of the first plane drive the scan.
        let groups: BTreeSet<u128> = plane_maps[0].keys().map(|k| k >> 1).collect();
        for group in groups {
            let mut point: PointKey = 0;
            let mut singleton = true;
            for (j, plane) in plane_maps.iter().enumerate() {
                let zero = plane.get(&(group << 1)).copied().unwrap_or(0);
                let one = plane.get(&((group << 1) | 1)).copied().unwrap_or(0);
                if zero + one == 0 {
                    // The group is live in plane 0 but absent here: the
                    // sketches contradict each other.
                    return Err(SketchFail);
                }
                match (zero, one) {
                    (1, 0) => {}
                    (0, 1) => point |= 1 << j,
                    _ => {
                        singleton = false;
                        break;
                    }
                }
            }
            if singleton {
                out.insert(point);
            }
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for plane in &self.planes {
            let s = plane.snapshot();
            out.extend((s.len() as u64).to_le_bytes());
            out.extend(s);
        }
        out
    }
}

/// Composed sketch: `A = ceil(log10(4 alpha beta / delta))` independent
/// single instances plus one verification K-Set of exact per-cell counts.
#[derive(Debug, Clone)]
pub struct SparseCells {
    alpha: usize,
    beta: usize,
    singles: Vec<SparseCellsSingle>,
    cell_counts: KSet,
    live: i64,
}

impl SparseCells {
    pub fn new(
        point_bits: u32,
        alpha: usize,
        beta: usize,
        fail_delta: f64,
        kset_capacity: Option<usize>,
        seed: u64,
    ) -> Self {
        let alpha = alpha.max(1);
        let beta = beta.max(1);
        let a = ((4.0 * alpha as f64 * beta as f64 / fail_delta).log10().ceil() as usize).max(1);
        SparseCells {
            alpha,
            beta,
            singles: (0..a)
                .map(|i| {
                    SparseCellsSingle::new(
                        point_bits,
                        alpha,
                        beta,
                        fail_delta / (4.0 * a as f64),
                        kset_capacity,
                        subseed(seed, "sc-single", &[i as u64]),
                    )
                })
                .collect(),
            cell_counts: KSet::new(alpha, fail_delta / 2.0, subseed(seed, "sc-counts", &[])),
            live: 0,
        }
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn instances(&self) -> usize {
        self.singles.len()
    }

    /// Net updates received (inserts minus deletes).
    pub fn live(&self) -> i64 {
        self.live
    }

    pub fn update(&mut self, point: PointKey, cell: CellKey, op: StreamOp) {
        for single in &mut self.singles {
            single.update(point, cell, op);
        }
        self.cell_counts.update(cell, op);
        self.live += match op {
            StreamOp::Insert => 1,
            StreamOp::Delete => -1,
        };
    }

    /// Outputs all points in cells with at most `beta` points, or fails.
    /// `cell_of` maps a recovered point key back to its cell key and must
    /// match the mapping used during updates.
    pub fn query(
        &self,
        cell_of: impl Fn(PointKey) -> CellKey,
    ) -> Result<BTreeSet<PointKey>, SketchFail> {
        let counts = self.cell_counts.retrieve()?;
        let mut union = BTreeSet::new();
        for single in &self.singles {
            union.extend(single.query()?);
        }
        verify_recovery(&counts, &union, self.beta, &cell_of)?;
        Ok(union)
    }

    /// Per-instance recoveries, for marginal-rate measurements.
    pub fn query_singles(&self) -> Result<Vec<BTreeSet<PointKey>>, SketchFail> {
        self.singles.iter().map(|s| s.query()).collect()
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(self.live.to_le_bytes());
        for single in &self.singles {
            out.extend(single.snapshot());
        }
        let s = self.cell_counts.snapshot();
        out.extend((s.len() as u64).to_le_bytes());
        out.extend(s);
        out
    }
}

/// The completeness check: every cell with at most `beta` points must have
/// all of its points recovered.
pub(crate) fn verify_recovery(
    counts: &BTreeMap<CellKey, i64>,
    recovered: &BTreeSet<PointKey>,
    beta: usize,
    cell_of: &impl Fn(PointKey) -> CellKey,
) -> Result<(), SketchFail> {
    let mut per_cell: BTreeMap<CellKey, i64> = BTreeMap::new();
    for &p in recovered {
        *per_cell.entry(cell_of(p)).or_insert(0) += 1;
    }
    for (&cell, &count) in counts {
        if count <= beta as i64 && per_cell.get(&cell).copied().unwrap_or(0) != count {
            return Err(SketchFail);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    // 16-bit point keys; cell = high byte.
    fn cell_of(p: PointKey) -> CellKey {
        p >> 8
    }

    #[test]
    fn lone_point_recovered() {
        let mut sc = SparseCellsSingle::new(16, 8, 4, 0.05, None, 1);
        sc.update(0x1234, cell_of(0x1234), StreamOp::Insert);
        assert_eq!(sc.query().unwrap(), BTreeSet::from([0x1234u128]));
    }

    #[test]
    fn colliding_tags_recover_nothing_without_fail() {
        // Find two points in one cell with equal hash tags; neither is
        // recovered but the instance does not fail.
        'outer: for seed in 0..200u64 {
            let single = SparseCellsSingle::new(16, 8, 4, 0.05, None, seed);
            let cell = 0x42u128;
            let points: Vec<PointKey> = (0..200).map(|i| (cell << 8) | i).collect();
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    if single.tag.eval(points[i]) == single.tag.eval(points[j]) {
                        let mut sc = single.clone();
                        sc.update(points[i], cell, StreamOp::Insert);
                        sc.update(points[j], cell, StreamOp::Insert);
                        let out = sc.query().unwrap();
                        assert!(!out.contains(&points[i]));
                        assert!(!out.contains(&points[j]));
                        break 'outer;
                    }
                }
            }
        }
    }

    #[test]
    fn single_instance_never_fabricates() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        for seed in 0..100u64 {
            let mut sc = SparseCellsSingle::new(16, 16, 4, 0.05, None, seed);
            let mut reference = BTreeSet::new();
            for _ in 0..rng.gen_range(1..40) {
                let p: PointKey = rng.gen_range(0..0x10000u32) as u128;
                if reference.insert(p) {
                    sc.update(p, cell_of(p), StreamOp::Insert);
                }
            }
            if let Ok(out) = sc.query() {
                for p in out {
                    assert!(reference.contains(&p), "fabricated point {p:#x}");
                }
            }
        }
    }

    #[test]
    fn composed_recovers_singleton_cells() {
        // Five cells with one point each, beta = 4, alpha = 8.
        let mut sc = SparseCells::new(16, 8, 4, 0.05, None, 3);
        let points: Vec<PointKey> = (0..5).map(|i| (i as u128) << 8 | 7).collect();
        for &p in &points {
            sc.update(p, cell_of(p), StreamOp::Insert);
        }
        let out = sc.query(cell_of).unwrap();
        assert_eq!(out, points.iter().copied().collect());
        assert_eq!(sc.live(), 5);
    }

    #[test]
    fn heavy_cells_may_stay_incomplete() {
        // A cell holding more than beta points need not be recovered; the
        // result is still valid (and sub-beta cells stay complete).
        let mut sc = SparseCells::new(16, 8, 2, 0.05, None, 4);
        let heavy: Vec<PointKey> = (0..10).map(|i| 0x100 | i as u128).collect();
        for &p in &heavy {
            sc.update(p, cell_of(p), StreamOp::Insert);
        }
        sc.update(0x201, 0x2, StreamOp::Insert);
        let out = sc.query(cell_of).unwrap();
        assert!(out.contains(&0x201));
    }

    #[test]
    fn dropped_point_forces_fail() {
        let mut sc = SparseCells::new(16, 8, 4, 0.05, None, 5);
        let points: Vec<PointKey> = (0..5).map(|i| (i as u128) << 8 | 3).collect();
        for &p in &points {
            sc.update(p, cell_of(p), StreamOp::Insert);
        }
        let counts = sc.cell_counts.retrieve().unwrap();
        let full = sc.query(cell_of).unwrap();
        let mut dropped = full.clone();
        dropped.remove(&points[2]);
        assert!(verify_recovery(&counts, &full, 4, &cell_of).is_ok());
        assert_eq!(verify_recovery(&counts, &dropped, 4, &cell_of), Err(SketchFail));
    }

    #[test]
    fn insert_delete_restores_state() {
        let mut sc = SparseCells::new(16, 8, 4, 0.05, None, 6);
        let before = sc.snapshot();
        sc.update(0xabc, cell_of(0xabc), StreamOp::Insert);
        assert_ne!(sc.snapshot(), before);
        sc.update(0xabc, cell_of(0xabc), StreamOp::Delete);
        assert_eq!(sc.snapshot(), before);
        assert_eq!(sc.live(), 0);
    }

    #[test]
    fn random_instances_accurate_against_reference() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut fails = 0;
        for seed in 0..200u64 {
            let mut sc = SparseCells::new(16, 32, 4, 0.05, None, seed);
            let mut reference: BTreeSet<PointKey> = BTreeSet::new();
            let n_cells = rng.gen_range(1..20u32);
            for c in 0..n_cells {
                let load = rng.gen_range(1..6u32);
                for _ in 0..load {
                    let p = ((c as u128) << 8) | rng.gen_range(0..256u32) as u128;
                    if reference.insert(p) {
                        sc.update(p, cell_of(p), StreamOp::Insert);
                    }
                }
            }
            match sc.query(cell_of) {
                Ok(out) => {
                    for &p in &out {
                        assert!(reference.contains(&p), "fabricated point");
                    }
                    // beta = 4: cells with at most 4 points are complete.
                    let mut per_cell: BTreeMap<CellKey, Vec<PointKey>> = BTreeMap::new();
                    for &p in &reference {
                        per_cell.entry(cell_of(p)).or_default().push(p);
                    }
                    for (_, points) in per_cell {
                        if points.len() <= 4 {
                            for p in points {
                                assert!(out.contains(&p), "missing sub-beta point");
                            }
                        }
                    }
                }
                Err(SketchFail) => fails += 1,
            }
        }
        assert!(fails <= 20, "{fails}/200 trials failed");
    }
}
