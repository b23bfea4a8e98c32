//! K-Set turnstile sketch: stores a dynamically updated multiset over a
//! keyed universe and, at query time, either returns the exact multiset
//! with frequencies or `Fail`. Soundness is absolute: a non-`Fail` answer
//! always equals the true net multiset.
//!
//! Internally this is an iterative peeling structure: each of `r` rows
//! hashes every key into one of `2K` buckets, and a bucket accumulates the
//! count, the key sum (split into 64-bit halves summed exactly), and a
//! fingerprint sum. A bucket holding a single distinct key is detected by
//! divisibility plus a fingerprint check, peeled everywhere, and the
//! process repeats; retrieval fails if peeling stalls with nonzero buckets.
//!
//! Rows are stored sparsely, so an instance's footprint follows its live
//! content and is capped by the bucket range. Insert-then-delete of the
//! same key restores the exact empty state.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::hashing::{mix128, subseed};
use crate::model::StreamOp;

/// Retrieval failure: overload or unlucky hashing. Callers treat this per
/// their own protocol (the guess ladder advances to the next guess).
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("sketch retrieval failed")]
pub struct SketchFail;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Bucket {
    count: i64,
    lo: i128,
    hi: i128,
    fp: i128,
}

impl Bucket {
    fn is_zero(&self) -> bool {
        self.count == 0 && self.lo == 0 && self.hi == 0 && self.fp == 0
    }

    fn apply(&mut self, key: u128, fp: u64, sign: i64) {
        self.count += sign;
        self.lo += sign as i128 * (key as u64) as i128;
        self.hi += sign as i128 * ((key >> 64) as u64) as i128;
        self.fp += sign as i128 * fp as i128;
    }

    fn remove_all(&mut self, key: u128, fp: u64, count: i64) {
        self.count -= count;
        self.lo -= count as i128 * (key as u64) as i128;
        self.hi -= count as i128 * ((key >> 64) as u64) as i128;
        self.fp -= count as i128 * fp as i128;
    }

    /// If the bucket verifiably holds `count` copies of a single key,
    /// returns `(key, count)`.
    fn as_singleton(&self, fp_seed: u64) -> Option<(u128, i64)> {
        if self.count <= 0 {
            return None;
        }
        let c = self.count as i128;
        if self.lo % c != 0 || self.hi % c != 0 {
            return None;
        }
        let lo = self.lo / c;
        let hi = self.hi / c;
        if !(0..=u64::MAX as i128).contains(&lo) || !(0..=u64::MAX as i128).contains(&hi) {
            return None;
        }
        let key = (hi as u128) << 64 | lo as u128;
        if self.fp == c * fingerprint(fp_seed, key) as i128 {
            Some((key, self.count))
        } else {
            None
        }
    }
}

#[inline]
fn fingerprint(fp_seed: u64, key: u128) -> u64 {
    mix128(fp_seed, key)
}

/// Linear turnstile sketch with exact retrieval up to its capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct KSet {
    capacity: usize,
    buckets_per_row: u32,
    fail_delta: f64,
    fp_seed: u64,
    row_seeds: Vec<u64>,
    rows: Vec<HashMap<u32, Bucket>>,
}

impl KSet {
    /// Builds a sketch with capacity `capacity` distinct keys and failure
    /// probability target `fail_delta`, seeded deterministically.
    pub fn new(capacity: usize, fail_delta: f64, seed: u64) -> Self {
        let capacity = capacity.max(1);
        let rows = row_count(capacity, fail_delta);
        KSet {
            capacity,
            buckets_per_row: (2 * capacity).max(2) as u32,
            fail_delta,
            fp_seed: subseed(seed, "kset-fp", &[]),
            row_seeds: (0..rows).map(|r| subseed(seed, "kset-row", &[r as u64])).collect(),
            rows: vec![HashMap::new(); rows],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// True when every bucket is zero (the state of an empty multiset).
    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|r| r.is_empty())
    }

    /// Number of touched buckets across all rows.
    pub fn touched_buckets(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    #[inline]
    fn bucket_index(&self, row: usize, key: u128) -> u32 {
        (mix128(self.row_seeds[row], key) % self.buckets_per_row as u64) as u32
    }

    /// Applies one multiset update.
    pub fn update(&mut self, key: u128, op: StreamOp) {
        let sign = match op {
            StreamOp::Insert => 1,
            StreamOp::Delete => -1,
        };
        let fp = fingerprint(self.fp_seed, key);
        for row in 0..self.rows.len() {
            let idx = self.bucket_index(row, key);
            let bucket = self.rows[row].entry(idx).or_default();
            bucket.apply(key, fp, sign);
            if bucket.is_zero() {
                self.rows[row].remove(&idx);
            }
        }
    }

    /// Returns the exact net multiset, or `Fail` if peeling stalls. Never
    /// returns a wrong multiset (up to the 64-bit fingerprint guarantee).
    pub fn retrieve(&self) -> Result<BTreeMap<u128, i64>, SketchFail> {
        let mut rows = self.rows.clone();
        let mut out = BTreeMap::new();
        let mut queue: Vec<(usize, u32)> = rows
            .iter()
            .enumerate()
            .flat_map(|(r, m)| m.keys().map(move |&idx| (r, idx)))
            .collect();
        while let Some((row, idx)) = queue.pop() {
            let Some(bucket) = rows[row].get(&idx) else { continue };
            let Some((key, count)) = bucket.as_singleton(self.fp_seed) else { continue };
            let fp = fingerprint(self.fp_seed, key);
            for r in 0..rows.len() {
                let i = self.bucket_index(r, key);
                if let Some(b) = rows[r].get_mut(&i) {
                    b.remove_all(key, fp, count);
                    if b.is_zero() {
                        rows[r].remove(&i);
                    } else {
                        queue.push((r, i));
                    }
                }
            }
            let prior = out.insert(key, count);
            debug_assert!(prior.is_none(), "key peeled twice");
        }
        if rows.iter().all(|r| r.is_empty()) {
            Ok(out)
        } else {
            Err(SketchFail)
        }
    }

    /// Canonical binary snapshot: sizing, seeds, and sorted bucket entries.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(1u8);
        out.extend((self.capacity as u64).to_le_bytes());
        out.extend(self.buckets_per_row.to_le_bytes());
        out.extend(self.fail_delta.to_le_bytes());
        out.extend(self.fp_seed.to_le_bytes());
        out.extend((self.row_seeds.len() as u64).to_le_bytes());
        for &s in &self.row_seeds {
            out.extend(s.to_le_bytes());
        }
        for row in &self.rows {
            let mut entries: Vec<(&u32, &Bucket)> = row.iter().collect();
            entries.sort_by_key(|(idx, _)| **idx);
            out.extend((entries.len() as u64).to_le_bytes());
            for (idx, b) in entries {
                out.extend(idx.to_le_bytes());
                out.extend(b.count.to_le_bytes());
                out.extend(b.lo.to_le_bytes());
                out.extend(b.hi.to_le_bytes());
                out.extend(b.fp.to_le_bytes());
            }
        }
        out
    }

    /// Restores a sketch from [`snapshot`](Self::snapshot) bytes.
    pub fn restore(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader { data: bytes, pos: 0 };
        if r.u8()? != 1 {
            return None;
        }
        let capacity = r.u64()? as usize;
        let buckets_per_row = r.u32()?;
        let fail_delta = f64::from_le_bytes(r.take(8)?.try_into().ok()?);
        let fp_seed = r.u64()?;
        let n_rows = r.u64()? as usize;
        let mut row_seeds = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            row_seeds.push(r.u64()?);
        }
        let mut rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let n = r.u64()? as usize;
            let mut m = HashMap::with_capacity(n);
            for _ in 0..n {
                let idx = r.u32()?;
                let count = i64::from_le_bytes(r.take(8)?.try_into().ok()?);
                let lo = i128::from_le_bytes(r.take(16)?.try_into().ok()?);
                let hi = i128::from_le_bytes(r.take(16)?.try_into().ok()?);
                let fp = i128::from_le_bytes(r.take(16)?.try_into().ok()?);
                m.insert(idx, Bucket { count, lo, hi, fp });
            }
            rows.push(m);
        }
        if r.pos != bytes.len() {
            return None;
        }
        Some(KSet { capacity, buckets_per_row, fail_delta, fp_seed, row_seeds, rows })
    }
}

fn row_count(capacity: usize, fail_delta: f64) -> usize {
    let target = (capacity as f64 / fail_delta.max(1e-12)).ln() / 3.0;
    (target.ceil() as usize).clamp(4, 16)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        if end > self.data.len() {
            return None;
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        Some(self.take(1)?[0])
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    #[test]
    fn insert_delete_cancels() {
        let mut s = KSet::new(8, 0.01, 1);
        s.update(10, StreamOp::Insert);
        s.update(11, StreamOp::Insert);
        s.update(10, StreamOp::Delete);
        let m = s.retrieve().unwrap();
        assert_eq!(m, BTreeMap::from([(11u128, 1i64)]));
    }

    #[test]
    fn multiplicity_counts() {
        let mut s = KSet::new(8, 0.01, 2);
        for _ in 0..3 {
            s.update(42, StreamOp::Insert);
        }
        assert_eq!(s.retrieve().unwrap(), BTreeMap::from([(42u128, 3i64)]));
    }

    #[test]
    fn empty_retrieves_empty() {
        let s = KSet::new(8, 0.01, 3);
        assert!(s.retrieve().unwrap().is_empty());
        assert!(s.is_empty());
    }

    #[test]
    fn churn_leaves_exact_survivors() {
        // Interleave random insert/delete pairs with five surviving keys and
        // compare against a reference multiset maintained alongside.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut s = KSet::new(16, 0.01, 4);
        let mut reference: BTreeMap<u128, i64> = BTreeMap::new();
        let survivors: Vec<u128> = (0..5).map(|i| 1_000_000 + i).collect();
        for &k in &survivors {
            let copies = rng.gen_range(1..4);
            for _ in 0..copies {
                s.update(k, StreamOp::Insert);
                *reference.entry(k).or_default() += 1;
            }
        }
        for _ in 0..10_000 {
            let k = rng.gen_range(0..500u128);
            s.update(k, StreamOp::Insert);
            s.update(k, StreamOp::Delete);
        }
        assert_eq!(s.retrieve().unwrap(), reference);
    }

    #[test]
    fn within_capacity_retrieval_rate() {
        // K=8, five distinct survivors: exact retrieval in at least 99% of
        // 1000 seeded trials at fail_delta 0.01.
        let mut ok = 0;
        for seed in 0..1000u64 {
            let mut s = KSet::new(8, 0.01, seed);
            let mut reference = BTreeMap::new();
            for i in 0..5u128 {
                s.update(i * 7 + 1, StreamOp::Insert);
                reference.insert(i * 7 + 1, 1i64);
            }
            match s.retrieve() {
                Ok(m) => {
                    assert_eq!(m, reference, "seed {seed} returned a wrong multiset");
                    ok += 1;
                }
                Err(SketchFail) => {}
            }
        }
        assert!(ok >= 990, "only {ok}/1000 retrievals succeeded");
    }

    #[test]
    fn overload_mostly_fails_but_never_lies() {
        let mut fails = 0;
        for seed in 0..50u64 {
            let mut s = KSet::new(8, 0.01, seed);
            let mut reference = BTreeMap::new();
            for i in 0..80u128 {
                let key = i * 13 + 5;
                s.update(key, StreamOp::Insert);
                reference.insert(key, 1i64);
            }
            match s.retrieve() {
                Ok(m) => assert_eq!(m, reference, "non-Fail answer must be exact"),
                Err(SketchFail) => fails += 1,
            }
        }
        assert!(fails >= 40, "only {fails}/50 overloaded retrievals failed");
    }

    #[test]
    fn linearity_under_permutation() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let mut updates: Vec<(u128, StreamOp)> = Vec::new();
        for i in 0..40u128 {
            updates.push((i, StreamOp::Insert));
            if i % 3 == 0 {
                updates.push((i, StreamOp::Delete));
            }
        }
        let mut a = KSet::new(32, 0.01, 77);
        for &(k, op) in &updates {
            a.update(k, op);
        }
        updates.shuffle(&mut rng);
        let mut b = KSet::new(32, 0.01, 77);
        for &(k, op) in &updates {
            b.update(k, op);
        }
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn negative_net_counts_fail() {
        let mut s = KSet::new(8, 0.01, 6);
        s.update(5, StreamOp::Delete);
        assert_eq!(s.retrieve(), Err(SketchFail));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = KSet::new(16, 0.05, 123);
        for i in 0..20u128 {
            s.update(i << 64 | 3, StreamOp::Insert);
        }
        let bytes = s.snapshot();
        let restored = KSet::restore(&bytes).unwrap();
        assert_eq!(s, restored);
        assert_eq!(restored.retrieve().unwrap().len(), 20);
    }

    #[test]
    fn wide_keys_round_trip() {
        let mut s = KSet::new(8, 0.01, 8);
        let key = u128::MAX - 12345;
        s.update(key, StreamOp::Insert);
        s.update(key, StreamOp::Insert);
        assert_eq!(s.retrieve().unwrap(), BTreeMap::from([(key, 2i64)]));
    }
}
