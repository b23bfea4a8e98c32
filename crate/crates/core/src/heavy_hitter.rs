//! l2 heavy-hitters sketch over a keyed universe in turnstile streams.
//!
//! The estimator is a count-sketch: each row hashes a key to a signed
//! counter, and the estimate is the median over rows. Candidate keys are
//! enumerated from an attached tracker of net-touched keys (exact at desk
//! scale; the cluster-preserving constructions that avoid it are out of
//! scope), so `top(m)` is a deterministic function of sketch state.
//!
//! Rows switch from sparse maps to dense arrays once a quarter of the
//! bucket range is touched; the canonical snapshot lists nonzero buckets in
//! sorted order, so observable state is representation-independent.

use std::collections::HashMap;

use crate::hashing::{mix128, subseed};
use crate::model::StreamOp;

#[derive(Debug, Clone)]
enum Row {
    Sparse(HashMap<u32, i64>),
    Dense(Vec<i64>),
}

impl Row {
    fn add(&mut self, idx: u32, delta: i64, buckets: u32) {
        match self {
            Row::Sparse(map) => {
                let e = map.entry(idx).or_insert(0);
                *e += delta;
                if *e == 0 {
                    map.remove(&idx);
                }
                if map.len() as u32 * 4 >= buckets {
                    let mut dense = vec![0i64; buckets as usize];
                    for (&i, &v) in map.iter() {
                        dense[i as usize] = v;
                    }
                    *self = Row::Dense(dense);
                }
            }
            Row::Dense(v) => v[idx as usize] += delta,
        }
    }

    fn get(&self, idx: u32) -> i64 {
        match self {
            Row::Sparse(map) => map.get(&idx).copied().unwrap_or(0),
            Row::Dense(v) => v[idx as usize],
        }
    }

    fn nonzero_sorted(&self) -> Vec<(u32, i64)> {
        let mut out: Vec<(u32, i64)> = match self {
            Row::Sparse(map) => map.iter().map(|(&i, &v)| (i, v)).collect(),
            Row::Dense(v) => v
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0)
                .map(|(i, &x)| (i as u32, x))
                .collect(),
        };
        out.retain(|&(_, v)| v != 0);
        out.sort_by_key(|&(i, _)| i);
        out
    }
}

/// Count-sketch with a net-touched-key tracker for candidate enumeration.
#[derive(Debug, Clone)]
pub struct HeavyHitterSketch {
    head: usize,
    accuracy: f64,
    fail_delta: f64,
    buckets: u32,
    row_seeds: Vec<u64>,
    rows: Vec<Row>,
    tracker: HashMap<u128, i64>,
}

impl HeavyHitterSketch {
    /// `universe` is the key-universe size (only its logarithm matters),
    /// `head` the top-key parameter k', `accuracy` the tail-relative
    /// estimation accuracy, `fail_delta` the failure probability target.
    pub fn new(universe: f64, head: usize, accuracy: f64, fail_delta: f64, seed: u64) -> Self {
        let head = head.max(1);
        let rows = row_count(universe, fail_delta);
        let buckets = bucket_count(head, accuracy);
        HeavyHitterSketch {
            head,
            accuracy,
            fail_delta,
            buckets,
            row_seeds: (0..rows).map(|r| subseed(seed, "hh-row", &[r as u64])).collect(),
            rows: vec![Row::Sparse(HashMap::new()); rows],
            tracker: HashMap::new(),
        }
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Number of distinct keys with nonzero net count.
    pub fn tracked_keys(&self) -> usize {
        self.tracker.len()
    }

    #[inline]
    fn slot(&self, row: usize, key: u128) -> (u32, i64) {
        let h = mix128(self.row_seeds[row], key);
        let idx = ((h >> 1) & (self.buckets as u64 - 1)) as u32;
        let sign = 1 - 2 * (h & 1) as i64;
        (idx, sign)
    }

    pub fn update(&mut self, key: u128, op: StreamOp) {
        let delta = match op {
            StreamOp::Insert => 1i64,
            StreamOp::Delete => -1,
        };
        for row in 0..self.rows.len() {
            let (idx, sign) = self.slot(row, key);
            let buckets = self.buckets;
            self.rows[row].add(idx, sign * delta, buckets);
        }
        let e = self.tracker.entry(key).or_insert(0);
        *e += delta;
        if *e == 0 {
            self.tracker.remove(&key);
        }
    }

    /// Median-of-rows frequency estimate for one key.
    pub fn estimate(&self, key: u128) -> i64 {
        let mut vals: Vec<i64> = (0..self.rows.len())
            .map(|row| {
                let (idx, sign) = self.slot(row, key);
                sign * self.rows[row].get(idx)
            })
            .collect();
        vals.sort_unstable();
        vals[vals.len() / 2]
    }

    /// All candidate keys with their estimates, ordered by estimate
    /// descending with ties broken by ascending key.
    pub fn query(&self) -> Vec<(u128, i64)> {
        let mut out: Vec<(u128, i64)> =
            self.tracker.keys().map(|&k| (k, self.estimate(k))).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// The `m` candidates with largest estimates.
    pub fn top(&self, m: usize) -> Vec<(u128, i64)> {
        let mut all = self.query();
        all.truncate(m);
        all
    }

    /// Canonical binary snapshot.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(1u8);
        out.extend((self.head as u64).to_le_bytes());
        out.extend(self.accuracy.to_le_bytes());
        out.extend(self.fail_delta.to_le_bytes());
        out.extend(self.buckets.to_le_bytes());
        out.extend((self.row_seeds.len() as u64).to_le_bytes());
        for &s in &self.row_seeds {
            out.extend(s.to_le_bytes());
        }
        for row in &self.rows {
            let entries = row.nonzero_sorted();
            out.extend((entries.len() as u64).to_le_bytes());
            for (idx, v) in entries {
                out.extend(idx.to_le_bytes());
                out.extend(v.to_le_bytes());
            }
        }
        let mut tracked: Vec<(&u128, &i64)> = self.tracker.iter().collect();
        tracked.sort();
        out.extend((tracked.len() as u64).to_le_bytes());
        for (k, v) in tracked {
            out.extend(k.to_le_bytes());
            out.extend(v.to_le_bytes());
        }
        out
    }
}

fn row_count(universe: f64, fail_delta: f64) -> usize {
    let target = 2.0 * (universe.max(2.0) / fail_delta.max(1e-12)).ln();
    let r = (target.ceil() as usize).clamp(5, 41);
    r | 1
}

fn bucket_count(head: usize, accuracy: f64) -> u32 {
    let want = 6.0 * (head as f64 + 1.0 / (accuracy * accuracy));
    let capped = want.min(1u32.wrapping_shl(21) as f64).max(16.0) as u32;
    capped.next_power_of_two()
}
