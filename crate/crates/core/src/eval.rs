//! Ground-truth machinery: exact and approximate k-median solvers, the
//! bi-criterion seed for the offline construction, coreset verification,
//! and the shifted-grid statistical checker.
//!
//! The exact solver is the single source of truth for OPT; every quality
//! claim in the repository is tested against it on guard-feasible
//! instances.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::coreset_general::{cells_near, cost_points, Coreset};
use crate::grid::GridSystem;
use crate::hashing::{rng_for, subseed};
use crate::model::{distance_pos, distance_to_positions, Point};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("instance exceeds the enumeration guard: {candidates:.3e} candidate sets")]
    TooLarge { candidates: f64 },
    #[error("solver requires non-negative weights")]
    NegativeWeights,
}

const ENUMERATION_GUARD: f64 = 1e7;

/// All grid points of `[1, delta]^d` in lexicographic order.
pub fn grid_points(delta: u64, d: usize) -> Vec<Point> {
    let mut out: Vec<Vec<u64>> = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::with_capacity(out.len() * delta as usize);
        for prefix in &out {
            for c in 1..=delta {
                let mut p = prefix.clone();
                p.push(c);
                next.push(p);
            }
        }
        out = next;
    }
    out.into_iter().map(Point::from_coords).collect()
}

fn binomial(n: f64, k: usize) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v *= (n - i as f64) / (i as f64 + 1.0);
    }
    v
}

/// Iterates all k-element index combinations of `0..n`.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations { n, idx: (0..k).collect(), done: k > n || k == 0 }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let current = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - (k - i) {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(current)
    }
}

/// Exhaustive k-median: the optimal k-subset of the full grid and its cost.
pub fn exact_kmedian(
    points: &[Point],
    k: usize,
    delta: u64,
    d: usize,
) -> Result<(Vec<Point>, f64), EvalError> {
    let n_candidates = (delta as f64).powi(d as i32);
    let combos = binomial(n_candidates, k);
    if !(combos <= ENUMERATION_GUARD) {
        return Err(EvalError::TooLarge { candidates: combos });
    }
    let candidates = grid_points(delta, d);
    // Distance matrix: per candidate, distance to every input point.
    let dist: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| {
            let cp = c.position();
            points.iter().map(|p| distance_pos(&p.position(), &cp)).collect()
        })
        .collect();
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<usize> = Vec::new();
    for combo in Combinations::new(candidates.len(), k) {
        let mut cost = 0.0;
        for pi in 0..points.len() {
            let mut m = f64::INFINITY;
            for &ci in &combo {
                let v = dist[ci][pi];
                if v < m {
                    m = v;
                }
            }
            cost += m;
            if cost >= best_cost {
                break;
            }
        }
        if cost < best_cost {
            best_cost = cost;
            best = combo;
        }
    }
    Ok((best.into_iter().map(|i| candidates[i].clone()).collect(), best_cost))
}

fn farthest_point_seed(positions: &[Vec<f64>], weights: &[f64], count: usize) -> Vec<usize> {
    let start = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = positions.iter().map(|p| distance_pos(p, &positions[start])).collect();
    while chosen.len() < count.min(positions.len()) {
        let next = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if dist[next] == 0.0 {
            break;
        }
        chosen.push(next);
        for (i, p) in positions.iter().enumerate() {
            let v = distance_pos(p, &positions[next]);
            if v < dist[i] {
                dist[i] = v;
            }
        }
    }
    chosen
}

fn weighted_cost_to(centers: &[usize], dist: &[Vec<f64>], weights: &[f64]) -> f64 {
    (0..weights.len())
        .map(|j| {
            let m = centers.iter().map(|&c| dist[c][j]).fold(f64::INFINITY, f64::min);
            weights[j] * m
        })
        .sum()
}

/// Single-swap local search over candidate positions; the cost never
/// increases and the search stops once no swap improves it by more than
/// 1e-9 relative.
fn local_search(positions: &[Vec<f64>], weights: &[f64], k: usize) -> Vec<usize> {
    let n = positions.len();
    let k = k.min(n);
    // dist[c][j]: candidate c to point j (candidates are the support).
    let dist: Vec<Vec<f64>> = positions
        .iter()
        .map(|c| positions.iter().map(|p| distance_pos(p, c)).collect())
        .collect();
    let mut centers = farthest_point_seed(positions, weights, k);
    let mut cost = weighted_cost_to(&centers, &dist, weights);
    loop {
        let mut best_swap: Option<(usize, usize, f64)> = None;
        for slot in 0..centers.len() {
            for cand in 0..n {
                if centers.contains(&cand) {
                    continue;
                }
                let old = centers[slot];
                centers[slot] = cand;
                let c = weighted_cost_to(&centers, &dist, weights);
                centers[slot] = old;
                if c < cost && best_swap.map(|(_, _, bc)| c < bc).unwrap_or(true) {
                    best_swap = Some((slot, cand, c));
                }
            }
        }
        match best_swap {
            Some((slot, cand, c)) if cost - c > 1e-9 * cost.max(1e-300) => {
                centers[slot] = cand;
                cost = c;
            }
            _ => break,
        }
    }
    centers
}

/// Local-search k-median over a non-negative-weight coreset; candidate
/// centers are drawn from the coreset support.
pub fn weighted_local_search(coreset: &Coreset, k: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    if coreset.entries.iter().any(|e| e.weight_f64() < 0.0) {
        return Err(EvalError::NegativeWeights);
    }
    if coreset.entries.is_empty() {
        return Ok(Vec::new());
    }
    let positions: Vec<Vec<f64>> = coreset.entries.iter().map(|e| e.position.clone()).collect();
    let weights: Vec<f64> = coreset.entries.iter().map(|e| e.weight_f64()).collect();
    let chosen = local_search(&positions, &weights, k);
    Ok(chosen.into_iter().map(|i| positions[i].clone()).collect())
}

/// A (10, 10)-style bi-criterion seed: at most `10k` centers, plus a cost
/// bound `o` taken from a k-center local-search solution so that
/// `OPT <= o` holds (clamped to at least one for the guess ladder).
pub fn bicriterion(points: &[Point], k: usize) -> (Vec<Vec<f64>>, f64) {
    assert!(!points.is_empty());
    let distinct: Vec<Vec<f64>> = {
        let set: BTreeSet<&Point> = points.iter().collect();
        set.into_iter().map(|p| p.position()).collect()
    };
    let weights = vec![1.0; distinct.len()];
    let centers = if distinct.len() <= 10 * k {
        distinct.clone()
    } else {
        let seed = farthest_point_seed(&distinct, &weights, 10 * k);
        seed.into_iter().map(|i| distinct[i].clone()).collect()
    };
    // Cost bound from a k-center solution on the distinct support; never
    // below OPT, and within the local-search ratio above it.
    let k_centers = local_search(&distinct, &weights, k);
    let k_positions: Vec<Vec<f64>> = k_centers.into_iter().map(|i| distinct[i].clone()).collect();
    let o = cost_points(points, &k_positions).max(1.0);
    (centers, o)
}

/// How candidate center sets are enumerated during verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    /// Every k-subset of the grid (guarded).
    Exhaustive,
    /// This many random k-subsets, plus the exact optimum when feasible
    /// and the bi-criterion centers.
    RandomZ(usize),
    /// For k = 1: an evenly spaced sub-grid of candidate centers with this
    /// many samples per dimension.
    GridScan(usize),
}

/// One verification record: a candidate center set and both costs.
#[derive(Debug, Clone, PartialEq)]
pub struct ZRecord {
    pub z_id: usize,
    pub cost_points: f64,
    pub cost_coreset: f64,
    pub rel_err: f64,
}

/// Verification result over a family of candidate center sets.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub records: Vec<ZRecord>,
    pub max_rel_err: f64,
    pub opt: Option<f64>,
    pub epsilon: f64,
    pub seed: u64,
    pub pass: bool,
}

impl VerificationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        out.push_str("z_id,cost_P,cost_S,rel_err\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.z_id, r.cost_points, r.cost_coreset, r.rel_err
            ));
        }
        out.push_str(&format!("summary,,,{}\n", self.max_rel_err));
        out
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else if a == 0.0 {
        f64::INFINITY
    } else {
        (a - b).abs() / a
    }
}

/// Compares coreset cost against exact cost over candidate center sets
/// chosen per `mode`; passes when the maximum relative error is at most
/// `epsilon`.
pub fn verify_coreset(
    points: &[Point],
    coreset: &Coreset,
    k: usize,
    epsilon: f64,
    mode: VerifyMode,
    seed: u64,
) -> Result<VerificationReport, EvalError> {
    let delta = coreset.delta;
    let d = coreset.d;
    let mut families: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut opt = None;
    match mode {
        VerifyMode::Exhaustive => {
            let combos = binomial((delta as f64).powi(d as i32), k);
            if !(combos <= ENUMERATION_GUARD) {
                return Err(EvalError::TooLarge { candidates: combos });
            }
            let candidates = grid_points(delta, d);
            for combo in Combinations::new(candidates.len(), k) {
                families.push(combo.iter().map(|&i| candidates[i].position()).collect());
            }
        }
        VerifyMode::RandomZ(n) => {
            let mut rng = rng_for(subseed(seed, "verify-z", &[]));
            let candidates = grid_points(delta, d);
            for _ in 0..n {
                let mut picked: Vec<Vec<f64>> = Vec::with_capacity(k);
                let mut chosen = BTreeSet::new();
                while chosen.len() < k.min(candidates.len()) {
                    chosen.insert(rng.gen_range(0..candidates.len()));
                }
                for i in chosen {
                    picked.push(candidates[i].position());
                }
                families.push(picked);
            }
            if let Ok((z_star, o)) = exact_kmedian(points, k, delta, d) {
                opt = Some(o);
                families.push(z_star.iter().map(|p| p.position()).collect());
            }
            if !points.is_empty() {
                let (z_prime, _) = bicriterion(points, k);
                families.push(z_prime);
            }
        }
        VerifyMode::GridScan(res) => {
            assert_eq!(k, 1, "grid scan verification is a k = 1 surface");
            let res = res.max(2);
            let mut axis = Vec::with_capacity(res);
            for i in 0..res {
                let x = 1.0 + (delta as f64 - 1.0) * i as f64 / (res as f64 - 1.0);
                axis.push(x.round().clamp(1.0, delta as f64));
            }
            axis.dedup();
            let mut centers: Vec<Vec<f64>> = vec![vec![]];
            for _ in 0..d {
                let mut next = Vec::with_capacity(centers.len() * axis.len());
                for prefix in &centers {
                    for &x in &axis {
                        let mut c = prefix.clone();
                        c.push(x);
                        next.push(c);
                    }
                }
                centers = next;
            }
            families = centers.into_iter().map(|c| vec![c]).collect();
        }
    }
    let positions: Vec<Vec<f64>> = points.iter().map(|p| p.position()).collect();
    let mut records = Vec::with_capacity(families.len());
    let mut max_err: f64 = 0.0;
    for (z_id, z) in families.iter().enumerate() {
        let cp: f64 = positions.iter().map(|p| distance_to_positions(p, z)).sum();
        let cs = coreset.cost(z);
        let e = rel_err(cp, cs);
        max_err = max_err.max(e);
        records.push(ZRecord { z_id, cost_points: cp, cost_coreset: cs, rel_err: e });
    }
    Ok(VerificationReport {
        records,
        max_rel_err: max_err,
        opt,
        epsilon,
        seed,
        pass: max_err <= epsilon,
    })
}

/// Number of level-`level` cells within the near threshold
/// `delta / (2^{level+1} d)` of any center.
pub fn count_near_cells(grid: &GridSystem, centers: &[Vec<f64>], level: i32) -> usize {
    let threshold = grid.delta() as f64 / (2f64.powi(level + 1) * grid.d() as f64);
    cells_near(grid, centers, level, threshold).len()
}

/// Per-level empirical statistics of the near-cell count over random
/// shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: i32,
    pub mean: f64,
    pub std_err: f64,
    /// `e * |Z|`, the expectation bound.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma22Report {
    pub trials: usize,
    pub levels: Vec<LevelStats>,
    pub pass: bool,
}

impl Lemma22Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,mean,std_err,bound,pass\n");
        for l in &self.levels {
            out.push_str(&format!("{},{},{},{},{}\n", l.level, l.mean, l.std_err, l.bound, l.pass));
        }
        out
    }
}

/// Monte-Carlo check of the near-cell expectation bound: over independent
/// random shifts, the per-level mean count of cells within the near
/// threshold of `centers` stays below `e |Z|` plus three standard errors.
pub fn lemma22_check(
    d: usize,
    delta: u64,
    centers: &[Point],
    trials: usize,
    seed: u64,
) -> Lemma22Report {
    assert!(trials >= 100, "need at least 100 trials for stable statistics");
    let (delta, levels) = crate::model::derive_levels(delta);
    let positions: Vec<Vec<f64>> = centers.iter().map(|p| p.position()).collect();
    let mut rng = rng_for(subseed(seed, "lemma22", &[]));
    let mut counts: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); levels as usize + 1];
    for _ in 0..trials {
        let shift: Vec<u64> = (0..d).map(|_| rng.gen_range(0..delta)).collect();
        let grid = GridSystem::with_shift(d, delta, shift);
        for level in 0..=levels as i32 {
            counts[level as usize].push(count_near_cells(&grid, &positions, level) as f64);
        }
    }
    let bound = std::f64::consts::E * centers.len() as f64;
    let mut stats = Vec::new();
    let mut all_pass = true;
    for (level, samples) in counts.iter().enumerate() {
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (samples.len() as f64 - 1.0).max(1.0);
        let std_err = (var / samples.len() as f64).sqrt();
        let pass = mean <= bound + 3.0 * std_err;
        all_pass &= pass;
        stats.push(LevelStats { level: level as i32, mean, std_err, bound, pass });
    }
    Lemma22Report { trials, levels: stats, pass: all_pass }
}

/// Uniformly random distinct k centers, for statistical harnesses.
pub fn random_centers(d: usize, delta: u64, k: usize, rng: &mut impl Rng) -> Vec<Point> {
    let mut out: BTreeSet<Vec<u64>> = BTreeSet::new();
    while out.len() < k {
        out.insert((0..d).map(|_| rng.gen_range(1..=delta)).collect());
    }
    let mut v: Vec<Point> = out.into_iter().map(Point::from_coords).collect();
    v.shuffle(rng);
    v
}
