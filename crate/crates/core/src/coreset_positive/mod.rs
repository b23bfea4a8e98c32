//! The non-negative-weight pipeline: heavy-cell identification, ending
//! levels, the cut-off telescope construction, sparse-cell sample recovery,
//! and the weight rectification pass that removes every negative weight
//! while conserving total weight exactly.

pub mod sparse_cells;

use std::collections::{BTreeMap, BTreeSet};

use num::{BigRational, FromPrimitive, Signed, Zero};
use rayon::prelude::*;
use thiserror::Error;

use crate::coreset_general::{
    count_over_pi, rational, Coreset, CoresetEntry, GuessFailure, Provenance, QueryError,
    QueryOutcome, Weight,
};
use crate::grid::{CellId, CellKey, GridSystem, PointKey};
use crate::hashing::{pi_positive, sample_bit, subseed, GuessLadder, SampleHash};
use crate::heavy_hitter::HeavyHitterSketch;
use crate::model::{Params, Point, StreamOp, StreamUpdate};
use sparse_cells::SparseCells;

/// Per-level sets of heavy cells with their frequency estimates, laminar
/// down the tree. The root is always heavy; finest-level cells never are.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeavyScheme {
    d: usize,
    /// Index i holds the heavy cells of level i (estimates attached).
    levels: Vec<BTreeMap<CellKey, i64>>,
}

impl HeavyScheme {
    /// The trivial scheme: only the root is heavy.
    pub fn root_only(d: usize) -> Self {
        HeavyScheme { d, levels: Vec::new() }
    }

    pub fn from_levels(d: usize, levels: Vec<BTreeMap<CellKey, i64>>) -> Self {
        HeavyScheme { d, levels }
    }

    pub fn level(&self, level: i32) -> Option<&BTreeMap<CellKey, i64>> {
        if level < 0 {
            return None;
        }
        self.levels.get(level as usize)
    }

    pub fn is_heavy(&self, level: i32, key: CellKey) -> bool {
        if level == -1 {
            return true;
        }
        self.level(level).map(|m| m.contains_key(&key)).unwrap_or(false)
    }

    /// Count of heavy cells at each level 0..
    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|m| m.len()).collect()
    }

    /// The ending level of a point: the last level along its root-to-leaf
    /// cell path whose cell is heavy. Always in `[-1, L-1]`.
    pub fn ending_level(&self, grid: &GridSystem, p: &Point) -> i32 {
        let mut last = -1;
        for level in 0..self.levels.len() as i32 {
            let key = grid.pack_cell(&grid.cell_of(p, level).unwrap());
            if self.is_heavy(level, key) {
                last = level;
            } else {
                break;
            }
        }
        last
    }

    /// Structural invariants: laminarity (each heavy cell's parent heavy)
    /// and the per-level cardinality cap.
    pub fn check_invariants(&self, grid: &GridSystem, cap: usize) -> bool {
        for (level, cells) in self.levels.iter().enumerate() {
            if cells.len() > cap {
                return false;
            }
            for &key in cells.keys() {
                let cell = grid.unpack_cell(key);
                if cell.level != level as i32 {
                    return false;
                }
                if level > 0 {
                    let parent = grid.parent_of(&cell).unwrap();
                    if !self.is_heavy(level as i32 - 1, grid.pack_cell(&parent)) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Filters per-level top lists into a laminar heavy scheme: a cell is kept
/// only when its parent survived at the previous level. Finest-level cells
/// are never presented, so they are never heavy.
pub fn laminar_heavy_sets(
    grid: &GridSystem,
    tops: &[Vec<(CellKey, i64)>],
) -> Vec<BTreeMap<CellKey, i64>> {
    let mut out: Vec<BTreeMap<CellKey, i64>> = Vec::with_capacity(tops.len());
    for (level, top) in tops.iter().enumerate() {
        let mut kept = BTreeMap::new();
        for &(key, est) in top {
            let cell = grid.unpack_cell(key);
            debug_assert_eq!(cell.level, level as i32);
            let parent_ok = if level == 0 {
                true
            } else {
                let parent = grid.parent_of(&cell).unwrap();
                out[level - 1].contains_key(&grid.pack_cell(&parent))
            };
            if parent_ok {
                kept.insert(key, est);
            }
        }
        out.push(kept);
    }
    out
}

/// Sizes derived from the parameter bundle for the positive streaming
/// construction, with `constant_scale` applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveDerived {
    pub hh_head: usize,
    pub hh_accuracy: f64,
    pub hh_fail: f64,
    /// Heavy candidates taken per level at query time, capped by the
    /// lambda1 cardinality bound.
    pub top_m: usize,
    pub alpha: usize,
    pub beta: usize,
    pub sc_fail: f64,
    /// Per-bit K-Set capacity inside sparse-cell instances. The worst-case
    /// sizing (2 alpha U) provisions for up to U tags per cell; live loads
    /// at the chosen guess stay near alpha points, so the pipeline caps the
    /// range accordingly.
    pub sc_kset_capacity: usize,
}

impl PositiveDerived {
    pub fn new(params: &Params) -> Self {
        let cs = params.constant_scale;
        let l = params.levels.max(1) as f64;
        let d = params.d as f64;
        let k = params.k as f64;
        let eps2 = params.epsilon * params.epsilon;
        let log_klrho = (k * l / params.rho).ln().max(0.0);
        let alpha = d.powi(3) * l.powi(4) * k / eps2 * (d + log_klrho / params.rho);
        let beta = d.powi(3) * l * l / eps2
            * (params.rho * d + log_klrho + params.rho / (k * l) * (l / params.rho).ln().max(0.0));
        let head = 10.0 * l * k / params.rho;
        let top = params.lambda.l8 * params.level_count() as f64 * k / params.rho;
        let top_cap = (params.lambda.l1 * k * l / params.rho).floor() as usize;
        let alpha_s = ((cs * alpha).ceil() as usize).max(8);
        PositiveDerived {
            hh_head: ((cs * head).ceil() as usize).max(1),
            hh_accuracy: params.epsilon
                * (params.rho / (params.lambda.l7 * k * d.powi(3) * l.powi(3))).sqrt()
                / cs.sqrt(),
            hh_fail: params.rho / l,
            top_m: ((cs * top).ceil() as usize).clamp(1, top_cap.max(1)),
            alpha: alpha_s,
            beta: ((cs * beta).ceil() as usize).max(1),
            sc_fail: params.rho / (d * l),
            sc_kset_capacity: (4 * alpha_s).max(64),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RectifyError {
    /// A cell's deficit exceeded its descendants' adjustable mass; signals
    /// violated estimation-error preconditions rather than being silently
    /// clamped away.
    #[error("rectification infeasible at cell level {level}")]
    Infeasible { level: i32 },
}

/// One sampled point carried through assembly and rectification.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    pub point_key: PointKey,
    pub position: Vec<f64>,
    pub ending_level: i32,
    pub weight: Weight,
}

/// The positive construction just before rectification: heavy-cell values
/// and sampled points grouped by the heavy cell that ends their telescope
/// path.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveAssembly {
    /// Heavy cells with their estimated values (the root carries the exact
    /// live count).
    pub values: BTreeMap<CellId, Weight>,
    /// Sampled points grouped by ending cell.
    pub samples: BTreeMap<CellId, Vec<SampleEntry>>,
    max_level: i32,
}

impl PositiveAssembly {
    pub fn new(
        values: BTreeMap<CellId, Weight>,
        samples: BTreeMap<CellId, Vec<SampleEntry>>,
        max_level: i32,
    ) -> Self {
        PositiveAssembly { values, samples, max_level }
    }

    fn heavy_children(&self, cell: &CellId, grid: &GridSystem) -> Vec<CellId> {
        self.values
            .keys()
            .filter(|c| {
                !c.is_root() && c.level == cell.level + 1 && &grid.parent_of(c).unwrap() == cell
            })
            .cloned()
            .collect()
    }

    /// Weight of one heavy cell: its value minus heavy children values
    /// minus the weights of samples ending at it.
    pub fn weight_of(&self, cell: &CellId, grid: &GridSystem) -> Weight {
        let mut w = self.values.get(cell).cloned().unwrap_or_else(Weight::zero);
        for child in self.heavy_children(cell, grid) {
            w -= self.values.get(&child).unwrap().clone();
        }
        if let Some(samples) = self.samples.get(cell) {
            for s in samples {
                w -= s.weight.clone();
            }
        }
        w
    }

    /// Rectifies negative weights top-down: a cell in deficit draws the
    /// missing mass from its heavy children's values first (ascending
    /// packed key), then from its own samples (ascending point key), each
    /// clamped at zero. The drained cell ends at exactly zero, so the move
    /// conserves total weight.
    pub fn rectify(&mut self, grid: &GridSystem) -> Result<(), RectifyError> {
        for level in -1..=self.max_level {
            let cells: Vec<CellId> =
                self.values.keys().filter(|c| c.level == level).cloned().collect();
            for cell in cells {
                let w = self.weight_of(&cell, grid);
                if !w.is_negative() {
                    continue;
                }
                let mut need = -w;
                let mut children = self.heavy_children(&cell, grid);
                children.sort_by_key(|c| grid.pack_cell(c));
                for child in children {
                    if need.is_zero() {
                        break;
                    }
                    let value = self.values.get_mut(&child).unwrap();
                    if !value.is_positive() {
                        continue;
                    }
                    let take = if *value < need { value.clone() } else { need.clone() };
                    *value -= &take;
                    need -= take;
                }
                if !need.is_zero() {
                    if let Some(samples) = self.samples.get_mut(&cell) {
                        samples.sort_by_key(|s| s.point_key);
                        for s in samples {
                            if need.is_zero() {
                                break;
                            }
                            if !s.weight.is_positive() {
                                continue;
                            }
                            let take =
                                if s.weight < need { s.weight.clone() } else { need.clone() };
                            s.weight -= &take;
                            need -= take;
                        }
                    }
                }
                if !need.is_zero() {
                    return Err(RectifyError::Infeasible { level });
                }
                debug_assert!(self.weight_of(&cell, grid).is_zero());
            }
        }
        Ok(())
    }

    /// Emits the weighted entries: heavy-cell centers and sampled points,
    /// zero weights dropped.
    pub fn into_coreset(self, grid: &GridSystem, k: usize) -> Coreset {
        let mut entries = Vec::new();
        let mut total = Weight::zero();
        for cell in self.values.keys() {
            let w = self.weight_of(cell, grid);
            if w.is_zero() {
                continue;
            }
            total += &w;
            entries.push(CoresetEntry {
                position: grid.center_of(cell),
                weight: w,
                level: cell.level,
                provenance: Provenance::Cell(grid.pack_cell(cell)),
            });
        }
        for samples in self.samples.values() {
            for s in samples {
                if s.weight.is_zero() {
                    continue;
                }
                total += &s.weight;
                entries.push(CoresetEntry {
                    position: s.position.clone(),
                    weight: s.weight.clone(),
                    level: s.ending_level,
                    provenance: Provenance::Sample(s.point_key),
                });
            }
        }
        Coreset { d: grid.d(), delta: grid.delta(), k, entries, total_weight: total }
    }
}

/// Rectifies an assembly and emits the non-negative coreset.
pub fn rectify_weights(
    mut assembly: PositiveAssembly,
    grid: &GridSystem,
    k: usize,
) -> Result<Coreset, RectifyError> {
    assembly.rectify(grid)?;
    let coreset = assembly.into_coreset(grid, k);
    debug_assert!(coreset.entries.iter().all(|e| !e.weight.is_negative()));
    Ok(coreset)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PositiveQueryError {
    #[error(transparent)]
    Guesses(#[from] QueryError),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
}

struct PreparedUpdate {
    sign: i64,
    op: StreamOp,
    point_key: PointKey,
    cell_keys: Vec<CellKey>,
}

/// One-pass streaming state for the non-negative construction: per-level
/// heavy-hitter sketches for levels `0..L-1` plus one sparse-cells
/// instance per (guess, slot) pair, where slot `i` samples candidates for
/// ending level `i - 1`. Guesses whose sampling probability clamps to one
/// at a slot share a single exact instance for that slot.
pub struct PositiveStream {
    params: Params,
    grid: GridSystem,
    derived: PositiveDerived,
    ladder: GuessLadder,
    pis: Vec<Vec<f64>>,
    samplers: Vec<Vec<SampleHash>>,
    own_scs: Vec<Vec<Option<SparseCells>>>,
    exact_scs: Vec<SparseCells>,
    exact_used: Vec<bool>,
    hhs: Vec<HeavyHitterSketch>,
    live: i64,
}

impl PositiveStream {
    pub fn new(params: Params) -> Self {
        let grid = GridSystem::new(&params);
        let derived = PositiveDerived::new(&params);
        let ladder = GuessLadder::new(&params);
        let levels = params.levels as i32;
        let slots = levels + 1;
        let universe = 2f64.powi((params.d as u32 * params.levels) as i32 + 7);
        let point_bits = grid.point_key_bits();
        let mut pis = Vec::with_capacity(ladder.len());
        let mut samplers = Vec::with_capacity(ladder.len());
        let mut own_scs = Vec::with_capacity(ladder.len());
        let mut exact_used = vec![false; slots as usize];
        let new_sc = |seed: u64| {
            SparseCells::new(
                point_bits,
                derived.alpha,
                derived.beta,
                derived.sc_fail,
                Some(derived.sc_kset_capacity),
                seed,
            )
        };
        for o_idx in ladder.iter() {
            let o = ladder.value(o_idx);
            let mut slot_pis = Vec::new();
            let mut slot_samplers = Vec::new();
            let mut slot_scs = Vec::new();
            for slot in 0..slots {
                let pi = pi_positive(&params, slot, o);
                slot_samplers.push(SampleHash::new(params.seed, o_idx as u64, slot));
                if pi >= 1.0 {
                    exact_used[slot as usize] = true;
                    slot_scs.push(None);
                } else {
                    slot_scs.push(Some(new_sc(subseed(
                        params.seed,
                        "sc",
                        &[o_idx as u64, slot as u64],
                    ))));
                }
                slot_pis.push(pi);
            }
            pis.push(slot_pis);
            samplers.push(slot_samplers);
            own_scs.push(slot_scs);
        }
        let exact_scs = (0..slots)
            .map(|slot| new_sc(subseed(params.seed, "sc-exact", &[slot as u64])))
            .collect();
        let hhs = (0..levels)
            .map(|level| {
                HeavyHitterSketch::new(
                    universe,
                    derived.hh_head,
                    derived.hh_accuracy,
                    derived.hh_fail,
                    subseed(params.seed, "hh-pos", &[level as u64]),
                )
            })
            .collect();
        PositiveStream {
            params,
            grid,
            derived,
            ladder,
            pis,
            samplers,
            own_scs,
            exact_scs,
            exact_used,
            hhs,
            live: 0,
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn grid(&self) -> &GridSystem {
        &self.grid
    }

    pub fn derived(&self) -> &PositiveDerived {
        &self.derived
    }

    pub fn live(&self) -> i64 {
        self.live
    }

    pub fn hh(&self, level: i32) -> &HeavyHitterSketch {
        &self.hhs[level as usize]
    }

    /// Sampling probability for one (guess index, slot).
    pub fn pi(&self, o_idx: usize, slot: i32) -> f64 {
        self.pis[o_idx][slot as usize]
    }

    fn prepare(&self, u: &StreamUpdate) -> PreparedUpdate {
        let cell_keys = (0..=self.params.levels as i32)
            .map(|level| self.grid.pack_cell(&self.grid.cell_of(&u.point, level).unwrap()))
            .collect();
        PreparedUpdate {
            sign: match u.op {
                StreamOp::Insert => 1,
                StreamOp::Delete => -1,
            },
            op: u.op,
            point_key: self.grid.pack_point(&u.point),
            cell_keys,
        }
    }

    pub fn update(&mut self, u: &StreamUpdate) {
        self.ingest(std::slice::from_ref(u));
    }

    /// Applies a batch of updates; per-instance work runs in parallel with
    /// results identical to sequential application.
    pub fn ingest(&mut self, updates: &[StreamUpdate]) {
        let prepared: Vec<PreparedUpdate> = updates.iter().map(|u| self.prepare(u)).collect();
        self.live += prepared.iter().map(|p| p.sign).sum::<i64>();
        let pis = &self.pis;
        let samplers = &self.samplers;
        let exact_used = &self.exact_used;

        rayon::scope(|s| {
            for (level, hh) in self.hhs.iter_mut().enumerate() {
                let prepared = &prepared;
                s.spawn(move |_| {
                    for p in prepared {
                        hh.update(p.cell_keys[level], p.op);
                    }
                });
            }
            for (slot, sc) in self.exact_scs.iter_mut().enumerate() {
                if !exact_used[slot] {
                    continue;
                }
                let prepared = &prepared;
                s.spawn(move |_| {
                    for p in prepared {
                        sc.update(p.point_key, p.cell_keys[slot], p.op);
                    }
                });
            }
            for (o_idx, slot_scs) in self.own_scs.iter_mut().enumerate() {
                for (slot, entry) in slot_scs.iter_mut().enumerate() {
                    let Some(sc) = entry.as_mut() else { continue };
                    let prepared = &prepared;
                    let pi = pis[o_idx][slot];
                    let sampler = samplers[o_idx][slot];
                    s.spawn(move |_| {
                        for p in prepared {
                            if sample_bit(&sampler, p.point_key, pi) {
                                sc.update(p.point_key, p.cell_keys[slot], p.op);
                            }
                        }
                    });
                }
            }
        });
    }

    /// Heavy cell identification: per-level top candidates filtered for
    /// laminarity.
    pub fn identify_heavy(&self) -> HeavyScheme {
        let tops: Vec<Vec<(CellKey, i64)>> =
            self.hhs.iter().map(|hh| hh.top(self.derived.top_m)).collect();
        let scheme = HeavyScheme::from_levels(self.grid.d(), laminar_heavy_sets(&self.grid, &tops));
        debug_assert!(scheme.check_invariants(
            &self.grid,
            ((self.params.lambda.l1 * self.params.k as f64 * self.params.levels.max(1) as f64
                / self.params.rho)
                .floor() as usize)
                .max(1)
        ));
        scheme
    }

    fn slot_cell_of(&self, slot: i32) -> impl Fn(PointKey) -> CellKey + '_ {
        move |pk| {
            let p = self.grid.unpack_point(pk);
            self.grid.pack_cell(&self.grid.cell_of(&p, slot).unwrap())
        }
    }

    /// Assembles the non-negative coreset from the smallest guess whose
    /// sparse-cells instances all succeed, then rectifies the weights.
    pub fn query(&self) -> Result<QueryOutcome, PositiveQueryError> {
        let slots = self.params.levels as usize + 1;
        let exact_recoveries: Vec<Option<Result<BTreeSet<PointKey>, crate::kset::SketchFail>>> =
            (0..slots)
                .into_par_iter()
                .map(|slot| {
                    self.exact_used[slot]
                        .then(|| self.exact_scs[slot].query(self.slot_cell_of(slot as i32)))
                })
                .collect();
        let mut failures = Vec::new();
        for o_idx in self.ladder.iter() {
            let recoveries: Vec<Result<BTreeSet<PointKey>, crate::kset::SketchFail>> = (0..slots)
                .into_par_iter()
                .map(|slot| match &self.own_scs[o_idx][slot] {
                    Some(sc) => sc.query(self.slot_cell_of(slot as i32)),
                    None => exact_recoveries[slot].clone().unwrap(),
                })
                .collect();
            let failed: Vec<i32> = recoveries
                .iter()
                .enumerate()
                .filter(|(_, r)| r.is_err())
                .map(|(slot, _)| slot as i32)
                .collect();
            if !failed.is_empty() {
                failures.push(GuessFailure {
                    exponent: self.ladder.exponent(o_idx),
                    failed_levels: failed,
                });
                continue;
            }
            let recovered: Vec<BTreeSet<PointKey>> =
                recoveries.into_iter().map(|r| r.unwrap()).collect();
            let coreset = self.assemble(o_idx, &recovered)?;
            return Ok(QueryOutcome { coreset, o_star_exponent: self.ladder.exponent(o_idx) });
        }
        Err(QueryError::AllGuessesFailed { failures }.into())
    }

    fn assemble(
        &self,
        o_idx: usize,
        recovered: &[BTreeSet<PointKey>],
    ) -> Result<Coreset, RectifyError> {
        let scheme = self.identify_heavy();
        let mut values: BTreeMap<CellId, Weight> = BTreeMap::new();
        values.insert(CellId::root(self.grid.d()), rational(self.live as f64));
        for level in 0..self.hhs.len() as i32 {
            if let Some(cells) = scheme.level(level) {
                for (&key, &est) in cells {
                    values
                        .insert(self.grid.unpack_cell(key), BigRational::from_i64(est).unwrap());
                }
            }
        }
        // Slot i recovers candidates for ending level i - 1; a candidate is
        // kept when its path is heavy through i - 1 and non-heavy at i.
        let mut samples: BTreeMap<CellId, Vec<SampleEntry>> = BTreeMap::new();
        for (slot, points) in recovered.iter().enumerate() {
            let slot = slot as i32;
            let pi = self.pis[o_idx][slot as usize];
            for &pk in points {
                let point = self.grid.unpack_point(pk);
                if scheme.ending_level(&self.grid, &point) != slot - 1 {
                    continue;
                }
                let ending_cell = self.grid.cell_of(&point, slot - 1).unwrap();
                debug_assert!(values.contains_key(&ending_cell));
                samples.entry(ending_cell).or_default().push(SampleEntry {
                    point_key: pk,
                    position: point.position(),
                    ending_level: slot - 1,
                    weight: count_over_pi(1, pi),
                });
            }
        }
        let assembly = PositiveAssembly::new(values, samples, self.hhs.len() as i32 - 1);
        rectify_weights(assembly, &self.grid, self.params.k)
    }

    /// Canonical snapshot of the full sketch state.
    pub fn state_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(self.live.to_le_bytes());
        for hh in &self.hhs {
            let s = hh.snapshot();
            out.extend((s.len() as u64).to_le_bytes());
            out.extend(s);
        }
        for (slot, sc) in self.exact_scs.iter().enumerate() {
            if self.exact_used[slot] {
                let s = sc.snapshot();
                out.extend((s.len() as u64).to_le_bytes());
                out.extend(s);
            }
        }
        for slot_scs in &self.own_scs {
            for sc in slot_scs.iter().flatten() {
                let s = sc.snapshot();
                out.extend((s.len() as u64).to_le_bytes());
                out.extend(s);
            }
        }
        out
    }
}
