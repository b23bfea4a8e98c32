//! Core value types shared by every other module: grid points, stream
//! updates, candidate centers, and the parameter bundle.

use thiserror::Error;

/// Errors from constructing or combining model values.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("coordinate {value} out of range [1, {max}]")]
    CoordinateOutOfRange { value: u64, max: u64 },
    #[error("candidate center set must be nonempty")]
    EmptyCenters,
    #[error("candidate center set holds {got} centers, limit {limit}")]
    TooManyCenters { got: usize, limit: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A point of the integer grid `[1, delta]^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    coords: Vec<u64>,
}

impl Point {
    /// Builds a point, checking every coordinate against `[1, delta]`.
    pub fn new(coords: Vec<u64>, delta: u64) -> Result<Self, ModelError> {
        for &c in &coords {
            if c < 1 || c > delta {
                return Err(ModelError::CoordinateOutOfRange { value: c, max: delta });
            }
        }
        Ok(Point { coords })
    }

    /// Builds a point without range checks; callers guarantee validity.
    pub fn from_coords(coords: Vec<u64>) -> Self {
        Point { coords }
    }

    pub fn coords(&self) -> &[u64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Position as a real vector, for distance computations.
    pub fn position(&self) -> Vec<f64> {
        self.coords.iter().map(|&c| c as f64).collect()
    }
}

/// One turnstile stream operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamOp {
    Insert,
    Delete,
}

/// A single stream update: insert or delete one grid point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamUpdate {
    pub op: StreamOp,
    pub point: Point,
}

impl StreamUpdate {
    pub fn insert(point: Point) -> Self {
        StreamUpdate { op: StreamOp::Insert, point }
    }

    pub fn delete(point: Point) -> Self {
        StreamUpdate { op: StreamOp::Delete, point }
    }
}

/// A point paired with a real weight. Weights may be negative in the
/// generally weighted construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoint {
    pub position: Vec<f64>,
    pub weight: f64,
}

/// At most `k` candidate centers from `[1, delta]^d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateCenters {
    centers: Vec<Point>,
}

impl CandidateCenters {
    pub fn new(centers: Vec<Point>, k: usize) -> Result<Self, ModelError> {
        if centers.is_empty() {
            return Err(ModelError::EmptyCenters);
        }
        if centers.len() > k {
            return Err(ModelError::TooManyCenters { got: centers.len(), limit: k });
        }
        Ok(CandidateCenters { centers })
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn positions(&self) -> Vec<Vec<f64>> {
        self.centers.iter().map(|p| p.position()).collect()
    }
}

/// Universal constants left free by the analysis, exposed so tests can
/// calibrate them. `pi_general` is the leading constant of the general
/// sampling probability (the algorithmic variant uses 3, the analysis 200).
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTable {
    pub pi_general: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub l6: f64,
    pub l7: f64,
    pub l8: f64,
    pub l9: f64,
}

impl Default for LambdaTable {
    fn default() -> Self {
        let e = std::f64::consts::E;
        LambdaTable {
            pi_general: 3.0,
            l1: 10.0,
            l2: 40.0,
            l3: 3.0,
            l4: 3.0,
            l5: 8.0,
            l6: 8.0,
            l7: 8.0 * (2.0 + e) * (2.0 + e),
            l8: e + 4.0,
            l9: 8.0,
        }
    }
}

/// Parameter bundle: dimension, centers, grid size, accuracy and failure
/// knobs, the lambda constants, a global scale applied to all sampling and
/// sketch-size formulas, and the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub d: usize,
    pub k: usize,
    /// Grid side length, padded up to a power of two.
    pub delta: u64,
    pub epsilon: f64,
    pub rho: f64,
    /// Per-sketch failure probability knob.
    pub fail_delta: f64,
    /// Number of refinement levels: `delta == 2^levels`.
    pub levels: u32,
    pub lambda: LambdaTable,
    /// Multiplier on sampling probabilities and sketch size parameters.
    /// The worst-case constants make desk-scale sampling trivial, so
    /// experiments tune this down; 1.0 reproduces the formulas verbatim.
    pub constant_scale: f64,
    pub seed: u64,
}

impl Params {
    pub fn new(
        d: usize,
        k: usize,
        delta: u64,
        epsilon: f64,
        rho: f64,
        fail_delta: f64,
    ) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::InvalidParameter("d must be positive".into()));
        }
        if k == 0 {
            return Err(ModelError::InvalidParameter("k must be positive".into()));
        }
        if delta == 0 {
            return Err(ModelError::InvalidParameter("delta must be positive".into()));
        }
        for (name, v) in [("epsilon", epsilon), ("rho", rho), ("fail_delta", fail_delta)] {
            if !(v > 0.0 && v < 0.5) {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} must lie in (0, 1/2), got {v}"
                )));
            }
        }
        let (delta, levels) = derive_levels(delta);
        // Packed cell keys carry d * (levels + 2) index bits plus a 7-bit
        // level tag inside a u128.
        if d as u32 * (levels + 2) > 121 {
            return Err(ModelError::InvalidParameter(format!(
                "d * (L + 2) = {} exceeds the 121-bit packing budget",
                d as u32 * (levels + 2)
            )));
        }
        Ok(Params {
            d,
            k,
            delta,
            epsilon,
            rho,
            fail_delta,
            levels,
            lambda: LambdaTable::default(),
            constant_scale: 1.0,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_constant_scale(mut self, scale: f64) -> Self {
        assert!(scale > 0.0, "constant_scale must be positive");
        self.constant_scale = scale;
        self
    }

    pub fn with_lambda(mut self, lambda: LambdaTable) -> Self {
        self.lambda = lambda;
        self
    }

    /// `L + 1`, the number of grids `G_0 .. G_L`.
    pub fn level_count(&self) -> u32 {
        self.levels + 1
    }

    /// `ln(delta^{kd})` computed in log space.
    pub fn ln_delta_pow_kd(&self) -> f64 {
        (self.k * self.d) as f64 * (self.delta as f64).ln()
    }
}

/// Pads `delta` to the least power of two at or above it and returns the
/// padded value together with its log.
pub fn derive_levels(delta: u64) -> (u64, u32) {
    assert!(delta >= 1, "delta must be positive");
    let padded = delta.next_power_of_two();
    (padded, padded.trailing_zeros())
}

/// Euclidean distance between two equal-dimension positions.
pub fn distance_pos(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between two grid points.
pub fn distance(p: &Point, q: &Point) -> Result<f64, ModelError> {
    if p.dim() != q.dim() {
        return Err(ModelError::DimensionMismatch { left: p.dim(), right: q.dim() });
    }
    let s: f64 = p
        .coords()
        .iter()
        .zip(q.coords())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s.sqrt())
}

/// Distance from a position to the closest of a set of center positions.
pub fn distance_to_positions(p: &[f64], centers: &[Vec<f64>]) -> f64 {
    centers
        .iter()
        .map(|z| distance_pos(p, z))
        .fold(f64::INFINITY, f64::min)
}

/// Distance from a point to the closest center of a nonempty set.
pub fn distance_to_set(p: &Point, centers: &CandidateCenters) -> Result<f64, ModelError> {
    let mut best = f64::INFINITY;
    for z in centers.centers() {
        best = best.min(distance(p, z)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(coords: &[u64]) -> Point {
        Point::from_coords(coords.to_vec())
    }

    #[test]
    fn derive_levels_examples() {
        assert_eq!(derive_levels(512), (512, 9));
        assert_eq!(derive_levels(1), (1, 0));
        assert_eq!(derive_levels(300), (512, 9));
        // 512 yields G_{-1} plus G_0..G_9: eleven grid partitions.
        let (_, l) = derive_levels(512);
        assert_eq!(l + 2, 11);
    }

    #[test]
    fn derive_levels_idempotent() {
        for delta in [1u64, 2, 3, 7, 8, 300, 512, 1023] {
            let (padded, _) = derive_levels(delta);
            assert_eq!(derive_levels(padded), derive_levels(padded).clone());
            assert_eq!(derive_levels(padded).0, padded);
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&pt(&[1, 1]), &pt(&[1, 1])).unwrap(), 0.0);
        assert_eq!(distance(&pt(&[1, 1]), &pt(&[4, 5])).unwrap(), 5.0);
        assert_eq!(distance(&pt(&[2]), &pt(&[9])).unwrap(), 7.0);
        assert!(matches!(
            distance(&pt(&[1]), &pt(&[1, 2])),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_to_set_examples() {
        let z = CandidateCenters::new(vec![pt(&[1, 1]), pt(&[4, 5])], 2).unwrap();
        assert_eq!(distance_to_set(&pt(&[1, 1]), &z).unwrap(), 0.0);

        let z = CandidateCenters::new(vec![pt(&[1]), pt(&[9])], 2).unwrap();
        assert_eq!(distance_to_set(&pt(&[2]), &z).unwrap(), 1.0);

        let z = CandidateCenters::new(vec![pt(&[1, 1])], 1).unwrap();
        assert_eq!(distance_to_set(&pt(&[5, 5]), &z).unwrap(), 32f64.sqrt());

        assert!(matches!(
            CandidateCenters::new(vec![], 1),
            Err(ModelError::EmptyCenters)
        ));
    }

    #[test]
    fn params_validation() {
        assert!(Params::new(2, 1, 300, 0.25, 0.1, 0.01).is_ok());
        let p = Params::new(2, 1, 300, 0.25, 0.1, 0.01).unwrap();
        assert_eq!(p.delta, 512);
        assert_eq!(p.levels, 9);
        assert!(Params::new(2, 1, 512, 0.5, 0.1, 0.01).is_err());
        assert!(Params::new(2, 1, 512, 0.25, 0.0, 0.01).is_err());
        assert!(Params::new(0, 1, 512, 0.25, 0.1, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(1u64..=64, 3),
            b in prop::collection::vec(1u64..=64, 3),
            c in prop::collection::vec(1u64..=64, 3),
        ) {
            let (a, b, c) = (pt(&a), pt(&b), pt(&c));
            let ab = distance(&a, &b).unwrap();
            let bc = distance(&b, &c).unwrap();
            let ac = distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn distance_symmetric_zero_iff_equal(
            a in prop::collection::vec(1u64..=64, 2),
            b in prop::collection::vec(1u64..=64, 2),
        ) {
            let (a, b) = (pt(&a), pt(&b));
            let ab = distance(&a, &b).unwrap();
            let ba = distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
