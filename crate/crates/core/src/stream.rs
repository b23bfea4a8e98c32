//! Stream file format and deterministic stream generators.
//!
//! A stream file is a header line `# stream d=<d> delta=<delta>` followed
//! by one update per line: `+ x1 ... xd` inserts, `- x1 ... xd` deletes.
//! Parsing checks consistency incrementally (no delete of an absent point,
//! no insert of a present point) and reports violations with their line
//! number.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::hashing::{rng_for, subseed};
use crate::model::{Point, StreamOp, StreamUpdate};

#[derive(Debug, Error, PartialEq)]
pub enum StreamFormatError {
    #[error("missing or malformed stream header")]
    MissingHeader,
    #[error("line {line}: malformed update")]
    BadUpdate { line: usize },
    #[error("line {line}: coordinate out of range [1, {delta}]")]
    OutOfRange { line: usize, delta: u64 },
    #[error("line {line}: inconsistent stream: {reason}")]
    Inconsistent { line: usize, reason: String },
    #[error("cannot place {n} distinct points in a grid of {capacity}")]
    TooManyPoints { n: u64, capacity: u64 },
}

/// A parsed stream: dimension, grid size, and the update sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFile {
    pub d: usize,
    pub delta: u64,
    pub updates: Vec<StreamUpdate>,
}

impl StreamFile {
    pub fn live_count(&self) -> i64 {
        self.updates
            .iter()
            .map(|u| match u.op {
                StreamOp::Insert => 1,
                StreamOp::Delete => -1,
            })
            .sum()
    }

    /// The surviving point set after all updates.
    pub fn survivors(&self) -> Vec<Point> {
        let mut live: HashSet<&Point> = HashSet::new();
        for u in &self.updates {
            match u.op {
                StreamOp::Insert => live.insert(&u.point),
                StreamOp::Delete => live.remove(&u.point),
            };
        }
        let mut out: Vec<Point> = live.into_iter().cloned().collect();
        out.sort();
        out
    }

    pub fn emit(&self) -> String {
        let mut out = format!("# stream d={} delta={}\n", self.d, self.delta);
        for u in &self.updates {
            out.push(match u.op {
                StreamOp::Insert => '+',
                StreamOp::Delete => '-',
            });
            for c in u.point.coords() {
                out.push_str(&format!(" {c}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, StreamFormatError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(StreamFormatError::MissingHeader)?;
        let rest = header.strip_prefix("# stream ").ok_or(StreamFormatError::MissingHeader)?;
        let mut d = None;
        let mut delta = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("d", v)) => d = v.parse::<usize>().ok(),
                Some(("delta", v)) => delta = v.parse::<u64>().ok(),
                _ => return Err(StreamFormatError::MissingHeader),
            }
        }
        let (d, delta) = match (d, delta) {
            (Some(d), Some(delta)) if d > 0 && delta > 0 => (d, delta),
            _ => return Err(StreamFormatError::MissingHeader),
        };
        let mut updates = Vec::new();
        let mut live: HashSet<Vec<u64>> = HashSet::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let mut toks = line.split_whitespace();
            let op = match toks.next() {
                Some("+") => StreamOp::Insert,
                Some("-") => StreamOp::Delete,
                _ => return Err(StreamFormatError::BadUpdate { line: lineno }),
            };
            let coords: Vec<u64> = toks
                .map(|t| t.parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|_| StreamFormatError::BadUpdate { line: lineno })?;
            if coords.len() != d {
                return Err(StreamFormatError::BadUpdate { line: lineno });
            }
            if coords.iter().any(|&c| c < 1 || c > delta) {
                return Err(StreamFormatError::OutOfRange { line: lineno, delta });
            }
            match op {
                StreamOp::Insert => {
                    if !live.insert(coords.clone()) {
                        return Err(StreamFormatError::Inconsistent {
                            line: lineno,
                            reason: "insert of a present point".into(),
                        });
                    }
                }
                StreamOp::Delete => {
                    if !live.remove(&coords) {
                        return Err(StreamFormatError::Inconsistent {
                            line: lineno,
                            reason: "delete of an absent point".into(),
                        });
                    }
                }
            }
            updates.push(StreamUpdate { op, point: Point::from_coords(coords) });
        }
        Ok(StreamFile { d, delta, updates })
    }
}

/// Built-in generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Points from a mixture of Gaussians rounded onto the grid;
    /// collisions are re-sampled so all points are distinct.
    GaussianMixture,
    /// Uniformly random distinct grid points.
    Uniform,
    /// Clustered inserts followed by interleaved deletions of half the
    /// points, exercising the dynamic path.
    ClustersWithDeletions,
}

/// Generates a deterministic stream for the given seed.
pub fn generate(
    kind: GeneratorKind,
    n: u64,
    d: usize,
    delta: u64,
    seed: u64,
) -> Result<StreamFile, StreamFormatError> {
    let capacity = (delta as f64).powi(d as i32);
    if (n as f64) > capacity {
        return Err(StreamFormatError::TooManyPoints { n, capacity: capacity as u64 });
    }
    let mut rng = rng_for(subseed(seed, "generate", &[kind_tag(kind), n, d as u64, delta]));
    match kind {
        GeneratorKind::Uniform => {
            let mut seen = HashSet::new();
            let mut updates = Vec::with_capacity(n as usize);
            while (updates.len() as u64) < n {
                let coords: Vec<u64> = (0..d).map(|_| rng.gen_range(1..=delta)).collect();
                if seen.insert(coords.clone()) {
                    updates.push(StreamUpdate::insert(Point::from_coords(coords)));
                }
            }
            Ok(StreamFile { d, delta, updates })
        }
        GeneratorKind::GaussianMixture => {
            // A handful of round blobs with seeded centers and spreads.
            let components = 5.min(n.max(1)) as usize;
            let mix: Vec<(Vec<f64>, f64)> = (0..components)
                .map(|_| {
                    let center: Vec<f64> = (0..d)
                        .map(|_| rng.gen_range(0.2 * delta as f64..0.8 * delta as f64))
                        .collect();
                    let sigma = rng.gen_range(0.02 * delta as f64..0.08 * delta as f64);
                    (center, sigma)
                })
                .collect();
            let mut seen = HashSet::new();
            let mut updates = Vec::with_capacity(n as usize);
            while (updates.len() as u64) < n {
                let (center, sigma) = &mix[rng.gen_range(0..components)];
                let normal = Normal::new(0.0, *sigma).unwrap();
                let coords: Vec<u64> = center
                    .iter()
                    .map(|&c| {
                        let x = c + normal.sample(&mut rng);
                        x.round().clamp(1.0, delta as f64) as u64
                    })
                    .collect();
                // Grid rounding collides often; re-sample until distinct.
                if seen.insert(coords.clone()) {
                    updates.push(StreamUpdate::insert(Point::from_coords(coords)));
                }
            }
            Ok(StreamFile { d, delta, updates })
        }
        GeneratorKind::ClustersWithDeletions => {
            let inserted = generate(GeneratorKind::GaussianMixture, n, d, delta, seed)?;
            let points: Vec<Point> = inserted.updates.iter().map(|u| u.point.clone()).collect();
            let mut updates = Vec::with_capacity(points.len() * 3 / 2);
            let mut delete_queue: Vec<Point> = Vec::new();
            for (i, p) in points.iter().enumerate() {
                updates.push(StreamUpdate::insert(p.clone()));
                if i % 2 == 0 {
                    delete_queue.push(p.clone());
                }
                // Interleave deletions a few steps after their inserts.
                if i >= 4 && !delete_queue.is_empty() && i % 3 == 0 {
                    updates.push(StreamUpdate::delete(delete_queue.remove(0)));
                }
            }
            for p in delete_queue {
                updates.push(StreamUpdate::delete(p));
            }
            Ok(StreamFile { d, delta, updates })
        }
    }
}

fn kind_tag(kind: GeneratorKind) -> u64 {
    match kind {
        GeneratorKind::GaussianMixture => 0,
        GeneratorKind::Uniform => 1,
        GeneratorKind::ClustersWithDeletions => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = generate(GeneratorKind::Uniform, 50, 2, 16, 7).unwrap();
        let text = s.emit();
        assert_eq!(StreamFile::parse(&text).unwrap(), s);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(GeneratorKind::GaussianMixture, 200, 2, 64, 9).unwrap();
        let b = generate(GeneratorKind::GaussianMixture, 200, 2, 64, 9).unwrap();
        assert_eq!(a.emit(), b.emit());
        let c = generate(GeneratorKind::GaussianMixture, 200, 2, 64, 10).unwrap();
        assert_ne!(a.emit(), c.emit());
    }

    #[test]
    fn gaussian_points_are_distinct_inserts() {
        let s = generate(GeneratorKind::GaussianMixture, 500, 2, 64, 3).unwrap();
        assert_eq!(s.updates.len(), 500);
        let distinct: HashSet<_> = s.updates.iter().map(|u| u.point.clone()).collect();
        assert_eq!(distinct.len(), 500);
        assert!(s.updates.iter().all(|u| u.op == StreamOp::Insert));
    }

    #[test]
    fn deletions_leave_half() {
        let s = generate(GeneratorKind::ClustersWithDeletions, 100, 2, 64, 4).unwrap();
        assert_eq!(s.live_count(), 50);
        assert_eq!(s.survivors().len(), 50);
        // Parsing re-checks consistency.
        assert!(StreamFile::parse(&s.emit()).is_ok());
    }

    #[test]
    fn capacity_guard() {
        assert!(matches!(
            generate(GeneratorKind::Uniform, 100, 1, 8, 0),
            Err(StreamFormatError::TooManyPoints { .. })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "# stream d=1 delta=8\n+ 3\n- 4\n";
        match StreamFile::parse(bad) {
            Err(StreamFormatError::Inconsistent { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected inconsistency, got {other:?}"),
        }
        let bad2 = "# stream d=1 delta=8\n+ 3\n+ 3\n";
        assert!(matches!(
            StreamFile::parse(bad2),
            Err(StreamFormatError::Inconsistent { line: 3, .. })
        ));
        let bad3 = "# stream d=1 delta=8\n+ 9\n";
        assert!(matches!(
            StreamFile::parse(bad3),
            Err(StreamFormatError::OutOfRange { line: 2, .. })
        ));
        let bad4 = "# stream d=2 delta=8\n+ 1\n";
        assert!(matches!(StreamFile::parse(bad4), Err(StreamFormatError::BadUpdate { line: 2 })));
    }
}
