//! Membership and Lebesgue measure of ball unions.
//!
//! Exact for scalar targets (merged intervals); a cell-center grid or
//! uniform Monte-Carlo sampling otherwise.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{PcpError, Result};
use crate::rng::StreamRng;
use crate::types::{BallUnionSet, NormKind, Radius};

/// Grids above this many cells are refused.
pub const MAX_GRID_CELLS: f64 = 1e8;
const BOUNDS_MARGIN: f64 = 1e-9;

/// Lebesgue measure of a set; `Infinite` for the whole space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measure {
    Finite(f64),
    Infinite,
}

impl Measure {
    pub fn value(&self) -> Option<f64> {
        match self {
            Measure::Finite(v) => Some(*v),
            Measure::Infinite => None,
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Finite(v) => write!(f, "{v}"),
            Measure::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Measure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Measure::Finite(v) => s.serialize_f64(*v),
            Measure::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Measure {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        Ok(match Radius::deserialize(de)? {
            Radius::Finite(v) => Measure::Finite(v),
            Radius::Infinite => Measure::Infinite,
        })
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        PcpError::check_dim(lo.len(), hi.len())?;
        if lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(PcpError::precondition("bounds need finite lo < hi in every dimension"));
        }
        Ok(Self { lo, hi })
    }

    /// Bounding box of the centers inflated by the radius, plus a small margin.
    pub fn enclosing(set: &BallUnionSet) -> Result<Self> {
        let r = finite_radius(set)?;
        let d = set.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for c in set.centers() {
            for j in 0..d {
                lo[j] = lo[j].min(c[j] - r - BOUNDS_MARGIN);
                hi[j] = hi[j].max(c[j] + r + BOUNDS_MARGIN);
            }
        }
        Self::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    fn check_encloses(&self, set: &BallUnionSet, r: f64) -> Result<()> {
        PcpError::check_dim(self.dim(), set.dim())?;
        let tol = 1e-12;
        for c in set.centers() {
            for j in 0..self.dim() {
                let scale = tol * (1.0 + c[j].abs() + r);
                if c[j] - r < self.lo[j] - scale || c[j] + r > self.hi[j] + scale {
                    return Err(PcpError::precondition("bounds do not enclose the ball union"));
                }
            }
        }
        Ok(())
    }
}

fn finite_radius(set: &BallUnionSet) -> Result<f64> {
    set.radius()
        .value()
        .ok_or_else(|| PcpError::precondition("set has infinite radius"))
}

/// `y ∈ ∪_k {u : ‖u - c_k‖ ≤ r}`.
pub fn contains(set: &BallUnionSet, y: &[f64]) -> Result<bool> {
    PcpError::check_dim(set.dim(), y.len())?;
    Ok(contains_unchecked(set, y))
}

#[inline]
pub(crate) fn contains_unchecked(set: &BallUnionSet, y: &[f64]) -> bool {
    match set.radius() {
        Radius::Infinite => true,
        Radius::Finite(r) => set.centers().iter().any(|c| set.norm().dist_unchecked(y, c) <= r),
    }
}

/// Sorted, pairwise-disjoint intervals whose union equals the set (d = 1).
pub fn merged_intervals(set: &BallUnionSet) -> Result<Vec<(f64, f64)>> {
    if set.dim() != 1 {
        return Err(PcpError::Dimension { expected: 1, got: set.dim() });
    }
    let r = finite_radius(set)?;
    Ok(merge(set.centers().iter().map(|c| (c[0] - r, c[0] + r)).collect()))
}

/// Merges closed intervals; touching intervals are joined.
pub fn merge(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (a, b) in intervals {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Exact length of a scalar ball union.
pub fn measure_1d(set: &BallUnionSet) -> Result<Measure> {
    if set.dim() != 1 {
        return Err(PcpError::Dimension { expected: 1, got: set.dim() });
    }
    if set.radius().is_infinite() {
        return Ok(Measure::Infinite);
    }
    Ok(Measure::Finite(merged_intervals(set)?.iter().map(|(a, b)| b - a).sum()))
}

/// Number of connected components of a scalar ball union.
pub fn component_count(set: &BallUnionSet) -> Result<usize> {
    Ok(merged_intervals(set)?.len())
}

/// Count of cell centers `lo + (j + ½) h`, `j ∈ [0, cells)`, inside `[a, b]`.
fn centers_in(a: f64, b: f64, lo: f64, h: f64, cells: usize) -> usize {
    let first = ((a - lo) / h - 0.5).ceil().max(0.0);
    let last = ((b - lo) / h - 0.5).floor().min(cells as f64 - 1.0);
    if last < first {
        0
    } else {
        (last - first) as usize + 1
    }
}

/// Grid estimate: number of cells whose center lies in the set, times the
/// cell volume. Sweeps the last coordinate analytically: for each line of
/// cell centers, every ball cuts an interval, and the merged intervals are
/// counted exactly.
pub fn measure_grid(set: &BallUnionSet, bounds: &Bounds, cells_per_dim: usize) -> Result<f64> {
    let r = finite_radius(set)?;
    bounds.check_encloses(set, r)?;
    if cells_per_dim == 0 {
        return Err(PcpError::precondition("cells_per_dim must be >= 1"));
    }
    let d = set.dim();
    if (cells_per_dim as f64).powi(d as i32) > MAX_GRID_CELLS {
        return Err(PcpError::precondition(format!(
            "grid of {cells_per_dim}^{d} cells exceeds the limit of {MAX_GRID_CELLS:e}"
        )));
    }
    let h: Vec<f64> = (0..d)
        .map(|j| (bounds.hi[j] - bounds.lo[j]) / cells_per_dim as f64)
        .collect();
    let cell_volume: f64 = h.iter().product();
    let last = d - 1;
    let norm = set.norm();

    let lines = cells_per_dim.pow(last as u32);
    let mut point = vec![0.0; last];
    let mut intervals = Vec::with_capacity(set.centers().len());
    let mut hits = 0usize;
    for line in 0..lines {
        let mut rem = line;
        for j in 0..last {
            let idx = rem % cells_per_dim;
            rem /= cells_per_dim;
            point[j] = bounds.lo[j] + (idx as f64 + 0.5) * h[j];
        }
        intervals.clear();
        for c in set.centers() {
            if let Some(hw) = half_width(norm, &point, &c[..last], r) {
                intervals.push((c[last] - hw, c[last] + hw));
            }
        }
        for (a, b) in merge(std::mem::take(&mut intervals)) {
            hits += centers_in(a, b, bounds.lo[last], h[last], cells_per_dim);
        }
    }
    Ok(hits as f64 * cell_volume)
}

/// Half-width of the slice of a ball along the last axis at the given
/// leading coordinates, or `None` if the line misses the ball.
#[inline]
fn half_width(norm: NormKind, lead: &[f64], center_lead: &[f64], r: f64) -> Option<f64> {
    match norm {
        NormKind::L2 => {
            let rem = r * r
                - lead
                    .iter()
                    .zip(center_lead)
                    .map(|(u, c)| (u - c) * (u - c))
                    .sum::<f64>();
            (rem >= 0.0).then(|| rem.sqrt())
        }
        NormKind::Linf => lead
            .iter()
            .zip(center_lead)
            .all(|(u, c)| (u - c).abs() <= r)
            .then_some(r),
        NormKind::L1 => {
            let rem = r - lead.iter().zip(center_lead).map(|(u, c)| (u - c).abs()).sum::<f64>();
            (rem >= 0.0).then_some(rem)
        }
    }
}

/// Uniform Monte-Carlo estimate over `bounds`: `(hit fraction × volume,
/// binomial standard error)`.
pub fn measure_mc(set: &BallUnionSet, bounds: &Bounds, n_points: usize, rng: &mut StreamRng) -> Result<(f64, f64)> {
    let r = finite_radius(set)?;
    bounds.check_encloses(set, r)?;
    if n_points < 100 {
        return Err(PcpError::precondition("measure_mc needs at least 100 points"));
    }
    let d = set.dim();
    let mut y = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..n_points {
        for j in 0..d {
            y[j] = rng.random_range(bounds.lo[j]..bounds.hi[j]);
        }
        if contains_unchecked(set, &y) {
            hits += 1;
        }
    }
    let v = bounds.volume();
    let frac = hits as f64 / n_points as f64;
    Ok((frac * v, v * (frac * (1.0 - frac) / n_points as f64).sqrt()))
}

/// How set sizes are computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureEstimator {
    #[default]
    /// Exact for d = 1, a 100-cell grid for d ∈ {2, 3}, Monte-Carlo for d ≥ 4.
    Auto,
    Grid { cells_per_dim: usize },
    MonteCarlo { n_points: usize },
}

impl MeasureEstimator {
    pub const DEFAULT_CELLS: usize = 100;
    pub const DEFAULT_MC_POINTS: usize = 100_000;

    /// Measure of `set` over its enclosing box; `rng` is only used by
    /// Monte-Carlo estimation.
    pub fn estimate(&self, set: &BallUnionSet, rng: &mut StreamRng) -> Result<Measure> {
        if set.radius().is_infinite() {
            return Ok(Measure::Infinite);
        }
        let d = set.dim();
        let resolved = match self {
            MeasureEstimator::Auto if d == 1 => return measure_1d(set),
            MeasureEstimator::Auto if d <= 3 => MeasureEstimator::Grid { cells_per_dim: Self::DEFAULT_CELLS },
            MeasureEstimator::Auto => MeasureEstimator::MonteCarlo { n_points: Self::DEFAULT_MC_POINTS },
            other => *other,
        };
        if finite_radius(set)? == 0.0 {
            return Ok(Measure::Finite(0.0));
        }
        let bounds = Bounds::enclosing(set)?;
        match resolved {
            MeasureEstimator::Grid { cells_per_dim } => Ok(Measure::Finite(measure_grid(set, &bounds, cells_per_dim)?)),
            MeasureEstimator::MonteCarlo { n_points } => Ok(Measure::Finite(measure_mc(set, &bounds, n_points, rng)?.0)),
            MeasureEstimator::Auto => unreachable!("resolved above"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn set(centers: &[&[f64]], r: f64, norm: NormKind) -> BallUnionSet {
        BallUnionSet::new(centers.iter().map(|c| c.to_vec()).collect(), Radius::Finite(r), norm).unwrap()
    }

    /// Independent sweep-line oracle: walk sorted endpoints with a depth counter.
    fn sweep_length(centers: &[f64], r: f64) -> f64 {
        let mut events: Vec<(f64, i32)> = centers
            .iter()
            .flat_map(|c| [(c - r, 1), (c + r, -1)])
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let (mut depth, mut start, mut total) = (0, 0.0, 0.0);
        for (t, delta) in events {
            if depth == 0 && delta == 1 {
                start = t;
            }
            depth += delta;
            if depth == 0 {
                total += t - start;
            }
        }
        total
    }

    #[test]
    fn measure_serde_round_trip() {
        let ms = vec![Measure::Finite(2.5), Measure::Infinite, Measure::Finite(0.0)];
        let text = serde_json::to_string(&ms).unwrap();
        assert_eq!(text, r#"[2.5,"inf",0.0]"#);
        assert_eq!(serde_json::from_str::<Vec<Measure>>(&text).unwrap(), ms);
        assert!(serde_json::from_str::<Measure>("-1.0").is_err());
    }

    #[test]
    fn contains_examples() {
        assert!(contains(&set(&[&[1.0, 2.0]], 0.0, NormKind::L2), &[1.0, 2.0]).unwrap());
        let s = set(&[&[0.0, 0.0], &[5.0, 0.0]], 1.0, NormKind::L2);
        assert!(!contains(&s, &[2.5, 0.0]).unwrap());
        assert!(!contains(&s, &[0.0, 1.0 + 1e-9]).unwrap());
        assert!(contains(&s, &[0.0, 1.0]).unwrap());
        let inf = BallUnionSet::new(vec![vec![0.0]], Radius::Infinite, NormKind::L2).unwrap();
        assert!(contains(&inf, &[1e300]).unwrap());
        assert!(contains(&s, &[0.0]).is_err());
    }

    #[test]
    fn measure_1d_examples() {
        assert_eq!(measure_1d(&set(&[&[0.0], &[10.0]], 1.0, NormKind::L2)).unwrap(), Measure::Finite(4.0));
        assert_eq!(sweep_length(&[0.0, 1.5], 1.0), 3.5);
        assert_eq!(measure_1d(&set(&[&[0.0], &[1.5]], 1.0, NormKind::L2)).unwrap(), Measure::Finite(3.5));
        assert_eq!(measure_1d(&set(&[&[2.0][..]; 7], 0.5, NormKind::L2)).unwrap(), Measure::Finite(1.0));
        assert_eq!(
            merged_intervals(&set(&[&[0.0], &[10.0]], 1.0, NormKind::L2)).unwrap(),
            vec![(-1.0, 1.0), (9.0, 11.0)]
        );
        assert_eq!(merged_intervals(&set(&[&[0.0], &[1.5]], 1.0, NormKind::L2)).unwrap(), vec![(-1.0, 2.5)]);
        let inf = BallUnionSet::new(vec![vec![0.0]], Radius::Infinite, NormKind::L2).unwrap();
        assert_eq!(measure_1d(&inf).unwrap(), Measure::Infinite);
        assert!(measure_1d(&set(&[&[0.0, 0.0]], 1.0, NormKind::L2)).is_err());
    }

    #[test]
    fn grid_examples() {
        let disk = set(&[&[0.0, 0.0]], 1.0, NormKind::L2);
        let b = Bounds::enclosing(&disk).unwrap();
        let a = measure_grid(&disk, &b, 400).unwrap();
        assert!((a / PI - 1.0).abs() < 0.01, "{a}");
        let square = set(&[&[0.0, 0.0]], 1.0, NormKind::Linf);
        let a = measure_grid(&square, &Bounds::enclosing(&square).unwrap(), 400).unwrap();
        assert!((a / 4.0 - 1.0).abs() < 0.01, "{a}");
        let two = set(&[&[0.0, 0.0], &[5.0, 1.0]], 1.0, NormKind::L2);
        let a = measure_grid(&two, &Bounds::enclosing(&two).unwrap(), 400).unwrap();
        assert!((a / (2.0 * PI) - 1.0).abs() < 0.01, "{a}");
        let diamond = set(&[&[0.0, 0.0]], 1.0, NormKind::L1);
        let a = measure_grid(&diamond, &Bounds::enclosing(&diamond).unwrap(), 400).unwrap();
        assert!((a / 2.0 - 1.0).abs() < 0.01, "{a}");
        let ball = set(&[&[0.0, 0.0, 0.0]], 1.0, NormKind::L2);
        let a = measure_grid(&ball, &Bounds::enclosing(&ball).unwrap(), 100).unwrap();
        assert!((a / (4.0 / 3.0 * PI) - 1.0).abs() < 0.01, "{a}");
    }

    #[test]
    fn grid_matches_brute_force_cell_count() {
        let s = set(&[&[0.0, 0.0], &[1.2, 0.3], &[-0.4, 1.7]], 0.8, NormKind::L2);
        let b = Bounds::new(vec![-2.0, -1.5], vec![2.5, 3.0]).unwrap();
        let cells = 37;
        let (hx, hy) = (4.5 / cells as f64, 4.5 / cells as f64);
        let mut count = 0;
        for i in 0..cells {
            for j in 0..cells {
                let y = [-2.0 + (i as f64 + 0.5) * hx, -1.5 + (j as f64 + 0.5) * hy];
                if contains(&s, &y).unwrap() {
                    count += 1;
                }
            }
        }
        let g = measure_grid(&s, &b, cells).unwrap();
        assert!((g - count as f64 * hx * hy).abs() < 1e-9);
    }

    #[test]
    fn grid_rejects_tight_bounds_and_huge_grids() {
        let disk = set(&[&[0.0, 0.0]], 1.0, NormKind::L2);
        let tight = Bounds::new(vec![-0.5, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(measure_grid(&disk, &tight, 10), Err(PcpError::Precondition(_))));
        let b = Bounds::enclosing(&disk).unwrap();
        assert!(measure_grid(&disk, &b, 100_000).is_err());
        assert!(matches!(measure_mc(&disk, &tight, 1000, &mut stream(0, Domain::Measure, 0)), Err(PcpError::Precondition(_))));
    }

    #[test]
    fn mc_examples() {
        let disk = set(&[&[0.0, 0.0]], 1.0, NormKind::L2);
        let b = Bounds::enclosing(&disk).unwrap();
        let (est, se) = measure_mc(&disk, &b, 1_000_000, &mut stream(1, Domain::Measure, 0)).unwrap();
        assert!((est - PI).abs() <= 3.0 * se, "{est} ± {se}");
        let point = set(&[&[0.0, 0.0]], 0.0, NormKind::L2);
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(measure_mc(&point, &b, 1000, &mut stream(1, Domain::Measure, 0)).unwrap(), (0.0, 0.0));
        assert!(measure_mc(&disk, &b, 99, &mut stream(1, Domain::Measure, 0)).is_err());
    }

    #[test]
    fn estimator_dispatch() {
        let mut rng = stream(0, Domain::Measure, 0);
        let one = set(&[&[0.0], &[10.0]], 1.0, NormKind::L2);
        assert_eq!(MeasureEstimator::Auto.estimate(&one, &mut rng).unwrap(), Measure::Finite(4.0));
        let zero = set(&[&[0.0, 1.0]], 0.0, NormKind::L2);
        assert_eq!(MeasureEstimator::Auto.estimate(&zero, &mut rng).unwrap(), Measure::Finite(0.0));
        let inf = BallUnionSet::new(vec![vec![0.0, 0.0]], Radius::Infinite, NormKind::L2).unwrap();
        assert_eq!(MeasureEstimator::Auto.estimate(&inf, &mut rng).unwrap(), Measure::Infinite);
        let four = set(&[&[0.0; 4]], 1.0, NormKind::Linf);
        let m = MeasureEstimator::Auto.estimate(&four, &mut rng).unwrap().as_f64();
        assert!((m / 16.0 - 1.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn measure_monotone_and_subadditive_1d(
            centers in prop::collection::vec(-20.0f64..20.0, 1..12),
            r in 0.0f64..3.0,
            dr in 0.0f64..1.0,
        ) {
            let cs: Vec<Vec<f64>> = centers.iter().map(|c| vec![*c]).collect();
            let m = |cs: &[Vec<f64>], r: f64| {
                measure_1d(&BallUnionSet::new(cs.to_vec(), Radius::Finite(r), NormKind::L2).unwrap()).unwrap().as_f64()
            };
            let full = m(&cs, r);
            prop_assert!((full - sweep_length(&centers, r)).abs() < 1e-9);
            prop_assert!(m(&cs, r + dr) >= full - 1e-12);
            if cs.len() > 1 {
                prop_assert!(m(&cs[..cs.len() - 1], r) <= full + 1e-12);
            }
            let singles = 2.0 * r * cs.len() as f64;
            prop_assert!(full <= singles + 1e-9);
            let mut sorted = centers.clone();
            sorted.sort_by(f64::total_cmp);
            let disjoint = sorted.windows(2).all(|w| w[1] - w[0] > 2.0 * r);
            if disjoint {
                prop_assert!((full - singles).abs() < 1e-9);
            } else if r > 0.0 {
                prop_assert!(full < singles - 1e-12 || sorted.windows(2).any(|w| (w[1] - w[0] - 2.0 * r).abs() < 1e-9));
            }
        }

        #[test]
        fn grid_monotone_in_centers(
            centers in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..6),
            r in 0.1f64..1.5,
        ) {
            let full = BallUnionSet::new(centers.clone(), Radius::Finite(r), NormKind::L2).unwrap();
            let sub = BallUnionSet::new(centers[..centers.len() - 1].to_vec(), Radius::Finite(r), NormKind::L2).unwrap();
            let b = Bounds::enclosing(&full).unwrap();
            prop_assert!(measure_grid(&sub, &b, 60).unwrap() <= measure_grid(&full, &b, 60).unwrap());
        }
    }
}
