//! Microphone arrays, candidate-source grids and the time-difference-of-arrival
//! model that links them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default speed of sound in air at 20 °C, in m/s.
pub const DEFAULT_SOUND_SPEED: f64 = 340.0;

/// Slack used when converting metric extents to integer counts so that
/// `1.0 / 0.1` lands on 10 rather than 9.999….
const COUNT_SLACK: f64 = 1e-9;

/// A position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }

    pub fn offset(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Point3::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

impl std::fmt::Display for Point3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.z)
    }
}

/// Ordered set of microphone positions. Pair ordering, and therefore the
/// sign of every delay, follows the order given here.
#[derive(Debug, Clone, PartialEq)]
pub struct MicArray {
    mics: Vec<Point3>,
    labels: Option<Vec<String>>,
}

impl MicArray {
    pub fn new(mics: Vec<Point3>) -> Result<Self> {
        if mics.len() < 2 {
            return Err(Error::invalid(format!(
                "a microphone array needs at least 2 microphones, got {}",
                mics.len()
            )));
        }
        for (i, m) in mics.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::invalid(format!("microphone {i} has non-finite coordinates")));
            }
        }
        for k in 0..mics.len() {
            for l in k + 1..mics.len() {
                if mics[k] == mics[l] {
                    return Err(Error::invalid(format!(
                        "microphones {k} and {l} share coordinates {}",
                        mics[k]
                    )));
                }
            }
        }
        Ok(MicArray { mics, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.mics.len() {
            return Err(Error::invalid(format!(
                "{} labels given for {} microphones",
                labels.len(),
                self.mics.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// `count` microphones evenly spaced on a horizontal circle, the first one
    /// on the +x axis.
    pub fn circular(center: Point3, radius: f64, count: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("circle radius must be positive"));
        }
        let mics = (0..count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                center.offset(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect();
        MicArray::new(mics)
    }

    pub fn mics(&self) -> &[Point3] {
        &self.mics
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.mics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mics.is_empty()
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        enumerate_pairs(self)
            .into_iter()
            .map(|(k, l)| self.mics[k].distance(&self.mics[l]))
            .fold(0.0, f64::max)
    }
}

/// Sound speed and sampling rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub c: f64,
    pub fs: f64,
}

impl PhysicalConstants {
    pub fn new(c: f64, fs: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("sound speed must be positive, got {c}")));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(PhysicalConstants { c, fs })
    }

    pub fn with_fs(fs: f64) -> Result<Self> {
        Self::new(DEFAULT_SOUND_SPEED, fs)
    }
}

/// Time difference of arrival, in seconds, of a wavefront from `q` at
/// microphones `mk` and `ml`. Positive when `ml` is closer to the source.
pub fn tdoa(q: &Point3, mk: &Point3, ml: &Point3, c: f64) -> Result<f64> {
    if !(q.is_finite() && mk.is_finite() && ml.is_finite()) {
        return Err(Error::invalid("tdoa: non-finite coordinates"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("tdoa: sound speed must be positive, got {c}")));
    }
    Ok(tdoa_unchecked(q, mk, ml, c))
}

#[inline]
pub(crate) fn tdoa_unchecked(q: &Point3, mk: &Point3, ml: &Point3, c: f64) -> f64 {
    (q.distance(mk) - q.distance(ml)) / c
}

/// Largest delay, in whole samples, any source position can produce between
/// two microphones of `array`.
pub fn max_lag_samples(array: &MicArray, consts: &PhysicalConstants) -> usize {
    let exact = consts.fs * array.max_pairwise_distance() / consts.c;
    (exact - COUNT_SLACK).ceil().max(0.0) as usize
}

/// All microphone pairs `(k, l)` with `k < l`, in lexicographic order.
pub fn enumerate_pairs(array: &MicArray) -> Vec<(usize, usize)> {
    pairs_for(array.len())
}

pub(crate) fn pairs_for(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for k in 0..m {
        for l in k + 1..m {
            out.push((k, l));
        }
    }
    out
}

/// Axis-aligned lattice of candidate source positions, boundary planes
/// included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    min: Point3,
    max: Point3,
    resolution: [f64; 3],
    counts: [usize; 3],
}

impl Grid3D {
    pub fn new(min: Point3, max: Point3, resolution: f64) -> Result<Self> {
        Self::with_axis_resolution(min, max, [resolution; 3])
    }

    pub fn with_axis_resolution(min: Point3, max: Point3, resolution: [f64; 3]) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::invalid("grid corners must be finite"));
        }
        let lo = min.to_array();
        let hi = max.to_array();
        let mut counts = [0usize; 3];
        for axis in 0..3 {
            let res = resolution[axis];
            if !(res > 0.0 && res.is_finite()) {
                return Err(Error::invalid(format!(
                    "grid resolution must be positive, got {res} on axis {axis}"
                )));
            }
            let extent = hi[axis] - lo[axis];
            if extent < 0.0 {
                return Err(Error::invalid(format!(
                    "grid max below min on axis {axis} ({} < {})",
                    hi[axis], lo[axis]
                )));
            }
            counts[axis] = (extent / res + COUNT_SLACK).floor() as usize + 1;
        }
        Ok(Grid3D {
            min,
            max,
            resolution,
            counts,
        })
    }

    pub fn min(&self) -> Point3 {
        self.min
    }

    pub fn max(&self) -> Point3 {
        self.max
    }

    pub fn resolution(&self) -> [f64; 3] {
        self.resolution
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of one cell diagonal.
    pub fn cell_diagonal(&self) -> f64 {
        self.resolution.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    /// Point at enumeration index `index` (x fastest, then y, then z).
    pub fn point(&self, index: usize) -> Point3 {
        let [nx, ny, _] = self.counts;
        let ix = index % nx;
        let iy = (index / nx) % ny;
        let iz = index / (nx * ny);
        self.point_at(ix, iy, iz)
    }

    pub fn point_at(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        let coord = |lo: f64, hi: f64, res: f64, i: usize| (lo + res * i as f64).min(hi);
        Point3::new(
            coord(self.min.x, self.max.x, self.resolution[0], ix),
            coord(self.min.y, self.max.y, self.resolution[1], iy),
            coord(self.min.z, self.max.z, self.resolution[2], iz),
        )
    }

    /// Enumeration index of the grid point nearest to `p`, clamped to the grid.
    pub fn nearest_index(&self, p: &Point3) -> usize {
        let lo = self.min.to_array();
        let q = p.to_array();
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let f = ((q[axis] - lo[axis]) / self.resolution[axis]).round();
            idx[axis] = f.clamp(0.0, (self.counts[axis] - 1) as f64) as usize;
        }
        idx[0] + self.counts[0] * (idx[1] + self.counts[1] * idx[2])
    }
}

/// Every grid point in enumeration order (x fastest).
pub fn grid_points(grid: &Grid3D) -> Vec<Point3> {
    (0..grid.len()).map(|i| grid.point(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn origin() -> Point3 {
        Point3::new(0.0, 0.0, 0.0)
    }

    #[test]
    fn tdoa_equidistant_is_zero() {
        let t = tdoa(
            &Point3::new(1.0, 0.0, 0.0),
            &origin(),
            &Point3::new(2.0, 0.0, 0.0),
            340.0,
        )
        .unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn tdoa_hand_value_and_antisymmetry() {
        let q = Point3::new(3.0, 0.0, 0.0);
        let ml = Point3::new(1.0, 0.0, 0.0);
        let t = tdoa(&q, &origin(), &ml, 340.0).unwrap();
        assert_relative_eq!(t, 1.0 / 340.0, max_relative = 1e-12);
        assert_relative_eq!(t, 2.9412e-3, max_relative = 1e-4);
        let swapped = tdoa(&q, &ml, &origin(), 340.0).unwrap();
        assert_eq!(swapped, -t);
    }

    #[test]
    fn tdoa_rejects_non_finite() {
        let bad = Point3::new(f64::NAN, 0.0, 0.0);
        assert!(matches!(
            tdoa(&bad, &origin(), &origin(), 340.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(tdoa(&origin(), &origin(), &Point3::new(f64::INFINITY, 0.0, 0.0), 340.0).is_err());
    }

    #[test]
    fn max_lag_two_mics() {
        let array = MicArray::new(vec![origin(), Point3::new(0.2, 0.0, 0.0)]).unwrap();
        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        assert_eq!(max_lag_samples(&array, &consts), 57);

        let array = MicArray::new(vec![origin(), Point3::new(0.34, 0.0, 0.0)]).unwrap();
        let consts = PhysicalConstants::new(340.0, 1000.0).unwrap();
        assert_eq!(max_lag_samples(&array, &consts), 1);
    }

    #[test]
    fn max_lag_circle_brute_force() {
        let array = MicArray::circular(Point3::new(2.0, 2.0, 0.73), 0.1, 8).unwrap();
        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        let mut best: f64 = 0.0;
        for k in 0..8 {
            for l in 0..8 {
                best = best.max(array.mics()[k].distance(&array.mics()[l]));
            }
        }
        assert_eq!((96000.0 * best / 340.0).ceil() as usize, 57);
        assert_eq!(max_lag_samples(&array, &consts), 57);
    }

    #[test]
    fn array_invariants() {
        assert!(MicArray::new(vec![origin()]).is_err());
        assert!(MicArray::new(vec![origin(), origin()]).is_err());
        let a = MicArray::new(vec![origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!(a.clone().with_labels(vec!["a".into()]).is_err());
        assert_eq!(
            a.with_labels(vec!["a".into(), "b".into()]).unwrap().labels().unwrap()[1],
            "b"
        );
    }

    #[test]
    fn pair_enumeration() {
        let line = |m: usize| MicArray::new((0..m).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        assert_eq!(enumerate_pairs(&line(2)), vec![(0, 1)]);
        assert_eq!(
            enumerate_pairs(&line(4)),
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
        assert_eq!(enumerate_pairs(&line(8)).len(), 28);
    }

    #[test]
    fn grid_counts() {
        let g = Grid3D::new(origin(), origin(), 0.1).unwrap();
        assert_eq!(grid_points(&g), vec![origin()]);

        let g = Grid3D::new(origin(), Point3::new(0.2, 0.1, 0.0), 0.1).unwrap();
        let pts = grid_points(&g);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1], Point3::new(0.1, 0.0, 0.0));
        assert_relative_eq!(pts[3].y, 0.1);
        assert_relative_eq!(pts[3].x, 0.0);

        let g = Grid3D::new(origin(), Point3::new(1.0, 1.0, 1.0), 0.1).unwrap();
        assert_eq!(g.len(), 1331);
        assert_eq!(g.point(1330), Point3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(Grid3D::new(Point3::new(1.0, 0.0, 0.0), origin(), 0.1).is_err());
        assert!(Grid3D::new(origin(), Point3::new(1.0, 1.0, 1.0), 0.0).is_err());
        assert!(Grid3D::new(origin(), Point3::new(1.0, 1.0, 1.0), -0.1).is_err());
    }

    #[test]
    fn nearest_index_roundtrip() {
        let g = Grid3D::new(Point3::new(-1.0, 0.5, 0.0), Point3::new(1.0, 2.0, 1.0), 0.1).unwrap();
        for i in [0, 7, 100, g.len() - 1] {
            assert_eq!(g.nearest_index(&g.point(i)), i);
        }
    }

    fn point() -> impl Strategy<Value = Point3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn tdoa_is_antisymmetric(q in point(), a in point(), b in point()) {
            let t1 = tdoa(&q, &a, &b, 340.0).unwrap();
            let t2 = tdoa(&q, &b, &a, 340.0).unwrap();
            prop_assert_eq!(t1, -t2);
        }

        #[test]
        fn tdoa_bounded_by_baseline(q in point(), a in point(), b in point()) {
            let t = tdoa(&q, &a, &b, 340.0).unwrap();
            prop_assert!(t.abs() <= a.distance(&b) / 340.0 + 1e-12);
        }

        #[test]
        fn grid_points_inside_bounds(
            lo in point(),
            ext in (0.0..3.0f64, 0.0..3.0f64, 0.0..3.0f64),
            res in 0.05..1.0f64,
        ) {
            let hi = lo.offset(ext.0, ext.1, ext.2);
            let g = Grid3D::new(lo, hi, res).unwrap();
            let pts = grid_points(&g);
            prop_assert_eq!(pts.len(), g.counts().iter().product::<usize>());
            for p in pts {
                prop_assert!(p.x >= lo.x && p.x <= hi.x);
                prop_assert!(p.y >= lo.y && p.y <= hi.y);
                prop_assert!(p.z >= lo.z && p.z <= hi.z);
            }
        }
    }

    #[test]
    fn max_lag_bounds_random_sources() {
        use rand::{Rng, SeedableRng};
        let array = MicArray::circular(Point3::new(2.0, 2.5, 0.73), 0.1, 8).unwrap();
        let consts = PhysicalConstants::new(340.0, 96000.0).unwrap();
        let bound = max_lag_samples(&array, &consts) as f64;
        let pairs = enumerate_pairs(&array);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let q = Point3::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
            );
            for &(k, l) in &pairs {
                let t = tdoa(&q, &array.mics()[k], &array.mics()[l], consts.c).unwrap();
                assert!((t * consts.fs).abs() <= bound);
            }
        }
    }
}
