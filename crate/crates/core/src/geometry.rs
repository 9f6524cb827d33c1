//! Grids, receiver rings and the source/medium profiles used to build datasets.
//!
//! Fields are stored row-major: index `row * n + col`, where `col` runs along
//! the first coordinate and `row` along the second. Cell `0` is the lower-left
//! cell of the square.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Uniform cell-centered sampling of the square `[lo, hi]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    lo: f64,
    hi: f64,
}

impl Grid {
    pub fn new(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 cells per axis, got {n}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "grid extent must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { n, lo, hi })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Number of cells, `n²`.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell width, which is also the distance between adjacent centers.
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing() * self.spacing()
    }

    /// Coordinate of the center of cell `i` along one axis.
    pub fn axis_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.spacing()
    }

    pub fn center(&self, index: usize) -> Point {
        let (row, col) = (index / self.n, index % self.n);
        [self.axis_center(col), self.axis_center(row)]
    }

    pub fn centers(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(|i| self.center(i))
    }

    /// True when `p` lies in the closed square `[lo, hi]²`.
    pub fn contains_closed(&self, p: Point) -> bool {
        p.iter().all(|&c| c >= self.lo && c <= self.hi)
    }
}

/// Real values co-indexed with the centers of a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(
                format!("{} values", grid.len()),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Point) -> f64) -> Self {
        Self {
            grid,
            values: grid.centers().map(f).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Pointwise square, e.g. `h -> h²`.
    pub fn squared(&self) -> Self {
        self.map(|v| v * v)
    }

    /// Pointwise square root with negative values clamped to zero.
    pub fn sqrt_clamped(&self) -> Self {
        self.map(|v| v.max(0.0).sqrt())
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        self.grid == other.grid
    }
}

/// Receivers evenly spaced on a circle centered at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverRing {
    radius: f64,
    points: Vec<Point>,
}

impl ReceiverRing {
    pub fn new(count: usize, radius: f64) -> Result<Self> {
        if count < 1 {
            return Err(Error::InvalidArgument(
                "receiver ring needs at least one receiver".into(),
            ));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "receiver radius must be positive, got {radius}"
            )));
        }
        let points = (0..count)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / count as f64;
                [radius * theta.cos(), radius * theta.sin()]
            })
            .collect();
        Ok(Self { radius, points })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

/// One of the three random disks supporting a piecewise-constant statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskSpec {
    pub center: Point,
    pub radius: f64,
    pub label: u8,
}

impl DiskSpec {
    /// Strict interior test.
    pub fn contains(&self, p: Point) -> bool {
        distance(p, self.center) < self.radius
    }
}

pub const DISK_RADIUS_MIN: f64 = 0.2;
pub const DISK_RADIUS_MAX: f64 = 0.4;

/// Draws three independent disks inside `[-1, 1]²`.
///
/// For each label the radius is drawn first, then both center coordinates
/// uniformly on `[-1 + r, 1 - r]`. Disks may overlap.
pub fn sample_disks<R: Rng + ?Sized>(rng: &mut R) -> [DiskSpec; 3] {
    let mut draw = |label: u8| {
        let radius = rng.random_range(DISK_RADIUS_MIN..=DISK_RADIUS_MAX);
        let a = rng.random_range(-1.0 + radius..=1.0 - radius);
        let b = rng.random_range(-1.0 + radius..=1.0 - radius);
        DiskSpec {
            center: [a, b],
            radius,
            label,
        }
    };
    let d1 = draw(1);
    let d2 = draw(2);
    let d3 = draw(3);
    [d1, d2, d3]
}

/// Paints disks in the given order; later disks overwrite earlier ones.
pub fn paint(disks: &[DiskSpec], grid: &Grid, value: impl Fn(u8) -> f64) -> ScalarField {
    ScalarField::from_fn(*grid, |p| {
        disks
            .iter()
            .rev()
            .find(|d| d.contains(p))
            .map_or(0.0, |d| value(d.label))
    })
}

/// Mean profile: `l` inside disk `l`, zero elsewhere.
pub fn paint_mean(disks: &[DiskSpec], grid: &Grid) -> ScalarField {
    paint(disks, grid, f64::from)
}

/// Standard-deviation profile: `1 + l/2` inside disk `l`, zero elsewhere.
pub fn paint_std(disks: &[DiskSpec], grid: &Grid) -> ScalarField {
    paint(disks, grid, |l| 1.0 + f64::from(l) / 2.0)
}

/// The fixed smooth profile `0.6 exp(-8 (r³ - 0.75 r²))`.
pub fn h_value(p: Point) -> f64 {
    let r2 = p[0] * p[0] + p[1] * p[1];
    0.6 * (-8.0 * (r2.powf(1.5) - 0.75 * r2)).exp()
}

pub fn h_profile(grid: &Grid) -> ScalarField {
    ScalarField::from_fn(*grid, h_value)
}

fn peaks(x1: f64, x2: f64) -> f64 {
    0.5 * (0.3 * (1.0 - x1).powi(2) * (-x1 * x1 - (x2 + 1.0).powi(2)).exp()
        - (0.2 * x1 - x1.powi(3) - x2.powi(5)) * (-x1 * x1 - x2 * x2).exp()
        - 0.03 * (-(x1 + 1.0).powi(2) - x2 * x2).exp())
}

/// Relative permittivity perturbation of the inhomogeneous medium.
pub fn eta_profile(p: Point) -> f64 {
    peaks(3.0 * p[0], 3.0 * p[1])
}

pub fn eta_field(grid: &Grid) -> ScalarField {
    ScalarField::from_fn(*grid, eta_profile)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    center: Point,
    semi_axes: [f64; 2],
    value: f64,
}

impl Ellipse {
    fn contains(&self, p: Point) -> bool {
        let u = (p[0] - self.center[0]) / self.semi_axes[0];
        let v = (p[1] - self.center[1]) / self.semi_axes[1];
        u * u + v * v < 1.0
    }
}

/// Five pairwise-disjoint disks used for the generalization check.
pub const FIVE_DISKS: [(Point, f64, u8); 5] = [
    ([-0.5, 0.5], 0.3, 1),
    ([0.5, 0.5], 0.25, 2),
    ([0.0, 0.0], 0.2, 3),
    ([-0.5, -0.5], 0.25, 2),
    ([0.5, -0.55], 0.3, 3),
];

const PHANTOM: [Ellipse; 3] = [
    Ellipse {
        center: [0.0, 0.0],
        semi_axes: [0.7, 0.9],
        value: 1.0,
    },
    Ellipse {
        center: [-0.25, 0.3],
        semi_axes: [0.15, 0.25],
        value: 2.0,
    },
    Ellipse {
        center: [0.25, -0.3],
        semi_axes: [0.2, 0.15],
        value: 3.0,
    },
];

/// Out-of-distribution test fields.
#[derive(Debug, Clone)]
pub struct GeneralizationSamples {
    pub five_disks: ScalarField,
    pub phantom: ScalarField,
}

pub fn generalization_samples(grid: &Grid) -> GeneralizationSamples {
    let disks: Vec<DiskSpec> = FIVE_DISKS
        .iter()
        .map(|&(center, radius, label)| DiskSpec { center, radius, label })
        .collect();
    let five_disks = paint_mean(&disks, grid);
    let phantom = ScalarField::from_fn(*grid, |p| {
        PHANTOM.iter().rev().find(|e| e.contains(p)).map_or(0.0, |e| e.value)
    });
    GeneralizationSamples { five_disks, phantom }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_grid() {
        let g = Grid::new(2, -1.0, 1.0).unwrap();
        let c: Vec<Point> = g.centers().collect();
        assert_eq!(c, vec![[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(g.cell_area(), 1.0);
    }

    #[test]
    fn grid_arithmetic() {
        let g = Grid::new(64, -1.0, 1.0).unwrap();
        assert_eq!(g.cell_area(), 1.0 / 1024.0);
        assert_eq!(g.center(0), [-1.0 + 1.0 / 64.0, -1.0 + 1.0 / 64.0]);
        let g = Grid::new(3, 0.0, 3.0).unwrap();
        assert_eq!(
            (0..3).map(|i| g.axis_center(i)).collect::<Vec<_>>(),
            vec![0.5, 1.5, 2.5]
        );
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::new(1, -1.0, 1.0).is_err());
        assert!(Grid::new(4, 1.0, 1.0).is_err());
        assert!(Grid::new(4, 1.0, -1.0).is_err());
    }

    #[test]
    fn ring_points() {
        let ring = ReceiverRing::new(32, 2.0).unwrap();
        assert_eq!(ring.count(), 32);
        assert_eq!(ring.points()[0], [2.0, 0.0]);
        assert_abs_diff_eq!(ring.points()[8][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ring.points()[8][1], 2.0, epsilon = 1e-12);
        for p in ring.points() {
            assert!(((p[0].hypot(p[1])) - 2.0).abs() <= 2.0 * 1e-12);
        }
        assert!(ReceiverRing::new(0, 2.0).is_err());
        assert!(ReceiverRing::new(4, 0.0).is_err());
    }

    #[test]
    fn later_disks_overwrite() {
        let grid = Grid::new(8, -1.0, 1.0).unwrap();
        let big = |label| DiskSpec {
            center: [0.0, 0.0],
            radius: 10.0,
            label,
        };
        let f = paint_mean(&[big(1), big(2)], &grid);
        assert!(f.values().iter().all(|&v| v == 2.0));

        let d1 = DiskSpec {
            center: [-0.5, 0.0],
            radius: 0.4,
            label: 1,
        };
        let d3 = DiskSpec {
            center: [-0.3, 0.0],
            radius: 0.3,
            label: 3,
        };
        let disks = [d1, d3];
        let mean = paint(&disks, &grid, f64::from);
        let std = paint_std(&disks, &grid);
        for (i, p) in grid.centers().enumerate() {
            let expected = if d3.contains(p) {
                3.0
            } else if d1.contains(p) {
                1.0
            } else {
                0.0
            };
            assert_eq!(mean.values()[i], expected);
            let expected_std = if d3.contains(p) {
                2.5
            } else if d1.contains(p) {
                1.5
            } else {
                0.0
            };
            assert_eq!(std.values()[i], expected_std);
        }
        let only_two = paint_std(
            &[DiskSpec {
                center: [0.0, 0.0],
                radius: 0.3,
                label: 2,
            }],
            &grid,
        );
        assert_eq!(only_two.values()[grid.len() / 2 + grid.n() / 2], 2.0);
    }

    #[test]
    fn h_profile_values() {
        assert_abs_diff_eq!(h_value([0.0, 0.0]), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(h_value([0.75, 0.0]), 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(h_value([1.0, 0.0]), 0.6 * (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(h_value([1.0, 0.0]), 0.081201, epsilon = 1e-6);
    }

    #[test]
    fn h_profile_is_radial() {
        let grid = Grid::new(64, -1.0, 1.0).unwrap();
        let h = h_profile(&grid);
        let n = grid.n();
        for row in 0..n {
            for col in 0..n {
                // mirror and transpose images have the same radius
                let v = h.values()[row * n + col];
                for (r2, c2) in [(col, row), (n - 1 - row, col), (row, n - 1 - col)] {
                    let w = h.values()[r2 * n + c2];
                    assert!((v - w).abs() <= 1e-12 * v.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn eta_values() {
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(eta_profile([0.0, 0.0]), 0.135 * e, epsilon = 1e-15);
        assert_abs_diff_eq!(eta_profile([0.0, 0.0]), 0.049664, epsilon = 1e-6);
        let expected = 0.5 * (1.2 * (-10.0f64).exp() + 26.4 * (-9.0f64).exp() - 0.03 * (-16.0f64).exp());
        assert_abs_diff_eq!(eta_profile([1.0, 0.0]), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(eta_profile([1.0, 0.0]), 0.0016, epsilon = 1e-4);
        for k in 0..360 {
            let t = k as f64 * PI / 180.0;
            for r in [3.0, 3.5, 5.0, 10.0] {
                assert!(eta_profile([r * t.cos(), r * t.sin()]).abs() < 1e-6);
            }
        }
    }

    fn components(field: &ScalarField) -> usize {
        let n = field.grid().n();
        let mut seen = vec![false; n * n];
        let mut count = 0;
        for start in 0..n * n {
            if seen[start] || field.values()[start] <= 0.0 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (r, c) = (i / n, i % n);
                let mut nbrs = Vec::with_capacity(4);
                if r > 0 {
                    nbrs.push(i - n);
                }
                if r + 1 < n {
                    nbrs.push(i + n);
                }
                if c > 0 {
                    nbrs.push(i - 1);
                }
                if c + 1 < n {
                    nbrs.push(i + 1);
                }
                for j in nbrs {
                    if !seen[j] && field.values()[j] > 0.0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn generalization_fields() {
        let grid = Grid::new(64, -1.0, 1.0).unwrap();
        let s = generalization_samples(&grid);
        assert_eq!(components(&s.five_disks), 5);
        assert!(s.five_disks.values().iter().all(|v| [0.0, 1.0, 2.0, 3.0].contains(v)));
        for (i, p) in grid.centers().enumerate() {
            if !PHANTOM[0].contains(p) {
                assert_eq!(s.phantom.values()[i], 0.0);
            }
        }
        for v in [1.0, 2.0, 3.0] {
            assert!(s.phantom.values().contains(&v));
        }
        let again = generalization_samples(&grid);
        assert_eq!(again.five_disks, s.five_disks);
        assert_eq!(again.phantom, s.phantom);
    }

    proptest! {
        #[test]
        fn sampled_disks_stay_inside(seed in any::<u64>()) {
            let disks = sample_disks(&mut SeedStream::new(seed).rng());
            for (l, d) in disks.iter().enumerate() {
                prop_assert_eq!(d.label as usize, l + 1);
                prop_assert!(d.radius >= DISK_RADIUS_MIN && d.radius <= DISK_RADIUS_MAX);
                for c in d.center {
                    prop_assert!(c - d.radius >= -1.0 - 1e-15 && c + d.radius <= 1.0 + 1e-15);
                }
            }
            let again = sample_disks(&mut SeedStream::new(seed).rng());
            prop_assert_eq!(disks, again);

            let grid = Grid::new(16, -1.5, 1.5).unwrap();
            let mean = paint_mean(&disks, &grid);
            prop_assert_eq!(&mean, &paint_mean(&disks, &grid));
            for (i, p) in grid.centers().enumerate() {
                if mean.values()[i] != 0.0 {
                    prop_assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
                }
            }
        }
    }
}
