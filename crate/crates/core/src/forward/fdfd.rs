//! Frequency-domain finite differences for `Δu + κ²(1 + η)u = f` on a square
//! truncated by a perfectly matched layer.
//!
//! Unknowns live on the interior nodes of a uniform node grid covering
//! `[-a, a]²`; the outer boundary is homogeneous Dirichlet. Away from the
//! layer the fourth-order compact (Mehrstellen) nine-point scheme is used.
//! Nodes inside the layer, or with a stencil reaching into it, fall back to
//! the five-point stretched-coordinate form
//! `∂x(sy/sx ∂x u) + ∂y(sx/sy ∂y u) + κ² sx sy (1 + η) u = sx sy f`,
//! with `s = 1 + iσ/κ` and `σ(t) = σ_max (t/thickness)²`.
//!
//! Point masses at source-cell centers are spread to nodes, and receivers
//! are read back, with tensor cubic Lagrange weights.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, Point, ReceiverRing};
use crate::special::Complex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdfdConfig {
    /// The simulation square is `[-half_width, half_width]²`.
    pub half_width: f64,
    pub pml_thickness: f64,
    /// Nodes per local wavelength at the largest `κ√(1 + η)`.
    pub points_per_wavelength: f64,
    /// Lower bound on nodes across the absorbing layer.
    pub min_pml_nodes: usize,
    /// Peak absorption `σ_max` of the quadratic ramp.
    pub pml_strength: f64,
}

impl Default for FdfdConfig {
    fn default() -> Self {
        Self {
            half_width: 3.0,
            pml_thickness: 0.5,
            points_per_wavelength: 12.0,
            min_pml_nodes: 12,
            pml_strength: 40.0,
        }
    }
}

impl FdfdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("fdfd config: {what}")));
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return bad("half_width must be positive");
        }
        if !(self.pml_thickness > 0.0 && self.pml_thickness < self.half_width) {
            return bad("pml_thickness must lie in (0, half_width)");
        }
        if self.points_per_wavelength.is_nan() || self.points_per_wavelength < 4.0 {
            return bad("points_per_wavelength must be at least 4");
        }
        if self.min_pml_nodes < 2 {
            return bad("min_pml_nodes must be at least 2");
        }
        if !(self.pml_strength.is_finite() && self.pml_strength > 0.0) {
            return bad("pml_strength must be positive");
        }
        Ok(())
    }

    /// Number of node intervals per axis for wavenumber `kappa` in a medium
    /// whose largest `1 + η` is `max_index`.
    pub fn intervals(&self, kappa: f64, max_index: f64) -> usize {
        let wavelength = 2.0 * std::f64::consts::PI / (kappa * max_index.max(1.0).sqrt());
        let h = (wavelength / self.points_per_wavelength).min(self.pml_thickness / self.min_pml_nodes as f64);
        (2.0 * self.half_width / h).ceil() as usize
    }
}

/// Node grid `lo + i h`, `i = 0..=intervals`; unknowns are the interior nodes.
#[derive(Debug, Clone, Copy)]
struct Nodes {
    intervals: usize,
    lo: f64,
    h: f64,
}

impl Nodes {
    fn side(&self) -> usize {
        self.intervals - 1
    }

    fn len(&self) -> usize {
        self.side() * self.side()
    }

    fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.h
    }

    /// Unknown index of node `(i, j)` (x index, y index), if interior.
    fn unknown(&self, i: isize, j: isize) -> Option<usize> {
        let m = self.intervals as isize;
        (i > 0 && i < m && j > 0 && j < m).then(|| (j as usize - 1) * self.side() + (i as usize - 1))
    }

    /// Cubic Lagrange stencil for one coordinate: first node index and weights.
    fn cubic(&self, t: f64) -> (isize, [f64; 4]) {
        let s = (t - self.lo) / self.h;
        let base = s.floor() as isize - 1;
        let u = s - (base + 1) as f64;
        // nodes at offsets -1, 0, 1, 2 relative to floor(s)
        let w = [
            -u * (u - 1.0) * (u - 2.0) / 6.0,
            (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
            -(u + 1.0) * u * (u - 2.0) / 2.0,
            (u + 1.0) * u * (u - 1.0) / 6.0,
        ];
        (base, w)
    }

    /// Unknowns and weights of the 4×4 interpolation stencil at `p`.
    fn stencil(&self, p: Point) -> Vec<(usize, f64)> {
        let (bx, wx) = self.cubic(p[0]);
        let (by, wy) = self.cubic(p[1]);
        let mut out = Vec::with_capacity(16);
        for (b, wyb) in wy.iter().enumerate() {
            for (a, wxa) in wx.iter().enumerate() {
                if let Some(u) = self.unknown(bx + a as isize, by + b as isize) {
                    out.push((u, wxa * wyb));
                }
            }
        }
        out
    }
}

/// A factorized FDFD operator for one `(κ, η)` pair, reusable across
/// right-hand sides and shareable between threads.
pub struct FdfdSolver {
    kappa: f64,
    nodes: Nodes,
    interior_limit: f64,
    /// Per unknown: true when the compact scheme is used.
    compact: Vec<bool>,
    lu: Lu<usize, Complex>,
}

impl std::fmt::Debug for FdfdSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FdfdSolver")
            .field("kappa", &self.kappa)
            .field("intervals", &self.nodes.intervals)
            .finish()
    }
}

impl FdfdSolver {
    /// Assembles and factorizes the operator. `eta` is sampled at nodes;
    /// `max_index` bounds `1 + η` and sets the resolution.
    pub fn new(kappa: f64, eta: impl Fn(Point) -> f64, max_index: f64, cfg: &FdfdConfig) -> Result<Self> {
        cfg.validate()?;
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "wavenumber must be positive, got {kappa}"
            )));
        }
        let intervals = cfg.intervals(kappa, max_index);
        let nodes = Nodes {
            intervals,
            lo: -cfg.half_width,
            h: 2.0 * cfg.half_width / intervals as f64,
        };
        let interior_limit = cfg.half_width - cfg.pml_thickness;
        let sigma = |t: f64| {
            let depth = t.abs() - interior_limit;
            if depth > 0.0 {
                cfg.pml_strength * (depth / cfg.pml_thickness).powi(2)
            } else {
                0.0
            }
        };
        let stretch = |t: f64| Complex::new(1.0, sigma(t) / kappa);
        let h = nodes.h;
        let kh2 = (kappa * h).powi(2);
        let side = nodes.side();
        let mut compact = vec![false; nodes.len()];
        let mut triplets: Vec<Triplet<usize, usize, Complex>> = Vec::with_capacity(9 * nodes.len());
        let index = |t: f64| 1.0 + t;
        for j in 1..intervals {
            for i in 1..intervals {
                let row = nodes.unknown(i as isize, j as isize).expect("interior");
                let (x, y) = (nodes.coord(i), nodes.coord(j));
                let reach = x.abs().max(y.abs()) + h;
                let mut push = |di: isize, dj: isize, v: Complex| {
                    if let Some(col) = nodes.unknown(i as isize + di, j as isize + dj) {
                        triplets.push(Triplet::new(row, col, v));
                    }
                };
                if reach <= interior_limit {
                    compact[row] = true;
                    let at = |di: isize, dj: isize| index(eta([x + di as f64 * h, y + dj as f64 * h]));
                    push(0, 0, Complex::from(-10.0 / 3.0 + kh2 * (2.0 / 3.0) * at(0, 0)));
                    for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                        push(di, dj, Complex::from(2.0 / 3.0 + kh2 / 12.0 * at(di, dj)));
                    }
                    for (di, dj) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                        push(di, dj, Complex::from(1.0 / 6.0));
                    }
                } else {
                    let (sx, sy) = (stretch(x), stretch(y));
                    let e = sy / stretch(x + 0.5 * h);
                    let w = sy / stretch(x - 0.5 * h);
                    let n = sx / stretch(y + 0.5 * h);
                    let s = sx / stretch(y - 0.5 * h);
                    push(1, 0, e);
                    push(-1, 0, w);
                    push(0, 1, n);
                    push(0, -1, s);
                    push(0, 0, -(e + w + n + s) + sx * sy * kh2 * index(eta([x, y])));
                }
            }
        }
        if triplets.iter().any(|t| !t.val.is_finite()) {
            return Err(Error::NonFinite("medium coefficients"));
        }
        let size = side;
        let factorization = |reason: String| Error::Factorization {
            wavenumber: kappa,
            size,
            reason,
        };
        let matrix = SparseColMat::<usize, Complex>::try_new_from_triplets(nodes.len(), nodes.len(), &triplets)
            .map_err(|e| factorization(format!("assembly: {e:?}")))?;
        let lu = matrix.sp_lu().map_err(|e| factorization(format!("{e:?}")))?;
        Ok(Self {
            kappa,
            nodes,
            interior_limit,
            compact,
            lu,
        })
    }

    pub fn wavenumber(&self) -> f64 {
        self.kappa
    }

    /// Node intervals per axis.
    pub fn intervals(&self) -> usize {
        self.nodes.intervals
    }

    pub fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    fn check_inside(&self, p: Point, what: &str) -> Result<()> {
        if p.iter().all(|c| c.abs() + 2.0 * self.nodes.h <= self.interior_limit) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} ({:.4}, {:.4}) is too close to the absorbing layer",
                p[0], p[1]
            )))
        }
    }

    /// Node density of point masses `mass_c` placed at `points_c`.
    pub fn spread(&self, points: &[Point], masses: &[Complex]) -> Result<Vec<Complex>> {
        if points.len() != masses.len() {
            return Err(Error::shape(points.len(), masses.len()));
        }
        let scale = 1.0 / (self.nodes.h * self.nodes.h);
        let mut f = vec![Complex::default(); self.unknowns()];
        for (p, m) in points.iter().zip(masses) {
            self.check_inside(*p, "source")?;
            for (u, w) in self.nodes.stencil(*p) {
                f[u] += m * (w * scale);
            }
        }
        Ok(f)
    }

    /// Node density of a cell-wise constant source density on `grid`,
    /// each cell lumped to its center.
    pub fn embed(&self, grid: &Grid, density: &[Complex]) -> Result<Vec<Complex>> {
        if density.len() != grid.len() {
            return Err(Error::shape(grid.len(), density.len()));
        }
        let area = grid.cell_area();
        let points: Vec<Point> = grid.centers().collect();
        let masses: Vec<Complex> = density.iter().map(|v| v * area).collect();
        self.spread(&points, &masses)
    }

    /// Scaled right-hand side `h² (1 + h²/12 Δ_h) f` on compact rows, `h² f`
    /// elsewhere (sources never reach the layer).
    fn rhs(&self, f: &[Complex]) -> Vec<Complex> {
        let h2 = self.nodes.h * self.nodes.h;
        let side = self.nodes.side() as isize;
        (0..f.len())
            .map(|u| {
                if !self.compact[u] {
                    return f[u] * h2;
                }
                let (i, j) = ((u as isize % side) + 1, (u as isize / side) + 1);
                let edges: Complex = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .filter_map(|(di, dj)| self.nodes.unknown(i + di, j + dj))
                    .map(|v| f[v])
                    .sum();
                (f[u] * (2.0 / 3.0) + edges / 12.0) * h2
            })
            .collect()
    }

    /// Transpose of [`Self::rhs`].
    fn rhs_transpose(&self, z: &[Complex]) -> Vec<Complex> {
        let h2 = self.nodes.h * self.nodes.h;
        let side = self.nodes.side() as isize;
        let mut y = vec![Complex::default(); z.len()];
        for u in 0..z.len() {
            if !self.compact[u] {
                y[u] += z[u] * h2;
                continue;
            }
            let (i, j) = ((u as isize % side) + 1, (u as isize / side) + 1);
            y[u] += z[u] * (2.0 / 3.0 * h2);
            for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(v) = self.nodes.unknown(i + di, j + dj) {
                    y[v] += z[u] * (h2 / 12.0);
                }
            }
        }
        y
    }

    /// Solves for a node source density, returning node values of `u`.
    pub fn solve(&self, f: &[Complex]) -> Result<Vec<Complex>> {
        if f.len() != self.unknowns() {
            return Err(Error::shape(self.unknowns(), f.len()));
        }
        let b = self.rhs(f);
        let mut rhs = Mat::from_fn(b.len(), 1, |r, _| b[r]);
        self.lu.solve_in_place(rhs.as_mut());
        let u: Vec<Complex> = (0..rhs.nrows()).map(|r| rhs[(r, 0)]).collect();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fdfd solve"));
        }
        Ok(u)
    }

    /// Interpolated value of a node field at `p`.
    pub fn sample(&self, u: &[Complex], p: Point) -> Result<Complex> {
        self.check_inside(p, "receiver")?;
        Ok(self.nodes.stencil(p).into_iter().map(|(v, w)| u[v] * w).sum())
    }

    /// Response matrix `T` (receivers × cells) with
    /// `u(x_r) = Σ_c T[r, c] · f_c` for a cell-wise constant density `f` on
    /// `grid`. Built from one transposed solve per receiver, so a batch of
    /// source realizations costs a matrix product instead of a solve each.
    pub fn transfer_matrix(&self, grid: &Grid, ring: &ReceiverRing) -> Result<Mat<Complex>> {
        let n = self.unknowns();
        let mut w = Mat::<Complex>::zeros(n, ring.count());
        for (r, p) in ring.points().iter().enumerate() {
            self.check_inside(*p, "receiver")?;
            for (v, wt) in self.nodes.stencil(*p) {
                w[(v, r)] += Complex::from(wt);
            }
        }
        self.lu.solve_transpose_in_place(w.as_mut());
        let scale = grid.cell_area() / (self.nodes.h * self.nodes.h);
        let stencils = grid
            .centers()
            .map(|p| {
                self.check_inside(p, "source")?;
                Ok(self.nodes.stencil(p))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = Mat::<Complex>::zeros(ring.count(), grid.len());
        for r in 0..ring.count() {
            let z: Vec<Complex> = (0..n).map(|v| w[(v, r)]).collect();
            let y = self.rhs_transpose(&z);
            for (c, st) in stencils.iter().enumerate() {
                t[(r, c)] = st.iter().map(|&(v, wt)| y[v] * wt).sum::<Complex>() * scale;
            }
        }
        if (0..t.nrows()).any(|r| (0..t.ncols()).any(|c| !t[(r, c)].is_finite())) {
            return Err(Error::NonFinite("transfer matrix"));
        }
        Ok(t)
    }
}
