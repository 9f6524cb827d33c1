//! Synthetic boundary measurements of the random wave field.
//!
//! Every simulator here is linear in the source density, so each wavenumber
//! is summarized by a response matrix `T` (receivers × source cells) with
//! `u(x_r) = Σ_c T[r, c] f_c`. For the homogeneous medium `T = G · ΔA`; for a
//! general medium it comes from the finite-difference solver. A realization
//! uses the density `f_c = g_c + h_c ξ_c / √ΔA` with iid standard normal `ξ`.

pub mod fdfd;

use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary::{self, MEASUREMENT_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::{eta_profile, Grid, ReceiverRing, ScalarField};
use crate::kernel::{self, KernelKind};
use crate::rng::SeedStream;
use crate::special::Complex;

pub use fdfd::{FdfdConfig, FdfdSolver};

/// Upper bound of `η` over the plane for the fixed inhomogeneous profile.
pub const ETA_UPPER_BOUND: f64 = 0.41;

/// Realizations drawn and multiplied as one block.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediumKind {
    Homogeneous,
    Inhomogeneous,
}

impl MediumKind {
    pub fn eta(self, p: [f64; 2]) -> f64 {
        match self {
            MediumKind::Homogeneous => 0.0,
            MediumKind::Inhomogeneous => eta_profile(p),
        }
    }

    /// Bound on `1 + η`, used to pick the finite-difference resolution.
    pub fn max_index(self) -> f64 {
        match self {
            MediumKind::Homogeneous => 1.0,
            MediumKind::Inhomogeneous => 1.0 + ETA_UPPER_BOUND,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MediumKind::Homogeneous => "homogeneous",
            MediumKind::Inhomogeneous => "inhomogeneous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Standard deviation `δ · RMS|u|` per wavenumber.
    Relative,
    /// Standard deviation `δ`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub mode: NoiseMode,
}

/// How white-noise draws relate across wavenumbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSharing {
    /// One source realization observed at every wavenumber.
    Shared,
    /// Fresh draws per wavenumber.
    PerWavenumber,
}

/// Linear map from source density on a grid to receiver values, one wavenumber.
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    wavenumber: f64,
    grid: Grid,
    values: Mat<Complex>,
}

impl ResponseMatrix {
    pub fn new(wavenumber: f64, grid: Grid, values: Mat<Complex>) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(Error::shape(grid.len(), values.ncols()));
        }
        Ok(Self {
            wavenumber,
            grid,
            values,
        })
    }

    /// `G(x_r, y_c) · ΔA`, the midpoint quadrature of the mild solution.
    pub fn homogeneous(grid: &Grid, ring: &ReceiverRing, kappa: f64) -> Result<Self> {
        let table = kernel::greens_table(grid, ring, kappa)?;
        let area = grid.cell_area();
        let values = Mat::from_fn(ring.count(), grid.len(), |r, c| table[r][c] * area);
        Self::new(kappa, *grid, values)
    }

    /// Finite-difference response in the given medium.
    pub fn medium(grid: &Grid, ring: &ReceiverRing, kappa: f64, medium: MediumKind, cfg: &FdfdConfig) -> Result<Self> {
        let solver = FdfdSolver::new(kappa, |p| medium.eta(p), medium.max_index(), cfg)?;
        Self::new(kappa, *grid, solver.transfer_matrix(grid, ring)?)
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn receivers(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Mat<Complex> {
        &self.values
    }

    pub fn apply(&self, density: &[f64]) -> Vec<Complex> {
        (0..self.receivers())
            .map(|r| density.iter().enumerate().map(|(c, f)| self.values[(r, c)] * f).sum())
            .collect()
    }
}

/// Builds one response matrix per wavenumber.
pub fn responses(
    grid: &Grid,
    ring: &ReceiverRing,
    wavenumbers: &[f64],
    medium: MediumKind,
    cfg: &FdfdConfig,
) -> Result<Vec<ResponseMatrix>> {
    wavenumbers
        .iter()
        .map(|&k| match medium {
            MediumKind::Homogeneous => ResponseMatrix::homogeneous(grid, ring, k),
            MediumKind::Inhomogeneous => ResponseMatrix::medium(grid, ring, k, medium, cfg),
        })
        .collect()
}

/// Complex receiver values indexed by (wavenumber, realization, receiver).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTensor {
    wavenumbers: Vec<f64>,
    ring: ReceiverRing,
    realizations: usize,
    values: Vec<Complex>,
    seed: Option<u64>,
    noise: Option<NoiseSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    /// `[wavenumbers, realizations, receivers]`
    shape: [usize; 3],
    wavenumbers: Vec<f64>,
    receiver_radius: f64,
    seed: Option<u64>,
    noise: Option<NoiseSpec>,
    layout: String,
}

impl MeasurementTensor {
    pub fn new(wavenumbers: Vec<f64>, ring: ReceiverRing, realizations: usize, values: Vec<Complex>) -> Result<Self> {
        let expected = wavenumbers.len() * realizations * ring.count();
        if values.len() != expected {
            return Err(Error::shape(expected, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement tensor"));
        }
        Ok(Self {
            wavenumbers,
            ring,
            realizations,
            values,
            seed: None,
            noise: None,
        })
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn ring(&self) -> &ReceiverRing {
        &self.ring
    }

    pub fn receivers(&self) -> usize {
        self.ring.count()
    }

    pub fn realizations(&self) -> usize {
        self.realizations
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn noise(&self) -> Option<NoiseSpec> {
        self.noise
    }

    pub fn values(&self) -> &[Complex] {
        &self.values
    }

    pub fn get(&self, wavenumber: usize, realization: usize, receiver: usize) -> Complex {
        self.values[(wavenumber * self.realizations + realization) * self.receivers() + receiver]
    }

    /// All values of one wavenumber, realization-major.
    pub fn slice(&self, wavenumber: usize) -> &[Complex] {
        let len = self.realizations * self.receivers();
        &self.values[wavenumber * len..(wavenumber + 1) * len]
    }

    /// Realization `i` at wavenumber `j`, one value per receiver.
    pub fn realization(&self, wavenumber: usize, i: usize) -> &[Complex] {
        let r = self.receivers();
        &self.slice(wavenumber)[i * r..(i + 1) * r]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = TensorHeader {
            shape: [self.wavenumbers.len(), self.realizations, self.receivers()],
            wavenumbers: self.wavenumbers.clone(),
            receiver_radius: self.ring.radius(),
            seed: self.seed,
            noise: self.noise,
            layout: "interleaved (re, im) f64 pairs, index (wavenumber, realization, receiver)".into(),
        };
        let flat: Vec<f64> = self.values.iter().flat_map(|v| [v.re, v.im]).collect();
        binary::write_container(path, MEASUREMENT_MAGIC, &header, &flat)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (h, flat): (TensorHeader, Vec<f64>) = binary::read_container(path, MEASUREMENT_MAGIC)?;
        if h.wavenumbers.len() != h.shape[0] || flat.len() != 2 * h.shape.iter().product::<usize>() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "payload does not match the declared shape".into(),
            });
        }
        let ring = ReceiverRing::new(h.shape[2], h.receiver_radius)?;
        let values = flat.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
        let mut t = Self::new(h.wavenumbers, ring, h.shape[1], values)?;
        t.seed = h.seed;
        t.noise = h.noise;
        Ok(t)
    }
}

fn check_sources(g: &ScalarField, h: &ScalarField, responses: &[ResponseMatrix]) -> Result<()> {
    if !g.same_grid(h) {
        return Err(Error::shape(
            format!("h on the {0}x{0} grid of g", g.grid().n()),
            format!("{0}x{0}", h.grid().n()),
        ));
    }
    if let Some(r) = responses.iter().find(|r| r.grid() != g.grid()) {
        return Err(Error::shape(
            format!("response grid {0}x{0}", g.grid().n()),
            format!("{0}x{0}", r.grid().n()),
        ));
    }
    Ok(())
}

fn draw_normals(stream: SeedStream, out: &mut [f64]) {
    let mut rng = stream.rng();
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Simulates `n` realizations at every wavenumber in `responses`.
///
/// Realization `i` draws its white noise from `stream.index(i)` (or a
/// per-wavenumber child of `stream` when `sharing` says so), so the result
/// does not depend on how work is scheduled.
pub fn simulate(
    responses: &[ResponseMatrix],
    g: &ScalarField,
    h: &ScalarField,
    ring: &ReceiverRing,
    n: usize,
    stream: SeedStream,
    sharing: NoiseSharing,
) -> Result<MeasurementTensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one realization is required".into()));
    }
    check_sources(g, h, responses)?;
    if let Some(r) = responses.iter().find(|r| r.receivers() != ring.count()) {
        return Err(Error::shape(ring.count(), r.receivers()));
    }
    let receivers = ring.count();
    let cells = g.grid().len();
    let scale = 1.0 / g.grid().cell_area().sqrt();
    let weights: Vec<f64> = h.values().iter().map(|v| v * scale).collect();
    let deterministic: Vec<Vec<Complex>> = responses.iter().map(|r| r.apply(g.values())).collect();
    let noisy = weights.iter().any(|w| *w != 0.0);

    // rows [Re T_j; Im T_j] diag(h/√ΔA) for each wavenumber j
    let stacked = |js: &[usize]| {
        Mat::from_fn(2 * receivers * js.len(), cells, |row, c| {
            let (j, rest) = (js[row / (2 * receivers)], row % (2 * receivers));
            let t = responses[j].values()[(rest % receivers, c)];
            let part = if rest < receivers { t.re } else { t.im };
            part * weights[c]
        })
    };
    let groups: Vec<(Vec<usize>, SeedStream)> = match sharing {
        NoiseSharing::Shared => vec![((0..responses.len()).collect(), stream)],
        NoiseSharing::PerWavenumber => (0..responses.len())
            .map(|j| (vec![j], stream.child("wavenumber").index(j as u64)))
            .collect(),
    };

    let mut values = vec![Complex::default(); responses.len() * n * receivers];
    for (js, group_stream) in &groups {
        let operator = noisy.then(|| stacked(js));
        let chunks: Vec<(usize, Mat<f64>)> = (0..n)
            .step_by(CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let len = CHUNK.min(n - start);
                let mut out = Mat::<f64>::zeros(2 * receivers * js.len(), len);
                if let Some(op) = &operator {
                    let mut xi = Mat::<f64>::zeros(cells, len);
                    let mut column = vec![0.0; cells];
                    for k in 0..len {
                        draw_normals(group_stream.index((start + k) as u64), &mut column);
                        for (c, v) in column.iter().enumerate() {
                            xi[(c, k)] = *v;
                        }
                    }
                    matmul(out.as_mut(), Accum::Replace, op.as_ref(), xi.as_ref(), 1.0, Par::Seq);
                }
                (start, out)
            })
            .collect();
        for (start, out) in chunks {
            for k in 0..out.ncols() {
                let i = start + k;
                for (slot, &j) in js.iter().enumerate() {
                    let base = slot * 2 * receivers;
                    for r in 0..receivers {
                        let noise = Complex::new(out[(base + r, k)], out[(base + receivers + r, k)]);
                        values[(j * n + i) * receivers + r] = deterministic[j][r] + noise;
                    }
                }
            }
        }
    }
    let mut tensor = MeasurementTensor::new(
        responses.iter().map(|r| r.wavenumber()).collect(),
        ring.clone(),
        n,
        values,
    )?;
    tensor.seed = Some(stream.seed());
    Ok(tensor)
}

/// Homogeneous-medium measurements from the Green's-function quadrature.
pub fn simulate_homogeneous(
    g: &ScalarField,
    h: &ScalarField,
    wavenumbers: &[f64],
    ring: &ReceiverRing,
    n: usize,
    stream: SeedStream,
    sharing: NoiseSharing,
) -> Result<MeasurementTensor> {
    let rs = responses(
        g.grid(),
        ring,
        wavenumbers,
        MediumKind::Homogeneous,
        &FdfdConfig::default(),
    )?;
    simulate(&rs, g, h, ring, n, stream, sharing)
}

/// Measurements in a medium, via finite-difference response matrices.
#[allow(clippy::too_many_arguments)]
pub fn simulate_medium(
    g: &ScalarField,
    h: &ScalarField,
    medium: MediumKind,
    wavenumbers: &[f64],
    ring: &ReceiverRing,
    n: usize,
    stream: SeedStream,
    sharing: NoiseSharing,
    cfg: &FdfdConfig,
) -> Result<MeasurementTensor> {
    let rs = wavenumbers
        .iter()
        .map(|&k| ResponseMatrix::medium(g.grid(), ring, k, medium, cfg))
        .collect::<Result<Vec<_>>>()?;
    simulate(&rs, g, h, ring, n, stream, sharing)
}

/// Reference path for [`simulate_medium`]: embeds each realization's source
/// density, solves, and interpolates at the receivers. One wavenumber, and
/// draws identical to [`simulate`] with a single response.
pub fn simulate_medium_direct(
    g: &ScalarField,
    h: &ScalarField,
    solver: &FdfdSolver,
    ring: &ReceiverRing,
    n: usize,
    stream: SeedStream,
) -> Result<MeasurementTensor> {
    if !g.same_grid(h) {
        return Err(Error::shape("h on the grid of g", "a different grid"));
    }
    let grid = g.grid();
    let scale = 1.0 / grid.cell_area().sqrt();
    let mut xi = vec![0.0; grid.len()];
    let mut values = Vec::with_capacity(n * ring.count());
    for i in 0..n {
        draw_normals(stream.index(i as u64), &mut xi);
        let density: Vec<Complex> = (0..grid.len())
            .map(|c| Complex::from(g.values()[c] + h.values()[c] * xi[c] * scale))
            .collect();
        let u = solver.solve(&solver.embed(grid, &density)?)?;
        for &p in ring.points() {
            values.push(solver.sample(&u, p)?);
        }
    }
    let mut t = MeasurementTensor::new(vec![solver.wavenumber()], ring.clone(), n, values)?;
    t.seed = Some(stream.seed());
    Ok(t)
}

fn rms(values: &[Complex]) -> f64 {
    (values.iter().map(|v| v.norm_sqr()).sum::<f64>() / values.len().max(1) as f64).sqrt()
}

/// Adds independent Gaussian noise to the real and imaginary parts.
pub fn add_noise(m: &MeasurementTensor, level: f64, mode: NoiseMode, stream: SeedStream) -> Result<MeasurementTensor> {
    if !(level.is_finite() && level >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be non-negative, got {level}"
        )));
    }
    let mut out = m.clone();
    out.noise = Some(NoiseSpec { level, mode });
    if level == 0.0 {
        return Ok(out);
    }
    let per = m.realizations * m.receivers();
    for j in 0..m.wavenumbers.len() {
        let std = match mode {
            NoiseMode::Relative => level * rms(m.slice(j)),
            NoiseMode::Absolute => level,
        };
        let mut rng = stream.index(j as u64).rng();
        for v in &mut out.values[j * per..(j + 1) * per] {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex::new(std * re, std * im);
        }
    }
    Ok(out)
}

/// Per-wavenumber stage-one data vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneData {
    pub kind: KernelKind,
    pub data: Vec<Vec<f64>>,
}

/// Sample mean of `Re u` (mean kind) or `V(Re u) - V(Im u)` with divisor
/// `N - 1` (variance kind), per wavenumber and receiver.
pub fn reduce(m: &MeasurementTensor, kind: KernelKind) -> Result<StageOneData> {
    let n = m.realizations;
    if kind == KernelKind::Variance && n < 2 {
        return Err(Error::InvalidArgument(
            "variance data needs at least two realizations".into(),
        ));
    }
    let receivers = m.receivers();
    let data = (0..m.wavenumbers.len())
        .map(|j| {
            (0..receivers)
                .map(|r| {
                    let column = || (0..n).map(move |i| m.get(j, i, r));
                    match kind {
                        KernelKind::Mean => column().map(|v| v.re).sum::<f64>() / n as f64,
                        KernelKind::Variance => {
                            // shifted by the first realization so identical
                            // realizations give exactly zero
                            let first = m.get(j, 0, r);
                            let shift = column().map(|v| v - first).sum::<Complex>() / n as f64;
                            let (sr, si) = column().fold((0.0, 0.0), |(a, b), v| {
                                let d = v - first - shift;
                                (a + d.re * d.re, b + d.im * d.im)
                            });
                            (sr - si) / (n - 1) as f64
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(StageOneData { kind, data })
}
