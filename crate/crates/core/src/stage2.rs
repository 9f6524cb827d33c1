//! Linear stage-two predictors mapping stage-one images to refined images.
//!
//! Images are flattened row-major and stacked as columns of `cells × M`
//! snapshot matrices.

use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::binary::{self, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::ScalarField;
use crate::linalg::{self, RANK_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Dmd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Dmd => "dmd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Method::Pca),
            "dmd" => Ok(Method::Dmd),
            other => Err(Error::InvalidArgument(format!("unknown stage-two method {other:?}"))),
        }
    }
}

/// Stacks fields as columns. All fields must share one grid.
pub fn snapshot_matrix(fields: &[ScalarField]) -> Result<Mat<f64>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no snapshots given".into()))?;
    if let Some(f) = fields.iter().find(|f| !f.same_grid(first)) {
        return Err(Error::shape(
            format!("{0}x{0} grid", first.grid().n()),
            format!("{0}x{0}", f.grid().n()),
        ));
    }
    let cells = first.grid().len();
    Ok(Mat::from_fn(cells, fields.len(), |r, c| fields[c].values()[r]))
}

fn check_pair(x: &Mat<f64>, y: &Mat<f64>) -> Result<()> {
    if x.nrows() != y.nrows() || x.ncols() != y.ncols() {
        return Err(Error::shape(
            format!("{}x{} outputs", x.nrows(), x.ncols()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    if !(0..x.ncols()).all(|c| (0..x.nrows()).all(|r| x[(r, c)].is_finite() && y[(r, c)].is_finite())) {
        return Err(Error::NonFinite("stage-two training data"));
    }
    Ok(())
}

fn column_mean(a: &Mat<f64>) -> Vec<f64> {
    let m = a.ncols() as f64;
    (0..a.nrows())
        .map(|r| (0..a.ncols()).map(|c| a[(r, c)]).sum::<f64>() / m)
        .collect()
}

/// Regression through the leading joint principal components of the
/// separately centered, stacked input/output snapshots.
#[derive(Debug, Clone)]
pub struct PcaModel {
    requested_rank: usize,
    x_mean: Vec<f64>,
    y_mean: Vec<f64>,
    psi_x: Mat<f64>,
    psi_y: Mat<f64>,
    /// Pseudo-inverse of `psi_x`, `rank × cells`.
    psi_x_pinv: Mat<f64>,
}

impl PcaModel {
    /// Keeps at most `rank` components; the effective rank is clamped to the
    /// numerical rank of the stacked centered data.
    pub fn fit(x: &Mat<f64>, y: &Mat<f64>, rank: usize) -> Result<Self> {
        check_pair(x, y)?;
        if x.ncols() < 2 {
            return Err(Error::InvalidArgument(format!(
                "PCA needs at least 2 samples, got {}",
                x.ncols()
            )));
        }
        if rank == 0 {
            return Err(Error::InvalidArgument("PCA rank must be positive".into()));
        }
        let (x_mean, y_mean) = (column_mean(x), column_mean(y));
        let cells = x.nrows();
        let stacked = Mat::from_fn(2 * cells, x.ncols(), |r, c| {
            if r < cells {
                x[(r, c)] - x_mean[r]
            } else {
                y[(r - cells, c)] - y_mean[r - cells]
            }
        });
        let svd = linalg::truncated_svd(stacked.as_ref(), rank)?;
        if svd.s.is_empty() {
            return Err(Error::Numeric("centered training data is identically zero".into()));
        }
        let s = svd.s.len();
        let psi_x = Mat::from_fn(cells, s, |r, k| svd.u[(r, k)]);
        let psi_y = Mat::from_fn(cells, s, |r, k| svd.u[(cells + r, k)]);
        Self::from_parts(rank, x_mean, y_mean, psi_x, psi_y)
    }

    fn from_parts(
        requested_rank: usize,
        x_mean: Vec<f64>,
        y_mean: Vec<f64>,
        psi_x: Mat<f64>,
        psi_y: Mat<f64>,
    ) -> Result<Self> {
        let psi_x_pinv = linalg::pseudo_inverse(psi_x.as_ref())?;
        Ok(Self {
            requested_rank,
            x_mean,
            y_mean,
            psi_x,
            psi_y,
            psi_x_pinv,
        })
    }

    pub fn rank(&self) -> usize {
        self.psi_x.ncols()
    }

    pub fn requested_rank(&self) -> usize {
        self.requested_rank
    }

    pub fn cells(&self) -> usize {
        self.x_mean.len()
    }

    pub fn x_mean(&self) -> &[f64] {
        &self.x_mean
    }

    pub fn y_mean(&self) -> &[f64] {
        &self.y_mean
    }

    /// Input and output blocks of the joint basis.
    pub fn basis(&self) -> (&Mat<f64>, &Mat<f64>) {
        (&self.psi_x, &self.psi_y)
    }

    /// `ȳ + Ψ_Y Ψ_X† (x − x̄)`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cells() {
            return Err(Error::shape(self.cells(), x.len()));
        }
        let centered: Vec<f64> = x.iter().zip(&self.x_mean).map(|(a, b)| a - b).collect();
        let coeffs = linalg::mat_vec(self.psi_x_pinv.as_ref(), &centered);
        let out = linalg::mat_vec(self.psi_y.as_ref(), &coeffs);
        Ok(out.iter().zip(&self.y_mean).map(|(a, b)| a + b).collect())
    }
}

/// Best-fit linear operator through a truncated decomposition of the inputs.
/// Uses the raw, uncentered snapshots.
#[derive(Debug, Clone)]
pub struct DmdModel {
    requested_rank: usize,
    /// Leading left singular vectors of the inputs, `cells × rank`.
    modes: Mat<f64>,
    /// `Y V Σ⁻¹`, `cells × rank`.
    factor: Mat<f64>,
    singular_values: Vec<f64>,
}

impl DmdModel {
    pub fn fit(x: &Mat<f64>, y: &Mat<f64>, rank: usize) -> Result<Self> {
        check_pair(x, y)?;
        if x.ncols() == 0 || rank == 0 {
            return Err(Error::InvalidArgument(
                "DMD needs at least one sample and a positive rank".into(),
            ));
        }
        let svd = linalg::truncated_svd(x.as_ref(), rank)?;
        if svd.s.is_empty() {
            return Err(Error::Numeric("input snapshots are identically zero".into()));
        }
        let yv = linalg::mul(y.as_ref(), svd.v.as_ref());
        let factor = Mat::from_fn(yv.nrows(), yv.ncols(), |r, k| yv[(r, k)] / svd.s[k]);
        Ok(Self {
            requested_rank: rank,
            modes: svd.u,
            factor,
            singular_values: svd.s,
        })
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn requested_rank(&self) -> usize {
        self.requested_rank
    }

    pub fn cells(&self) -> usize {
        self.modes.nrows()
    }

    pub fn modes(&self) -> &Mat<f64> {
        &self.modes
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Reduced operator `U*Y V Σ⁻¹`, `rank × rank`.
    pub fn reduced_operator(&self) -> Mat<f64> {
        linalg::mul(self.modes.transpose(), self.factor.as_ref())
    }

    /// `Y V Σ⁻¹ U* x`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cells() {
            return Err(Error::shape(self.cells(), x.len()));
        }
        let coeffs = linalg::mat_t_vec(self.modes.as_ref(), x);
        Ok(linalg::mat_vec(self.factor.as_ref(), &coeffs))
    }
}

/// A fitted stage-two predictor.
#[derive(Debug, Clone)]
pub enum Stage2Model {
    Pca(PcaModel),
    Dmd(DmdModel),
}

/// JSON header of a serialized model. Payload layout (all `f64`, matrices
/// column-major):
///
/// - pca: `x_mean[cells]`, `y_mean[cells]`, `psi_x[cells × rank]`, `psi_y[cells × rank]`
/// - dmd: `singular_values[rank]`, `modes[cells × rank]`, `factor[cells × rank]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub method: Method,
    pub grid_n: usize,
    pub cells: usize,
    pub rank: usize,
    pub requested_rank: usize,
    pub rank_tolerance: f64,
    pub centered: bool,
}

fn push_matrix(out: &mut Vec<f64>, m: &Mat<f64>) {
    for c in 0..m.ncols() {
        out.extend((0..m.nrows()).map(|r| m[(r, c)]));
    }
}

fn take_matrix(values: &mut &[f64], rows: usize, cols: usize) -> Mat<f64> {
    let (head, tail) = values.split_at(rows * cols);
    *values = tail;
    Mat::from_fn(rows, cols, |r, c| head[c * rows + r])
}

fn take_vec(values: &mut &[f64], len: usize) -> Vec<f64> {
    let (head, tail) = values.split_at(len);
    *values = tail;
    head.to_vec()
}

impl Stage2Model {
    pub fn fit(method: Method, x: &Mat<f64>, y: &Mat<f64>, rank: usize) -> Result<Self> {
        Ok(match method {
            Method::Pca => Stage2Model::Pca(PcaModel::fit(x, y, rank)?),
            Method::Dmd => Stage2Model::Dmd(DmdModel::fit(x, y, rank)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Stage2Model::Pca(_) => Method::Pca,
            Stage2Model::Dmd(_) => Method::Dmd,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Stage2Model::Pca(m) => m.rank(),
            Stage2Model::Dmd(m) => m.rank(),
        }
    }

    pub fn requested_rank(&self) -> usize {
        match self {
            Stage2Model::Pca(m) => m.requested_rank(),
            Stage2Model::Dmd(m) => m.requested_rank(),
        }
    }

    pub fn cells(&self) -> usize {
        match self {
            Stage2Model::Pca(m) => m.cells(),
            Stage2Model::Dmd(m) => m.cells(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Stage2Model::Pca(m) => m.predict(x),
            Stage2Model::Dmd(m) => m.predict(x),
        }
    }

    pub fn predict_field(&self, x: &ScalarField) -> Result<ScalarField> {
        ScalarField::new(*x.grid(), self.predict(x.values())?)
    }

    pub fn header(&self) -> ModelHeader {
        let cells = self.cells();
        ModelHeader {
            method: self.method(),
            grid_n: (cells as f64).sqrt().round() as usize,
            cells,
            rank: self.rank(),
            requested_rank: self.requested_rank(),
            rank_tolerance: RANK_TOLERANCE,
            centered: self.method() == Method::Pca,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        match self {
            Stage2Model::Pca(m) => {
                payload.extend_from_slice(&m.x_mean);
                payload.extend_from_slice(&m.y_mean);
                push_matrix(&mut payload, &m.psi_x);
                push_matrix(&mut payload, &m.psi_y);
            }
            Stage2Model::Dmd(m) => {
                payload.extend_from_slice(&m.singular_values);
                push_matrix(&mut payload, &m.modes);
                push_matrix(&mut payload, &m.factor);
            }
        }
        binary::encode(MODEL_MAGIC, &self.header(), &payload)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binary::write_bytes(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, payload): (ModelHeader, Vec<f64>) = binary::read_container(path, MODEL_MAGIC)?;
        let (cells, rank) = (header.cells, header.rank);
        let expected = match header.method {
            Method::Pca => 2 * cells + 2 * cells * rank,
            Method::Dmd => rank + 2 * cells * rank,
        };
        if payload.len() != expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "model payload holds {} values, header implies {expected}",
                    payload.len()
                ),
            });
        }
        let mut rest = payload.as_slice();
        Ok(match header.method {
            Method::Pca => {
                let x_mean = take_vec(&mut rest, cells);
                let y_mean = take_vec(&mut rest, cells);
                let psi_x = take_matrix(&mut rest, cells, rank);
                let psi_y = take_matrix(&mut rest, cells, rank);
                Stage2Model::Pca(PcaModel::from_parts(
                    header.requested_rank,
                    x_mean,
                    y_mean,
                    psi_x,
                    psi_y,
                )?)
            }
            Method::Dmd => {
                let singular_values = take_vec(&mut rest, rank);
                let modes = take_matrix(&mut rest, cells, rank);
                let factor = take_matrix(&mut rest, cells, rank);
                Stage2Model::Dmd(DmdModel {
                    requested_rank: header.requested_rank,
                    modes,
                    factor,
                    singular_values,
                })
            }
        })
    }
}

/// Ranks tried by automatic selection; values above the sample count are
/// clamped by the fit.
pub const RANK_CANDIDATES: [usize; 11] = [5, 10, 15, 20, 25, 30, 40, 50, 60, 80, 100];

/// Folds used by automatic rank selection.
pub const RANK_FOLDS: usize = 5;

/// Cross-validated error of each candidate rank on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub method: Method,
    pub folds: usize,
    /// `(rank, mean relative L1 error on held-out columns)`, in candidate order.
    pub scores: Vec<(usize, f64)>,
    pub best: usize,
}

/// Picks the rank with the lowest mean relative L1 error over `folds`
/// contiguous column folds. Ties go to the smaller rank.
pub fn select_rank(
    method: Method,
    x: &Mat<f64>,
    y: &Mat<f64>,
    candidates: &[usize],
    folds: usize,
) -> Result<RankSelection> {
    use rayon::prelude::*;

    check_pair(x, y)?;
    let m = x.ncols();
    if folds < 2 || folds > m {
        return Err(Error::InvalidArgument(format!("need 2 <= folds <= {m}, got {folds}")));
    }
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::InvalidArgument(
            "rank candidates must be nonempty and positive".into(),
        ));
    }
    let bounds: Vec<(usize, usize)> = (0..folds).map(|f| (f * m / folds, (f + 1) * m / folds)).collect();
    let fold_error = |rank: usize, (lo, hi): (usize, usize)| -> Result<f64> {
        let keep = m - (hi - lo);
        let pick = |c: usize| if c < lo { c } else { c + (hi - lo) };
        let xt = Mat::from_fn(x.nrows(), keep, |r, c| x[(r, pick(c))]);
        let yt = Mat::from_fn(y.nrows(), keep, |r, c| y[(r, pick(c))]);
        let model = Stage2Model::fit(method, &xt, &yt, rank)?;
        let mut total = 0.0;
        for c in lo..hi {
            let input: Vec<f64> = (0..x.nrows()).map(|r| x[(r, c)]).collect();
            let pred = model.predict(&input)?;
            let denom: f64 = (0..y.nrows()).map(|r| y[(r, c)].abs()).sum();
            if denom == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "training target {c} is identically zero"
                )));
            }
            total += pred.iter().enumerate().map(|(r, p)| (p - y[(r, c)]).abs()).sum::<f64>() / denom;
        }
        Ok(total)
    };
    let scores = candidates
        .par_iter()
        .map(|&rank| {
            let total = bounds.iter().map(|&b| fold_error(rank, b)).sum::<Result<f64>>()?;
            Ok((rank, total / m as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|s| s.0)
        .expect("candidates are nonempty");
    Ok(RankSelection {
        method,
        folds,
        scores,
        best,
    })
}
