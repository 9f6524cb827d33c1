//! Midpoint-rule discretization of the mean and variance integral equations.

use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary;
use crate::error::{Error, Result};
use crate::geometry::{Grid, ReceiverRing};
use crate::special::{self, Complex};

/// Which statistic a kernel maps to boundary data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Unknown `g`, data `E[Re u]`.
    Mean,
    /// Unknown `h²`, data `V[Re u] - V[Im u]`.
    Variance,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Mean => "mean",
            KernelKind::Variance => "variance",
        }
    }
}

/// Real `receivers × cells` matrix for one wavenumber.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    wavenumber: f64,
    kind: KernelKind,
    grid: Grid,
    ring: ReceiverRing,
    entries: Mat<f64>,
}

fn check_receivers(grid: &Grid, ring: &ReceiverRing) -> Result<()> {
    if let Some(p) = ring.points().iter().find(|p| grid.contains_closed(**p)) {
        return Err(Error::InvalidArgument(format!(
            "receiver ({:.6}, {:.6}) lies in the closed source square [{}, {}]²",
            p[0],
            p[1],
            grid.lo(),
            grid.hi()
        )));
    }
    Ok(())
}

/// Green's function samples `G(x_r, y_c, κ)` for every receiver/cell pair,
/// without the cell-area weight. Rows are filled in parallel.
pub fn greens_table(grid: &Grid, ring: &ReceiverRing, kappa: f64) -> Result<Vec<Vec<Complex>>> {
    check_receivers(grid, ring)?;
    ring.points()
        .par_iter()
        .map(|&x| grid.centers().map(|y| special::greens(x, y, kappa)).collect())
        .collect()
}

/// Builds the kernel matrix for one wavenumber.
pub fn assemble(grid: &Grid, ring: &ReceiverRing, kappa: f64, kind: KernelKind) -> Result<KernelMatrix> {
    let table = greens_table(grid, ring, kappa)?;
    let area = grid.cell_area();
    let weight = |g: &Complex| match kind {
        KernelKind::Mean => g.re * area,
        // Re(G²) = (Y0² - J0²) / 16
        KernelKind::Variance => (g.re * g.re - g.im * g.im) * area,
    };
    let entries = Mat::from_fn(ring.count(), grid.len(), |r, c| weight(&table[r][c]));
    Ok(KernelMatrix {
        wavenumber: kappa,
        kind,
        grid: *grid,
        ring: ring.clone(),
        entries,
    })
}

/// Assembles one kernel per wavenumber, in the given order.
pub fn assemble_all(
    grid: &Grid,
    ring: &ReceiverRing,
    wavenumbers: &[f64],
    kind: KernelKind,
) -> Result<Vec<KernelMatrix>> {
    wavenumbers.iter().map(|&k| assemble(grid, ring, k, kind)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelSidecar {
    rows: usize,
    cols: usize,
    wavenumber: f64,
    kind: KernelKind,
    grid_n: usize,
    layout: String,
}

impl KernelMatrix {
    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ring(&self) -> &ReceiverRing {
        &self.ring
    }

    pub fn entries(&self) -> &Mat<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> Mat<f64> {
        self.entries
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    /// Matrix-vector product with a cell vector.
    pub fn apply(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.ncols() {
            return Err(Error::shape(self.ncols(), q.len()));
        }
        Ok((0..self.nrows())
            .map(|r| (0..self.ncols()).map(|c| self.entries[(r, c)] * q[c]).sum())
            .collect())
    }

    /// Writes `<stem>.bin` (row-major little-endian f64) and `<stem>.json`.
    pub fn export_raw(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut data = Vec::with_capacity(self.nrows() * self.ncols());
        for r in 0..self.nrows() {
            data.extend((0..self.ncols()).map(|c| self.entries[(r, c)]));
        }
        binary::write_raw_f64(&dir.join(format!("{stem}.bin")), &data)?;
        let sidecar = KernelSidecar {
            rows: self.nrows(),
            cols: self.ncols(),
            wavenumber: self.wavenumber,
            kind: self.kind,
            grid_n: self.grid.n(),
            layout: "row-major little-endian f64".into(),
        };
        binary::write_json(&dir.join(format!("{stem}.json")), &sidecar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn ring() -> ReceiverRing {
        ReceiverRing::new(32, 2.0).unwrap()
    }

    #[test]
    fn entries_match_direct_evaluation() {
        let grid = Grid::new(16, -1.0, 1.0).unwrap();
        let ring = ring();
        let kappa = 2.5 * PI;
        let mean = assemble(&grid, &ring, kappa, KernelKind::Mean).unwrap();
        let var = assemble(&grid, &ring, kappa, KernelKind::Variance).unwrap();
        assert_eq!((mean.nrows(), mean.ncols()), (32, 256));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = rng.random_range(0..32);
            let c = rng.random_range(0..256);
            let (x, y) = (ring.points()[r], grid.center(c));
            let d = (x[0] - y[0]).hypot(x[1] - y[1]);
            let j0 = special::bessel_j0(kappa * d).unwrap();
            let y0 = special::bessel_y0(kappa * d).unwrap();
            assert_relative_eq!(
                mean.entries()[(r, c)],
                y0 / 4.0 * grid.cell_area(),
                max_relative = 1e-12
            );
            assert_relative_eq!(
                var.entries()[(r, c)],
                (y0 * y0 - j0 * j0) / 16.0 * grid.cell_area(),
                max_relative = 1e-10,
                epsilon = 1e-18
            );
        }
    }

    #[test]
    fn equal_distance_gives_equal_entries() {
        // receiver 0 sits at (2, 0) and receiver 8 at (0, 2); the mirror of a
        // cell across the diagonal is at the same distance from the swapped receiver
        let grid = Grid::new(8, -1.0, 1.0).unwrap();
        let k = assemble(&grid, &ring(), 1.5 * PI, KernelKind::Mean).unwrap();
        let (row, col) = (2, 5);
        let a = k.entries()[(0, row * 8 + col)];
        let b = k.entries()[(8, col * 8 + row)];
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn receiver_inside_square_is_rejected() {
        let grid = Grid::new(8, -1.0, 1.0).unwrap();
        let inside = ReceiverRing::new(4, 1.0).unwrap();
        assert!(matches!(
            assemble(&grid, &inside, PI, KernelKind::Mean),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn apply_checks_length() {
        let grid = Grid::new(4, -1.0, 1.0).unwrap();
        let k = assemble(&grid, &ring(), PI, KernelKind::Mean).unwrap();
        assert!(k.apply(&[0.0; 3]).is_err());
        let ones = k.apply(&[1.0; 16]).unwrap();
        let row0: f64 = (0..16).map(|c| k.entries()[(0, c)]).sum();
        assert_relative_eq!(ones[0], row0);
    }

    #[test]
    fn constant_source_matches_refined_quadrature() {
        // independent oracle: 512² midpoint sum of Re G computed straight from
        // the Bessel routine, no kernel code involved
        let kappa = 1.5 * PI;
        let coarse = Grid::new(32, -1.0, 1.0).unwrap();
        let ring = ring();
        let k = assemble(&coarse, &ring, kappa, KernelKind::Mean).unwrap();
        let data = k.apply(&vec![1.0; coarse.len()]).unwrap();
        let fine = Grid::new(512, -1.0, 1.0).unwrap();
        for (r, x) in ring.points().iter().enumerate().step_by(4) {
            let reference: f64 = fine
                .centers()
                .map(|y| {
                    let d = (x[0] - y[0]).hypot(x[1] - y[1]);
                    special::bessel_y0(kappa * d).unwrap() / 4.0
                })
                .sum::<f64>()
                * fine.cell_area();
            assert_relative_eq!(data[r], reference, max_relative = 5e-3);
        }
    }

    #[test]
    fn export_writes_binary_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new(4, -1.0, 1.0).unwrap();
        let k = assemble(&grid, &ring(), PI, KernelKind::Variance).unwrap();
        k.export_raw(dir.path(), "k0").unwrap();
        let bytes = std::fs::read(dir.path().join("k0.bin")).unwrap();
        assert_eq!(bytes.len(), 32 * 16 * 8);
        let second = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(second, k.entries()[(0, 1)]);
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("k0.json")).unwrap()).unwrap();
        assert_eq!(side["kind"], "variance");
        assert_eq!(side["rows"], 32);
    }
}
