//! Regularized block Kaczmarz reconstruction.
//!
//! One inner step for block `j` is
//! `q ← q + A_jᵀ (γI + A_j A_jᵀ)⁻¹ (p_j − A_j q)`; a sweep visits every
//! block once, and the whole iteration repeats for a number of outer loops.

pub mod diagnostics;

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::StageOneData;
use crate::kernel::KernelMatrix;
use crate::linalg;

/// Order in which blocks are visited within a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockOrder {
    #[default]
    Ascending,
    Descending,
    Custom(Vec<usize>),
}

impl BlockOrder {
    pub fn indices(&self, blocks: usize) -> Result<Vec<usize>> {
        match self {
            BlockOrder::Ascending => Ok((0..blocks).collect()),
            BlockOrder::Descending => Ok((0..blocks).rev().collect()),
            BlockOrder::Custom(order) => {
                let mut seen = vec![false; blocks];
                for &j in order {
                    if j >= blocks || std::mem::replace(&mut seen[j], true) {
                        return Err(Error::InvalidArgument(format!(
                            "block order {order:?} is not a permutation of 0..{blocks}"
                        )));
                    }
                }
                if order.len() != blocks {
                    return Err(Error::InvalidArgument(format!(
                        "block order {order:?} is not a permutation of 0..{blocks}"
                    )));
                }
                Ok(order.clone())
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "regularization γ must be positive, got {gamma}"
        )))
    }
}

/// Block matrices with their regularization and a cached Cholesky factor of
/// `γI + A_j A_jᵀ` per block. Independent of the data, so one instance
/// serves every sample of a dataset.
pub struct KaczmarzSolver {
    blocks: Vec<Mat<f64>>,
    gamma: f64,
    factors: Vec<Llt<f64>>,
}

impl std::fmt::Debug for KaczmarzSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KaczmarzSolver")
            .field("blocks", &self.blocks.len())
            .field("cols", &self.cols())
            .field("gamma", &self.gamma)
            .finish()
    }
}

impl KaczmarzSolver {
    pub fn new(blocks: Vec<Mat<f64>>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let cols = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one block is required".into()))?
            .ncols();
        if let Some(b) = blocks.iter().find(|b| b.ncols() != cols) {
            return Err(Error::shape(
                format!("{cols} columns"),
                format!("{} columns", b.ncols()),
            ));
        }
        if blocks.iter().any(|b| !all_finite(b)) {
            return Err(Error::NonFinite("kaczmarz block"));
        }
        let factors = blocks
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let mut gram = linalg::mul(a.as_ref(), a.transpose());
                for i in 0..gram.nrows() {
                    gram[(i, i)] += gamma;
                }
                gram.llt(Side::Lower)
                    .map_err(|e| Error::Numeric(format!("block {j}: γI + AAᵀ is not positive definite ({e:?})")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, gamma, factors })
    }

    pub fn from_kernels(kernels: &[KernelMatrix], gamma: f64) -> Result<Self> {
        Self::new(kernels.iter().map(|k| k.entries().clone()).collect(), gamma)
    }

    pub fn blocks(&self) -> &[Mat<f64>] {
        &self.blocks
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cols(&self) -> usize {
        self.blocks[0].ncols()
    }

    fn check_data(&self, data: &[Vec<f64>]) -> Result<()> {
        if data.len() != self.blocks.len() {
            return Err(Error::shape(format!("{} data blocks", self.blocks.len()), data.len()));
        }
        for (j, (a, p)) in self.blocks.iter().zip(data).enumerate() {
            if p.len() != a.nrows() {
                return Err(Error::shape(format!("block {j} with {} rows", a.nrows()), p.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("kaczmarz data"));
            }
        }
        Ok(())
    }

    /// One inner step on block `j` with data `p`.
    fn step(&self, j: usize, q: &mut [f64], p: &[f64]) {
        let a = self.blocks[j].as_ref();
        let ax = linalg::mat_vec(a, q);
        let mut rhs = Mat::from_fn(p.len(), 1, |r, _| p[r] - ax[r]);
        self.factors[j].solve_in_place(rhs.as_mut());
        let y: Vec<f64> = (0..rhs.nrows()).map(|r| rhs[(r, 0)]).collect();
        for (qi, d) in q.iter_mut().zip(linalg::mat_t_vec(a, &y)) {
            *qi += d;
        }
    }

    /// Runs `outer_loops` sweeps from `q0`. `fetch(j)` supplies `p_j` and is
    /// called exactly once per inner step, for the block being updated.
    pub fn reconstruct_with(
        &self,
        mut fetch: impl FnMut(usize) -> Vec<f64>,
        q0: &[f64],
        outer_loops: usize,
        order: &BlockOrder,
    ) -> Result<Vec<f64>> {
        if outer_loops == 0 {
            return Err(Error::InvalidArgument("at least one outer loop is required".into()));
        }
        if q0.len() != self.cols() {
            return Err(Error::shape(self.cols(), q0.len()));
        }
        let order = order.indices(self.blocks.len())?;
        let mut q = q0.to_vec();
        for _ in 0..outer_loops {
            for &j in &order {
                let p = fetch(j);
                if p.len() != self.blocks[j].nrows() {
                    return Err(Error::shape(self.blocks[j].nrows(), p.len()));
                }
                self.step(j, &mut q, &p);
            }
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kaczmarz iterate"));
        }
        Ok(q)
    }

    pub fn reconstruct(
        &self,
        data: &[Vec<f64>],
        q0: &[f64],
        outer_loops: usize,
        order: &BlockOrder,
    ) -> Result<Vec<f64>> {
        self.check_data(data)?;
        self.reconstruct_with(|j| data[j].clone(), q0, outer_loops, order)
    }

    /// Zero initial guess, as used for stage one.
    pub fn reconstruct_from_zero(&self, data: &[Vec<f64>], outer_loops: usize, order: &BlockOrder) -> Result<Vec<f64>> {
        self.reconstruct(data, &vec![0.0; self.cols()], outer_loops, order)
    }
}

fn all_finite(m: &Mat<f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite()))
}

/// Blocks, data and γ together.
#[derive(Debug)]
pub struct BlockSystem {
    solver: KaczmarzSolver,
    data: Vec<Vec<f64>>,
}

impl BlockSystem {
    pub fn new(blocks: Vec<Mat<f64>>, data: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        let solver = KaczmarzSolver::new(blocks, gamma)?;
        solver.check_data(&data)?;
        Ok(Self { solver, data })
    }

    pub fn from_stage_one(kernels: &[KernelMatrix], data: &StageOneData, gamma: f64) -> Result<Self> {
        if let Some(k) = kernels.iter().find(|k| k.kind() != data.kind) {
            return Err(Error::InvalidArgument(format!(
                "kernel kind {} does not match data kind {}",
                k.kind().as_str(),
                data.kind.as_str()
            )));
        }
        Self::new(
            kernels.iter().map(|k| k.entries().clone()).collect(),
            data.data.clone(),
            gamma,
        )
    }

    pub fn solver(&self) -> &KaczmarzSolver {
        &self.solver
    }

    pub fn blocks(&self) -> &[Mat<f64>] {
        self.solver.blocks()
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn gamma(&self) -> f64 {
        self.solver.gamma()
    }

    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        self.solver.check_data(&data)?;
        Ok(Self {
            solver: KaczmarzSolver {
                blocks: self.solver.blocks.clone(),
                gamma: self.solver.gamma,
                factors: self.solver.factors.clone(),
            },
            data,
        })
    }

    pub fn reconstruct(&self, q0: &[f64], outer_loops: usize, order: &BlockOrder) -> Result<Vec<f64>> {
        self.solver.reconstruct(&self.data, q0, outer_loops, order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn random_blocks(m: usize, rows: usize, cols: usize, seed: u64) -> Vec<Mat<f64>> {
        let mut rng = SeedStream::new(seed).rng();
        (0..m)
            .map(|_| Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    #[test]
    fn identity_block_closed_form() {
        let gamma = 1e-8;
        let sys = BlockSystem::new(vec![linalg::identity(2)], vec![vec![1.0, 2.0]], gamma).unwrap();
        let q = sys.reconstruct(&[0.0, 0.0], 1, &BlockOrder::Ascending).unwrap();
        // p / (1 + γ)
        assert_relative_eq!(q[0], 0.999_999_99, max_relative = 1e-15);
        assert_relative_eq!(q[1], 1.999_999_98, max_relative = 1e-15);
        assert_relative_eq!(q[0], 1.0 / (1.0 + gamma), max_relative = 1e-15);
    }

    #[test]
    fn zero_data_is_a_fixed_point() {
        let sys = BlockSystem::new(random_blocks(3, 4, 10, 1), vec![vec![0.0; 4]; 3], 1e-3).unwrap();
        let q = sys.reconstruct(&[0.0; 10], 3, &BlockOrder::Ascending).unwrap();
        assert!(q.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn consistent_system_converges_to_minimum_norm_solution() {
        // oracle: dense pseudo-inverse of the stacked matrix
        let blocks = random_blocks(3, 8, 32, 7);
        let mut rng = SeedStream::new(8).rng();
        let truth: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let data: Vec<Vec<f64>> = blocks.iter().map(|a| linalg::mat_vec(a.as_ref(), &truth)).collect();
        let stacked = Mat::from_fn(24, 32, |r, c| blocks[r / 8][(r % 8, c)]);
        let flat: Vec<f64> = data.iter().flatten().copied().collect();
        let pinv = linalg::pseudo_inverse(stacked.as_ref()).unwrap();
        let expected = linalg::mat_vec(pinv.as_ref(), &flat);
        let sys = BlockSystem::new(blocks, data, 1e-8).unwrap();
        let q = sys.reconstruct(&[0.0; 32], 500, &BlockOrder::Ascending).unwrap();
        let err: Vec<f64> = q.iter().zip(&expected).map(|(a, b)| a - b).collect();
        assert!(linalg::norm2(&err) <= 1e-3 * linalg::norm2(&expected));
    }

    #[test]
    fn residual_is_nonincreasing_on_consistent_systems() {
        let blocks = random_blocks(2, 6, 20, 11);
        let truth: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let data: Vec<Vec<f64>> = blocks.iter().map(|a| linalg::mat_vec(a.as_ref(), &truth)).collect();
        let sys = BlockSystem::new(blocks, data.clone(), 1e-6).unwrap();
        let residual = |q: &[f64]| {
            let r: Vec<f64> = sys
                .blocks()
                .iter()
                .zip(&data)
                .flat_map(|(a, p)| {
                    linalg::mat_vec(a.as_ref(), q)
                        .into_iter()
                        .zip(p)
                        .map(|(x, y)| x - y)
                        .collect::<Vec<_>>()
                })
                .collect();
            linalg::norm2(&r)
        };
        let mut q = vec![0.0; 20];
        let mut last = residual(&q);
        for _ in 0..50 {
            q = sys.reconstruct(&q, 1, &BlockOrder::Ascending).unwrap();
            let now = residual(&q);
            assert!(now <= last + 1e-12, "{now} > {last}");
            last = now;
        }
    }

    #[test]
    fn each_step_reads_only_its_own_block() {
        let blocks = random_blocks(3, 4, 9, 2);
        let data = vec![vec![1.0; 4]; 3];
        let solver = KaczmarzSolver::new(blocks, 1e-4).unwrap();
        let mut reads = Vec::new();
        let order = BlockOrder::Custom(vec![2, 0, 1]);
        solver
            .reconstruct_with(
                |j| {
                    reads.push(j);
                    data[j].clone()
                },
                &[0.0; 9],
                2,
                &order,
            )
            .unwrap();
        assert_eq!(reads, vec![2, 0, 1, 2, 0, 1]);
    }

    #[test]
    fn order_changes_the_iterate() {
        let blocks = random_blocks(3, 4, 9, 3);
        let data = vec![vec![1.0; 4], vec![-1.0; 4], vec![0.5; 4]];
        let sys = BlockSystem::new(blocks, data, 1e-4).unwrap();
        let a = sys.reconstruct(&[0.0; 9], 1, &BlockOrder::Ascending).unwrap();
        let d = sys.reconstruct(&[0.0; 9], 1, &BlockOrder::Descending).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn invalid_inputs() {
        let blocks = random_blocks(2, 3, 5, 4);
        assert!(KaczmarzSolver::new(blocks.clone(), 0.0).is_err());
        assert!(KaczmarzSolver::new(blocks.clone(), f64::NAN).is_err());
        assert!(BlockSystem::new(blocks.clone(), vec![vec![0.0; 3]], 1e-3).is_err());
        assert!(BlockSystem::new(blocks.clone(), vec![vec![0.0; 3], vec![f64::NAN; 3]], 1e-3).is_err());
        let sys = BlockSystem::new(blocks, vec![vec![0.0; 3]; 2], 1e-3).unwrap();
        assert!(sys.reconstruct(&[0.0; 5], 0, &BlockOrder::Ascending).is_err());
        assert!(sys.reconstruct(&[0.0; 5], 1, &BlockOrder::Custom(vec![0, 0])).is_err());
        assert!(sys.reconstruct(&[0.0; 4], 1, &BlockOrder::Ascending).is_err());
    }
}
