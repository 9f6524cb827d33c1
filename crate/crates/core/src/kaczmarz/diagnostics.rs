//! Dense iteration operators of the block Kaczmarz scheme and numerical
//! checks of its error theory. Desk-scale only: every operator here is built
//! as a dense matrix, and `B` is `cols × cols`.
//!
//! With `A` the stacked blocks, `AAᵀ + γI = D_γ + L + Lᵀ` where `D_γ` is
//! block diagonal and `L` strictly block lower triangular. One ascending
//! sweep is `q ← B q + AᵀM p` with `M = (D_γ + L)⁻¹` and `B = I − AᵀMA`.

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::BlockSystem;
use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOLERANCE};
use crate::rng::SeedStream;

#[derive(Debug, Clone)]
pub struct IterationOperators {
    pub gamma: f64,
    /// Stacked blocks.
    pub a: Mat<f64>,
    pub d_gamma: Mat<f64>,
    pub l: Mat<f64>,
    /// `(D_γ + L)⁻¹`
    pub m: Mat<f64>,
    /// `AᵀMA`
    pub q: Mat<f64>,
    /// `I − Q`
    pub b: Mat<f64>,
    /// Orthogonal projector onto the range of `Aᵀ`.
    pub projector: Mat<f64>,
    /// `B P`
    pub b_tilde: Mat<f64>,
    /// `D_{2γ}^{1/2} M A`
    pub r: Mat<f64>,
    /// Smallest singular value of `R` above the rank tolerance.
    pub sigma: f64,
}

fn block_offsets(sys: &BlockSystem) -> Vec<usize> {
    let mut offsets = vec![0];
    for b in sys.blocks() {
        offsets.push(offsets.last().unwrap() + b.nrows());
    }
    offsets
}

fn block_of(offsets: &[usize], row: usize) -> usize {
    offsets.partition_point(|&o| o <= row) - 1
}

pub fn build_iteration_operators(sys: &BlockSystem) -> Result<IterationOperators> {
    let gamma = sys.gamma();
    let offsets = block_offsets(sys);
    let rows = *offsets.last().unwrap();
    let cols = sys.solver().cols();
    let a = Mat::from_fn(rows, cols, |r, c| {
        let j = block_of(&offsets, r);
        sys.blocks()[j][(r - offsets[j], c)]
    });
    let gram = linalg::mul(a.as_ref(), a.transpose());
    let same_block = |r: usize, c: usize| block_of(&offsets, r) == block_of(&offsets, c);
    let diag_part = |shift: f64| {
        Mat::from_fn(rows, rows, |r, c| {
            if same_block(r, c) {
                gram[(r, c)] + if r == c { shift } else { 0.0 }
            } else {
                0.0
            }
        })
    };
    let d_gamma = diag_part(gamma);
    let l = Mat::from_fn(rows, rows, |r, c| {
        if block_of(&offsets, r) > block_of(&offsets, c) {
            gram[(r, c)]
        } else {
            0.0
        }
    });
    let lower = Mat::from_fn(rows, rows, |r, c| d_gamma[(r, c)] + l[(r, c)]);
    let m = lower.partial_piv_lu().inverse();
    let ma = linalg::mul(m.as_ref(), a.as_ref());
    let q = linalg::mul(a.transpose(), ma.as_ref());
    let b = Mat::from_fn(cols, cols, |i, j| if i == j { 1.0 } else { 0.0 } - q[(i, j)]);

    let svd = linalg::truncated_svd(a.as_ref(), usize::MAX)?;
    if svd.s.is_empty() {
        return Err(Error::Numeric("stacked matrix has numerical rank zero".into()));
    }
    let projector = linalg::mul(svd.v.as_ref(), svd.v.transpose());
    let b_tilde = linalg::mul(b.as_ref(), projector.as_ref());

    let d2 = diag_part(2.0 * gamma);
    let mut d2_sqrt = Mat::<f64>::zeros(rows, rows);
    for j in 0..sys.blocks().len() {
        let (lo, hi) = (offsets[j], offsets[j + 1]);
        let root = linalg::sym_sqrt(d2.as_ref().submatrix(lo, lo, hi - lo, hi - lo))?;
        for r in 0..hi - lo {
            for c in 0..hi - lo {
                d2_sqrt[(lo + r, lo + c)] = root[(r, c)];
            }
        }
    }
    let r = linalg::mul(d2_sqrt.as_ref(), ma.as_ref());
    let sv = linalg::singular_values(r.as_ref())?;
    let top = sv.first().copied().unwrap_or(0.0);
    let sigma = sv
        .iter()
        .copied()
        .filter(|&s| s > RANK_TOLERANCE * top)
        .fold(f64::INFINITY, f64::min);
    if !sigma.is_finite() {
        return Err(Error::Numeric("no singular value of R above the rank tolerance".into()));
    }
    Ok(IterationOperators {
        gamma,
        a,
        d_gamma,
        l,
        m,
        q,
        b,
        projector,
        b_tilde,
        r,
        sigma,
    })
}

impl IterationOperators {
    pub fn b_tilde_norm(&self) -> Result<f64> {
        linalg::spectral_norm(self.b_tilde.as_ref())
    }

    /// Contraction factor `√(1 − σ²)` predicted for `‖B̃‖`.
    pub fn contraction(&self) -> f64 {
        (1.0 - self.sigma * self.sigma).max(0.0).sqrt()
    }

    /// `AᵀM`, mapping stacked data to the iterate.
    pub fn data_map(&self) -> Mat<f64> {
        linalg::mul(self.a.transpose(), self.m.as_ref())
    }

    /// `B q + AᵀM p` for stacked data `p`.
    pub fn sweep(&self, q: &[f64], p: &[f64]) -> Vec<f64> {
        let bq = linalg::mat_vec(self.b.as_ref(), q);
        let amp = linalg::mat_vec(self.data_map().as_ref(), p);
        bq.iter().zip(amp).map(|(x, y)| x + y).collect()
    }

    /// `δ_γ = ‖AᵀM (p̃ − p)‖` for stacked data.
    pub fn data_error(&self, perturbed: &[f64], clean: &[f64]) -> f64 {
        let diff: Vec<f64> = perturbed.iter().zip(clean).map(|(a, b)| a - b).collect();
        linalg::norm2(&linalg::mat_vec(self.data_map().as_ref(), &diff))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("σ must lie in (0, 1], got {sigma}")))
    }
}

/// `Ψ(σ, k) = (1 − (1 − σ²)^{k/2}) / (1 − (1 − σ²)^{1/2})`, equal to 1 for
/// every `k ≥ 1` when `σ = 1`.
pub fn amplification(k: usize, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if k == 0 {
        return Ok(0.0);
    }
    let c2 = 1.0 - sigma * sigma;
    if c2 <= 0.0 {
        return Ok(1.0);
    }
    let c = c2.sqrt();
    // (1 - c^k) / (1 - c) summed as a geometric series when it is short
    if k <= 64 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for _ in 0..k {
            sum += term;
            term *= c;
        }
        Ok(sum)
    } else {
        Ok((1.0 - c.powi(k as i32)) / (1.0 - c))
    }
}

/// Bound on the accumulated data error after `k` sweeps.
pub fn accumulated_error_bound(k: usize, sigma: f64, delta: f64) -> Result<f64> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("δ must be non-negative, got {delta}")));
    }
    Ok(amplification(k, sigma)? * delta)
}

/// `δ / (1 − √(1 − σ²))`, the limit of the bound as `k → ∞`.
pub fn uniform_error_bound(sigma: f64, delta: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let c = (1.0 - sigma * sigma).max(0.0).sqrt();
    Ok(delta / (1.0 - c))
}

/// Early-regime estimate `δσ²k / (2(1 − √(1 − σ²)))`, valid for
/// `2 ≤ k ≤ 2/σ²`.
pub fn early_regime_bound(k: usize, sigma: f64, delta: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let c = (1.0 - sigma * sigma).max(0.0).sqrt();
    Ok(delta * sigma * sigma * k as f64 / (2.0 * (1.0 - c)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemiconvergenceReport {
    pub gamma: f64,
    pub sigma: f64,
    pub delta: f64,
    pub uniform_bound: f64,
    /// `‖e^k‖` for `k = 1..=k_max`.
    pub errors: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Largest `‖e^k‖ / bound(k)` over `k`; at most 1 when the bound holds.
    pub worst_ratio: f64,
}

/// Runs the iteration on clean and perturbed data side by side and records
/// `‖q̃^k − q^k‖` against the bound, for `k = 1..=k_max`.
pub fn verify_semiconvergence(
    sys: &BlockSystem,
    perturbed: &[Vec<f64>],
    k_max: usize,
) -> Result<SemiconvergenceReport> {
    let noisy = sys.with_data(perturbed.to_vec())?;
    let ops = build_iteration_operators(sys)?;
    let clean: Vec<f64> = sys.data().iter().flatten().copied().collect();
    let dirty: Vec<f64> = perturbed.iter().flatten().copied().collect();
    let delta = ops.data_error(&dirty, &clean);
    let cols = sys.solver().cols();
    let order = super::BlockOrder::Ascending;
    let (mut q, mut qt) = (vec![0.0; cols], vec![0.0; cols]);
    let mut errors = Vec::with_capacity(k_max);
    let mut bounds = Vec::with_capacity(k_max);
    let mut worst: f64 = 0.0;
    for k in 1..=k_max {
        q = sys.reconstruct(&q, 1, &order)?;
        qt = noisy.reconstruct(&qt, 1, &order)?;
        let e: Vec<f64> = qt.iter().zip(&q).map(|(a, b)| a - b).collect();
        let err = linalg::norm2(&e);
        let bound = accumulated_error_bound(k, ops.sigma, delta)?;
        if bound > 0.0 {
            worst = worst.max(err / bound);
        } else if err > 0.0 {
            worst = f64::INFINITY;
        }
        errors.push(err);
        bounds.push(bound);
    }
    Ok(SemiconvergenceReport {
        gamma: sys.gamma(),
        sigma: ops.sigma,
        delta,
        uniform_bound: uniform_error_bound(ops.sigma, delta)?,
        errors,
        bounds,
        worst_ratio: worst,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionPoint {
    pub realizations: usize,
    /// Sum of component variances of `e^k` over the repetitions.
    pub total_variance: f64,
    /// Spectral norm of the sample covariance of `√N e^k`.
    pub scaled_covariance_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionReport {
    pub sweeps: usize,
    pub repetitions: usize,
    pub points: Vec<DistributionPoint>,
    /// Least-squares slope of `log total_variance` against `log N`.
    pub slope: f64,
    /// `Ψ(σ, k)² ‖AᵀM‖² ‖Θ‖` with `Θ = A H Aᵀ + δ² I`.
    pub covariance_bound: f64,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Monte Carlo estimate of how the accumulated data error after `sweeps`
/// sweeps scales with the number of realizations.
///
/// Each realization observes `A (h ⊙ ξ) + δ ζ` with iid standard normal `ξ`
/// and `ζ`; the data perturbation is the sample mean over `N` realizations,
/// and `e^k = Σ_{i<k} Bⁱ AᵀM (p̃ − p)`.
pub fn verify_error_distribution(
    sys: &BlockSystem,
    h: &[f64],
    noise_level: f64,
    realizations: &[usize],
    repetitions: usize,
    sweeps: usize,
    stream: SeedStream,
) -> Result<DistributionReport> {
    let ops = build_iteration_operators(sys)?;
    let (rows, cols) = (ops.a.nrows(), ops.a.ncols());
    if h.len() != cols {
        return Err(Error::shape(cols, h.len()));
    }
    if repetitions < 2 || sweeps == 0 || realizations.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least two repetitions, one sweep and one realization count".into(),
        ));
    }
    // e^k = F (p̃ − p) with F = Σ_{i<k} Bⁱ AᵀM
    let data_map = ops.data_map();
    let mut f = data_map.clone();
    let mut power = data_map;
    for _ in 1..sweeps {
        power = linalg::mul(ops.b.as_ref(), power.as_ref());
        for j in 0..rows {
            for i in 0..cols {
                f[(i, j)] += power[(i, j)];
            }
        }
    }
    let ah = Mat::from_fn(rows, cols, |r, c| ops.a[(r, c)] * h[c]);
    let theta = {
        let mut t = linalg::mul(ah.as_ref(), ah.transpose());
        for i in 0..rows {
            t[(i, i)] += noise_level * noise_level;
        }
        t
    };
    let psi = amplification(sweeps, ops.sigma)?;
    let covariance_bound =
        psi * psi * linalg::spectral_norm(ops.data_map().as_ref())?.powi(2) * linalg::spectral_norm(theta.as_ref())?;

    let mut points = Vec::with_capacity(realizations.len());
    for (t, &n) in realizations.iter().enumerate() {
        let level_stream = stream.index(t as u64);
        let samples: Vec<Vec<f64>> = (0..repetitions)
            .into_par_iter()
            .map(|rep| {
                let mut rng = level_stream.index(rep as u64).rng();
                let mut xi = vec![0.0; cols];
                let mut zeta = vec![0.0; rows];
                for _ in 0..n {
                    for v in xi.iter_mut() {
                        *v += rng.sample::<f64, _>(StandardNormal);
                    }
                    for v in zeta.iter_mut() {
                        *v += rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let inv = 1.0 / n as f64;
                let xi: Vec<f64> = xi.iter().map(|v| v * inv).collect();
                let dp: Vec<f64> = linalg::mat_vec(ah.as_ref(), &xi)
                    .iter()
                    .zip(&zeta)
                    .map(|(a, z)| a + noise_level * z * inv)
                    .collect();
                linalg::mat_vec(f.as_ref(), &dp)
            })
            .collect();
        let mean: Vec<f64> = (0..cols)
            .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / repetitions as f64)
            .collect();
        let cov = Mat::from_fn(cols, cols, |i, j| {
            samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / (repetitions - 1) as f64
        });
        let total_variance = (0..cols).map(|i| cov[(i, i)]).sum();
        let scaled_covariance_norm = n as f64 * linalg::spectral_norm(cov.as_ref())?;
        points.push(DistributionPoint {
            realizations: n,
            total_variance,
            scaled_covariance_norm,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| (p.realizations as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.total_variance.ln()).collect();
    Ok(DistributionReport {
        sweeps,
        repetitions,
        slope: fit_slope(&x, &y),
        points,
        covariance_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kaczmarz::tests::random_blocks;
    use approx::assert_relative_eq;

    fn system(m: usize, gamma: f64, seed: u64) -> BlockSystem {
        let blocks = random_blocks(m, 8, 32, seed);
        let data = (0..m)
            .map(|j| (0..8).map(|i| ((i + j) as f64).cos()).collect())
            .collect();
        BlockSystem::new(blocks, data, gamma).unwrap()
    }

    #[test]
    fn parts_reconstruct_the_regularized_gram_matrix() {
        let sys = system(3, 1e-4, 1);
        let ops = build_iteration_operators(&sys).unwrap();
        let mut target = linalg::mul(ops.a.as_ref(), ops.a.transpose());
        for i in 0..target.nrows() {
            target[(i, i)] += ops.gamma;
        }
        let parts = Mat::from_fn(24, 24, |i, j| ops.d_gamma[(i, j)] + ops.l[(i, j)] + ops.l[(j, i)]);
        assert!(linalg::max_abs_diff(parts.as_ref(), target.as_ref()) <= 1e-12 * linalg::max_abs(target.as_ref()));
        assert!(ops.sigma > 0.0 && ops.sigma <= 1.0);
    }

    #[test]
    fn orthonormal_rows_closed_form() {
        // rows of a 4x4 orthogonal matrix as a single 3-row block
        let gamma = 0.1;
        let q = {
            let raw = random_blocks(1, 4, 4, 3).remove(0);
            linalg::truncated_svd(raw.as_ref(), 4).unwrap().u
        };
        let a = Mat::from_fn(3, 4, |i, j| q[(j, i)]);
        let sys = BlockSystem::new(vec![a], vec![vec![0.0; 3]], gamma).unwrap();
        let ops = build_iteration_operators(&sys).unwrap();
        assert_relative_eq!(
            ops.sigma,
            (1.0 + 2.0 * gamma).sqrt() / (1.0 + gamma),
            max_relative = 1e-12
        );
        assert_relative_eq!(ops.b_tilde_norm().unwrap(), gamma / (1.0 + gamma), max_relative = 1e-10);
    }

    #[test]
    fn projected_gram_identity() {
        let sys = system(2, 1e-2, 5);
        let ops = build_iteration_operators(&sys).unwrap();
        let lhs = linalg::mul(ops.b_tilde.transpose(), ops.b_tilde.as_ref());
        let rtr = linalg::mul(ops.r.transpose(), ops.r.as_ref());
        let i_minus = Mat::from_fn(32, 32, |i, j| if i == j { 1.0 } else { 0.0 } - rtr[(i, j)]);
        let rhs = linalg::mul(i_minus.as_ref(), ops.projector.as_ref());
        assert!(linalg::max_abs_diff(lhs.as_ref(), rhs.as_ref()) < 1e-10);
    }

    #[test]
    fn sweep_matches_operator_form() {
        let sys = system(3, 1e-4, 9);
        let ops = build_iteration_operators(&sys).unwrap();
        let q0: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let direct = sys.reconstruct(&q0, 1, &super::super::BlockOrder::Ascending).unwrap();
        let flat: Vec<f64> = sys.data().iter().flatten().copied().collect();
        let via = ops.sweep(&q0, &flat);
        let diff: Vec<f64> = direct.iter().zip(&via).map(|(a, b)| a - b).collect();
        assert!(linalg::norm2(&diff) <= 1e-10 * linalg::norm2(&direct));
    }

    #[test]
    fn bound_formula_properties() {
        for &sigma in &[0.05, 0.3, 0.9, 1.0] {
            let delta = 0.7;
            assert_relative_eq!(
                accumulated_error_bound(1, sigma, delta).unwrap(),
                delta,
                max_relative = 1e-15
            );
            let limit = uniform_error_bound(sigma, delta).unwrap();
            let mut last = 0.0;
            for k in 0..2000 {
                let b = accumulated_error_bound(k, sigma, delta).unwrap();
                assert!(b >= last && b <= limit * (1.0 + 1e-12));
                last = b;
                let k_max = (2.0 / (sigma * sigma)).floor() as usize;
                if (2..=k_max).contains(&k) {
                    assert!(b <= early_regime_bound(k, sigma, delta).unwrap() * (1.0 + 1e-12));
                }
            }
            let c = (1.0 - sigma * sigma).sqrt();
            assert_relative_eq!(last, limit * (1.0 - c.powi(1999)), max_relative = 1e-9);
        }
        assert!(amplification(3, 0.0).is_err());
        assert!(amplification(3, 1.5).is_err());
    }

    #[test]
    fn identical_data_gives_zero_error() {
        let sys = system(2, 1e-4, 2);
        let report = verify_semiconvergence(&sys, sys.data(), 20).unwrap();
        assert!(report.errors.iter().all(|e| *e == 0.0));
        assert_eq!(report.delta, 0.0);
    }

    #[test]
    fn no_randomness_gives_no_error() {
        let sys = system(2, 1e-4, 4);
        let report = verify_error_distribution(&sys, &[0.0; 32], 0.0, &[10, 100], 4, 3, SeedStream::new(1)).unwrap();
        assert!(report.points.iter().all(|p| p.total_variance == 0.0));
    }
}
