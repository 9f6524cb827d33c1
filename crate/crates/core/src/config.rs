//! Run configuration shared by dataset generation and the command line.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binary;
use crate::error::{Error, Result};
use crate::forward::{FdfdConfig, MediumKind, NoiseMode, NoiseSharing, NoiseSpec};
use crate::geometry::{Grid, ReceiverRing};
use crate::kaczmarz::BlockOrder;
use crate::kernel::KernelKind;
use crate::stage2::Method;

/// Which statistic stage one reconstructs.
pub type Task = KernelKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOneConfig {
    pub gamma: f64,
    pub outer_loops: usize,
    pub order: BlockOrder,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-8,
            outer_loops: 1,
            order: BlockOrder::Ascending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTwoConfig {
    pub method: Method,
    pub pca_rank: usize,
    pub dmd_rank: usize,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            method: Method::Pca,
            pca_rank: 1000,
            dmd_rank: 100,
        }
    }
}

impl StageTwoConfig {
    pub fn rank(&self, method: Method) -> usize {
        match method {
            Method::Pca => self.pca_rank,
            Method::Dmd => self.dmd_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 50,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub medium: MediumKind,
    /// Number of samples `M` to generate.
    pub samples: usize,
    /// Realizations per sample; `None` picks 100 for the mean task and 1000
    /// for the variance task.
    pub realizations: Option<usize>,
    pub noise: NoiseSpec,
    pub noise_sharing: NoiseSharing,
    pub grid_n: usize,
    /// The source square is `[-domain_half_width, domain_half_width]²`.
    pub domain_half_width: f64,
    pub receivers: usize,
    pub receiver_radius: f64,
    pub wavenumbers: Vec<f64>,
    pub stage_one: StageOneConfig,
    pub stage_two: StageTwoConfig,
    pub split: SplitConfig,
    pub fdfd: FdfdConfig,
    pub seed: u64,
    /// Worker threads; `None` uses the environment default.
    pub workers: Option<usize>,
}

/// `(0.5 + j) π` for `j = 0..count`.
pub fn default_wavenumbers(count: usize) -> Vec<f64> {
    (0..count).map(|j| (0.5 + j as f64) * PI).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: KernelKind::Mean,
            medium: MediumKind::Homogeneous,
            samples: 250,
            realizations: None,
            noise: NoiseSpec {
                level: 0.0,
                mode: NoiseMode::Relative,
            },
            noise_sharing: NoiseSharing::Shared,
            grid_n: 64,
            domain_half_width: 1.0,
            receivers: 32,
            receiver_radius: 2.0,
            wavenumbers: default_wavenumbers(5),
            stage_one: StageOneConfig::default(),
            stage_two: StageTwoConfig::default(),
            split: SplitConfig::default(),
            fdfd: FdfdConfig::default(),
            seed: 2024,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn realizations(&self) -> usize {
        self.realizations.unwrap_or(match self.task {
            KernelKind::Mean => 100,
            KernelKind::Variance => 1000,
        })
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid_n, -self.domain_half_width, self.domain_half_width)
    }

    pub fn ring(&self) -> Result<ReceiverRing> {
        ReceiverRing::new(self.receivers, self.receiver_radius)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        let n = self.realizations();
        if n == 0 || (self.task == KernelKind::Variance && n < 2) {
            return bad(format!(
                "{n} realizations are too few for the {} task",
                self.task.as_str()
            ));
        }
        if !(self.noise.level.is_finite() && self.noise.level >= 0.0) {
            return bad(format!("noise level must be non-negative, got {}", self.noise.level));
        }
        if self.wavenumbers.is_empty() || self.wavenumbers.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return bad("wavenumbers must be a non-empty list of positive numbers".into());
        }
        if !(self.stage_one.gamma.is_finite() && self.stage_one.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.stage_one.gamma));
        }
        if self.stage_one.outer_loops == 0 {
            return bad("outer_loops must be at least 1".into());
        }
        self.stage_one.order.indices(self.wavenumbers.len())?;
        if self.stage_two.pca_rank == 0 || self.stage_two.dmd_rank == 0 {
            return bad("stage-two ranks must be positive".into());
        }
        if self.split.train + self.split.test > self.samples {
            return bad(format!(
                "split {} + {} exceeds {} samples",
                self.split.train, self.split.test, self.samples
            ));
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        let grid = self.grid()?;
        let ring = self.ring()?;
        if ring.radius() <= self.domain_half_width * std::f64::consts::SQRT_2 {
            return bad(format!(
                "receiver radius {} must exceed the source square's circumradius",
                ring.radius()
            ));
        }
        if self.medium == MediumKind::Inhomogeneous {
            self.fdfd.validate()?;
            let inner = self.fdfd.half_width - self.fdfd.pml_thickness;
            if ring.radius() >= inner || grid.hi() >= inner {
                return bad(format!(
                    "receivers and sources must lie inside the absorbing layer at ±{inner}"
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = binary::read_json(path).map_err(|e| match e {
            Error::Format { reason, .. } => Error::InvalidArgument(format!("config {}: {reason}", path.display())),
            Error::Io { source, .. } => Error::InvalidArgument(format!("config {}: {source}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
