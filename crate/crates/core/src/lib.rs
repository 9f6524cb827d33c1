//! Two-stage reconstruction of the mean and variance of a random source in
//! the stochastic Helmholtz equation.
//!
//! Stage one turns multi-frequency boundary measurements into a rough image
//! with a regularized block Kaczmarz iteration on Green's-function integral
//! equations. Stage two maps those images to refined ones with learned linear
//! models (joint PCA regression and DMD).

pub mod binary;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod forward;
pub mod geometry;
pub mod kaczmarz;
pub mod kernel;
pub mod linalg;
pub mod rng;
pub mod special;
pub mod stage2;

pub use config::RunConfig;
pub use dataset::{Dataset, DatasetManifest, SampleRecord, Split, SplitPart};
pub use error::{Error, ErrorClass, Result};
pub use eval::EvaluationReport;
pub use forward::{FdfdConfig, MeasurementTensor, MediumKind, NoiseMode, NoiseSpec, StageOneData};
pub use geometry::{DiskSpec, Grid, Point, ReceiverRing, ScalarField};
pub use kaczmarz::{BlockOrder, BlockSystem, KaczmarzSolver};
pub use kernel::{KernelKind, KernelMatrix};
pub use rng::SeedStream;
pub use special::Complex;
pub use stage2::{select_rank, DmdModel, Method, PcaModel, RankSelection, Stage2Model};
