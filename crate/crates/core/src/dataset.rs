//! Paired `(stage-one image, truth)` datasets on disk.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! samples/sample_000000.bin     RSSAMPLE container: truth then stage-one values
//! ```
//!
//! and of a prediction directory:
//!
//! ```text
//! predictions.json
//! pred_000000.bin               RSFIELD container
//! ```
//!
//! Container layout is described in [`crate::binary`]; both formats are
//! documented byte for byte in `docs/formats.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary::{self, FIELD_MAGIC, FORMAT_VERSION, SAMPLE_MAGIC};
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::forward::{self, MediumKind, NoiseSharing, NoiseSpec, ResponseMatrix, StageOneData};
use crate::geometry::{self, DiskSpec, Grid, ReceiverRing, ScalarField};
use crate::kaczmarz::{BlockOrder, KaczmarzSolver};
use crate::kernel::{self, KernelKind};
use crate::rng::{derive_seed, SeedStream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const SAMPLES_DIR: &str = "samples";
pub const DATASET_FORMAT: &str = "randsource-dataset";
pub const PREDICTIONS_FORMAT: &str = "randsource-predictions";

pub fn sample_file(id: u64) -> String {
    format!("{SAMPLES_DIR}/sample_{id:06}.bin")
}

pub fn prediction_file(id: u64) -> String {
    format!("pred_{id:06}.bin")
}

fn checked_grid(g: Grid) -> Result<Grid> {
    Grid::new(g.n(), g.lo(), g.hi())
}

/// Everything needed to regenerate one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub task: Task,
    pub medium: MediumKind,
    pub seed: u64,
    pub realizations: usize,
    pub noise: NoiseSpec,
    pub noise_sharing: NoiseSharing,
    pub wavenumbers: Vec<f64>,
    pub gamma: f64,
    pub outer_loops: usize,
    pub disks: Vec<DiskSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub truth: ScalarField,
    pub stage1: ScalarField,
    pub meta: SampleMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleHeader {
    id: u64,
    grid: Grid,
    fields: Vec<String>,
    meta: SampleMeta,
}

impl SampleRecord {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.truth.same_grid(&self.stage1) {
            return Err(Error::shape("stage-one image on the truth grid", "a different grid"));
        }
        let header = SampleHeader {
            id: self.id,
            grid: *self.truth.grid(),
            fields: vec!["truth".into(), "stage1".into()],
            meta: self.meta.clone(),
        };
        let mut payload = self.truth.values().to_vec();
        payload.extend_from_slice(self.stage1.values());
        binary::encode(SAMPLE_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload): (SampleHeader, Vec<f64>) = binary::decode(bytes, SAMPLE_MAGIC, path)?;
        let grid = checked_grid(header.grid)?;
        let cells = grid.len();
        if header.fields != ["truth", "stage1"] || payload.len() != 2 * cells {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "expected truth and stage1 on {0}x{0} cells, found fields {1:?} with {2} values",
                    grid.n(),
                    header.fields,
                    payload.len()
                ),
            });
        }
        Ok(Self {
            id: header.id,
            truth: ScalarField::new(grid, payload[..cells].to_vec())?,
            stage1: ScalarField::new(grid, payload[cells..].to_vec())?,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binary::write_bytes(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Header of a single-field container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub id: Option<u64>,
    pub label: String,
    pub grid: Grid,
}

pub fn write_field(path: &Path, field: &ScalarField, id: Option<u64>, label: &str) -> Result<()> {
    let header = FieldHeader {
        id,
        label: label.to_string(),
        grid: *field.grid(),
    };
    binary::write_container(path, FIELD_MAGIC, &header, field.values())
}

pub fn read_field(path: &Path) -> Result<(FieldHeader, ScalarField)> {
    let (header, payload): (FieldHeader, Vec<f64>) = binary::read_container(path, FIELD_MAGIC)?;
    let grid = checked_grid(header.grid)?;
    if payload.len() != grid.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} values for a {}x{} grid", payload.len(), grid.n(), grid.n()),
        });
    }
    let field = ScalarField::new(grid, payload)?;
    Ok((header, field))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedSample {
    pub id: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub format_version: u32,
    /// Requested sample count `M`.
    pub sample_count: usize,
    pub grid: Grid,
    pub task: Task,
    pub medium: MediumKind,
    pub master_seed: u64,
    pub realizations: usize,
    pub noise: NoiseSpec,
    pub wavenumbers: Vec<f64>,
    /// Ids with a sample file, ascending.
    pub ids: Vec<u64>,
    pub failed: Vec<FailedSample>,
    pub split: Option<Split>,
    pub config: RunConfig,
}

impl DatasetManifest {
    pub fn split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::SplitMismatch("dataset has no train/test split".into()))
    }

    pub fn ids_of(&self, part: SplitPart) -> Result<&[u64]> {
        let s = self.split()?;
        Ok(match part {
            SplitPart::Train => &s.train,
            SplitPart::Test => &s.test,
        })
    }

    pub fn check(&self, path: &Path) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Format {
                path: path.to_path_buf(),
                reason,
            })
        };
        if self.format != DATASET_FORMAT {
            return fail(format!("format tag {:?}", self.format));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        checked_grid(self.grid)?;
        if let Some(s) = &self.split {
            let known: BTreeSet<u64> = self.ids.iter().copied().collect();
            let train: BTreeSet<u64> = s.train.iter().copied().collect();
            if s.test.iter().any(|id| train.contains(id)) {
                return fail("train and test splits overlap".into());
            }
            if s.train.iter().chain(&s.test).any(|id| !known.contains(id)) {
                return fail("split refers to a sample that is not in the dataset".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Deterministic disjoint split of `ids`. The train part is drawn first from
/// a seeded shuffle; both parts are returned sorted.
pub fn split_ids(ids: &[u64], train: usize, test: usize, seed: u64) -> Result<Split> {
    if train + test > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "split {train} + {test} exceeds the {} available samples",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut SeedStream::new(seed).child("split").rng());
    let mut train_ids = shuffled[..train].to_vec();
    let mut test_ids = shuffled[train..train + test].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(Split {
        seed,
        train: train_ids,
        test: test_ids,
    })
}

/// Precomputed operators shared by every sample of a run: forward response
/// matrices and the factored stage-one solver.
pub struct StageOnePipeline {
    cfg: RunConfig,
    grid: Grid,
    ring: ReceiverRing,
    responses: Vec<ResponseMatrix>,
    solver: KaczmarzSolver,
    h: ScalarField,
}

/// Sources and truth of one sample.
pub struct SampleSources {
    pub disks: [DiskSpec; 3],
    pub g: ScalarField,
    pub h: ScalarField,
    pub truth: ScalarField,
}

impl StageOnePipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let ring = cfg.ring()?;
        let responses = forward::responses(&grid, &ring, &cfg.wavenumbers, cfg.medium, &cfg.fdfd)?;
        // stage one always inverts with the free-space kernel
        let kernels = kernel::assemble_all(&grid, &ring, &cfg.wavenumbers, cfg.task)?;
        let solver = KaczmarzSolver::from_kernels(&kernels, cfg.stage_one.gamma)?;
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            ring,
            responses,
            solver,
            h: geometry::h_profile(&grid),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn solver(&self) -> &KaczmarzSolver {
        &self.solver
    }

    pub fn sample_stream(&self, id: u64) -> SeedStream {
        SeedStream::new(derive_seed(self.cfg.seed, id))
    }

    pub fn sources(&self, id: u64) -> SampleSources {
        let disks = geometry::sample_disks(&mut self.sample_stream(id).child("disks").rng());
        match self.cfg.task {
            KernelKind::Mean => {
                let g = geometry::paint_mean(&disks, &self.grid);
                SampleSources {
                    disks,
                    truth: g.clone(),
                    g,
                    h: self.h.clone(),
                }
            }
            KernelKind::Variance => {
                let h = geometry::paint_std(&disks, &self.grid);
                SampleSources {
                    disks,
                    truth: h.clone(),
                    g: self.h.clone(),
                    h,
                }
            }
        }
    }

    /// Simulated, noised and reduced measurements for given sources.
    pub fn stage_one_data(&self, g: &ScalarField, h: &ScalarField, stream: SeedStream) -> Result<StageOneData> {
        let m = forward::simulate(
            &self.responses,
            g,
            h,
            &self.ring,
            self.cfg.realizations(),
            stream.child("realizations"),
            self.cfg.noise_sharing,
        )?;
        let m = forward::add_noise(
            &m,
            self.cfg.noise.level,
            self.cfg.noise.mode,
            stream.child("measurement-noise"),
        )?;
        forward::reduce(&m, self.cfg.task)
    }

    /// Stage-one image: the mean itself, or the clamped square root of the
    /// reconstructed variance.
    pub fn reconstruct(&self, data: &StageOneData) -> Result<ScalarField> {
        if data.kind != self.cfg.task {
            return Err(Error::InvalidArgument(format!(
                "{} data given to a {} pipeline",
                data.kind.as_str(),
                self.cfg.task.as_str()
            )));
        }
        let order: &BlockOrder = &self.cfg.stage_one.order;
        let q = self
            .solver
            .reconstruct_from_zero(&data.data, self.cfg.stage_one.outer_loops, order)?;
        let field = ScalarField::new(self.grid, q)?;
        Ok(match self.cfg.task {
            KernelKind::Mean => field,
            KernelKind::Variance => field.sqrt_clamped(),
        })
    }

    pub fn sample(&self, id: u64) -> Result<SampleRecord> {
        let src = self.sources(id);
        let stream = self.sample_stream(id);
        let data = self.stage_one_data(&src.g, &src.h, stream)?;
        let stage1 = self.reconstruct(&data)?;
        Ok(SampleRecord {
            id,
            truth: src.truth,
            stage1,
            meta: SampleMeta {
                task: self.cfg.task,
                medium: self.cfg.medium,
                seed: stream.seed(),
                realizations: self.cfg.realizations(),
                noise: self.cfg.noise,
                noise_sharing: self.cfg.noise_sharing,
                wavenumbers: self.cfg.wavenumbers.clone(),
                gamma: self.cfg.stage_one.gamma,
                outer_loops: self.cfg.stage_one.outer_loops,
                disks: src.disks.to_vec(),
            },
        })
    }
}

/// An opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: DatasetManifest = binary::read_json(&path)?;
        manifest.check(&path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn sample_path(&self, id: u64) -> PathBuf {
        self.dir.join(sample_file(id))
    }

    pub fn read_sample(&self, id: u64) -> Result<SampleRecord> {
        let record = SampleRecord::read(&self.sample_path(id))?;
        if record.id != id || *record.truth.grid() != self.manifest.grid {
            return Err(Error::Format {
                path: self.sample_path(id),
                reason: format!("file holds sample {} on a different grid or id", record.id),
            });
        }
        Ok(record)
    }

    pub fn read_samples(&self, ids: &[u64]) -> Result<Vec<SampleRecord>> {
        ids.par_iter().map(|&id| self.read_sample(id)).collect()
    }

    /// Replaces the split and rewrites the manifest.
    pub fn resplit(&mut self, train: usize, test: usize, seed: u64) -> Result<&Split> {
        self.manifest.split = Some(split_ids(&self.manifest.ids, train, test, seed)?);
        binary::write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)?;
        self.manifest.split()
    }
}

/// Generates `cfg.samples` samples into `dir`, in parallel over samples.
///
/// A sample that fails is logged, left out of `ids` and recorded under
/// `failed`. The manifest is written last, once every sample file exists.
pub fn generate_dataset(cfg: &RunConfig, dir: &Path, force: bool) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    binary::guard_overwrite(&manifest_path, force)?;
    let samples_dir = dir.join(SAMPLES_DIR);
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let pipeline = StageOnePipeline::new(cfg)?;
    info!(
        "generating {} {} samples ({} medium, N = {}, seed {})",
        cfg.samples,
        cfg.task.as_str(),
        cfg.medium.as_str(),
        cfg.realizations(),
        cfg.seed
    );
    let outcomes: Vec<(u64, Result<()>)> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|id| {
            let result = pipeline
                .sample(id)
                .and_then(|rec| rec.write(&dir.join(sample_file(id))));
            (id, result)
        })
        .collect();
    let mut ids = Vec::new();
    let mut failed = Vec::new();
    for (id, result) in outcomes {
        match result {
            Ok(()) => ids.push(id),
            Err(e) => {
                warn!("sample {id} skipped: {e}");
                failed.push(FailedSample {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Numeric(format!("all {} samples failed", cfg.samples)));
    }
    let split = if cfg.split.train + cfg.split.test > 0 {
        Some(split_ids(&ids, cfg.split.train, cfg.split.test, cfg.split.seed)?)
    } else {
        None
    };
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        format_version: FORMAT_VERSION,
        sample_count: cfg.samples,
        grid: *pipeline.grid(),
        task: cfg.task,
        medium: cfg.medium,
        master_seed: cfg.seed,
        realizations: cfg.realizations(),
        noise: cfg.noise,
        wavenumbers: cfg.wavenumbers.clone(),
        ids,
        failed,
        split,
        config: cfg.clone(),
    };
    binary::write_json(&manifest_path, &manifest)?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
    })
}

/// Index of a directory of per-sample predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub format: String,
    pub format_version: u32,
    pub method: String,
    pub split: SplitPart,
    pub dataset_seed: u64,
    pub ids: Vec<u64>,
    /// File names relative to the prediction directory, parallel to `ids`.
    pub files: Vec<String>,
    /// Wall-clock seconds by phase, e.g. `fit` and `predict`.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub index: PredictionIndex,
    pub fields: BTreeMap<u64, ScalarField>,
}

pub fn write_predictions(
    dir: &Path,
    method: &str,
    split: SplitPart,
    manifest: &DatasetManifest,
    predictions: &[(u64, ScalarField)],
    timings: BTreeMap<String, f64>,
    force: bool,
) -> Result<PredictionIndex> {
    let index_path = dir.join(PREDICTIONS_FILE);
    binary::guard_overwrite(&index_path, force)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, field) in predictions {
        write_field(&dir.join(prediction_file(*id)), field, Some(*id), method)?;
    }
    let index = PredictionIndex {
        format: PREDICTIONS_FORMAT.into(),
        format_version: FORMAT_VERSION,
        method: method.to_string(),
        split,
        dataset_seed: manifest.master_seed,
        ids: predictions.iter().map(|(id, _)| *id).collect(),
        files: predictions.iter().map(|(id, _)| prediction_file(*id)).collect(),
        timings,
    };
    binary::write_json(&index_path, &index)?;
    Ok(index)
}

/// Reads and validates a prediction directory written by any method,
/// including external ones.
pub fn read_predictions(dir: &Path) -> Result<PredictionSet> {
    let index_path = dir.join(PREDICTIONS_FILE);
    let index: PredictionIndex = binary::read_json(&index_path)?;
    let fail = |reason: String| Error::Format {
        path: index_path.clone(),
        reason,
    };
    if index.format != PREDICTIONS_FORMAT {
        return Err(fail(format!("format tag {:?}", index.format)));
    }
    if index.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: index_path.clone(),
            found: index.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if index.ids.len() != index.files.len() {
        return Err(fail(format!("{} ids but {} files", index.ids.len(), index.files.len())));
    }
    let mut fields = BTreeMap::new();
    for (id, file) in index.ids.iter().zip(&index.files) {
        let (header, field) = read_field(&dir.join(file))?;
        if header.id != Some(*id) {
            return Err(fail(format!("{file} holds id {:?}, index says {id}", header.id)));
        }
        if fields.insert(*id, field).is_some() {
            return Err(fail(format!("duplicate id {id}")));
        }
    }
    Ok(PredictionSet { index, fields })
}

/// Job description handed to an external stage-two method. The process
/// reads the dataset, writes a prediction directory for `predict_split`, and
/// exits with status 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    pub method: String,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub train_split: SplitPart,
    pub predict_split: SplitPart,
    pub seed: u64,
    /// Method-specific settings, passed through untouched.
    #[serde(default)]
    pub options: serde_json::Value,
}
