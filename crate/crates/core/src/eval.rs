//! Error metric, method comparison reports and pseudocolor images.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary;
use crate::config::Task;
use crate::dataset::{Dataset, PredictionSet, SplitPart};
use crate::error::{Error, Result};
use crate::forward::{MediumKind, NoiseMode, NoiseSpec};
use crate::geometry::ScalarField;
use crate::kernel::KernelKind;

pub const REPORT_FORMAT: &str = "randsource-report";
/// Column name of the stage-one baseline in every report.
pub const BASELINE: &str = "stage1";

/// `Σ|pred − truth| / Σ|truth|`.
pub fn l1_relative_error(pred: &ScalarField, truth: &ScalarField) -> Result<f64> {
    if !pred.same_grid(truth) {
        return Err(Error::shape(
            format!("{0}x{0} prediction", truth.grid().n()),
            format!("{0}x{0}", pred.grid().n()),
        ));
    }
    let denom: f64 = truth.values().iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "relative error against an all-zero truth".into(),
        ));
    }
    let num: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(num / denom)
}

/// 256-entry RGB lookup table, index 0 at the low end of the range.
pub struct Colormap {
    entries: Vec<[u8; 3]>,
}

static VIRIDIS: OnceLock<Colormap> = OnceLock::new();

impl Colormap {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let rgb: Vec<u8> = l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                <[u8; 3]>::try_from(rgb).map_err(|_| Error::InvalidArgument(format!("bad colormap line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.len() != 256 {
            return Err(Error::InvalidArgument(format!(
                "colormap has {} entries, expected 256",
                entries.len()
            )));
        }
        Ok(Self { entries })
    }

    /// The shipped map, from `data/viridis.txt`.
    pub fn viridis() -> &'static Colormap {
        VIRIDIS.get_or_init(|| Colormap::parse(include_str!("../data/viridis.txt")).expect("shipped colormap parses"))
    }

    /// `round(255 · clamp((v − lo)/(hi − lo), 0, 1))`; a degenerate range
    /// maps everything to index 0.
    pub fn index(value: f64, lo: f64, hi: f64) -> u8 {
        if hi <= lo {
            return 0;
        }
        let t = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }

    pub fn color(&self, index: u8) -> [u8; 3] {
        self.entries[index as usize]
    }
}

fn value_range(field: &ScalarField, range: Option<(f64, f64)>) -> Result<(f64, f64)> {
    if field.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field to render"));
    }
    match range {
        Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo <= hi => Ok((lo, hi)),
        Some((lo, hi)) => Err(Error::InvalidArgument(format!("bad color range ({lo}, {hi})"))),
        None => Ok(field
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })),
    }
}

/// RGB pixels, one per cell, top image row = largest second coordinate.
pub fn render_rgb(field: &ScalarField, range: Option<(f64, f64)>) -> Result<Vec<u8>> {
    let (lo, hi) = value_range(field, range)?;
    let n = field.grid().n();
    let map = Colormap::viridis();
    let mut out = Vec::with_capacity(3 * n * n);
    for row in (0..n).rev() {
        for col in 0..n {
            out.extend_from_slice(&map.color(Colormap::index(field.values()[row * n + col], lo, hi)));
        }
    }
    Ok(out)
}

/// Binary PPM (P6) bytes.
pub fn render_ppm(field: &ScalarField, range: Option<(f64, f64)>) -> Result<Vec<u8>> {
    let n = field.grid().n();
    let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
    out.extend(render_rgb(field, range)?);
    Ok(out)
}

#[cfg(feature = "png")]
fn encode_png(field: &ScalarField, range: Option<(f64, f64)>, path: &Path) -> Result<Vec<u8>> {
    let n = field.grid().n() as u32;
    let rgb = render_rgb(field, range)?;
    let mut bytes = Vec::new();
    let mut enc = png::Encoder::new(&mut bytes, n, n);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(&rgb).map_err(fail)?;
    w.finish().map_err(fail)?;
    Ok(bytes)
}

/// Writes a PPM, or a PNG when the path ends in `.png` and the `png`
/// feature is enabled.
pub fn render_pseudocolor(field: &ScalarField, path: &Path, range: Option<(f64, f64)>) -> Result<()> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        #[cfg(feature = "png")]
        {
            encode_png(field, range, path)?
        }
        #[cfg(not(feature = "png"))]
        {
            return Err(Error::InvalidArgument("PNG output needs the `png` feature".into()));
        }
    } else {
        render_ppm(field, range)?
    };
    binary::write_bytes(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodErrors {
    pub method: String,
    pub mean_error: f64,
    /// Per-sample errors keyed by sample id.
    pub errors: BTreeMap<u64, f64>,
}

impl MethodErrors {
    fn new(method: &str, errors: BTreeMap<u64, f64>) -> Self {
        let mean_error = errors.values().sum::<f64>() / errors.len() as f64;
        Self {
            method: method.to_string(),
            mean_error,
            errors,
        }
    }
}

/// Published full-scale errors for one setting, carried for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceErrors {
    pub setting: String,
    pub training_samples: usize,
    pub errors: BTreeMap<String, f64>,
    pub note: String,
}

const REFERENCE_NOTE: &str = "full-scale published values (M = 1600 training samples); context only, not a target";

pub fn reference_errors(task: Task, medium: MediumKind) -> ReferenceErrors {
    let values: [f64; 4] = match (task, medium) {
        (KernelKind::Mean, MediumKind::Homogeneous) => [0.62, 0.63, 0.20, 0.22],
        (KernelKind::Variance, MediumKind::Homogeneous) => [0.90, 0.77, 0.28, 0.30],
        (KernelKind::Mean, MediumKind::Inhomogeneous) => [0.74, 0.64, 0.27, 0.28],
        (KernelKind::Variance, MediumKind::Inhomogeneous) => [1.09, 0.75, 0.30, 0.36],
    };
    ReferenceErrors {
        setting: format!("{} task, {} medium", task.as_str(), medium.as_str()),
        training_samples: 1600,
        errors: ["pca", "dmd", "unet", "pix2pix"]
            .into_iter()
            .map(String::from)
            .zip(values)
            .collect(),
        note: REFERENCE_NOTE.into(),
    }
}

/// Published full-scale errors of the mean task in an unknown medium
/// trained on noisy data, by relative noise level.
pub fn noise_reference_errors() -> BTreeMap<String, BTreeMap<String, f64>> {
    [
        ("0.05", [0.64, 0.77, 0.26, 0.27]),
        ("0.1", [0.64, 0.73, 0.27, 0.27]),
        ("0.2", [0.65, 0.73, 0.27, 0.27]),
    ]
    .into_iter()
    .map(|(level, v)| {
        let row = ["pca", "dmd", "unet", "pix2pix"]
            .into_iter()
            .map(String::from)
            .zip(v)
            .collect();
        (level.to_string(), row)
    })
    .collect()
}

/// Reference row for a dataset setting. Noisy mean-task runs in an unknown
/// medium at a tabulated relative level use the noise table.
pub fn reference_for(task: Task, medium: MediumKind, noise: NoiseSpec) -> ReferenceErrors {
    let noisy = noise_reference_errors()
        .into_iter()
        .find(|(level, _)| level.parse::<f64>().is_ok_and(|l| (l - noise.level).abs() < 1e-12));
    match (task, medium, noise.mode, noisy) {
        (KernelKind::Mean, MediumKind::Inhomogeneous, NoiseMode::Relative, Some((level, errors))) => ReferenceErrors {
            setting: format!(
                "{} task, {} medium, relative noise {level}",
                task.as_str(),
                medium.as_str()
            ),
            training_samples: 1600,
            errors,
            note: REFERENCE_NOTE.into(),
        },
        _ => reference_errors(task, medium),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub format_version: u32,
    pub dataset_seed: u64,
    pub task: Task,
    pub medium: MediumKind,
    pub split: SplitPart,
    pub ids: Vec<u64>,
    /// Baseline first, then methods in the order given.
    pub methods: Vec<MethodErrors>,
    pub reference: ReferenceErrors,
}

impl EvaluationReport {
    pub fn method(&self, name: &str) -> Option<&MethodErrors> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// One row per method: `method,samples,mean_l1_error,reference_l1_error`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv encoding: {e}"));
        w.write_record(["method", "samples", "mean_l1_error", "reference_l1_error"])
            .map_err(csv_err)?;
        for m in &self.methods {
            let reference = self
                .reference
                .errors
                .get(&m.method)
                .map_or(String::new(), |v| v.to_string());
            w.write_record([
                m.method.clone(),
                m.errors.len().to_string(),
                m.mean_error.to_string(),
                reference,
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json` and `report.csv`. Wall-clock timings are kept
    /// out of both so reports are reproducible byte for byte.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        let (json, csv_path) = (dir.join("report.json"), dir.join("report.csv"));
        binary::guard_overwrite(&json, force)?;
        binary::guard_overwrite(&csv_path, force)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        binary::write_json(&json, self)?;
        binary::write_bytes(&csv_path, self.to_csv()?.as_bytes())
    }
}

/// Wall-clock seconds by method and phase.
pub type Timings = BTreeMap<String, BTreeMap<String, f64>>;

pub fn collect_timings(sets: &[PredictionSet]) -> Timings {
    sets.iter()
        .map(|s| (s.index.method.clone(), s.index.timings.clone()))
        .collect()
}

pub fn write_timings(dir: &Path, timings: &Timings, force: bool) -> Result<()> {
    let path = dir.join("timings.json");
    binary::guard_overwrite(&path, force)?;
    let mut f = serde_json::to_vec_pretty(timings)?;
    f.write_all(b"\n").expect("writing to a Vec cannot fail");
    binary::write_bytes(&path, &f)
}

/// Scores every prediction set and the stage-one baseline on one split.
///
/// Every set must cover exactly the split's ids and come from the same
/// dataset; anything else is a [`Error::SplitMismatch`].
pub fn compare_methods(dataset: &Dataset, part: SplitPart, sets: &[PredictionSet]) -> Result<EvaluationReport> {
    let manifest = dataset.manifest();
    let ids = manifest.ids_of(part)?.to_vec();
    if ids.is_empty() {
        return Err(Error::SplitMismatch(format!("the {part:?} split is empty")));
    }
    let expected: BTreeSet<u64> = ids.iter().copied().collect();
    let mut names = BTreeSet::from([BASELINE.to_string()]);
    for set in sets {
        let idx = &set.index;
        if !names.insert(idx.method.clone()) {
            return Err(Error::InvalidArgument(format!("method {:?} given twice", idx.method)));
        }
        if idx.split != part || idx.dataset_seed != manifest.master_seed {
            return Err(Error::SplitMismatch(format!(
                "{} predictions are for the {:?} split of dataset seed {}, evaluating {:?} of seed {}",
                idx.method, idx.split, idx.dataset_seed, part, manifest.master_seed
            )));
        }
        let got: BTreeSet<u64> = set.fields.keys().copied().collect();
        if got != expected {
            let missing = expected.difference(&got).count();
            let extra = got.difference(&expected).count();
            return Err(Error::SplitMismatch(format!(
                "{} predictions miss {missing} and add {extra} ids relative to the split",
                idx.method
            )));
        }
    }
    let records = dataset.read_samples(&ids)?;
    let score = |pick: &(dyn Fn(u64, &ScalarField) -> Result<f64> + Sync)| -> Result<BTreeMap<u64, f64>> {
        records.par_iter().map(|r| Ok((r.id, pick(r.id, &r.truth)?))).collect()
    };
    let by_id: BTreeMap<u64, &ScalarField> = records.iter().map(|r| (r.id, &r.stage1)).collect();
    let mut methods = vec![MethodErrors::new(
        BASELINE,
        score(&|id, truth| l1_relative_error(by_id[&id], truth))?,
    )];
    for set in sets {
        let errors = score(&|id, truth| l1_relative_error(&set.fields[&id], truth))?;
        methods.push(MethodErrors::new(&set.index.method, errors));
    }
    Ok(EvaluationReport {
        format: REPORT_FORMAT.into(),
        format_version: binary::FORMAT_VERSION,
        dataset_seed: manifest.master_seed,
        task: manifest.task,
        medium: manifest.medium,
        split: part,
        ids,
        methods,
        reference: reference_for(manifest.task, manifest.medium, manifest.noise),
    })
}
