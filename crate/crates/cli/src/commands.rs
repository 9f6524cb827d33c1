use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use randsource::binary;
use randsource::dataset::{self, Dataset, ExternalSpec, PredictionSet, SplitPart};
use randsource::error::ErrorClass;
use randsource::eval::{self, EvaluationReport};
use randsource::kaczmarz::diagnostics::{self, SemiconvergenceReport};
use randsource::linalg;
use randsource::stage2::{self, ModelHeader, RankSelection};
use randsource::{BlockSystem, Error, KernelKind, Method, RunConfig, ScalarField, Stage2Model};

use crate::{Cli, Command, ConfigArgs, ImageFormat, MethodArg, RankArg};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("external method `{program}` failed: {reason}")]
    External { program: String, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
            CliError::External { .. } => 3,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn init_workers(workers: Option<usize>) -> Result<()> {
    // faer kernels stay sequential; all parallelism is rayon over
    // independent work items, so outputs do not depend on the worker count
    faer::set_global_parallelism(faer::Par::Seq);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::InvalidArgument("workers must be positive".into()).into());
        }
        builder = builder.num_threads(n);
    }
    if builder.build_global().is_err() {
        warn!("worker pool already initialized");
    }
    Ok(())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            cfg.task = t.into();
        }
        if let Some(m) = self.medium {
            cfg.medium = m.into();
        }
        if let Some(m) = self.samples {
            cfg.samples = m;
        }
        if let Some(n) = self.realizations {
            cfg.realizations = Some(n);
        }
        if let Some(level) = self.noise {
            cfg.noise.level = level;
        }
        if let Some(mode) = self.noise_mode {
            cfg.noise.mode = mode.into();
        }
        if let Some(n) = self.grid {
            cfg.grid_n = n;
        }
        if let Some(n) = self.train {
            cfg.split.train = n;
        }
        if let Some(n) = self.test {
            cfg.split.test = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        // shrink the default split to fit small runs
        if cfg.split.train + cfg.split.test > cfg.samples && self.train.is_none() && self.test.is_none() {
            cfg.split.test = cfg.samples / 5;
            cfg.split.train = cfg.samples - cfg.split.test;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn start_event(command: &str, seed: Option<u64>) {
    let event = serde_json::json!({
        "event": "start",
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
    });
    info!("{event}");
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli {
        workers,
        force,
        command,
    } = cli;
    match command {
        Command::PrintConfig(args) => {
            let cfg = args.resolve()?;
            println!("{}", cfg.to_json());
            Ok(())
        }
        Command::Generate { config, out } => {
            let cfg = config.resolve()?;
            init_workers(workers.or(cfg.workers))?;
            start_event("generate", Some(cfg.seed));
            let ds = dataset::generate_dataset(&cfg, &out, force)?;
            print_json(&serde_json::json!({
                "dataset": out,
                "samples": ds.manifest().ids.len(),
                "failed": ds.manifest().failed.len(),
            }))
        }
        Command::Split {
            dataset,
            train,
            test,
            seed,
        } => {
            start_event("split", Some(seed));
            let mut ds = Dataset::open(&dataset)?;
            let fresh = dataset::split_ids(&ds.manifest().ids, train, test, seed)?;
            if ds.manifest().split.as_ref().is_some_and(|s| *s != fresh) && !force {
                return Err(Error::AlreadyExists(dataset.join(dataset::MANIFEST_FILE)).into());
            }
            let s = ds.resplit(train, test, seed)?;
            print_json(s)
        }
        Command::Stage1 {
            dataset,
            ids,
            split,
            out,
        } => {
            init_workers(workers)?;
            start_event("stage1", None);
            cmd_stage1(&dataset, ids, split.into(), &out, force)
        }
        Command::Fit {
            dataset,
            method,
            rank,
            out,
        } => {
            init_workers(workers)?;
            start_event("fit", None);
            let ds = Dataset::open(&dataset)?;
            fit(&ds, method.into(), rank, &out, force).map(|_| ())
        }
        Command::Predict {
            model,
            dataset,
            split,
            label,
            out,
        } => {
            init_workers(workers)?;
            start_event("predict", None);
            let ds = Dataset::open(&dataset)?;
            predict(&model, &ds, split.into(), label.as_deref(), &out, force).map(|_| ())
        }
        Command::Evaluate {
            dataset,
            predictions,
            split,
            out,
        } => {
            init_workers(workers)?;
            start_event("evaluate", None);
            let ds = Dataset::open(&dataset)?;
            let report = evaluate(&ds, &predictions, split.into(), &out, force)?;
            print_summary(&report);
            Ok(())
        }
        Command::Plots {
            dataset,
            predictions,
            split,
            ids,
            format,
            out,
        } => {
            init_workers(workers)?;
            start_event("plots", None);
            let ds = Dataset::open(&dataset)?;
            plots(&ds, &predictions, split.into(), ids, format, &out, force)
        }
        Command::Diagnose {
            config,
            sample,
            sweeps,
            out,
        } => {
            let mut cfg = config.resolve()?;
            if config.grid.is_none() && config.config.is_none() {
                // dense operators are cells x cells
                cfg.grid_n = 16;
            }
            init_workers(workers.or(cfg.workers))?;
            start_event("diagnose", Some(cfg.seed));
            diagnose(&cfg, sample, sweeps, &out, force)
        }
        Command::Pipeline {
            config,
            methods,
            rank,
            out,
        } => {
            let cfg = config.resolve()?;
            init_workers(workers.or(cfg.workers))?;
            start_event("pipeline", Some(cfg.seed));
            pipeline(&cfg, &methods, rank, &out, force)
        }
        Command::External {
            dataset,
            program,
            args,
            method,
            out,
            options,
            seed,
        } => {
            init_workers(workers)?;
            start_event("external", Some(seed));
            let options = serde_json::from_str(&options)
                .map_err(|e| Error::InvalidArgument(format!("--options is not valid JSON: {e}")))?;
            let spec = ExternalSpec {
                method,
                dataset,
                output: out,
                train_split: SplitPart::Train,
                predict_split: SplitPart::Test,
                seed,
                options,
            };
            run_external(&program, &args, &spec, force).map(|_| ())
        }
    }
}

fn cmd_stage1(dir: &Path, ids: Vec<u64>, part: SplitPart, out: &Path, force: bool) -> Result<()> {
    let ds = Dataset::open(dir)?;
    let ids = if ids.is_empty() {
        ds.manifest().ids_of(part)?.to_vec()
    } else {
        ids
    };
    let pipeline = dataset::StageOnePipeline::new(&ds.manifest().config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let deviations = ids
        .par_iter()
        .map(|&id| {
            let path = out.join(format!("stage1_{id:06}.bin"));
            binary::guard_overwrite(&path, force)?;
            let stored = ds.read_sample(id)?;
            let fresh = pipeline.sample(id)?;
            dataset::write_field(&path, &fresh.stage1, Some(id), "stage1")?;
            let dev = fresh
                .stage1
                .values()
                .iter()
                .zip(stored.stage1.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((id, dev))
        })
        .collect::<Result<BTreeMap<u64, f64>, Error>>()?;
    let worst = deviations.values().copied().fold(0.0, f64::max);
    if worst > 0.0 {
        warn!("recomputed stage-one images differ from the stored ones by up to {worst:e}");
    }
    print_json(&serde_json::json!({ "ids": ids, "max_deviation": worst }))
}

/// Sidecar written next to every model file.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model: ModelHeader,
    pub dataset_seed: u64,
    pub train_ids: Vec<u64>,
    pub fit_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_selection: Option<RankSelection>,
    pub version: String,
}

fn sidecar(model_path: &Path) -> PathBuf {
    let mut name = model_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn training_matrices(ds: &Dataset) -> Result<(faer::Mat<f64>, faer::Mat<f64>, Vec<u64>)> {
    let ids = ds.manifest().ids_of(SplitPart::Train)?.to_vec();
    let records = ds.read_samples(&ids)?;
    let xs: Vec<ScalarField> = records.iter().map(|r| r.stage1.clone()).collect();
    let ys: Vec<ScalarField> = records.into_iter().map(|r| r.truth).collect();
    Ok((stage2::snapshot_matrix(&xs)?, stage2::snapshot_matrix(&ys)?, ids))
}

fn fit(ds: &Dataset, method: Method, rank: Option<RankArg>, out: &Path, force: bool) -> Result<Stage2Model> {
    binary::guard_overwrite(out, force)?;
    let (x, y, train_ids) = training_matrices(ds)?;
    let clock = Instant::now();
    let (rank, rank_selection) = match rank {
        Some(RankArg::Fixed(r)) => (r, None),
        None => (ds.manifest().config.stage_two.rank(method), None),
        Some(RankArg::Auto) => {
            let folds = stage2::RANK_FOLDS.min(train_ids.len());
            let pick = stage2::select_rank(method, &x, &y, &stage2::RANK_CANDIDATES, folds)?;
            info!(
                "{} rank scores {:?}, picked {}",
                method.as_str(),
                pick.scores,
                pick.best
            );
            (pick.best, Some(pick))
        }
    };
    let model = Stage2Model::fit(method, &x, &y, rank)?;
    let fit_seconds = clock.elapsed().as_secs_f64();
    info!(
        "fitted {} on {} samples: rank {} (requested {rank}) in {fit_seconds:.2}s",
        method.as_str(),
        train_ids.len(),
        model.rank()
    );
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    model.write(out)?;
    let manifest = ModelManifest {
        model: model.header(),
        dataset_seed: ds.manifest().master_seed,
        train_ids,
        fit_seconds,
        rank_selection,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    binary::write_json(&sidecar(out), &manifest)?;
    Ok(model)
}

fn predict(
    model_path: &Path,
    ds: &Dataset,
    part: SplitPart,
    label: Option<&str>,
    out: &Path,
    force: bool,
) -> Result<PredictionSet> {
    let model = Stage2Model::read(model_path)?;
    if model.cells() != ds.manifest().grid.len() {
        return Err(Error::shape(
            format!("model for {} cells", model.cells()),
            format!("dataset with {}", ds.manifest().grid.len()),
        )
        .into());
    }
    let mut timings = BTreeMap::new();
    if let Ok(m) = binary::read_json::<ModelManifest>(&sidecar(model_path)) {
        if m.dataset_seed != ds.manifest().master_seed {
            return Err(Error::SplitMismatch(format!(
                "model was fitted on dataset seed {}, predicting for seed {}",
                m.dataset_seed,
                ds.manifest().master_seed
            ))
            .into());
        }
        timings.insert("fit".to_string(), m.fit_seconds);
    }
    let ids = ds.manifest().ids_of(part)?.to_vec();
    let clock = Instant::now();
    let predictions = ds
        .read_samples(&ids)?
        .par_iter()
        .map(|r| Ok((r.id, model.predict_field(&r.stage1)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    timings.insert("predict".to_string(), clock.elapsed().as_secs_f64());
    let method = label.unwrap_or(model.method().as_str());
    dataset::write_predictions(out, method, part, ds.manifest(), &predictions, timings, force)?;
    Ok(dataset::read_predictions(out)?)
}

fn evaluate(ds: &Dataset, dirs: &[PathBuf], part: SplitPart, out: &Path, force: bool) -> Result<EvaluationReport> {
    let sets = dirs
        .iter()
        .map(|d| dataset::read_predictions(d))
        .collect::<Result<Vec<_>, Error>>()?;
    let report = eval::compare_methods(ds, part, &sets)?;
    report.write(out, force)?;
    eval::write_timings(out, &eval::collect_timings(&sets), force)?;
    Ok(report)
}

fn print_summary(report: &EvaluationReport) {
    println!("method        mean L1 error   reference");
    for m in &report.methods {
        let reference = report
            .reference
            .errors
            .get(&m.method)
            .map_or("-".to_string(), |v| format!("{v:.2}"));
        println!("{:<12}  {:>13.4}   {reference}", m.method, m.mean_error);
    }
}

fn plots(
    ds: &Dataset,
    dirs: &[PathBuf],
    part: SplitPart,
    ids: Vec<u64>,
    format: ImageFormat,
    out: &Path,
    force: bool,
) -> Result<()> {
    let ids = if ids.is_empty() {
        ds.manifest().ids_of(part)?.iter().take(4).copied().collect()
    } else {
        ids
    };
    let sets = dirs
        .iter()
        .map(|d| dataset::read_predictions(d))
        .collect::<Result<Vec<_>, Error>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ext = format.extension();
    for id in ids {
        let rec = ds.read_sample(id)?;
        let (lo, hi) = rec
            .truth
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let mut panels: Vec<(String, &ScalarField)> =
            vec![("truth".into(), &rec.truth), (eval::BASELINE.into(), &rec.stage1)];
        for set in &sets {
            let field = set.fields.get(&id).ok_or_else(|| {
                Error::SplitMismatch(format!("{} has no prediction for sample {id}", set.index.method))
            })?;
            panels.push((set.index.method.clone(), field));
        }
        for (label, field) in panels {
            let path = out.join(format!("sample_{id:06}_{label}.{ext}"));
            binary::guard_overwrite(&path, force)?;
            eval::render_pseudocolor(field, &path, Some((lo, hi)))?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DiagnosticsReport {
    grid_n: usize,
    sample: u64,
    gamma: f64,
    sigma: f64,
    b_tilde_norm: f64,
    contraction: f64,
    semiconvergence: SemiconvergenceReport,
}

fn diagnose(cfg: &RunConfig, sample: u64, sweeps: usize, out: &Path, force: bool) -> Result<()> {
    binary::guard_overwrite(out, force)?;
    let pipeline = dataset::StageOnePipeline::new(cfg)?;
    let src = pipeline.sources(sample);
    let noisy = pipeline.stage_one_data(&src.g, &src.h, pipeline.sample_stream(sample))?;
    let target = match cfg.task {
        KernelKind::Mean => src.g.clone(),
        KernelKind::Variance => src.h.squared(),
    };
    let blocks = pipeline.solver().blocks().to_vec();
    let clean: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| linalg::mat_vec(b.as_ref(), target.values()))
        .collect();
    let sys = BlockSystem::new(blocks, clean, cfg.stage_one.gamma)?;
    let ops = diagnostics::build_iteration_operators(&sys)?;
    let report = DiagnosticsReport {
        grid_n: cfg.grid_n,
        sample,
        gamma: cfg.stage_one.gamma,
        sigma: ops.sigma,
        b_tilde_norm: ops.b_tilde_norm()?,
        contraction: ops.contraction(),
        semiconvergence: diagnostics::verify_semiconvergence(&sys, &noisy.data, sweeps)?,
    };
    info!(
        "sigma {:.3e}, |B~| {:.12}, worst error/bound ratio {:.3}",
        report.sigma, report.b_tilde_norm, report.semiconvergence.worst_ratio
    );
    binary::write_json(out, &report)?;
    Ok(())
}

fn pipeline(cfg: &RunConfig, methods: &[MethodArg], rank: Option<RankArg>, out: &Path, force: bool) -> Result<()> {
    let data_dir = out.join("dataset");
    let ds = dataset::generate_dataset(cfg, &data_dir, force)?;
    let mut pred_dirs = Vec::new();
    for &m in methods {
        let method: Method = m.into();
        let model_path = out.join("models").join(format!("{}.bin", method.as_str()));
        fit(&ds, method, rank, &model_path, force)?;
        let dir = out.join("predictions").join(method.as_str());
        predict(&model_path, &ds, SplitPart::Test, None, &dir, force)?;
        pred_dirs.push(dir);
    }
    let report = evaluate(&ds, &pred_dirs, SplitPart::Test, &out.join("report"), force)?;
    plots(
        &ds,
        &pred_dirs,
        SplitPart::Test,
        Vec::new(),
        ImageFormat::Png,
        &out.join("plots"),
        force,
    )?;
    print_summary(&report);
    Ok(())
}

fn run_external(program: &Path, args: &[String], spec: &ExternalSpec, force: bool) -> Result<PredictionSet> {
    let ds = Dataset::open(&spec.dataset)?;
    binary::guard_overwrite(&spec.output.join(dataset::PREDICTIONS_FILE), force)?;
    std::fs::create_dir_all(&spec.output).map_err(|e| Error::io(&spec.output, e))?;
    let spec_path = spec.output.join("spec.json");
    binary::write_json(&spec_path, spec)?;
    let program_name = program.display().to_string();
    let clock = Instant::now();
    let status = std::process::Command::new(program)
        .args(args)
        .arg(&spec_path)
        .status()
        .map_err(|e| CliError::External {
            program: program_name.clone(),
            reason: e.to_string(),
        })?;
    if !status.success() {
        return Err(CliError::External {
            program: program_name,
            reason: status.to_string(),
        });
    }
    info!("{} finished in {:.1}s", spec.method, clock.elapsed().as_secs_f64());
    let set = dataset::read_predictions(&spec.output)?;
    let expected = ds.manifest().ids_of(spec.predict_split)?;
    if set.index.split != spec.predict_split || set.fields.keys().ne(expected.iter()) {
        return Err(Error::SplitMismatch(format!(
            "{} wrote predictions that do not cover the {:?} split",
            spec.method, spec.predict_split
        ))
        .into());
    }
    Ok(set)
}
