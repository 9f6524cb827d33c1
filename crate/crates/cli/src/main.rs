use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use randsource::dataset::SplitPart;
use randsource::{KernelKind, MediumKind, Method, NoiseMode};

#[derive(Parser, Debug)]
#[command(
    name = "randsource",
    version,
    about = "Two-stage random source reconstruction pipeline"
)]
struct Cli {
    /// Worker threads; defaults to the config value, then to all cores.
    #[arg(long, global = true, env = "RANDSOURCE_WORKERS")]
    workers: Option<usize>,

    /// Overwrite outputs that already exist.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as JSON.
    PrintConfig(ConfigArgs),
    /// Generate a dataset of (stage-one image, truth) pairs.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the train/test split of a dataset.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Recompute stage-one images from sample metadata.
    Stage1 {
        #[arg(long)]
        dataset: PathBuf,
        /// Sample ids; defaults to the chosen split.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a stage-two model on the training split.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Retained rank, or `auto` for cross-validation on the training
        /// split; defaults to the dataset's configured rank.
        #[arg(long)]
        rank: Option<RankArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict refined images for a split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        /// Method name recorded in the predictions; defaults to the model's method.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction directories against the truth.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, num_args = 0..)]
        predictions: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render pseudocolor images of truths, stage-one images and predictions.
    Plots {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, num_args = 0..)]
        predictions: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        /// Sample ids; defaults to the first four of the split.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long, value_enum, default_value_t = ImageFormat::Ppm)]
        format: ImageFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense Kaczmarz diagnostics on the stage-one system of one sample.
    Diagnose {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long, default_value_t = 200)]
        sweeps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, fit, predict, evaluate and plot in one go.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MethodArg::Pca, MethodArg::Dmd])]
        methods: Vec<MethodArg>,
        /// Rank for every method, or `auto`; defaults to the configured ranks.
        #[arg(long)]
        rank: Option<RankArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an external stage-two method as a subprocess.
    ///
    /// The program is called as `PROGRAM [ARG...] SPEC_JSON` and must write a
    /// prediction directory at `--out`.
    External {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        program: PathBuf,
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
        /// Method options as a JSON object.
        #[arg(long, default_value = "{}")]
        options: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    medium: Option<MediumArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum)]
    noise_mode: Option<NoiseModeArg>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TaskArg {
    Mean,
    Variance,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MediumArg {
    Homogeneous,
    Inhomogeneous,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NoiseModeArg {
    Relative,
    Absolute,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MethodArg {
    Pca,
    Dmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RankArg {
    Fixed(usize),
    Auto,
}

impl std::str::FromStr for RankArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(RankArg::Auto),
            n => match n.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("expected a positive rank or `auto`, got {n:?}")),
                Ok(r) => Ok(RankArg::Fixed(r)),
            },
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Part {
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ImageFormat {
    Ppm,
    Png,
}

impl From<TaskArg> for KernelKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mean => KernelKind::Mean,
            TaskArg::Variance => KernelKind::Variance,
        }
    }
}

impl From<MediumArg> for MediumKind {
    fn from(m: MediumArg) -> Self {
        match m {
            MediumArg::Homogeneous => MediumKind::Homogeneous,
            MediumArg::Inhomogeneous => MediumKind::Inhomogeneous,
        }
    }
}

impl From<NoiseModeArg> for NoiseMode {
    fn from(m: NoiseModeArg) -> Self {
        match m {
            NoiseModeArg::Relative => NoiseMode::Relative,
            NoiseModeArg::Absolute => NoiseMode::Absolute,
        }
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pca => Method::Pca,
            MethodArg::Dmd => Method::Dmd,
        }
    }
}

impl From<Part> for SplitPart {
    fn from(p: Part) -> Self {
        match p {
            Part::Train => SplitPart::Train,
            Part::Test => SplitPart::Test,
        }
    }
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
