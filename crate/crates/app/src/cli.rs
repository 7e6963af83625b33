//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmap_core::classifier::{self, fgsm, ClassifierHandle, DEFAULT_BATCH_LIMIT};
use dmap_core::dataset::{shuffled_indices, BlobSpec, Dataset};
use dmap_core::delaunay::DelaunayParams;
use dmap_core::evaluation::model_labels;
use dmap_core::matrix::Matrix;
use dmap_core::pipeline::{self, PipelineConfig, RunOptions};
use dmap_core::render::{render_png, RenderOptions, PALETTE};
use dmap_core::Error;

use crate::server;

#[derive(Debug, Parser)]
#[command(name = "dmap", version, about = "Decision maps for probabilistic classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a built-in classifier on a labelled CSV and save it as JSON.
    Train(TrainArgs),
    /// Run the pipeline and write <out>.map.json and <out>.png.
    Map(MapArgs),
    /// Print the quality report.
    Eval(EvalArgs),
    /// Append FGSM-perturbed copies of dataset points.
    Adversarial(AdversarialArgs),
    /// Serve the map and probe API over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic Gaussian-blob dataset.
    Blobs(BlobsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Softmax,
    Mlp,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "softmax")]
    pub kind: Kind,
    /// Hidden layer widths for the MLP, e.g. `16,16`.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Built-in model JSON.
    #[arg(long, required_unless_present = "external", conflicts_with = "external")]
    pub model: Option<PathBuf>,
    /// External classifier: shell command (stdio protocol) or http(s) URL.
    #[arg(long, requires = "classes")]
    pub external: Option<String>,
    /// Class count expected from the external classifier.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BATCH_LIMIT)]
    pub batch_limit: usize,
    /// Pipeline configuration JSON (partial; missing fields use defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Restrict the inverse map to Delaunay neighborhoods.
    #[arg(long)]
    pub accel: bool,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// Distance-matrix cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also report the kNN score of a plain Euclidean embedding.
    #[arg(long)]
    pub euclidean_baseline: bool,
}

#[derive(Debug, Args)]
pub struct AdversarialArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BlobsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let validation = e.is_validation()
            || matches!(&e, Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound)
            || matches!(e, Error::Json(_) | Error::Csv(_));
        Failure {
            code: if validation { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("no such file: {}", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

/// Dataset, classifier and configuration shared by the map-producing commands.
pub struct Inputs {
    pub data: Dataset,
    pub classifier: ClassifierHandle,
    pub config: PipelineConfig,
    pub threads: usize,
}

pub fn load_inputs(args: &ModelArgs) -> CliResult<Inputs> {
    require_file(&args.data)?;
    if let Some(m) = &args.model {
        require_file(m)?;
    }
    if let Some(c) = &args.config {
        require_file(c)?;
    }
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
            let patch: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            PipelineConfig::default().merged(&patch)?
        }
        None => PipelineConfig::default(),
    };
    if args.accel && config.accel.is_none() {
        config.accel = Some(DelaunayParams::default());
    }
    let data = Dataset::load_csv(&args.data)?;
    let classifier = match (&args.model, &args.external) {
        (Some(path), _) => ClassifierHandle::load(path)?.with_batch_limit(args.batch_limit),
        (None, Some(endpoint)) => {
            let classes = args.classes.ok_or_else(|| invalid("--external needs --classes"))?;
            classifier::external_connect(endpoint, classes, args.batch_limit)?
        }
        (None, None) => return Err(invalid("either --model or --external is required")),
    };
    if classifier.input_dim() != data.dim() {
        return Err(invalid(format!(
            "classifier expects {} features, dataset has {}",
            classifier.input_dim(),
            data.dim()
        )));
    }
    Ok(Inputs {
        data,
        classifier,
        config,
        threads: args.threads,
    })
}

fn train(args: &TrainArgs) -> CliResult<()> {
    require_file(&args.data)?;
    let data = Dataset::load_csv(&args.data)?;
    let handle = match args.kind {
        Kind::Softmax => classifier::train_softmax(&data, args.epochs, args.learning_rate)?,
        Kind::Mlp => classifier::train_mlp(&data, &args.hidden, args.epochs, args.learning_rate, args.seed)?,
    };
    let labels = data.labels().ok_or_else(|| invalid("training data needs labels"))?;
    let pred = model_labels(&handle, data.points())?;
    let acc = pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64;
    handle.save(&args.out)?;
    println!("{}", serde_json::json!({ "training_accuracy": acc, "model": args.out }));
    Ok(())
}

fn map(args: &MapArgs) -> CliResult<()> {
    let inputs = load_inputs(&args.model)?;
    let opts = RunOptions {
        parallelism: inputs.threads,
        cache: args.cache.as_deref(),
        progress: None,
    };
    let out = pipeline::run(&inputs.data, &inputs.classifier, &inputs.config, opts)?;
    let json = out.map.to_json()?;
    let png = render_png(&out.map, &PALETTE, &RenderOptions::default())?;
    let stem = args.out.as_os_str().to_owned();
    let mut json_path = stem.clone();
    json_path.push(".map.json");
    let mut png_path = stem;
    png_path.push(".png");
    write_file(Path::new(&json_path), json.as_bytes())?;
    write_file(Path::new(&png_path), &png)?;
    println!("{}", serde_json::to_string_pretty(&out.map.quality).map_err(|e| runtime(e.to_string()))?);
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let mut inputs = load_inputs(&args.model)?;
    inputs.config.quality.euclidean_baseline |= args.euclidean_baseline;
    // quality does not depend on the grid
    inputs.config.grid.width = 1;
    inputs.config.grid.height = 1;
    let opts = RunOptions {
        parallelism: inputs.threads,
        ..Default::default()
    };
    let out = pipeline::run(&inputs.data, &inputs.classifier, &inputs.config, opts)?;
    println!("{}", serde_json::to_string_pretty(&out.map.quality).map_err(|e| runtime(e.to_string()))?);
    Ok(())
}

fn adversarial(args: &AdversarialArgs) -> CliResult<()> {
    require_file(&args.data)?;
    require_file(&args.model)?;
    let mut data = Dataset::load_csv(&args.data)?;
    let handle = ClassifierHandle::load(&args.model)?;
    let labels = data
        .labels()
        .ok_or_else(|| invalid("adversarial examples need labelled data"))?
        .to_vec();
    let pred = model_labels(&handle, data.points())?;
    let candidates: Vec<usize> = shuffled_indices(data.len(), args.seed)
        .into_iter()
        .filter(|&i| pred[i] == labels[i])
        .take(args.count)
        .collect();
    if candidates.len() < args.count {
        return Err(invalid(format!(
            "only {} correctly classified points available",
            candidates.len()
        )));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for &i in &candidates {
        rows.push(fgsm(&handle, data.points().row(i), labels[i], args.epsilon)?);
    }
    let rows = Matrix::from_rows(&rows)?;
    let new_pred = model_labels(&handle, &rows)?;
    let new_labels: Vec<usize> = candidates.iter().map(|&i| labels[i]).collect();
    data.append(&rows, Some(&new_labels))?;
    data.save_csv(&args.out)?;
    let report: Vec<_> = candidates
        .iter()
        .zip(&new_pred)
        .map(|(&i, &p)| serde_json::json!({ "source": i, "label": labels[i], "predicted": p }))
        .collect();
    println!("{}", serde_json::Value::Array(report));
    Ok(())
}

fn blobs(args: &BlobsArgs) -> CliResult<()> {
    let spec = BlobSpec {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        seed: args.seed,
        ..BlobSpec::default()
    };
    spec.generate()?.save_csv(&args.out)?;
    Ok(())
}

fn serve(args: &ServeArgs) -> CliResult<()> {
    let inputs = load_inputs(&args.model)?;
    let runtime_ = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| runtime(e.to_string()))?;
    runtime_
        .block_on(server::serve(inputs, &args.host, args.port, args.static_dir.clone()))
        .map_err(|e| runtime(e.to_string()))
}

/// Runs the parsed command.
pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Map(a) => map(a),
        Command::Eval(a) => eval(a),
        Command::Adversarial(a) => adversarial(a),
        Command::Serve(a) => serve(a),
        Command::Blobs(a) => blobs(a),
    }
}
