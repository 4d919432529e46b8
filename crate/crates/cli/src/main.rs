use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ginot::datagen::{generate_dataset, read_dataset, write_dataset, GenerateConfig, PoissonDataset};
use ginot::numerics::Tensor;
use ginot::pointcloud::PointCloud;
use ginot::solution_decoder::QueryBatch;
use ginot::training::{
    evaluate, load_checkpoint, robustness_table, CloudVariant, EvalSummary, FieldPredictor,
    Predictor, StoredTargets, TrainConfig, Trainer, DENSITY_LEVELS, LAST_DIR,
};
use ginot::{GinotConfig, GinotError};

#[derive(Parser)]
#[command(name = "ginot", version, about = "Geometry-informed neural operator on boundary point clouds")]
struct Cli {
    /// Seed for data generation, training and evaluation perturbations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (dataset directory, run directory, or result directory/file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML file of hyperparameters (unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Poisson dataset of random star-shaped domains.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// L2 relative error statistics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict field values at query points for a boundary point cloud.
    Infer(InferArgs),
    /// Shuffle, padding and density robustness table.
    Robustness(RobustnessArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    grid_n: Option<usize>,
    /// Lower end of the source scale range; needs --lambda-max.
    #[arg(long, requires = "lambda_max")]
    lambda_min: Option<f64>,
    #[arg(long, requires = "lambda_min")]
    lambda_max: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint directory to continue from (e.g. RUN/last).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "stored_targets")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Evaluate the stored solutions instead of a model (errors are zero).
    #[arg(long, hide = true)]
    stored_targets: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV of boundary points, one `x,y` per line.
    #[arg(long)]
    boundary: PathBuf,
    /// CSV of query points, one `x,y` per line.
    #[arg(long)]
    queries: PathBuf,
    /// Source scale for models trained with extra inputs.
    #[arg(long, default_value_t = 1.0)]
    load: f64,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Density levels in percent.
    #[arg(long, value_delimiter = ',')]
    densities: Option<Vec<f64>>,
}

/// Flat hyperparameter file; every key is optional and overrides the defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    batch_size: Option<usize>,
    lr: Option<f64>,
    patience: Option<usize>,
    factor: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    clip_norm: Option<f64>,
    random_fps_init: Option<bool>,
    max_train_queries: Option<usize>,
    #[serde(rename = "N_s")]
    n_s: Option<usize>,
    #[serde(rename = "N_p")]
    n_p: Option<usize>,
    r: Option<f64>,
    embed_dim: Option<usize>,
    encoder_heads: Option<usize>,
    decoder_heads: Option<usize>,
    encoder_cross_layers: Option<usize>,
    encoder_self_layers: Option<usize>,
    decoder_cross_layers: Option<usize>,
    frequencies: Option<usize>,
    n_samples: Option<usize>,
    grid_n: Option<usize>,
    lambda_min: Option<f64>,
    lambda_max: Option<f64>,
    train_fraction: Option<f64>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::new("E_IO", format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Failure::new("E_CONFIG", e.message()))
            }
        }
    }

    fn model(&self) -> GinotConfig {
        let mut m = GinotConfig::default();
        set(&mut m.n_samples, self.n_s);
        set(&mut m.group_size, self.n_p);
        set(&mut m.radius, self.r);
        set(&mut m.embed_dim, self.embed_dim);
        set(&mut m.encoder_heads, self.encoder_heads);
        set(&mut m.decoder_heads, self.decoder_heads);
        set(&mut m.encoder_cross_layers, self.encoder_cross_layers);
        set(&mut m.encoder_self_layers, self.encoder_self_layers);
        set(&mut m.decoder_cross_layers, self.decoder_cross_layers);
        set(&mut m.encoding.num_frequencies, self.frequencies);
        m
    }

    fn train(&self) -> TrainConfig {
        let mut t = TrainConfig::default();
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.patience, self.patience);
        set(&mut t.factor, self.factor);
        set(&mut t.epochs, self.epochs);
        set(&mut t.seed, self.seed);
        set(&mut t.clip_norm, self.clip_norm);
        set(&mut t.random_fps_init, self.random_fps_init);
        set(&mut t.max_train_queries, self.max_train_queries);
        t
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<GinotError> for Failure {
    fn from(e: GinotError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new("E_IO", e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::new("E_CSV", e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "{}: {}", self.code, one_line)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Generate(a) => generate(&cfg, a, seed, cli.out),
        Command::Train(a) => train(&cfg, a, cli.seed, cli.out),
        Command::Eval(a) => eval(a, seed, cli.out),
        Command::Infer(a) => infer(a, cli.out),
        Command::Robustness(a) => robustness(a, seed, cli.out),
    }
}

fn generate(cfg: &RunConfig, a: GenerateArgs, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut g = GenerateConfig {
        seed,
        ..GenerateConfig::default()
    };
    set(&mut g.n_samples, a.n_samples.or(cfg.n_samples));
    set(&mut g.grid_n, a.grid_n.or(cfg.grid_n));
    set(&mut g.train_fraction, cfg.train_fraction);
    g.load_range = match (a.lambda_min.or(cfg.lambda_min), a.lambda_max.or(cfg.lambda_max)) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => return Err(Failure::new("E_CONFIG", "lambda_min and lambda_max must be set together")),
    };
    let out = out.unwrap_or_else(|| PathBuf::from("data"));
    if g.n_samples == 0 {
        eprintln!("warning: n_samples = 0, writing an empty dataset");
    }
    let ds = generate_dataset(&g)?;
    write_dataset(&ds, &out)?;
    println!(
        "wrote {} samples to {} (train {}, test {}, query count min {} max {})",
        ds.len(),
        out.display(),
        ds.meta.split.train.len(),
        ds.meta.split.test.len(),
        ds.meta.query_count_min,
        ds.meta.query_count_max
    );
    Ok(())
}

fn train(cfg: &RunConfig, a: TrainArgs, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let ds = read_dataset(&a.data)?;
    let out = out.unwrap_or_else(|| PathBuf::from("run"));
    let mut trainer = match &a.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let state = ck.train.ok_or_else(|| {
                Failure::new("E_ARG", format!("{} holds no training state", dir.display()))
            })?;
            Trainer::resume(ck.model, ck.norm, state, a.epochs.or(cfg.epochs), &ds)?
        }
        None => {
            let mut model = cfg.model();
            model.with_extras = ds.meta.generator.load_range.is_some();
            let mut t = cfg.train();
            set(&mut t.seed, seed);
            set(&mut t.epochs, a.epochs);
            Trainer::new(model, t, &ds)?
        }
    };
    println!("epoch,train_mse,val_mse,val_l2,lr");
    trainer.fit(Some(&out), |m| println!("{}", m.csv_line()))?;
    println!("run written to {} (checkpoint {})", out.display(), out.join(LAST_DIR).display());
    Ok(())
}

fn split_indices(ds: &PoissonDataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => ds.meta.split.train.clone(),
        SplitArg::Test => ds.meta.split.test.clone(),
        SplitArg::All => (0..ds.len()).collect(),
    }
}

fn predictor(path: &Path) -> Result<Predictor, Failure> {
    let ck = load_checkpoint(path)?;
    Ok(Predictor::new(ck.model, ck.norm))
}

fn summary_row(label: &str, s: &EvalSummary) -> [String; 6] {
    [
        label.to_string(),
        s.per_sample.len().to_string(),
        s.mean.to_string(),
        s.std.to_string(),
        s.median.to_string(),
        s.worst.to_string(),
    ]
}

const SUMMARY_HEADER: [&str; 6] = ["mode", "count", "mean_l2", "std_l2", "median_l2", "worst_l2"];

fn eval(a: EvalArgs, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    let ds = read_dataset(&a.data)?;
    let model;
    let p: &dyn FieldPredictor = if a.stored_targets {
        &StoredTargets
    } else {
        model = predictor(a.checkpoint.as_deref().expect("required by clap"))?;
        &model
    };
    let idx = split_indices(&ds, a.split);
    let s = evaluate(p, &ds, &idx, CloudVariant::Original, seed)?;
    let out = out.unwrap_or_else(|| PathBuf::from("eval"));
    fs::create_dir_all(&out)?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(SUMMARY_HEADER)?;
    w.write_record(summary_row("original", &s))?;
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("per_sample.csv"))?;
    w.write_record(["sample", "l2"])?;
    for (i, e) in &s.per_sample {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    println!(
        "{} samples: mean L2 {:.6} std {:.6} median {:.6} worst {:.6}",
        s.per_sample.len(),
        s.mean,
        s.std,
        s.median,
        s.worst
    );
    Ok(())
}

fn read_points(path: &Path) -> Result<Tensor, Failure> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) if v.len() == 2 => rows.push(v),
            Err(_) if line == 0 => continue,
            _ => {
                return Err(Failure::new(
                    "E_CSV",
                    format!("{}: line {} is not an x,y pair", path.display(), line + 1),
                ))
            }
        }
    }
    if rows.is_empty() {
        return Err(Failure::new("E_CSV", format!("{}: no points", path.display())));
    }
    Ok(Tensor::from_rows(&rows)?)
}

fn infer(a: InferArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let p = predictor(&a.checkpoint)?;
    let cloud = PointCloud::from_points(read_points(&a.boundary)?)?;
    let queries = QueryBatch::all_valid(read_points(&a.queries)?)?;
    let y = p.predict_raw(&cloud, &queries, a.load)?;
    let out = out.unwrap_or_else(|| PathBuf::from("predictions.csv"));
    let mut w = csv::Writer::from_path(&out)?;
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend((0..y.last_dim()).map(|c| if y.last_dim() == 1 { "u".into() } else { format!("u{c}") }));
    w.write_record(&header)?;
    for r in 0..queries.len() {
        let rec: Vec<String> = queries.points.row(r).iter().chain(y.row(r)).map(f64::to_string).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", queries.len(), out.display());
    Ok(())
}

fn robustness(a: RobustnessArgs, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    let densities = a.densities.unwrap_or_else(|| DENSITY_LEVELS.to_vec());
    if let Some(d) = densities.iter().find(|&&d| !(d > 0.0 && d <= 100.0)) {
        return Err(Failure::new("E_ARG", format!("density {d} outside (0, 100]")));
    }
    let ds = read_dataset(&a.data)?;
    let p = predictor(&a.checkpoint)?;
    let rows = robustness_table(&p, &ds, &split_indices(&ds, a.split), &densities, seed)?;
    let out = out.unwrap_or_else(|| PathBuf::from("robustness.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in &rows {
        w.write_record(summary_row(&r.mode, &r.summary))?;
        println!("{:<18} mean L2 {:.6}", r.mode, r.summary.mean);
    }
    w.flush()?;
    Ok(())
}
