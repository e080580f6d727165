//! `thermal-twin` command line.
//!
//! Machine-readable outputs go to files under `--out`; stdout carries only
//! human-readable summaries. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, load_csv, simulate, Label, MotionMode, Normalizer, PlantConfig, PlantError, Trajectory,
    Window,
};
use crate::monitor::{self, MonitorError};
use crate::nn::OptimizerKind;
use crate::random::{derive_seed, seeded};
use crate::vae::{self, LatentCode, Reduction, TrainConfig, VaeConfig, VaeError, VaeModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(
    name = "thermal-twin",
    version,
    about = "Thermal condition monitoring of robot joints with a VAE"
)]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Plant configuration (JSON) for `simulate`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate cool (cruising) and hot (holding) trajectories.
    Simulate(SimulateArgs),
    /// Train the VAE on the cool trajectories of a corpus.
    Train(TrainArgs),
    /// Score trajectories window by window against the anomaly threshold.
    Score(ScoreArgs),
    /// Thermal difficulty of a planned trajectory over a time horizon.
    Difficulty(DifficultyArgs),
    /// Sample normalized motion windows from the decoder.
    Generate(GenerateArgs),
    /// Export posterior means/stds and a density grid for plotting.
    ExportLatent(ExportLatentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 8)]
    pub cool: usize,
    #[arg(long, default_value_t = 4)]
    pub hot: usize,
    /// Seconds per trajectory.
    #[arg(long, default_value_t = 600.0)]
    pub duration: f64,
    /// Number of joints when no --config is given.
    #[arg(long, default_value_t = 1)]
    pub joints: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory (with manifest.json); defaults to --out.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long, default_value = "sum")]
    pub reduction: Reduction,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Trajectory CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Overrides the threshold stored in the model.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DifficultyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Horizon start, seconds.
    #[arg(long)]
    pub t_low: f64,
    /// Horizon end, seconds.
    #[arg(long)]
    pub t_high: f64,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Defaults to the trajectory file stem.
    #[arg(long)]
    pub robot_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub count: usize,
    /// Seed of the ε draws; defaults to --seed.
    #[arg(long)]
    pub eps_seed: Option<u64>,
    /// Mean `m1,m2` of the base latent code (defaults to the prior).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub base_mu: Option<Vec<f64>>,
    /// Log-variance `v1,v2` of the base latent code (defaults to `0,0`).
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        requires = "base_mu"
    )]
    pub base_log_var: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ExportLatentArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory (with manifest.json); defaults to --out.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Density grid cells per side; 0 disables the grid.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Grid margin around every mean, in posterior standard deviations.
    #[arg(long, default_value_t = 4.0)]
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: Label,
    pub mode: String,
    pub seed: u64,
    pub samples: usize,
    pub max_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub duration: f64,
    pub dt: f64,
    pub n_joints: usize,
    pub trajectories: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Loads every listed trajectory with its manifest label.
    pub fn trajectories(&self, dir: &Path) -> Result<Vec<Trajectory>, CliError> {
        self.trajectories
            .iter()
            .map(|e| {
                let mut t = load_csv(&dir.join(&e.file))?;
                t.label = e.label;
                Ok(t)
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PlantError> for CliError {
    fn from(e: PlantError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            VaeError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MonitorError> for CliError {
    fn from(e: MonitorError) -> Self {
        match e {
            MonitorError::Vae(v) => v.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name), runs the command and maps
/// failures to exit codes, reporting them on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Score(a) => cmd_score(cli, a),
        Command::Difficulty(a) => cmd_difficulty(cli, a),
        Command::Generate(a) => cmd_generate(cli, a),
        Command::ExportLatent(a) => cmd_export_latent(cli, a),
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} does not exist", path.display())))
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "trajectory".into(), |s| s.to_string_lossy().into_owned())
}

fn load_model(path: &Path) -> Result<(VaeModel, String), CliError> {
    require_file(path)?;
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Data(format!("{} is not UTF-8", path.display())))?;
    let model = VaeModel::from_json(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((model, vae::fingerprint(text.as_bytes())))
}

fn load_trajectory(path: &Path, model: &VaeModel) -> Result<Trajectory, CliError> {
    require_file(path)?;
    let traj = load_csv(path)?;
    if traj.channels() != model.config.channels {
        return Err(CliError::Data(format!(
            "{} has {} channels but the model expects {}",
            path.display(),
            traj.channels(),
            model.config.channels
        )));
    }
    Ok(traj)
}

pub fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            require_file(path)?;
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            PlantConfig::from_json(&text)?
        }
        None => PlantConfig::with_joints(a.joints),
    };
    if a.cool + a.hot == 0 {
        return Err(CliError::Usage(
            "nothing to simulate: --cool and --hot are both 0".into(),
        ));
    }
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        return Err(CliError::Usage(format!(
            "--duration must be positive, got {}",
            a.duration
        )));
    }
    cfg.validate()?;
    create_out(&cli.out)?;

    let jobs = (0..a.cool)
        .map(|i| {
            (
                MotionMode::Cruise,
                "cool",
                i,
                derive_seed(cli.seed, 2 * i as u64),
            )
        })
        .chain((0..a.hot).map(|i| {
            (
                MotionMode::Hold,
                "hot",
                i,
                derive_seed(cli.seed, 2 * i as u64 + 1),
            )
        }));
    let mut entries = Vec::new();
    for (mode, prefix, i, seed) in jobs {
        cfg.seed = seed;
        let traj = simulate(&cfg, a.duration, mode)?;
        let file = format!("{prefix}-{i:03}.csv");
        traj.write_csv(&cli.out.join(&file))?;
        entries.push(ManifestEntry {
            file,
            label: traj.label,
            mode: mode.to_string(),
            seed,
            samples: traj.len(),
            max_temperature: traj.max_temperature(),
        });
    }
    let manifest = Manifest {
        seed: cli.seed,
        duration: a.duration,
        dt: cfg.dt,
        n_joints: cfg.n_joints,
        trajectories: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&cli.out.join(MANIFEST_FILE), json)?;

    let hot = manifest
        .trajectories
        .iter()
        .filter(|e| e.label == Label::Hot)
        .count();
    println!(
        "wrote {} trajectories ({} cool, {hot} hot) and {} to {}",
        manifest.trajectories.len(),
        manifest.trajectories.len() - hot,
        MANIFEST_FILE,
        cli.out.display()
    );
    Ok(())
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        optimizer: a.optimizer,
        seed: cli.seed,
        beta: a.beta,
        validation_fraction: a.validation_fraction,
    };
    train_cfg.validate()?;
    if a.window == 0 || a.stride == 0 {
        return Err(CliError::Usage(
            "--window and --stride must be positive".into(),
        ));
    }
    let dir = a.data.as_deref().unwrap_or(&cli.out);
    let manifest = Manifest::load(dir)?;
    let corpus = manifest.trajectories(dir)?;
    let cool: Vec<&Trajectory> = corpus.iter().filter(|t| t.label == Label::Cool).collect();
    if cool.is_empty() {
        return Err(CliError::Data(format!(
            "no cool trajectories listed in {}",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    let norm = Normalizer::fit(&cool)?;
    let windows: Vec<Window> = cool
        .iter()
        .map(|t| data::windows(t, &norm, a.window, a.stride))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let n_validation = vae::validation_size(windows.len(), a.validation_fraction)?;
    if n_validation < monitor::MIN_CALIBRATION_WINDOWS {
        return Err(CliError::Data(format!(
            "{} windows give {n_validation} validation windows; threshold calibration needs {}",
            windows.len(),
            monitor::MIN_CALIBRATION_WINDOWS
        )));
    }
    create_out(&cli.out)?;

    let mut config = VaeConfig::new(cool[0].channels(), a.window);
    config.beta = a.beta;
    config.reconstruction = a.reduction;
    let model = VaeModel::new(config, norm, cli.seed)?;
    println!(
        "training on {} windows from {} cool trajectories ({} parameters)",
        windows.len(),
        cool.len(),
        model.parameter_count()
    );
    let outcome = vae::train(model, &windows, &train_cfg)?;
    let mut model = outcome.model;

    let validation: Vec<Window> = outcome
        .validation_indices
        .iter()
        .map(|&i| windows[i].clone())
        .collect();
    let scores = monitor::score_windows(&model, &validation)?;
    let threshold = monitor::calibrate_threshold(&scores)?;
    model.threshold = Some(threshold);

    model.save(&cli.out.join(MODEL_FILE))?;
    let mut history = Vec::new();
    vae::write_history_csv(&outcome.history, &mut history)
        .map_err(|e| CliError::Data(format!("history: {e}")))?;
    write_file(&cli.out.join(HISTORY_FILE), history)?;

    let first = outcome.history.first().expect("epochs ≥ 1");
    let last = outcome.history.last().expect("epochs ≥ 1");
    println!(
        "loss: epoch 1 train {:.4} val {:.4}; epoch {} train {:.4} val {:.4}",
        first.train_loss, first.validation_loss, last.epoch, last.train_loss, last.validation_loss
    );
    println!(
        "threshold (99th percentile of {} validation windows): {threshold:.6}",
        validation.len()
    );
    let training: Vec<Window> = outcome
        .train_indices
        .iter()
        .map(|&i| windows[i].clone())
        .collect();
    print!(
        "{}",
        monitor::channel_errors(&model, &training)?.table(a.epochs)
    );
    println!(
        "wrote {} and {}",
        cli.out.join(MODEL_FILE).display(),
        cli.out.join(HISTORY_FILE).display()
    );
    Ok(())
}

pub fn cmd_score(cli: &Cli, a: &ScoreArgs) -> Result<(), CliError> {
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let (model, _) = load_model(&a.model)?;
    let threshold = match a.threshold.or(model.threshold) {
        Some(t) if t.is_finite() && t >= 0.0 => t,
        Some(t) => return Err(CliError::Usage(format!("invalid threshold {t}"))),
        None => {
            return Err(CliError::Usage(
                "model has no calibrated threshold; pass --threshold".into(),
            ))
        }
    };
    for input in &a.inputs {
        require_file(input)?;
    }
    create_out(&cli.out)?;
    for input in &a.inputs {
        let traj = load_trajectory(input, &model)?;
        let series = monitor::recon_error_series(
            &model,
            &traj,
            &model.normalizer,
            model.config.window_len,
            a.stride,
        )?;
        let verdicts = series.verdicts(threshold);
        let path = cli.out.join(format!("{}.verdicts.csv", file_stem(input)));
        let mut buf = Vec::new();
        monitor::write_verdicts_csv(&verdicts, &mut buf)?;
        write_file(&path, buf)?;
        let anomalous = verdicts.iter().filter(|v| v.is_anomalous).count();
        println!(
            "{}: {anomalous}/{} windows anomalous (rate {:.1}%), threshold {threshold:.6} -> {}",
            input.display(),
            verdicts.len(),
            100.0 * monitor::anomaly_rate(&verdicts),
            path.display()
        );
    }
    Ok(())
}

pub fn cmd_difficulty(cli: &Cli, a: &DifficultyArgs) -> Result<(), CliError> {
    if !(a.t_low < a.t_high) {
        return Err(CliError::Usage(format!(
            "horizon needs --t-low < --t-high, got [{}, {}]",
            a.t_low, a.t_high
        )));
    }
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let (model, fingerprint) = load_model(&a.model)?;
    let traj = load_trajectory(&a.input, &model)?;
    let mut report = monitor::difficulty(
        &model,
        &traj,
        &model.normalizer,
        [a.t_low, a.t_high],
        a.stride,
    )?;
    report.model_fingerprint = fingerprint;
    if let Some(id) = &a.robot_id {
        report.robot_id = id.clone();
    }
    create_out(&cli.out)?;
    let path = cli
        .out
        .join(format!("{}.difficulty.json", file_stem(&a.input)));
    monitor::emit_report(&report, &path)?;
    for (k, d) in report.per_joint.iter().enumerate() {
        println!("d_{} = {d:.6}", k + 1);
    }
    println!(
        "d = {:.6} over [{}, {}] s -> {}",
        report.total,
        a.t_low,
        a.t_high,
        path.display()
    );
    Ok(())
}

pub fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<(), CliError> {
    if a.count < 1 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let base = match &a.base_mu {
        None => None,
        Some(mu) => {
            let lv = a.base_log_var.clone().unwrap_or_else(|| vec![0.0, 0.0]);
            if mu.len() != 2 || lv.len() != 2 {
                return Err(CliError::Usage(
                    "--base-mu and --base-log-var take two comma-separated values".into(),
                ));
            }
            if mu.iter().chain(&lv).any(|v| !v.is_finite()) {
                return Err(CliError::Usage("base latent code must be finite".into()));
            }
            Some(LatentCode {
                mu: [mu[0], mu[1]],
                log_var: [lv[0], lv[1]],
            })
        }
    };
    let (model, _) = load_model(&a.model)?;
    let mut rng = seeded(a.eps_seed.unwrap_or(cli.seed));
    let windows = model.generate(base.as_ref(), a.count, &mut rng)?;
    create_out(&cli.out)?;
    let path = cli.out.join("generated.csv");
    let mut buf = Vec::new();
    data::write_windows_csv(&windows, &mut buf)?;
    write_file(&path, buf)?;
    println!(
        "wrote {} normalized windows to {}",
        windows.len(),
        path.display()
    );
    Ok(())
}

pub fn cmd_export_latent(cli: &Cli, a: &ExportLatentArgs) -> Result<(), CliError> {
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let (model, _) = load_model(&a.model)?;
    let dir = a.data.as_deref().unwrap_or(&cli.out);
    let manifest = Manifest::load(dir)?;
    let mut labeled = Vec::new();
    for traj in manifest.trajectories(dir)? {
        for w in data::windows(&traj, &model.normalizer, model.config.window_len, a.stride)? {
            labeled.push((w, traj.label));
        }
    }
    let export =
        monitor::export_latent(&model, &labeled, a.grid, a.margin).map_err(|e| match e {
            MonitorError::Invalid(m) => CliError::Usage(m),
            other => other.into(),
        })?;
    create_out(&cli.out)?;
    let csv_path = cli.out.join("latent.csv");
    let mut buf = Vec::new();
    monitor::write_latent_csv(&export.rows, &mut buf)?;
    write_file(&csv_path, buf)?;
    print!(
        "wrote {} latent rows to {}",
        export.rows.len(),
        csv_path.display()
    );
    if let Some(grid) = &export.grid {
        let grid_path = cli.out.join("latent_grid.json");
        write_file(&grid_path, grid.to_json())?;
        print!(
            " and a {0}×{0} density grid to {1}",
            grid.size,
            grid_path.display()
        );
    }
    println!();
    Ok(())
}
