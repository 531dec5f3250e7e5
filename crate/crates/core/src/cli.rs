//! Command-line front end. `main` only sets up threads and calls [`run`].

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{export_errors, parse_skel, split_windows, synthesize, write_skel, DatasetSplit, MotionSequence, SynthConfig, Windows};
use crate::error::{Error, Result};
use crate::graph::{export_blocks, Adjacency4D};
use crate::model::{Model, ModelConfig};
use crate::selftest::{gradient_audit_for, run_suite, toy_config, SanitySetup};
use crate::tensor::Tensor;
use crate::training::{evaluate_horizons, fit, future_mpjpe, Checkpoint, TrainConfig, ZeroVelocity};

/// Where training and evaluation windows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub stride: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Generator settings used when no `--data` files are given.
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SanitySetup::default();
        Self {
            stride: s.stride,
            val_fraction: 0.0,
            test_fraction: s.test_fraction,
            synth: s.synth,
        }
    }
}

/// The `--config` document. Missing sections take the built-in defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    /// The small synthetic chain setup.
    fn default() -> Self {
        let s = SanitySetup::default();
        Self {
            model: s.model,
            train: s.train,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "ddgcn", version, about = "Skeleton motion prediction with dynamic dense graph convolutions")]
pub struct Cli {
    /// Print per-epoch progress and extra detail.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write checkpoints and the loss history.
    Train(TrainArgs),
    /// Predict the future of a SKEL1 sequence.
    Predict(PredictArgs),
    /// Per-horizon error table for a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference audit of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Run the built-in verification suite.
    Selftest(SelftestArgs),
    /// Write a block of a layer's adjacency as CSV.
    ExportAdjacency(ExportArgs),
    /// Write a synthetic dataset as SKEL1 files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// SKEL1 files; without them the configured synthetic data is used.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SKEL1 input; its last `t_history` frames are observed.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Horizons in milliseconds; defaults to every predicted frame.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Vec<f64>,
    /// Frame rate; defaults to the data's.
    #[arg(long)]
    pub fps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Audits the configured model instead of the built-in toy network.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Also run the end-to-end training check (minutes).
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained weights; without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Layer whose adjacency is exported, e.g. `enc.0` or `block.1.slmp.0`.
    #[arg(long, default_value = "block.0.slmp.0")]
    pub layer: String,
    /// Target frames as `a..b`.
    #[arg(long, value_parser = parse_range)]
    pub frames: Option<Range<usize>>,
    /// Source frames as `a..b`; defaults to the target frames.
    #[arg(long, value_parser = parse_range)]
    pub source_frames: Option<Range<usize>>,
    #[arg(long, value_parser = parse_range)]
    pub joints: Option<Range<usize>>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

fn parse_range(s: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad range end in `{s}`"))?;
    if a >= b {
        return Err(format!("empty range `{s}`"));
    }
    Ok(a..b)
}

/// A failure that is not a library error, e.g. a failed check.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    Check { kind: &'static str, msg: String },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl Failure {
    /// `error: kind=<kind> msg=<message>` on one line.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Lib(e) => (e.kind(), e.to_string()),
            Failure::Check { kind, msg } => (*kind, msg.clone()),
        };
        format!("error: kind={kind} msg={}", msg.replace('\n', " "))
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Caps the global worker pool at `DDGCN_THREADS` when set.
pub fn init_threads_from_env() -> Result<()> {
    let Ok(raw) = std::env::var("DDGCN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DDGCN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on failure, 2 on bad usage.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "{}", f.line());
            1
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Train(a) => train(a, cli.verbose, out),
        Command::Predict(a) => predict(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Selftest(a) => selftest(a, out),
        Command::ExportAdjacency(a) => export_adjacency(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref())?;
    Ok(())
}

fn require_exists<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} does not exist", p.display()),
            )));
        }
    }
    Ok(())
}

fn out_dir(p: &Path) -> Result<&Path> {
    std::fs::create_dir_all(p)?;
    Ok(p)
}

fn load_sequences(paths: &[PathBuf]) -> Result<Vec<MotionSequence>> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            parse_skel(&text).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", p.display()),
                },
                other => other,
            })
        })
        .collect()
}

fn check_sequence_fits(cfg: &ModelConfig, seq: &MotionSequence) -> Result<()> {
    if seq.joints() != cfg.joints {
        return Err(Error::Dimension(format!(
            "joints: model expects M={}, data has M={}",
            cfg.joints,
            seq.joints()
        )));
    }
    if seq.dims() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "coordinates: model expects D={}, data has D={}",
            cfg.input_dim,
            seq.dims()
        )));
    }
    Ok(())
}

/// File sequences when given, otherwise the configured synthetic set.
fn sequences(cfg: &RunConfig, data: &[PathBuf]) -> Result<Vec<MotionSequence>> {
    let seqs = if data.is_empty() {
        synthesize(&cfg.model.topology()?, &cfg.data.synth)?
    } else {
        load_sequences(data)?
    };
    for s in &seqs {
        check_sequence_fits(&cfg.model, s)?;
    }
    Ok(seqs)
}

fn train(a: &TrainArgs, verbose: bool, out: &mut dyn Write) -> CliResult {
    require_exists(a.common.config.iter().chain(&a.data))?;
    let cfg = RunConfig::resolve(a.common.config.as_deref(), a.common.seed)?;
    let dir = out_dir(&a.common.out)?;
    let seqs = sequences(&cfg, &a.data)?;
    let m = &cfg.model;
    let split = DatasetSplit::from_sequences(
        &seqs,
        m.t_history,
        m.t_future,
        cfg.data.stride,
        cfg.data.val_fraction,
        cfg.data.test_fraction,
    )?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("config.json"), resolved + "\n")?;

    let mut model = Model::init(m)?;
    let report = fit(&mut model, &cfg.train, &split.train, split.val.as_ref(), Some(dir))?;
    if verbose {
        for r in &report.history {
            say(out, format!("epoch {} lr {:e} train {:.6}", r.epoch, r.lr, r.train_loss))?;
        }
    }
    let last = report.history.last().map_or(f64::NAN, |r| r.train_loss);
    say(
        out,
        format!(
            "trained {} epochs on {} windows; final train loss {last:.6}; best epoch {}",
            report.history.len(),
            split.train.len(),
            report.best_epoch
        ),
    )?;
    if let Some(test) = &split.test {
        let zv = future_mpjpe(&ZeroVelocity { t_future: m.t_future }, test)?;
        let err = future_mpjpe(&model, test)?;
        say(out, format!("held-out future error {err:.4} (zero-velocity {zv:.4}) over {} windows", test.len()))?;
    }
    Ok(())
}

fn predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult {
    require_exists([&a.checkpoint, &a.data])?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.model.config().clone();
    let seq = load_sequences(std::slice::from_ref(&a.data))?.remove(0);
    check_sequence_fits(&cfg, &seq)?;
    let th = cfg.t_history;
    if seq.len() < th {
        return Err(Error::Dimension(format!(
            "frames: model observes T_h={th}, input has {} frames",
            seq.len()
        ))
        .into());
    }
    let frame = seq.joints() * seq.dims();
    let observed = &seq.frames.data()[(seq.len() - th) * frame..];
    let x = Tensor::new(&[1, th, seq.joints(), seq.dims()], observed.to_vec())?;
    let y = ck.model.predict(&x)?;
    let frames = y.reshape(&[cfg.frames(), seq.joints(), seq.dims()])?;
    let result = MotionSequence::new(seq.fps, frames, seq.bones.clone())?;

    let dir = out_dir(&a.out)?;
    std::fs::write(dir.join("prediction.skel"), write_skel(&result))?;
    let sidecar = serde_json::json!({
        "t_history": th,
        "t_future": cfg.t_future,
        "frames": cfg.frames(),
        "source": a.data.display().to_string(),
    });
    std::fs::write(dir.join("prediction.json"), format!("{sidecar:#}\n"))?;
    say(out, format!("wrote {} frames ({} observed) to {}", cfg.frames(), th, dir.join("prediction.skel").display()))?;
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    require_exists(a.common.config.iter().chain([&a.checkpoint]).chain(&a.data))?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = RunConfig::resolve(a.common.config.as_deref(), a.common.seed)?;
    cfg.model = ck.model.config().clone();
    let m = &cfg.model;
    let (windows, fps) = if a.data.is_empty() {
        let seqs = sequences(&cfg, &[])?;
        let split = DatasetSplit::from_sequences(
            &seqs,
            m.t_history,
            m.t_future,
            cfg.data.stride,
            cfg.data.val_fraction,
            cfg.data.test_fraction,
        )?;
        let w = split.test.or(split.val).unwrap_or(split.train);
        (w, cfg.data.synth.fps)
    } else {
        let seqs = sequences(&cfg, &a.data)?;
        let mut pairs = Vec::new();
        for s in &seqs {
            pairs.extend(split_windows(s, m.t_history, m.t_future, cfg.data.stride)?);
        }
        (Windows::from_pairs(&pairs)?, seqs[0].fps)
    };
    let fps = a.fps.unwrap_or(fps);
    let horizons: Vec<f64> = if a.horizons.is_empty() {
        (1..=m.t_future).map(|k| k as f64 * 1000.0 / fps).collect()
    } else {
        a.horizons.clone()
    };
    let table = evaluate_horizons(&ck.model, &windows, &horizons, fps)?;
    let baseline = evaluate_horizons(&ZeroVelocity { t_future: m.t_future }, &windows, &horizons, fps)?;

    let dir = out_dir(&a.common.out)?;
    std::fs::write(dir.join("horizons.csv"), table.to_csv())?;
    std::fs::write(dir.join("errors.csv"), export_errors(&table.error_rows()))?;
    std::fs::write(dir.join("zero_velocity.csv"), baseline.to_csv())?;
    for (r, b) in table.rows.iter().zip(&baseline.rows) {
        say(out, format!("{:>7.1} ms  model {:.4}  zero-velocity {:.4}", r.horizon_ms, r.mpjpe, b.mpjpe))?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    require_exists(a.config.iter())?;
    let mut model = match &a.config {
        Some(_) => RunConfig::resolve(a.config.as_deref(), None)?.model,
        None => toy_config(),
    };
    if let Some(s) = a.seed {
        model.seed = s;
    }
    let report = gradient_audit_for(&model, a.eps, a.seed.unwrap_or(21))?;
    let dir = out_dir(&a.out)?;
    std::fs::write(dir.join("gradcheck.csv"), report.to_csv())?;
    let worst = report.worst_group().map_or("-".to_string(), |g| g.name.clone());
    say(
        out,
        format!(
            "{} elements in {} groups; max relative error {:.3e} ({worst})",
            report.elements,
            report.groups.len(),
            report.max_rel_error
        ),
    )?;
    if !(report.max_rel_error < a.tolerance) {
        return Err(Failure::Check {
            kind: "gradcheck",
            msg: format!("{worst}: relative error {:.3e} >= {:e}", report.max_rel_error, a.tolerance),
        });
    }
    Ok(())
}

fn selftest(a: &SelftestArgs, out: &mut dyn Write) -> CliResult {
    let results = run_suite(a.full);
    for r in &results {
        say(out, r.line())?;
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure::Check {
            kind: "selftest",
            msg: format!("{}: {}", r.name, r.detail),
        }),
        None => Ok(()),
    }
}

fn export_adjacency(a: &ExportArgs, out: &mut dyn Write) -> CliResult {
    require_exists(a.common.config.iter().chain(&a.checkpoint))?;
    let model = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.model,
        None => Model::init(&RunConfig::resolve(a.common.config.as_deref(), a.common.seed)?.model)?,
    };
    let w = model.params.get(&format!("{}.adj", a.layer)).map_err(|_| {
        Error::Config(format!("no adjacency for layer `{}`", a.layer))
    })?;
    let (t, m) = match w.shape() {
        &[t, m, _, _] => (t, m),
        other => return Err(Error::Dimension(format!("layer `{}` has adjacency {other:?}", a.layer)).into()),
    };
    let support = vec![true; w.len()];
    let adj = Adjacency4D::from_parts(w.clone(), support)?;
    let rows = a.frames.clone().unwrap_or(0..t);
    let cols = a.source_frames.clone().unwrap_or_else(|| rows.clone());
    let grid = export_blocks(&adj, rows, cols, a.joints.clone().unwrap_or(0..m))?;
    let dir = out_dir(&a.common.out)?;
    std::fs::write(dir.join("adjacency.csv"), grid.to_csv())?;
    say(out, format!("wrote {}x{} block of {}.adj", grid.rows, grid.cols, a.layer))?;
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    require_exists(a.common.config.iter())?;
    let mut cfg = RunConfig::resolve(a.common.config.as_deref(), None)?;
    if let Some(s) = a.common.seed {
        cfg.data.synth.seed = s;
    }
    let seqs = synthesize(&cfg.model.topology()?, &cfg.data.synth)?;
    let dir = out_dir(&a.common.out)?;
    let width = seqs.len().to_string().len().max(3);
    for (i, s) in seqs.iter().enumerate() {
        std::fs::write(dir.join(format!("seq_{i:0width$}.skel")), write_skel(s))?;
    }
    say(out, format!("wrote {} sequences to {}", seqs.len(), dir.display()))?;
    Ok(())
}
