//! The `fsqs` command line: dataset generation, training, evaluation,
//! ablation and replay of earlier runs.
//!
//! Every command writes into its own output directory together with a
//! `run.json` manifest holding the argument vector it was started with, so
//! `fsqs replay` can rerun it into a fresh directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::{load_checkpoint, save_checkpoint, BackboneConfig, BackboneParams, BnMode};
use crate::data::{
    generate_synthetic, make_split, EpisodeConfig, EpisodeSampler, GridDataset, ShiftGenerator, SplitFractions,
    SplitPart, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    eval_seed, evaluate, reports_to_csv, run_ablation, AblationGrid, AblationSettings, CellOutcome, EvalReport,
    Setting,
};
use crate::learners::{Head, LearnerSpec, OtUsage};
use crate::ot::SinkhornConfig;
use crate::training::{train, Regime, TrainConfig};

/// Name of the run manifest in every output directory.
pub const RUN_MANIFEST: &str = "run.json";
pub const RUN_FORMAT: &str = "fsqs-run";
/// Default root for `--out` when it is not given.
pub const OUTPUT_ROOT_ENV: &str = "FSQS_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fsqs", version, about = "Few-shot learning under support/query shift")]
pub struct Cli {
    /// Worker threads for episode evaluation (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic class x domain dataset and its split.
    GenData(GenDataArgs),
    /// Train a backbone, episodically or by ERM.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test episodes.
    Eval(EvalArgs),
    /// Train and evaluate the whole ablation grid.
    Ablate(AblateArgs),
    /// Rerun a recorded command into a new directory.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory [default: $FSQS_OUTPUT_ROOT/<command>, else runs/<command>].
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the class/domain split [default: --seed].
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub domains: usize,
    #[arg(long, default_value_t = 64)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub class_spread: f64,
    #[arg(long, default_value_t = 4.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 8.0)]
    pub min_center_distance: f64,
    /// Norm of each domain translation.
    #[arg(long, default_value_t = 10.0)]
    pub translation: f64,
    #[arg(long, default_value_t = 0.0)]
    pub scaling: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rotation: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Train,val,test fractions of the classes.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.25, 0.25])]
    pub class_fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.25, 0.25])]
    pub domain_fractions: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LearnerArg {
    Protonet,
    Matchingnet,
    /// Transported prototypes: ProtoNet with OT at train and test time.
    Tp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OtArg {
    Never,
    Test,
    Train,
}

impl From<OtArg> for OtUsage {
    fn from(v: OtArg) -> Self {
        match v {
            OtArg::Never => OtUsage::Never,
            OtArg::Test => OtUsage::TestOnly,
            OtArg::Train => OtUsage::TrainAndTest,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BnArg {
    Cbn,
    Tbn,
}

impl From<BnArg> for BnMode {
    fn from(v: BnArg) -> Self {
        match v {
            BnArg::Cbn => BnMode::Conventional,
            BnArg::Tbn => BnMode::Transductive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Episodic,
    Erm,
}

impl From<RegimeArg> for Regime {
    fn from(v: RegimeArg) -> Self {
        match v {
            RegimeArg::Episodic => Regime::Episodic,
            RegimeArg::Erm => Regime::Erm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Protonet,
    Matchingnet,
}

impl From<HeadArg> for Head {
    fn from(v: HeadArg) -> Self {
        match v {
            HeadArg::Protonet => Head::ProtoNet,
            HeadArg::Matchingnet => Head::MatchingNet,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Split file [default: <data>/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    /// Query items per class.
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    /// Draw support and query from the same domain.
    #[arg(long)]
    pub no_shift: bool,
}

impl EpisodeArgs {
    fn config(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.queries,
            shifted: !self.no_shift,
        }
    }
}

#[derive(Debug, Args)]
pub struct LearnerArgs {
    #[arg(long, value_enum, default_value_t = LearnerArg::Protonet)]
    pub learner: LearnerArg,
    /// When to transport the support onto the query [default: train for tp, else never].
    #[arg(long, value_enum)]
    pub ot: Option<OtArg>,
    #[arg(long, value_enum, default_value_t = BnArg::Cbn)]
    pub bn: BnArg,
    /// Entropic regularization of the transport.
    #[arg(long, default_value_t = SinkhornConfig::default().epsilon)]
    pub epsilon: f64,
}

impl LearnerArgs {
    fn spec(&self) -> std::result::Result<LearnerSpec, String> {
        let (head, default_ot) = match self.learner {
            LearnerArg::Protonet => (Head::ProtoNet, OtUsage::Never),
            LearnerArg::Matchingnet => (Head::MatchingNet, OtUsage::Never),
            LearnerArg::Tp => (Head::ProtoNet, OtUsage::TrainAndTest),
        };
        let ot = self.ot.map_or(default_ot, OtUsage::from);
        if self.learner == LearnerArg::Tp && ot != OtUsage::TrainAndTest {
            return Err(format!(
                "--learner tp always transports at train time; use --learner protonet --ot {}",
                ot.flag()
            ));
        }
        let mut spec = LearnerSpec::new(head, ot);
        spec.transport.sinkhorn.epsilon = self.epsilon;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    /// Episodes (episodic) or minibatches (ERM).
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Validate every this many steps (0: never).
    #[arg(long, default_value_t = TrainConfig::default().val_every)]
    pub val_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().val_episodes)]
    pub val_episodes: usize,
    /// ERM minibatch size.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Hidden and output widths of the backbone.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64, 16])]
    pub layers: Vec<usize>,
}

impl TrainingArgs {
    fn backbone(&self, d_in: usize) -> BackboneConfig {
        let mut cfg = BackboneConfig::mlp(d_in);
        cfg.layer_sizes = std::iter::once(d_in).chain(self.layers.iter().copied()).collect();
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = RegimeArg::Episodic)]
    pub regime: RegimeArg,
    #[command(flatten)]
    pub learner: LearnerArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint file, or a train output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Regime the checkpoint was trained with (report label only).
    #[arg(long, value_enum, default_value_t = RegimeArg::Episodic)]
    pub regime: RegimeArg,
    #[command(flatten)]
    pub learner: LearnerArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Episodes per seed.
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    pub part: SplitPart,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [HeadArg::Protonet, HeadArg::Matchingnet])]
    pub heads: Vec<HeadArg>,
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    #[arg(long, default_value_t = SinkhornConfig::default().epsilon)]
    pub epsilon: f64,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Test episodes per seed and cell.
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    /// Training and evaluation seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    pub part: SplitPart,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A run.json, or the directory holding it.
    pub manifest: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Written as `run.json` next to a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
    pub version: String,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(RUN_MANIFEST) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != RUN_FORMAT {
            return Err(Error::Config(format!("{} is not a run manifest", path.display())));
        }
        Ok(m)
    }
}

enum Failure {
    Usage(clap::Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(kind: ErrorKind, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(Cli::command().error(kind, msg))
}

/// Run with the process arguments and return the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(std::env::args_os())
}

/// Parse `args` (program name first), run, and return the exit code: 0 on
/// success, 2 for usage errors, 1 for everything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = match Cli::try_parse_from(&args) {
        Ok(cli) => {
            let argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
            dispatch(cli, argv)
        }
        Err(e) => Err(Failure::Usage(e)),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                // --help and --version
                0
            }
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> std::result::Result<(), Failure> {
    if let Command::Replay(args) = &cli.command {
        return replay(args, cli.jobs);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let name = cli.command.name();
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(a, name, argv),
        Command::Train(a) => train_cmd(a, name, argv),
        Command::Eval(a) => eval_cmd(a, name, argv),
        Command::Ablate(a) => ablate_cmd(a, name, argv),
        Command::Replay(_) => unreachable!(),
    })
}

fn output_dir(args: &OutputArgs, command: &str) -> Result<PathBuf> {
    let dir = match &args.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
            .join(command),
    };
    if dir.exists() {
        let non_empty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::OutputExists(dir));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(name.to_string())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(name.to_string())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    mut artifacts: Vec<String>,
) -> Result<()> {
    artifacts.sort();
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        command: command.into(),
        argv,
        cwd: std::env::current_dir().map_err(|e| Error::io(".", e))?,
        config,
        seeds,
        artifacts,
        version: env!("CARGO_PKG_VERSION").into(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_json(dir, RUN_MANIFEST, &manifest)?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn load_data(args: &DataArgs) -> Result<(GridDataset, SplitSpec)> {
    let dataset = GridDataset::load(&args.data)?;
    let split_path = args.split.clone().unwrap_or_else(|| args.data.join("split.json"));
    let split = SplitSpec::load(&split_path)?;
    split.validate(dataset.class_count(), dataset.domain_count()).map_err(|e| {
        Error::Config(format!(
            "split {} does not fit dataset {}: {e}",
            split_path.display(),
            args.data.display()
        ))
    })?;
    Ok((dataset, split))
}

fn fractions(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn gen_data(a: &GenDataArgs, command: &str, argv: Vec<String>) -> std::result::Result<(), Failure> {
    let generator = ShiftGenerator {
        d_in: a.dim,
        class_count: a.classes,
        domain_count: a.domains,
        class_spread: a.class_spread,
        center_scale: a.center_scale,
        min_center_distance: a.min_center_distance,
        translation: a.translation,
        scaling: a.scaling,
        rotation: a.rotation,
        noise: a.noise,
    };
    let split_fractions = SplitFractions {
        classes: fractions(&a.class_fractions),
        domains: fractions(&a.domain_fractions),
    };
    // validate everything before touching the output directory
    let dataset = generate_synthetic(&generator, a.items, a.seed)?;
    let split_seed = a.split_seed.unwrap_or(a.seed);
    let split = make_split(a.classes, a.domains, split_fractions, split_seed)?;
    let dir = output_dir(&a.output, command)?;
    dataset.save(&dir)?;
    let mut artifacts: Vec<String> = ["manifest.json", "features.bin", "index.json"].map(String::from).to_vec();
    split.save(&dir.join("split.json"))?;
    artifacts.push("split.json".into());
    let config = serde_json::json!({
        "generator": generator,
        "items_per_cell": a.items,
        "seed": a.seed,
        "split_seed": split_seed,
        "fractions": split_fractions,
    });
    write_manifest(&dir, command, argv, config, vec![a.seed, split_seed], artifacts)?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, command: &str, argv: Vec<String>) -> std::result::Result<(), Failure> {
    let learner = a.learner.spec().map_err(|m| usage(ErrorKind::ArgumentConflict, m))?;
    let config = TrainConfig {
        regime: a.regime.into(),
        steps: a.training.steps,
        lr: a.training.lr,
        episode: a.episode.config(),
        learner,
        bn: a.learner.bn.into(),
        val_every: a.training.val_every,
        val_episodes: a.training.val_episodes,
        batch_size: a.training.batch_size,
        seed: a.seed,
    };
    config.validate()?;
    let (dataset, split) = load_data(&a.data)?;
    // surface sampling problems before training starts
    EpisodeSampler::new(&dataset, &split, SplitPart::Train, config.episode)?;
    if config.val_every > 0 {
        EpisodeSampler::new(&dataset, &split, SplitPart::Val, config.episode)?;
    }
    let backbone_config = a.training.backbone(dataset.d_in());
    let init = BackboneParams::init(&backbone_config, a.seed)?;
    let dir = output_dir(&a.output, command)?;
    let (params, log) = train(&dataset, &split, init, &config)?;
    save_checkpoint(&params, &dir.join("checkpoint.json"))?;
    log.write_jsonl(&dir.join("train_log.jsonl"))?;
    if let Some((step, acc)) = log.best() {
        log::info!("best validation accuracy {acc:.4} at step {step}");
    }
    let resolved = serde_json::json!({
        "data": a.data.data,
        "train": config,
        "backbone": backbone_config,
    });
    let artifacts = vec!["checkpoint.json".into(), "train_log.jsonl".into()];
    write_manifest(&dir, command, argv, resolved, vec![a.seed], artifacts)?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, command: &str, argv: Vec<String>) -> std::result::Result<(), Failure> {
    let learner = a.learner.spec().map_err(|m| usage(ErrorKind::ArgumentConflict, m))?;
    if a.seeds.is_empty() || a.episodes == 0 {
        return Err(usage(ErrorKind::InvalidValue, "need at least one seed and one episode"));
    }
    let episode = a.episode.config();
    episode.validate()?;
    learner.transport.sinkhorn.validate()?;
    let (dataset, split) = load_data(&a.data)?;
    let ckpt_path = if a.checkpoint.is_dir() {
        a.checkpoint.join("checkpoint.json")
    } else {
        a.checkpoint.clone()
    };
    let params = load_checkpoint(&ckpt_path)?;
    if params.input_dim() != dataset.d_in() {
        return Err(Error::Dimension {
            what: "checkpoint input width vs dataset feature dimension",
            expected: dataset.d_in(),
            got: params.input_dim(),
        }
        .into());
    }
    let sampler = EpisodeSampler::new(&dataset, &split, a.part, episode)?;
    let bn: BnMode = a.learner.bn.into();
    let dir = output_dir(&a.output, command)?;
    let mut per_seed = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        per_seed.push(evaluate(&params, &learner, bn, &sampler, a.episodes, eval_seed(seed))?);
    }
    let setting = Setting {
        head: learner.head,
        regime: a.regime.into(),
        bn,
        ot: learner.ot,
        shifted: episode.shifted,
    };
    let report = EvalReport::new(setting, &episode, a.seeds.clone(), per_seed)?;
    log::info!("{}: accuracy {:.4} +- {:.4}", setting.label(), report.accuracy, report.ci95);
    let csv = reports_to_csv(&[CellOutcome {
        setting,
        report: Some(report.clone()),
        error: None,
    }]);
    let artifacts = vec![write_json(&dir, "report.json", &report)?, write_text(&dir, "report.csv", &csv)?];
    let resolved = serde_json::json!({
        "data": a.data.data,
        "checkpoint": ckpt_path,
        "learner": learner,
        "bn": bn,
        "episode": episode,
        "episodes": a.episodes,
        "part": a.part,
    });
    write_manifest(&dir, command, argv, resolved, a.seeds.clone(), artifacts)?;
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, command: &str, argv: Vec<String>) -> std::result::Result<(), Failure> {
    if a.seeds.is_empty() || a.episodes == 0 || a.heads.is_empty() {
        return Err(usage(ErrorKind::InvalidValue, "need at least one head, seed and episode"));
    }
    let (dataset, split) = load_data(&a.data)?;
    let episode = EpisodeConfig {
        n_way: a.n_way,
        k_shot: a.k_shot,
        q_per_class: a.queries,
        shifted: true,
    };
    let mut learner = LearnerSpec::protonet();
    learner.transport.sinkhorn.epsilon = a.epsilon;
    let settings = AblationSettings {
        backbone: a.training.backbone(dataset.d_in()),
        train: TrainConfig {
            steps: a.training.steps,
            lr: a.training.lr,
            episode,
            learner,
            val_every: a.training.val_every,
            val_episodes: a.training.val_episodes,
            batch_size: a.training.batch_size,
            ..TrainConfig::default()
        },
        episode,
        eval_episodes: a.episodes,
        seeds: a.seeds.clone(),
        part: a.part,
    };
    settings.train.validate()?;
    EpisodeSampler::new(&dataset, &split, SplitPart::Train, episode)?;
    EpisodeSampler::new(&dataset, &split, a.part, episode)?;
    let heads: Vec<Head> = a.heads.iter().map(|&h| h.into()).collect();
    let grid = AblationGrid::full(&heads);
    let dir = output_dir(&a.output, command)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let outcome = run_ablation(&grid, &settings, &dataset, &split, Some(&ckpt_dir))?;
    let failed = outcome.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed", outcome.cells.len());
    }
    let mut artifacts = vec![
        write_json(&dir, "reports.json", &outcome.cells)?,
        write_text(&dir, "ablation.csv", &reports_to_csv(&outcome.cells))?,
    ];
    for p in &outcome.checkpoints {
        if let Ok(rel) = p.strip_prefix(&dir) {
            artifacts.push(rel.to_string_lossy().into_owned());
        }
    }
    let resolved = serde_json::json!({
        "data": a.data.data,
        "settings": settings,
        "grid": grid,
    });
    write_manifest(&dir, command, argv, resolved, a.seeds.clone(), artifacts)?;
    Ok(())
}

/// Recorded arguments with `--out` and `--force` removed.
fn strip_output_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut iter = argv.iter();
    while let Some(a) = iter.next() {
        match a.as_str() {
            "--out" | "-o" => {
                iter.next();
            }
            "--force" => {}
            s if s.starts_with("--out=") || (s.starts_with("-o") && s.len() > 2) => {}
            _ => out.push(a.clone()),
        }
    }
    out
}

fn replay(a: &ReplayArgs, jobs: usize) -> std::result::Result<(), Failure> {
    let manifest = RunManifest::load(&a.manifest)?;
    let out = match &a.output.out {
        Some(p) => p.clone(),
        None => return Err(usage(ErrorKind::MissingRequiredArgument, "replay needs --out")),
    };
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let out = cwd.join(out);
    let mut args = vec!["fsqs".to_string()];
    args.extend(strip_output_args(&manifest.argv));
    if !args.iter().any(|s| s == "--jobs" || s.starts_with("--jobs=")) {
        args.push(format!("--jobs={jobs}"));
    }
    args.push("--out".into());
    args.push(out.to_string_lossy().into_owned());
    if a.output.force {
        args.push("--force".into());
    }
    let cli = Cli::try_parse_from(&args).map_err(Failure::Usage)?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Config("a replay manifest cannot itself be replayed".into()).into());
    }
    // relative paths in the recorded arguments refer to the original directory
    std::env::set_current_dir(&manifest.cwd).map_err(|e| Error::io(&manifest.cwd, e))?;
    log::info!("replaying `{}` from {}", manifest.command, manifest.cwd.display());
    dispatch(cli, args.into_iter().skip(1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("fsqs").chain(args.iter().copied()))
    }

    #[test]
    fn learner_flags_map_onto_specs() {
        let Command::Train(t) = parse(&["train", "--data", "d", "--learner", "tp", "--bn", "tbn"]).unwrap().command else {
            panic!()
        };
        assert_eq!(t.learner.spec().unwrap(), LearnerSpec::transported_prototypes());
        assert_eq!(BnMode::from(t.learner.bn), BnMode::Transductive);
        let Command::Train(t) = parse(&["train", "--data", "d", "--learner", "tp", "--ot", "test"]).unwrap().command else {
            panic!()
        };
        assert!(t.learner.spec().is_err());
        let Command::Eval(e) = parse(&["eval", "--data", "d", "--checkpoint", "c", "--ot", "test", "--no-shift", "--seeds", "4,5"]).unwrap().command else {
            panic!()
        };
        assert_eq!(e.learner.spec().unwrap().ot, OtUsage::TestOnly);
        assert!(!e.episode.config().shifted);
        assert_eq!(e.seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        assert_eq!(parse(&["train", "--data", "d", "--bogus"]).unwrap_err().kind(), ErrorKind::UnknownArgument);
        assert_eq!(parse(&["eval", "--data", "d", "--checkpoint", "c", "--bn", "xbn"]).unwrap_err().kind(), ErrorKind::InvalidValue);
        assert_eq!(run(["fsqs", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn output_flags_are_stripped_for_replay() {
        let argv: Vec<String> = ["eval", "--out", "a", "--force", "--data=x", "--out=b", "-oc", "-o", "d", "--seeds", "1"]
            .map(String::from)
            .to_vec();
        assert_eq!(strip_output_args(&argv), ["eval", "--data=x", "--seeds", "1"]);
    }

    #[test]
    fn output_root_comes_from_the_environment() {
        let root = tempfile::tempdir().unwrap();
        // only this test touches the variable
        std::env::set_var(OUTPUT_ROOT_ENV, root.path());
        let args = OutputArgs { out: None, force: false };
        let dir = output_dir(&args, "eval").unwrap();
        assert_eq!(dir, root.path().join("eval"));
        fs::write(dir.join("x"), "1").unwrap();
        assert!(matches!(output_dir(&args, "eval"), Err(Error::OutputExists(_))));
        assert!(output_dir(&OutputArgs { out: None, force: true }, "eval").is_ok());
        std::env::remove_var(OUTPUT_ROOT_ENV);
    }
}
