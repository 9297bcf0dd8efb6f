//! Accuracy over sampled episodes, confidence intervals and the ablation grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{save_checkpoint, BackboneConfig, BackboneParams, BnMode};
use crate::data::{Episode, EpisodeConfig, EpisodeSampler, GridDataset, SplitPart, SplitSpec};
use crate::error::{Error, Result};
use crate::learners::{Head, LabeledEmbeddings, LearnerSpec, OtUsage, QueryPosterior};
use crate::training::{train, Regime, TrainConfig};

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.96;

/// Embed support and query. Transductive mode normalizes them as one batch;
/// conventional mode embeds each with running statistics.
pub fn embed_episode(params: &BackboneParams, episode: &Episode, bn: BnMode) -> Result<(Array2<f64>, Array2<f64>)> {
    match bn {
        BnMode::Transductive => {
            let z = params.embed(episode.joint_features().view(), bn)?;
            let ns = episode.support_features.nrows();
            Ok((z.slice(s![..ns, ..]).to_owned(), z.slice(s![ns.., ..]).to_owned()))
        }
        BnMode::Conventional => Ok((
            params.embed(episode.support_features.view(), bn)?,
            params.embed(episode.query_features.view(), bn)?,
        )),
    }
}

/// Per-episode accuracy of an arbitrary posterior function, episodes
/// `0..n_episodes` of `sampler` under `seed`. Episodes run in parallel on the
/// current rayon pool; results keep episode order.
pub fn evaluate_with<F>(sampler: &EpisodeSampler<'_>, n_episodes: usize, seed: u64, posterior: F) -> Result<Vec<f64>>
where
    F: Fn(&Episode) -> Result<QueryPosterior> + Sync,
{
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = sampler.sample(seed, i)?;
            posterior(&ep)?.accuracy(&ep.query_labels)
        })
        .collect()
}

/// Per-episode accuracy of a backbone plus the evaluation-time head of `learner`.
pub fn evaluate(
    params: &BackboneParams,
    learner: &LearnerSpec,
    bn: BnMode,
    sampler: &EpisodeSampler<'_>,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let classifier = learner.for_evaluation();
    evaluate_with(sampler, n_episodes, seed, |ep| {
        let (zs, zq) = embed_episode(params, ep, bn)?;
        let support = LabeledEmbeddings::new(zs, ep.support_labels.clone(), ep.n_way())?;
        Ok(classifier.posterior(&support, zq.view())?.0)
    })
}

/// Mean and 95% half-width `1.96 s / sqrt(n)`, `s` the sample standard
/// deviation. A single value has half-width 0.
pub fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * var.sqrt() / n.sqrt())
}

/// One experimental condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Setting {
    pub head: Head,
    pub regime: Regime,
    pub bn: BnMode,
    pub ot: OtUsage,
    pub shifted: bool,
}

impl Setting {
    pub fn learner(&self) -> LearnerSpec {
        LearnerSpec::new(self.head, self.ot)
    }

    /// Short row label, e.g. `protonet/episodic/tbn/ot/shifted`.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}",
            self.head.name(),
            self.regime,
            self.bn.short_name(),
            self.ot.label(),
            if self.shifted { "shifted" } else { "unshifted" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub setting: Setting,
    /// Name of the evaluation-time classifier (`tp` for transported prototypes).
    pub learner: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Mean over all episodes of all seeds.
    pub accuracy: f64,
    /// Half-width over the pooled per-episode accuracies.
    pub ci95: f64,
    pub seed_means: Vec<f64>,
    pub episode_accuracies: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn new(setting: Setting, episode: &EpisodeConfig, seeds: Vec<u64>, per_seed: Vec<Vec<f64>>) -> Result<Self> {
        if seeds.len() != per_seed.len() || seeds.is_empty() {
            return Err(Error::Input(format!(
                "{} seeds but {} accuracy lists",
                seeds.len(),
                per_seed.len()
            )));
        }
        let episodes = per_seed[0].len();
        if episodes == 0 || per_seed.iter().any(|v| v.len() != episodes) {
            return Err(Error::Input("every seed needs the same nonzero episode count".into()));
        }
        let pooled: Vec<f64> = per_seed.iter().flatten().copied().collect();
        let (accuracy, ci95) = mean_and_ci(&pooled);
        let seed_means = per_seed.iter().map(|v| mean_and_ci(v).0).collect();
        Ok(Self {
            learner: setting.learner().for_evaluation().name(),
            setting,
            n_way: episode.n_way,
            k_shot: episode.k_shot,
            q_per_class: episode.q_per_class,
            episodes,
            seeds,
            accuracy,
            ci95,
            seed_means,
            episode_accuracies: per_seed,
        })
    }
}

/// Cells of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<Setting>,
}

impl AblationGrid {
    /// Ten versions per head: episodic training with either BN mode and OT
    /// never, at test time only, or at train and test time; ERM with either BN
    /// mode and OT never or at test time. Each is evaluated with and without
    /// support/query shift.
    pub fn full(heads: &[Head]) -> Self {
        let mut cells = Vec::new();
        for &head in heads {
            for shifted in [true, false] {
                for (regime, usages) in [
                    (Regime::Episodic, &OtUsage::ALL[..]),
                    (Regime::Erm, &[OtUsage::Never, OtUsage::TestOnly][..]),
                ] {
                    for bn in [BnMode::Conventional, BnMode::Transductive] {
                        for &ot in usages {
                            cells.push(Setting {
                                head,
                                regime,
                                bn,
                                ot,
                                shifted,
                            });
                        }
                    }
                }
            }
        }
        Self { cells }
    }

    pub fn single(cell: Setting) -> Self {
        Self { cells: vec![cell] }
    }
}

/// Everything shared by the cells of an ablation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSettings {
    pub backbone: BackboneConfig,
    /// Regime, BN mode, head and OT usage are overridden per cell.
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub part: SplitPart,
}

/// Which training run a cell needs. ERM ignores the head and BN mode at
/// training time, so one ERM backbone per seed serves every ERM cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CheckpointKey {
    pub regime: Regime,
    pub head: Option<Head>,
    pub ot_train: bool,
    pub bn: Option<BnMode>,
    pub seed: u64,
}

impl CheckpointKey {
    pub fn for_cell(cell: &Setting, seed: u64) -> Self {
        match cell.regime {
            Regime::Episodic => Self {
                regime: Regime::Episodic,
                head: Some(cell.head),
                ot_train: cell.ot.at_train(),
                bn: Some(cell.bn),
                seed,
            },
            Regime::Erm => Self {
                regime: Regime::Erm,
                head: None,
                ot_train: false,
                bn: None,
                seed,
            },
        }
    }

    pub fn file_name(&self) -> String {
        let mut name = self.regime.to_string();
        if let Some(h) = self.head {
            let _ = write!(name, "-{}", h.name());
        }
        if self.ot_train {
            name.push_str("-ot");
        }
        if let Some(bn) = self.bn {
            let _ = write!(name, "-{}", bn.short_name());
        }
        let _ = write!(name, "-seed{}.json", self.seed);
        name
    }

    fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let learner = match self.head {
            Some(h) => LearnerSpec::new(h, if self.ot_train { OtUsage::TrainAndTest } else { OtUsage::Never }),
            None => LearnerSpec::protonet(),
        };
        TrainConfig {
            regime: self.regime,
            learner: LearnerSpec {
                distance: base.learner.distance,
                transport: base.learner.transport,
                ..learner
            },
            bn: self.bn.unwrap_or(BnMode::Conventional),
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellOutcome {
    pub setting: Setting,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub cells: Vec<CellOutcome>,
    /// Checkpoint files written, if a directory was given.
    pub checkpoints: Vec<PathBuf>,
}

/// Train every checkpoint the grid needs (once per key), then evaluate each
/// cell on every seed. A failing training run or evaluation marks only the
/// cells that depend on it.
pub fn run_ablation(
    grid: &AblationGrid,
    settings: &AblationSettings,
    dataset: &GridDataset,
    split: &SplitSpec,
    checkpoint_dir: Option<&Path>,
) -> Result<AblationOutcome> {
    if settings.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    settings.train.validate()?;
    let mut keys: Vec<CheckpointKey> = Vec::new();
    for cell in &grid.cells {
        for &seed in &settings.seeds {
            let key = CheckpointKey::for_cell(cell, seed);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    let mut trained: HashMap<CheckpointKey, std::result::Result<BackboneParams, String>> = HashMap::new();
    let mut checkpoints = Vec::new();
    for key in keys {
        log::info!("training {}", key.file_name());
        let result = BackboneParams::init(&settings.backbone, key.seed)
            .and_then(|init| train(dataset, split, init, &key.train_config(&settings.train)))
            .map(|(params, _)| params);
        if let (Ok(params), Some(dir)) = (&result, checkpoint_dir) {
            let path = dir.join(key.file_name());
            save_checkpoint(params, &path)?;
            checkpoints.push(path);
        }
        if let Err(e) = &result {
            log::error!("training {} failed: {e}", key.file_name());
        }
        trained.insert(key, result.map_err(|e| e.to_string()));
    }

    let mut cells = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let outcome = evaluate_cell(cell, settings, dataset, split, &trained);
        if let Err(e) = &outcome {
            log::error!("cell {} failed: {e}", cell.label());
        }
        cells.push(match outcome {
            Ok(report) => CellOutcome {
                setting: *cell,
                report: Some(report),
                error: None,
            },
            Err(e) => CellOutcome {
                setting: *cell,
                report: None,
                error: Some(e),
            },
        });
    }
    Ok(AblationOutcome { cells, checkpoints })
}

fn evaluate_cell(
    cell: &Setting,
    settings: &AblationSettings,
    dataset: &GridDataset,
    split: &SplitSpec,
    trained: &HashMap<CheckpointKey, std::result::Result<BackboneParams, String>>,
) -> std::result::Result<EvalReport, String> {
    let episode = EpisodeConfig {
        shifted: cell.shifted,
        ..settings.episode
    };
    let sampler = EpisodeSampler::new(dataset, split, settings.part, episode).map_err(|e| e.to_string())?;
    let learner = LearnerSpec {
        distance: settings.train.learner.distance,
        transport: settings.train.learner.transport,
        ..cell.learner()
    };
    let mut per_seed = Vec::with_capacity(settings.seeds.len());
    for &seed in &settings.seeds {
        let params = trained
            .get(&CheckpointKey::for_cell(cell, seed))
            .ok_or_else(|| "checkpoint missing".to_string())?
            .as_ref()
            .map_err(|e| format!("training failed: {e}"))?;
        let accs = evaluate(params, &learner, cell.bn, &sampler, settings.eval_episodes, eval_seed(seed))
            .map_err(|e| e.to_string())?;
        per_seed.push(accs);
    }
    EvalReport::new(*cell, &episode, settings.seeds.clone(), per_seed).map_err(|e| e.to_string())
}

/// Episode seed for evaluation under a run seed; kept apart from the
/// training and validation streams.
pub fn eval_seed(seed: u64) -> u64 {
    crate::derive_seed(seed, 0xE7A1)
}

pub const CSV_HEADER: &str =
    "learner,head,regime,bn,ot,shifted,n_way,k_shot,q_per_class,episodes,seeds,accuracy,ci95,seed_means,error";

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One CSV row per cell; failed cells keep their setting columns and carry
/// the error message.
pub fn reports_to_csv(cells: &[CellOutcome]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        let s = &c.setting;
        let lead = format!(
            "{},{},{},{},{},{}",
            s.learner().for_evaluation().name(),
            s.head.name(),
            s.regime,
            s.bn.short_name(),
            s.ot.label(),
            s.shifted
        );
        match &c.report {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{lead},{},{},{},{},{},{},{},{},",
                    r.n_way,
                    r.k_shot,
                    r.q_per_class,
                    r.episodes,
                    join(&r.seeds),
                    r.accuracy,
                    r.ci95,
                    join(&r.seed_means)
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{lead},,,,,,,,,{}",
                    csv_field(c.error.as_deref().unwrap_or("unknown error"))
                );
            }
        }
    }
    out
}
